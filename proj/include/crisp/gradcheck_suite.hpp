// SPDX-License-Identifier: Apache-2.0
#pragma once

// Randomized gradient-check cases for every tensor primitive. One registry
// shared by the unit tests, the acceptance gate, and the `gradcheck` CLI
// command so they all exercise the identical construction.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "crisp/rng.hpp"
#include "crisp/tensor.hpp"

namespace crisp {

struct GradCheckCase {
    Op op;
    OpAttrs attrs;
    std::vector<Tensor> inputs;
    std::vector<bool> check;  // empty = all inputs
};

namespace detail {

inline Tensor rand_tensor(Rng& rng, std::vector<int> shape, float lo = -1.0f,
                          float hi = 1.0f) {
    std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(v));
}

// Values kept away from the ReLU kink so finite differences stay valid.
inline Tensor rand_tensor_off_zero(Rng& rng, std::vector<int> shape) {
    std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) {
        const float m = rng.uniform(0.05f, 1.0f);
        x = rng.uniform() < 0.5f ? -m : m;
    }
    return Tensor::from_data(std::move(shape), std::move(v));
}

// Coarse value grid plus a distinct per-cell offset inside every aligned 2x2
// window, so pooling windows never contain ties (finite differences would
// otherwise flip the argmax).
inline Tensor rand_tensor_tie_free(Rng& rng, int c, int h, int w) {
    std::vector<float> v(static_cast<size_t>(c) * h * w);
    size_t i = 0;
    for (int cc = 0; cc < c; ++cc)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const float grid =
                    0.1f * static_cast<float>(rng.uniform_int(21) - 10);
                v[i++] = grid + 0.013f * static_cast<float>((y % 2) * 2 + x % 2);
            }
    return Tensor::from_data({c, h, w}, std::move(v));
}

inline int rdim(Rng& rng, int lo, int hi) {
    return lo + rng.uniform_int(hi - lo + 1);
}

}  // namespace detail

inline GradCheckCase make_gradcheck_case(const std::string& name,
                                         uint64_t seed) {
    using detail::rand_tensor;
    using detail::rdim;
    Rng rng(mix_seed(seed, std::hash<std::string>{}(name)));
    GradCheckCase c;
    if (name == "add_same") {
        int a = rdim(rng, 2, 5), b = rdim(rng, 2, 5);
        c = {Op::kAdd, {}, {rand_tensor(rng, {a, b}), rand_tensor(rng, {a, b})}};
    } else if (name == "add_vector") {
        int a = rdim(rng, 2, 5), b = rdim(rng, 2, 6);
        c = {Op::kAdd, {}, {rand_tensor(rng, {a, b}), rand_tensor(rng, {b})}};
    } else if (name == "add_scalar") {
        int a = rdim(rng, 2, 5), b = rdim(rng, 2, 5);
        c = {Op::kAdd, {}, {rand_tensor(rng, {a, b}), rand_tensor(rng, {1})}};
    } else if (name == "sub") {
        int a = rdim(rng, 2, 5), b = rdim(rng, 2, 5);
        c = {Op::kSub, {}, {rand_tensor(rng, {a, b}), rand_tensor(rng, {a, b})}};
    } else if (name == "mul_same") {
        int a = rdim(rng, 2, 5), b = rdim(rng, 2, 5);
        c = {Op::kMul, {}, {rand_tensor(rng, {a, b}), rand_tensor(rng, {a, b})}};
    } else if (name == "mul_channel") {
        int ch = rdim(rng, 2, 4), h = rdim(rng, 2, 5), w = rdim(rng, 2, 5);
        c = {Op::kMul, {}, {rand_tensor(rng, {ch, h, w}), rand_tensor(rng, {ch})}};
    } else if (name == "mul_scalar") {
        int a = rdim(rng, 2, 5), b = rdim(rng, 2, 5);
        c = {Op::kMul, {}, {rand_tensor(rng, {a, b}), rand_tensor(rng, {1})}};
    } else if (name == "scale") {
        int a = rdim(rng, 2, 5), b = rdim(rng, 2, 5);
        OpAttrs at;
        at.scalar = rng.uniform(-2.0f, 2.0f);
        c = {Op::kScale, at, {rand_tensor(rng, {a, b})}};
    } else if (name == "matmul") {
        int m = rdim(rng, 2, 5), k = rdim(rng, 2, 5), n = rdim(rng, 2, 5);
        c = {Op::kMatMul, {}, {rand_tensor(rng, {m, k}), rand_tensor(rng, {k, n})}};
    } else if (name == "conv2d") {
        int ci = rdim(rng, 1, 3), co = rdim(rng, 1, 3);
        int h = rdim(rng, 5, 8), w = rdim(rng, 5, 8);
        OpAttrs at;
        at.stride = 1;
        at.pad = 1;
        c = {Op::kConv2d, at,
             {rand_tensor(rng, {ci, h, w}), rand_tensor(rng, {co, ci, 3, 3}),
              rand_tensor(rng, {co})}};
    } else if (name == "conv2d_stride2") {
        int ci = rdim(rng, 1, 3), co = rdim(rng, 1, 3);
        int h = rdim(rng, 6, 9), w = rdim(rng, 6, 9);
        OpAttrs at;
        at.stride = 2;
        at.pad = 1;
        c = {Op::kConv2d, at,
             {rand_tensor(rng, {ci, h, w}), rand_tensor(rng, {co, ci, 3, 3}),
              rand_tensor(rng, {co})}};
    } else if (name == "conv2d_patch") {
        // patch-embedding geometry: kernel = stride, no padding
        int ci = rdim(rng, 1, 3), co = rdim(rng, 1, 3), k = rdim(rng, 2, 4);
        OpAttrs at;
        at.stride = k;
        at.pad = 0;
        c = {Op::kConv2d, at,
             {rand_tensor(rng, {ci, 2 * k, 3 * k}),
              rand_tensor(rng, {co, ci, k, k}), rand_tensor(rng, {co})}};
    } else if (name == "dwconv2d") {
        int ch = rdim(rng, 1, 4), h = rdim(rng, 5, 8), w = rdim(rng, 5, 8);
        OpAttrs at;
        at.pad = 1;
        c = {Op::kDwConv2d, at,
             {rand_tensor(rng, {ch, h, w}), rand_tensor(rng, {ch, 3, 3}),
              rand_tensor(rng, {ch})}};
    } else if (name == "upsample2x") {
        int ch = rdim(rng, 1, 3), h = rdim(rng, 2, 5), w = rdim(rng, 2, 5);
        c = {Op::kUpsample2x, {}, {rand_tensor(rng, {ch, h, w})}};
    } else if (name == "maxpool2x2") {
        int ch = rdim(rng, 1, 3), h = 2 * rdim(rng, 2, 4), w = 2 * rdim(rng, 2, 4);
        c = {Op::kMaxPool2x2, {}, {detail::rand_tensor_tie_free(rng, ch, h, w)}};
    } else if (name == "concat_axis0") {
        int h = rdim(rng, 2, 4), w = rdim(rng, 2, 4);
        int c1 = rdim(rng, 1, 3), c2 = rdim(rng, 1, 3);
        OpAttrs at;
        at.axis = 0;
        c = {Op::kConcat, at,
             {rand_tensor(rng, {c1, h, w}), rand_tensor(rng, {c2, h, w})}};
    } else if (name == "concat_axis1") {
        int m = rdim(rng, 2, 4), n1 = rdim(rng, 2, 4), n2 = rdim(rng, 2, 4);
        OpAttrs at;
        at.axis = 1;
        c = {Op::kConcat, at,
             {rand_tensor(rng, {m, n1}), rand_tensor(rng, {m, n2})}};
    } else if (name == "relu") {
        int a = rdim(rng, 2, 5), b = rdim(rng, 2, 5);
        c = {Op::kRelu, {}, {detail::rand_tensor_off_zero(rng, {a, b})}};
    } else if (name == "gelu") {
        int a = rdim(rng, 2, 5), b = rdim(rng, 2, 5);
        c = {Op::kGelu, {}, {rand_tensor(rng, {a, b}, -2.0f, 2.0f)}};
    } else if (name == "layernorm") {
        int t = rdim(rng, 1, 4), d = rdim(rng, 4, 8);
        OpAttrs at;
        at.eps = 1e-5f;
        c = {Op::kLayerNorm, at,
             {rand_tensor(rng, {t, d}), rand_tensor(rng, {d}, 0.5f, 1.5f),
              rand_tensor(rng, {d})}};
    } else if (name == "softmax_axis0" || name == "softmax_axis1") {
        int m = rdim(rng, 2, 5), n = rdim(rng, 2, 5);
        OpAttrs at;
        at.axis = (name == "softmax_axis1") ? 1 : 0;
        c = {Op::kSoftmax, at, {rand_tensor(rng, {m, n}, -2.0f, 2.0f)}};
    } else if (name == "l2_normalize_axis0" || name == "l2_normalize_axis1") {
        int m = rdim(rng, 2, 5), n = rdim(rng, 2, 5);
        OpAttrs at;
        at.axis = (name == "l2_normalize_axis1") ? 1 : 0;
        at.eps = 1e-6f;
        c = {Op::kL2Normalize, at, {rand_tensor(rng, {m, n})}};
    } else if (name == "mse") {
        int a = rdim(rng, 2, 5), b = rdim(rng, 2, 5);
        c = {Op::kMse, {}, {rand_tensor(rng, {a, b}), rand_tensor(rng, {a, b})}};
    } else if (name == "sum") {
        int a = rdim(rng, 2, 5), b = rdim(rng, 2, 5);
        c = {Op::kSum, {}, {rand_tensor(rng, {a, b})}};
    } else if (name == "transpose2d") {
        int m = rdim(rng, 2, 5), n = rdim(rng, 2, 5);
        c = {Op::kTranspose2d, {}, {rand_tensor(rng, {m, n})}};
    } else if (name == "reshape") {
        int m = rdim(rng, 2, 4), n = rdim(rng, 2, 4);
        OpAttrs at;
        at.shape = {n, m};
        c = {Op::kReshape, at, {rand_tensor(rng, {m, n})}};
    } else if (name == "slice") {
        int rows = rdim(rng, 3, 6), inner = rdim(rng, 2, 4);
        OpAttrs at;
        at.start = rng.uniform_int(rows - 1);
        at.count = 1 + rng.uniform_int(rows - at.start);
        c = {Op::kSlice, at, {rand_tensor(rng, {rows, inner})}};
    } else if (name == "batchnorm2d_train" || name == "batchnorm2d_eval") {
        int ch = rdim(rng, 1, 3), h = rdim(rng, 3, 5), w = rdim(rng, 3, 5);
        OpAttrs at;
        at.training = (name == "batchnorm2d_train");
        at.momentum = 0.1f;
        at.eps = 1e-5f;
        c = {Op::kBatchNorm2d, at,
             {rand_tensor(rng, {ch, h, w}), rand_tensor(rng, {ch}, 0.5f, 1.5f),
              rand_tensor(rng, {ch}), rand_tensor(rng, {ch}, -0.2f, 0.2f),
              rand_tensor(rng, {ch}, 0.5f, 1.5f)}};
        c.check = {true, true, true, false, false};  // running stats: buffers
    } else {
        throw ConfigError("gradcheck: unknown op case '" + name + "'");
    }
    return c;
}

inline const std::vector<std::string>& gradcheck_op_names() {
    static const std::vector<std::string> names = {
        "add_same",          "add_vector",         "add_scalar",
        "sub",               "mul_same",           "mul_channel",
        "mul_scalar",        "scale",              "matmul",
        "conv2d",            "conv2d_stride2",     "conv2d_patch",
        "dwconv2d",          "upsample2x",         "maxpool2x2",
        "concat_axis0",      "concat_axis1",       "relu",
        "gelu",              "layernorm",          "softmax_axis0",
        "softmax_axis1",     "l2_normalize_axis0", "l2_normalize_axis1",
        "mse",               "sum",                "transpose2d",
        "reshape",           "slice",              "batchnorm2d_train",
        "batchnorm2d_eval",
    };
    return names;
}

inline GradCheckReport run_gradcheck(const std::string& name, uint64_t seed,
                                     float epsilon = 1e-3f) {
    GradCheckCase c = make_gradcheck_case(name, seed);
    return grad_check(c.op, c.attrs, c.inputs, epsilon, mix_seed(seed, 0xfeed),
                      c.check);
}

}  // namespace crisp
