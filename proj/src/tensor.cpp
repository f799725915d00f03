// SPDX-License-Identifier: Apache-2.0
#include "crisp/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "crisp/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace crisp {

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

static void validate_shape(const std::vector<int>& shape) {
    if (shape.empty())
        throw ShapeError("tensor: rank-0 shapes are not supported");
    for (int d : shape)
        if (d <= 0)
            throw ShapeError("tensor: non-positive extent in " +
                             shape_str(shape));
}

Tensor make_tensor(std::vector<int> shape, bool requires_grad) {
    validate_shape(shape);
    auto n = std::make_shared<TensorNode>();
    n->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    return make_tensor(std::move(shape), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
    Tensor t = make_tensor(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data,
                         bool requires_grad) {
    validate_shape(shape);
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
        throw ShapeError("tensor: " + std::to_string(data.size()) +
                         " values do not fill shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

static void require_defined(const Tensor& t, const char* what) {
    if (!t.defined()) throw ShapeError(std::string(what) + ": undefined tensor");
}

const std::vector<int>& Tensor::shape() const {
    require_defined(*this, "shape");
    return node_->shape;
}

int64_t Tensor::numel() const {
    require_defined(*this, "numel");
    return static_cast<int64_t>(node_->data.size());
}

const float* Tensor::data() const {
    require_defined(*this, "data");
    return node_->data.data();
}

float* Tensor::mutable_data() {
    require_defined(*this, "mutable_data");
    return node_->data.data();
}

float Tensor::value() const {
    require_defined(*this, "value");
    if (numel() != 1)
        throw ShapeError("value: tensor " + shape_str(shape()) +
                         " is not a scalar");
    return node_->data[0];
}

bool Tensor::requires_grad() const {
    return node_ != nullptr && node_->requires_grad;
}

void Tensor::set_requires_grad(bool rg) {
    require_defined(*this, "set_requires_grad");
    node_->requires_grad = rg;
}

bool Tensor::has_grad() const {
    return node_ != nullptr && !node_->grad.empty();
}

const std::vector<float>& Tensor::grad() const {
    require_defined(*this, "grad");
    if (node_->grad.empty())
        throw GraphError("grad: no gradient has been accumulated");
    return node_->grad;
}

void Tensor::ensure_grad() {
    require_defined(*this, "ensure_grad");
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0f);
}

void Tensor::accumulate_grad(const std::vector<float>& g) {
    ensure_grad();
    if (g.size() != node_->grad.size())
        throw ShapeError("accumulate_grad: buffer size mismatch");
    for (size_t i = 0; i < g.size(); ++i) node_->grad[i] += g[i];
}

void Tensor::zero_grad() {
    require_defined(*this, "zero_grad");
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

// ---------------------------------------------------------------------------
// Op metadata
// ---------------------------------------------------------------------------

const char* op_name(Op op) {
    switch (op) {
        case Op::kAdd: return "add";
        case Op::kSub: return "sub";
        case Op::kMul: return "mul";
        case Op::kScale: return "scale";
        case Op::kMatMul: return "matmul";
        case Op::kConv2d: return "conv2d";
        case Op::kDwConv2d: return "dwconv2d";
        case Op::kUpsample2x: return "upsample2x";
        case Op::kMaxPool2x2: return "maxpool2x2";
        case Op::kConcat: return "concat";
        case Op::kRelu: return "relu";
        case Op::kGelu: return "gelu";
        case Op::kLayerNorm: return "layernorm";
        case Op::kSoftmax: return "softmax";
        case Op::kL2Normalize: return "l2_normalize";
        case Op::kMse: return "mse";
        case Op::kSum: return "sum";
        case Op::kTranspose2d: return "transpose2d";
        case Op::kReshape: return "reshape";
        case Op::kSlice: return "slice";
        case Op::kBatchNorm2d: return "batchnorm2d";
    }
    return "?";
}

static ShapeError op_shape_error(Op op, const std::string& detail) {
    return ShapeError(std::string(op_name(op)) + ": " + detail);
}

static void require_rank(Op op, const Tensor& t, int rank, const char* role) {
    if (t.rank() != rank)
        throw op_shape_error(op, std::string(role) + " must have rank " +
                                     std::to_string(rank) + ", got " +
                                     shape_str(t.shape()));
}

static void require_arity(Op op, const std::vector<Tensor>& in, size_t n) {
    if (in.size() != n)
        throw op_shape_error(op, "expected " + std::to_string(n) +
                                     " inputs, got " +
                                     std::to_string(in.size()));
    for (const auto& t : in) require_defined(t, op_name(op));
}

// Broadcast classification shared by add / mul.
enum class Bcast { kSame, kVector, kScalarOne };

static Bcast classify_bcast(Op op, const Tensor& a, const Tensor& b,
                            int vector_dim) {
    if (a.shape() == b.shape()) return Bcast::kSame;
    if (b.numel() == 1 && b.rank() == 1) return Bcast::kScalarOne;
    if (b.rank() == 1 && b.dim(0) == a.shape()[static_cast<size_t>(vector_dim)])
        return Bcast::kVector;
    throw op_shape_error(op, "incompatible shapes " + shape_str(a.shape()) +
                                 " and " + shape_str(b.shape()));
}

// Walk a tensor as outer x n x inner around one axis.
struct AxisWalk {
    int64_t outer = 1, n = 1, inner = 1;
};

static AxisWalk axis_walk(Op op, const std::vector<int>& shape, int axis) {
    if (axis < 0 || axis >= static_cast<int>(shape.size()))
        throw op_shape_error(op, "axis " + std::to_string(axis) +
                                     " out of range for " + shape_str(shape));
    AxisWalk w;
    for (int i = 0; i < axis; ++i) w.outer *= shape[static_cast<size_t>(i)];
    w.n = shape[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
        w.inner *= shape[i];
    return w;
}

// ---------------------------------------------------------------------------
// Convolution kernels.
//
// The 3x3 / stride 1 / pad 1 case (nearly every convolution in the model)
// runs as per-weight shifted-row accumulation: contiguous inner loops that
// the compiler can vectorize, with float64 accumulators. Other geometries go
// through the straightforward direct loops, also with float64 accumulation.
// ---------------------------------------------------------------------------

// acc[y][x] += wv * src[y+dy][x+dx] over the in-bounds region.
static void axpy_shift(double* acc, const float* src, int h, int w, float wv,
                       int dy, int dx) {
    const int y0 = std::max(0, -dy), y1 = h - 1 - std::max(0, dy);
    const int x0 = std::max(0, -dx), x1 = w - 1 - std::max(0, dx);
    if (y1 < y0 || x1 < x0) return;
    const double wd = wv;
    for (int y = y0; y <= y1; ++y) {
        double* arow = acc + static_cast<int64_t>(y) * w;
        const float* srow = src + static_cast<int64_t>(y + dy) * w + dx;
        for (int x = x0; x <= x1; ++x) arow[x] += wd * srow[x];
    }
}

// sum over the in-bounds region of a[y][x] * b[y+dy][x+dx].
static double dot_shift(const float* a, const float* b, int h, int w, int dy,
                        int dx) {
    const int y0 = std::max(0, -dy), y1 = h - 1 - std::max(0, dy);
    const int x0 = std::max(0, -dx), x1 = w - 1 - std::max(0, dx);
    double s = 0.0;
    for (int y = y0; y <= y1; ++y) {
        const float* ar = a + static_cast<int64_t>(y) * w;
        const float* br = b + static_cast<int64_t>(y + dy) * w + dx;
        for (int x = x0; x <= x1; ++x)
            s += static_cast<double>(ar[x]) * static_cast<double>(br[x]);
    }
    return s;
}

struct ConvDims {
    int cin, h, w, cout, kh, kw, oh, ow, stride, pad;
    bool fast;  // 3x3, stride 1, pad 1
};

static ConvDims conv_dims(Op op, const Tensor& x, const Tensor& wt,
                          const Tensor& b, int stride, int pad,
                          bool depthwise) {
    require_rank(op, x, 3, "input");
    require_rank(op, wt, depthwise ? 3 : 4, "weight");
    require_rank(op, b, 1, "bias");
    ConvDims d{};
    d.cin = x.dim(0);
    d.h = x.dim(1);
    d.w = x.dim(2);
    if (depthwise) {
        d.cout = d.cin;
        d.kh = wt.dim(1);
        d.kw = wt.dim(2);
        if (wt.dim(0) != d.cin)
            throw op_shape_error(op, "weight " + shape_str(wt.shape()) +
                                         " does not match input channels of " +
                                         shape_str(x.shape()));
    } else {
        d.cout = wt.dim(0);
        d.kh = wt.dim(2);
        d.kw = wt.dim(3);
        if (wt.dim(1) != d.cin)
            throw op_shape_error(op, "weight " + shape_str(wt.shape()) +
                                         " does not match input channels of " +
                                         shape_str(x.shape()));
    }
    if (b.dim(0) != d.cout)
        throw op_shape_error(op, "bias " + shape_str(b.shape()) +
                                     " does not match output channels " +
                                     std::to_string(d.cout));
    if (stride < 1 || pad < 0)
        throw op_shape_error(op, "invalid stride/pad");
    d.stride = stride;
    d.pad = pad;
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw)
        throw op_shape_error(op, "kernel " + std::to_string(d.kh) + "x" +
                                     std::to_string(d.kw) +
                                     " exceeds padded input " +
                                     shape_str(x.shape()));
    d.fast = (d.kh == 3 && d.kw == 3 && stride == 1 && pad == 1);
    return d;
}

static void conv2d_forward(const ConvDims& d, const float* x, const float* w,
                           const float* b, float* y) {
    const int64_t plane = static_cast<int64_t>(d.h) * d.w;
    const int64_t oplane = static_cast<int64_t>(d.oh) * d.ow;
    if (d.fast) {
        std::vector<double> acc(static_cast<size_t>(plane));
        for (int co = 0; co < d.cout; ++co) {
            std::fill(acc.begin(), acc.end(), static_cast<double>(b[co]));
            for (int ci = 0; ci < d.cin; ++ci) {
                const float* xp = x + ci * plane;
                const float* wp = w + ((static_cast<int64_t>(co) * d.cin + ci) * 9);
                for (int k = 0; k < 9; ++k)
                    axpy_shift(acc.data(), xp, d.h, d.w, wp[k], k / 3 - 1,
                               k % 3 - 1);
            }
            float* yp = y + co * oplane;
            for (int64_t i = 0; i < plane; ++i)
                yp[i] = static_cast<float>(acc[static_cast<size_t>(i)]);
        }
        return;
    }
    for (int co = 0; co < d.cout; ++co) {
        float* yp = y + co * oplane;
        for (int oy = 0; oy < d.oh; ++oy) {
            for (int ox = 0; ox < d.ow; ++ox) {
                double s = b[co];
                for (int ci = 0; ci < d.cin; ++ci) {
                    const float* xp = x + ci * plane;
                    const float* wp =
                        w + ((static_cast<int64_t>(co) * d.cin + ci) * d.kh * d.kw);
                    for (int ky = 0; ky < d.kh; ++ky) {
                        const int iy = oy * d.stride + ky - d.pad;
                        if (iy < 0 || iy >= d.h) continue;
                        for (int kx = 0; kx < d.kw; ++kx) {
                            const int ix = ox * d.stride + kx - d.pad;
                            if (ix < 0 || ix >= d.w) continue;
                            s += static_cast<double>(xp[iy * d.w + ix]) *
                                 static_cast<double>(wp[ky * d.kw + kx]);
                        }
                    }
                }
                yp[oy * d.ow + ox] = static_cast<float>(s);
            }
        }
    }
}

static void conv2d_backward(const ConvDims& d, const float* x, const float* w,
                            const float* gy, std::vector<float>* gx,
                            std::vector<float>* gw, std::vector<float>* gb) {
    const int64_t plane = static_cast<int64_t>(d.h) * d.w;
    const int64_t oplane = static_cast<int64_t>(d.oh) * d.ow;
    if (gb) {
        for (int co = 0; co < d.cout; ++co) {
            double s = 0.0;
            const float* gp = gy + co * oplane;
            for (int64_t i = 0; i < oplane; ++i) s += gp[i];
            (*gb)[static_cast<size_t>(co)] += static_cast<float>(s);
        }
    }
    if (d.fast) {
        if (gx) {
            std::vector<double> acc(static_cast<size_t>(plane));
            for (int ci = 0; ci < d.cin; ++ci) {
                std::fill(acc.begin(), acc.end(), 0.0);
                for (int co = 0; co < d.cout; ++co) {
                    const float* gp = gy + co * oplane;
                    const float* wp =
                        w + ((static_cast<int64_t>(co) * d.cin + ci) * 9);
                    for (int k = 0; k < 9; ++k)
                        axpy_shift(acc.data(), gp, d.h, d.w, wp[k],
                                   1 - k / 3, 1 - k % 3);
                }
                float* gxp = gx->data() + ci * plane;
                for (int64_t i = 0; i < plane; ++i)
                    gxp[i] += static_cast<float>(acc[static_cast<size_t>(i)]);
            }
        }
        if (gw) {
            for (int co = 0; co < d.cout; ++co) {
                const float* gp = gy + co * oplane;
                for (int ci = 0; ci < d.cin; ++ci) {
                    const float* xp = x + ci * plane;
                    float* gwp = gw->data() +
                                 (static_cast<int64_t>(co) * d.cin + ci) * 9;
                    for (int k = 0; k < 9; ++k)
                        gwp[k] += static_cast<float>(dot_shift(
                            gp, xp, d.h, d.w, k / 3 - 1, k % 3 - 1));
                }
            }
        }
        return;
    }
    std::vector<double> gxd(gx ? static_cast<size_t>(d.cin) * plane : 0, 0.0);
    std::vector<double> gwd(
        gw ? static_cast<size_t>(d.cout) * d.cin * d.kh * d.kw : 0, 0.0);
    for (int co = 0; co < d.cout; ++co) {
        const float* gp = gy + co * oplane;
        for (int oy = 0; oy < d.oh; ++oy) {
            for (int ox = 0; ox < d.ow; ++ox) {
                const double g = gp[oy * d.ow + ox];
                if (g == 0.0) continue;
                for (int ci = 0; ci < d.cin; ++ci) {
                    const float* xp = x + ci * plane;
                    const int64_t wbase =
                        (static_cast<int64_t>(co) * d.cin + ci) * d.kh * d.kw;
                    for (int ky = 0; ky < d.kh; ++ky) {
                        const int iy = oy * d.stride + ky - d.pad;
                        if (iy < 0 || iy >= d.h) continue;
                        for (int kx = 0; kx < d.kw; ++kx) {
                            const int ix = ox * d.stride + kx - d.pad;
                            if (ix < 0 || ix >= d.w) continue;
                            if (gw)
                                gwd[static_cast<size_t>(wbase + ky * d.kw + kx)] +=
                                    g * xp[iy * d.w + ix];
                            if (gx)
                                gxd[static_cast<size_t>(ci * plane + iy * d.w +
                                                        ix)] +=
                                    g * w[wbase + ky * d.kw + kx];
                        }
                    }
                }
            }
        }
    }
    if (gx)
        for (size_t i = 0; i < gxd.size(); ++i)
            (*gx)[i] += static_cast<float>(gxd[i]);
    if (gw)
        for (size_t i = 0; i < gwd.size(); ++i)
            (*gw)[i] += static_cast<float>(gwd[i]);
}

// Depthwise: one kernel per channel, stride 1.
static void dwconv2d_forward(const ConvDims& d, const float* x, const float* w,
                             const float* b, float* y) {
    const int64_t plane = static_cast<int64_t>(d.h) * d.w;
    const int64_t oplane = static_cast<int64_t>(d.oh) * d.ow;
    if (d.fast) {
        std::vector<double> acc(static_cast<size_t>(plane));
        for (int c = 0; c < d.cin; ++c) {
            std::fill(acc.begin(), acc.end(), static_cast<double>(b[c]));
            const float* wp = w + static_cast<int64_t>(c) * 9;
            for (int k = 0; k < 9; ++k)
                axpy_shift(acc.data(), x + c * plane, d.h, d.w, wp[k],
                           k / 3 - 1, k % 3 - 1);
            float* yp = y + c * oplane;
            for (int64_t i = 0; i < plane; ++i)
                yp[i] = static_cast<float>(acc[static_cast<size_t>(i)]);
        }
        return;
    }
    for (int c = 0; c < d.cin; ++c) {
        const float* xp = x + c * plane;
        const float* wp = w + static_cast<int64_t>(c) * d.kh * d.kw;
        float* yp = y + c * oplane;
        for (int oy = 0; oy < d.oh; ++oy) {
            for (int ox = 0; ox < d.ow; ++ox) {
                double s = b[c];
                for (int ky = 0; ky < d.kh; ++ky) {
                    const int iy = oy + ky - d.pad;
                    if (iy < 0 || iy >= d.h) continue;
                    for (int kx = 0; kx < d.kw; ++kx) {
                        const int ix = ox + kx - d.pad;
                        if (ix < 0 || ix >= d.w) continue;
                        s += static_cast<double>(xp[iy * d.w + ix]) *
                             static_cast<double>(wp[ky * d.kw + kx]);
                    }
                }
                yp[oy * d.ow + ox] = static_cast<float>(s);
            }
        }
    }
}

static void dwconv2d_backward(const ConvDims& d, const float* x,
                              const float* w, const float* gy,
                              std::vector<float>* gx, std::vector<float>* gw,
                              std::vector<float>* gb) {
    const int64_t plane = static_cast<int64_t>(d.h) * d.w;
    const int64_t oplane = static_cast<int64_t>(d.oh) * d.ow;
    for (int c = 0; c < d.cin; ++c) {
        const float* gp = gy + c * oplane;
        const float* xp = x + c * plane;
        const float* wp = w + static_cast<int64_t>(c) * d.kh * d.kw;
        if (gb) {
            double s = 0.0;
            for (int64_t i = 0; i < oplane; ++i) s += gp[i];
            (*gb)[static_cast<size_t>(c)] += static_cast<float>(s);
        }
        if (d.fast) {
            if (gx) {
                std::vector<double> acc(static_cast<size_t>(plane), 0.0);
                for (int k = 0; k < 9; ++k)
                    axpy_shift(acc.data(), gp, d.h, d.w, wp[k], 1 - k / 3,
                               1 - k % 3);
                float* gxp = gx->data() + c * plane;
                for (int64_t i = 0; i < plane; ++i)
                    gxp[i] += static_cast<float>(acc[static_cast<size_t>(i)]);
            }
            if (gw) {
                float* gwp = gw->data() + static_cast<int64_t>(c) * 9;
                for (int k = 0; k < 9; ++k)
                    gwp[k] += static_cast<float>(
                        dot_shift(gp, xp, d.h, d.w, k / 3 - 1, k % 3 - 1));
            }
            continue;
        }
        std::vector<double> gxd(gx ? static_cast<size_t>(plane) : 0, 0.0);
        std::vector<double> gwd(gw ? static_cast<size_t>(d.kh) * d.kw : 0, 0.0);
        for (int oy = 0; oy < d.oh; ++oy) {
            for (int ox = 0; ox < d.ow; ++ox) {
                const double g = gp[oy * d.ow + ox];
                for (int ky = 0; ky < d.kh; ++ky) {
                    const int iy = oy + ky - d.pad;
                    if (iy < 0 || iy >= d.h) continue;
                    for (int kx = 0; kx < d.kw; ++kx) {
                        const int ix = ox + kx - d.pad;
                        if (ix < 0 || ix >= d.w) continue;
                        if (gw)
                            gwd[static_cast<size_t>(ky * d.kw + kx)] +=
                                g * xp[iy * d.w + ix];
                        if (gx)
                            gxd[static_cast<size_t>(iy * d.w + ix)] +=
                                g * wp[ky * d.kw + kx];
                    }
                }
            }
        }
        if (gx) {
            float* gxp = gx->data() + c * plane;
            for (int64_t i = 0; i < plane; ++i)
                gxp[i] += static_cast<float>(gxd[static_cast<size_t>(i)]);
        }
        if (gw) {
            float* gwp = gw->data() + static_cast<int64_t>(c) * d.kh * d.kw;
            for (int k = 0; k < d.kh * d.kw; ++k)
                gwp[k] += static_cast<float>(gwd[static_cast<size_t>(k)]);
        }
    }
}

// ---------------------------------------------------------------------------
// Forward evaluation
// ---------------------------------------------------------------------------

static Tensor eval_op(Op op, const OpAttrs& attrs,
                      const std::vector<Tensor>& in) {
    switch (op) {
        case Op::kAdd: {
            require_arity(op, in, 2);
            const Tensor &a = in[0], &b = in[1];
            // vector form broadcasts over the trailing dimension (bias add)
            Bcast bc = classify_bcast(op, a, b,
                                      a.rank() - 1);
            Tensor y = Tensor::zeros(a.shape());
            const float* pa = a.data();
            const float* pb = b.data();
            float* py = y.mutable_data();
            const int64_t n = a.numel();
            if (bc == Bcast::kSame) {
                for (int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
            } else if (bc == Bcast::kScalarOne) {
                const float s = pb[0];
                for (int64_t i = 0; i < n; ++i) py[i] = pa[i] + s;
            } else {
                const int64_t d = b.numel();
                for (int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i % d];
            }
            return y;
        }
        case Op::kSub: {
            require_arity(op, in, 2);
            if (in[0].shape() != in[1].shape())
                throw op_shape_error(op, "incompatible shapes " +
                                             shape_str(in[0].shape()) + " and " +
                                             shape_str(in[1].shape()));
            Tensor y = Tensor::zeros(in[0].shape());
            const float* pa = in[0].data();
            const float* pb = in[1].data();
            float* py = y.mutable_data();
            for (int64_t i = 0; i < in[0].numel(); ++i) py[i] = pa[i] - pb[i];
            return y;
        }
        case Op::kMul: {
            require_arity(op, in, 2);
            const Tensor &a = in[0], &b = in[1];
            // vector form broadcasts over the leading (channel) dimension
            Bcast bc = classify_bcast(op, a, b, 0);
            Tensor y = Tensor::zeros(a.shape());
            const float* pa = a.data();
            const float* pb = b.data();
            float* py = y.mutable_data();
            const int64_t n = a.numel();
            if (bc == Bcast::kSame) {
                for (int64_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
            } else if (bc == Bcast::kScalarOne) {
                const float s = pb[0];
                for (int64_t i = 0; i < n; ++i) py[i] = pa[i] * s;
            } else {
                const int64_t inner = n / b.numel();
                for (int64_t c = 0; c < b.numel(); ++c) {
                    const float s = pb[c];
                    for (int64_t i = 0; i < inner; ++i)
                        py[c * inner + i] = pa[c * inner + i] * s;
                }
            }
            return y;
        }
        case Op::kScale: {
            require_arity(op, in, 1);
            Tensor y = Tensor::zeros(in[0].shape());
            const float* px = in[0].data();
            float* py = y.mutable_data();
            for (int64_t i = 0; i < in[0].numel(); ++i)
                py[i] = px[i] * attrs.scalar;
            return y;
        }
        case Op::kMatMul: {
            require_arity(op, in, 2);
            require_rank(op, in[0], 2, "lhs");
            require_rank(op, in[1], 2, "rhs");
            const int m = in[0].dim(0), k = in[0].dim(1);
            if (in[1].dim(0) != k)
                throw op_shape_error(op, "incompatible shapes " +
                                             shape_str(in[0].shape()) + " and " +
                                             shape_str(in[1].shape()));
            const int nn = in[1].dim(1);
            Tensor y = Tensor::zeros({m, nn});
            const float* pa = in[0].data();
            const float* pb = in[1].data();
            float* py = y.mutable_data();
            std::vector<double> row(static_cast<size_t>(nn));
            for (int i = 0; i < m; ++i) {
                std::fill(row.begin(), row.end(), 0.0);
                for (int kk = 0; kk < k; ++kk) {
                    const double av = pa[i * k + kk];
                    const float* brow = pb + static_cast<int64_t>(kk) * nn;
                    for (int j = 0; j < nn; ++j) row[static_cast<size_t>(j)] += av * brow[j];
                }
                for (int j = 0; j < nn; ++j)
                    py[static_cast<int64_t>(i) * nn + j] =
                        static_cast<float>(row[static_cast<size_t>(j)]);
            }
            return y;
        }
        case Op::kConv2d: {
            require_arity(op, in, 3);
            ConvDims d = conv_dims(op, in[0], in[1], in[2], attrs.stride,
                                   attrs.pad, false);
            Tensor y = Tensor::zeros({d.cout, d.oh, d.ow});
            conv2d_forward(d, in[0].data(), in[1].data(), in[2].data(),
                           y.mutable_data());
            return y;
        }
        case Op::kDwConv2d: {
            require_arity(op, in, 3);
            ConvDims d =
                conv_dims(op, in[0], in[1], in[2], 1, attrs.pad, true);
            Tensor y = Tensor::zeros({d.cout, d.oh, d.ow});
            dwconv2d_forward(d, in[0].data(), in[1].data(), in[2].data(),
                             y.mutable_data());
            return y;
        }
        case Op::kUpsample2x: {
            require_arity(op, in, 1);
            require_rank(op, in[0], 3, "input");
            const int c = in[0].dim(0), h = in[0].dim(1), w = in[0].dim(2);
            Tensor y = Tensor::zeros({c, 2 * h, 2 * w});
            const float* px = in[0].data();
            float* py = y.mutable_data();
            for (int cc = 0; cc < c; ++cc)
                for (int yy = 0; yy < 2 * h; ++yy)
                    for (int xx = 0; xx < 2 * w; ++xx)
                        py[(static_cast<int64_t>(cc) * 2 * h + yy) * 2 * w + xx] =
                            px[(static_cast<int64_t>(cc) * h + yy / 2) * w +
                               xx / 2];
            return y;
        }
        case Op::kMaxPool2x2: {
            require_arity(op, in, 1);
            require_rank(op, in[0], 3, "input");
            const int c = in[0].dim(0), h = in[0].dim(1), w = in[0].dim(2);
            if (h % 2 || w % 2)
                throw op_shape_error(op, "spatial extents of " +
                                             shape_str(in[0].shape()) +
                                             " must be even");
            Tensor y = Tensor::zeros({c, h / 2, w / 2});
            const float* px = in[0].data();
            float* py = y.mutable_data();
            for (int cc = 0; cc < c; ++cc) {
                const float* xp = px + static_cast<int64_t>(cc) * h * w;
                float* yp = py + static_cast<int64_t>(cc) * (h / 2) * (w / 2);
                for (int oy = 0; oy < h / 2; ++oy)
                    for (int ox = 0; ox < w / 2; ++ox) {
                        const float* b = xp + (2 * oy) * w + 2 * ox;
                        float m = b[0];
                        if (b[1] > m) m = b[1];
                        if (b[w] > m) m = b[w];
                        if (b[w + 1] > m) m = b[w + 1];
                        yp[oy * (w / 2) + ox] = m;
                    }
            }
            return y;
        }
        case Op::kConcat: {
            require_arity(op, in, 2);
            const Tensor &a = in[0], &b = in[1];
            if (a.rank() != b.rank())
                throw op_shape_error(op, "rank mismatch " +
                                             shape_str(a.shape()) + " vs " +
                                             shape_str(b.shape()));
            const int axis = attrs.axis;
            if (axis != 0 && !(axis == 1 && a.rank() == 2))
                throw op_shape_error(op, "unsupported axis " +
                                             std::to_string(axis) + " for " +
                                             shape_str(a.shape()));
            for (int i = 0; i < a.rank(); ++i)
                if (i != axis && a.dim(i) != b.dim(i))
                    throw op_shape_error(op, "incompatible shapes " +
                                                 shape_str(a.shape()) + " and " +
                                                 shape_str(b.shape()));
            std::vector<int> oshape = a.shape();
            oshape[static_cast<size_t>(axis)] += b.dim(axis);
            Tensor y = Tensor::zeros(oshape);
            float* py = y.mutable_data();
            if (axis == 0) {
                std::memcpy(py, a.data(), sizeof(float) * a.numel());
                std::memcpy(py + a.numel(), b.data(), sizeof(float) * b.numel());
            } else {
                const int rows = a.dim(0), na = a.dim(1), nb = b.dim(1);
                for (int r = 0; r < rows; ++r) {
                    std::memcpy(py + static_cast<int64_t>(r) * (na + nb),
                                a.data() + static_cast<int64_t>(r) * na,
                                sizeof(float) * na);
                    std::memcpy(py + static_cast<int64_t>(r) * (na + nb) + na,
                                b.data() + static_cast<int64_t>(r) * nb,
                                sizeof(float) * nb);
                }
            }
            return y;
        }
        case Op::kRelu: {
            require_arity(op, in, 1);
            Tensor y = Tensor::zeros(in[0].shape());
            const float* px = in[0].data();
            float* py = y.mutable_data();
            for (int64_t i = 0; i < in[0].numel(); ++i)
                py[i] = px[i] > 0.0f ? px[i] : 0.0f;
            return y;
        }
        case Op::kGelu: {
            require_arity(op, in, 1);
            Tensor y = Tensor::zeros(in[0].shape());
            const float* px = in[0].data();
            float* py = y.mutable_data();
            for (int64_t i = 0; i < in[0].numel(); ++i) {
                const double v = px[i];
                py[i] = static_cast<float>(0.5 * v *
                                           (1.0 + std::erf(v * M_SQRT1_2)));
            }
            return y;
        }
        case Op::kLayerNorm: {
            require_arity(op, in, 3);
            require_rank(op, in[0], 2, "input");
            require_rank(op, in[1], 1, "gamma");
            require_rank(op, in[2], 1, "beta");
            const int t = in[0].dim(0), dd = in[0].dim(1);
            if (in[1].dim(0) != dd || in[2].dim(0) != dd)
                throw op_shape_error(op, "affine shape " +
                                             shape_str(in[1].shape()) +
                                             " does not match feature dim " +
                                             std::to_string(dd));
            Tensor y = Tensor::zeros(in[0].shape());
            const float* px = in[0].data();
            const float* pg = in[1].data();
            const float* pb = in[2].data();
            float* py = y.mutable_data();
            const double eps = attrs.eps;
            for (int r = 0; r < t; ++r) {
                const float* row = px + static_cast<int64_t>(r) * dd;
                double mean = 0.0;
                for (int j = 0; j < dd; ++j) mean += row[j];
                mean /= dd;
                double var = 0.0;
                for (int j = 0; j < dd; ++j) {
                    const double c = row[j] - mean;
                    var += c * c;
                }
                var /= dd;
                const double rstd = 1.0 / std::sqrt(var + eps);
                float* orow = py + static_cast<int64_t>(r) * dd;
                for (int j = 0; j < dd; ++j)
                    orow[j] = static_cast<float>((row[j] - mean) * rstd * pg[j] +
                                                 pb[j]);
            }
            return y;
        }
        case Op::kSoftmax: {
            require_arity(op, in, 1);
            AxisWalk wlk = axis_walk(op, in[0].shape(), attrs.axis);
            Tensor y = Tensor::zeros(in[0].shape());
            const float* px = in[0].data();
            float* py = y.mutable_data();
            for (int64_t o = 0; o < wlk.outer; ++o)
                for (int64_t i = 0; i < wlk.inner; ++i) {
                    const int64_t base = o * wlk.n * wlk.inner + i;
                    double m = -std::numeric_limits<double>::infinity();
                    for (int64_t k = 0; k < wlk.n; ++k)
                        m = std::max(m, static_cast<double>(
                                            px[base + k * wlk.inner]));
                    double s = 0.0;
                    for (int64_t k = 0; k < wlk.n; ++k)
                        s += std::exp(
                            static_cast<double>(px[base + k * wlk.inner]) - m);
                    for (int64_t k = 0; k < wlk.n; ++k)
                        py[base + k * wlk.inner] = static_cast<float>(
                            std::exp(static_cast<double>(
                                         px[base + k * wlk.inner]) -
                                     m) /
                            s);
                }
            return y;
        }
        case Op::kL2Normalize: {
            require_arity(op, in, 1);
            AxisWalk wlk = axis_walk(op, in[0].shape(), attrs.axis);
            Tensor y = Tensor::zeros(in[0].shape());
            const float* px = in[0].data();
            float* py = y.mutable_data();
            const double eps = attrs.eps;
            for (int64_t o = 0; o < wlk.outer; ++o)
                for (int64_t i = 0; i < wlk.inner; ++i) {
                    const int64_t base = o * wlk.n * wlk.inner + i;
                    double s = 0.0;
                    for (int64_t k = 0; k < wlk.n; ++k) {
                        const double v = px[base + k * wlk.inner];
                        s += v * v;
                    }
                    const double inv = 1.0 / std::sqrt(s + eps);
                    for (int64_t k = 0; k < wlk.n; ++k)
                        py[base + k * wlk.inner] = static_cast<float>(
                            px[base + k * wlk.inner] * inv);
                }
            return y;
        }
        case Op::kMse: {
            require_arity(op, in, 2);
            if (in[0].shape() != in[1].shape())
                throw op_shape_error(op, "incompatible shapes " +
                                             shape_str(in[0].shape()) + " and " +
                                             shape_str(in[1].shape()));
            const float* pa = in[0].data();
            const float* pb = in[1].data();
            double s = 0.0;
            const int64_t n = in[0].numel();
            for (int64_t i = 0; i < n; ++i) {
                const double dv = static_cast<double>(pa[i]) - pb[i];
                s += dv * dv;
            }
            return Tensor::scalar(static_cast<float>(s / static_cast<double>(n)));
        }
        case Op::kSum: {
            require_arity(op, in, 1);
            const float* px = in[0].data();
            double s = 0.0;
            for (int64_t i = 0; i < in[0].numel(); ++i) s += px[i];
            return Tensor::scalar(static_cast<float>(s));
        }
        case Op::kTranspose2d: {
            require_arity(op, in, 1);
            require_rank(op, in[0], 2, "input");
            const int m = in[0].dim(0), n = in[0].dim(1);
            Tensor y = Tensor::zeros({n, m});
            const float* px = in[0].data();
            float* py = y.mutable_data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    py[static_cast<int64_t>(j) * m + i] =
                        px[static_cast<int64_t>(i) * n + j];
            return y;
        }
        case Op::kReshape: {
            require_arity(op, in, 1);
            validate_shape(attrs.shape);
            if (shape_numel(attrs.shape) != in[0].numel())
                throw op_shape_error(op, "cannot reshape " +
                                             shape_str(in[0].shape()) + " to " +
                                             shape_str(attrs.shape));
            return Tensor::from_data(attrs.shape,
                                     std::vector<float>(in[0].data(),
                                                        in[0].data() +
                                                            in[0].numel()));
        }
        case Op::kSlice: {
            require_arity(op, in, 1);
            const int rows = in[0].dim(0);
            if (attrs.start < 0 || attrs.count <= 0 ||
                attrs.start + attrs.count > rows)
                throw op_shape_error(
                    op, "rows [" + std::to_string(attrs.start) + "," +
                            std::to_string(attrs.start + attrs.count) +
                            ") out of range for " + shape_str(in[0].shape()));
            std::vector<int> oshape = in[0].shape();
            oshape[0] = attrs.count;
            const int64_t inner = in[0].numel() / rows;
            Tensor y = Tensor::zeros(oshape);
            std::memcpy(y.mutable_data(), in[0].data() + attrs.start * inner,
                        sizeof(float) * attrs.count * inner);
            return y;
        }
        case Op::kBatchNorm2d: {
            require_arity(op, in, 5);
            require_rank(op, in[0], 3, "input");
            const int c = in[0].dim(0), h = in[0].dim(1), w = in[0].dim(2);
            for (int i = 1; i < 5; ++i)
                if (in[static_cast<size_t>(i)].rank() != 1 ||
                    in[static_cast<size_t>(i)].dim(0) != c)
                    throw op_shape_error(
                        op, "per-channel input " + std::to_string(i) +
                                " has shape " +
                                shape_str(in[static_cast<size_t>(i)].shape()) +
                                ", expected [" + std::to_string(c) + "]");
            Tensor y = Tensor::zeros(in[0].shape());
            const float* px = in[0].data();
            const float* pg = in[1].data();
            const float* pb = in[2].data();
            float* py = y.mutable_data();
            const int64_t plane = static_cast<int64_t>(h) * w;
            const double eps = attrs.eps;
            if (attrs.training) {
                // batch statistics; running buffers updated in place
                float* rm = const_cast<Tensor&>(in[3]).mutable_data();
                float* rv = const_cast<Tensor&>(in[4]).mutable_data();
                for (int cc = 0; cc < c; ++cc) {
                    const float* xp = px + cc * plane;
                    double mean = 0.0;
                    for (int64_t i = 0; i < plane; ++i) mean += xp[i];
                    mean /= static_cast<double>(plane);
                    double var = 0.0;
                    for (int64_t i = 0; i < plane; ++i) {
                        const double d = xp[i] - mean;
                        var += d * d;
                    }
                    var /= static_cast<double>(plane);
                    const double rstd = 1.0 / std::sqrt(var + eps);
                    float* yp = py + cc * plane;
                    for (int64_t i = 0; i < plane; ++i)
                        yp[i] = static_cast<float>((xp[i] - mean) * rstd *
                                                       pg[cc] +
                                                   pb[cc]);
                    rm[cc] = static_cast<float>((1.0 - attrs.momentum) * rm[cc] +
                                                attrs.momentum * mean);
                    rv[cc] = static_cast<float>((1.0 - attrs.momentum) * rv[cc] +
                                                attrs.momentum * var);
                }
            } else {
                const float* rm = in[3].data();
                const float* rv = in[4].data();
                for (int cc = 0; cc < c; ++cc) {
                    const double rstd =
                        1.0 / std::sqrt(static_cast<double>(rv[cc]) + eps);
                    const float* xp = px + cc * plane;
                    float* yp = py + cc * plane;
                    for (int64_t i = 0; i < plane; ++i)
                        yp[i] = static_cast<float>(
                            (xp[i] - rm[cc]) * rstd * pg[cc] + pb[cc]);
                }
            }
            return y;
        }
    }
    throw Error("eval_op: unhandled op");
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) {
    g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = prev_; }

void Tape::clear() {
    entries_.clear();
    live_.clear();
}

void Tape::record(Entry e) {
    live_.insert(e.output.node());
    entries_.push_back(std::move(e));
}

Tensor apply(Op op, const OpAttrs& attrs, const std::vector<Tensor>& inputs) {
    Tensor out = eval_op(op, attrs, inputs);
    const float* p = out.data();
    for (int64_t i = 0; i < out.numel(); ++i)
        if (!std::isfinite(p[i]))
            throw NumericError(std::string(op_name(op)) +
                               ": produced a non-finite value");
    Tape* tape = active_tape();
    if (tape) {
        bool track = false;
        for (const auto& t : inputs)
            if (t.requires_grad() || tape->produced(t.node())) {
                track = true;
                break;
            }
        if (track) tape->record(Tape::Entry{op, attrs, inputs, out});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backward kernels
// ---------------------------------------------------------------------------

static void backward_op(const Tape::Entry& e, const std::vector<float>& gy,
                        const std::vector<std::vector<float>*>& gin) {
    const auto& in = e.inputs;
    switch (e.op) {
        case Op::kAdd: {
            const Tensor &a = in[0], &b = in[1];
            const int64_t n = a.numel();
            if (gin[0])
                for (int64_t i = 0; i < n; ++i) (*gin[0])[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)];
            if (gin[1]) {
                if (b.shape() == a.shape()) {
                    for (int64_t i = 0; i < n; ++i)
                        (*gin[1])[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)];
                } else if (b.numel() == 1) {
                    double s = 0.0;
                    for (int64_t i = 0; i < n; ++i) s += gy[static_cast<size_t>(i)];
                    (*gin[1])[0] += static_cast<float>(s);
                } else {
                    const int64_t d = b.numel();
                    std::vector<double> acc(static_cast<size_t>(d), 0.0);
                    for (int64_t i = 0; i < n; ++i)
                        acc[static_cast<size_t>(i % d)] += gy[static_cast<size_t>(i)];
                    for (int64_t j = 0; j < d; ++j)
                        (*gin[1])[static_cast<size_t>(j)] +=
                            static_cast<float>(acc[static_cast<size_t>(j)]);
                }
            }
            return;
        }
        case Op::kSub: {
            const int64_t n = in[0].numel();
            if (gin[0])
                for (int64_t i = 0; i < n; ++i) (*gin[0])[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)];
            if (gin[1])
                for (int64_t i = 0; i < n; ++i) (*gin[1])[static_cast<size_t>(i)] -= gy[static_cast<size_t>(i)];
            return;
        }
        case Op::kMul: {
            const Tensor &a = in[0], &b = in[1];
            const float* pa = a.data();
            const float* pb = b.data();
            const int64_t n = a.numel();
            if (b.shape() == a.shape()) {
                if (gin[0])
                    for (int64_t i = 0; i < n; ++i)
                        (*gin[0])[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)] * pb[i];
                if (gin[1])
                    for (int64_t i = 0; i < n; ++i)
                        (*gin[1])[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)] * pa[i];
            } else if (b.numel() == 1) {
                if (gin[0])
                    for (int64_t i = 0; i < n; ++i)
                        (*gin[0])[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)] * pb[0];
                if (gin[1]) {
                    double s = 0.0;
                    for (int64_t i = 0; i < n; ++i)
                        s += static_cast<double>(gy[static_cast<size_t>(i)]) * pa[i];
                    (*gin[1])[0] += static_cast<float>(s);
                }
            } else {
                const int64_t c = b.numel();
                const int64_t inner = n / c;
                for (int64_t cc = 0; cc < c; ++cc) {
                    if (gin[0]) {
                        const float s = pb[cc];
                        for (int64_t i = 0; i < inner; ++i)
                            (*gin[0])[static_cast<size_t>(cc * inner + i)] +=
                                gy[static_cast<size_t>(cc * inner + i)] * s;
                    }
                    if (gin[1]) {
                        double s = 0.0;
                        for (int64_t i = 0; i < inner; ++i)
                            s += static_cast<double>(
                                     gy[static_cast<size_t>(cc * inner + i)]) *
                                 pa[cc * inner + i];
                        (*gin[1])[static_cast<size_t>(cc)] += static_cast<float>(s);
                    }
                }
            }
            return;
        }
        case Op::kScale: {
            if (gin[0])
                for (size_t i = 0; i < gy.size(); ++i)
                    (*gin[0])[i] += gy[i] * e.attrs.scalar;
            return;
        }
        case Op::kMatMul: {
            const int m = in[0].dim(0), k = in[0].dim(1), n = in[1].dim(1);
            const float* pa = in[0].data();
            const float* pb = in[1].data();
            if (gin[0]) {
                for (int i = 0; i < m; ++i)
                    for (int kk = 0; kk < k; ++kk) {
                        double s = 0.0;
                        const float* grow = gy.data() + static_cast<int64_t>(i) * n;
                        const float* brow = pb + static_cast<int64_t>(kk) * n;
                        for (int j = 0; j < n; ++j)
                            s += static_cast<double>(grow[j]) * brow[j];
                        (*gin[0])[static_cast<size_t>(i) * k + kk] +=
                            static_cast<float>(s);
                    }
            }
            if (gin[1]) {
                for (int kk = 0; kk < k; ++kk)
                    for (int j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (int i = 0; i < m; ++i)
                            s += static_cast<double>(pa[static_cast<int64_t>(i) * k + kk]) *
                                 gy[static_cast<size_t>(i) * n + j];
                        (*gin[1])[static_cast<size_t>(kk) * n + j] +=
                            static_cast<float>(s);
                    }
            }
            return;
        }
        case Op::kConv2d: {
            ConvDims d = conv_dims(e.op, in[0], in[1], in[2], e.attrs.stride,
                                   e.attrs.pad, false);
            conv2d_backward(d, in[0].data(), in[1].data(), gy.data(), gin[0],
                            gin[1], gin[2]);
            return;
        }
        case Op::kDwConv2d: {
            ConvDims d = conv_dims(e.op, in[0], in[1], in[2], 1, e.attrs.pad,
                                   true);
            dwconv2d_backward(d, in[0].data(), in[1].data(), gy.data(), gin[0],
                              gin[1], gin[2]);
            return;
        }
        case Op::kUpsample2x: {
            if (!gin[0]) return;
            const int c = in[0].dim(0), h = in[0].dim(1), w = in[0].dim(2);
            for (int cc = 0; cc < c; ++cc)
                for (int yy = 0; yy < 2 * h; ++yy)
                    for (int xx = 0; xx < 2 * w; ++xx)
                        (*gin[0])[static_cast<size_t>(
                            (static_cast<int64_t>(cc) * h + yy / 2) * w +
                            xx / 2)] +=
                            gy[static_cast<size_t>(
                                (static_cast<int64_t>(cc) * 2 * h + yy) * 2 * w +
                                xx)];
            return;
        }
        case Op::kMaxPool2x2: {
            if (!gin[0]) return;
            const int c = in[0].dim(0), h = in[0].dim(1), w = in[0].dim(2);
            const float* px = in[0].data();
            for (int cc = 0; cc < c; ++cc) {
                const float* xp = px + static_cast<int64_t>(cc) * h * w;
                for (int oy = 0; oy < h / 2; ++oy)
                    for (int ox = 0; ox < w / 2; ++ox) {
                        const int64_t base = (2 * oy) * w + 2 * ox;
                        // first maximum in scan order wins (deterministic)
                        int64_t arg = base;
                        float m = xp[base];
                        if (xp[base + 1] > m) { m = xp[base + 1]; arg = base + 1; }
                        if (xp[base + w] > m) { m = xp[base + w]; arg = base + w; }
                        if (xp[base + w + 1] > m) { arg = base + w + 1; }
                        (*gin[0])[static_cast<size_t>(
                            static_cast<int64_t>(cc) * h * w + arg)] +=
                            gy[static_cast<size_t>(
                                (static_cast<int64_t>(cc) * (h / 2) + oy) *
                                    (w / 2) +
                                ox)];
                    }
            }
            return;
        }
        case Op::kConcat: {
            const Tensor &a = in[0], &b = in[1];
            if (e.attrs.axis == 0) {
                if (gin[0])
                    for (int64_t i = 0; i < a.numel(); ++i)
                        (*gin[0])[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)];
                if (gin[1])
                    for (int64_t i = 0; i < b.numel(); ++i)
                        (*gin[1])[static_cast<size_t>(i)] +=
                            gy[static_cast<size_t>(a.numel() + i)];
            } else {
                const int rows = a.dim(0), na = a.dim(1), nb = b.dim(1);
                for (int r = 0; r < rows; ++r) {
                    if (gin[0])
                        for (int j = 0; j < na; ++j)
                            (*gin[0])[static_cast<size_t>(r) * na + j] +=
                                gy[static_cast<size_t>(r) * (na + nb) + j];
                    if (gin[1])
                        for (int j = 0; j < nb; ++j)
                            (*gin[1])[static_cast<size_t>(r) * nb + j] +=
                                gy[static_cast<size_t>(r) * (na + nb) + na + j];
                }
            }
            return;
        }
        case Op::kRelu: {
            if (!gin[0]) return;
            const float* px = in[0].data();
            for (size_t i = 0; i < gy.size(); ++i)
                if (px[i] > 0.0f) (*gin[0])[i] += gy[i];
            return;
        }
        case Op::kGelu: {
            if (!gin[0]) return;
            const float* px = in[0].data();
            constexpr double kInvSqrt2Pi = 0.3989422804014327;
            for (size_t i = 0; i < gy.size(); ++i) {
                const double v = px[i];
                const double phi = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                (*gin[0])[i] += static_cast<float>(gy[i] * (phi + v * pdf));
            }
            return;
        }
        case Op::kLayerNorm: {
            const int t = in[0].dim(0), dd = in[0].dim(1);
            const float* px = in[0].data();
            const float* pg = in[1].data();
            const double eps = e.attrs.eps;
            for (int r = 0; r < t; ++r) {
                const float* row = px + static_cast<int64_t>(r) * dd;
                const float* grow = gy.data() + static_cast<int64_t>(r) * dd;
                double mean = 0.0;
                for (int j = 0; j < dd; ++j) mean += row[j];
                mean /= dd;
                double var = 0.0;
                for (int j = 0; j < dd; ++j) {
                    const double c = row[j] - mean;
                    var += c * c;
                }
                var /= dd;
                const double rstd = 1.0 / std::sqrt(var + eps);
                double sum_dyh = 0.0, sum_dyh_xh = 0.0;
                for (int j = 0; j < dd; ++j) {
                    const double xh = (row[j] - mean) * rstd;
                    const double dyh = static_cast<double>(grow[j]) * pg[j];
                    sum_dyh += dyh;
                    sum_dyh_xh += dyh * xh;
                    if (gin[1])
                        (*gin[1])[static_cast<size_t>(j)] +=
                            static_cast<float>(grow[j] * xh);
                    if (gin[2]) (*gin[2])[static_cast<size_t>(j)] += grow[j];
                }
                if (gin[0]) {
                    const double m1 = sum_dyh / dd, m2 = sum_dyh_xh / dd;
                    for (int j = 0; j < dd; ++j) {
                        const double xh = (row[j] - mean) * rstd;
                        const double dyh = static_cast<double>(grow[j]) * pg[j];
                        (*gin[0])[static_cast<size_t>(r) * dd + j] +=
                            static_cast<float>(rstd * (dyh - m1 - xh * m2));
                    }
                }
            }
            return;
        }
        case Op::kSoftmax: {
            if (!gin[0]) return;
            AxisWalk wlk = axis_walk(e.op, in[0].shape(), e.attrs.axis);
            const float* py = e.output.data();
            for (int64_t o = 0; o < wlk.outer; ++o)
                for (int64_t i = 0; i < wlk.inner; ++i) {
                    const int64_t base = o * wlk.n * wlk.inner + i;
                    double dot = 0.0;
                    for (int64_t k = 0; k < wlk.n; ++k)
                        dot += static_cast<double>(
                                   gy[static_cast<size_t>(base + k * wlk.inner)]) *
                               py[base + k * wlk.inner];
                    for (int64_t k = 0; k < wlk.n; ++k) {
                        const int64_t idx = base + k * wlk.inner;
                        (*gin[0])[static_cast<size_t>(idx)] += static_cast<float>(
                            static_cast<double>(py[idx]) *
                            (static_cast<double>(gy[static_cast<size_t>(idx)]) -
                             dot));
                    }
                }
            return;
        }
        case Op::kL2Normalize: {
            if (!gin[0]) return;
            AxisWalk wlk = axis_walk(e.op, in[0].shape(), e.attrs.axis);
            const float* px = in[0].data();
            const double eps = e.attrs.eps;
            for (int64_t o = 0; o < wlk.outer; ++o)
                for (int64_t i = 0; i < wlk.inner; ++i) {
                    const int64_t base = o * wlk.n * wlk.inner + i;
                    double ss = 0.0, dot = 0.0;
                    for (int64_t k = 0; k < wlk.n; ++k) {
                        const int64_t idx = base + k * wlk.inner;
                        const double v = px[idx];
                        ss += v * v;
                        dot += static_cast<double>(
                                   gy[static_cast<size_t>(idx)]) *
                               v;
                    }
                    const double norm = std::sqrt(ss + eps);
                    const double inv = 1.0 / norm;
                    const double inv3 = inv * inv * inv;
                    for (int64_t k = 0; k < wlk.n; ++k) {
                        const int64_t idx = base + k * wlk.inner;
                        (*gin[0])[static_cast<size_t>(idx)] += static_cast<float>(
                            gy[static_cast<size_t>(idx)] * inv -
                            px[idx] * dot * inv3);
                    }
                }
            return;
        }
        case Op::kMse: {
            const float* pa = in[0].data();
            const float* pb = in[1].data();
            const int64_t n = in[0].numel();
            const double g = gy[0];
            const double c = 2.0 * g / static_cast<double>(n);
            for (int64_t i = 0; i < n; ++i) {
                const double dv = static_cast<double>(pa[i]) - pb[i];
                if (gin[0]) (*gin[0])[static_cast<size_t>(i)] += static_cast<float>(c * dv);
                if (gin[1]) (*gin[1])[static_cast<size_t>(i)] -= static_cast<float>(c * dv);
            }
            return;
        }
        case Op::kSum: {
            if (!gin[0]) return;
            const float g = gy[0];
            for (size_t i = 0; i < gin[0]->size(); ++i) (*gin[0])[i] += g;
            return;
        }
        case Op::kTranspose2d: {
            if (!gin[0]) return;
            const int m = in[0].dim(0), n = in[0].dim(1);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    (*gin[0])[static_cast<size_t>(i) * n + j] +=
                        gy[static_cast<size_t>(j) * m + i];
            return;
        }
        case Op::kReshape: {
            if (!gin[0]) return;
            for (size_t i = 0; i < gy.size(); ++i) (*gin[0])[i] += gy[i];
            return;
        }
        case Op::kSlice: {
            if (!gin[0]) return;
            const int64_t inner = in[0].numel() / in[0].dim(0);
            const int64_t off = static_cast<int64_t>(e.attrs.start) * inner;
            for (size_t i = 0; i < gy.size(); ++i)
                (*gin[0])[static_cast<size_t>(off) + i] += gy[i];
            return;
        }
        case Op::kBatchNorm2d: {
            const int c = in[0].dim(0), h = in[0].dim(1), w = in[0].dim(2);
            const int64_t plane = static_cast<int64_t>(h) * w;
            const float* px = in[0].data();
            const float* pg = in[1].data();
            const double eps = e.attrs.eps;
            for (int cc = 0; cc < c; ++cc) {
                const float* xp = px + cc * plane;
                const float* gp = gy.data() + cc * plane;
                double mean, var;
                if (e.attrs.training) {
                    // batch statistics (recomputed; running buffers moved on)
                    mean = 0.0;
                    for (int64_t i = 0; i < plane; ++i) mean += xp[i];
                    mean /= static_cast<double>(plane);
                    var = 0.0;
                    for (int64_t i = 0; i < plane; ++i) {
                        const double dv = xp[i] - mean;
                        var += dv * dv;
                    }
                    var /= static_cast<double>(plane);
                } else {
                    mean = in[3].data()[cc];
                    var = in[4].data()[cc];
                }
                const double rstd = 1.0 / std::sqrt(var + eps);
                double sum_g = 0.0, sum_g_xh = 0.0;
                for (int64_t i = 0; i < plane; ++i) {
                    const double xh = (xp[i] - mean) * rstd;
                    sum_g += gp[i];
                    sum_g_xh += static_cast<double>(gp[i]) * xh;
                }
                if (gin[1])
                    (*gin[1])[static_cast<size_t>(cc)] +=
                        static_cast<float>(sum_g_xh);
                if (gin[2])
                    (*gin[2])[static_cast<size_t>(cc)] +=
                        static_cast<float>(sum_g);
                if (gin[0]) {
                    if (e.attrs.training) {
                        const double m1 = sum_g / static_cast<double>(plane);
                        const double m2 = sum_g_xh / static_cast<double>(plane);
                        for (int64_t i = 0; i < plane; ++i) {
                            const double xh = (xp[i] - mean) * rstd;
                            (*gin[0])[static_cast<size_t>(cc * plane + i)] +=
                                static_cast<float>(pg[cc] * rstd *
                                                   (gp[i] - m1 - xh * m2));
                        }
                    } else {
                        const double k = pg[cc] * rstd;
                        for (int64_t i = 0; i < plane; ++i)
                            (*gin[0])[static_cast<size_t>(cc * plane + i)] +=
                                static_cast<float>(k * gp[i]);
                    }
                }
            }
            return;
        }
    }
    throw Error("backward_op: unhandled op");
}

void backward(Tape& tape, const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw GraphError("backward: loss must be a defined scalar tensor");
    if (!tape.produced(loss.node()))
        throw GraphError(
            "backward: loss was not produced under this tape (detached value)");

    std::unordered_map<const TensorNode*, std::vector<float>> gmap;
    gmap[loss.node()] = {1.0f};

    const auto& entries = tape.entries();
    for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
        auto f = gmap.find(it->output.node());
        if (f == gmap.end()) continue;  // not on a path to the loss
        std::vector<float> gy = std::move(f->second);
        gmap.erase(f);

        // ensure grad buffers exist before taking pointers (rehash safety)
        for (const auto& inp : it->inputs) {
            const bool needed =
                inp.requires_grad() || tape.produced(inp.node());
            if (!needed) continue;
            auto g = gmap.find(inp.node());
            if (g == gmap.end())
                gmap.emplace(inp.node(),
                             std::vector<float>(
                                 static_cast<size_t>(inp.numel()), 0.0f));
        }
        std::vector<std::vector<float>*> gin(it->inputs.size(), nullptr);
        for (size_t i = 0; i < it->inputs.size(); ++i) {
            auto g = gmap.find(it->inputs[i].node());
            if (g != gmap.end()) gin[i] = &g->second;
        }
        backward_op(*it, gy, gin);
    }

    // deliver to leaves; every requires_grad leaf on the tape gets a buffer
    for (const auto& e : entries) {
        for (const auto& inp : e.inputs) {
            if (!inp.requires_grad() || tape.produced(inp.node())) continue;
            const_cast<Tensor&>(inp).ensure_grad();
            auto f = gmap.find(inp.node());
            if (f != gmap.end()) {
                const_cast<Tensor&>(inp).accumulate_grad(f->second);
                gmap.erase(f);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void optimizer_step(const std::vector<std::pair<std::string, Tensor>>& params,
                    AdamState& state, const AdamHyper& hyper) {
    state.t += 1;
    const double b1 = hyper.beta1, b2 = hyper.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (const auto& [name, p] : params) {
        if (!p.has_grad())
            throw NumericError("optimizer_step: parameter '" + name +
                               "' has no gradient buffer");
        auto& mv = state.moments[p.node()];
        const size_t n = static_cast<size_t>(p.numel());
        if (mv.first.empty()) {
            mv.first.assign(n, 0.0f);
            mv.second.assign(n, 0.0f);
        }
        float* w = const_cast<Tensor&>(p).mutable_data();
        const std::vector<float>& g = p.grad();
        for (size_t i = 0; i < n; ++i) {
            const double gi = g[i];
            const double m = b1 * mv.first[i] + (1.0 - b1) * gi;
            const double v = b2 * mv.second[i] + (1.0 - b2) * gi * gi;
            mv.first[i] = static_cast<float>(m);
            mv.second[i] = static_cast<float>(v);
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            w[i] = static_cast<float>(
                w[i] - hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps));
            if (!std::isfinite(w[i]))
                throw NumericError("optimizer_step: parameter '" + name +
                                   "' became non-finite");
        }
        const_cast<Tensor&>(p).zero_grad();
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckReport grad_check(Op op, const OpAttrs& attrs,
                           const std::vector<Tensor>& inputs, float epsilon,
                           uint64_t probe_seed, std::vector<bool> check_input,
                           double tolerance) {
    if (check_input.empty()) check_input.assign(inputs.size(), true);
    if (check_input.size() != inputs.size())
        throw ConfigError("grad_check: check_input size mismatch");

    // private clones so probes cannot disturb the caller's tensors
    std::vector<Tensor> ins;
    ins.reserve(inputs.size());
    for (size_t i = 0; i < inputs.size(); ++i) {
        const Tensor& t = inputs[i];
        ins.push_back(Tensor::from_data(
            t.shape(), std::vector<float>(t.data(), t.data() + t.numel()),
            check_input[i]));
    }

    // analytic gradients of loss = probe . op(ins)
    Tape tape;
    Tensor out;
    {
        TapeScope scope(tape);
        out = apply(op, attrs, ins);
        Rng prng(probe_seed);
        std::vector<float> probe(static_cast<size_t>(out.numel()));
        for (auto& v : probe) v = prng.uniform(-1.0f, 1.0f);
        Tensor probe_t = Tensor::from_data(out.shape(), std::move(probe));
        Tensor loss = sum(mul(out, probe_t));
        backward(tape, loss);
    }
    Rng prng(probe_seed);
    std::vector<float> probe(static_cast<size_t>(out.numel()));
    for (auto& v : probe) v = prng.uniform(-1.0f, 1.0f);

    auto loss_value = [&]() -> double {
        Tensor o = eval_op(op, attrs, ins);
        const float* p = o.data();
        double s = 0.0;
        for (int64_t i = 0; i < o.numel(); ++i)
            s += static_cast<double>(p[i]) * probe[static_cast<size_t>(i)];
        return s;
    };

    GradCheckReport rep;
    double amax = 0.0;
    for (size_t i = 0; i < ins.size(); ++i) {
        if (!check_input[i]) continue;
        const std::vector<float>& analytic = ins[i].grad();
        float* data = ins[i].mutable_data();
        for (int64_t j = 0; j < ins[i].numel(); ++j) {
            const float orig = data[j];
            data[j] = orig + epsilon;
            const double fp = loss_value();
            data[j] = orig - epsilon;
            const double fm = loss_value();
            data[j] = orig;
            const double numeric = (fp - fm) / (2.0 * static_cast<double>(epsilon));
            const double a = analytic[static_cast<size_t>(j)];
            rep.max_abs_err = std::max(rep.max_abs_err, std::abs(a - numeric));
            amax = std::max({amax, std::abs(a), std::abs(numeric)});
        }
    }
    rep.max_rel_err = rep.max_abs_err / std::max(amax, 1e-6);
    rep.pass = rep.max_rel_err < tolerance;
    return rep;
}

// ---------------------------------------------------------------------------
// Named wrappers
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    return apply(Op::kAdd, {}, {a, b});
}
Tensor sub(const Tensor& a, const Tensor& b) {
    return apply(Op::kSub, {}, {a, b});
}
Tensor mul(const Tensor& a, const Tensor& b) {
    return apply(Op::kMul, {}, {a, b});
}
Tensor scale(const Tensor& x, float s) {
    OpAttrs at;
    at.scalar = s;
    return apply(Op::kScale, at, {x});
}
Tensor matmul(const Tensor& a, const Tensor& b) {
    return apply(Op::kMatMul, {}, {a, b});
}
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad) {
    OpAttrs at;
    at.stride = stride;
    at.pad = pad;
    return apply(Op::kConv2d, at, {x, w, b});
}
Tensor dwconv2d(const Tensor& x, const Tensor& w, const Tensor& b, int pad) {
    OpAttrs at;
    at.pad = pad;
    return apply(Op::kDwConv2d, at, {x, w, b});
}
Tensor upsample2x(const Tensor& x) { return apply(Op::kUpsample2x, {}, {x}); }
Tensor maxpool2x2(const Tensor& x) { return apply(Op::kMaxPool2x2, {}, {x}); }
Tensor concat(const Tensor& a, const Tensor& b, int axis) {
    OpAttrs at;
    at.axis = axis;
    return apply(Op::kConcat, at, {a, b});
}
Tensor relu(const Tensor& x) { return apply(Op::kRelu, {}, {x}); }
Tensor gelu(const Tensor& x) { return apply(Op::kGelu, {}, {x}); }
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 float eps) {
    OpAttrs at;
    at.eps = eps;
    return apply(Op::kLayerNorm, at, {x, gamma, beta});
}
Tensor softmax(const Tensor& x, int axis) {
    OpAttrs at;
    at.axis = axis;
    return apply(Op::kSoftmax, at, {x});
}
Tensor l2_normalize(const Tensor& x, int axis, float eps) {
    OpAttrs at;
    at.axis = axis;
    at.eps = eps;
    return apply(Op::kL2Normalize, at, {x});
}
Tensor mse(const Tensor& a, const Tensor& b) {
    return apply(Op::kMse, {}, {a, b});
}
Tensor sum(const Tensor& x) { return apply(Op::kSum, {}, {x}); }
Tensor transpose2d(const Tensor& x) {
    return apply(Op::kTranspose2d, {}, {x});
}
Tensor reshape(const Tensor& x, std::vector<int> shape) {
    OpAttrs at;
    at.shape = std::move(shape);
    return apply(Op::kReshape, at, {x});
}
Tensor slice_rows(const Tensor& x, int start, int count) {
    OpAttrs at;
    at.start = start;
    at.count = count;
    return apply(Op::kSlice, at, {x});
}
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   const Tensor& run_mean, const Tensor& run_var,
                   bool training, float momentum, float eps) {
    OpAttrs at;
    at.training = training;
    at.momentum = momentum;
    at.eps = eps;
    return apply(Op::kBatchNorm2d, at, {x, gamma, beta, run_mean, run_var});
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

namespace {

void write_bytes(std::ofstream& f, const void* p, size_t n) {
    f.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_u32(std::ofstream& f, uint32_t v) { write_bytes(f, &v, 4); }
void write_u64(std::ofstream& f, uint64_t v) { write_bytes(f, &v, 8); }

void read_bytes(std::ifstream& f, void* p, size_t n, const std::string& path) {
    f.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(f.gcount()) != n)
        throw IoError("checkpoint " + path + ": truncated file");
}

uint32_t read_u32(std::ifstream& f, const std::string& path) {
    uint32_t v = 0;
    read_bytes(f, &v, 4, path);
    return v;
}

uint64_t read_u64(std::ifstream& f, const std::string& path) {
    uint64_t v = 0;
    read_bytes(f, &v, 8, path);
    return v;
}

constexpr char kMagic[4] = {'C', 'R', 'S', 'P'};

}  // namespace

void save_checkpoint(
    const std::string& path, const std::string& config_echo,
    const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("checkpoint " + path + ": cannot open for writing");
    write_bytes(f, kMagic, 4);
    write_u32(f, kCheckpointVersion);
    write_u64(f, config_echo.size());
    write_bytes(f, config_echo.data(), config_echo.size());
    write_u64(f, tensors.size());
    for (const auto& [name, t] : tensors) {
        write_u64(f, name.size());
        write_bytes(f, name.data(), name.size());
        write_u32(f, static_cast<uint32_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i)
            write_u32(f, static_cast<uint32_t>(t.dim(i)));
        write_bytes(f, t.data(), sizeof(float) * static_cast<size_t>(t.numel()));
    }
    if (!f) throw IoError("checkpoint " + path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint " + path + ": cannot open");
    char magic[4];
    read_bytes(f, magic, 4, path);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("checkpoint " + path + ": bad magic");
    const uint32_t version = read_u32(f, path);
    if (version != kCheckpointVersion)
        throw IoError("checkpoint " + path + ": unsupported format version " +
                      std::to_string(version));
    Checkpoint ck;
    const uint64_t clen = read_u64(f, path);
    if (clen > (1ull << 24))
        throw IoError("checkpoint " + path + ": implausible config length");
    ck.config_echo.resize(clen);
    read_bytes(f, ck.config_echo.data(), clen, path);
    const uint64_t count = read_u64(f, path);
    if (count > (1ull << 20))
        throw IoError("checkpoint " + path + ": implausible tensor count");
    for (uint64_t i = 0; i < count; ++i) {
        const uint64_t nlen = read_u64(f, path);
        if (nlen > (1ull << 16))
            throw IoError("checkpoint " + path + ": implausible name length");
        std::string name(nlen, '\0');
        read_bytes(f, name.data(), nlen, path);
        const uint32_t rank = read_u32(f, path);
        if (rank == 0 || rank > 8)
            throw IoError("checkpoint " + path + ": implausible rank for '" +
                          name + "'");
        std::vector<int> shape(rank);
        int64_t numel = 1;
        for (uint32_t r = 0; r < rank; ++r) {
            const uint32_t d = read_u32(f, path);
            if (d == 0 || d > (1u << 24))
                throw IoError("checkpoint " + path +
                              ": implausible extent for '" + name + "'");
            shape[r] = static_cast<int>(d);
            numel *= d;
        }
        std::vector<float> data(static_cast<size_t>(numel));
        read_bytes(f, data.data(), sizeof(float) * data.size(), path);
        ck.tensors.emplace_back(name,
                                Tensor::from_data(shape, std::move(data)));
    }
    return ck;
}

}  // namespace crisp
