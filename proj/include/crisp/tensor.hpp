// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "crisp/errors.hpp"

namespace crisp {

// ---------------------------------------------------------------------------
// Tensor
//
// Dense float32 value with an explicit shape. Copies are shallow (shared
// storage). Tensors are immutable once created except for two sanctioned
// mutations: the optimizer updates parameter data in place, and batch-norm
// updates its running-statistics buffers during training forward passes.
// Reductions and convolution inner loops accumulate in float64 before
// rounding the result to float32.
// ---------------------------------------------------------------------------

struct TensorNode {
    std::vector<int> shape;
    std::vector<float> data;
    std::vector<float> grad;  // allocated lazily; empty means "no grad yet"
    bool requires_grad = false;
};

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float value,
                       bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                            bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const;
    int dim(int i) const { return shape().at(static_cast<size_t>(i)); }
    int rank() const { return static_cast<int>(shape().size()); }
    int64_t numel() const;

    const float* data() const;
    float* mutable_data();  // parameter/buffer updates only
    float value() const;    // numel()==1 convenience accessor

    bool requires_grad() const;
    void set_requires_grad(bool rg);
    bool has_grad() const;
    const std::vector<float>& grad() const;  // throws if absent
    void ensure_grad();                      // allocate zeros if absent
    void accumulate_grad(const std::vector<float>& g);
    void zero_grad();

    TensorNode* node() const { return node_.get(); }

  private:
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
    std::shared_ptr<TensorNode> node_;
    friend Tensor make_tensor(std::vector<int> shape, bool requires_grad);
};

std::string shape_str(const std::vector<int>& shape);
int64_t shape_numel(const std::vector<int>& shape);

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

enum class Op {
    kAdd,          // a + b; b may be [D] against [...,D] or a scalar [1]
    kSub,          // a - b, same shape
    kMul,          // a * b; b may be [C] against [C,H,W] or a scalar [1]
    kScale,        // x * attrs.scalar
    kMatMul,       // [M,K] x [K,N]
    kConv2d,       // x[Cin,H,W], w[Cout,Cin,kh,kw], b[Cout]; stride, pad
    kDwConv2d,     // x[C,H,W], w[C,kh,kw], b[C]; stride 1, pad
    kUpsample2x,   // nearest, [C,H,W] -> [C,2H,2W]
    kMaxPool2x2,   // [C,H,W] -> [C,H/2,W/2], extents even
    kConcat,       // axis 0 of [C,H,W] pairs, or axis 0/1 of rank-2 pairs
    kRelu,
    kGelu,         // exact erf form
    kLayerNorm,    // x[T,D], gamma[D], beta[D]; per-row normalization
    kSoftmax,      // along attrs.axis
    kL2Normalize,  // along attrs.axis
    kMse,          // mean squared error -> [1]
    kSum,          // total -> [1]
    kTranspose2d,  // [M,N] -> [N,M]
    kReshape,      // to attrs.shape, numel preserved
    kSlice,        // rows [start, start+count) along axis 0
    kBatchNorm2d,  // x[C,H,W], gamma[C], beta[C], run_mean[C], run_var[C]
};

const char* op_name(Op op);

struct OpAttrs {
    int stride = 1;
    int pad = 0;
    int axis = 0;
    int start = 0;
    int count = 0;
    float scalar = 1.0f;
    float eps = 0.0f;
    float momentum = 0.1f;
    bool training = false;
    std::vector<int> shape;  // reshape target
};

// Applies a primitive, records it on the active tape when gradients may be
// needed, and verifies the output is finite (NumericError otherwise).
Tensor apply(Op op, const OpAttrs& attrs, const std::vector<Tensor>& inputs);

// Named wrappers. All of them route through apply().
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float s);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              int stride = 1, int pad = 0);
Tensor dwconv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                int pad = 0);
Tensor upsample2x(const Tensor& x);
Tensor maxpool2x2(const Tensor& x);
Tensor concat(const Tensor& a, const Tensor& b, int axis = 0);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 float eps = 1e-5f);
Tensor softmax(const Tensor& x, int axis);
Tensor l2_normalize(const Tensor& x, int axis, float eps = 1e-6f);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& x);
Tensor transpose2d(const Tensor& x);
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor slice_rows(const Tensor& x, int start, int count);
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   const Tensor& run_mean, const Tensor& run_var,
                   bool training, float momentum = 0.1f, float eps = 1e-5f);

// ---------------------------------------------------------------------------
// Tape
//
// Explicit gradient tape: create one, open a TapeScope so primitives record
// onto it, compute a scalar loss, then call backward(). Gradients accumulate
// into the .grad buffers of requires_grad leaves; every leaf that appears in
// the recorded graph receives a grad buffer (zeros when not on a path to the
// loss). Entries replay in reverse recording order, so gradient accumulation
// order is deterministic.
// ---------------------------------------------------------------------------

class Tape {
  public:
    struct Entry {
        Op op;
        OpAttrs attrs;
        std::vector<Tensor> inputs;
        Tensor output;
    };

    void clear();
    bool produced(const TensorNode* n) const {
        return live_.count(n) != 0;
    }
    void record(Entry e);
    const std::vector<Entry>& entries() const { return entries_; }

  private:
    std::vector<Entry> entries_;
    std::unordered_set<const TensorNode*> live_;
};

// RAII activation of a tape on the current thread.
class TapeScope {
  public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

  private:
    Tape* prev_;
};

Tape* active_tape();

// Reverse-mode sweep from a scalar loss recorded on this tape.
void backward(Tape& tape, const Tensor& loss);

// ---------------------------------------------------------------------------
// Optimizer (Adam with bias correction)
// ---------------------------------------------------------------------------

struct AdamHyper {
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

struct AdamState {
    int64_t t = 0;  // shared step count, incremented once per optimizer_step
    std::unordered_map<const TensorNode*,
                       std::pair<std::vector<float>, std::vector<float>>>
        moments;  // node -> (m, v)
};

// Applies one Adam update to every parameter, then zeroes its grad. Throws
// NumericError naming the parameter if its grad buffer is missing.
void optimizer_step(const std::vector<std::pair<std::string, Tensor>>& params,
                    AdamState& state, const AdamHyper& hyper);

// ---------------------------------------------------------------------------
// Gradient checking
//
// Compares tape gradients of probe . op(inputs) against central finite
// differences. max_rel_err is normalized by the gradient's own max magnitude
// (float32 forward passes make a strict elementwise ratio meaningless for
// near-zero entries).
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    bool pass = false;
};

GradCheckReport grad_check(Op op, const OpAttrs& attrs,
                           const std::vector<Tensor>& inputs, float epsilon,
                           uint64_t probe_seed,
                           std::vector<bool> check_input = {},
                           double tolerance = 1e-2);

// ---------------------------------------------------------------------------
// Checkpoint serialization
//
// Binary little-endian container: magic "CRSP", format version, a UTF-8
// config echo, then named float32 tensors with explicit extents.
// ---------------------------------------------------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(
    const std::string& path, const std::string& config_echo,
    const std::vector<std::pair<std::string, Tensor>>& tensors);

struct Checkpoint {
    std::string config_echo;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace crisp
