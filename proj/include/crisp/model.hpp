// SPDX-License-Identifier: Apache-2.0
//
// The reconstruction network: a small U-Net over packed CFA patches, with
// optional white-balance metadata injection (channel-wise affine scales at
// chosen encoder levels, or premultiplied into the input), and an optional
// global-context branch (cross-covariance attention transformer or a small
// CNN) that summarizes a downsampled view of the whole frame into a feature
// vector modulating the U-Net bottleneck.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "crisp/raw.hpp"
#include "crisp/tensor.hpp"

namespace crisp {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    int levels = 3;         // encoder/decoder depth; inputs must divide 2^levels
    int base_channels = 8;  // channels at the first level, doubled per level
    int max_channels = 512;
    std::vector<int> wb_levels;  // encoder levels with metadata injection
    bool pre_wb = false;         // premultiply packed input by metadata gains
    std::string global_branch = "none";  // none | cnn | xcit
    int global_height = 48;  // extents of the downsampled full-frame input
    int global_width = 64;
    int xcit_embed = 32;  // token width of the attention branch
    int xcit_heads = 4;
    int xcit_blocks = 4;

    int channels_at(int level) const;  // min(base_channels<<(level-1), max)
    int bottleneck_channels() const { return channels_at(levels + 1); }
    int head_dim() const { return xcit_embed / xcit_heads; }

    void validate() const;            // ConfigError on any inconsistency
    std::string serialize() const;    // key=value lines, fixed order
    static ModelConfig parse(const std::string& text);
    bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Model: named parameters in a stable registration order
// ---------------------------------------------------------------------------

struct Model {
    ModelConfig config;
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<std::pair<std::string, Tensor>> buffers;  // BN running stats

    Tensor find(const std::string& name) const;  // GraphError when absent
    bool has(const std::string& name) const;
};

// Deterministic construction: the same config and seed produce bitwise
// identical parameters.
Model build_model(const ModelConfig& config, uint64_t seed);
int64_t count_parameters(const Model& m);

// ---------------------------------------------------------------------------
// Cross-covariance attention core (exported for direct verification)
//
// q, k, v are [tokens, head_dim]; tau is a learnable scalar [1]. Columns of
// q and k are L2-normalized along the token axis, so the [head_dim,
// head_dim] attention matrix is invariant to token count and ordering.
// Softmax runs along axis 0: column c of the matrix is the mixture over
// input features producing output feature c, and each column sums to one.
// ---------------------------------------------------------------------------

Tensor xca_attention(const Tensor& q, const Tensor& k, const Tensor& tau);
Tensor xca_apply(const Tensor& q, const Tensor& k, const Tensor& v,
                 const Tensor& tau);  // [tokens, head_dim]

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

// Summarizes the downsampled frame [3, global_height, global_width] into a
// bottleneck-width feature vector. GraphError when the config has no branch.
Tensor global_feature(const Model& m, const Tensor& global_rgb, bool training);

// U-Net reconstruction of one packed patch [4, H, W] -> [3, 2H, 2W].
// wb is the [1,3] metadata gain row; feature is the global-branch output
// (undefined Tensor when global_branch is none). H and W must divide
// 2^levels (ShapeError naming the failing level otherwise).
Tensor reconstruct(const Model& m, const Tensor& packed, const Tensor& wb,
                   const Tensor& feature, bool training);

struct ForwardInput {
    Tensor packed;      // [4, H, W]
    Tensor wb;          // [1, 3]
    Tensor global_rgb;  // [3, global_height, global_width]; may be undefined
                        //   when the config has no global branch
};

// global_feature (when configured) composed with reconstruct.
Tensor forward(const Model& m, const ForwardInput& in, bool training);

// ---------------------------------------------------------------------------
// Full-frame inference
// ---------------------------------------------------------------------------

struct InferStats {
    int global_evals = 0;  // how often the global branch ran
    int patches = 0;       // how many tiles were reconstructed
};

// Packs the frame, runs the global branch once, reconstructs patch-by-patch
// (patch x patch in the packed domain) and reassembles the sRGB output at
// the mosaic resolution. Output values are clamped to [0,1].
RgbImage infer_full(const Model& m, const BayerFrame& frame,
                    const CaptureMeta& meta, int patch,
                    InferStats* stats = nullptr);

// Input adapters: interleaved buffers -> planar tensors.
Tensor packed_to_tensor(const PackedRaw& packed);      // [4, H, W]
Tensor global_to_tensor(const GlobalInput& global);    // [3, H, W]
Tensor wb_to_tensor(const CaptureMeta& meta);          // [1, 3]

// ---------------------------------------------------------------------------
// Persistence (checkpoint container from tensor.hpp, config as the echo)
// ---------------------------------------------------------------------------

void save_model(const Model& m, const std::string& path);
Model load_model(const std::string& path);
// Copies checkpoint tensors into an existing model; ConfigError naming the
// first missing/extra/mismatched tensor.
void load_weights(Model& m, const std::string& path);

}  // namespace crisp
