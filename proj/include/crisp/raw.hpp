// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "crisp/color.hpp"
#include "crisp/errors.hpp"

namespace crisp {

enum class CfaPattern : uint8_t { kRggb = 0 };

// Single-channel mosaic straight off the (simulated) sensor, with its
// quantization calibration. Sample layout for RGGB:
//   even rows: R G R G ...   odd rows: G B G B ...
struct BayerFrame {
    int height = 0;
    int width = 0;
    CfaPattern pattern = CfaPattern::kRggb;
    uint16_t black_level = 0;
    uint16_t white_level = 65535;
    std::vector<uint16_t> data;  // row-major, height * width
};

// Half-resolution 4-plane view of a mosaic: channels (R, G1, B, G2),
// interleaved, normalized to [0,1] by (s - black) / (white - black).
struct PackedRaw {
    int height = 0;
    int width = 0;
    std::vector<float> data;  // height * width * 4
    float at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * width + x) * 4 +
                    static_cast<size_t>(c)];
    }
};

// Low-resolution 3-channel linear thumbnail (R, mean(G1,G2), B) used by the
// whole-scene context branch.
struct GlobalInput {
    int height = 0;
    int width = 0;
    std::vector<float> data;  // height * width * 3
};

// White-balance gains and capture conditions stored next to each raw file.
struct CaptureMeta {
    float wb_r = 1.0f;
    float wb_g = 1.0f;
    float wb_b = 1.0f;
    float exposure_ms = 10.0f;
    float gain_iso = 100.0f;
    int scene_class = 0;
    std::string split;
};

// ---------------------------------------------------------------------------
// Mosaic transforms
// ---------------------------------------------------------------------------

// Mosaic -> packed planes. Extents must be even.
PackedRaw pack(const BayerFrame& frame);

// Packed planes -> normalized mosaic values (row-major height*2 x width*2).
std::vector<float> unpack(const PackedRaw& packed);

// Bilinear demosaick of the normalized mosaic: each missing color is the
// mean of its in-bounds same-color neighbors (cross for green, diagonal or
// horizontal/vertical pairs for red/blue). Returns linear RGB.
RgbImage demosaick_bilinear(const BayerFrame& frame);

// ---------------------------------------------------------------------------
// Tiling
// ---------------------------------------------------------------------------

// Row-major patch decomposition. positions[i] is the (row, col) origin of
// patch i; untile honors whatever order positions lists, so a permuted
// layout with equally permuted patches reassembles identically.
struct TileLayout {
    int image_h = 0, image_w = 0, channels = 0;
    int patch_h = 0, patch_w = 0;
    std::vector<std::pair<int, int>> positions;
};

// Generic interleaved-image tiling core. Image extents must be divisible by
// the patch extents.
std::vector<std::vector<float>> tile_image(const float* data, int h, int w,
                                           int c, int patch_h, int patch_w,
                                           TileLayout* layout);
std::vector<float> untile_image(const std::vector<std::vector<float>>& patches,
                                const TileLayout& layout);

std::vector<PackedRaw> tile_packed(const PackedRaw& img, int patch_h,
                                   int patch_w, TileLayout* layout = nullptr);
PackedRaw untile_packed(const std::vector<PackedRaw>& patches,
                        const TileLayout& layout);
std::vector<RgbImage> tile_rgb(const RgbImage& img, int patch_h, int patch_w,
                               TileLayout* layout = nullptr);
RgbImage untile_rgb(const std::vector<RgbImage>& patches,
                    const TileLayout& layout);

// ---------------------------------------------------------------------------
// Downsampling
// ---------------------------------------------------------------------------

// Exact area-average (fractional box filter) resample of an interleaved
// image. Output extents must not exceed the input extents.
std::vector<float> area_resample(const float* data, int h, int w, int c,
                                 int out_h, int out_w);

// Packed raw -> fixed-extent global thumbnail: fuse greens, then area
// resample to exactly (out_h, out_w).
GlobalInput make_global_input(const PackedRaw& packed, int out_h, int out_w);

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

// .craw: "CRAW" magic, u16 width, u16 height, u8 pattern, u16 black level,
// u16 white level, then width*height u16 samples, all little-endian.
void write_craw(const std::string& path, const BayerFrame& frame);
BayerFrame read_craw(const std::string& path);

// Binary PPM (P6). max_val 255 writes one byte per sample, 65535 writes two
// (most significant byte first). Reads accept either depth.
void write_ppm(const std::string& path, const RgbImage& img,
               int max_val = 255);
RgbImage read_ppm(const std::string& path);

// key=value sidecar with wb gains, exposure, iso, scene class and split.
void write_meta(const std::string& path, const CaptureMeta& meta);
CaptureMeta read_meta(const std::string& path);

}  // namespace crisp
