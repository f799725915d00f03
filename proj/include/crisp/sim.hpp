// SPDX-License-Identifier: Apache-2.0
//
// Synthetic camera: scene rendering, a sensor/optics/noise forward model,
// and the reference rendering pipeline the network is trained to match.
// Every stochastic step draws from an explicit Rng, so dataset generation
// is reproducible byte for byte.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "crisp/color.hpp"
#include "crisp/errors.hpp"
#include "crisp/raw.hpp"
#include "crisp/rng.hpp"

namespace crisp {

// ---------------------------------------------------------------------------
// Sensor color response
// ---------------------------------------------------------------------------

// Channel-crosstalk matrix applied to linear RGB before mosaicking. Rows sum
// to one, so neutral scenes stay neutral through the sensor.
const std::array<std::array<float, 3>, 3>& sensor_matrix();
// Exact inverse of sensor_matrix(), computed once in double precision.
const std::array<std::array<float, 3>, 3>& sensor_matrix_inverse();

// ---------------------------------------------------------------------------
// Reference render components (exported for direct verification)
// ---------------------------------------------------------------------------

// Monotone cubic (Fritsch–Carlson) through (0,0), (0.25,0.32), (0.6,0.66),
// (1,1): lifts shadows, compresses highlights, exact at the knots.
float shadow_lift(float t);

// Per-channel tone curve of a render class: class 0 is a gentle gamma tweak
// t^0.95, class 1 is the shadow-lift curve. Input is clamped to [0,1].
float tone_curve(float t, int scene_class);

// Saturation about Rec.709 luma on linear values, in place: each channel
// moves toward (factor < 1) or away from (factor > 1) the pixel's luma.
void apply_saturation(float* rgb, float factor);

// ---------------------------------------------------------------------------
// Capture profiles
// ---------------------------------------------------------------------------

// A capture condition: how soft the optics are, how strong the noise is,
// and how scenes and white-balance gains are distributed.
struct Profile {
    std::string name = "monitor";
    float blur_sigma = 0.8f;    // Gaussian optical softness ahead of the CFA
    float noise_scale = 0.25f;  // multiplier on the shot/read noise model
    float class_mix_p = 0.70f;  // chance a primitive keeps its class palette
    float gain_lo = 0.4f;       // white-balance gains drawn log-uniform
    float gain_hi = 2.5f;       //   from [gain_lo, gain_hi]
    int frame_height = 128;
    int frame_width = 128;

    static Profile monitor();  // soft, low noise (re-shooting a display)
    static Profile real();     // sharp, heavier noise (handheld capture)
    static Profile by_name(const std::string& name);  // ConfigError if unknown
};

// ---------------------------------------------------------------------------
// Scene and camera forward model
// ---------------------------------------------------------------------------

// Procedural scene: a neutral background, overlapping primitives whose shape
// follows the scene class (0: rectangles, 1: ellipses) and whose color is
// drawn from the class palette with probability class_mix_p (otherwise from
// the other palette), plus fine per-pixel texture. Returns linear RGB,
// height*width*3 interleaved, values in [0,1].
std::vector<float> render_scene(int height, int width, int scene_class,
                                float class_mix_p, Rng& rng);

// Scene -> Bayer frame: optional Gaussian blur, sensor matrix, division by
// the illuminant gains (gain_g is 1), RGGB mosaic, signal-dependent Gaussian
// noise (shot 0.08*sqrt(iso/100), read 0.002*iso/100, both scaled by the
// profile's noise_scale), then quantization to black level 1024 / white
// level 64512.
BayerFrame camera_forward(const std::vector<float>& scene, int height,
                          int width, float gain_r, float gain_b, float iso,
                          const Profile& profile, Rng& rng);

// Reference rendering the network learns to reproduce: bilinear demosaick,
// exact white-balance gains, sensor matrix inverse, class-dependent look
// (saturation 0.90 + gamma tweak for class 0, saturation 1.25 + shadow lift
// for class 1), then sRGB encoding. Output is display-encoded.
RgbImage legacy_isp(const BayerFrame& frame, float gain_r, float gain_g,
                    float gain_b, int scene_class);

// The white-balance gain as stored in capture metadata: the exact gain with
// a deterministic pull toward neutral plus a small random wobble,
//   stored = g * (1 + 0.018*u + 0.002*eta),
// u = clamp(-ln(g)/ln(2.5), -1, 1), eta ~ U(-1,1). The pull is invertible
// from the stored value, so a learned correction can recover the exact gain
// up to the wobble, while using the stored value directly cannot.
float perturb_gain(float gain, Rng& rng);

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

struct GenerateConfig {
    Profile profile;
    int count = 750;
    uint64_t seed = 1;
    float val_fraction = 0.10f;
    float test_fraction = 0.10f;
    std::string out_dir;
};

struct DatasetItem {
    std::string id;
    std::string split;  // train | val | test
    int scene_class = 0;
    std::string raw_path;  // all paths relative to the manifest directory
    std::string target_path;
    std::string meta_path;
};

struct Manifest {
    std::string root;  // directory containing manifest.tsv
    std::vector<DatasetItem> items;
};

// Writes raw/<id>.craw, target/<id>.ppm (16-bit), meta/<id>.meta and
// manifest.tsv under config.out_dir. Item <k> derives all of its randomness
// from mix_seed(config.seed, k), so any run with the same config produces
// identical bytes. Splits are assigned by position: the first
// count - floor(count*val) - floor(count*test) items are train, then val,
// then test.
void generate_dataset(const GenerateConfig& config);

// Parses a manifest written by generate_dataset. Validates field count,
// split names and scene classes; file existence is checked by readers.
Manifest load_manifest(const std::string& manifest_path);

}  // namespace crisp
