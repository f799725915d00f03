// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "crisp/errors.hpp"

namespace crisp {

// Interleaved H x W x 3 float image. `linear` distinguishes scene-linear RGB
// from sRGB-encoded values; metrics require the encoded form. Values are
// clamped to [0,1] when constructed through from_data().
struct RgbImage {
    int height = 0;
    int width = 0;
    bool linear = false;
    std::vector<float> data;  // height * width * 3, row-major interleaved

    RgbImage() = default;
    RgbImage(int h, int w, bool lin = false);
    static RgbImage from_data(int h, int w, std::vector<float> d,
                              bool lin = false);

    float& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * width + x) * 3 +
                    static_cast<size_t>(c)];
    }
    float at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * width + x) * 3 +
                    static_cast<size_t>(c)];
    }
    int64_t pixel_count() const {
        return static_cast<int64_t>(height) * width;
    }
};

struct LabImage {
    int height = 0;
    int width = 0;
    std::vector<float> data;  // L*, a*, b* interleaved
};

// sRGB transfer function (IEC 61966-2-1 piecewise form).
double srgb_decode(double encoded);  // encoded -> linear
double srgb_encode(double lin);      // linear -> encoded

// CIELAB (D65) of one sRGB-encoded color. The reference white is the row sum
// of the sRGB-to-XYZ matrix, so (1,1,1) maps to exactly (100, 0, 0).
void lab_of_srgb(double r, double g, double b, double lab[3]);

LabImage srgb_to_lab(const RgbImage& img);

// CIE76 color difference: root-mean-square over pixels of the per-pixel
// Euclidean distance in CIELAB.
double delta_e(const RgbImage& a, const RgbImage& b);

// Peak signal-to-noise ratio with peak 1.0; +infinity for identical images.
double psnr(const RgbImage& a, const RgbImage& b);

// Structural similarity on Rec.709 luma of the encoded values: 11x11
// Gaussian window (sigma 1.5), K1=0.01, K2=0.03, averaged over windows fully
// inside the image. Requires both extents >= 11.
double ssim(const RgbImage& a, const RgbImage& b);

struct MetricRow {
    std::string id;
    double psnr = 0.0;
    double ssim = 0.0;
    double delta_e = 0.0;
};

// One line per image: "id psnr ssim delta_e", then "mean ..." with the
// column means. Infinite PSNR prints as "inf".
void write_metric_report(const std::string& path,
                         const std::vector<MetricRow>& rows);

}  // namespace crisp
