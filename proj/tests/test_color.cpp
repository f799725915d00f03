// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "crisp/color.hpp"
#include "crisp/rng.hpp"

using namespace crisp;

namespace {

RgbImage solid(int h, int w, float r, float g, float b) {
    RgbImage img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            img.at(y, x, 0) = r;
            img.at(y, x, 1) = g;
            img.at(y, x, 2) = b;
        }
    return img;
}

RgbImage noisy(const RgbImage& base, float amplitude, uint64_t seed) {
    Rng rng(seed);
    RgbImage out = base;
    for (auto& v : out.data)
        v = std::clamp(v + rng.uniform(-amplitude, amplitude), 0.0f, 1.0f);
    return out;
}

}  // namespace

// Anchor values computed independently with a high-precision implementation
// of the CIE definitions (D65, reference white = sRGB matrix row sums).
TEST_CASE("CIELAB anchors") {
    double lab[3];

    lab_of_srgb(1.0, 1.0, 1.0, lab);
    CHECK(std::abs(lab[0] - 100.0) < 1e-6);
    CHECK(std::abs(lab[1]) < 1e-6);
    CHECK(std::abs(lab[2]) < 1e-6);

    lab_of_srgb(0.0, 0.0, 0.0, lab);
    CHECK(std::abs(lab[0]) < 1e-9);
    CHECK(std::abs(lab[1]) < 1e-9);
    CHECK(std::abs(lab[2]) < 1e-9);

    lab_of_srgb(0.5, 0.5, 0.5, lab);
    CHECK(std::abs(lab[0] - 53.38896474) < 1e-6);
    CHECK(std::abs(lab[1]) < 1e-9);
    CHECK(std::abs(lab[2]) < 1e-9);

    lab_of_srgb(0.25, 0.5, 0.75, lab);
    CHECK(std::abs(lab[0] - 52.01818501) < 1e-6);
    CHECK(std::abs(lab[1] - 0.09340804) < 1e-6);
    CHECK(std::abs(lab[2] - (-39.36307041)) < 1e-6);

    lab_of_srgb(0.8, 0.2, 0.1, lab);
    CHECK(std::abs(lab[0] - 46.01750682) < 1e-6);
    CHECK(std::abs(lab[1] - 58.37710570) < 1e-6);
    CHECK(std::abs(lab[2] - 49.97242958) < 1e-6);
}

TEST_CASE("transfer function round trip and thresholds") {
    for (int i = 0; i <= 1000; ++i) {
        const double v = i / 1000.0;
        CHECK(std::abs(srgb_encode(srgb_decode(v)) - v) < 1e-9);
    }
    // piecewise segments meet at the standard thresholds
    CHECK(std::abs(srgb_decode(0.04045) - 0.04045 / 12.92) < 1e-12);
    CHECK(std::abs(srgb_encode(0.0031308) - 12.92 * 0.0031308) < 1e-9);
}

TEST_CASE("delta_e reflects perceptual nonuniformity") {
    // same RGB-space displacement: pure lightness shift vs red/green shift
    const double d = 0.02;
    const double h = d * std::sqrt(3.0) / std::sqrt(2.0);
    RgbImage base = solid(4, 4, 0.8f, 0.2f, 0.2f);
    RgbImage lum = solid(4, 4, 0.8f + static_cast<float>(d),
                         0.2f + static_cast<float>(d),
                         0.2f + static_cast<float>(d));
    RgbImage hue = solid(4, 4, 0.8f + static_cast<float>(h),
                         0.2f - static_cast<float>(h), 0.2f);
    const double de_lum = delta_e(base, lum);
    const double de_hue = delta_e(base, hue);
    CHECK(de_lum == doctest::Approx(1.8284817).epsilon(1e-3));
    CHECK(de_hue == doctest::Approx(3.8909461).epsilon(1e-3));
    CHECK(de_lum < de_hue);
}

TEST_CASE("identity metrics") {
    RgbImage img = noisy(solid(32, 32, 0.4f, 0.5f, 0.6f), 0.3f, 17);
    CHECK(delta_e(img, img) == 0.0);
    CHECK(std::isinf(psnr(img, img)));
    CHECK(psnr(img, img) > 0);
    CHECK(ssim(img, img) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("metrics are symmetric and track distortion monotonically") {
    RgbImage base = noisy(solid(32, 32, 0.5f, 0.4f, 0.3f), 0.2f, 5);
    RgbImage weak = noisy(base, 0.02f, 7);
    RgbImage strong = noisy(base, 0.10f, 7);

    CHECK(delta_e(base, weak) == doctest::Approx(delta_e(weak, base)));
    CHECK(psnr(base, weak) == doctest::Approx(psnr(weak, base)));

    CHECK(delta_e(base, weak) < delta_e(base, strong));
    CHECK(psnr(base, weak) > psnr(base, strong));
    CHECK(ssim(base, weak) > ssim(base, strong));
    CHECK(ssim(base, weak) < 1.0);
    CHECK(ssim(base, weak) > 0.0);
}

TEST_CASE("metric shape and domain errors") {
    RgbImage a(16, 16), b(16, 17);
    CHECK_THROWS_AS(delta_e(a, b), ShapeError);
    CHECK_THROWS_AS(psnr(a, b), ShapeError);
    CHECK_THROWS_AS(ssim(a, b), ShapeError);
    RgbImage small(8, 8), small2(8, 8);
    CHECK_THROWS_AS(ssim(small, small2), ShapeError);
    RgbImage lin(16, 16, true);
    RgbImage enc(16, 16);
    CHECK_THROWS_AS(delta_e(lin, enc), ConfigError);
    CHECK_THROWS_AS(srgb_to_lab(lin), ConfigError);
}

TEST_CASE("srgb_to_lab matches the scalar anchor per pixel") {
    RgbImage img = solid(3, 3, 0.25f, 0.5f, 0.75f);
    LabImage lab = srgb_to_lab(img);
    CHECK(lab.data[0] == doctest::Approx(52.018185).epsilon(1e-5));
    CHECK(lab.data[1] == doctest::Approx(0.093408).epsilon(1e-3));
    CHECK(lab.data[2] == doctest::Approx(-39.363070).epsilon(1e-5));
}

TEST_CASE("metric report format") {
    const auto path =
        (std::filesystem::temp_directory_path() / "crisp_report.txt").string();
    write_metric_report(path, {{"000001", 32.5, 0.95,  1.25},
                               {"000002", std::numeric_limits<double>::infinity(),
                                1.0, 0.0}});
    std::ifstream f(path);
    std::string line1, line2, line3;
    std::getline(f, line1);
    std::getline(f, line2);
    std::getline(f, line3);
    CHECK(line1 == "000001 32.500000 0.950000 1.250000");
    CHECK(line2 == "000002 inf 1.000000 0.000000");
    CHECK(line3.substr(0, 9) == "mean inf ");
    std::filesystem::remove(path);
}
