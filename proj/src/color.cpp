// SPDX-License-Identifier: Apache-2.0
#include "crisp/color.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace crisp {

RgbImage::RgbImage(int h, int w, bool lin) : height(h), width(w), linear(lin) {
    if (h <= 0 || w <= 0)
        throw ShapeError("RgbImage: non-positive extents " +
                         std::to_string(h) + "x" + std::to_string(w));
    data.assign(static_cast<size_t>(h) * w * 3, 0.0f);
}

RgbImage RgbImage::from_data(int h, int w, std::vector<float> d, bool lin) {
    RgbImage img(h, w, lin);
    if (d.size() != img.data.size())
        throw ShapeError("RgbImage: " + std::to_string(d.size()) +
                         " values do not fill " + std::to_string(h) + "x" +
                         std::to_string(w) + "x3");
    for (auto& v : d) v = std::clamp(v, 0.0f, 1.0f);
    img.data = std::move(d);
    return img;
}

double srgb_decode(double encoded) {
    return encoded <= 0.04045 ? encoded / 12.92
                              : std::pow((encoded + 0.055) / 1.055, 2.4);
}

double srgb_encode(double lin) {
    return lin <= 0.0031308 ? 12.92 * lin
                            : 1.055 * std::pow(lin, 1.0 / 2.4) - 0.055;
}

namespace {

// sRGB (D65) to XYZ. The Lab reference white below is the row sums of this
// matrix, which makes the whole pipeline self-consistent: encoded (1,1,1)
// lands on exactly (100, 0, 0).
constexpr double kRgbToXyz[3][3] = {
    {0.4124564, 0.3575761, 0.1804375},
    {0.2126729, 0.7151522, 0.0721750},
    {0.0193339, 0.1191920, 0.9503041},
};
constexpr double kWhiteX = kRgbToXyz[0][0] + kRgbToXyz[0][1] + kRgbToXyz[0][2];
constexpr double kWhiteY = kRgbToXyz[1][0] + kRgbToXyz[1][1] + kRgbToXyz[1][2];
constexpr double kWhiteZ = kRgbToXyz[2][0] + kRgbToXyz[2][1] + kRgbToXyz[2][2];

constexpr double kLabEps = 216.0 / 24389.0;
constexpr double kLabKappa = 24389.0 / 27.0;

double lab_f(double t) {
    return t > kLabEps ? std::cbrt(t) : (kLabKappa * t + 16.0) / 116.0;
}

void require_same_extents(const char* what, const RgbImage& a,
                          const RgbImage& b) {
    if (a.height != b.height || a.width != b.width)
        throw ShapeError(std::string(what) + ": image extents " +
                         std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " and " +
                         std::to_string(b.height) + "x" +
                         std::to_string(b.width) + " differ");
}

void require_encoded(const char* what, const RgbImage& img) {
    if (img.linear)
        throw ConfigError(std::string(what) +
                          ": expects sRGB-encoded images, got linear");
}

}  // namespace

void lab_of_srgb(double r, double g, double b, double lab[3]) {
    const double rl = srgb_decode(r), gl = srgb_decode(g), bl = srgb_decode(b);
    const double x = kRgbToXyz[0][0] * rl + kRgbToXyz[0][1] * gl +
                     kRgbToXyz[0][2] * bl;
    const double y = kRgbToXyz[1][0] * rl + kRgbToXyz[1][1] * gl +
                     kRgbToXyz[1][2] * bl;
    const double z = kRgbToXyz[2][0] * rl + kRgbToXyz[2][1] * gl +
                     kRgbToXyz[2][2] * bl;
    const double fx = lab_f(x / kWhiteX);
    const double fy = lab_f(y / kWhiteY);
    const double fz = lab_f(z / kWhiteZ);
    lab[0] = 116.0 * fy - 16.0;
    lab[1] = 500.0 * (fx - fy);
    lab[2] = 200.0 * (fy - fz);
}

LabImage srgb_to_lab(const RgbImage& img) {
    require_encoded("srgb_to_lab", img);
    LabImage out;
    out.height = img.height;
    out.width = img.width;
    out.data.resize(img.data.size());
    for (int64_t p = 0; p < img.pixel_count(); ++p) {
        double lab[3];
        lab_of_srgb(img.data[p * 3], img.data[p * 3 + 1], img.data[p * 3 + 2],
                    lab);
        out.data[static_cast<size_t>(p) * 3] = static_cast<float>(lab[0]);
        out.data[static_cast<size_t>(p) * 3 + 1] = static_cast<float>(lab[1]);
        out.data[static_cast<size_t>(p) * 3 + 2] = static_cast<float>(lab[2]);
    }
    return out;
}

double delta_e(const RgbImage& a, const RgbImage& b) {
    require_same_extents("delta_e", a, b);
    require_encoded("delta_e", a);
    require_encoded("delta_e", b);
    double sum_sq = 0.0;
    for (int64_t p = 0; p < a.pixel_count(); ++p) {
        double la[3], lb[3];
        lab_of_srgb(a.data[p * 3], a.data[p * 3 + 1], a.data[p * 3 + 2], la);
        lab_of_srgb(b.data[p * 3], b.data[p * 3 + 1], b.data[p * 3 + 2], lb);
        const double dl = la[0] - lb[0];
        const double da = la[1] - lb[1];
        const double db = la[2] - lb[2];
        sum_sq += dl * dl + da * da + db * db;
    }
    return std::sqrt(sum_sq / static_cast<double>(a.pixel_count()));
}

double psnr(const RgbImage& a, const RgbImage& b) {
    require_same_extents("psnr", a, b);
    double sum_sq = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - b.data[i];
        sum_sq += d * d;
    }
    const double mse = sum_sq / static_cast<double>(a.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

double ssim(const RgbImage& a, const RgbImage& b) {
    require_same_extents("ssim", a, b);
    constexpr int kWin = 11;
    if (a.height < kWin || a.width < kWin)
        throw ShapeError("ssim: extents " + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " are smaller than the " +
                         std::to_string(kWin) + "x" + std::to_string(kWin) +
                         " window");

    // Rec.709 luma of the encoded values
    const int h = a.height, w = a.width;
    std::vector<double> la(static_cast<size_t>(h) * w);
    std::vector<double> lb(la.size());
    for (int64_t p = 0; p < a.pixel_count(); ++p) {
        la[static_cast<size_t>(p)] = 0.2126 * a.data[p * 3] +
                                     0.7152 * a.data[p * 3 + 1] +
                                     0.0722 * a.data[p * 3 + 2];
        lb[static_cast<size_t>(p)] = 0.2126 * b.data[p * 3] +
                                     0.7152 * b.data[p * 3 + 1] +
                                     0.0722 * b.data[p * 3 + 2];
    }

    // normalized 11x11 Gaussian, sigma 1.5
    double kernel[kWin][kWin];
    double ksum = 0.0;
    for (int i = 0; i < kWin; ++i)
        for (int j = 0; j < kWin; ++j) {
            const double dy = i - kWin / 2, dx = j - kWin / 2;
            kernel[i][j] = std::exp(-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5));
            ksum += kernel[i][j];
        }
    for (int i = 0; i < kWin; ++i)
        for (int j = 0; j < kWin; ++j) kernel[i][j] /= ksum;

    constexpr double kC1 = 0.01 * 0.01;  // (K1 * L)^2, L = 1
    constexpr double kC2 = 0.03 * 0.03;  // (K2 * L)^2
    double total = 0.0;
    int64_t windows = 0;
    for (int y0 = 0; y0 + kWin <= h; ++y0) {
        for (int x0 = 0; x0 + kWin <= w; ++x0) {
            double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
            for (int i = 0; i < kWin; ++i) {
                const double* ra = la.data() + static_cast<size_t>(y0 + i) * w + x0;
                const double* rb = lb.data() + static_cast<size_t>(y0 + i) * w + x0;
                for (int j = 0; j < kWin; ++j) {
                    const double k = kernel[i][j];
                    mx += k * ra[j];
                    my += k * rb[j];
                    xx += k * ra[j] * ra[j];
                    yy += k * rb[j] * rb[j];
                    xy += k * ra[j] * rb[j];
                }
            }
            const double vx = xx - mx * mx;
            const double vy = yy - my * my;
            const double cxy = xy - mx * my;
            const double s = ((2.0 * mx * my + kC1) * (2.0 * cxy + kC2)) /
                             ((mx * mx + my * my + kC1) * (vx + vy + kC2));
            total += s;
            ++windows;
        }
    }
    return total / static_cast<double>(windows);
}

void write_metric_report(const std::string& path,
                         const std::vector<MetricRow>& rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("metric report " + path + ": cannot open for writing");
    auto fmt = [](double v) {
        if (std::isinf(v)) return std::string("inf");
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        return std::string(buf);
    };
    double sp = 0, ss = 0, sd = 0;
    for (const auto& r : rows) {
        f << r.id << ' ' << fmt(r.psnr) << ' ' << fmt(r.ssim) << ' '
          << fmt(r.delta_e) << '\n';
        sp += r.psnr;
        ss += r.ssim;
        sd += r.delta_e;
    }
    const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
    f << "mean " << fmt(sp / n) << ' ' << fmt(ss / n) << ' ' << fmt(sd / n)
      << '\n';
    if (!f) throw IoError("metric report " + path + ": write failed");
}

}  // namespace crisp
