// SPDX-License-Identifier: Apache-2.0
#include "crisp/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace crisp {

namespace {

constexpr double kBlackLevel = 1024.0;
constexpr double kWhiteLevel = 64512.0;

// Fritsch–Carlson slopes for a monotone cubic through n knots.
struct MonotoneCubic {
    std::array<double, 4> x, y, m;

    MonotoneCubic(std::array<double, 4> xs, std::array<double, 4> ys)
        : x(xs), y(ys) {
        std::array<double, 3> h, d;
        for (int i = 0; i < 3; ++i) {
            h[i] = x[i + 1] - x[i];
            d[i] = (y[i + 1] - y[i]) / h[i];
        }
        for (int i = 1; i < 3; ++i) {
            if (d[i - 1] * d[i] <= 0.0) {
                m[i] = 0.0;
            } else {
                const double w1 = 2.0 * h[i] + h[i - 1];
                const double w2 = h[i] + 2.0 * h[i - 1];
                m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
            }
        }
        m[0] = edge_slope(h[0], h[1], d[0], d[1]);
        m[3] = edge_slope(h[2], h[1], d[2], d[1]);
    }

    static double edge_slope(double h0, double h1, double d0, double d1) {
        double s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if (s * d0 <= 0.0) return 0.0;
        if (std::abs(s) > 3.0 * std::abs(d0)) return 3.0 * d0;
        return s;
    }

    double operator()(double t) const {
        t = std::clamp(t, x.front(), x.back());
        int i = t < x[1] ? 0 : t < x[2] ? 1 : 2;
        const double h = x[i + 1] - x[i];
        const double s = (t - x[i]) / h;
        const double s2 = s * s, s3 = s2 * s;
        return y[i] * (2 * s3 - 3 * s2 + 1) + h * m[i] * (s3 - 2 * s2 + s) +
               y[i + 1] * (-2 * s3 + 3 * s2) + h * m[i + 1] * (s3 - s2);
    }
};

const MonotoneCubic& shadow_lift_curve() {
    static const MonotoneCubic curve({0.0, 0.25, 0.6, 1.0},
                                     {0.0, 0.32, 0.66, 1.0});
    return curve;
}

// RGGB channel (0=R, 1=G, 2=B) of the mosaic site at (y, x).
inline int cfa_channel(int y, int x) {
    return (y % 2 == 0) ? (x % 2 == 0 ? 0 : 1) : (x % 2 == 0 ? 1 : 2);
}

// Separable Gaussian blur with replicated edges, in place, per channel.
void gaussian_blur(std::vector<float>& img, int h, int w, float sigma) {
    const int radius = static_cast<int>(std::ceil(3.0f * sigma));
    std::vector<double> kernel(static_cast<size_t>(radius) * 2 + 1);
    double norm = 0.0;
    for (int k = -radius; k <= radius; ++k) {
        kernel[static_cast<size_t>(k + radius)] =
            std::exp(-0.5 * (static_cast<double>(k) * k) / (sigma * sigma));
        norm += kernel[static_cast<size_t>(k + radius)];
    }
    for (auto& v : kernel) v /= norm;

    std::vector<float> tmp(img.size());
    auto at = [&](const std::vector<float>& buf, int y, int x, int c) {
        y = std::clamp(y, 0, h - 1);
        x = std::clamp(x, 0, w - 1);
        return buf[(static_cast<size_t>(y) * w + x) * 3 + c];
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k)
                    acc += kernel[static_cast<size_t>(k + radius)] *
                           at(img, y, x + k, c);
                tmp[(static_cast<size_t>(y) * w + x) * 3 + c] =
                    static_cast<float>(acc);
            }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k)
                    acc += kernel[static_cast<size_t>(k + radius)] *
                           at(tmp, y + k, x, c);
                img[(static_cast<size_t>(y) * w + x) * 3 + c] =
                    static_cast<float>(acc);
            }
}

void require_scene_class(int scene_class) {
    if (scene_class != 0 && scene_class != 1)
        throw ConfigError("scene class must be 0 or 1, got " +
                          std::to_string(scene_class));
}

// Two five-color palettes: class 0 leans cool (blues, slate grays), class 1
// leans warm (reds, ambers, olive greens). Both average near neutral so the
// palette alone never fixes the white balance.
constexpr float kPalette[2][5][3] = {
    {{0.20f, 0.30f, 0.60f},
     {0.40f, 0.50f, 0.70f},
     {0.28f, 0.32f, 0.38f},
     {0.15f, 0.50f, 0.60f},
     {0.50f, 0.56f, 0.62f}},
    {{0.60f, 0.30f, 0.20f},
     {0.70f, 0.50f, 0.20f},
     {0.50f, 0.60f, 0.25f},
     {0.65f, 0.40f, 0.35f},
     {0.55f, 0.50f, 0.30f}},
};

std::string format_id(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d", index);
    return buf;
}

}  // namespace

const std::array<std::array<float, 3>, 3>& sensor_matrix() {
    static const std::array<std::array<float, 3>, 3> m = {{
        {0.85f, 0.10f, 0.05f},
        {0.075f, 0.85f, 0.075f},
        {0.05f, 0.10f, 0.85f},
    }};
    return m;
}

const std::array<std::array<float, 3>, 3>& sensor_matrix_inverse() {
    static const std::array<std::array<float, 3>, 3> inv = [] {
        const auto& m = sensor_matrix();
        double a[3][3];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) a[i][j] = m[i][j];
        const double det =
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) -
            a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
            a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
        std::array<std::array<float, 3>, 3> out;
        out[0][0] = static_cast<float>((a[1][1] * a[2][2] - a[1][2] * a[2][1]) / det);
        out[0][1] = static_cast<float>((a[0][2] * a[2][1] - a[0][1] * a[2][2]) / det);
        out[0][2] = static_cast<float>((a[0][1] * a[1][2] - a[0][2] * a[1][1]) / det);
        out[1][0] = static_cast<float>((a[1][2] * a[2][0] - a[1][0] * a[2][2]) / det);
        out[1][1] = static_cast<float>((a[0][0] * a[2][2] - a[0][2] * a[2][0]) / det);
        out[1][2] = static_cast<float>((a[0][2] * a[1][0] - a[0][0] * a[1][2]) / det);
        out[2][0] = static_cast<float>((a[1][0] * a[2][1] - a[1][1] * a[2][0]) / det);
        out[2][1] = static_cast<float>((a[0][1] * a[2][0] - a[0][0] * a[2][1]) / det);
        out[2][2] = static_cast<float>((a[0][0] * a[1][1] - a[0][1] * a[1][0]) / det);
        return out;
    }();
    return inv;
}

float shadow_lift(float t) {
    return static_cast<float>(shadow_lift_curve()(static_cast<double>(t)));
}

float tone_curve(float t, int scene_class) {
    require_scene_class(scene_class);
    const double v = std::clamp(static_cast<double>(t), 0.0, 1.0);
    if (scene_class == 0) return static_cast<float>(std::pow(v, 0.95));
    return static_cast<float>(shadow_lift_curve()(v));
}

void apply_saturation(float* rgb, float factor) {
    const float luma =
        0.2126f * rgb[0] + 0.7152f * rgb[1] + 0.0722f * rgb[2];
    for (int c = 0; c < 3; ++c) rgb[c] = luma + factor * (rgb[c] - luma);
}

Profile Profile::monitor() {
    Profile p;
    p.name = "monitor";
    p.blur_sigma = 0.8f;
    p.noise_scale = 0.25f;
    return p;
}

Profile Profile::real() {
    Profile p;
    p.name = "real";
    p.blur_sigma = 0.0f;
    p.noise_scale = 0.8f;
    return p;
}

Profile Profile::by_name(const std::string& name) {
    if (name == "monitor") return monitor();
    if (name == "real") return real();
    throw ConfigError("unknown capture profile '" + name +
                      "' (expected monitor or real)");
}

std::vector<float> render_scene(int height, int width, int scene_class,
                                float class_mix_p, Rng& rng) {
    require_scene_class(scene_class);
    if (height < 8 || width < 8)
        throw ShapeError("render_scene: frame must be at least 8x8, got " +
                         std::to_string(height) + "x" + std::to_string(width));
    if (!(class_mix_p >= 0.0f && class_mix_p <= 1.0f))
        throw ConfigError("class_mix_p must lie in [0,1]");

    std::vector<float> img(static_cast<size_t>(height) * width * 3);

    // near-neutral background with a gentle per-channel tint
    const float base = 0.18f + 0.27f * rng.uniform();
    float bg[3];
    for (float& c : bg)
        c = std::clamp(base * (1.0f + 0.04f * (2.0f * rng.uniform() - 1.0f)),
                       0.02f, 0.95f);
    for (size_t p = 0; p < img.size(); p += 3)
        for (int c = 0; c < 3; ++c) img[p + static_cast<size_t>(c)] = bg[c];

    const int n_prims = 6 + static_cast<int>(rng.uniform_int(7));  // 6..12
    for (int i = 0; i < n_prims; ++i) {
        const bool own_palette = rng.uniform() < class_mix_p;
        const int palette = own_palette ? scene_class : 1 - scene_class;
        const float* swatch =
            kPalette[palette][rng.uniform_int(5)];
        float color[3];
        for (int c = 0; c < 3; ++c)
            color[c] = std::clamp(
                swatch[c] + 0.06f * (2.0f * rng.uniform() - 1.0f), 0.02f,
                0.95f);

        auto paint = [&](int y, int x) {
            if (y < 0 || y >= height || x < 0 || x >= width) return;
            float* px = &img[(static_cast<size_t>(y) * width + x) * 3];
            for (int c = 0; c < 3; ++c) px[c] = color[c];
        };

        if (scene_class == 0) {
            // axis-aligned rectangle, possibly clipped at the frame edge
            const int pw = width / 8 + static_cast<int>(rng.uniform_int(
                                           static_cast<uint64_t>(
                                               width / 3 - width / 8 + 1)));
            const int ph = height / 8 + static_cast<int>(rng.uniform_int(
                                            static_cast<uint64_t>(
                                                height / 3 - height / 8 + 1)));
            const int x0 = static_cast<int>(rng.uniform_int(
                               static_cast<uint64_t>(width))) - pw / 2;
            const int y0 = static_cast<int>(rng.uniform_int(
                               static_cast<uint64_t>(height))) - ph / 2;
            for (int y = y0; y < y0 + ph; ++y)
                for (int x = x0; x < x0 + pw; ++x) paint(y, x);
        } else {
            // filled ellipse, possibly clipped at the frame edge
            const int rx = width / 12 + static_cast<int>(rng.uniform_int(
                                            static_cast<uint64_t>(
                                                width / 5 - width / 12 + 1)));
            const int ry = height / 12 + static_cast<int>(rng.uniform_int(
                                             static_cast<uint64_t>(
                                                 height / 5 - height / 12 + 1)));
            const int cx = static_cast<int>(
                rng.uniform_int(static_cast<uint64_t>(width)));
            const int cy = static_cast<int>(
                rng.uniform_int(static_cast<uint64_t>(height)));
            for (int y = cy - ry; y <= cy + ry; ++y)
                for (int x = cx - rx; x <= cx + rx; ++x) {
                    const double dx = static_cast<double>(x - cx) / rx;
                    const double dy = static_cast<double>(y - cy) / ry;
                    if (dx * dx + dy * dy <= 1.0) paint(y, x);
                }
        }
    }

    // fine per-pixel, per-channel texture
    for (auto& v : img)
        v = std::clamp(v + 0.02f * (2.0f * rng.uniform() - 1.0f), 0.005f,
                       0.995f);
    return img;
}

BayerFrame camera_forward(const std::vector<float>& scene, int height,
                          int width, float gain_r, float gain_b, float iso,
                          const Profile& profile, Rng& rng) {
    if (height % 2 != 0 || width % 2 != 0 || height <= 0 || width <= 0)
        throw ShapeError("camera_forward: extents must be positive and even, got " +
                         std::to_string(height) + "x" + std::to_string(width));
    if (scene.size() != static_cast<size_t>(height) * width * 3)
        throw ShapeError("camera_forward: scene buffer has " +
                         std::to_string(scene.size()) + " values, expected " +
                         std::to_string(static_cast<size_t>(height) * width * 3));
    if (!(gain_r > 0.0f) || !(gain_b > 0.0f))
        throw ConfigError("camera_forward: gains must be positive");
    if (!(iso >= 1.0f))
        throw ConfigError("camera_forward: iso must be at least 1");

    std::vector<float> work = scene;
    if (profile.blur_sigma > 0.0f)
        gaussian_blur(work, height, width, profile.blur_sigma);

    const auto& m = sensor_matrix();
    const double shot = 0.08 * std::sqrt(iso / 100.0);
    const double read = 0.002 * (iso / 100.0);

    BayerFrame frame;
    frame.height = height;
    frame.width = width;
    frame.pattern = CfaPattern::kRggb;
    frame.black_level = static_cast<uint16_t>(kBlackLevel);
    frame.white_level = static_cast<uint16_t>(kWhiteLevel);
    frame.data.resize(static_cast<size_t>(height) * width);

    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const int ch = cfa_channel(y, x);
            const float* px = &work[(static_cast<size_t>(y) * width + x) * 3];
            double v = static_cast<double>(m[ch][0]) * px[0] +
                       static_cast<double>(m[ch][1]) * px[1] +
                       static_cast<double>(m[ch][2]) * px[2];
            v /= ch == 0 ? gain_r : ch == 2 ? gain_b : 1.0;
            if (profile.noise_scale > 0.0f) {
                const double stddev =
                    profile.noise_scale *
                    std::sqrt(shot * shot * std::max(v, 0.0) + read * read);
                v += stddev * rng.normal();
            }
            const long q = std::lround(kBlackLevel + v * (kWhiteLevel - kBlackLevel));
            frame.data[static_cast<size_t>(y) * width + x] =
                static_cast<uint16_t>(std::clamp(q, 0L, 65535L));
        }
    return frame;
}

RgbImage legacy_isp(const BayerFrame& frame, float gain_r, float gain_g,
                    float gain_b, int scene_class) {
    require_scene_class(scene_class);
    if (!(gain_r > 0.0f) || !(gain_g > 0.0f) || !(gain_b > 0.0f))
        throw ConfigError("legacy_isp: gains must be positive");

    RgbImage img = demosaick_bilinear(frame);
    const auto& inv = sensor_matrix_inverse();
    const float sat = scene_class == 0 ? 0.90f : 1.25f;
    const float gains[3] = {gain_r, gain_g, gain_b};

    for (size_t p = 0; p < img.data.size(); p += 3) {
        float wb[3];
        for (int c = 0; c < 3; ++c) wb[c] = img.data[p + static_cast<size_t>(c)] * gains[c];
        float rgb[3];
        for (int c = 0; c < 3; ++c)
            rgb[c] = std::clamp(
                inv[c][0] * wb[0] + inv[c][1] * wb[1] + inv[c][2] * wb[2],
                0.0f, 1.0f);
        apply_saturation(rgb, sat);
        for (int c = 0; c < 3; ++c) {
            const float toned =
                tone_curve(std::clamp(rgb[c], 0.0f, 1.0f), scene_class);
            img.data[p + static_cast<size_t>(c)] = std::clamp(
                static_cast<float>(srgb_encode(toned)), 0.0f, 1.0f);
        }
    }
    img.linear = false;
    return img;
}

float perturb_gain(float gain, Rng& rng) {
    if (!(gain > 0.0f)) throw ConfigError("perturb_gain: gain must be positive");
    const double u =
        std::clamp(-std::log(static_cast<double>(gain)) / std::log(2.5), -1.0, 1.0);
    const double eta = 2.0 * rng.uniform_d() - 1.0;
    return static_cast<float>(gain * (1.0 + 0.018 * u + 0.002 * eta));
}

void generate_dataset(const GenerateConfig& config) {
    if (config.count <= 0)
        throw ConfigError("generate_dataset: count must be positive");
    if (config.out_dir.empty())
        throw ConfigError("generate_dataset: out_dir must be set");
    if (!(config.val_fraction >= 0.0f) || !(config.test_fraction >= 0.0f) ||
        config.val_fraction + config.test_fraction >= 1.0f)
        throw ConfigError(
            "generate_dataset: val/test fractions must be non-negative and "
            "sum below 1");

    namespace fs = std::filesystem;
    const fs::path root(config.out_dir);
    fs::create_directories(root / "raw");
    fs::create_directories(root / "target");
    fs::create_directories(root / "meta");

    const int n_val =
        static_cast<int>(std::floor(static_cast<double>(config.count) *
                                    config.val_fraction));
    const int n_test =
        static_cast<int>(std::floor(static_cast<double>(config.count) *
                                    config.test_fraction));
    const int n_train = config.count - n_val - n_test;

    std::ostringstream manifest;
    for (int i = 0; i < config.count; ++i) {
        Rng rng(mix_seed(config.seed, static_cast<uint64_t>(i)));

        const int scene_class = rng.uniform() < 0.5f ? 0 : 1;
        const float gain_r =
            rng.log_uniform(config.profile.gain_lo, config.profile.gain_hi);
        const float gain_b =
            rng.log_uniform(config.profile.gain_lo, config.profile.gain_hi);
        const float iso =
            100.0f * static_cast<float>(1u << rng.uniform_int(3));
        const float exposure_ms = rng.uniform(5.0f, 30.0f);

        const std::vector<float> scene =
            render_scene(config.profile.frame_height,
                         config.profile.frame_width, scene_class,
                         config.profile.class_mix_p, rng);
        const BayerFrame frame = camera_forward(
            scene, config.profile.frame_height, config.profile.frame_width,
            gain_r, gain_b, iso, config.profile, rng);
        const RgbImage target =
            legacy_isp(frame, gain_r, 1.0f, gain_b, scene_class);

        CaptureMeta meta;
        meta.wb_r = perturb_gain(gain_r, rng);
        meta.wb_g = 1.0f;
        meta.wb_b = perturb_gain(gain_b, rng);
        meta.exposure_ms = exposure_ms;
        meta.gain_iso = iso;
        meta.scene_class = scene_class;
        meta.split = i < n_train          ? "train"
                     : i < n_train + n_val ? "val"
                                           : "test";

        const std::string id = format_id(i);
        const std::string raw_rel = "raw/" + id + ".craw";
        const std::string target_rel = "target/" + id + ".ppm";
        const std::string meta_rel = "meta/" + id + ".meta";
        write_craw((root / raw_rel).string(), frame);
        write_ppm((root / target_rel).string(), target, 65535);
        write_meta((root / meta_rel).string(), meta);

        manifest << id << '\t' << meta.split << '\t' << scene_class << '\t'
                 << raw_rel << '\t' << target_rel << '\t' << meta_rel << '\n';
    }

    std::ofstream mf(root / "manifest.tsv", std::ios::trunc);
    if (!mf) throw IoError("generate_dataset: cannot write manifest.tsv");
    mf << manifest.str();
    if (!mf.flush())
        throw IoError("generate_dataset: manifest.tsv write failed");
}

Manifest load_manifest(const std::string& manifest_path) {
    std::ifstream f(manifest_path);
    if (!f) throw IoError("manifest " + manifest_path + ": cannot open");

    Manifest out;
    out.root = std::filesystem::path(manifest_path).parent_path().string();
    if (out.root.empty()) out.root = ".";

    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        size_t start = 0;
        while (true) {
            const size_t tab = line.find('\t', start);
            fields.push_back(line.substr(
                start, tab == std::string::npos ? std::string::npos
                                                : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        const std::string where =
            "manifest " + manifest_path + " line " + std::to_string(line_no);
        if (fields.size() != 6)
            throw IoError(where + ": expected 6 tab-separated fields, got " +
                          std::to_string(fields.size()));
        DatasetItem item;
        item.id = fields[0];
        item.split = fields[1];
        if (item.id.empty()) throw IoError(where + ": empty id");
        if (item.split != "train" && item.split != "val" &&
            item.split != "test")
            throw IoError(where + ": unknown split '" + item.split + "'");
        if (fields[2] != "0" && fields[2] != "1")
            throw IoError(where + ": scene class must be 0 or 1, got '" +
                          fields[2] + "'");
        item.scene_class = fields[2][0] - '0';
        item.raw_path = fields[3];
        item.target_path = fields[4];
        item.meta_path = fields[5];
        if (item.raw_path.empty() || item.target_path.empty() ||
            item.meta_path.empty())
            throw IoError(where + ": empty file path");
        out.items.push_back(std::move(item));
    }
    return out;
}

}  // namespace crisp
