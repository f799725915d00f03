// SPDX-License-Identifier: Apache-2.0
#include "crisp/raw.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>

namespace crisp {

namespace {

void require_even_extents(const char* what, const BayerFrame& f) {
    if (f.height <= 0 || f.width <= 0 || f.height % 2 || f.width % 2)
        throw ShapeError(std::string(what) + ": mosaic extents " +
                         std::to_string(f.height) + "x" +
                         std::to_string(f.width) + " must be positive and even");
    if (f.data.size() != static_cast<size_t>(f.height) * f.width)
        throw ShapeError(std::string(what) + ": sample count " +
                         std::to_string(f.data.size()) + " does not fill " +
                         std::to_string(f.height) + "x" +
                         std::to_string(f.width));
    if (f.white_level <= f.black_level)
        throw ConfigError(std::string(what) +
                          ": white level must exceed black level");
}

float normalize_sample(uint16_t s, uint16_t black, uint16_t white) {
    const float v = (static_cast<float>(s) - static_cast<float>(black)) /
                    (static_cast<float>(white) - static_cast<float>(black));
    return std::clamp(v, 0.0f, 1.0f);
}

}  // namespace

PackedRaw pack(const BayerFrame& frame) {
    require_even_extents("pack", frame);
    PackedRaw out;
    out.height = frame.height / 2;
    out.width = frame.width / 2;
    out.data.resize(static_cast<size_t>(out.height) * out.width * 4);
    const int w = frame.width;
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            const int sy = 2 * y, sx = 2 * x;
            float* cell = out.data.data() +
                          (static_cast<size_t>(y) * out.width + x) * 4;
            cell[0] = normalize_sample(frame.data[static_cast<size_t>(sy) * w + sx],
                                       frame.black_level, frame.white_level);
            cell[1] = normalize_sample(
                frame.data[static_cast<size_t>(sy) * w + sx + 1],
                frame.black_level, frame.white_level);
            cell[2] = normalize_sample(
                frame.data[static_cast<size_t>(sy + 1) * w + sx + 1],
                frame.black_level, frame.white_level);
            cell[3] = normalize_sample(
                frame.data[static_cast<size_t>(sy + 1) * w + sx],
                frame.black_level, frame.white_level);
        }
    }
    return out;
}

std::vector<float> unpack(const PackedRaw& packed) {
    if (packed.height <= 0 || packed.width <= 0 ||
        packed.data.size() != static_cast<size_t>(packed.height) * packed.width * 4)
        throw ShapeError("unpack: malformed packed raw " +
                         std::to_string(packed.height) + "x" +
                         std::to_string(packed.width));
    const int h = packed.height * 2, w = packed.width * 2;
    std::vector<float> mosaic(static_cast<size_t>(h) * w);
    for (int y = 0; y < packed.height; ++y) {
        for (int x = 0; x < packed.width; ++x) {
            const float* cell = packed.data.data() +
                                (static_cast<size_t>(y) * packed.width + x) * 4;
            mosaic[static_cast<size_t>(2 * y) * w + 2 * x] = cell[0];
            mosaic[static_cast<size_t>(2 * y) * w + 2 * x + 1] = cell[1];
            mosaic[static_cast<size_t>(2 * y + 1) * w + 2 * x + 1] = cell[2];
            mosaic[static_cast<size_t>(2 * y + 1) * w + 2 * x] = cell[3];
        }
    }
    return mosaic;
}

RgbImage demosaick_bilinear(const BayerFrame& frame) {
    require_even_extents("demosaick_bilinear", frame);
    const int h = frame.height, w = frame.width;
    std::vector<float> m(static_cast<size_t>(h) * w);
    for (size_t i = 0; i < m.size(); ++i)
        m[i] = normalize_sample(frame.data[i], frame.black_level,
                                frame.white_level);

    auto at = [&](int y, int x) { return m[static_cast<size_t>(y) * w + x]; };
    auto mean_of = [&](std::initializer_list<std::pair<int, int>> taps) {
        double s = 0.0;
        int n = 0;
        for (auto [y, x] : taps) {
            if (y < 0 || y >= h || x < 0 || x >= w) continue;
            s += at(y, x);
            ++n;
        }
        return n ? static_cast<float>(s / n) : 0.0f;
    };

    RgbImage out(h, w, /*linear=*/true);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const bool even_row = (y % 2 == 0), even_col = (x % 2 == 0);
            float r, g, b;
            if (even_row && even_col) {  // red site
                r = at(y, x);
                g = mean_of({{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}});
                b = mean_of({{y - 1, x - 1}, {y - 1, x + 1},
                             {y + 1, x - 1}, {y + 1, x + 1}});
            } else if (!even_row && !even_col) {  // blue site
                b = at(y, x);
                g = mean_of({{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}});
                r = mean_of({{y - 1, x - 1}, {y - 1, x + 1},
                             {y + 1, x - 1}, {y + 1, x + 1}});
            } else if (even_row) {  // green site on a red row
                g = at(y, x);
                r = mean_of({{y, x - 1}, {y, x + 1}});
                b = mean_of({{y - 1, x}, {y + 1, x}});
            } else {  // green site on a blue row
                g = at(y, x);
                r = mean_of({{y - 1, x}, {y + 1, x}});
                b = mean_of({{y, x - 1}, {y, x + 1}});
            }
            out.at(y, x, 0) = r;
            out.at(y, x, 1) = g;
            out.at(y, x, 2) = b;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tiling
// ---------------------------------------------------------------------------

std::vector<std::vector<float>> tile_image(const float* data, int h, int w,
                                           int c, int patch_h, int patch_w,
                                           TileLayout* layout) {
    if (patch_h <= 0 || patch_w <= 0 || h % patch_h || w % patch_w)
        throw ShapeError("tile: image extents " + std::to_string(h) + "x" +
                         std::to_string(w) +
                         " are not divisible by patch extents " +
                         std::to_string(patch_h) + "x" +
                         std::to_string(patch_w));
    TileLayout lay;
    lay.image_h = h;
    lay.image_w = w;
    lay.channels = c;
    lay.patch_h = patch_h;
    lay.patch_w = patch_w;
    std::vector<std::vector<float>> patches;
    for (int py = 0; py < h; py += patch_h) {
        for (int px = 0; px < w; px += patch_w) {
            std::vector<float> p(static_cast<size_t>(patch_h) * patch_w * c);
            for (int y = 0; y < patch_h; ++y)
                std::memcpy(
                    p.data() + static_cast<size_t>(y) * patch_w * c,
                    data + ((static_cast<size_t>(py + y) * w) + px) * c,
                    sizeof(float) * static_cast<size_t>(patch_w) * c);
            patches.push_back(std::move(p));
            lay.positions.emplace_back(py, px);
        }
    }
    if (layout) *layout = std::move(lay);
    return patches;
}

std::vector<float> untile_image(const std::vector<std::vector<float>>& patches,
                                const TileLayout& layout) {
    if (patches.size() != layout.positions.size())
        throw ShapeError("untile: " + std::to_string(patches.size()) +
                         " patches for a layout of " +
                         std::to_string(layout.positions.size()));
    const size_t patch_sz = static_cast<size_t>(layout.patch_h) *
                            layout.patch_w * layout.channels;
    std::vector<float> img(static_cast<size_t>(layout.image_h) *
                           layout.image_w * layout.channels);
    for (size_t i = 0; i < patches.size(); ++i) {
        if (patches[i].size() != patch_sz)
            throw ShapeError("untile: patch " + std::to_string(i) +
                             " has wrong size");
        const auto [py, px] = layout.positions[i];
        if (py < 0 || px < 0 || py + layout.patch_h > layout.image_h ||
            px + layout.patch_w > layout.image_w)
            throw ShapeError("untile: patch origin out of range");
        for (int y = 0; y < layout.patch_h; ++y)
            std::memcpy(
                img.data() +
                    ((static_cast<size_t>(py + y) * layout.image_w) + px) *
                        layout.channels,
                patches[i].data() +
                    static_cast<size_t>(y) * layout.patch_w * layout.channels,
                sizeof(float) * static_cast<size_t>(layout.patch_w) *
                    layout.channels);
    }
    return img;
}

std::vector<PackedRaw> tile_packed(const PackedRaw& img, int patch_h,
                                   int patch_w, TileLayout* layout) {
    TileLayout lay;
    auto raw = tile_image(img.data.data(), img.height, img.width, 4, patch_h,
                          patch_w, &lay);
    std::vector<PackedRaw> out(raw.size());
    for (size_t i = 0; i < raw.size(); ++i) {
        out[i].height = patch_h;
        out[i].width = patch_w;
        out[i].data = std::move(raw[i]);
    }
    if (layout) *layout = std::move(lay);
    return out;
}

PackedRaw untile_packed(const std::vector<PackedRaw>& patches,
                        const TileLayout& layout) {
    std::vector<std::vector<float>> raw;
    raw.reserve(patches.size());
    for (const auto& p : patches) raw.push_back(p.data);
    PackedRaw out;
    out.height = layout.image_h;
    out.width = layout.image_w;
    out.data = untile_image(raw, layout);
    return out;
}

std::vector<RgbImage> tile_rgb(const RgbImage& img, int patch_h, int patch_w,
                               TileLayout* layout) {
    TileLayout lay;
    auto raw = tile_image(img.data.data(), img.height, img.width, 3, patch_h,
                          patch_w, &lay);
    std::vector<RgbImage> out;
    out.reserve(raw.size());
    for (auto& p : raw)
        out.push_back(RgbImage::from_data(patch_h, patch_w, std::move(p),
                                          img.linear));
    if (layout) *layout = std::move(lay);
    return out;
}

RgbImage untile_rgb(const std::vector<RgbImage>& patches,
                    const TileLayout& layout) {
    std::vector<std::vector<float>> raw;
    raw.reserve(patches.size());
    for (const auto& p : patches) raw.push_back(p.data);
    return RgbImage::from_data(layout.image_h, layout.image_w,
                               untile_image(raw, layout),
                               patches.empty() ? false : patches[0].linear);
}

// ---------------------------------------------------------------------------
// Downsampling
// ---------------------------------------------------------------------------

std::vector<float> area_resample(const float* data, int h, int w, int c,
                                 int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0 || out_h > h || out_w > w)
        throw ShapeError("area_resample: target " + std::to_string(out_h) +
                         "x" + std::to_string(out_w) +
                         " is not a downscale of " + std::to_string(h) + "x" +
                         std::to_string(w));
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;
    std::vector<float> out(static_cast<size_t>(out_h) * out_w * c);
    std::vector<double> acc(static_cast<size_t>(c));
    for (int oy = 0; oy < out_h; ++oy) {
        const double y0 = oy * sy, y1 = (oy + 1) * sy;
        const int iy0 = static_cast<int>(std::floor(y0));
        const int iy1 = std::min(h - 1, static_cast<int>(std::ceil(y1)) - 1);
        for (int ox = 0; ox < out_w; ++ox) {
            const double x0 = ox * sx, x1 = (ox + 1) * sx;
            const int ix0 = static_cast<int>(std::floor(x0));
            const int ix1 =
                std::min(w - 1, static_cast<int>(std::ceil(x1)) - 1);
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int iy = iy0; iy <= iy1; ++iy) {
                const double wy =
                    std::min(y1, static_cast<double>(iy + 1)) -
                    std::max(y0, static_cast<double>(iy));
                if (wy <= 0.0) continue;
                for (int ix = ix0; ix <= ix1; ++ix) {
                    const double wx =
                        std::min(x1, static_cast<double>(ix + 1)) -
                        std::max(x0, static_cast<double>(ix));
                    if (wx <= 0.0) continue;
                    const float* px =
                        data + (static_cast<size_t>(iy) * w + ix) * c;
                    for (int ch = 0; ch < c; ++ch)
                        acc[static_cast<size_t>(ch)] += wy * wx * px[ch];
                }
            }
            float* po = out.data() + (static_cast<size_t>(oy) * out_w + ox) * c;
            for (int ch = 0; ch < c; ++ch)
                po[ch] = static_cast<float>(acc[static_cast<size_t>(ch)] /
                                            (sy * sx));
        }
    }
    return out;
}

GlobalInput make_global_input(const PackedRaw& packed, int out_h, int out_w) {
    if (out_h > packed.height || out_w > packed.width)
        throw ShapeError("make_global_input: target " + std::to_string(out_h) +
                         "x" + std::to_string(out_w) +
                         " exceeds packed extents " +
                         std::to_string(packed.height) + "x" +
                         std::to_string(packed.width));
    // fuse the two green planes, keep (R, G, B)
    std::vector<float> rgb(static_cast<size_t>(packed.height) * packed.width *
                           3);
    for (int64_t p = 0;
         p < static_cast<int64_t>(packed.height) * packed.width; ++p) {
        const float* cell = packed.data.data() + p * 4;
        rgb[static_cast<size_t>(p) * 3] = cell[0];
        rgb[static_cast<size_t>(p) * 3 + 1] = 0.5f * (cell[1] + cell[3]);
        rgb[static_cast<size_t>(p) * 3 + 2] = cell[2];
    }
    GlobalInput g;
    g.height = out_h;
    g.width = out_w;
    g.data = area_resample(rgb.data(), packed.height, packed.width, 3, out_h,
                           out_w);
    return g;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

namespace {

constexpr char kCrawMagic[4] = {'C', 'R', 'A', 'W'};

void write_u16(std::ofstream& f, uint16_t v) {
    f.write(reinterpret_cast<const char*>(&v), 2);
}

uint16_t read_u16(std::ifstream& f, const std::string& path) {
    uint16_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 2);
    if (f.gcount() != 2) throw IoError("craw " + path + ": truncated file");
    return v;
}

}  // namespace

void write_craw(const std::string& path, const BayerFrame& frame) {
    require_even_extents("write_craw", frame);
    if (frame.width > 65535 || frame.height > 65535)
        throw IoError("craw " + path + ": extents exceed the u16 header");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("craw " + path + ": cannot open for writing");
    f.write(kCrawMagic, 4);
    write_u16(f, static_cast<uint16_t>(frame.width));
    write_u16(f, static_cast<uint16_t>(frame.height));
    const uint8_t pat = static_cast<uint8_t>(frame.pattern);
    f.write(reinterpret_cast<const char*>(&pat), 1);
    write_u16(f, frame.black_level);
    write_u16(f, frame.white_level);
    f.write(reinterpret_cast<const char*>(frame.data.data()),
            static_cast<std::streamsize>(frame.data.size() * 2));
    if (!f) throw IoError("craw " + path + ": write failed");
}

BayerFrame read_craw(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("craw " + path + ": cannot open");
    char magic[4];
    f.read(magic, 4);
    if (f.gcount() != 4 || std::memcmp(magic, kCrawMagic, 4) != 0)
        throw IoError("craw " + path + ": bad magic");
    BayerFrame frame;
    frame.width = read_u16(f, path);
    frame.height = read_u16(f, path);
    uint8_t pat = 0;
    f.read(reinterpret_cast<char*>(&pat), 1);
    if (f.gcount() != 1) throw IoError("craw " + path + ": truncated file");
    if (pat != static_cast<uint8_t>(CfaPattern::kRggb))
        throw IoError("craw " + path + ": unknown CFA pattern " +
                      std::to_string(pat));
    frame.pattern = CfaPattern::kRggb;
    frame.black_level = read_u16(f, path);
    frame.white_level = read_u16(f, path);
    if (frame.width <= 0 || frame.height <= 0 || frame.width % 2 ||
        frame.height % 2)
        throw IoError("craw " + path + ": invalid extents " +
                      std::to_string(frame.height) + "x" +
                      std::to_string(frame.width));
    frame.data.resize(static_cast<size_t>(frame.width) * frame.height);
    f.read(reinterpret_cast<char*>(frame.data.data()),
           static_cast<std::streamsize>(frame.data.size() * 2));
    if (static_cast<size_t>(f.gcount()) != frame.data.size() * 2)
        throw IoError("craw " + path + ": truncated sample data");
    return frame;
}

void write_ppm(const std::string& path, const RgbImage& img, int max_val) {
    if (max_val != 255 && max_val != 65535)
        throw ConfigError("ppm: max_val must be 255 or 65535, got " +
                          std::to_string(max_val));
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("ppm " + path + ": cannot open for writing");
    f << "P6\n" << img.width << ' ' << img.height << '\n' << max_val << '\n';
    const size_t bytes_per_sample = max_val > 255 ? 2 : 1;
    std::vector<uint8_t> row(static_cast<size_t>(img.width) * 3 *
                             bytes_per_sample);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width * 3; ++x) {
            const float v = std::clamp(
                img.data[(static_cast<size_t>(y) * img.width * 3) + x], 0.0f,
                1.0f);
            const long q = std::lround(v * static_cast<float>(max_val));
            if (bytes_per_sample == 2) {
                // network byte order, most significant byte first
                row[static_cast<size_t>(x) * 2] =
                    static_cast<uint8_t>((q >> 8) & 0xff);
                row[static_cast<size_t>(x) * 2 + 1] =
                    static_cast<uint8_t>(q & 0xff);
            } else {
                row[static_cast<size_t>(x)] = static_cast<uint8_t>(q);
            }
        }
        f.write(reinterpret_cast<const char*>(row.data()),
                static_cast<std::streamsize>(row.size()));
    }
    if (!f) throw IoError("ppm " + path + ": write failed");
}

RgbImage read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("ppm " + path + ": cannot open");
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (magic != "P6" || w <= 0 || h <= 0)
        throw IoError("ppm " + path + ": not a binary PPM");
    if (maxval != 255 && maxval != 65535)
        throw IoError("ppm " + path + ": unsupported maxval " +
                      std::to_string(maxval));
    f.get();  // single whitespace after the header
    const size_t bytes_per_sample = maxval > 255 ? 2 : 1;
    const size_t count = static_cast<size_t>(w) * h * 3;
    std::vector<uint8_t> bytes(count * bytes_per_sample);
    f.read(reinterpret_cast<char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
    if (static_cast<size_t>(f.gcount()) != bytes.size())
        throw IoError("ppm " + path + ": truncated pixel data");
    std::vector<float> data(count);
    const float scale = 1.0f / static_cast<float>(maxval);
    for (size_t i = 0; i < count; ++i) {
        const unsigned raw =
            bytes_per_sample == 2
                ? (static_cast<unsigned>(bytes[i * 2]) << 8) | bytes[i * 2 + 1]
                : bytes[i];
        data[i] = static_cast<float>(raw) * scale;
    }
    return RgbImage::from_data(h, w, std::move(data));
}

void write_meta(const std::string& path, const CaptureMeta& meta) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("meta " + path + ": cannot open for writing");
    char buf[64];
    auto put = [&](const char* key, float v) {
        std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
        f << key << '=' << buf << '\n';
    };
    put("wb_r", meta.wb_r);
    put("wb_g", meta.wb_g);
    put("wb_b", meta.wb_b);
    put("exposure_ms", meta.exposure_ms);
    put("gain_iso", meta.gain_iso);
    f << "scene_class=" << meta.scene_class << '\n';
    f << "split=" << meta.split << '\n';
    if (!f) throw IoError("meta " + path + ": write failed");
}

CaptureMeta read_meta(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("meta " + path + ": cannot open");
    CaptureMeta meta;
    std::map<std::string, bool> seen;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw IoError("meta " + path + ": malformed line '" + line + "'");
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        try {
            if (key == "wb_r") meta.wb_r = std::stof(val);
            else if (key == "wb_g") meta.wb_g = std::stof(val);
            else if (key == "wb_b") meta.wb_b = std::stof(val);
            else if (key == "exposure_ms") meta.exposure_ms = std::stof(val);
            else if (key == "gain_iso") meta.gain_iso = std::stof(val);
            else if (key == "scene_class") meta.scene_class = std::stoi(val);
            else if (key == "split") meta.split = val;
            else
                throw IoError("meta " + path + ": unknown key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw IoError("meta " + path + ": invalid value for '" + key + "'");
        }
        seen[key] = true;
    }
    for (const char* key : {"wb_r", "wb_g", "wb_b", "exposure_ms", "gain_iso",
                            "scene_class", "split"})
        if (!seen[key])
            throw IoError("meta " + path + ": missing key '" +
                          std::string(key) + "'");
    return meta;
}

}  // namespace crisp
