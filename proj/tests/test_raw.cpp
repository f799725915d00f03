// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "crisp/raw.hpp"
#include "crisp/rng.hpp"

using namespace crisp;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

// 4x4 RGGB mosaic with black=0 / white=100, so normalized values are v/100.
BayerFrame golden_frame() {
    BayerFrame f;
    f.height = 4;
    f.width = 4;
    f.black_level = 0;
    f.white_level = 100;
    f.data = {10, 20, 30, 40,  50, 60, 70, 80,
              90, 25, 35, 45,  55, 65, 75, 85};
    return f;
}

}  // namespace

TEST_CASE("pack places channels and normalizes against black/white levels") {
    BayerFrame f;
    f.height = 2;
    f.width = 2;
    f.black_level = 1000;
    f.white_level = 3000;
    //  R=2000  G1=1500
    //  G2=1000 B=3500 (above white -> clamps to 1)
    f.data = {2000, 1500, 1000, 3500};
    PackedRaw p = pack(f);
    CHECK(p.height == 1);
    CHECK(p.width == 1);
    CHECK(p.at(0, 0, 0) == doctest::Approx(0.5f));   // R
    CHECK(p.at(0, 0, 1) == doctest::Approx(0.25f));  // G1
    CHECK(p.at(0, 0, 2) == doctest::Approx(1.0f));   // B clamped
    CHECK(p.at(0, 0, 3) == doctest::Approx(0.0f));   // G2
}

TEST_CASE("pack/unpack round trip and extent validation") {
    Rng rng(3);
    BayerFrame f;
    f.height = 6;
    f.width = 8;
    f.black_level = 1024;
    f.white_level = 64512;
    f.data.resize(48);
    for (auto& s : f.data)
        s = static_cast<uint16_t>(1024 + rng.uniform_int(64512 - 1024));
    std::vector<float> mosaic = unpack(pack(f));
    REQUIRE(mosaic.size() == f.data.size());
    for (size_t i = 0; i < mosaic.size(); ++i) {
        const float expect =
            (static_cast<float>(f.data[i]) - 1024.0f) / (64512.0f - 1024.0f);
        CHECK(mosaic[i] == doctest::Approx(expect).epsilon(1e-7));
    }

    BayerFrame odd = f;
    odd.height = 5;
    odd.data.resize(40);
    CHECK_THROWS_AS(pack(odd), ShapeError);
}

// Every value of this table was worked out by hand from the neighbor rules
// (cross mean for green, diagonal / paired means for red and blue, in-bounds
// subsets at the borders).
TEST_CASE("bilinear demosaick matches the hand-worked 4x4 table") {
    const float expect[4][4][3] = {
        {{10, 35, 60}, {20, 20, 60}, {30, 43.333333f, 70}, {30, 40, 80}},
        {{50, 50, 60}, {41.25, 41.25, 60}, {32.5, 70, 70}, {32.5, 51.666667f, 80}},
        {{90, 43.333333f, 62.5}, {62.5, 25, 62.5}, {35, 53.75, 72.5}, {35, 45, 82.5}},
        {{90, 55, 65}, {62.5, 51.666667f, 65}, {35, 75, 75}, {35, 60, 85}},
    };
    RgbImage out = demosaick_bilinear(golden_frame());
    REQUIRE(out.height == 4);
    REQUIRE(out.width == 4);
    CHECK(out.linear);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            for (int c = 0; c < 3; ++c) {
                INFO("y=" << y << " x=" << x << " c=" << c);
                CHECK(out.at(y, x, c) ==
                      doctest::Approx(expect[y][x][c] / 100.0f).epsilon(1e-5));
            }
}

TEST_CASE("demosaick keeps a flat field flat") {
    BayerFrame f;
    f.height = 8;
    f.width = 8;
    f.black_level = 0;
    f.white_level = 1000;
    f.data.assign(64, 400);
    RgbImage out = demosaick_bilinear(f);
    for (const float v : out.data) CHECK(v == doctest::Approx(0.4f).epsilon(1e-6));
}

TEST_CASE("tile/untile round trip is exact, including permuted layouts") {
    Rng rng(11);
    PackedRaw img;
    img.height = 8;
    img.width = 12;
    img.data.resize(static_cast<size_t>(8) * 12 * 4);
    for (auto& v : img.data) v = rng.uniform();

    TileLayout layout;
    auto patches = tile_packed(img, 4, 4, &layout);
    CHECK(patches.size() == 6);
    CHECK(layout.positions.size() == 6);
    CHECK(layout.positions[0] == std::pair<int, int>{0, 0});
    CHECK(layout.positions[1] == std::pair<int, int>{0, 4});
    CHECK(layout.positions[3] == std::pair<int, int>{4, 0});

    PackedRaw back = untile_packed(patches, layout);
    CHECK(back.data == img.data);

    // permute patches together with their recorded positions
    std::vector<size_t> perm = {4, 2, 0, 5, 1, 3};
    std::vector<PackedRaw> shuffled;
    TileLayout shuffled_layout = layout;
    shuffled_layout.positions.clear();
    for (size_t i : perm) {
        shuffled.push_back(patches[i]);
        shuffled_layout.positions.push_back(layout.positions[i]);
    }
    PackedRaw back2 = untile_packed(shuffled, shuffled_layout);
    CHECK(back2.data == img.data);
}

TEST_CASE("tile rejects non-divisible extents, naming both") {
    RgbImage img(10, 12);
    try {
        tile_rgb(img, 4, 4);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("10x12") != std::string::npos);
        CHECK(msg.find("4x4") != std::string::npos);
    }
}

TEST_CASE("area resample: identity, integer folding, fractional weights") {
    Rng rng(4);
    const int h = 6, w = 8, c = 3;
    std::vector<float> img(static_cast<size_t>(h) * w * c);
    for (auto& v : img) v = rng.uniform();

    // identity
    CHECK(area_resample(img.data(), h, w, c, h, w) == img);

    // 2x nearest-upsample then area downsample recovers the original
    std::vector<float> up(static_cast<size_t>(2 * h) * 2 * w * c);
    for (int y = 0; y < 2 * h; ++y)
        for (int x = 0; x < 2 * w; ++x)
            for (int ch = 0; ch < c; ++ch)
                up[(static_cast<size_t>(y) * 2 * w + x) * c + ch] =
                    img[(static_cast<size_t>(y / 2) * w + x / 2) * c + ch];
    auto down = area_resample(up.data(), 2 * h, 2 * w, c, h, w);
    REQUIRE(down.size() == img.size());
    for (size_t i = 0; i < img.size(); ++i)
        CHECK(down[i] == doctest::Approx(img[i]).epsilon(1e-6));

    // fractional 3 -> 2 rows: out0 = (r0 + 0.5 r1) / 1.5
    std::vector<float> col = {0.0f, 0.6f, 0.9f};
    auto two = area_resample(col.data(), 3, 1, 1, 2, 1);
    CHECK(two[0] == doctest::Approx((0.0 + 0.5 * 0.6) / 1.5));
    CHECK(two[1] == doctest::Approx((0.5 * 0.6 + 0.9) / 1.5));

    // upscale refused
    CHECK_THROWS_AS(area_resample(img.data(), h, w, c, h + 1, w), ShapeError);
}

TEST_CASE("make_global_input produces exactly the configured extents") {
    Rng rng(9);
    PackedRaw packed;
    packed.height = 64;
    packed.width = 64;
    packed.data.resize(static_cast<size_t>(64) * 64 * 4);
    for (auto& v : packed.data) v = rng.uniform();

    GlobalInput g = make_global_input(packed, 48, 64);
    CHECK(g.height == 48);
    CHECK(g.width == 64);
    CHECK(g.data.size() == static_cast<size_t>(48) * 64 * 3);

    // greens fused before resampling: constant planes survive exactly
    for (auto& v : packed.data) v = 0.0f;
    for (int64_t p = 0; p < 64 * 64; ++p) {
        packed.data[static_cast<size_t>(p) * 4 + 1] = 0.2f;
        packed.data[static_cast<size_t>(p) * 4 + 3] = 0.6f;
    }
    g = make_global_input(packed, 48, 64);
    for (int64_t p = 0; p < 48 * 64; ++p)
        CHECK(g.data[static_cast<size_t>(p) * 3 + 1] ==
              doctest::Approx(0.4f).epsilon(1e-6));

    PackedRaw small;
    small.height = 32;
    small.width = 32;
    small.data.resize(static_cast<size_t>(32) * 32 * 4);
    CHECK_THROWS_AS(make_global_input(small, 48, 64), ShapeError);
}

TEST_CASE("craw round trip preserves every field and sample") {
    Rng rng(21);
    BayerFrame f;
    f.height = 6;
    f.width = 4;
    f.black_level = 1024;
    f.white_level = 64512;
    f.data.resize(24);
    for (auto& s : f.data) s = static_cast<uint16_t>(rng.uniform_int(65536));

    const std::string path = temp_path("crisp_test.craw");
    write_craw(path, f);
    BayerFrame back = read_craw(path);
    CHECK(back.height == f.height);
    CHECK(back.width == f.width);
    CHECK(back.pattern == f.pattern);
    CHECK(back.black_level == f.black_level);
    CHECK(back.white_level == f.white_level);
    CHECK(back.data == f.data);

    // deterministic bytes
    const std::string path2 = temp_path("crisp_test2.craw");
    write_craw(path2, f);
    std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
    std::vector<char> ba(std::istreambuf_iterator<char>(a), {});
    std::vector<char> bb(std::istreambuf_iterator<char>(b), {});
    CHECK(ba == bb);

    // corruption: truncate and break magic
    {
        std::ofstream t(path2, std::ios::binary | std::ios::trunc);
        t.write(ba.data(), 8);
    }
    CHECK_THROWS_AS(read_craw(path2), IoError);
    ba[0] = 'X';
    {
        std::ofstream t(path2, std::ios::binary | std::ios::trunc);
        t.write(ba.data(), static_cast<std::streamsize>(ba.size()));
    }
    CHECK_THROWS_AS(read_craw(path2), IoError);
    CHECK_THROWS_AS(read_craw(temp_path("missing.craw")), IoError);
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("ppm round trip is exact to the sample quantization") {
    Rng rng(33);
    RgbImage img(5, 7);
    for (auto& v : img.data) v = rng.uniform();
    const std::string path = temp_path("crisp_test.ppm");

    write_ppm(path, img);
    RgbImage back = read_ppm(path);
    REQUIRE(back.height == img.height);
    REQUIRE(back.width == img.width);
    for (size_t i = 0; i < img.data.size(); ++i)
        CHECK(std::abs(back.data[i] - img.data[i]) <= 0.5f / 255.0f + 1e-6f);

    write_ppm(path, img, 65535);
    back = read_ppm(path);
    REQUIRE(back.height == img.height);
    for (size_t i = 0; i < img.data.size(); ++i)
        CHECK(std::abs(back.data[i] - img.data[i]) <= 0.5f / 65535.0f + 1e-7f);

    CHECK_THROWS_AS(write_ppm(path, img, 1023), ConfigError);
    std::filesystem::remove(path);
}

TEST_CASE("meta sidecar round trip and validation") {
    CaptureMeta m;
    m.wb_r = 1.8234567f;
    m.wb_g = 1.0f;
    m.wb_b = 0.4321f;
    m.exposure_ms = 16.6f;
    m.gain_iso = 400.0f;
    m.scene_class = 1;
    m.split = "train";
    const std::string path = temp_path("crisp_test.meta");
    write_meta(path, m);
    CaptureMeta back = read_meta(path);
    CHECK(back.wb_r == m.wb_r);  // %.9g round-trips float exactly
    CHECK(back.wb_g == m.wb_g);
    CHECK(back.wb_b == m.wb_b);
    CHECK(back.exposure_ms == m.exposure_ms);
    CHECK(back.gain_iso == m.gain_iso);
    CHECK(back.scene_class == m.scene_class);
    CHECK(back.split == m.split);

    // missing key
    {
        std::ofstream f(path, std::ios::trunc);
        f << "wb_r=1.0\nwb_g=1.0\n";
    }
    CHECK_THROWS_AS(read_meta(path), IoError);
    std::filesystem::remove(path);
}
