#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "chemmap/diffnet.hpp"
#include "chemmap/hsidata.hpp"
#include "test_util.hpp"

using namespace chemmap;
using testutil::TempDir;

namespace {

HsiCube random_cube(int b, int h, int w, std::uint64_t seed) {
    HsiCube c(b, h, w);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (double& v : c.values) v = u(rng);
    for (int i = 0; i < b; ++i) c.wavelengths[i] = 900.0 + 5.0 * i;
    return c;
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string f32_bytes(float v) {
    std::string s(4, '\0');
    const auto u = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) s[i] = static_cast<char>((u >> (8 * i)) & 0xff);
    return s;
}

Mask full_mask(int h, int w) { return Mask(h, w, 1); }

}  // namespace

TEST_CASE("cube roundtrip is bit exact") {
    TempDir dir("cube");
    const HsiCube c = random_cube(4, 6, 5, 1);
    write_cube(c, dir.path / "a.hsc");
    const HsiCube r = read_cube(dir.path / "a.hsc");
    CHECK(r.bands == 4);
    CHECK(r.height == 6);
    CHECK(r.width == 5);
    CHECK(r.space == Space::reflectance);
    CHECK(r.values == c.values);
    CHECK(r.wavelengths == c.wavelengths);
}

TEST_CASE("cube payload shorter than header is rejected") {
    TempDir dir("cube_short");
    std::string bytes = "HSC1 10 1 1 reflectance\n";
    for (int i = 0; i < 9; ++i) bytes += f32_bytes(0.5f);
    for (int i = 0; i < 10; ++i) bytes += f32_bytes(900.0f + i);
    write_bytes(dir.path / "bad.hsc", bytes);
    CHECK_THROWS_AS(read_cube(dir.path / "bad.hsc"), FormatError);
}

TEST_CASE("golden cube bytes") {
    TempDir dir("golden");
    const std::string bytes = "HSC1 2 1 1 reflectance\n" + f32_bytes(1.0f) + f32_bytes(0.5f) + f32_bytes(1000.0f) +
                              f32_bytes(1010.0f);
    write_bytes(dir.path / "g.hsc", bytes);
    const HsiCube c = read_cube(dir.path / "g.hsc");
    REQUIRE(c.values.size() == 2);
    CHECK(c.values[0] == 1.0);
    CHECK(c.values[1] == 0.5);
    CHECK(c.wavelengths == std::vector<double>{1000.0, 1010.0});
}

TEST_CASE("unknown cube version") {
    TempDir dir("version");
    write_bytes(dir.path / "v.hsc", "HSC9 1 1 1 reflectance\n" + f32_bytes(1.0f) + f32_bytes(1000.0f));
    CHECK_THROWS_AS(read_cube(dir.path / "v.hsc"), FormatError);
}

TEST_CASE("non-finite cube values are rejected") {
    TempDir dir("nan");
    write_bytes(dir.path / "n.hsc",
                "HSC1 1 1 1 absorbance\n" + f32_bytes(std::numeric_limits<float>::quiet_NaN()) + f32_bytes(1000.0f));
    CHECK_THROWS(read_cube(dir.path / "n.hsc"));
}

TEST_CASE("mask and map roundtrip") {
    TempDir dir("mask");
    Mask m(3, 4);
    m.at(1, 2) = 1;
    m.at(2, 0) = 1;
    write_mask(m, dir.path / "m.msk");
    const Mask r = read_mask(dir.path / "m.msk");
    CHECK(r.values == m.values);

    ChemicalMap map(3, 4);
    for (std::size_t i = 0; i < map.values.size(); ++i) map.values[i] = static_cast<float>(0.37 * i);
    write_map(map, dir.path / "m.chm");
    CHECK(read_map(dir.path / "m.chm").values == map.values);
}

TEST_CASE("manifest resolves paths relative to its directory") {
    TempDir dir("manifest");
    std::filesystem::create_directories(dir.path / "sub");
    SampleRecord r{"b1", "s1", "c.hsc", "m.msk", 42.5, "fat"};
    write_manifest({r}, dir.path / "sub" / "manifest.csv");
    const auto recs = read_manifest(dir.path / "sub" / "manifest.csv");
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].cube_path == dir.path / "sub" / "c.hsc");
    CHECK(recs[0].reference == 42.5);
    CHECK(recs[0].group == "fat");
}

TEST_CASE("manifest reference outside [0, 100] is rejected") {
    TempDir dir("manifest_bad");
    write_bytes(dir.path / "m.csv", "belly_id,slice_id,cube_path,mask_path,reference,group\nb,s,c,m,101,\n");
    CHECK_THROWS_AS(read_manifest(dir.path / "m.csv"), FormatError);
}

TEST_CASE("to_absorbance") {
    HsiCube c(1, 1, 3);
    c.values = {1.0, 0.1, 0.0};
    c.wavelengths = {1000.0};
    const HsiCube a = to_absorbance(c, 1e-6);
    CHECK(a.space == Space::absorbance);
    CHECK(a.values[0] == doctest::Approx(0.0));
    CHECK(a.values[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(a.values[2] == doctest::Approx(6.0).epsilon(1e-12));
    CHECK_THROWS(to_absorbance(a));
}

TEST_CASE("select_bands") {
    const HsiCube c = random_cube(300, 2, 2, 3);
    const HsiCube s = select_bands(c, 176);
    CHECK(s.bands == 124);
    CHECK(s.wavelengths.front() == c.wavelengths[176]);
    CHECK(s.at(0, 1, 1) == c.at(176, 1, 1));
    CHECK(select_bands(c, 0).values == c.values);
    CHECK_THROWS(select_bands(c, 300));
}

TEST_CASE("bin_bands") {
    CHECK(bin_bands(random_cube(124, 1, 1, 4)).bands == 62);

    HsiCube c(4, 1, 2);
    c.wavelengths = {1.0, 2.0, 3.0, 4.0};
    for (int px = 0; px < 2; ++px)
        for (int b = 0; b < 4; ++b) c.at(b, 0, px) = 2.0 * b;
    const HsiCube r = bin_bands(c, 2);
    CHECK(r.values == std::vector<double>{1.0, 1.0, 5.0, 5.0});
    CHECK(r.wavelengths == std::vector<double>{1.5, 3.5});

    HsiCube k(6, 2, 2);
    std::fill(k.values.begin(), k.values.end(), 0.25);
    for (int b = 0; b < 6; ++b) k.wavelengths[b] = b;
    for (double v : bin_bands(k, 3).values) CHECK(v == 0.25);
    CHECK_THROWS(bin_bands(k, 4));
}

TEST_CASE("erode_mask") {
    const Mask e = erode_mask(full_mask(5, 5));
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 5; ++c) CHECK(e.at(r, c) == ((r >= 1 && r <= 3 && c >= 1 && c <= 3) ? 1 : 0));

    Mask single(5, 5);
    single.at(2, 2) = 1;
    CHECK(erode_mask(single).count() == 0);
    CHECK(erode_mask(Mask(4, 4)).count() == 0);
}

TEST_CASE("dilate_mask") {
    Mask single(5, 5);
    single.at(2, 2) = 1;
    const Mask d = dilate_mask(single);
    CHECK(d.count() == 5);
    CHECK(d.at(1, 2) == 1);
    CHECK(d.at(2, 3) == 1);
    CHECK(d.at(1, 1) == 0);

    Mask corner(3, 3);
    corner.at(0, 0) = 1;
    CHECK(dilate_mask(corner).count() == 3);
}

TEST_CASE("dilating an eroded mask stays inside the original") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        Mask m(12, 9);
        for (auto& v : m.values) v = (rng() % 5) != 0;
        const Mask o = dilate_mask(erode_mask(m));
        for (std::size_t i = 0; i < m.values.size(); ++i)
            if (o.values[i]) CHECK(m.values[i]);
    }
}

TEST_CASE("eroded mask is a subset whose pixels have all neighbours in the original") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Mask m(12, 9);
        for (auto& v : m.values) v = (rng() % 4) != 0;
        const Mask e = erode_mask(m);
        for (int r = 0; r < m.height; ++r)
            for (int c = 0; c < m.width; ++c) {
                if (!e.at(r, c)) continue;
                CHECK(m.at(r, c));
                REQUIRE(r > 0);
                REQUIRE(c > 0);
                REQUIRE(r + 1 < m.height);
                REQUIRE(c + 1 < m.width);
                CHECK((m.at(r - 1, c) && m.at(r + 1, c) && m.at(r, c - 1) && m.at(r, c + 1)));
            }
    }
}

TEST_CASE("compute_geometry") {
    const Geometry p = compute_geometry(4, 996, 452, 7);
    CHECK(p.unet_h == 1180);
    CHECK(p.unet_w == 636);
    CHECK(p.stage1_h == 1992);
    CHECK(p.stage1_w == 904);
    CHECK(p.padded_h == 2360);
    CHECK(p.padded_w == 1272);

    const Geometry t = compute_geometry(2, 12, 12, 7);
    CHECK(t.context == 40);
    CHECK(t.unet_h == 52);
    CHECK(t.stage1_h == 24);
    CHECK(t.padded_h == 104);

    CHECK_THROWS(compute_geometry(2, 13, 13, 7));
    CHECK_THROWS(compute_geometry(2, 0, 12, 7));
}

TEST_CASE("geometry table matches a layer-by-layer forward pass") {
    // First three valid output sizes for each L, run through a zero network.
    for (int L = 0; L <= 4; ++L) {
        int tried = 0;
        for (int out = 1; out <= 40 && tried < 3; ++out) {
            Geometry g;
            try {
                g = compute_geometry(L, out, out, 3);
            } catch (const Error&) {
                continue;
            }
            ++tried;
            const NetConfig cfg = make_net_config(L, 1, g.out_h, g.out_w, 4, 3, 1);
            const UNet net(cfg);
            ForwardTrace trace;
            const Tensor y = net.forward(make_params(cfg), Tensor({4, g.padded_h, g.padded_w}), &trace);
            const auto expected = expected_layer_sizes(g);
            REQUIRE(trace.sizes.size() == expected.size());
            for (std::size_t i = 0; i < expected.size(); ++i) {
                CHECK(trace.sizes[i].name == expected[i].name);
                CHECK(trace.sizes[i].height == expected[i].height);
                CHECK(trace.sizes[i].width == expected[i].width);
            }
            CHECK(y.dim(1) == g.out_h);
            CHECK(y.dim(2) == g.out_w);
        }
        CHECK(tried > 0);
    }
}

TEST_CASE("pad_two_stage frame and mirror") {
    const Geometry g = compute_geometry(2, 12, 12, 7);
    HsiCube c = random_cube(3, 20, 20, 5);
    Mask m = full_mask(20, 20);
    const PaddedSample p = pad_two_stage(c, m, g);
    CHECK(p.cube.height == 104);
    CHECK(p.cube.width == 104);
    CHECK(p.stage1_mask.height == 24);
    const int top = 40;  // mirror margin
    // Original pixels sit unchanged at the centre.
    for (int b = 0; b < 3; ++b)
        for (int r = 0; r < 20; ++r)
            for (int col = 0; col < 20; ++col) CHECK(p.cube.at(b, top + 2 + r, top + 2 + col) == c.at(b, r, col));
    // Background frame carries the mean of the outer columns.
    double bg = 0.0;
    for (int r = 0; r < 20; ++r) bg += c.at(1, r, 0) + c.at(1, r, 19);
    bg /= 40.0;
    CHECK(p.cube.at(1, top, top) == doctest::Approx(bg).epsilon(1e-12));
    CHECK(p.cube.at(1, top + 1, top + 10) == doctest::Approx(bg).epsilon(1e-12));
    CHECK(p.stage1_mask.at(0, 0) == 0);
    CHECK(p.stage1_mask.at(1, 5) == 0);
    CHECK(p.stage1_mask.at(2, 2) == 1);
    CHECK(p.stage1_mask.count() == 400);
    // Mirror symmetry about the stage-1 edge.
    for (int k = 0; k < top; ++k)
        for (int col = 0; col < 104; col += 7) {
            CHECK(p.cube.at(0, top - 1 - k, col) == p.cube.at(0, top + k, col));
            CHECK(p.cube.at(0, col, top - 1 - k) == p.cube.at(0, col, top + k));
        }
}

TEST_CASE("pad_two_stage with a cube already at stage-1 size") {
    const Geometry g = compute_geometry(2, 12, 12, 7);
    HsiCube c = random_cube(2, 24, 24, 6);
    const PaddedSample p = pad_two_stage(c, full_mask(24, 24), g);
    for (int r = 0; r < 24; ++r)
        for (int col = 0; col < 24; ++col) CHECK(p.cube.at(1, 40 + r, 40 + col) == c.at(1, r, col));
    CHECK(p.stage1_mask.count() == 576);
}

TEST_CASE("pad_two_stage crops oversized cubes centrally") {
    const Geometry g = compute_geometry(2, 12, 12, 7);
    HsiCube c = random_cube(2, 30, 27, 7);
    const PaddedSample p = pad_two_stage(c, full_mask(30, 27), g);
    CHECK(p.cube.at(0, 40, 40) == c.at(0, 3, 1));
    CHECK_THROWS(pad_two_stage(c, full_mask(30, 27), g, false));
    CHECK_THROWS(pad_two_stage(c, full_mask(29, 27), g));
}

TEST_CASE("pad_two_stage output size for many inputs") {
    const Geometry g = compute_geometry(2, 12, 16, 7);
    for (int h = 5; h < 40; h += 7)
        for (int w = 3; w < 41; w += 9) {
            const PaddedSample p = pad_two_stage(random_cube(1, h, w, h * 100 + w), full_mask(h, w), g);
            CHECK(p.cube.height == g.padded_h);
            CHECK(p.cube.width == g.padded_w);
            CHECK(p.stage1_mask.height == g.stage1_h);
            CHECK(p.stage1_mask.width == g.stage1_w);
        }
}

TEST_CASE("prepare_unet_mask") {
    const Geometry g = compute_geometry(2, 12, 12, 7);
    Mask s(24, 24);
    // Block (2, 2): three ones -> kept; block (2, 5): one one -> dropped.
    s.at(4, 4) = s.at(4, 5) = s.at(5, 4) = 1;
    s.at(4, 10) = 1;
    // Without erosion the first block survives; verify through a 3x3 plateau
    // of full blocks around it.
    for (int r = 2; r < 8; ++r)
        for (int c = 2; c < 8; ++c)
            if (!(r == 5 && c == 5)) s.at(r, c) = 1;
    const Mask m = prepare_unet_mask(s, g);
    CHECK(m.at(2, 2) == 1);
    CHECK(m.at(2, 5) == 0);

    const Mask full = prepare_unet_mask(full_mask(24, 24), g);
    for (int r = 0; r < 12; ++r)
        for (int c = 0; c < 12; ++c) CHECK(full.at(r, c) == ((r > 0 && r < 11 && c > 0 && c < 11) ? 1 : 0));
    CHECK_THROWS(prepare_unet_mask(full_mask(23, 24), g));
}

TEST_CASE("flips") {
    HsiCube c = random_cube(2, 3, 4, 8);
    Mask m(3, 4);
    m.at(0, 1) = 1;
    const HsiCube c0 = c;
    const Mask m0 = m;
    apply_flips(c, m, {true, true});
    CHECK(c.at(0, 2, 3) == c0.at(0, 0, 0));
    CHECK(m.at(2, 2) == 1);
    apply_flips(c, m, {true, true});
    CHECK(c.values == c0.values);
    CHECK(m.values == m0.values);

    std::mt19937_64 rng(1);
    const auto [c1, m1] = random_flip(c0, m0, rng, 0.0);
    CHECK(c1.values == c0.values);

    std::mt19937_64 a(42), b(42);
    for (int i = 0; i < 10; ++i) {
        const FlipDecision x = draw_flips(a), y = draw_flips(b);
        CHECK(x.horizontal == y.horizontal);
        CHECK(x.vertical == y.vertical);
    }
    std::mt19937_64 d(42), e(42);
    draw_flips(d);
    e.discard(2);
    CHECK(d() == e());
}
