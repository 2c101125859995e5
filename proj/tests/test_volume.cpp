#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "legonet/volume.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

using namespace lego;

namespace {

Volume random_volume(std::array<long, 3> sh, Rng& rng) {
    Volume v = make_volume(sh);
    // keep values float32-representable so container round trips are bit-exact
    for (auto& x : v.data) x = static_cast<float>(rng.uniform(-1000.0, 1000.0));
    return v;
}

} // namespace

TEST_CASE("volume container round trip") {
    Rng rng(1);
    Volume v = random_volume({3, 4, 5}, rng);
    v.spacing = {1.0, 0.75, 2.5};
    v.origin_extent = {30, 40, 50};
    const char* path = "test_vol_rt.lgv";
    save_volume(path, v);
    Volume r = load_volume(path);
    CHECK(r.shape == v.shape);
    CHECK(r.spacing == v.spacing);
    CHECK(r.origin_extent == v.origin_extent);
    CHECK(r.domain == IntensityDomain::HU);
    CHECK(r.data == v.data);
    std::remove(path);
}

TEST_CASE("container rejects truncated and corrupt files") {
    Rng rng(2);
    Volume v = random_volume({2, 2, 2}, rng);
    const char* path = "test_vol_bad.lgv";
    save_volume(path, v);
    {
        std::ifstream is(path, std::ios::binary);
        std::string all((std::istreambuf_iterator<char>(is)), {});
        std::ofstream os(path, std::ios::binary);
        os.write(all.data(), static_cast<std::streamsize>(all.size() - 6));
    }
    CHECK_THROWS_WITH(load_volume(path), doctest::Contains("payload"));
    {
        std::ofstream os(path, std::ios::binary);
        os << "LGXX garbage";
    }
    CHECK_THROWS_WITH(load_volume(path), doctest::Contains("magic"));
    std::remove(path);
    CHECK_THROWS(load_volume("no_such_file.lgv"));
}

TEST_CASE("clip and normalize endpoints") {
    Volume v = make_volume({1, 1, 5});
    v.data = {-5000, -1024, 0, 1024, 5000};
    Volume n = clip_normalize(v);
    CHECK(n.data == std::vector<double>{-1, -1, 0, 1, 1});
    CHECK(n.domain == IntensityDomain::Normalized);
    CHECK_THROWS(clip_normalize(n));
}

TEST_CASE("clip normalize is monotone") {
    Rng rng(3);
    Volume v = make_volume({1, 1, 40});
    for (auto& x : v.data) x = rng.uniform(-3000.0, 3000.0);
    Volume n = clip_normalize(v);
    for (size_t i = 0; i < v.data.size(); ++i)
        for (size_t j = 0; j < v.data.size(); ++j)
            if (v.data[i] <= v.data[j]) CHECK(n.data[i] <= n.data[j]);
}

TEST_CASE("isotropic resample at 1mm is the identity") {
    Rng rng(4);
    Volume v = random_volume({4, 5, 6}, rng);
    Volume r = resample_isotropic(v);
    CHECK(r.shape == v.shape);
    CHECK(r.data == v.data);
}

TEST_CASE("isotropic resample doubles a 2mm axis") {
    Rng rng(5);
    Volume v = random_volume({48, 8, 8}, rng);
    v.spacing = {2.0, 1.0, 1.0};
    Volume r = resample_isotropic(v);
    CHECK(r.shape == std::array<long, 3>{96, 8, 8});
    CHECK(r.spacing == std::array<double, 3>{1, 1, 1});
    // even target indices sit exactly on source voxels
    CHECK(r.at(10, 3, 4) == doctest::Approx(v.at(5, 3, 4)));
}

TEST_CASE("resample preserves constants") {
    Volume v = make_volume({5, 6, 7}, 0.37);
    v.spacing = {1.7, 0.6, 1.3};
    Volume r = resample_isotropic(v);
    for (double x : r.data) CHECK(x == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("resize to own shape is the identity") {
    Rng rng(6);
    Volume v = random_volume({6, 6, 6}, rng);
    CHECK(resize(v, {6, 6, 6}, ResizeMode::Trilinear).data == v.data);
    CHECK(resize(v, {6, 6, 6}, ResizeMode::Nearest).data == v.data);
    CHECK_THROWS(resize(v, {0, 6, 6}, ResizeMode::Nearest));
}

TEST_CASE("nearest resize keeps masks binary and preserves origin extent") {
    Rng rng(7);
    Volume m = make_volume({9, 9, 9});
    m.origin_extent = {90, 90, 90};
    for (auto& x : m.data) x = rng.uniform() < 0.3;
    Volume r = resize(m, {5, 7, 4}, ResizeMode::Nearest);
    CHECK(r.origin_extent == std::array<long, 3>{90, 90, 90});
    for (double x : r.data) CHECK((x == 0.0 || x == 1.0));
}

TEST_CASE("down-up resize of a smooth field stays close") {
    Volume v = make_volume({24, 24, 24});
    for (long d = 0; d < 24; ++d)
        for (long h = 0; h < 24; ++h)
            for (long w = 0; w < 24; ++w)
                v.at(d, h, w) = std::sin(0.12 * d) * std::cos(0.1 * h) + 0.3 * std::sin(0.09 * w);
    Volume down = resize(v, {12, 12, 12}, ResizeMode::Trilinear);
    Volume up = resize(down, {24, 24, 24}, ResizeMode::Trilinear);
    double range = 2.6, worst = 0;
    for (size_t i = 0; i < v.data.size(); ++i)
        worst = std::max(worst, std::fabs(v.data[i] - up.data[i]));
    CHECK(worst < 0.05 * range);
}

TEST_CASE("trilinear resize never extrapolates") {
    Rng rng(8);
    Volume v = random_volume({5, 5, 5}, rng);
    double lo = *std::min_element(v.data.begin(), v.data.end());
    double hi = *std::max_element(v.data.begin(), v.data.end());
    Volume r = resize(v, {11, 7, 13}, ResizeMode::Trilinear);
    for (double x : r.data) {
        CHECK(x >= lo - 1e-12);
        CHECK(x <= hi + 1e-12);
    }
}

TEST_CASE("synthetic tubes: fraction, connectivity, reproducibility") {
    Rng rng(42);
    auto ds = synth_tube_dataset(4, 32, rng);
    REQUIRE(ds.size() == 4);
    for (const auto& c : ds) {
        double frac = 0;
        for (double x : c.mask.data) {
            CHECK((x == 0.0 || x == 1.0));
            frac += x;
        }
        frac /= static_cast<double>(c.mask.numel());
        CHECK(frac > 0.001);
        CHECK(frac < 0.15);
        for (double x : c.image.data) {
            CHECK(x >= -1.0);
            CHECK(x <= 1.0);
        }

        // flood fill under 26-connectivity from the first foreground voxel
        const auto& m = c.mask;
        long e = m.shape[0];
        std::vector<char> seen(m.data.size(), 0);
        std::vector<long> stack;
        long total = 0;
        for (size_t i = 0; i < m.data.size(); ++i)
            if (m.data[i] != 0.0) {
                ++total;
                if (stack.empty()) {
                    stack.push_back(static_cast<long>(i));
                    seen[i] = 1;
                }
            }
        long reached = 0;
        while (!stack.empty()) {
            long i = stack.back();
            stack.pop_back();
            ++reached;
            long d = i / (e * e), h = (i / e) % e, w = i % e;
            for (long dd = -1; dd <= 1; ++dd)
                for (long dh = -1; dh <= 1; ++dh)
                    for (long dw = -1; dw <= 1; ++dw) {
                        long nd = d + dd, nh = h + dh, nw = w + dw;
                        if (nd < 0 || nh < 0 || nw < 0 || nd >= e || nh >= e || nw >= e) continue;
                        long ni = (nd * e + nh) * e + nw;
                        if (!seen[ni] && m.data[ni] != 0.0) {
                            seen[ni] = 1;
                            stack.push_back(ni);
                        }
                    }
        }
        CHECK(reached == total);
    }

    Rng rng2(42);
    auto ds2 = synth_tube_dataset(4, 32, rng2);
    for (size_t i = 0; i < ds.size(); ++i) {
        CHECK(ds[i].image.data == ds2[i].image.data);
        CHECK(ds[i].mask.data == ds2[i].mask.data);
    }
    CHECK_THROWS(synth_tube_dataset(1, 8, rng));
}

TEST_CASE("manifest csv round trip") {
    std::vector<CaseRecord> recs{{"c0", "a.lgv", "b.lgv", "train"},
                                 {"c1", "x.lgv", "y.lgv", "val"}};
    auto parsed = parse_manifest(manifest_csv(recs));
    REQUIRE(parsed.size() == 2);
    CHECK(parsed[1].case_id == "c1");
    CHECK(parsed[1].mask_path == "y.lgv");
    CHECK(parsed[0].cohort == "train");
}
