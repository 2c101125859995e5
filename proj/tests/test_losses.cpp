#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "legonet/losses.hpp"
#include "legonet/rng.hpp"

#include <cmath>

using namespace lego;

TEST_CASE("dice loss on the worked four-voxel example") {
    Tensor y = Tensor::from({4}, {1, 0, 1, 0});
    Tensor p = Tensor::from({4}, {0.5, 0.5, 1, 0});
    // overlap 1.5, denom 1.5 + 2 -> ratio 3/3.5, loss 1/7
    CHECK(dice_loss(p, y, 0.0).item() == doctest::Approx(1.0 / 7.0).epsilon(1e-14));
}

TEST_CASE("dice loss limits") {
    Tensor y = Tensor::from({5}, {1, 1, 0, 0, 1});
    CHECK(dice_loss(y, y, 0.0).item() == doctest::Approx(0.0));
    Tensor zero = Tensor::zeros({5});
    CHECK(dice_loss(zero, y, 1e-12).item() == doctest::Approx(1.0));
    CHECK_THROWS(dice_loss(Tensor::zeros({3}), y));
}

TEST_CASE("dice loss is symmetric on binary inputs") {
    Rng rng(4);
    std::vector<double> a(20), b(20);
    for (auto& v : a) v = rng.uniform() < 0.4;
    for (auto& v : b) v = rng.uniform() < 0.4;
    Tensor ta = Tensor::from({20}, a), tb = Tensor::from({20}, b);
    CHECK(dice_loss(ta, tb, 1.0).item() == doctest::Approx(dice_loss(tb, ta, 1.0).item()));
}

TEST_CASE("focal loss single-voxel hand values") {
    LossConfig cfg;
    Tensor half = Tensor::from({1}, {0.5});
    double want = 0.25 * std::log(2.0);
    CHECK(std::fabs(focal_loss(half, Tensor::from({1}, {1.0}), cfg).item() - want) < 1e-12);
    CHECK(std::fabs(focal_loss(half, Tensor::from({1}, {0.0}), cfg).item() - want) < 1e-12);
}

TEST_CASE("focal loss vanishes on confident correct predictions") {
    Tensor y = Tensor::from({4}, {1, 0, 1, 0});
    Tensor p = Tensor::from({4}, {1, 0, 1, 0});
    CHECK(focal_loss(p, y).item() < 1e-10);
}

TEST_CASE("focal loss is a sum over voxels") {
    LossConfig cfg;
    Tensor y = Tensor::from({2}, {1.0, 0.0});
    Tensor p = Tensor::from({2}, {0.3, 0.8});
    double a = focal_loss(Tensor::from({1}, {0.3}), Tensor::from({1}, {1.0}), cfg).item();
    double b = focal_loss(Tensor::from({1}, {0.8}), Tensor::from({1}, {0.0}), cfg).item();
    CHECK(focal_loss(p, y, cfg).item() == doctest::Approx(a + b).epsilon(1e-13));
}

TEST_CASE("losses are permutation invariant") {
    Rng rng(9);
    std::vector<double> p(12), y(12);
    for (auto& v : p) v = rng.uniform(0.05, 0.95);
    for (auto& v : y) v = rng.uniform() < 0.5;
    std::vector<long> order{7, 3, 11, 0, 5, 9, 1, 10, 2, 8, 4, 6};
    std::vector<double> ps(12), ys(12);
    for (long i = 0; i < 12; ++i) { ps[i] = p[order[i]]; ys[i] = y[order[i]]; }
    CHECK(dice_loss(Tensor::from({12}, p), Tensor::from({12}, y), 1.0).item() ==
          doctest::Approx(dice_loss(Tensor::from({12}, ps), Tensor::from({12}, ys), 1.0).item()));
    CHECK(focal_loss(Tensor::from({12}, p), Tensor::from({12}, y)).item() ==
          doctest::Approx(focal_loss(Tensor::from({12}, ps), Tensor::from({12}, ys)).item()));
}

TEST_CASE("combined loss equals the sum of its parts") {
    Rng rng(2);
    std::vector<double> lv(27), yv(27);
    for (auto& v : lv) v = rng.normal();
    for (auto& v : yv) v = rng.uniform() < 0.3;
    Tensor logits = Tensor::from({27}, lv);
    Tensor y = Tensor::from({27}, yv);
    LossConfig cfg;
    Tensor p = sigmoid(logits);
    double parts = dice_loss(p, y, cfg.smooth).item() + focal_loss(p, y, cfg).item();
    double whole = combined_loss(logits, y, cfg).item();
    CHECK(whole == doctest::Approx(parts).epsilon(1e-14));
    CHECK(whole >= 0.0);
}

TEST_CASE("combined loss gradient matches finite differences") {
    Rng rng(13);
    std::vector<double> lv(16), yv(16);
    for (auto& v : lv) v = rng.normal() * 0.5;
    for (auto& v : yv) v = rng.uniform() < 0.4;
    Tensor y = Tensor::from({16}, yv);
    Tensor logits = Tensor::from({16}, lv, true);
    double rel = grad_check([&](const Tensor& t) { return combined_loss(t, y); }, logits);
    CHECK(rel < 1e-4);
}

TEST_CASE("dice loss gradient flows into predictions") {
    Rng rng(21);
    std::vector<double> pv(10), yv(10);
    for (auto& v : pv) v = rng.uniform(0.1, 0.9);
    for (auto& v : yv) v = rng.uniform() < 0.5;
    Tensor y = Tensor::from({10}, yv);
    Tensor p = Tensor::from({10}, pv, true);
    double rel = grad_check([&](const Tensor& t) { return dice_loss(t, y, 1.0); }, p);
    CHECK(rel < 1e-4);
}
