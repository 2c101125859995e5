#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "legonet/rng.hpp"
#include "legonet/tensor.hpp"

#include <cmath>

using namespace lego;

namespace {
Tensor random_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
    std::vector<double> d(numel_of(s));
    for (auto& v : d) v = scale * rng.normal();
    return Tensor::from(s, std::move(d));
}
} // namespace

TEST_CASE("elementwise add / relu basics") {
    Tensor a = Tensor::from({2}, {1, 2});
    Tensor b = Tensor::from({2}, {3, 4});
    Tensor c = add(a, b);
    CHECK(c.data()[0] == 4);
    CHECK(c.data()[1] == 6);

    Tensor r = relu(Tensor::from({3}, {-1, 0, 2}));
    CHECK(r.data()[0] == 0);
    CHECK(r.data()[1] == 0);
    CHECK(r.data()[2] == 2);
}

TEST_CASE("shape mismatch names both shapes") {
    Tensor a = Tensor::from({2, 3}, std::vector<double>(6, 1.0));
    Tensor b = Tensor::from({4}, std::vector<double>(4, 1.0));
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[2,3]"), std::invalid_argument);
}

TEST_CASE("strict div rejects exact zero divisor") {
    Tensor a = Tensor::from({2}, {1, 2});
    Tensor b = Tensor::from({2}, {1, 0});
    CHECK(strict_div_mode());
    CHECK_THROWS_AS(div(a, b), std::domain_error);
}

TEST_CASE("gelu gradient matches central difference at 0.5") {
    auto f = [](const Tensor& x) { return sum_all(gelu(x)); };
    Tensor x = Tensor::from({1}, {0.5});
    CHECK(grad_check(f, x, 1e-5) < 1e-6);
}

TEST_CASE("matmul identity and dot product") {
    Tensor I = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor r = matmul(I, m);
    for (int i = 0; i < 4; ++i) CHECK(r.data()[i] == m.data()[i]);

    Tensor a = Tensor::from({1, 2}, {1, 2});
    Tensor b = Tensor::from({2, 1}, {3, 4});
    CHECK(matmul(a, b).item() == 11);

    Tensor bad = Tensor::from({3, 2}, std::vector<double>(6, 1.0));
    CHECK_THROWS_AS(matmul(m, bad), std::invalid_argument);
}

TEST_CASE("matmul gradients vs finite differences") {
    Rng rng(7);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    auto fa = [&](const Tensor& x) { return sum_all(mul(matmul(x, b), matmul(x, b))); };
    CHECK(grad_check(fa, a, 1e-5) < 1e-6);
    auto fb = [&](const Tensor& x) { return sum_all(mul(matmul(a, x), matmul(a, x))); };
    CHECK(grad_check(fb, b, 1e-5) < 1e-6);
}

TEST_CASE("batched matmul broadcasting") {
    Rng rng(3);
    Tensor a = random_tensor({2, 3, 2, 4}, rng);
    Tensor b = random_tensor({4, 5}, rng);
    Tensor c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 3, 2, 5});
    // spot check one batch against manual product
    double acc = 0;
    for (long k = 0; k < 4; ++k) acc += a.data()[(1 * 3 + 2) * 8 + 0 * 4 + k] * b.data()[k * 5 + 3];
    CHECK(c.data()[((1 * 3 + 2) * 2 + 0) * 5 + 3] == doctest::Approx(acc).epsilon(1e-12));
}

TEST_CASE("reduce sum / mean / max") {
    Tensor x = Tensor::from({3}, {1, 2, 3});
    CHECK(sum_all(x).item() == 6);

    // empty axes list is a no-op
    Tensor same = reduce_mean(x, {});
    CHECK(same.data() == x.data());

    Tensor m = Tensor::from({2, 2}, {1, 5, 2, 2});
    Tensor mx = reduce_max(m, {1});
    CHECK(mx.data()[0] == 5);
    CHECK(mx.data()[1] == 2);

    // gradient of sum(max) routes to argmax positions, first index on ties
    Tensor m2 = Tensor::from({2, 2}, {1, 5, 2, 2}, true);
    backward(sum_all(reduce_max(m2, {1})));
    CHECK(m2.grad()[0] == 0);
    CHECK(m2.grad()[1] == 1);
    CHECK(m2.grad()[2] == 1);  // tie -> first index
    CHECK(m2.grad()[3] == 0);

    CHECK_THROWS_AS(reduce_sum(x, {3}), std::invalid_argument);
}

TEST_CASE("reshape / pad / permute layout ops") {
    Rng rng(11);
    Tensor x = random_tensor({6}, rng);
    Tensor back = reshape(reshape(x, {2, 3}), {6});
    CHECK(back.data() == x.data());
    CHECK_THROWS_AS(reshape(x, {4}), std::invalid_argument);

    Tensor p = pad(Tensor::from({2}, {3, 7}), {{1, 1}});
    CHECK(p.data() == std::vector<double>{0, 3, 7, 0});

    Tensor t = random_tensor({2, 3, 4}, rng);
    Tensor twice = permute(permute(t, {0, 2, 1}), {0, 2, 1});
    CHECK(twice.data() == t.data());

    CHECK_THROWS_AS(slice(t, {0, 0, 0}, {3, 3, 4}), std::invalid_argument);
}

TEST_CASE("slice and concat round trip with gradients") {
    Rng rng(5);
    Tensor x = random_tensor({2, 6}, rng);
    x.set_requires_grad(true);
    Tensor lo = slice(x, {0, 0}, {2, 3});
    Tensor hi = slice(x, {0, 3}, {2, 6});
    Tensor joined = concat({lo, hi}, 1);
    CHECK(joined.data() == x.data());
    backward(sum_all(mul(joined, joined)));
    for (long i = 0; i < x.numel(); ++i)
        CHECK(x.grad()[i] == doctest::Approx(2 * x.data()[i]).epsilon(1e-12));
}

TEST_CASE("roll inverse") {
    Rng rng(9);
    Tensor x = random_tensor({3, 4, 5}, rng);
    Tensor r = roll(roll(x, {-1, -2, 1}, {0, 1, 2}), {1, 2, -1}, {0, 1, 2});
    CHECK(r.data() == x.data());
}

TEST_CASE("backward basics") {
    Tensor x = Tensor::from({3}, {1, 2, 3}, true);
    backward(sum_all(x));
    CHECK(x.grad() == std::vector<double>{1, 1, 1});

    Tensor y = Tensor::from({2}, {1, 2}, true);
    backward(sum_all(mul(y, y)));
    CHECK(y.grad() == std::vector<double>{2, 4});

    Tensor z = Tensor::from({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(mul(z, z)), std::invalid_argument);
}

TEST_CASE("grad_check on sigmoid at zero") {
    Tensor x = Tensor::zeros({4});
    auto f = [](const Tensor& t) { return sum_all(sigmoid(t)); };
    CHECK(grad_check(f, x, 1e-5) < 1e-8);
    // sigma'(0) = 0.25 per element
    Tensor x2 = Tensor::zeros({4}, true);
    backward(sum_all(sigmoid(x2)));
    for (double g : x2.grad()) CHECK(g == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(17);
    Tensor x = random_tensor({4, 7}, rng, 3.0);
    Tensor s = softmax_last(x);
    for (long r = 0; r < 4; ++r) {
        double acc = 0;
        for (long c = 0; c < 7; ++c) acc += s.data()[r * 7 + c];
        CHECK(acc == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("forward determinism") {
    Rng rng(23);
    Tensor a = random_tensor({3, 3}, rng);
    Tensor b = random_tensor({3, 3}, rng);
    Tensor r1 = matmul(gelu(a), sigmoid(b));
    Tensor r2 = matmul(gelu(a), sigmoid(b));
    CHECK(r1.data() == r2.data());
}

TEST_CASE("broadcasting matches explicit loop oracle") {
    Rng rng(31);
    std::vector<std::pair<Shape, Shape>> cases = {
        {{2, 3}, {3}}, {{4, 1, 2}, {3, 1}}, {{1}, {2, 2, 2}}, {{3, 1, 4}, {2, 1, 1, 4}},
    };
    for (auto& [sa, sb] : cases) {
        Tensor a = random_tensor(sa, rng);
        Tensor b = random_tensor(sb, rng);
        Tensor c = mul(a, b);
        Shape os = broadcast_shape(sa, sb);
        CHECK(c.shape() == os);
        // loop oracle: walk every output coordinate explicitly
        long n = numel_of(os);
        std::vector<long> coord(os.size(), 0);
        for (long i = 0; i < n; ++i) {
            auto fetch = [&](const Tensor& t, const Shape& s) {
                long idx = 0, stride = 1;
                for (long d = static_cast<long>(s.size()) - 1, od = static_cast<long>(os.size()) - 1;
                     d >= 0; --d, --od) {
                    long c2 = s[d] == 1 ? 0 : coord[od];
                    idx += c2 * stride;
                    stride *= s[d];
                }
                return t.data()[idx];
            };
            CHECK(c.data()[i] == doctest::Approx(fetch(a, sa) * fetch(b, sb)).epsilon(1e-14));
            for (long d = static_cast<long>(os.size()) - 1; d >= 0; --d) {
                if (++coord[d] < os[d]) break;
                coord[d] = 0;
            }
        }
    }
}

TEST_CASE("grad_check across all differentiable elementwise ops") {
    Rng rng(41);
    Tensor x = random_tensor({2, 3}, rng, 0.7);
    std::vector<std::function<Tensor(const Tensor&)>> fns = {
        [](const Tensor& t) { return sum_all(relu(t + 0.1)); },
        [](const Tensor& t) { return sum_all(gelu(t)); },
        [](const Tensor& t) { return sum_all(sigmoid(t)); },
        [](const Tensor& t) { return sum_all(tanh_op(t)); },
        [](const Tensor& t) { return sum_all(exp_op(t)); },
        [](const Tensor& t) { return sum_all(log_op(sigmoid(t))); },
        [](const Tensor& t) { return sum_all(pow_op(sigmoid(t), 2.0)); },
        [](const Tensor& t) { return sum_all(div(t, exp_op(t))); },
        [](const Tensor& t) { return sum_all(mul(t, roll(t, {1}, {1}))); },
        [](const Tensor& t) { return sum_all(mul(softmax_last(t), t)); },
        [](const Tensor& t) { return sum_all(reduce_mean(t, {1})); },
    };
    for (auto& f : fns) CHECK(grad_check(f, x, 1e-5) < 1e-4);
}
