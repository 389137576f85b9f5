#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "streamadapter/tensor.hpp"

using namespace streamadapter;

namespace {

// Independent naive triple-loop product, kept separate from the op under test.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, int m, int k, int n) {
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            out[i * n + j] = s;
        }
    return out;
}

Tensor rand_tensor(Shape shape, uint64_t seed, double stddev = 1.0) {
    std::mt19937_64 rng(seed);
    return Tensor::randn(std::move(shape), rng, stddev);
}

}  // namespace

TEST_CASE("matmul: identity and hand-checked cases") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor a = Tensor::from({2, 2}, {3.5, -1, 2, 7});
    Tensor r = matmul(eye, a);
    for (size_t i = 0; i < 4; ++i) CHECK(r.data()[i] == a.data()[i]);

    Tensor b = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor c = Tensor::from({2, 1}, {0, 1});
    Tensor p = matmul(b, c);
    CHECK(p.data()[0] == doctest::Approx(2));
    CHECK(p.data()[1] == doctest::Approx(4));
}

TEST_CASE("matmul: seeded random vs naive triple-loop oracle") {
    Tensor a = rand_tensor({8, 16}, 11);
    Tensor b = rand_tensor({16, 4}, 12);
    Tensor r = matmul(a, b);
    auto expect = naive_matmul(a.data(), b.data(), 8, 16, 4);
    for (size_t i = 0; i < expect.size(); ++i) CHECK(std::abs(r.data()[i] - expect[i]) < 1e-12);
}

TEST_CASE("matmul: shape mismatch rejected with both shapes reported") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("2x3"), std::invalid_argument);
}

TEST_CASE("softmax_rows: symmetry, stability, formula oracle") {
    Tensor u = softmax_rows(Tensor::from({1, 3}, {0, 0, 0}));
    for (int j = 0; j < 3; ++j) CHECK(u.data()[j] == doctest::Approx(1.0 / 3).epsilon(1e-12));

    Tensor big = softmax_rows(Tensor::from({1, 2}, {1000, 0}));
    CHECK(std::abs(big.data()[0] - 1.0) < 1e-9);
    CHECK(std::abs(big.data()[1]) < 1e-9);

    Tensor x = rand_tensor({5, 7}, 21, 3.0);
    Tensor y = softmax_rows(x);
    for (int i = 0; i < 5; ++i) {
        // direct exp/sum oracle in long double
        long double denom = 0.0L;
        for (int j = 0; j < 7; ++j) denom += expl((long double)x.data()[i * 7 + j]);
        double rowsum = 0.0;
        for (int j = 0; j < 7; ++j) {
            long double e = expl((long double)x.data()[i * 7 + j]) / denom;
            CHECK(std::abs(y.data()[i * 7 + j] - (double)e) < 1e-12);
            rowsum += y.data()[i * 7 + j];
        }
        CHECK(std::abs(rowsum - 1.0) < 1e-9);
    }
}

TEST_CASE("softmax_rows: rows sum to one for any finite input (property)") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Tensor x = rand_tensor({4, 9}, 100 + seed, 50.0);
        Tensor y = softmax_rows(x);
        for (int i = 0; i < 4; ++i) {
            double s = 0.0;
            for (int j = 0; j < 9; ++j) s += y.data()[i * 9 + j];
            CHECK(std::abs(s - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("sigmoid_pow: zero input, saturation, domain, monotonicity") {
    Tensor z = sigmoid_pow(Tensor::scalar(0.0), 16.0);
    CHECK(z.item() == doctest::Approx(std::pow(0.5, 1.0 / 16)).epsilon(1e-9));
    CHECK(z.item() == doctest::Approx(0.957603).epsilon(1e-5));

    Tensor s = sigmoid_pow(Tensor::scalar(20.0), 16.0);
    CHECK(std::abs(s.item() - 1.0) < 1e-6);

    CHECK_THROWS_AS(sigmoid_pow(Tensor::scalar(0.0), 0.0), std::invalid_argument);
    CHECK_THROWS_AS(sigmoid_pow(Tensor::scalar(0.0), -3.0), std::invalid_argument);

    // strictly in (0,1) everywhere, strictly monotone where doubles can resolve it
    double prev = 0.0;
    for (double x = -40; x <= 40; x += 0.5) {
        double v = sigmoid_pow(Tensor::scalar(x), 16.0).item();
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        if (x <= 30.0)
            CHECK(v > prev);
        else
            CHECK(v >= prev);
        prev = v;
    }
}

TEST_CASE("cross_entropy: analytic cases and log-sum-exp oracle") {
    // one-hot correct with huge margin
    Tensor hot = Tensor::from({1, 4}, {100, 0, 0, 0});
    CHECK(cross_entropy(hot, {0}).item() == doctest::Approx(0.0).epsilon(1e-12));

    Tensor uni = Tensor::zeros({3, 4});
    CHECK(cross_entropy(uni, {0, 1, 3}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    Tensor x = rand_tensor({6, 11}, 33, 2.0);
    std::vector<int> tgt = {0, 3, 10, 5, 5, 1};
    double expect = 0.0;
    for (int i = 0; i < 6; ++i) {
        long double denom = 0.0L;
        for (int j = 0; j < 11; ++j) denom += expl((long double)x.data()[i * 11 + j]);
        expect -= x.data()[i * 11 + tgt[i]] - (double)logl(denom);
    }
    expect /= 6.0;
    CHECK(std::abs(cross_entropy(x, tgt).item() - expect) < 1e-10);

    CHECK_THROWS_AS(cross_entropy(x, {0, 3, 11, 5, 5, 1}), std::invalid_argument);
}

TEST_CASE("backward: outer-product gradient of sum(W x)") {
    Tensor w = rand_tensor({3, 4}, 44).set_requires_grad(true);
    Tensor x = rand_tensor({4, 2}, 45);
    Tensor loss = sum_all(matmul(w, x));
    backward(loss);
    // d/dW sum(W x) = ones(3,2) x^T, i.e. grad[i][p] = sum_j x[p][j]
    for (int i = 0; i < 3; ++i)
        for (int p = 0; p < 4; ++p) {
            double expect = x.data()[p * 2 + 0] + x.data()[p * 2 + 1];
            CHECK(w.grad()[i * 4 + p] == doctest::Approx(expect).epsilon(1e-12));
        }
}

TEST_CASE("backward: second backward doubles the gradient exactly") {
    Tensor w = rand_tensor({4, 4}, 46).set_requires_grad(true);
    Tensor x = rand_tensor({4, 1}, 47);
    Tensor loss = sum_all(matmul(w, x));
    backward(loss);
    std::vector<double> once = w.grad();
    backward(loss);
    for (size_t i = 0; i < once.size(); ++i) CHECK(w.grad()[i] == 2.0 * once[i]);
}

TEST_CASE("backward: rejects non-scalar loss") {
    Tensor w = rand_tensor({2, 2}, 48).set_requires_grad(true);
    CHECK_THROWS_AS(backward(scale(w, 2.0)), std::invalid_argument);
}

TEST_CASE("finite_diff_check: quadratic is exact at eps=1e-5") {
    Tensor w = rand_tensor({6, 1}, 50).set_requires_grad(true);
    auto f = [&] { return sum_all(mul(w, w)); };
    CHECK(finite_diff_check(f, w, 1e-5) < 1e-8);
}

TEST_CASE("finite_diff_check: softmax-cross-entropy toy net") {
    Tensor w1 = rand_tensor({5, 8}, 51, 0.5).set_requires_grad(true);
    Tensor w2 = rand_tensor({8, 4}, 52, 0.5).set_requires_grad(true);
    Tensor x = rand_tensor({3, 5}, 53);
    std::vector<int> tgt = {1, 0, 3};
    auto f = [&] { return cross_entropy(matmul(gelu(matmul(x, w1)), w2), tgt); };
    CHECK(finite_diff_check(f, w1, 1e-5) < 1e-6);
    CHECK(finite_diff_check(f, w2, 1e-5) < 1e-6);
}

TEST_CASE("finite_diff_check: rejects bad eps") {
    Tensor w = rand_tensor({2, 2}, 54).set_requires_grad(true);
    auto f = [&] { return sum_all(w); };
    CHECK_THROWS_AS(finite_diff_check(f, w, 1e-2), std::invalid_argument);
}

TEST_CASE("gradient tape: every differentiable op passes finite differences") {
    std::mt19937_64 rng(77);
    Tensor a = Tensor::randn({4, 6}, rng, 1.0).set_requires_grad(true);
    Tensor b = Tensor::randn({4, 6}, rng, 1.0).set_requires_grad(true);
    Tensor g = Tensor::randn({6}, rng, 0.3).set_requires_grad(true);
    Tensor alpha = Tensor::randn({4, 1}, rng, 0.5).set_requires_grad(true);
    Tensor bias = Tensor::randn({1}, rng, 1.0).set_requires_grad(true);
    Tensor table = Tensor::randn({9, 6}, rng, 1.0).set_requires_grad(true);
    std::vector<int64_t> pos = {0, 5, 17, 40};

    auto run = [&] {
        Tensor t = add(mul(a, b), sub(a, scale(b, 0.3)));
        t = rms_norm(t, g);
        t = add_scalar(t, bias);
        t = colwise_scale(alpha, t);
        t = concat_cols({slice_cols(t, 0, 3), slice_cols(t, 3, 6)});
        t = concat_rows({slice_rows(t, 0, 2), slice_rows(t, 2, 4)});
        t = rope(t, pos, 10000.0);
        t = add(t, gather_rows(table, {8, 0, 3, 3}));
        t = softmax_rows(t);
        t = matmul(t, transpose(sigmoid_pow(gelu(t), 7.0)));
        Tensor st = stack_planes({t, transpose(t)});
        t = add(slice_plane(st, 0), transpose(slice_plane(st, 1)));
        return cross_entropy(t, {0, 1, 2, 3});
    };
    // the deliberately deep chain amplifies central-difference truncation
    // error, so this composite check is looser than the per-op ones
    for (Tensor* p : {&a, &b, &g, &alpha, &bias, &table}) {
        CHECK(finite_diff_check(run, *p, 1e-5, 64, 99) < 1e-3);
    }
    for (Tensor* p : {&a, &b, &g, &alpha, &bias, &table}) {
        Tensor& t = *p;
        auto simple = [&] { return cross_entropy(rms_norm(add(gather_rows(table, {8, 0, 3, 3}),
                                                              colwise_scale(alpha, add_scalar(mul(a, b), bias))),
                                                          g),
                                                 {0, 1, 2, 3}); };
        CHECK(finite_diff_check(simple, t, 1e-5, 64, 99) < 1e-6);
    }
}

TEST_CASE("NoGradGuard suppresses graph construction") {
    Tensor w = rand_tensor({3, 3}, 60).set_requires_grad(true);
    NoGradGuard ng;
    Tensor y = matmul(w, w);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("tensor invariants: finite outputs, grad shape matches data") {
    Tensor x = rand_tensor({5, 5}, 61, 10.0).set_requires_grad(true);
    Tensor y = softmax_rows(gelu(rms_norm(x, Tensor::full({5}, 1.0))));
    for (double v : y.data()) CHECK(std::isfinite(v));
    backward(sum_all(y));
    CHECK(x.grad().size() == x.data().size());
}
