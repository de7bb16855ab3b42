#include <catch2/catch_amalgamated.hpp>

#include "udr/gradcheck.hpp"
#include "udr/rng.hpp"
#include "udr/tensor.hpp"

using udr::Tensor;
using T64 = udr::Tensor<double>;

TEST_CASE("construction and indexing") {
    auto t = T64::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    REQUIRE(t.numel() == 6);
    REQUIRE(t.at({0, 0}) == 1.0);
    REQUIRE(t.at({1, 2}) == 6.0);
    REQUIRE_THROWS_AS(T64::from_data({2, 2}, {1, 2, 3}), std::invalid_argument);

    auto z = T64::zeros({4});
    for (double v : z.data()) REQUIRE(v == 0.0);
}

TEST_CASE("elementwise forward values") {
    auto a = T64::from_data({3}, {1, -2, 3});
    auto b = T64::from_data({3}, {4, 5, -6});
    auto s = udr::add(a, b);
    REQUIRE(s.data()[0] == 5.0);
    REQUIRE(s.data()[1] == 3.0);
    REQUIRE(s.data()[2] == -3.0);

    auto d = udr::sub(a, b);
    REQUIRE(d.data()[2] == 9.0);

    auto p = udr::mul(a, b);
    REQUIRE(p.data()[1] == -10.0);

    auto m = udr::abs_val(a);
    REQUIRE(m.data()[1] == 2.0);

    REQUIRE_THROWS_AS(udr::add(a, T64::zeros({4})), std::invalid_argument);
}

TEST_CASE("sum of squares gives 2x gradient") {
    auto x = T64::from_data({4}, {1, -2, 3, 0.5}, true);
    auto loss = udr::sum(udr::mul(x, x));
    loss.backward();
    REQUIRE(x.grad()[0] == Catch::Approx(2.0));
    REQUIRE(x.grad()[1] == Catch::Approx(-4.0));
    REQUIRE(x.grad()[2] == Catch::Approx(6.0));
    REQUIRE(x.grad()[3] == Catch::Approx(1.0));
}

TEST_CASE("fan-out sums gradients") {
    auto x = T64::from_data({2}, {3, 4}, true);
    auto y = udr::add(x, x); // dy/dx = 2
    auto loss = udr::sum(y);
    loss.backward();
    REQUIRE(x.grad()[0] == Catch::Approx(2.0));
    REQUIRE(x.grad()[1] == Catch::Approx(2.0));
}

TEST_CASE("leaf gradients accumulate across backward calls") {
    auto x = T64::from_data({2}, {1, 2}, true);
    auto l1 = udr::sum(x);
    l1.backward();
    auto l2 = udr::sum(x);
    l2.backward();
    REQUIRE(x.grad()[0] == Catch::Approx(2.0));
    x.zero_grad();
    auto l3 = udr::sum(x);
    l3.backward();
    REQUIRE(x.grad()[0] == Catch::Approx(1.0));
}

TEST_CASE("backward rejects non-scalar loss") {
    auto x = T64::from_data({2}, {1, 2}, true);
    auto y = udr::add(x, x);
    REQUIRE_THROWS_AS(y.backward(), std::invalid_argument);
}

TEST_CASE("NoGradGuard suppresses graph construction") {
    auto x = T64::from_data({2}, {1, 2}, true);
    {
        udr::NoGradGuard ng;
        auto y = udr::mul(x, x);
        REQUIRE_FALSE(y.requires_grad());
    }
    auto y = udr::mul(x, x);
    REQUIRE(y.requires_grad());
}

TEST_CASE("detach cuts the graph") {
    auto x = T64::from_data({2}, {1, 2}, true);
    auto y = udr::mul(x, x).detach();
    REQUIRE_FALSE(y.requires_grad());
    REQUIRE(y.data()[1] == 4.0);
}

TEST_CASE("reshape and concat forward") {
    auto a = T64::from_data({2, 2}, {1, 2, 3, 4});
    auto r = udr::reshape(a, {4});
    REQUIRE(r.data()[3] == 4.0);
    REQUIRE_THROWS_AS(udr::reshape(a, {5}), std::invalid_argument);

    auto b = T64::from_data({2, 1}, {9, 8});
    auto c = udr::concat<double>({a, b}, 1); // [2,3]
    REQUIRE(c.dim(1) == 3);
    REQUIRE(c.at({0, 2}) == 9.0);
    REQUIRE(c.at({1, 0}) == 3.0);
    REQUIRE(c.at({1, 2}) == 8.0);

    auto d = udr::concat<double>({a, a}, 0); // [4,2]
    REQUIRE(d.dim(0) == 4);
    REQUIRE(d.at({2, 0}) == 1.0);

    REQUIRE_THROWS_AS(udr::concat<double>({a, T64::zeros({3, 3})}, 0), std::invalid_argument);
}

TEST_CASE("transpose_last2 round trip") {
    auto a = T64::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    auto t = udr::transpose_last2(a);
    REQUIRE(t.dim(0) == 3);
    REQUIRE(t.at({0, 1}) == 4.0);
    auto back = udr::transpose_last2(t);
    for (long i = 0; i < 6; ++i) REQUIRE(back.data()[i] == a.data()[i]);
}

TEST_CASE("bmm against naive triple loop") {
    udr::Rng rng(7);
    auto a = T64::randn({2, 3, 4}, rng);
    auto b = T64::randn({2, 4, 5}, rng);
    auto c = udr::bmm(a, b);
    for (long bb = 0; bb < 2; ++bb)
        for (long i = 0; i < 3; ++i)
            for (long j = 0; j < 5; ++j) {
                double acc = 0;
                for (long k = 0; k < 4; ++k) acc += a.at({bb, i, k}) * b.at({bb, k, j});
                REQUIRE(c.at({bb, i, j}) == Catch::Approx(acc).margin(1e-12));
            }
    REQUIRE_THROWS_AS(udr::bmm(a, T64::zeros({2, 3, 5})), std::invalid_argument);
}

TEST_CASE("softmax rows sum to one and handle large inputs") {
    auto x = T64::from_data({2, 3}, {1000, 1001, 1002, -5, 0, 5});
    auto y = udr::softmax_lastdim(x);
    for (long r = 0; r < 2; ++r) {
        double s = 0;
        for (long j = 0; j < 3; ++j) s += y.at({r, j});
        REQUIRE(s == Catch::Approx(1.0));
    }
    REQUIRE(y.at({0, 2}) > y.at({0, 0}));
}

TEST_CASE("clamp values and gradient mask") {
    auto x = T64::from_data({4}, {-2, 0.25, 0.75, 2}, true);
    auto y = udr::clamp(x, 0.0, 1.0);
    REQUIRE(y.data()[0] == 0.0);
    REQUIRE(y.data()[3] == 1.0);
    auto loss = udr::sum(y);
    loss.backward();
    REQUIRE(x.grad()[0] == 0.0);
    REQUIRE(x.grad()[1] == 1.0);
    REQUIRE(x.grad()[2] == 1.0);
    REQUIRE(x.grad()[3] == 0.0);
}

TEST_CASE("finite differences agree across the op set") {
    udr::Rng rng(42);
    const double tol = 1e-6; // doubles + central differences leave plenty of headroom

    SECTION("add/sub/mul chain") {
        std::vector<T64> ins = {T64::randn({5}, rng), T64::randn({5}, rng)};
        auto res = udr::check_gradients(
            [](const std::vector<T64>& v) {
                auto u = udr::mul(udr::add(v[0], v[1]), udr::sub(v[0], v[1]));
                return udr::sum(udr::mul(u, v[0]));
            },
            ins);
        REQUIRE(res.max_rel_err < tol);
    }
    SECTION("silu tanh abs mean") {
        std::vector<T64> ins = {T64::randn({7}, rng)};
        auto res = udr::check_gradients(
            [](const std::vector<T64>& v) {
                auto a = udr::silu(v[0]);
                auto b = udr::tanh_op(a);
                auto c = udr::abs_val(b);
                return udr::mean(c);
            },
            ins);
        REQUIRE(res.max_rel_err < tol);
    }
    SECTION("affine scale") {
        std::vector<T64> ins = {T64::randn({6}, rng)};
        auto res = udr::check_gradients(
            [](const std::vector<T64>& v) {
                return udr::sum(udr::affine(udr::scale(v[0], 3.0), -0.5, 2.0));
            },
            ins);
        REQUIRE(res.max_rel_err < tol);
    }
    SECTION("reshape concat transpose") {
        std::vector<T64> ins = {T64::randn({2, 3}, rng), T64::randn({2, 2}, rng)};
        auto res = udr::check_gradients(
            [](const std::vector<T64>& v) {
                auto c = udr::concat<double>({v[0], v[1]}, 1); // [2,5]
                auto t = udr::transpose_last2(c);              // [5,2]
                auto r = udr::reshape(t, {10});
                return udr::sum(udr::mul(r, r));
            },
            ins);
        REQUIRE(res.max_rel_err < tol);
    }
    SECTION("bmm softmax") {
        std::vector<T64> ins = {T64::randn({2, 3, 4}, rng), T64::randn({2, 4, 3}, rng)};
        auto res = udr::check_gradients(
            [](const std::vector<T64>& v) {
                auto p = udr::bmm(v[0], v[1]); // [2,3,3]
                auto s = udr::softmax_lastdim(p);
                auto q = udr::bmm(s, p); // p consumed twice: fan-out path
                return udr::mean(udr::mul(q, q));
            },
            ins);
        REQUIRE(res.max_rel_err < tol);
    }
    SECTION("fan-out with shared input") {
        std::vector<T64> ins = {T64::randn({4}, rng)};
        auto res = udr::check_gradients(
            [](const std::vector<T64>& v) {
                auto a = udr::silu(v[0]);
                auto b = udr::mul(a, v[0]); // v[0] used twice
                return udr::sum(udr::add(b, a));
            },
            ins);
        REQUIRE(res.max_rel_err < tol);
    }
}

TEST_CASE("rng determinism and distribution sanity") {
    udr::Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

    udr::Rng c(9);
    double acc = 0, acc2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double v = c.normal();
        acc += v;
        acc2 += v * v;
    }
    REQUIRE(std::abs(acc / n) < 0.05);
    REQUIRE(std::abs(acc2 / n - 1.0) < 0.05);

    udr::Rng d(9);
    for (int i = 0; i < 1000; ++i) {
        double u = d.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
    }
    udr::Rng e(9);
    for (int i = 0; i < 1000; ++i) {
        long v = e.uniform_int(3, 7);
        REQUIRE(v >= 3);
        REQUIRE(v <= 7);
    }
}
