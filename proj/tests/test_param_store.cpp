#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "udr/param_store.hpp"

using T64 = udr::Tensor<double>;
using udr::Rng;

TEST_CASE("store add, lookup, and rejection") {
    udr::ParamStore<double> ps;
    ps.zeros("encoder.s1.conv1.w", {4, 3, 3, 3});
    ps.bias("encoder.s1.conv1.b", 4);
    REQUIRE(ps.size() == 2);
    REQUIRE(ps.has("encoder.s1.conv1.w"));
    REQUIRE_FALSE(ps.has("encoder.s1.conv2.w"));
    REQUIRE(ps.get("encoder.s1.conv1.b").numel() == 4);
    REQUIRE(ps.get("encoder.s1.conv1.w").requires_grad());
    REQUIRE(ps.trainable("encoder.s1.conv1.w"));

    REQUIRE_THROWS_WITH(ps.zeros("encoder.s1.conv1.w", {1}),
                        Catch::Matchers::ContainsSubstring("exists"));
    REQUIRE_THROWS_WITH(ps.get("nope"), Catch::Matchers::ContainsSubstring("unknown param"));

    auto names = ps.names();
    REQUIRE(names == std::vector<std::string>{"encoder.s1.conv1.b", "encoder.s1.conv1.w"});
}

TEST_CASE("initialization bounds and determinism") {
    Rng rng(7);
    udr::ParamStore<double> ps;
    auto w = ps.conv_weight("w", 4, 3, 3, 3, rng);
    const double bound = std::sqrt(1.0 / 27.0);
    double mx = 0;
    for (long i = 0; i < w.numel(); ++i) mx = std::max(mx, std::abs(w.data()[i]));
    REQUIRE(mx <= bound);
    REQUIRE(mx > 0.25 * bound); // not degenerate

    auto l = ps.linear_weight("l", 8, 32, rng);
    const double lbound = std::sqrt(1.0 / 32.0);
    for (long i = 0; i < l.numel(); ++i) {
        REQUIRE(l.data()[i] <= lbound);
        REQUIRE(l.data()[i] >= -lbound);
    }

    auto b = ps.bias("b", 16);
    for (long i = 0; i < 16; ++i) REQUIRE(b.data()[i] == 0.0);

    Rng rng2(7);
    udr::ParamStore<double> ps2;
    auto w2 = ps2.conv_weight("w", 4, 3, 3, 3, rng2);
    for (long i = 0; i < w.numel(); ++i) REQUIRE(w.data()[i] == w2.data()[i]);

    Rng rng3(8);
    udr::ParamStore<double> ps3;
    auto w3 = ps3.conv_weight("w", 4, 3, 3, 3, rng3);
    bool differs = false;
    for (long i = 0; i < w.numel(); ++i) differs = differs || w.data()[i] != w3.data()[i];
    REQUIRE(differs);
}

TEST_CASE("freeze controls follow prefixes and sync autodiff flags") {
    udr::ParamStore<double> ps;
    ps.zeros("encoder.c1.w", {2, 2});
    ps.zeros("decoder.c1.w", {2, 2});
    ps.zeros("pfm.s1.task_mlp.w", {2, 2});
    ps.zeros("pfm.s2.task_mlp.w", {2, 2});

    ps.freeze_prefix("encoder.");
    REQUIRE_FALSE(ps.trainable("encoder.c1.w"));
    REQUIRE_FALSE(ps.get("encoder.c1.w").requires_grad());
    REQUIRE(ps.trainable("decoder.c1.w"));

    ps.unfreeze_all();
    REQUIRE(ps.trainable("encoder.c1.w"));
    REQUIRE(ps.get("encoder.c1.w").requires_grad());

    ps.freeze_all_except_prefix("pfm.");
    REQUIRE_FALSE(ps.trainable("encoder.c1.w"));
    REQUIRE_FALSE(ps.trainable("decoder.c1.w"));
    REQUIRE(ps.trainable("pfm.s1.task_mlp.w"));
    REQUIRE(ps.trainable("pfm.s2.task_mlp.w"));

    // per-group scalar counts: each tensor here holds 4 values
    auto groups = ps.count_by_group();
    REQUIRE(groups.at("encoder") == 4);
    REQUIRE(groups.at("decoder") == 4);
    REQUIRE(groups.at("pfm") == 8);
}

TEST_CASE("optimizer with zero gradients: identity or pure decay") {
    udr::ParamStore<double> ps;
    auto p = ps.zeros("p", {3});
    p.data()[0] = 0.5;
    p.data()[1] = -1.25;
    p.data()[2] = 2.0;
    const std::vector<double> before(p.data().begin(), p.data().end());

    SECTION("no decay") {
        udr::AdamW<double> opt(1e-4, 0.0);
        p.mutable_grad().assign(3, 0.0);
        opt.step(ps);
        for (long i = 0; i < 3; ++i) REQUIRE(p.data()[i] == before[i]);
    }
    SECTION("decay only") {
        udr::AdamW<double> opt(1e-4, 5e-4);
        for (int it = 0; it < 3; ++it) {
            p.mutable_grad().assign(3, 0.0);
            opt.step(ps);
        }
        const double f = 1.0 - 1e-4 * 5e-4;
        for (long i = 0; i < 3; ++i)
            REQUIRE(p.data()[i] == Catch::Approx(before[i] * f * f * f).epsilon(1e-14));
    }
}

TEST_CASE("optimizer single step matches hand-evaluated update") {
    udr::ParamStore<double> ps;
    auto p = ps.zeros("p", {1});
    p.data()[0] = 0.5;
    p.mutable_grad()[0] = 0.2;
    udr::AdamW<double> opt(1e-4, 5e-4);
    opt.step(ps);

    // first step: mhat = g, vhat = g^2 after bias correction
    const double mhat = 0.2, vhat = 0.04;
    const double want = 0.5 - 1e-4 * (mhat / (std::sqrt(vhat) + 1e-8)) - 1e-4 * 5e-4 * 0.5;
    REQUIRE(p.data()[0] == Catch::Approx(want).margin(1e-7));
    REQUIRE(opt.step_count() == 1);
}

TEST_CASE("optimizer tracks a scalar reference across steps") {
    udr::ParamStore<double> ps;
    auto p = ps.zeros("p", {1});
    p.data()[0] = -0.75;
    udr::AdamW<double> opt(3e-3, 1e-2);

    double rp = -0.75, m = 0, v = 0;
    Rng rng(71);
    for (int step = 1; step <= 5; ++step) {
        const double g = rng.normal();
        p.mutable_grad()[0] = g;
        opt.step(ps);

        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mhat = m / (1.0 - std::pow(0.9, step));
        const double vhat = v / (1.0 - std::pow(0.999, step));
        rp -= 3e-3 * (mhat / (std::sqrt(vhat) + 1e-8)) + 3e-3 * 1e-2 * rp;
        REQUIRE(p.data()[0] == Catch::Approx(rp).margin(1e-12));
    }
    REQUIRE(opt.step_count() == 5);
}

TEST_CASE("optimizer skips frozen parameters and flags missing gradients") {
    udr::ParamStore<double> ps;
    auto live = ps.zeros("decoder.w", {2});
    auto iced = ps.zeros("encoder.w", {2});
    live.data()[0] = 1.0;
    iced.data()[0] = 1.0;
    ps.freeze_prefix("encoder.");

    udr::AdamW<double> opt;
    live.mutable_grad().assign(2, 0.5);
    opt.step(ps); // frozen param has no grad and must be ignored
    REQUIRE(iced.data()[0] == 1.0);
    REQUIRE(live.data()[0] != 1.0);

    ps.unfreeze_all();
    live.mutable_grad().assign(2, 0.5);
    REQUIRE_THROWS_WITH(opt.step(ps), Catch::Matchers::ContainsSubstring("encoder.w"));
}
