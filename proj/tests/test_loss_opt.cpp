#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "ehrseq/loss_opt.hpp"

using namespace ehrseq;

TEST_SUITE("loss_opt") {

TEST_CASE("repeat weight worked examples") {
    CHECK(repeat_weight(0, 0.5, 0.01) == 1.0);
    CHECK(repeat_weight(1, 0.5, 0.01) == 0.5);
    CHECK(repeat_weight(2, 0.5, 0.01) == 0.25);
    for (int c = 0; c <= 40; ++c) CHECK(repeat_weight(c, 1.0, 0.7) == 1.0);
    CHECK(repeat_weight(20, 0.5, 0.01) == 0.01);  // 0.5^20 ~ 9.5e-7, floored
    CHECK_THROWS_AS(repeat_weight(-1, 0.5, 0.0), ConfigError);
}

TEST_CASE("repeat weight delta->0 convention") {
    CHECK(repeat_weight(0, 0.0, 0.01) == 1.0);
    CHECK(repeat_weight(1, 0.0, 0.01) == 0.01);
    CHECK(repeat_weight(30, 0.0, 0.0) == 0.0);
}

TEST_CASE("repeat weight is non-increasing and bounded") {
    for (double delta : {0.25, 0.5, 0.9, 1.0}) {
        for (double w_min : {0.0, 0.01, 0.2}) {
            double prev = 2.0;
            for (int c = 0; c <= 60; ++c) {
                const double w = repeat_weight(c, delta, w_min);
                CHECK(w <= prev);
                CHECK(w >= w_min);
                CHECK(w <= 1.0);
                prev = w;
            }
        }
    }
}

TEST_CASE("repeat weight agrees with iterated multiplication") {
    for (double delta : {0.25, 0.5, 0.75}) {
        double prod = 1.0;
        for (int c = 0; c <= 30; ++c) {
            CHECK(repeat_weight(c, delta, 0.0) == doctest::Approx(prod).epsilon(1e-12));
            prod *= delta;
        }
    }
}

TEST_CASE("weighted bce matches the three-token hand computation") {
    const std::vector<double> p{0.9, 0.2, 0.5};
    const std::vector<double> v{1.0, 0.0, 1.0};
    const std::vector<double> w{1.0, 1.0, 0.5};
    const double want = -(std::log(0.9) + std::log(0.8) + 0.5 * std::log(0.5));
    CHECK(weighted_bce(p, v, w) == doctest::Approx(want).epsilon(1e-12));

    // independent naive oracle
    double naive = 0.0;
    for (size_t k = 0; k < p.size(); ++k) {
        const double w_eff = v[k] == 1.0 ? w[k] : 1.0;
        naive -= w_eff * (v[k] * std::log(p[k]) + (1.0 - v[k]) * std::log(1.0 - p[k]));
    }
    CHECK(weighted_bce(p, v, w) == doctest::Approx(naive).epsilon(1e-14));
}

TEST_CASE("confident correct predictions give near-zero loss") {
    const size_t n = 100;
    const double p_lo = 1.0 / (1.0 + std::exp(20.0));  // sigmoid(-20)
    std::vector<double> p(n, p_lo);
    std::vector<double> v(n, 0.0);
    std::vector<double> w(n, 1.0);
    // all-zero targets, logits -20: only the clipping floor survives
    CHECK(weighted_bce(p, v, w) < 2e-5);
    CHECK(weighted_bce(p, v, w) >= 0.0);

    std::vector<double> exact(n);
    std::vector<double> targets(n);
    for (size_t i = 0; i < n; ++i) {
        targets[i] = i % 3 == 0 ? 1.0 : 0.0;
        exact[i] = targets[i];
    }
    CHECK(weighted_bce(exact, targets, w, 1e-7) <=
          double(n) * -std::log(1.0 - 1e-7) + 1e-12);
}

TEST_CASE("doubling a positive weight doubles only that term") {
    const std::vector<double> p{0.7, 0.3, 0.6};
    const std::vector<double> v{1.0, 0.0, 1.0};
    const std::vector<double> w1{0.5, 1.0, 0.25};
    const std::vector<double> w2{1.0, 1.0, 0.25};
    const double term = -std::log(0.7);
    CHECK(weighted_bce(p, v, w2) - weighted_bce(p, v, w1) ==
          doctest::Approx(0.5 * term).epsilon(1e-12));
}

TEST_CASE("shape mismatch is rejected") {
    CHECK_THROWS_AS(weighted_bce({0.5}, {1.0, 0.0}, {1.0, 1.0}), ConfigError);
}

TEST_CASE("learning-rate schedule reproduces the published anchors") {
    OptConfig cfg;  // defaults carry the published values
    cfg.peak_lr = 2.2e-4;
    cfg.min_lr = 2.2e-5;
    cfg.warmup_iters = 20000;
    cfg.lr_decay_iters = 800000;
    cfg.max_iters = 810000;
    CHECK(lr_at(20000, cfg) == 2.2e-4);
    CHECK(lr_at(800000, cfg) == 2.2e-5);
    CHECK(lr_at(805000, cfg) == 2.2e-5);
    CHECK(lr_at(10000, cfg) == doctest::Approx(1.1e-4).epsilon(1e-15));
    CHECK(lr_at(0, cfg) == 0.0);
}

TEST_CASE("schedule is continuous at both knees") {
    OptConfig cfg;
    cfg.peak_lr = 1e-3;
    cfg.min_lr = 1e-4;
    cfg.warmup_iters = 100;
    cfg.lr_decay_iters = 1000;
    cfg.max_iters = 1200;
    CHECK(std::abs(lr_at(100, cfg) - lr_at(101, cfg)) < 1e-7);
    CHECK(std::abs(lr_at(999, cfg) - lr_at(1000, cfg)) < 1e-7);
    for (int64_t s = 1; s < 1200; s += 7) CHECK(lr_at(s, cfg) <= lr_at(100, cfg));

    cfg.cosine_decay = false;  // linear variant
    CHECK(lr_at(550, cfg) == doctest::Approx(0.5 * (1e-3 + 1e-4)).epsilon(1e-12));
    CHECK(lr_at(1000, cfg) == 1e-4);
}

TEST_CASE("adamw single-scalar trace matches a naive reference") {
    OptConfig cfg;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.95;
    cfg.weight_decay = 0.0;

    double p = 1.0;
    double g = 0.3;
    std::vector<ParamRef> refs{{"p", &p, &g, 1, false}};
    AdamState state;

    // naive reference, independent arithmetic
    double rp = 1.0, rm = 0.0, rv = 0.0;
    auto ref_step = [&](double grad, double lr) {
        rm = 0.9 * rm + 0.1 * grad;
        rv = 0.95 * rv + 0.05 * grad * grad;
        const double t = double(state.step_count);
        const double mhat = rm / (1.0 - std::pow(0.9, t));
        const double vhat = rv / (1.0 - std::pow(0.95, t));
        rp -= lr * mhat / (std::sqrt(vhat) + 1e-8);
    };

    adamw_step(refs, state, cfg, 0.01);
    ref_step(0.3, 0.01);
    CHECK(p == doctest::Approx(rp).epsilon(1e-12));

    g = -0.1;
    adamw_step(refs, state, cfg, 0.02);
    ref_step(-0.1, 0.02);
    CHECK(p == doctest::Approx(rp).epsilon(1e-12));
}

TEST_CASE("zero gradients leave parameters fixed without weight decay") {
    OptConfig cfg;
    cfg.weight_decay = 0.0;
    double p = 0.7;
    double g = 0.0;
    std::vector<ParamRef> refs{{"p", &p, &g, 1, true}};
    AdamState state;
    adamw_step(refs, state, cfg, 0.1);
    CHECK(p == 0.7);
}

TEST_CASE("decoupled decay shrinks decayed tensors only") {
    OptConfig cfg;
    cfg.weight_decay = 0.5;
    double pw = 2.0, pn = 2.0;
    double gz = 0.0;
    std::vector<ParamRef> refs{{"w", &pw, &gz, 1, true}, {"norm", &pn, &gz, 1, false}};
    AdamState state;
    adamw_step(refs, state, cfg, 0.1);
    CHECK(pw == doctest::Approx(2.0 * (1.0 - 0.1 * 0.5)).epsilon(1e-15));
    CHECK(pn == 2.0);
}

TEST_CASE("non-finite gradients abort the step") {
    OptConfig cfg;
    double p = 0.0;
    double g = std::numeric_limits<double>::quiet_NaN();
    std::vector<ParamRef> refs{{"p", &p, &g, 1, false}};
    AdamState state;
    CHECK_THROWS_AS(adamw_step(refs, state, cfg, 0.1), NumericError);
}

TEST_CASE("gradient clipping rescales to the max norm") {
    std::vector<double> g{3.0, 0.0, -2.0, 1.0, 1.0, -1.0};  // norm = 4
    std::vector<std::pair<double*, int64_t>> bufs{{g.data(), 3}, {g.data() + 3, 3}};
    const double before = clip_gradients(bufs, 1.0);
    CHECK(before == doctest::Approx(4.0).epsilon(1e-12));
    double norm_sq = 0.0;
    for (double x : g) norm_sq += x * x;
    CHECK(std::sqrt(norm_sq) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(g[0] == doctest::Approx(0.75).epsilon(1e-12));  // direction preserved
    CHECK(g[2] == doctest::Approx(-0.5).epsilon(1e-12));

    std::vector<double> small{0.3, 0.4};  // norm 0.5: untouched
    std::vector<std::pair<double*, int64_t>> bufs2{{small.data(), 2}};
    clip_gradients(bufs2, 1.0);
    CHECK(small[0] == 0.3);
    CHECK(small[1] == 0.4);
}

TEST_CASE("config validation catches domain violations") {
    LossConfig lc;
    lc.delta = 0.0;
    CHECK_THROWS_AS(lc.validate(), ConfigError);
    lc = LossConfig{};
    lc.w_min = 1.0;
    CHECK_THROWS_AS(lc.validate(), ConfigError);
    lc = LossConfig{};
    lc.eps = 0.7;
    CHECK_THROWS_AS(lc.validate(), ConfigError);

    OptConfig oc;
    oc.warmup_iters = 10;
    oc.lr_decay_iters = 5;
    CHECK_THROWS_AS(oc.validate(), ConfigError);
    oc = OptConfig{};
    oc.min_lr = 0.0;
    CHECK_THROWS_AS(oc.validate(), ConfigError);
}

}  // TEST_SUITE
