// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "kvsvd/sensitivity.hpp"
#include "test_util.hpp"

using namespace kvsvd;
using testutil::kind_of;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

ModelConfig small_cfg(std::size_t layers) {
    ModelConfig c = preset("toy-small");
    c.num_layers = layers;
    c.vocab_size = 16;
    c.mlp_hidden = 8;
    return c;
}

/// Geometric decay giving condition number `kappa` over 32 singular values.
double decay_for_kappa(double kappa) {
    return std::pow(kappa, -1.0 / 31.0);
}

std::vector<LayerSensitivity> from_log_kt(const std::vector<double>& log_kt) {
    // per-layer factors exp(log_kt[l] - log_kt[l+1]) reproduce the cumulative values
    std::vector<std::pair<double, double>> k(log_kt.size());
    for (std::size_t l = 0; l < log_kt.size(); ++l) {
        const double next = l + 1 < log_kt.size() ? log_kt[l + 1] : 0.0;
        k[l] = {std::exp(log_kt[l] - next), 1.0};
    }
    return cumulate(k);
}

const ModelWeights& graded_toy_deep() {
    static const ModelWeights w = generate_synthetic(preset("toy-deep"), graded_spectrum(16, 2.0, 0.97, 1.0), 21);
    return w;
}

} // namespace

TEST(Sensitivity, FlatSpectraGiveUnitKappaTilde) {
    const auto w = generate_synthetic(small_cfg(3), {}, 1);
    for (const auto& s : layer_sensitivities(w)) {
        EXPECT_NEAR(s.kappa_tilde, 1.0, 1e-6);
    }
}

TEST(Sensitivity, TwoLayerProducts) {
    auto w = generate_synthetic(small_cfg(2), {}, 1);
    w.layers[0].w_k = spectral_matrix(64, 32, 1.0, decay_for_kappa(2.0), 10);
    w.layers[0].w_v = spectral_matrix(64, 32, 1.0, decay_for_kappa(2.0), 11);
    w.layers[1].w_k = spectral_matrix(64, 32, 1.0, decay_for_kappa(2.0), 12);
    const auto s = layer_sensitivities(w);
    EXPECT_NEAR(s[0].kappa_tilde, 8.0, 1e-8 * 8);
    EXPECT_NEAR(s[1].kappa_tilde, 2.0, 1e-8 * 2);
    EXPECT_NEAR(s[1].kappa_tilde, s[1].kappa_k * s[1].kappa_v, 1e-12);
}

TEST(Sensitivity, SingleLayer) {
    auto w = generate_synthetic(small_cfg(1), {}, 1);
    w.layers[0].w_k = spectral_matrix(64, 32, 1.0, decay_for_kappa(3.0), 10);
    w.layers[0].w_v = spectral_matrix(64, 32, 1.0, decay_for_kappa(5.0), 11);
    const auto s = layer_sensitivities(w);
    ASSERT_EQ(s.size(), 1u);
    EXPECT_NEAR(s[0].kappa_tilde, 15.0, 1e-8 * 15);
}

TEST(Sensitivity, MonotoneAndLastIsOwnProduct) {
    const auto s = layer_sensitivities(graded_toy_deep());
    for (std::size_t l = 0; l + 1 < s.size(); ++l) {
        EXPECT_GE(s[l].kappa_tilde, s[l + 1].kappa_tilde);
    }
    EXPECT_DOUBLE_EQ(s.back().kappa_tilde, s.back().kappa_k * s.back().kappa_v);
}

TEST(Sensitivity, InfinityPropagatesUpward) {
    const std::vector<std::pair<double, double>> k{{2, 2}, {kInf, 1}, {3, 1}};
    const auto s = cumulate(k);
    EXPECT_TRUE(std::isinf(s[0].kappa_tilde));
    EXPECT_TRUE(std::isinf(s[1].kappa_tilde));
    EXPECT_EQ(s[2].kappa_tilde, 3.0);
}

TEST(Sensitivity, ScalingInvariance) {
    auto w = generate_synthetic(small_cfg(3), graded_spectrum(3, 1.0, 0.8, 1.0), 4);
    const auto before = plan_progressive(layer_sensitivities(w), 32, 32, 8, kInf);
    for (auto& lw : w.layers) {
        lw.w_k = -7.5 * lw.w_k;
        lw.w_v = 0.01 * lw.w_v;
    }
    const auto after_s = layer_sensitivities(w);
    const auto after = plan_progressive(after_s, 32, 32, 8, kInf);
    for (std::size_t l = 0; l < 3; ++l) {
        EXPECT_EQ(before.layers[l].d_c, after.layers[l].d_c);
        EXPECT_NEAR(before.layers[l].kappa_tilde, after.layers[l].kappa_tilde, 1e-8 * before.layers[l].kappa_tilde);
    }
}

TEST(Progressive, EndpointsAndMidpoint) {
    const auto s = from_log_kt({4.0, 2.0, 0.0});
    const auto p = plan_progressive(s, 32, 32, 8, kInf);
    EXPECT_EQ(p.layers[0].d_c, 32u);
    EXPECT_EQ(p.layers[1].d_c, 20u); // round((32 + 8) / 2)
    EXPECT_EQ(p.layers[2].d_c, 8u);
}

TEST(Progressive, UnroundedEndpointsExact) {
    EXPECT_EQ(progressive_dim(5.0, 1.0, 5.0, 40, 7), 40.0);
    EXPECT_DOUBLE_EQ(progressive_dim(1.0, 1.0, 5.0, 40, 7), 7.0);
    EXPECT_DOUBLE_EQ(progressive_dim(3.0, 1.0, 5.0, 40, 7), 23.5);
}

TEST(Progressive, ThresholdSkipsAndSkippedLayersStayFull) {
    const auto s = from_log_kt({6.0, 3.0, 1.0, 0.5});
    const auto p = plan_progressive(s, 32, 24, 4, std::exp(2.0));
    EXPECT_TRUE(p.layers[0].skip);
    EXPECT_TRUE(p.layers[1].skip);
    EXPECT_FALSE(p.layers[2].skip);
    EXPECT_EQ(p.layers[0].d_c, 32u);
    // min/max include the skipped layers: layer 2 sits at t = 5/5.5
    EXPECT_EQ(p.layers[2].d_c, static_cast<std::size_t>(std::lround(24.0 * (1.0 - (5.0 / 5.5) * (1.0 - 4.0 / 24.0)))));
    EXPECT_EQ(p.layers[3].d_c, 4u);
}

TEST(Progressive, DegenerateRangeGivesDmax) {
    const auto s = from_log_kt({0.0, 0.0, 0.0});
    const auto p = plan_progressive(s, 32, 28, 4, kInf);
    for (const auto& e : p.layers) {
        EXPECT_EQ(e.d_c, 28u);
        EXPECT_FALSE(e.skip);
    }
}

TEST(Progressive, InfiniteKappaTildeSkippedUnderFiniteThreshold) {
    const std::vector<std::pair<double, double>> k{{kInf, 1}, {4, 1}, {2, 1}};
    const auto s = cumulate(k);
    const auto p = plan_progressive(s, 32, 32, 8, 1e6);
    EXPECT_TRUE(p.layers[0].skip);
    EXPECT_EQ(p.layers[1].d_c, 32u);
    EXPECT_EQ(p.layers[2].d_c, 8u);
    const auto q = plan_progressive(s, 32, 30, 8, kInf);
    EXPECT_FALSE(q.layers[0].skip);
    EXPECT_EQ(q.layers[0].d_c, 30u);
}

TEST(Progressive, Alignment) {
    const auto s = from_log_kt({4.0, 2.0, 0.0});
    const auto p = plan_progressive(s, 32, 32, 4, kInf, {8});
    for (const auto& e : p.layers) {
        EXPECT_EQ(e.d_c % 8, 0u);
    }
    EXPECT_EQ(p.layers[1].d_c, 24u); // 18 rounded up
}

TEST(Progressive, PreconditionsChecked) {
    const auto s = from_log_kt({1.0});
    EXPECT_EQ(kind_of([&] { plan_progressive(s, 32, 8, 16, kInf); }), ErrorKind::contract);
    EXPECT_EQ(kind_of([&] { plan_progressive(s, 32, 40, 1, kInf); }), ErrorKind::contract);
    EXPECT_EQ(kind_of([&] { plan_progressive(s, 32, 32, 1, 0.0); }), ErrorKind::contract);
}

TEST(Progressive, NonincreasingOnGradedModel) {
    const auto p = plan_progressive(layer_sensitivities(graded_toy_deep()), 32, 32, 6, kInf);
    for (std::size_t l = 0; l + 1 < p.layers.size(); ++l) {
        EXPECT_GE(p.layers[l].d_c, p.layers[l + 1].d_c);
    }
}

TEST(Uniform, InfiniteThresholdCompressesAll) {
    const auto p = plan_uniform(from_log_kt({3, 2, 1}), 32, 12, kInf);
    for (const auto& e : p.layers) {
        EXPECT_FALSE(e.skip);
        EXPECT_EQ(e.d_c, 12u);
    }
}

TEST(Uniform, ThresholdBelowMinSkipsAll) {
    const auto p = plan_uniform(from_log_kt({3, 2, 1}), 32, 12, 1.5);
    for (const auto& e : p.layers) {
        EXPECT_TRUE(e.skip);
        EXPECT_EQ(e.d_c, 32u);
    }
    EXPECT_EQ(p.retained_ratio(), 1.0);
}

TEST(Uniform, SkipSetMatchesRecomputation) {
    const auto& w = graded_toy_deep();
    const auto s = layer_sensitivities(w);
    const double thr = s[5].kappa_tilde * 1.0001;
    const auto u = plan_uniform(s, 32, 16, thr);
    const auto p = plan_progressive(s, 32, 32, 8, thr);
    std::size_t skipped = 0;
    for (std::size_t l = 0; l < s.size(); ++l) {
        // independent recomputation from the raw weights
        const double kt_direct = [&] {
            double prod = 1.0;
            for (std::size_t j = l; j < w.layers.size(); ++j) {
                prod *= condition_number(w.layers[j].w_k) * condition_number(w.layers[j].w_v);
            }
            return prod;
        }();
        EXPECT_EQ(u.layers[l].skip, kt_direct > thr) << l;
        EXPECT_EQ(u.layers[l].skip, p.layers[l].skip) << l;
        skipped += u.layers[l].skip ? 1 : 0;
    }
    EXPECT_EQ(skipped, 5u);
}

TEST(SolveDmin, FullTargetReturnsDmax) {
    EXPECT_EQ(solve_dmin(from_log_kt({3, 2, 1}), 32, 30, kInf, 1.0), 30u);
}

TEST(SolveDmin, AllSkippedIsInfeasible) {
    try {
        solve_dmin(from_log_kt({3, 2, 1}), 32, 32, 1.0001, 0.9);
        FAIL() << "no exception";
    } catch (const InfeasibleTargetError& e) {
        EXPECT_EQ(e.kind(), ErrorKind::infeasible);
        EXPECT_EQ(e.floor_ratio(), 1.0);
    }
}

TEST(SolveDmin, BracketingOnToyDeep) {
    const auto s = layer_sensitivities(graded_toy_deep());
    const std::size_t d = solve_dmin(s, 32, 32, kInf, 0.6);
    EXPECT_LE(plan_progressive(s, 32, 32, d, kInf).retained_ratio(), 0.6);
    ASSERT_LT(d, 32u);
    EXPECT_GT(plan_progressive(s, 32, 32, d + 1, kInf).retained_ratio(), 0.6);
    // exhaustive scan agrees
    std::size_t best = 0;
    for (std::size_t m = 1; m <= 32; ++m) {
        if (plan_progressive(s, 32, 32, m, kInf).retained_ratio() <= 0.6) {
            best = m;
        }
    }
    EXPECT_EQ(d, best);
}

TEST(VarianceRank, Examples) {
    const std::vector<double> flat(8, 1.0);
    EXPECT_EQ(variance_rank(flat, 0.5), 4u);
    EXPECT_EQ(variance_rank(flat, 1.0 - 1e-9), 8u);
    std::vector<double> geo(12);
    for (std::size_t i = 0; i < geo.size(); ++i) {
        geo[i] = std::pow(0.5, static_cast<double>(i));
    }
    for (double alpha : {0.5, 0.7, 0.75, 0.9, 0.99, 0.999}) {
        double total = 0.0;
        for (double x : geo) {
            total += x * x;
        }
        std::size_t brute = geo.size();
        double run = 0.0;
        for (std::size_t k = 0; k < geo.size(); ++k) {
            run += geo[k] * geo[k];
            if (run / total >= alpha) {
                brute = k + 1;
                break;
            }
        }
        EXPECT_EQ(variance_rank(geo, alpha), brute) << alpha;
    }
    EXPECT_EQ(kind_of([&] { variance_rank(flat, 1.0); }), ErrorKind::contract);
}

TEST(VarianceFraction, PlanUsesLargerOfKeyAndValue) {
    auto w = generate_synthetic(small_cfg(2), {}, 3);
    w.layers[0].w_k = spectral_matrix(64, 32, 1.0, 0.5, 1);
    const auto p = plan_variance_fraction(w, 0.5);
    EXPECT_EQ(p.layers[0].d_c, 16u); // value is flat: half of 32
    EXPECT_EQ(p.layers[1].d_c, 16u);
    EXPECT_EQ(p.strategy, Strategy::variance_fraction);
}

TEST(OptimalRatio, EqualKappaGivesRootRatio) {
    const auto r = optimal_ratios(from_log_kt({3, 2, 1}), 0.4);
    // log kt = 3, 2, 1 are not equal; build equal ones explicitly
    const std::vector<std::pair<double, double>> k{{1, 1}, {1, 1}, {5, 1}};
    auto s = cumulate(k);
    for (auto& e : s) {
        e.kappa_tilde = 5.0;
    }
    for (double x : optimal_ratios(s, 0.4)) {
        EXPECT_NEAR(x, std::pow(0.4, 1.0 / 3.0), 1e-12);
    }
    double prod = 1.0;
    for (double x : r) {
        prod *= x;
    }
    EXPECT_NEAR(prod, 0.4, 1e-9);
}

TEST(OptimalRatio, ClosedFormTwoLayers) {
    const auto r = optimal_ratios(from_log_kt({4.0, 2.0}), 0.5);
    EXPECT_NEAR(r[0], std::pow(0.5, 2.0 / 3.0), 1e-12);
    EXPECT_NEAR(r[1], std::pow(0.5, 1.0 / 3.0), 1e-12);
    const auto p = plan_optimal_ratio(from_log_kt({4.0, 2.0}), 32, 0.5);
    EXPECT_EQ(p.layers[0].d_c, static_cast<std::size_t>(std::lround(32 * std::pow(0.5, 2.0 / 3.0))));
}

TEST(OptimalRatio, Inapplicable) {
    EXPECT_EQ(kind_of([] { optimal_ratios(from_log_kt({2.0, 0.0}), 0.5); }), ErrorKind::inapplicable);
    const std::vector<std::pair<double, double>> k{{kInf, 1}, {2, 1}};
    EXPECT_EQ(kind_of([&] { optimal_ratios(cumulate(k), 0.5); }), ErrorKind::inapplicable);
}

TEST(PlanJson, RoundTripWithInfinity) {
    const std::vector<std::pair<double, double>> k{{kInf, 1}, {4, 1}, {2, 1}};
    const auto p = plan_progressive(cumulate(k), 32, 32, 8, kInf);
    const auto j = to_json(p);
    EXPECT_EQ(j["threshold"], "inf");
    EXPECT_EQ(j["layers"][0]["kappa_tilde"], "inf");
    EXPECT_EQ(plan_from_json(j), p);
    EXPECT_EQ(plan_from_json(nlohmann::json::parse(j.dump())), p);
}

TEST(PlanJson, InconsistentEntryRejected) {
    auto j = to_json(plan_uniform(from_log_kt({3, 2, 1}), 32, 12, kInf));
    j["layers"][1]["d_c"] = 40;
    EXPECT_EQ(kind_of([&] { plan_from_json(j); }), ErrorKind::validation);
    j = to_json(plan_uniform(from_log_kt({3, 2, 1}), 32, 12, kInf));
    j["layers"][1].erase("skip");
    EXPECT_EQ(kind_of([&] { plan_from_json(j); }), ErrorKind::format);
    j = to_json(plan_uniform(from_log_kt({3, 2, 1}), 32, 12, kInf));
    j["strategy"] = "random";
    EXPECT_EQ(kind_of([&] { plan_from_json(j); }), ErrorKind::validation);
}

TEST(PlanRatio, RetainedRatioCountsDimensions) {
    const auto p = plan_uniform(from_log_kt({3, 2, 1, 0.5}), 32, 8, std::exp(2.5));
    // layer 0 skipped (32) + three at 8
    EXPECT_EQ(p.retained_dims(), 56u);
    EXPECT_DOUBLE_EQ(p.retained_ratio(), 56.0 / 128.0);
}
