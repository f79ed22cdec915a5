// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "fixtures.hpp"
#include "kvsvd/compressor.hpp"
#include "kvsvd/container.hpp"
#include "kvsvd/experiments.hpp"
#include "kvsvd/runtime.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace kvsvd;
using fixtures::tiny;
using testutil::kind_of;
using testutil::scratch;
namespace fs = std::filesystem;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

CompressionPlan uniform_plan(const ModelWeights& w, std::size_t d_c) {
    return plan_uniform(layer_sensitivities(w), w.config.kv_dim(), d_c, kInf);
}

ModelWeights decaying(std::size_t layers = 2, bool rope = true, std::uint64_t seed = 5) {
    return generate_synthetic(tiny(layers, rope), {1.0, 0.9, {}}, seed);
}

} // namespace

TEST(CompressLayer, ShapesAndOrthonormalDownProjection) {
    const auto w = decaying();
    const auto cl = compress_layer(w.layers[0], 12, w.config);
    EXPECT_EQ(cl.key_down.rows(), 64u);
    EXPECT_EQ(cl.key_down.cols(), 12u);
    ASSERT_EQ(cl.key_up.size(), 2u);
    EXPECT_EQ(cl.key_up[0].rows(), 12u);
    EXPECT_EQ(cl.key_up[0].cols(), 16u);
    ASSERT_EQ(cl.fused_query.size(), 4u);
    EXPECT_EQ(cl.fused_query[0].cols(), 12u);
    ASSERT_EQ(cl.fused_output.size(), 4u);
    EXPECT_EQ(cl.fused_output[0].rows(), 12u);
    EXPECT_EQ(cl.fused_output[0].cols(), 64u);
    const Matrix gram = oracle::triple_loop(cl.key_down.transpose(), cl.key_down);
    EXPECT_LT(oracle::max_abs_diff(gram, Matrix::identity(12)), 1e-12);
}

TEST(CompressLayer, FullRankIsExact) {
    const auto w = decaying();
    const auto cl = compress_layer(w.layers[1], 32, w.config);
    EXPECT_LT(oracle::max_abs_diff(approx_key_weight(cl), w.layers[1].w_k), 1e-12);
    EXPECT_LT(oracle::max_abs_diff(approx_value_weight(cl), w.layers[1].w_v), 1e-12);
}

TEST(CompressLayer, TrueRankReconstructsExactly) {
    auto w = decaying();
    Rng r(17);
    w.layers[0].w_k = oracle::triple_loop(oracle::gaussian(r, 64, 8), oracle::gaussian(r, 8, 32));
    const auto cl = compress_layer(w.layers[0], 8, w.config);
    EXPECT_LT(frobenius_rel_error(w.layers[0].w_k, approx_key_weight(cl)), 1e-10);
}

TEST(CompressLayer, RangeChecked) {
    const auto w = decaying();
    EXPECT_EQ(kind_of([&] { compress_layer(w.layers[0], 0, w.config); }), ErrorKind::contract);
    EXPECT_EQ(kind_of([&] { compress_layer(w.layers[0], 33, w.config); }), ErrorKind::contract);
}

TEST(CompressLayer, KeyErrorWithinNextSingularValue) {
    const auto w = decaying();
    const auto& wk = w.layers[0].w_k;
    const auto sigma = svd(wk).sigma;
    Rng r(2024);
    for (std::size_t d_c : {1u, 5u, 16u, 31u}) {
        const Matrix approx = approx_key_weight(compress_layer(w.layers[0], d_c, w.config));
        double worst = 0.0;
        for (int s = 0; s < 1000; ++s) {
            std::vector<double> x(64);
            for (double& v : x) {
                v = r.normal();
            }
            const auto a = vecmat(x, wk);
            const auto b = vecmat(x, approx);
            double err = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) {
                err += (a[i] - b[i]) * (a[i] - b[i]);
            }
            worst = std::max(worst, std::sqrt(err) / norm2(x));
        }
        EXPECT_LE(worst, sigma[d_c] * (1 + 1e-9) + 1e-12) << d_c;
    }
}

TEST(CompressLayer, FrobeniusErrorShrinksWithDc) {
    const auto w = decaying();
    double prev = kInf;
    for (std::size_t d_c = 1; d_c <= 32; ++d_c) {
        const double e = frobenius_rel_error(w.layers[0].w_v, approx_value_weight(compress_layer(w.layers[0], d_c, w.config)));
        EXPECT_LE(e, prev + 1e-12) << d_c;
        prev = e;
    }
    EXPECT_LT(prev, 1e-12);
}

TEST(CompressLayer, FusedFactorsMatchTheirDefinition) {
    const auto w = decaying();
    const auto& c = w.config;
    const auto cl = compress_layer(w.layers[0], 10, c);
    for (std::size_t j = 0; j < c.num_heads; ++j) {
        const std::size_t g = c.kv_head_of(j);
        const Matrix wq_j = w.layers[0].w_q.block(0, j * 16, 64, 16);
        EXPECT_LT(oracle::max_abs_diff(cl.fused_query[j], oracle::triple_loop(wq_j, cl.key_up[g].transpose())), 1e-12);
        const Matrix wo_j = w.layers[0].w_o.block(j * 16, 0, 16, 64);
        EXPECT_LT(oracle::max_abs_diff(cl.fused_output[j], oracle::triple_loop(cl.value_up[g], wo_j)), 1e-12);
    }
}

TEST(CompressModel, SkippedLayersUntouchedAndRatioRecounted) {
    const auto w = decaying(3);
    const std::vector<std::size_t> dims{32, 8, 16};
    const auto plan = plan_custom(w, dims);
    const auto cm = compress_model(w, plan);
    EXPECT_FALSE(cm.is_compressed(0));
    EXPECT_TRUE(cm.is_compressed(1));
    EXPECT_EQ(std::get<LayerWeights>(cm.layers[0]), w.layers[0]);
    EXPECT_DOUBLE_EQ(cm.retained_ratio(), (32.0 + 8.0 + 16.0) / 96.0);
    EXPECT_DOUBLE_EQ(cm.retained_ratio(), plan.retained_ratio());
    const auto ratios = cm.layer_ratios();
    EXPECT_DOUBLE_EQ(ratios[1], 0.25);
}

TEST(CompressModel, MismatchedPlanRejected) {
    const auto w = decaying(2);
    const auto other = decaying(3);
    EXPECT_EQ(kind_of([&] { compress_model(w, uniform_plan(other, 8)); }), ErrorKind::validation);
}

TEST(CompressModel, AllSkippedPlanGivesBitwiseIdenticalLogits) {
    const auto w = decaying(2);
    const auto plan = plan_uniform(layer_sensitivities(w), 32, 8, 0.5);
    const auto cm = compress_model(w, plan);
    const auto prompt = fixtures::random_tokens(w.config, 6, 3);
    const auto a = decode(w, prompt, 10);
    const auto b = decode(cm, prompt, 10);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_EQ(a.logits, b.logits);
}

TEST(CompressModel, FullRankIsLossless) {
    const auto w = generate_synthetic(tiny(2, true), {1.5, 0.95, {}}, 8);
    const auto cm = compress_model(w, uniform_plan(w, 32));
    const auto prompt = fixtures::random_tokens(w.config, 8, 4);
    const auto report = decode_compare(w, cm, prompt, 40);
    EXPECT_LT(report.max_abs_logit_diff, 1e-8);
    EXPECT_EQ(report.reference_tokens, report.candidate_tokens);
}

TEST(CompressedSerialization, RoundTripBitExact) {
    const auto w = decaying(3);
    const auto cm = compress_model(w, plan_custom(w, std::vector<std::size_t>{32, 6, 20}));
    const auto dir = scratch("cm_roundtrip");
    save_compressed(cm, dir);
    EXPECT_TRUE(is_compressed_container(dir));
    EXPECT_EQ(load_compressed(dir), cm);
    fs::remove_all(dir);
}

TEST(CompressedSerialization, PlanDimMismatchIsValidation) {
    const auto w = decaying(2);
    const auto cm = compress_model(w, uniform_plan(w, 8));
    const auto dir = scratch("cm_mismatch");
    save_compressed(cm, dir);
    auto header = read_json_file(dir / "config.json");
    header["plan"]["layers"][0]["d_c"] = 10;
    write_text_file(dir / "config.json", header.dump());
    EXPECT_EQ(kind_of([&] { load_compressed(dir); }), ErrorKind::validation);
    fs::remove_all(dir);
}

TEST(CompressedSerialization, WrongContainerKindIsFormat) {
    const auto w = decaying(2);
    const auto plain = scratch("cm_plain");
    const auto comp = scratch("cm_comp");
    save_model(w, plain);
    save_compressed(compress_model(w, uniform_plan(w, 8)), comp);
    EXPECT_FALSE(is_compressed_container(plain));
    EXPECT_EQ(kind_of([&] { load_compressed(plain); }), ErrorKind::format);
    EXPECT_EQ(kind_of([&] { load_model(comp); }), ErrorKind::format);
    fs::remove_all(plain);
    fs::remove_all(comp);
}

TEST(CompressedSerialization, MissingFactorIsNamed) {
    const auto w = decaying(2);
    const auto dir = scratch("cm_missing");
    save_compressed(compress_model(w, uniform_plan(w, 8)), dir);
    auto header = read_json_file(dir / "config.json");
    for (auto& t : header["tensors"]) {
        if (t["name"] == "layers.1.A.1") {
            t["name"] = "layers.1.A.9";
        }
    }
    write_text_file(dir / "config.json", header.dump());
    try {
        load_compressed(dir);
        FAIL() << "no exception";
    } catch (const MissingTensorError& e) {
        EXPECT_EQ(e.name(), "layers.1.A.1");
    }
    fs::remove_all(dir);
}
