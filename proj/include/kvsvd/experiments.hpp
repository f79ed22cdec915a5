// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvsvd/compressor.hpp"
#include "kvsvd/model.hpp"
#include "kvsvd/runtime.hpp"
#include "kvsvd/sensitivity.hpp"

namespace kvsvd {

/// Seeded random prompts over the full vocabulary.
struct EvalSet {
    std::vector<std::vector<TokenId>> prompts;
    std::size_t steps = 0;
};

EvalSet make_eval_set(const ModelConfig& cfg, std::size_t num_prompts, std::size_t prompt_len, std::size_t steps,
                      std::uint64_t seed);

struct EvalScore {
    double mean_kl = 0.0;
    double agreement = 1.0;
};

/// Scores candidates against a fixed reference model. The reference
/// greedy continuations are computed once; candidates are teacher-forced
/// on them, so every candidate sees the same contexts.
class KlEvaluator {
public:
    KlEvaluator(const ModelWeights& reference, EvalSet set, DecodeOptions options = {});

    EvalScore score(ModelView candidate) const;
    double mean_kl(ModelView candidate) const { return score(candidate).mean_kl; }
    const EvalSet& eval_set() const { return set_; }

private:
    const ModelWeights* reference_;
    EvalSet set_;
    DecodeOptions options_;
    std::vector<DecodeResult> reference_runs_;
};

/// Plan from explicit per-layer dims; a dim equal to h_kv d skips the layer.
CompressionPlan plan_custom(const ModelWeights& w, std::span<const std::size_t> dims);

/// Progressive plan with the largest feasible d_max (scanning down from
/// h_kv d) and, for it, the largest d_min keeping at most `target` of the
/// cache. Throws InfeasibleTargetError if no d_max works.
CompressionPlan plan_progressive_at_ratio(std::span<const LayerSensitivity> s, std::size_t full_dim, double target,
                                          double threshold = std::numeric_limits<double>::infinity());

/// Compresses only `layer` at `d_c`, leaving every other layer untouched,
/// and returns eval_fn of the result.
double profile_single_layer(const ModelWeights& w, std::size_t layer, std::size_t d_c,
                            const std::function<double(ModelView)>& eval_fn);
double profile_single_layer(const ModelWeights& w, std::size_t layer, std::size_t d_c, const KlEvaluator& ev);

/// layers x dims grid of profile_single_layer scores.
Matrix profile_grid(const ModelWeights& w, std::span<const std::size_t> dims, const KlEvaluator& ev);

struct SignTest {
    std::size_t wins = 0;   // candidate < baseline
    std::size_t losses = 0; // candidate > baseline
    std::size_t ties = 0;
    /// One-sided P(X >= wins), X ~ Binomial(wins + losses, 1/2); ties dropped.
    double p_value = 1.0;
};

SignTest sign_test(std::span<const double> candidate, std::span<const double> baseline);

/// Shared settings for the seeded multi-model experiments.
struct ExperimentSetup {
    std::string preset = "toy-deep";
    double sigma_max = 0.0; // 0 selects kDefaultSigmaMax
    double shallow_decay = 0.0; // 0 selects kDefaultShallowDecay
    double deep_decay = 0.0;    // 0 selects kDefaultDeepDecay
    std::size_t num_models = 20;
    std::uint64_t base_seed = 1;
    std::size_t num_prompts = 4;
    std::size_t prompt_len = 8;
    std::size_t steps = 32;

    ModelConfig config() const;
    SpectrumSpec spectrum() const;
    std::uint64_t model_seed(std::size_t i) const;
    std::uint64_t prompt_seed(std::size_t i) const;
};

/// Substrate defaults for the graded toy experiments: every projection's
/// spectrum decays geometrically, fastest in layer 0 and flat at the last.
inline constexpr double kDefaultSigmaMax = 2.0;
inline constexpr double kDefaultShallowDecay = 0.97;
inline constexpr double kDefaultDeepDecay = 1.0;

struct PairedOutcome {
    std::uint64_t seed = 0;
    double candidate_kl = 0.0;
    double baseline_kl = 0.0;
    double candidate_ratio = 0.0;
    double baseline_ratio = 0.0;
};

struct PairedExperiment {
    std::string candidate;
    std::string baseline;
    std::vector<PairedOutcome> outcomes;
    double candidate_mean_kl = 0.0;
    double baseline_mean_kl = 0.0;
    SignTest test;
};

nlohmann::json to_json(const PairedExperiment& e);

/// Progressive (candidate) vs uniform (baseline) at retained ratio `ratio`;
/// the uniform d_c is round(ratio * h_kv d) and the progressive plan keeps
/// at most the same number of dimensions.
PairedExperiment progressive_vs_uniform(const ExperimentSetup& setup, double ratio);

struct ShallowVsDeep {
    CompressionPlan layer0;
    CompressionPlan shallow;
    CompressionPlan progressive;
    EvalScore layer0_score;
    EvalScore shallow_score;
    EvalScore progressive_score;
};

/// Layer 0 alone and the first ceil(L * fraction) layers compressed to
/// round(layer_ratio * h_kv d), against the progressive plan that keeps at
/// most the shallow variant's total budget.
ShallowVsDeep shallow_vs_deep(const ModelWeights& w, double fraction, double layer_ratio, const KlEvaluator& ev);

nlohmann::json to_json(const ShallowVsDeep& r);

/// Progressive (candidate) vs shallow-block (baseline) over the setup's models.
PairedExperiment progressive_vs_shallow(const ExperimentSetup& setup, double fraction, double layer_ratio);

/// seeds x ratios grid of mean KL for progressive plans at each ratio.
Matrix ratio_sweep(const ExperimentSetup& setup, std::span<const double> ratios);

} // namespace kvsvd
