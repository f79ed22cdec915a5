// SPDX-License-Identifier: Apache-2.0

#include "kvsvd/experiments.hpp"

#include <cmath>

#include "kvsvd/error.hpp"
#include "kvsvd/rng.hpp"

namespace kvsvd {

EvalSet make_eval_set(const ModelConfig& cfg, std::size_t num_prompts, std::size_t prompt_len, std::size_t steps,
                      std::uint64_t seed) {
    require(num_prompts > 0 && prompt_len > 0 && steps > 0, "eval set needs prompts, length and steps");
    require(prompt_len + steps <= cfg.max_seq_len, "eval sequence longer than max_seq_len");
    Rng rng(seed);
    EvalSet set;
    set.steps = steps;
    for (std::size_t p = 0; p < num_prompts; ++p) {
        std::vector<TokenId> prompt(prompt_len);
        for (auto& t : prompt) {
            t = static_cast<TokenId>(rng.below(cfg.vocab_size));
        }
        set.prompts.push_back(std::move(prompt));
    }
    return set;
}

KlEvaluator::KlEvaluator(const ModelWeights& reference, EvalSet set, DecodeOptions options)
    : reference_(&reference), set_(std::move(set)), options_(options) {
    require(!set_.prompts.empty(), "empty eval set");
    for (const auto& prompt : set_.prompts) {
        reference_runs_.push_back(decode(reference, prompt, set_.steps, options_));
    }
}

EvalScore KlEvaluator::score(ModelView candidate) const {
    if (!(candidate.config() == reference_->config)) {
        fail(ErrorKind::validation, "candidate configuration differs from the reference");
    }
    double kl = 0.0;
    std::size_t matches = 0;
    std::size_t count = 0;
    for (std::size_t p = 0; p < set_.prompts.size(); ++p) {
        const auto& ref = reference_runs_[p];
        const auto cand = decode_forced(candidate, set_.prompts[p], ref.tokens, options_);
        for (std::size_t s = 0; s < set_.steps; ++s) {
            kl += kl_divergence(ref.logits.row(s), cand.logits.row(s));
            matches += argmax(cand.logits.row(s)) == ref.tokens[s] ? 1 : 0;
            ++count;
        }
    }
    return {kl / static_cast<double>(count), static_cast<double>(matches) / static_cast<double>(count)};
}

CompressionPlan plan_custom(const ModelWeights& w, std::span<const std::size_t> dims) {
    const std::size_t full = w.config.kv_dim();
    require(dims.size() == w.config.num_layers, "one dimension per layer required");
    const auto sens = layer_sensitivities(w);
    CompressionPlan plan;
    plan.strategy = Strategy::custom;
    plan.full_dim = full;
    plan.d_max = 0;
    plan.d_min = full;
    for (std::size_t l = 0; l < dims.size(); ++l) {
        require(dims[l] >= 1 && dims[l] <= full, "custom d_c must lie in [1, h_kv * d]");
        plan.layers.push_back({l, dims[l] == full, dims[l], sens[l].kappa_tilde});
        plan.d_max = std::max(plan.d_max, dims[l]);
        plan.d_min = std::min(plan.d_min, dims[l]);
    }
    return plan;
}

CompressionPlan plan_progressive_at_ratio(std::span<const LayerSensitivity> s, std::size_t full_dim, double target,
                                          double threshold) {
    for (std::size_t d_max = full_dim; d_max >= 1; --d_max) {
        try {
            const std::size_t d_min = solve_dmin(s, full_dim, d_max, threshold, target);
            return plan_progressive(s, full_dim, d_max, d_min, threshold);
        } catch (const InfeasibleTargetError&) {
            if (d_max == 1) {
                throw;
            }
        }
    }
    fail(ErrorKind::infeasible, "no progressive plan reaches the target ratio");
}

double profile_single_layer(const ModelWeights& w, std::size_t layer, std::size_t d_c,
                            const std::function<double(ModelView)>& eval_fn) {
    require(layer < w.config.num_layers, "layer out of range");
    std::vector<std::size_t> dims(w.config.num_layers, w.config.kv_dim());
    dims[layer] = d_c;
    const auto cm = compress_model(w, plan_custom(w, dims));
    return eval_fn(cm);
}

double profile_single_layer(const ModelWeights& w, std::size_t layer, std::size_t d_c, const KlEvaluator& ev) {
    return profile_single_layer(w, layer, d_c, [&](ModelView m) { return ev.mean_kl(m); });
}

Matrix profile_grid(const ModelWeights& w, std::span<const std::size_t> dims, const KlEvaluator& ev) {
    Matrix grid(w.config.num_layers, dims.size());
    for (std::size_t l = 0; l < w.config.num_layers; ++l) {
        for (std::size_t c = 0; c < dims.size(); ++c) {
            grid(l, c) = profile_single_layer(w, l, dims[c], ev);
        }
    }
    return grid;
}

SignTest sign_test(std::span<const double> candidate, std::span<const double> baseline) {
    require(candidate.size() == baseline.size(), "sign test needs paired samples");
    SignTest t;
    for (std::size_t i = 0; i < candidate.size(); ++i) {
        if (candidate[i] < baseline[i]) {
            ++t.wins;
        } else if (candidate[i] > baseline[i]) {
            ++t.losses;
        } else {
            ++t.ties;
        }
    }
    const std::size_t n = t.wins + t.losses;
    double p = 0.0;
    for (std::size_t k = t.wins; k <= n; ++k) {
        const double log_choose = std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
                                  std::lgamma(static_cast<double>(n - k) + 1.0);
        p += std::exp(log_choose - static_cast<double>(n) * std::log(2.0));
    }
    t.p_value = n == 0 ? 1.0 : std::min(1.0, p);
    return t;
}

ModelConfig ExperimentSetup::config() const {
    return kvsvd::preset(preset);
}

SpectrumSpec ExperimentSetup::spectrum() const {
    return graded_spectrum(config().num_layers, sigma_max > 0.0 ? sigma_max : kDefaultSigmaMax,
                           shallow_decay > 0.0 ? shallow_decay : kDefaultShallowDecay,
                           deep_decay > 0.0 ? deep_decay : kDefaultDeepDecay);
}

std::uint64_t ExperimentSetup::model_seed(std::size_t i) const {
    return base_seed + i;
}

std::uint64_t ExperimentSetup::prompt_seed(std::size_t i) const {
    return splitmix64(base_seed + i) ^ 0x5eedULL;
}

namespace {

void finish(PairedExperiment& e) {
    std::vector<double> cand;
    std::vector<double> base;
    for (const auto& o : e.outcomes) {
        cand.push_back(o.candidate_kl);
        base.push_back(o.baseline_kl);
    }
    e.test = sign_test(cand, base);
    const double n = static_cast<double>(e.outcomes.size());
    for (std::size_t i = 0; i < cand.size(); ++i) {
        e.candidate_mean_kl += cand[i] / n;
        e.baseline_mean_kl += base[i] / n;
    }
}

template <class Fn>
void for_each_model(const ExperimentSetup& setup, Fn&& fn) {
    const ModelConfig cfg = setup.config();
    const SpectrumSpec spectrum = setup.spectrum();
    for (std::size_t i = 0; i < setup.num_models; ++i) {
        const auto w = generate_synthetic(cfg, spectrum, setup.model_seed(i));
        const KlEvaluator ev(w, make_eval_set(cfg, setup.num_prompts, setup.prompt_len, setup.steps,
                                              setup.prompt_seed(i)));
        fn(setup.model_seed(i), w, ev);
    }
}

} // namespace

nlohmann::json to_json(const PairedExperiment& e) {
    auto rows = nlohmann::json::array();
    for (const auto& o : e.outcomes) {
        rows.push_back({{"seed", o.seed},
                        {"candidate_kl", o.candidate_kl},
                        {"baseline_kl", o.baseline_kl},
                        {"candidate_ratio", o.candidate_ratio},
                        {"baseline_ratio", o.baseline_ratio}});
    }
    return {
        {"candidate", e.candidate},
        {"baseline", e.baseline},
        {"candidate_mean_kl", e.candidate_mean_kl},
        {"baseline_mean_kl", e.baseline_mean_kl},
        {"wins", e.test.wins},
        {"losses", e.test.losses},
        {"ties", e.test.ties},
        {"p_value", e.test.p_value},
        {"models", std::move(rows)},
    };
}

PairedExperiment progressive_vs_uniform(const ExperimentSetup& setup, double ratio) {
    require(ratio > 0.0 && ratio <= 1.0, "ratio must lie in (0, 1]");
    PairedExperiment e{"progressive", "uniform", {}, 0.0, 0.0, {}};
    for_each_model(setup, [&](std::uint64_t seed, const ModelWeights& w, const KlEvaluator& ev) {
        const std::size_t full = w.config.kv_dim();
        const auto sens = layer_sensitivities(w);
        const auto d_u = static_cast<std::size_t>(std::max(1L, std::lround(ratio * static_cast<double>(full))));
        const auto uniform = plan_uniform(sens, full, d_u, std::numeric_limits<double>::infinity());
        const auto progressive = plan_progressive_at_ratio(sens, full, uniform.retained_ratio());
        e.outcomes.push_back({seed, ev.mean_kl(compress_model(w, progressive)), ev.mean_kl(compress_model(w, uniform)),
                              progressive.retained_ratio(), uniform.retained_ratio()});
    });
    finish(e);
    return e;
}

ShallowVsDeep shallow_vs_deep(const ModelWeights& w, double fraction, double layer_ratio, const KlEvaluator& ev) {
    require(fraction > 0.0 && fraction <= 1.0, "fraction must lie in (0, 1]");
    require(layer_ratio > 0.0 && layer_ratio <= 1.0, "layer ratio must lie in (0, 1]");
    const std::size_t L = w.config.num_layers;
    const std::size_t full = w.config.kv_dim();
    const auto d = static_cast<std::size_t>(std::max(1L, std::lround(layer_ratio * static_cast<double>(full))));
    const auto blocks = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(L) - 1e-9));

    std::vector<std::size_t> dims(L, full);
    dims[0] = d;
    ShallowVsDeep r;
    r.layer0 = plan_custom(w, dims);
    for (std::size_t l = 0; l < std::max<std::size_t>(blocks, 1); ++l) {
        dims[l] = d;
    }
    r.shallow = plan_custom(w, dims);
    r.progressive = plan_progressive_at_ratio(layer_sensitivities(w), full, r.shallow.retained_ratio());
    r.layer0_score = ev.score(compress_model(w, r.layer0));
    r.shallow_score = ev.score(compress_model(w, r.shallow));
    r.progressive_score = ev.score(compress_model(w, r.progressive));
    return r;
}

nlohmann::json to_json(const ShallowVsDeep& r) {
    auto variant = [](const CompressionPlan& p, const EvalScore& s) {
        return nlohmann::json{{"retained_ratio", p.retained_ratio()},
                              {"retained_dims", p.retained_dims()},
                              {"mean_kl", s.mean_kl},
                              {"top1_agreement", s.agreement},
                              {"plan", to_json(p)}};
    };
    return {{"layer0", variant(r.layer0, r.layer0_score)},
            {"shallow_blocks", variant(r.shallow, r.shallow_score)},
            {"progressive", variant(r.progressive, r.progressive_score)}};
}

PairedExperiment progressive_vs_shallow(const ExperimentSetup& setup, double fraction, double layer_ratio) {
    PairedExperiment e{"progressive", "shallow_blocks", {}, 0.0, 0.0, {}};
    for_each_model(setup, [&](std::uint64_t seed, const ModelWeights& w, const KlEvaluator& ev) {
        const auto r = shallow_vs_deep(w, fraction, layer_ratio, ev);
        e.outcomes.push_back({seed, r.progressive_score.mean_kl, r.shallow_score.mean_kl,
                              r.progressive.retained_ratio(), r.shallow.retained_ratio()});
    });
    finish(e);
    return e;
}

Matrix ratio_sweep(const ExperimentSetup& setup, std::span<const double> ratios) {
    Matrix grid(setup.num_models, ratios.size());
    std::size_t row = 0;
    for_each_model(setup, [&](std::uint64_t, const ModelWeights& w, const KlEvaluator& ev) {
        const auto sens = layer_sensitivities(w);
        for (std::size_t c = 0; c < ratios.size(); ++c) {
            const auto plan = plan_progressive_at_ratio(sens, w.config.kv_dim(), ratios[c]);
            grid(row, c) = ev.mean_kl(compress_model(w, plan));
        }
        ++row;
    });
    return grid;
}

} // namespace kvsvd
