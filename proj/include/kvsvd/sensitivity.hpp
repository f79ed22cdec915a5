// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvsvd/model.hpp"

namespace kvsvd {

struct LayerSensitivity {
    std::size_t layer = 0;
    double kappa_k = 1.0;
    double kappa_v = 1.0;
    /// Product of kappa_k * kappa_v over this layer and every deeper one.
    double kappa_tilde = 1.0;
};

enum class Strategy { progressive, uniform, variance_fraction, optimal_ratio, custom };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

struct PlanEntry {
    std::size_t layer = 0;
    bool skip = false;
    std::size_t d_c = 0;
    double kappa_tilde = 1.0;

    bool operator==(const PlanEntry&) const = default;
};

/// Per-layer compressed dimensions. Skipped layers keep the full
/// h_kv * d cache and record d_c == full_dim.
struct CompressionPlan {
    Strategy strategy = Strategy::progressive;
    std::size_t full_dim = 0;
    std::size_t d_max = 0;
    std::size_t d_min = 0;
    double threshold = std::numeric_limits<double>::infinity();
    std::vector<PlanEntry> layers;

    /// sum_l d_c^l / (L * full_dim).
    double retained_ratio() const;
    std::size_t retained_dims() const;

    bool operator==(const CompressionPlan&) const = default;
};

nlohmann::json to_json(const CompressionPlan& plan);
CompressionPlan plan_from_json(const nlohmann::json& j);

/// Computed back to front so kappa_tilde is available for every layer
/// before any planning; an infinite condition number propagates upward.
std::vector<LayerSensitivity> layer_sensitivities(const ModelWeights& w);

/// Same, from precomputed per-layer (kappa_k, kappa_v) pairs.
std::vector<LayerSensitivity> cumulate(std::span<const std::pair<double, double>> kappas);

struct ProgressiveOptions {
    /// Round each d_c up to a multiple of this (1 = plain rounding only).
    std::size_t align = 1;
};

/// Dimension schedule
///   d_c = d_max * (1 - t_l * (1 - d_min / d_max)),
///   t_l = (max log kt - log kt_l) / (max log kt - min log kt),
/// with min/max over every layer with a finite kappa_tilde, rounded to the
/// nearest integer and clamped to [d_min, d_max]. Layers with
/// kappa_tilde > threshold are skipped. A log range below 1e-9 sets t = 0.
CompressionPlan plan_progressive(std::span<const LayerSensitivity> s, std::size_t full_dim, std::size_t d_max,
                                 std::size_t d_min, double threshold, ProgressiveOptions options = {});

/// Unrounded d_c for one layer; exposed for endpoint checks.
double progressive_dim(double log_kt, double log_min, double log_max, std::size_t d_max, std::size_t d_min);

CompressionPlan plan_uniform(std::span<const LayerSensitivity> s, std::size_t full_dim, std::size_t d_c,
                             double threshold);

/// Largest d_min in [1, d_max] whose progressive plan keeps at most
/// `target_ratio` of the cache, so d_min + 1 (when <= d_max) exceeds it.
/// Throws InfeasibleTargetError carrying the d_min = 1 ratio otherwise.
std::size_t solve_dmin(std::span<const LayerSensitivity> s, std::size_t full_dim, std::size_t d_max,
                       double threshold, double target_ratio, ProgressiveOptions options = {});

/// Smallest k with sum_{i<k} sigma_i^2 / sum sigma_i^2 >= alpha.
std::size_t variance_rank(std::span<const double> sigma, double alpha);

CompressionPlan plan_variance_fraction(const ModelWeights& w, double alpha);

/// Unrounded optimal ratios R^(log kt_i / sum_j log kt_j). Throws
/// inapplicable when any kappa_tilde is <= 1 or infinite.
std::vector<double> optimal_ratios(std::span<const LayerSensitivity> s, double target);
CompressionPlan plan_optimal_ratio(std::span<const LayerSensitivity> s, std::size_t full_dim, double target);

} // namespace kvsvd
