// SPDX-License-Identifier: Apache-2.0

#include "kvsvd/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kvsvd/error.hpp"

namespace kvsvd {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

nlohmann::json real_or_inf(double x) {
    if (std::isinf(x)) {
        return "inf";
    }
    return x;
}

double parse_real_or_inf(const nlohmann::json& j) {
    if (j.is_string()) {
        if (j.get<std::string>() == "inf") {
            return kInf;
        }
        fail(ErrorKind::format, "expected a number or \"inf\", got " + j.dump());
    }
    return j.get<double>();
}

std::size_t clamp_dim(double raw, std::size_t lo, std::size_t hi, std::size_t align) {
    auto d = static_cast<std::size_t>(std::max<long>(1, std::lround(raw)));
    if (align > 1) {
        d = (d + align - 1) / align * align;
    }
    return std::clamp(d, lo, hi);
}

} // namespace

std::string to_string(Strategy s) {
    switch (s) {
    case Strategy::progressive: return "progressive";
    case Strategy::uniform: return "uniform";
    case Strategy::variance_fraction: return "variance-fraction";
    case Strategy::optimal_ratio: return "optimal-ratio";
    case Strategy::custom: return "custom";
    }
    return "custom";
}

Strategy strategy_from_string(const std::string& s) {
    for (Strategy k : {Strategy::progressive, Strategy::uniform, Strategy::variance_fraction, Strategy::optimal_ratio,
                       Strategy::custom}) {
        if (to_string(k) == s) {
            return k;
        }
    }
    fail(ErrorKind::validation, "unknown strategy: " + s);
}

double CompressionPlan::retained_ratio() const {
    if (layers.empty() || full_dim == 0) {
        return 1.0;
    }
    return static_cast<double>(retained_dims()) / static_cast<double>(layers.size() * full_dim);
}

std::size_t CompressionPlan::retained_dims() const {
    std::size_t total = 0;
    for (const auto& e : layers) {
        total += e.d_c;
    }
    return total;
}

nlohmann::json to_json(const CompressionPlan& plan) {
    auto layers = nlohmann::json::array();
    for (const auto& e : plan.layers) {
        layers.push_back({{"l", e.layer}, {"skip", e.skip}, {"d_c", e.d_c}, {"kappa_tilde", real_or_inf(e.kappa_tilde)}});
    }
    return {
        {"strategy", to_string(plan.strategy)},
        {"full_dim", plan.full_dim},
        {"d_max", plan.d_max},
        {"d_min", plan.d_min},
        {"threshold", real_or_inf(plan.threshold)},
        {"layers", std::move(layers)},
    };
}

CompressionPlan plan_from_json(const nlohmann::json& j) {
    CompressionPlan p;
    try {
        p.strategy = strategy_from_string(j.at("strategy").get<std::string>());
        p.full_dim = j.at("full_dim").get<std::size_t>();
        p.d_max = j.at("d_max").get<std::size_t>();
        p.d_min = j.at("d_min").get<std::size_t>();
        p.threshold = parse_real_or_inf(j.at("threshold"));
        for (const auto& e : j.at("layers")) {
            p.layers.push_back({e.at("l").get<std::size_t>(), e.at("skip").get<bool>(), e.at("d_c").get<std::size_t>(),
                                parse_real_or_inf(e.at("kappa_tilde"))});
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("invalid plan json: ") + e.what());
    }
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        const auto& e = p.layers[i];
        if (e.layer != i || e.d_c == 0 || e.d_c > p.full_dim || (e.skip && e.d_c != p.full_dim)) {
            fail(ErrorKind::validation, "plan entry for layer " + std::to_string(i) + " is inconsistent");
        }
    }
    return p;
}

std::vector<LayerSensitivity> cumulate(std::span<const std::pair<double, double>> kappas) {
    std::vector<LayerSensitivity> out(kappas.size());
    double running = 1.0;
    for (std::size_t i = kappas.size(); i-- > 0;) {
        const auto [kk, kv] = kappas[i];
        running *= kk * kv;
        out[i] = {i, kk, kv, running};
    }
    return out;
}

std::vector<LayerSensitivity> layer_sensitivities(const ModelWeights& w) {
    std::vector<std::pair<double, double>> kappas(w.layers.size());
    for (std::size_t l = w.layers.size(); l-- > 0;) {
        kappas[l] = {condition_number(w.layers[l].w_k), condition_number(w.layers[l].w_v)};
    }
    return cumulate(kappas);
}

double progressive_dim(double log_kt, double log_min, double log_max, std::size_t d_max, std::size_t d_min) {
    const double range = log_max - log_min;
    const double t = range < 1e-9 ? 0.0 : (log_max - log_kt) / range;
    const double dmax = static_cast<double>(d_max);
    return dmax * (1.0 - t * (1.0 - static_cast<double>(d_min) / dmax));
}

CompressionPlan plan_progressive(std::span<const LayerSensitivity> s, std::size_t full_dim, std::size_t d_max,
                                 std::size_t d_min, double threshold, ProgressiveOptions options) {
    require(d_min >= 1 && d_min <= d_max && d_max <= full_dim, "need 1 <= d_min <= d_max <= h_kv * d");
    require(threshold > 0.0, "threshold must be positive");
    require(options.align >= 1, "alignment must be positive");

    double log_min = kInf;
    double log_max = -kInf;
    for (const auto& e : s) {
        if (std::isfinite(e.kappa_tilde)) {
            const double lk = std::log(e.kappa_tilde);
            log_min = std::min(log_min, lk);
            log_max = std::max(log_max, lk);
        }
    }

    CompressionPlan plan;
    plan.strategy = Strategy::progressive;
    plan.full_dim = full_dim;
    plan.d_max = d_max;
    plan.d_min = d_min;
    plan.threshold = threshold;
    for (const auto& e : s) {
        PlanEntry entry{e.layer, false, full_dim, e.kappa_tilde};
        // An infinite kappa_tilde exceeds every finite threshold.
        if (e.kappa_tilde > threshold || (std::isinf(e.kappa_tilde) && std::isfinite(threshold))) {
            entry.skip = true;
        } else if (std::isinf(e.kappa_tilde)) {
            entry.d_c = d_max;
        } else {
            const double raw = progressive_dim(std::log(e.kappa_tilde), log_min, log_max, d_max, d_min);
            entry.d_c = clamp_dim(raw, d_min, d_max, options.align);
        }
        plan.layers.push_back(entry);
    }
    return plan;
}

CompressionPlan plan_uniform(std::span<const LayerSensitivity> s, std::size_t full_dim, std::size_t d_c,
                             double threshold) {
    require(d_c >= 1 && d_c <= full_dim, "uniform d_c must lie in [1, h_kv * d]");
    require(threshold > 0.0, "threshold must be positive");
    CompressionPlan plan;
    plan.strategy = Strategy::uniform;
    plan.full_dim = full_dim;
    plan.d_max = d_c;
    plan.d_min = d_c;
    plan.threshold = threshold;
    for (const auto& e : s) {
        const bool skip = e.kappa_tilde > threshold || (std::isinf(e.kappa_tilde) && std::isfinite(threshold));
        plan.layers.push_back({e.layer, skip, skip ? full_dim : d_c, e.kappa_tilde});
    }
    return plan;
}

std::size_t solve_dmin(std::span<const LayerSensitivity> s, std::size_t full_dim, std::size_t d_max,
                       double threshold, double target_ratio, ProgressiveOptions options) {
    require(target_ratio > 0.0 && target_ratio <= 1.0, "target ratio must lie in (0, 1]");
    require(d_max >= 1 && d_max <= full_dim, "d_max must lie in [1, h_kv * d]");
    auto ratio_at = [&](std::size_t d_min) {
        return plan_progressive(s, full_dim, d_max, d_min, threshold, options).retained_ratio();
    };
    // The retained ratio is nondecreasing in d_min, so bisect on the
    // predicate ratio <= target.
    const double floor_ratio = ratio_at(1);
    if (floor_ratio > target_ratio) {
        std::ostringstream os;
        os << "target ratio " << target_ratio << " unreachable; d_min = 1 keeps " << floor_ratio;
        throw InfeasibleTargetError(os.str(), floor_ratio);
    }
    std::size_t lo = 1;     // satisfies
    std::size_t hi = d_max; // candidate upper end
    if (ratio_at(hi) <= target_ratio) {
        return hi;
    }
    while (hi - lo > 1) {
        const std::size_t mid = lo + (hi - lo) / 2;
        if (ratio_at(mid) <= target_ratio) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return lo;
}

std::size_t variance_rank(std::span<const double> sigma, double alpha) {
    require(alpha > 0.0 && alpha < 1.0, "variance fraction must lie in (0, 1)");
    require(!sigma.empty(), "empty spectrum");
    double total = 0.0;
    for (double x : sigma) {
        total += x * x;
    }
    if (total == 0.0) {
        return 1;
    }
    double running = 0.0;
    for (std::size_t k = 0; k < sigma.size(); ++k) {
        running += sigma[k] * sigma[k];
        // Relative slack absorbs rounding in ties like four equal values
        // out of eight against alpha = 0.5.
        if (running / total >= alpha - 1e-12) {
            return k + 1;
        }
    }
    return sigma.size();
}

CompressionPlan plan_variance_fraction(const ModelWeights& w, double alpha) {
    require(alpha > 0.0 && alpha < 1.0, "variance fraction must lie in (0, 1)");
    const auto sens = layer_sensitivities(w);
    CompressionPlan plan;
    plan.strategy = Strategy::variance_fraction;
    plan.full_dim = w.config.kv_dim();
    plan.d_max = 0;
    plan.d_min = plan.full_dim;
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const std::size_t kk = variance_rank(svd(w.layers[l].w_k).sigma, alpha);
        const std::size_t kv = variance_rank(svd(w.layers[l].w_v).sigma, alpha);
        const std::size_t d_c = std::max(kk, kv);
        plan.d_max = std::max(plan.d_max, d_c);
        plan.d_min = std::min(plan.d_min, d_c);
        plan.layers.push_back({l, false, d_c, sens[l].kappa_tilde});
    }
    return plan;
}

std::vector<double> optimal_ratios(std::span<const LayerSensitivity> s, double target) {
    require(target > 0.0 && target < 1.0, "target product ratio must lie in (0, 1)");
    double log_sum = 0.0;
    for (const auto& e : s) {
        if (!std::isfinite(e.kappa_tilde) || e.kappa_tilde <= 1.0) {
            fail(ErrorKind::inapplicable, "optimal-ratio allocator needs every kappa_tilde finite and > 1 (layer " +
                                              std::to_string(e.layer) + ")");
        }
        log_sum += std::log(e.kappa_tilde);
    }
    std::vector<double> r;
    r.reserve(s.size());
    for (const auto& e : s) {
        r.push_back(std::pow(target, std::log(e.kappa_tilde) / log_sum));
    }
    return r;
}

CompressionPlan plan_optimal_ratio(std::span<const LayerSensitivity> s, std::size_t full_dim, double target) {
    const auto ratios = optimal_ratios(s, target);
    CompressionPlan plan;
    plan.strategy = Strategy::optimal_ratio;
    plan.full_dim = full_dim;
    plan.d_max = 0;
    plan.d_min = full_dim;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const std::size_t d_c = clamp_dim(ratios[i] * static_cast<double>(full_dim), 1, full_dim, 1);
        plan.d_max = std::max(plan.d_max, d_c);
        plan.d_min = std::min(plan.d_min, d_c);
        plan.layers.push_back({s[i].layer, false, d_c, s[i].kappa_tilde});
    }
    return plan;
}

} // namespace kvsvd
