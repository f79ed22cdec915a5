// SPDX-License-Identifier: Apache-2.0

#include "kvsvd/bounds.hpp"

#include <algorithm>
#include <cmath>

#include "kvsvd/compressor.hpp"
#include "kvsvd/error.hpp"
#include "kvsvd/rng.hpp"
#include "kvsvd/runtime.hpp"

namespace kvsvd {

double lipschitz_constant(Activation a) {
    return a == Activation::silu ? kSiluLipschitz : 1.0;
}

double activate(Activation a, double x) {
    switch (a) {
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::identity: return x;
    case Activation::silu: return silu(x);
    }
    return x;
}

std::string to_string(Activation a) {
    switch (a) {
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
    case Activation::silu: return "silu";
    }
    return "relu";
}

Activation activation_from_string(const std::string& s) {
    for (Activation a : {Activation::relu, Activation::identity, Activation::silu}) {
        if (to_string(a) == s) {
            return a;
        }
    }
    fail(ErrorKind::validation, "unknown activation: " + s);
}

void ChainNetwork::validate() const {
    require(!weights.empty(), "chain needs at least one layer");
    for (std::size_t i = 1; i < weights.size(); ++i) {
        require(weights[i].cols() == weights[i - 1].rows(),
                "chain layer " + std::to_string(i + 1) + " does not compose with layer " + std::to_string(i));
    }
}

std::vector<double> ChainNetwork::forward(std::span<const double> x0) const {
    std::vector<double> x(x0.begin(), x0.end());
    for (const auto& w : weights) {
        x = matvec(w, x);
        for (double& v : x) {
            v = activate(activation, v);
        }
    }
    return x;
}

namespace {

std::vector<double> unit_gaussian(Rng& rng, std::size_t n) {
    std::vector<double> x(n);
    double norm = 0.0;
    while (norm == 0.0) {
        for (double& v : x) {
            v = rng.normal();
        }
        norm = norm2(x);
    }
    for (double& v : x) {
        v /= norm;
    }
    return x;
}

std::vector<double> difference(std::span<const double> a, std::span<const double> b) {
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        d[i] = a[i] - b[i];
    }
    return d;
}

} // namespace

ChainNetwork random_chain(std::size_t num_layers, std::size_t min_width, std::size_t max_width,
                          Activation activation, std::uint64_t seed) {
    require(num_layers >= 1 && min_width >= 1 && min_width <= max_width, "invalid chain shape");
    Rng rng(seed);
    std::vector<std::size_t> widths(num_layers + 1);
    for (auto& w : widths) {
        w = min_width + rng.below(max_width - min_width + 1);
    }
    ChainNetwork net;
    net.activation = activation;
    for (std::size_t i = 0; i < num_layers; ++i) {
        const double norm = 0.5 + 0.5 * rng.uniform();
        const double decay = 0.6 + 0.4 * rng.uniform();
        net.weights.push_back(spectral_matrix(widths[i + 1], widths[i], norm, decay, rng.next_u64()));
    }
    return net;
}

ChainNetwork graded_chain(std::size_t num_layers, std::size_t width, double sigma_max, double shallow, double deep,
                          Activation activation, std::uint64_t seed) {
    const auto spec = graded_spectrum(num_layers, sigma_max, shallow, deep);
    Rng rng(seed);
    ChainNetwork net;
    net.activation = activation;
    for (std::size_t i = 0; i < num_layers; ++i) {
        net.weights.push_back(spectral_matrix(width, width, sigma_max, spec.decay_for(i), rng.fork(i).next_u64()));
    }
    return net;
}

bool within_bound(double empirical, double bound) {
    return empirical <= bound * (1.0 + 1e-9) + 1e-12;
}

nlohmann::json to_json(const BoundReport& r) {
    auto layers = nlohmann::json::array();
    for (const auto& l : r.per_layer) {
        layers.push_back({{"sigma_next", l.sigma_next}, {"spectral_norm", l.spectral_norm}});
    }
    return {
        {"bound", r.bound},
        {"empirical_max", r.empirical_max},
        {"slack", r.slack()},
        {"samples", r.samples},
        {"holds", r.holds},
        {"advisory", r.advisory},
        {"adversarial", r.adversarial},
        {"second_order_bound", r.second_order_bound},
        {"max_activation_norm", r.max_activation_norm},
        {"per_layer", std::move(layers)},
    };
}

double theorem1_bound(std::span<const double> sigma, std::size_t k) {
    require(k <= sigma.size(), "rank k exceeds min(rows, cols)");
    return k == sigma.size() ? 0.0 : sigma[k];
}

double theorem1_bound(const Matrix& w, std::size_t k) {
    require(k <= std::min(w.rows(), w.cols()), "rank k exceeds min(rows, cols)");
    return theorem1_bound(svd(w).sigma, k);
}

Matrix truncated_weight(const Matrix& w, std::size_t k) {
    require(k <= std::min(w.rows(), w.cols()), "rank k exceeds min(rows, cols)");
    if (k == 0) {
        return Matrix(w.rows(), w.cols());
    }
    return reconstruct(truncate(svd(w), k));
}

BoundReport verify_theorem1(const Matrix& w, std::size_t k, std::size_t num_samples, std::uint64_t seed) {
    require(k <= std::min(w.rows(), w.cols()), "rank k exceeds min(rows, cols)");
    const auto s = svd(w);
    const Matrix residual = w - (k == 0 ? Matrix(w.rows(), w.cols()) : reconstruct(truncate(s, k)));

    BoundReport r;
    r.bound = theorem1_bound(s.sigma, k);
    r.second_order_bound = r.bound;
    r.per_layer.push_back({r.bound, s.sigma.front()});
    r.max_activation_norm = 1.0;
    if (k < s.sigma.size()) {
        r.adversarial = norm2(matvec(residual, s.vt.row(k)));
        r.empirical_max = r.adversarial;
    }
    const Rng root(seed);
    for (std::size_t i = 0; i < num_samples; ++i) {
        Rng rng = root.fork(i);
        const auto x = unit_gaussian(rng, w.cols());
        r.empirical_max = std::max(r.empirical_max, norm2(matvec(residual, x)));
    }
    r.samples = num_samples + (k < s.sigma.size() ? 1 : 0);
    r.holds = within_bound(r.empirical_max, r.bound);
    return r;
}

double theorem2_bound(const Matrix& w, std::size_t k, double lipschitz, double x_norm) {
    require(lipschitz > 0.0, "Lipschitz constant must be positive");
    return lipschitz * theorem1_bound(w, k) * x_norm;
}

namespace {

struct ChainSpectra {
    std::vector<SvdResult> svds;
    std::vector<LayerBound> layers;
};

ChainSpectra chain_spectra(const ChainNetwork& net, std::span<const std::size_t> ranks) {
    net.validate();
    require(ranks.size() == net.weights.size(), "one rank per chain layer required");
    ChainSpectra c;
    for (std::size_t i = 0; i < net.weights.size(); ++i) {
        c.svds.push_back(svd(net.weights[i]));
        c.layers.push_back({theorem1_bound(c.svds.back().sigma, ranks[i]), c.svds.back().sigma.front()});
    }
    return c;
}

double chain_sum(std::span<const LayerBound> layers, double lip, double x0_norm) {
    const std::size_t L = layers.size();
    double total = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
        double term = layers[i].sigma_next * std::pow(lip, static_cast<double>(L - 1 - i));
        for (std::size_t j = i + 1; j < L; ++j) {
            term *= layers[j].spectral_norm;
        }
        total += term;
    }
    return total * x0_norm;
}

double second_order(std::span<const LayerBound> layers, double lip, double x0_norm) {
    double b = 0.0;
    double n = x0_norm;
    for (const auto& l : layers) {
        b = lip * (l.spectral_norm * b + l.sigma_next * (n + b));
        n = lip * l.spectral_norm * n;
    }
    return b;
}

} // namespace

double theorem3_bound(const ChainNetwork& net, std::span<const std::size_t> ranks, double x0_norm) {
    const auto c = chain_spectra(net, ranks);
    return chain_sum(c.layers, net.lipschitz(), x0_norm);
}

BoundReport verify_theorem3(const ChainNetwork& net, std::span<const std::size_t> ranks, std::size_t num_samples,
                            std::uint64_t seed) {
    const auto c = chain_spectra(net, ranks);
    ChainNetwork truncated;
    truncated.activation = net.activation;
    for (std::size_t i = 0; i < net.weights.size(); ++i) {
        const auto& w = net.weights[i];
        truncated.weights.push_back(ranks[i] == 0 ? Matrix(w.rows(), w.cols()) : reconstruct(truncate(c.svds[i], ranks[i])));
    }

    BoundReport r;
    r.per_layer = c.layers;
    r.bound = chain_sum(c.layers, net.lipschitz(), 1.0);
    r.second_order_bound = second_order(c.layers, net.lipschitz(), 1.0);

    auto run = [&](std::span<const double> x0) {
        std::vector<double> x(x0.begin(), x0.end());
        for (const auto& w : net.weights) {
            x = matvec(w, x);
            for (double& v : x) {
                v = activate(net.activation, v);
            }
            r.max_activation_norm = std::max(r.max_activation_norm, norm2(x));
        }
        return norm2(difference(x, truncated.forward(x0)));
    };

    const std::size_t k1 = ranks[0];
    if (k1 < c.svds[0].sigma.size()) {
        r.adversarial = run(c.svds[0].vt.row(k1));
        r.empirical_max = r.adversarial;
        ++r.samples;
    }
    const Rng root(seed);
    for (std::size_t i = 0; i < num_samples; ++i) {
        Rng rng = root.fork(i);
        r.empirical_max = std::max(r.empirical_max, run(unit_gaussian(rng, net.weights.front().cols())));
    }
    r.samples += num_samples;
    r.holds = within_bound(r.empirical_max, r.bound);
    return r;
}

BoundReport advisory_model_report(const ModelWeights& w, const CompressionPlan& plan,
                                  std::span<const TokenId> prompt, std::size_t steps) {
    const auto cm = compress_model(w, plan);
    const auto ref = decode(w, prompt, steps);
    const auto cand = decode_forced(cm, prompt, ref.tokens);

    BoundReport r;
    r.advisory = true;
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const auto sk = svd(w.layers[l].w_k).sigma;
        const auto sv = svd(w.layers[l].w_v).sigma;
        const std::size_t k = plan.layers[l].skip ? sk.size() : plan.layers[l].d_c;
        r.per_layer.push_back({std::max(theorem1_bound(sk, k), theorem1_bound(sv, k)), std::max(sk.front(), sv.front())});
    }
    double x0_norm = 0.0;
    for (TokenId t : prompt) {
        x0_norm = std::max(x0_norm, norm2(w.embedding.row(t)));
    }
    r.bound = chain_sum(r.per_layer, 1.0, x0_norm);
    r.second_order_bound = second_order(r.per_layer, 1.0, x0_norm);
    for (std::size_t s = 0; s < steps; ++s) {
        r.empirical_max = std::max(r.empirical_max, norm2(difference(ref.hidden[s], cand.hidden[s])));
        r.max_activation_norm = std::max(r.max_activation_norm, norm2(ref.hidden[s]));
    }
    r.samples = steps;
    r.holds = within_bound(r.empirical_max, r.bound);
    return r;
}

} // namespace kvsvd
