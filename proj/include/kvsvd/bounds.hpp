// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "kvsvd/densemat.hpp"
#include "kvsvd/model.hpp"
#include "kvsvd/sensitivity.hpp"

namespace kvsvd {

enum class Activation { relu, identity, silu };

/// max_x d/dx [x * sigmoid(x)], attained near x = 2.3993572794. Found by a
/// dense grid on [-10, 10] (step 1e-5) refined with Brent's method; the
/// bounds tests recompute it.
inline constexpr double kSiluLipschitz = 1.099839320128867;

double lipschitz_constant(Activation a);
double activate(Activation a, double x);
std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

/// x_i = phi(W_i x_{i-1}) with column vectors; W_i is out x in.
struct ChainNetwork {
    std::vector<Matrix> weights;
    Activation activation = Activation::relu;

    double lipschitz() const { return lipschitz_constant(activation); }
    /// Consecutive shapes must compose.
    void validate() const;
    std::vector<double> forward(std::span<const double> x0) const;
};

/// Random chain with widths drawn from [min_width, max_width] and each
/// ||W_i||_2 drawn from [0.5, 1], so the truncated activations never grow.
ChainNetwork random_chain(std::size_t num_layers, std::size_t min_width, std::size_t max_width,
                          Activation activation, std::uint64_t seed);

/// Chain of width x width layers whose spectra decay as gamma_i^j, with
/// gamma interpolated from `shallow` at layer 1 to `deep` at layer L.
ChainNetwork graded_chain(std::size_t num_layers, std::size_t width, double sigma_max, double shallow, double deep,
                          Activation activation, std::uint64_t seed);

struct LayerBound {
    double sigma_next = 0.0;
    double spectral_norm = 0.0;
};

struct BoundReport {
    std::vector<LayerBound> per_layer;
    double bound = 0.0;
    double empirical_max = 0.0;
    /// Error at the adversarial input (v_{k+1} of the first layer).
    double adversarial = 0.0;
    /// Diagnostic bound keeping the ||x_tilde|| growth terms.
    double second_order_bound = 0.0;
    /// Largest ||x_i|| observed along the reference chain.
    double max_activation_norm = 0.0;
    std::size_t samples = 0;
    bool holds = true;
    /// Set for models outside the theorem's assumptions; `holds` is then
    /// informational.
    bool advisory = false;

    double slack() const { return bound - empirical_max; }
};

/// empirical <= bound * (1 + 1e-9) + 1e-12.
bool within_bound(double empirical, double bound);

nlohmann::json to_json(const BoundReport& r);

/// sigma_{k+1}(W), or 0 when k = min(rows, cols). Accepts 0 <= k <= min.
double theorem1_bound(const Matrix& w, std::size_t k);
double theorem1_bound(std::span<const double> sigma, std::size_t k);

/// Rank-k truncation of W (the zero matrix for k = 0).
Matrix truncated_weight(const Matrix& w, std::size_t k);

/// Unit-norm Gaussian inputs plus x = v_{k+1}; reports max ||(W - W_k) x||.
BoundReport verify_theorem1(const Matrix& w, std::size_t k, std::size_t num_samples, std::uint64_t seed);

double theorem2_bound(const Matrix& w, std::size_t k, double lipschitz, double x_norm);

/// sum_i sigma_{k_i+1}^(i) L^(L-i) prod_{j>i} ||W_j||_2 * x0_norm.
double theorem3_bound(const ChainNetwork& net, std::span<const std::size_t> ranks, double x0_norm);

/// Runs the chain and its rank-truncated copy on unit-norm inputs (plus
/// v_{k_1+1} of the first layer) and compares the outputs.
BoundReport verify_theorem3(const ChainNetwork& net, std::span<const std::size_t> ranks, std::size_t num_samples,
                            std::uint64_t seed);

/// Illustrative only: a decoder is not a chain network. Compares the final
/// hidden state of the model and its compressed version over a decode and
/// reports it next to a chain-style sum built from the key projections.
BoundReport advisory_model_report(const ModelWeights& w, const CompressionPlan& plan,
                                  std::span<const TokenId> prompt, std::size_t steps);

} // namespace kvsvd
