// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "kvsvd/densemat.hpp"

namespace kvsvd {

using TokenId = std::uint32_t;

struct ModelConfig {
    std::size_t num_layers = 0;
    std::size_t num_heads = 0;
    std::size_t num_kv_heads = 0;
    std::size_t head_dim = 0;
    std::size_t model_dim = 0;
    std::size_t vocab_size = 0;
    std::size_t mlp_hidden = 0;
    double rope_base = 10000.0;
    bool rope_enabled = true;
    std::size_t max_seq_len = 0;

    /// Throws a contract error unless D == h * d, h % h_kv == 0, d is even
    /// and every count is positive.
    void validate() const;

    std::size_t kv_dim() const { return num_kv_heads * head_dim; }
    std::size_t group_size() const { return num_heads / num_kv_heads; }
    /// kv head serving query head j: floor(j * h_kv / h).
    std::size_t kv_head_of(std::size_t query_head) const { return query_head * num_kv_heads / num_heads; }

    bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

/// Named configurations. The llama presets carry the published layer/head
/// geometry; their vocab, MLP width and RoPE base follow the public model
/// cards and only matter for the memory calculator. toy-small and toy-deep
/// are desk-scale byte-vocabulary models.
ModelConfig preset(std::string_view name);
std::vector<std::string> preset_names();
bool is_desk_scale(std::string_view name);
/// Skip threshold on the cumulative condition number used with each llama
/// preset; toy presets have none and need an explicit value.
std::optional<double> preset_threshold(std::string_view name);

struct LayerWeights {
    Matrix w_q; // D x (h d)
    Matrix w_k; // D x (h_kv d)
    Matrix w_v; // D x (h_kv d)
    Matrix w_o; // (h d) x D
    std::vector<double> attn_norm;
    std::vector<double> mlp_norm;
    Matrix mlp_gate; // D x mlp_hidden
    Matrix mlp_up;   // D x mlp_hidden
    Matrix mlp_down; // mlp_hidden x D

    bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
    ModelConfig config;
    Matrix embedding; // vocab x D
    std::vector<LayerWeights> layers;
    std::vector<double> final_norm;
    Matrix lm_head; // D x vocab

    void validate() const;
    bool operator==(const ModelWeights&) const = default;
};

/// Singular spectrum sigma_i = sigma_max * decay^i for the attention and
/// MLP projections of every layer; layer_decay, when non-empty, overrides
/// `decay` per layer and must have one entry per layer.
struct SpectrumSpec {
    double sigma_max = 1.0;
    double decay = 1.0;
    std::vector<double> layer_decay;

    void validate(std::size_t num_layers) const;
    double decay_for(std::size_t layer) const;
};

/// Linearly interpolated decay from `shallow` at layer 0 to `deep` at the
/// last layer, so shallow layers are the ill-conditioned ones when
/// shallow < deep.
SpectrumSpec graded_spectrum(std::size_t num_layers, double sigma_max, double shallow, double deep);

/// Q1 * diag(sigma_max * decay^i) * Q2^T with Q1, Q2 drawn as orthonormalized
/// Gaussian matrices (rows x r and cols x r, r = min(rows, cols)).
Matrix spectral_matrix(std::size_t rows, std::size_t cols, double sigma_max, double decay, std::uint64_t seed);

/// Embedding entries have unit RMS; the LM head is scaled so logits have
/// RMS kLogitScale for unit-RMS hidden states. Norm gains are all ones.
inline constexpr double kLogitScale = 2.0;
inline constexpr double kRmsEps = 1e-6;

ModelWeights generate_synthetic(const ModelConfig& config, const SpectrumSpec& spectrum, std::uint64_t seed);

// Building blocks shared by the reference forward pass and the runtime.
std::vector<double> rms_norm(std::span<const double> x, std::span<const double> gain);
double silu(double x);
std::vector<double> swiglu_mlp(const Matrix& gate, const Matrix& up, const Matrix& down, std::span<const double> h);
void softmax_inplace(std::span<double> v);

/// Full-sequence causal forward pass without a cache; returns len x vocab.
/// This is the reference the cached runtime is checked against.
Matrix forward_logits(const ModelWeights& w, std::span<const TokenId> tokens);

void check_tokens(const ModelConfig& cfg, std::span<const TokenId> tokens);

void save_model(const ModelWeights& w, const std::filesystem::path& dir);
ModelWeights load_model(const std::filesystem::path& dir);

// Tensor naming used in containers.
std::string layer_tensor(std::size_t layer, std::string_view leaf);

} // namespace kvsvd
