// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <variant>
#include <vector>

#include "kvsvd/densemat.hpp"
#include "kvsvd/model.hpp"
#include "kvsvd/sensitivity.hpp"

namespace kvsvd {

/// Low-rank attention factors for one layer.
///
/// The cache holds the latents c_k = x P_k and c_v = x P_v (d_c wide each).
/// Keys for kv head i are c_k A^i; the value up-block B^i is folded into the
/// output projection per query head, M^j = B^{g(j)} W_o^{(j)}, and without
/// RoPE the key up-block is folded into the query as well,
/// Wq_fused^j = W_q^{(j)} (A^{g(j)})^T. The explicit factors (A, B, w_q,
/// w_o) are kept so the reconstruct path and RoPE can use them.
struct CompressedLayer {
    std::size_t d_c = 0;   // key latent width
    std::size_t d_c_v = 0; // value latent width (== d_c unless overridden)
    Matrix key_down;       // P_k, D x d_c
    std::vector<Matrix> key_up;     // A^i, d_c x d per kv head
    std::vector<Matrix> fused_query; // D x d_c per query head
    Matrix value_down;     // P_v, D x d_c_v
    std::vector<Matrix> value_up;   // B^i, d_c_v x d per kv head
    std::vector<Matrix> fused_output; // M^j, d_c_v x D per query head
    Matrix w_q;
    Matrix w_o;
    std::vector<double> attn_norm;
    std::vector<double> mlp_norm;
    Matrix mlp_gate;
    Matrix mlp_up;
    Matrix mlp_down;

    bool operator==(const CompressedLayer&) const = default;
};

using LayerSlot = std::variant<LayerWeights, CompressedLayer>;

struct CompressedModel {
    ModelConfig config;
    CompressionPlan plan;
    Matrix embedding;
    std::vector<LayerSlot> layers;
    std::vector<double> final_norm;
    Matrix lm_head;

    bool is_compressed(std::size_t layer) const { return std::holds_alternative<CompressedLayer>(layers.at(layer)); }
    /// d_c / (h_kv d) per layer; 1 for skipped layers.
    std::vector<double> layer_ratios() const;
    double retained_ratio() const;

    bool operator==(const CompressedModel&) const = default;
};

/// `value_dim` overrides the value latent width; keys and values share
/// `d_c` by default.
CompressedLayer compress_layer(const LayerWeights& lw, std::size_t d_c, const ModelConfig& cfg,
                               std::optional<std::size_t> value_dim = std::nullopt);

CompressedModel compress_model(const ModelWeights& w, const CompressionPlan& plan);

/// Dense rank-d_c approximation of W_k implied by the layer's factors.
Matrix approx_key_weight(const CompressedLayer& cl);
Matrix approx_value_weight(const CompressedLayer& cl);

void save_compressed(const CompressedModel& cm, const std::filesystem::path& dir);
CompressedModel load_compressed(const std::filesystem::path& dir);

/// True when config.json in `dir` declares a compressed container.
bool is_compressed_container(const std::filesystem::path& dir);

} // namespace kvsvd
