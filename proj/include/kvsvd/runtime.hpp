// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvsvd/compressor.hpp"
#include "kvsvd/model.hpp"
#include "kvsvd/rope.hpp"
#include "kvsvd/sensitivity.hpp"

namespace kvsvd {

enum class CacheWidth { f64, f32 };

inline std::size_t bytes_per_element(CacheWidth w) { return w == CacheWidth::f64 ? 8 : 4; }

/// Per-layer key/value rows, one row per processed token. Full layers
/// store rotated keys (h_kv d wide); compressed layers store the
/// pre-rotation latents (d_c wide).
class KvCache {
public:
    KvCache(std::vector<std::size_t> key_widths, std::vector<std::size_t> value_widths, CacheWidth width);

    void append(std::size_t layer, std::span<const double> key, std::span<const double> value);
    void read_key(std::size_t layer, std::size_t token, std::span<double> out) const;
    void read_value(std::size_t layer, std::size_t token, std::span<double> out) const;

    std::size_t num_layers() const { return keys_.size(); }
    std::size_t tokens(std::size_t layer) const;
    std::size_t key_width(std::size_t layer) const { return keys_.at(layer).width; }
    std::size_t value_width(std::size_t layer) const { return values_.at(layer).width; }
    CacheWidth width() const { return width_; }
    std::uint64_t bytes() const;

private:
    struct Store {
        std::size_t width = 0;
        std::size_t rows = 0;
        std::vector<double> f64;
        std::vector<float> f32;
    };
    void push(Store& s, std::span<const double> row);
    void read(const Store& s, std::size_t token, std::span<double> out) const;

    std::vector<Store> keys_;
    std::vector<Store> values_;
    CacheWidth width_;
};

/// Read-only view over either a plain or a compressed model.
class ModelView {
public:
    ModelView(const ModelWeights& w); // NOLINT(google-explicit-constructor)
    ModelView(const CompressedModel& cm); // NOLINT(google-explicit-constructor)

    const ModelConfig& config() const { return *config_; }
    const Matrix& embedding() const { return *embedding_; }
    const std::vector<double>& final_norm() const { return *final_norm_; }
    const Matrix& lm_head() const { return *lm_head_; }
    std::size_t num_layers() const { return config_->num_layers; }

    /// Exactly one of these is non-null for each layer.
    const LayerWeights* full_layer(std::size_t l) const;
    const CompressedLayer* compressed_layer(std::size_t l) const;

    const CompressionPlan* plan() const { return compressed_ ? &compressed_->plan : nullptr; }

private:
    const ModelConfig* config_;
    const Matrix* embedding_;
    const std::vector<double>* final_norm_;
    const Matrix* lm_head_;
    const ModelWeights* plain_ = nullptr;
    const CompressedModel* compressed_ = nullptr;
};

enum class AttentionPath {
    /// Fused query (RoPE off) and fused output projections.
    fused,
    /// Explicit up-projection of cached latents, then the original W_q/W_o.
    reconstruct,
};

struct DecodeOptions {
    CacheWidth width = CacheWidth::f64;
    AttentionPath path = AttentionPath::fused;
};

/// One autoregressive sequence (batch 1) with its own cache.
class DecodeSession {
public:
    explicit DecodeSession(ModelView model, DecodeOptions options = {});

    /// Feeds `token` at the current position and returns next-token logits.
    std::vector<double> step(TokenId token);

    std::size_t position() const { return position_; }
    const KvCache& cache() const { return cache_; }
    /// Residual stream after the last layer, before the final norm.
    std::span<const double> last_hidden() const { return hidden_; }

private:
    void attend_full(const LayerWeights& lw, std::size_t layer, std::vector<double>& x);
    void attend_compressed(const CompressedLayer& cl, std::size_t layer, std::vector<double>& x);

    ModelView model_;
    DecodeOptions options_;
    KvCache cache_;
    std::size_t position_ = 0;
    std::vector<double> hidden_;
};

/// Lowest index among maximal entries.
TokenId argmax(std::span<const double> logits);

/// KL(softmax(p) || softmax(q)), computed in log space.
double kl_divergence(std::span<const double> p_logits, std::span<const double> q_logits);

struct DecodeResult {
    std::vector<TokenId> tokens; // generated, one per step
    Matrix logits;               // steps x vocab; row s predicts tokens[s]
    std::uint64_t cache_bytes = 0;
    double tokens_per_sec = 0.0;
    std::vector<std::vector<double>> hidden; // last_hidden() per step
};

/// Greedy decoding: the prompt is fed through the cache, then `steps`
/// tokens are generated. Requires prompt.size() + steps <= max_seq_len.
DecodeResult decode(ModelView model, std::span<const TokenId> prompt, std::size_t steps, DecodeOptions options = {});

/// Like decode but feeds `forced` instead of the model's own argmax, so two
/// models can be compared on identical contexts.
DecodeResult decode_forced(ModelView model, std::span<const TokenId> prompt, std::span<const TokenId> forced,
                           DecodeOptions options = {});

struct StepStat {
    std::size_t step = 0;
    double kl = 0.0;
    double max_abs_logit_diff = 0.0;
    bool top1_match = true;
};

struct DecodeReport {
    std::vector<StepStat> steps;
    std::vector<TokenId> reference_tokens;
    std::vector<TokenId> candidate_tokens; // candidate argmax per step
    Matrix reference_logits;
    Matrix candidate_logits;
    double max_abs_logit_diff = 0.0;
    double mean_kl = 0.0;
    double max_kl = 0.0;
    double agreement = 1.0;
    std::uint64_t reference_cache_bytes = 0;
    std::uint64_t candidate_cache_bytes = 0;
    double tokens_per_sec = 0.0;
};

/// The reference decodes greedily; the candidate is teacher-forced on the
/// reference tokens and scored per step.
DecodeReport decode_compare(ModelView reference, ModelView candidate, std::span<const TokenId> prompt,
                            std::size_t steps, DecodeOptions options = {});

nlohmann::json to_json(const DecodeReport& r, bool include_logits = false);
/// `step,kl,max_abs_logit_diff,top1_match` with a header row.
std::string to_csv(const DecodeReport& r);

/// Cache size in bytes: sum over layers of b * N * width * bytes_per_elem,
/// doubled for separate K and V unless count_kv_jointly. width is h_kv d,
/// or the plan's d_c for compressed layers.
std::uint64_t cache_bytes(const ModelConfig& cfg, const CompressionPlan* plan, std::uint64_t batch,
                          std::uint64_t seq_len, std::uint64_t bytes_per_elem, bool count_kv_jointly);

} // namespace kvsvd
