// SPDX-License-Identifier: Apache-2.0

// Small models shared by the runtime, compressor and acceptance tests.

#pragma once

#include <vector>

#include "kvsvd/model.hpp"
#include "kvsvd/rng.hpp"

namespace fixtures {

using namespace kvsvd;

/// toy-small geometry (D = 64, h = 4, h_kv = 2, d = 16) cut down to
/// `layers` layers and a 32-token vocabulary.
inline ModelConfig tiny(std::size_t layers = 2, bool rope = true, std::size_t max_seq = 96) {
    ModelConfig c = preset("toy-small");
    c.num_layers = layers;
    c.vocab_size = 32;
    c.mlp_hidden = 24;
    c.max_seq_len = max_seq;
    c.rope_enabled = rope;
    return c;
}

inline std::vector<TokenId> random_tokens(const ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
    Rng r(seed);
    std::vector<TokenId> t(n);
    for (auto& x : t) {
        x = static_cast<TokenId>(r.below(cfg.vocab_size));
    }
    return t;
}

/// Same model with every kv head duplicated so each query head has its own;
/// query head j reads the copy of kv head g(j).
inline ModelWeights expand_to_mha(const ModelWeights& w) {
    ModelWeights out = w;
    const auto& c = w.config;
    out.config.num_kv_heads = c.num_heads;
    const std::size_t d = c.head_dim;
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const auto& src = w.layers[l];
        Matrix k(c.model_dim, c.num_heads * d);
        Matrix v(c.model_dim, c.num_heads * d);
        for (std::size_t j = 0; j < c.num_heads; ++j) {
            const std::size_t g = c.kv_head_of(j);
            for (std::size_t r = 0; r < c.model_dim; ++r) {
                for (std::size_t i = 0; i < d; ++i) {
                    k(r, j * d + i) = src.w_k(r, g * d + i);
                    v(r, j * d + i) = src.w_v(r, g * d + i);
                }
            }
        }
        out.layers[l].w_k = k;
        out.layers[l].w_v = v;
    }
    return out;
}

} // namespace fixtures
