// SPDX-License-Identifier: Apache-2.0

#include "kvsvd/runtime.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "kvsvd/error.hpp"

namespace kvsvd {

KvCache::KvCache(std::vector<std::size_t> key_widths, std::vector<std::size_t> value_widths, CacheWidth width)
    : width_(width) {
    require(key_widths.size() == value_widths.size(), "key/value layer counts differ");
    for (std::size_t l = 0; l < key_widths.size(); ++l) {
        keys_.push_back({key_widths[l], 0, {}, {}});
        values_.push_back({value_widths[l], 0, {}, {}});
    }
}

void KvCache::push(Store& s, std::span<const double> row) {
    require(row.size() == s.width, "cache row width mismatch");
    if (width_ == CacheWidth::f64) {
        s.f64.insert(s.f64.end(), row.begin(), row.end());
    } else {
        for (double x : row) {
            s.f32.push_back(static_cast<float>(x));
        }
    }
    ++s.rows;
}

void KvCache::read(const Store& s, std::size_t token, std::span<double> out) const {
    require(token < s.rows && out.size() == s.width, "cache read out of range");
    const std::size_t base = token * s.width;
    if (width_ == CacheWidth::f64) {
        std::copy_n(s.f64.begin() + static_cast<std::ptrdiff_t>(base), s.width, out.begin());
    } else {
        for (std::size_t i = 0; i < s.width; ++i) {
            out[i] = s.f32[base + i];
        }
    }
}

void KvCache::append(std::size_t layer, std::span<const double> key, std::span<const double> value) {
    push(keys_.at(layer), key);
    push(values_.at(layer), value);
}

void KvCache::read_key(std::size_t layer, std::size_t token, std::span<double> out) const {
    read(keys_.at(layer), token, out);
}

void KvCache::read_value(std::size_t layer, std::size_t token, std::span<double> out) const {
    read(values_.at(layer), token, out);
}

std::size_t KvCache::tokens(std::size_t layer) const {
    return keys_.at(layer).rows;
}

std::uint64_t KvCache::bytes() const {
    std::uint64_t total = 0;
    for (std::size_t l = 0; l < keys_.size(); ++l) {
        total += static_cast<std::uint64_t>(keys_[l].rows) * (keys_[l].width + values_[l].width) *
                 bytes_per_element(width_);
    }
    return total;
}

ModelView::ModelView(const ModelWeights& w)
    : config_(&w.config), embedding_(&w.embedding), final_norm_(&w.final_norm), lm_head_(&w.lm_head), plain_(&w) {}

ModelView::ModelView(const CompressedModel& cm)
    : config_(&cm.config), embedding_(&cm.embedding), final_norm_(&cm.final_norm), lm_head_(&cm.lm_head),
      compressed_(&cm) {}

const LayerWeights* ModelView::full_layer(std::size_t l) const {
    if (plain_) {
        return &plain_->layers.at(l);
    }
    return std::get_if<LayerWeights>(&compressed_->layers.at(l));
}

const CompressedLayer* ModelView::compressed_layer(std::size_t l) const {
    if (plain_) {
        return nullptr;
    }
    return std::get_if<CompressedLayer>(&compressed_->layers.at(l));
}

namespace {

KvCache make_cache(const ModelView& m, CacheWidth width) {
    std::vector<std::size_t> kw;
    std::vector<std::size_t> vw;
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
        if (const auto* cl = m.compressed_layer(l)) {
            kw.push_back(cl->d_c);
            vw.push_back(cl->d_c_v);
        } else {
            kw.push_back(m.config().kv_dim());
            vw.push_back(m.config().kv_dim());
        }
    }
    return KvCache(std::move(kw), std::move(vw), width);
}

void add_into(std::vector<double>& x, std::span<const double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] += y[i];
    }
}

} // namespace

DecodeSession::DecodeSession(ModelView model, DecodeOptions options)
    : model_(model), options_(options), cache_(make_cache(model, options.width)) {}

void DecodeSession::attend_full(const LayerWeights& lw, std::size_t layer, std::vector<double>& x) {
    const ModelConfig& cfg = model_.config();
    const std::size_t d = cfg.head_dim;
    const std::size_t kv = cfg.kv_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    const std::size_t m = position_;

    const auto h = rms_norm(x, lw.attn_norm);
    auto q = vecmat(h, lw.w_q);
    auto k = vecmat(h, lw.w_k);
    const auto v = vecmat(h, lw.w_v);
    if (cfg.rope_enabled) {
        for (std::size_t j = 0; j < cfg.num_heads; ++j) {
            rope_rotate_inplace(std::span(q).subspan(j * d, d), m, cfg.rope_base);
        }
        for (std::size_t i = 0; i < cfg.num_kv_heads; ++i) {
            rope_rotate_inplace(std::span(k).subspan(i * d, d), m, cfg.rope_base);
        }
    }
    cache_.append(layer, k, v);

    const std::size_t n_tok = cache_.tokens(layer);
    Matrix keys(n_tok, kv);
    Matrix values(n_tok, kv);
    for (std::size_t n = 0; n < n_tok; ++n) {
        cache_.read_key(layer, n, keys.row(n));
        cache_.read_value(layer, n, values.row(n));
    }

    std::vector<double> heads(cfg.num_heads * d, 0.0);
    std::vector<double> scores(n_tok);
    for (std::size_t j = 0; j < cfg.num_heads; ++j) {
        const std::size_t g = cfg.kv_head_of(j);
        const auto qj = std::span<const double>(q).subspan(j * d, d);
        for (std::size_t n = 0; n < n_tok; ++n) {
            scores[n] = dot(qj, keys.row(n).subspan(g * d, d)) * scale;
        }
        softmax_inplace(scores);
        auto out = std::span(heads).subspan(j * d, d);
        for (std::size_t n = 0; n < n_tok; ++n) {
            const auto vn = values.row(n).subspan(g * d, d);
            for (std::size_t c = 0; c < d; ++c) {
                out[c] += scores[n] * vn[c];
            }
        }
    }
    add_into(x, vecmat(heads, lw.w_o));
    const auto hn = rms_norm(x, lw.mlp_norm);
    add_into(x, swiglu_mlp(lw.mlp_gate, lw.mlp_up, lw.mlp_down, hn));
}

void DecodeSession::attend_compressed(const CompressedLayer& cl, std::size_t layer, std::vector<double>& x) {
    const ModelConfig& cfg = model_.config();
    const std::size_t d = cfg.head_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    const std::size_t m = position_;
    const bool explicit_keys = cfg.rope_enabled || options_.path == AttentionPath::reconstruct;
    const bool explicit_values = options_.path == AttentionPath::reconstruct;

    const auto h = rms_norm(x, cl.attn_norm);
    cache_.append(layer, vecmat(h, cl.key_down), vecmat(h, cl.value_down));

    const std::size_t n_tok = cache_.tokens(layer);
    Matrix latent_k(n_tok, cl.d_c);
    Matrix latent_v(n_tok, cl.d_c_v);
    for (std::size_t n = 0; n < n_tok; ++n) {
        cache_.read_key(layer, n, latent_k.row(n));
        cache_.read_value(layer, n, latent_v.row(n));
    }

    // Explicit keys per kv head: up-project the cached latents, then rotate
    // each row by its own position.
    std::vector<Matrix> keys;
    std::vector<double> q;
    if (explicit_keys) {
        q = vecmat(h, cl.w_q);
        keys.reserve(cfg.num_kv_heads);
        for (std::size_t i = 0; i < cfg.num_kv_heads; ++i) {
            Matrix ki = matmul(latent_k, cl.key_up[i]);
            if (cfg.rope_enabled) {
                for (std::size_t n = 0; n < n_tok; ++n) {
                    rope_rotate_inplace(ki.row(n), n, cfg.rope_base);
                }
            }
            keys.push_back(std::move(ki));
        }
    }

    std::vector<double> scores(n_tok);
    std::vector<double> heads;
    if (explicit_values) {
        heads.assign(cfg.num_heads * d, 0.0);
    }
    std::vector<double> attn_out(cfg.model_dim, 0.0);
    std::vector<double> mixed(cl.d_c_v);
    for (std::size_t j = 0; j < cfg.num_heads; ++j) {
        const std::size_t g = cfg.kv_head_of(j);
        if (explicit_keys) {
            auto qj = std::span(q).subspan(j * d, d);
            if (cfg.rope_enabled) {
                rope_rotate_inplace(qj, m, cfg.rope_base);
            }
            for (std::size_t n = 0; n < n_tok; ++n) {
                scores[n] = dot(qj, keys[g].row(n)) * scale;
            }
        } else {
            const auto qf = vecmat(h, cl.fused_query[j]);
            for (std::size_t n = 0; n < n_tok; ++n) {
                scores[n] = dot(qf, latent_k.row(n)) * scale;
            }
        }
        softmax_inplace(scores);

        std::fill(mixed.begin(), mixed.end(), 0.0);
        for (std::size_t n = 0; n < n_tok; ++n) {
            const auto cv = latent_v.row(n);
            for (std::size_t c = 0; c < cl.d_c_v; ++c) {
                mixed[c] += scores[n] * cv[c];
            }
        }
        if (explicit_values) {
            const auto vj = vecmat(mixed, cl.value_up[g]);
            std::copy(vj.begin(), vj.end(), heads.begin() + static_cast<std::ptrdiff_t>(j * d));
        } else {
            add_into(attn_out, vecmat(mixed, cl.fused_output[j]));
        }
    }
    if (explicit_values) {
        attn_out = vecmat(heads, cl.w_o);
    }
    add_into(x, attn_out);
    const auto hn = rms_norm(x, cl.mlp_norm);
    add_into(x, swiglu_mlp(cl.mlp_gate, cl.mlp_up, cl.mlp_down, hn));
}

std::vector<double> DecodeSession::step(TokenId token) {
    const ModelConfig& cfg = model_.config();
    if (position_ >= cfg.max_seq_len) {
        fail(ErrorKind::contract, "sequence longer than max_seq_len");
    }
    if (token >= cfg.vocab_size) {
        fail(ErrorKind::contract, "token id " + std::to_string(token) + " outside the vocabulary");
    }
    const auto e = model_.embedding().row(token);
    std::vector<double> x(e.begin(), e.end());
    for (std::size_t l = 0; l < model_.num_layers(); ++l) {
        if (const auto* cl = model_.compressed_layer(l)) {
            attend_compressed(*cl, l, x);
        } else {
            attend_full(*model_.full_layer(l), l, x);
        }
    }
    hidden_ = x;
    ++position_;
    return vecmat(rms_norm(x, model_.final_norm()), model_.lm_head());
}

TokenId argmax(std::span<const double> logits) {
    require(!logits.empty(), "argmax of empty logits");
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) {
            best = i;
        }
    }
    return static_cast<TokenId>(best);
}

double kl_divergence(std::span<const double> p_logits, std::span<const double> q_logits) {
    require(p_logits.size() == q_logits.size() && !p_logits.empty(), "kl_divergence size mismatch");
    auto log_sum_exp = [](std::span<const double> v) {
        const double m = *std::max_element(v.begin(), v.end());
        double s = 0.0;
        for (double x : v) {
            s += std::exp(x - m);
        }
        return m + std::log(s);
    };
    const double lp = log_sum_exp(p_logits);
    const double lq = log_sum_exp(q_logits);
    double kl = 0.0;
    for (std::size_t i = 0; i < p_logits.size(); ++i) {
        const double log_p = p_logits[i] - lp;
        const double log_q = q_logits[i] - lq;
        kl += std::exp(log_p) * (log_p - log_q);
    }
    return std::max(0.0, kl);
}

namespace {

DecodeResult run(ModelView model, std::span<const TokenId> prompt, std::size_t steps, std::span<const TokenId> forced,
                 DecodeOptions options) {
    const ModelConfig& cfg = model.config();
    require(!prompt.empty(), "decode needs a nonempty prompt");
    if (prompt.size() + steps > cfg.max_seq_len) {
        fail(ErrorKind::contract, "prompt plus steps exceeds max_seq_len");
    }
    check_tokens(cfg, prompt);
    check_tokens(cfg, forced);

    const auto start = std::chrono::steady_clock::now();
    DecodeSession session(model, options);
    std::vector<double> logits;
    for (TokenId t : prompt) {
        logits = session.step(t);
    }
    DecodeResult result;
    result.logits = Matrix(std::max<std::size_t>(steps, 1), cfg.vocab_size);
    for (std::size_t s = 0; s < steps; ++s) {
        std::copy(logits.begin(), logits.end(), result.logits.row(s).begin());
        const auto hidden = session.last_hidden();
        result.hidden.emplace_back(hidden.begin(), hidden.end());
        const TokenId next = forced.empty() ? argmax(logits) : forced[s];
        result.tokens.push_back(next);
        if (s + 1 < steps) {
            logits = session.step(next);
        }
    }
    if (steps == 0) {
        result.logits = Matrix();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.cache_bytes = session.cache().bytes();
    result.tokens_per_sec = secs > 0.0 ? static_cast<double>(session.position()) / secs : 0.0;
    return result;
}

} // namespace

DecodeResult decode(ModelView model, std::span<const TokenId> prompt, std::size_t steps, DecodeOptions options) {
    return run(model, prompt, steps, {}, options);
}

DecodeResult decode_forced(ModelView model, std::span<const TokenId> prompt, std::span<const TokenId> forced,
                           DecodeOptions options) {
    require(!forced.empty(), "decode_forced needs at least one forced token");
    return run(model, prompt, forced.size(), forced, options);
}

DecodeReport decode_compare(ModelView reference, ModelView candidate, std::span<const TokenId> prompt,
                            std::size_t steps, DecodeOptions options) {
    if (!(reference.config() == candidate.config())) {
        fail(ErrorKind::validation, "reference and candidate model configurations differ");
    }
    require(steps > 0, "decode_compare needs at least one step");
    const auto ref = decode(reference, prompt, steps, options);
    const auto cand = decode_forced(candidate, prompt, ref.tokens, options);

    DecodeReport r;
    r.reference_tokens = ref.tokens;
    r.reference_logits = ref.logits;
    r.candidate_logits = cand.logits;
    r.reference_cache_bytes = ref.cache_bytes;
    r.candidate_cache_bytes = cand.cache_bytes;
    r.tokens_per_sec = cand.tokens_per_sec;
    std::size_t matches = 0;
    double kl_sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
        StepStat st;
        st.step = s;
        const auto pr = ref.logits.row(s);
        const auto cr = cand.logits.row(s);
        st.kl = kl_divergence(pr, cr);
        for (std::size_t i = 0; i < pr.size(); ++i) {
            st.max_abs_logit_diff = std::max(st.max_abs_logit_diff, std::abs(pr[i] - cr[i]));
        }
        const TokenId top = argmax(cr);
        r.candidate_tokens.push_back(top);
        st.top1_match = top == ref.tokens[s];
        matches += st.top1_match ? 1 : 0;
        kl_sum += st.kl;
        r.max_abs_logit_diff = std::max(r.max_abs_logit_diff, st.max_abs_logit_diff);
        r.max_kl = std::max(r.max_kl, st.kl);
        r.steps.push_back(st);
    }
    r.mean_kl = kl_sum / static_cast<double>(steps);
    r.agreement = static_cast<double>(matches) / static_cast<double>(steps);
    return r;
}

nlohmann::json to_json(const DecodeReport& r, bool include_logits) {
    nlohmann::json j = {
        {"steps", r.steps.size()},
        {"max_abs_logit_diff", r.max_abs_logit_diff},
        {"mean_kl", r.mean_kl},
        {"max_kl", r.max_kl},
        {"top1_agreement", r.agreement},
        {"reference_cache_bytes", r.reference_cache_bytes},
        {"candidate_cache_bytes", r.candidate_cache_bytes},
        {"tokens_per_sec", r.tokens_per_sec},
        {"reference_tokens", r.reference_tokens},
        {"candidate_tokens", r.candidate_tokens},
    };
    auto trace = nlohmann::json::array();
    for (const auto& s : r.steps) {
        trace.push_back({{"step", s.step}, {"kl", s.kl}, {"max_abs_logit_diff", s.max_abs_logit_diff},
                         {"top1_match", s.top1_match}});
    }
    j["trace"] = std::move(trace);
    if (include_logits) {
        auto rows = [](const Matrix& m) {
            auto out = nlohmann::json::array();
            for (std::size_t i = 0; i < m.rows(); ++i) {
                out.push_back(std::vector<double>(m.row(i).begin(), m.row(i).end()));
            }
            return out;
        };
        j["reference_logits"] = rows(r.reference_logits);
        j["candidate_logits"] = rows(r.candidate_logits);
    }
    return j;
}

std::string to_csv(const DecodeReport& r) {
    std::ostringstream os;
    os.precision(17);
    os << "step,kl,max_abs_logit_diff,top1_match\n";
    for (const auto& s : r.steps) {
        os << s.step << ',' << s.kl << ',' << s.max_abs_logit_diff << ',' << (s.top1_match ? 1 : 0) << '\n';
    }
    return os.str();
}

std::uint64_t cache_bytes(const ModelConfig& cfg, const CompressionPlan* plan, std::uint64_t batch,
                          std::uint64_t seq_len, std::uint64_t bytes_per_elem, bool count_kv_jointly) {
    if (plan && plan->layers.size() != cfg.num_layers) {
        fail(ErrorKind::validation, "plan layer count differs from the config");
    }
    const std::uint64_t factor = count_kv_jointly ? 1 : 2;
    std::uint64_t total = 0;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const std::uint64_t width = plan ? plan->layers[l].d_c : cfg.kv_dim();
        total += batch * seq_len * width * bytes_per_elem * factor;
    }
    return total;
}

} // namespace kvsvd
