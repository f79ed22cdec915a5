// SPDX-License-Identifier: Apache-2.0

#include "kvsvd/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "kvsvd/container.hpp"
#include "kvsvd/error.hpp"
#include "kvsvd/rng.hpp"
#include "kvsvd/rope.hpp"

namespace kvsvd {

void ModelConfig::validate() const {
    require(num_layers > 0 && num_heads > 0 && num_kv_heads > 0 && head_dim > 0, "config counts must be positive");
    require(model_dim > 0 && vocab_size > 0 && mlp_hidden > 0 && max_seq_len > 0, "config counts must be positive");
    require(model_dim == num_heads * head_dim, "model_dim must equal num_heads * head_dim");
    require(num_heads % num_kv_heads == 0, "num_heads must be a multiple of num_kv_heads");
    require(head_dim % 2 == 0, "head_dim must be even");
    require(rope_base > 0.0 && std::isfinite(rope_base), "rope_base must be positive");
}

nlohmann::json to_json(const ModelConfig& cfg) {
    return {
        {"num_layers", cfg.num_layers},   {"num_heads", cfg.num_heads},   {"num_kv_heads", cfg.num_kv_heads},
        {"head_dim", cfg.head_dim},       {"model_dim", cfg.model_dim},   {"vocab_size", cfg.vocab_size},
        {"mlp_hidden", cfg.mlp_hidden},   {"rope_base", cfg.rope_base},   {"rope_enabled", cfg.rope_enabled},
        {"max_seq_len", cfg.max_seq_len},
    };
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    try {
        cfg.num_layers = j.at("num_layers").get<std::size_t>();
        cfg.num_heads = j.at("num_heads").get<std::size_t>();
        cfg.num_kv_heads = j.at("num_kv_heads").get<std::size_t>();
        cfg.head_dim = j.at("head_dim").get<std::size_t>();
        cfg.model_dim = j.at("model_dim").get<std::size_t>();
        cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
        cfg.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
        cfg.rope_base = j.at("rope_base").get<double>();
        cfg.rope_enabled = j.at("rope_enabled").get<bool>();
        cfg.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("invalid model config: ") + e.what());
    }
    try {
        cfg.validate();
    } catch (const Error& e) {
        fail(ErrorKind::validation, e.what());
    }
    return cfg;
}

namespace {

struct NamedPreset {
    std::string_view name;
    ModelConfig config;
    bool desk_scale;
    std::optional<double> threshold;
};

ModelConfig make(std::size_t layers, std::size_t heads, std::size_t kv_heads, std::size_t head_dim,
                 std::size_t vocab, std::size_t mlp, double rope_base, std::size_t max_seq) {
    ModelConfig c;
    c.num_layers = layers;
    c.num_heads = heads;
    c.num_kv_heads = kv_heads;
    c.head_dim = head_dim;
    c.model_dim = heads * head_dim;
    c.vocab_size = vocab;
    c.mlp_hidden = mlp;
    c.rope_base = rope_base;
    c.rope_enabled = true;
    c.max_seq_len = max_seq;
    return c;
}

const std::vector<NamedPreset>& presets_table() {
    static const std::vector<NamedPreset> table = {
        {"llama2-13b", make(40, 40, 40, 128, 32000, 13824, 10000.0, 4096), false, 90.0},
        {"llama3-8b", make(32, 32, 8, 128, 128256, 14336, 500000.0, 8192), false, 30.0},
        {"llama3-70b", make(80, 64, 8, 128, 128256, 28672, 500000.0, 8192), false, 90.0},
        {"toy-small", make(8, 4, 2, 16, 256, 128, 10000.0, 256), true, std::nullopt},
        {"toy-deep", make(16, 4, 2, 16, 256, 128, 10000.0, 256), true, std::nullopt},
    };
    return table;
}

const NamedPreset& find_preset(std::string_view name) {
    for (const auto& p : presets_table()) {
        if (p.name == name) {
            return p;
        }
    }
    fail(ErrorKind::validation, "unknown preset: " + std::string(name));
}

} // namespace

ModelConfig preset(std::string_view name) {
    return find_preset(name).config;
}

std::vector<std::string> preset_names() {
    std::vector<std::string> names;
    for (const auto& p : presets_table()) {
        names.emplace_back(p.name);
    }
    return names;
}

bool is_desk_scale(std::string_view name) {
    return find_preset(name).desk_scale;
}

std::optional<double> preset_threshold(std::string_view name) {
    return find_preset(name).threshold;
}

void SpectrumSpec::validate(std::size_t num_layers) const {
    require(sigma_max > 0.0 && std::isfinite(sigma_max), "sigma_max must be positive");
    require(decay > 0.0 && decay <= 1.0, "decay must lie in (0, 1]");
    require(layer_decay.empty() || layer_decay.size() == num_layers, "layer_decay needs one entry per layer");
    for (double g : layer_decay) {
        require(g > 0.0 && g <= 1.0, "layer decay must lie in (0, 1]");
    }
}

double SpectrumSpec::decay_for(std::size_t layer) const {
    return layer_decay.empty() ? decay : layer_decay.at(layer);
}

SpectrumSpec graded_spectrum(std::size_t num_layers, double sigma_max, double shallow, double deep) {
    SpectrumSpec s;
    s.sigma_max = sigma_max;
    s.decay = deep;
    s.layer_decay.resize(num_layers);
    for (std::size_t l = 0; l < num_layers; ++l) {
        const double t = num_layers == 1 ? 0.0 : static_cast<double>(l) / static_cast<double>(num_layers - 1);
        s.layer_decay[l] = shallow + t * (deep - shallow);
    }
    return s;
}

Matrix spectral_matrix(std::size_t rows, std::size_t cols, double sigma_max, double decay, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t r = std::min(rows, cols);
    Matrix g1(rows, r);
    for (double& x : g1.data()) {
        x = rng.normal();
    }
    Matrix g2(cols, r);
    for (double& x : g2.data()) {
        x = rng.normal();
    }
    const Matrix q1 = orthonormal_columns(g1);
    const Matrix q2 = orthonormal_columns(g2);
    Matrix scaled = q1;
    for (std::size_t i = 0; i < rows; ++i) {
        auto row = scaled.row(i);
        double s = sigma_max;
        for (std::size_t k = 0; k < r; ++k) {
            row[k] *= s;
            s *= decay;
        }
    }
    return matmul(scaled, q2.transpose());
}

ModelWeights generate_synthetic(const ModelConfig& config, const SpectrumSpec& spectrum, std::uint64_t seed) {
    config.validate();
    spectrum.validate(config.num_layers);
    const Rng root(seed);
    std::uint64_t stream = 0;
    auto next_seed = [&] { return root.fork(stream++).next_u64(); };

    const std::size_t D = config.model_dim;
    ModelWeights w;
    w.config = config;
    w.embedding = spectral_matrix(config.vocab_size, D, std::sqrt(static_cast<double>(config.vocab_size)), 1.0,
                                  next_seed());
    w.layers.reserve(config.num_layers);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        const double s = spectrum.sigma_max;
        const double g = spectrum.decay_for(l);
        LayerWeights lw;
        lw.w_q = spectral_matrix(D, config.num_heads * config.head_dim, s, g, next_seed());
        lw.w_k = spectral_matrix(D, config.kv_dim(), s, g, next_seed());
        lw.w_v = spectral_matrix(D, config.kv_dim(), s, g, next_seed());
        lw.w_o = spectral_matrix(config.num_heads * config.head_dim, D, s, g, next_seed());
        lw.attn_norm.assign(D, 1.0);
        lw.mlp_norm.assign(D, 1.0);
        lw.mlp_gate = spectral_matrix(D, config.mlp_hidden, s, g, next_seed());
        lw.mlp_up = spectral_matrix(D, config.mlp_hidden, s, g, next_seed());
        lw.mlp_down = spectral_matrix(config.mlp_hidden, D, s, g, next_seed());
        w.layers.push_back(std::move(lw));
    }
    w.final_norm.assign(D, 1.0);
    const double head_gain = kLogitScale * std::sqrt(static_cast<double>(config.vocab_size) / static_cast<double>(D));
    w.lm_head = spectral_matrix(D, config.vocab_size, head_gain, 1.0, next_seed());
    return w;
}

void ModelWeights::validate() const {
    config.validate();
    const std::size_t D = config.model_dim;
    const std::size_t hd = config.num_heads * config.head_dim;
    auto shape_is = [](const Matrix& m, std::size_t r, std::size_t c, const char* what) {
        if (m.rows() != r || m.cols() != c) {
            std::ostringstream os;
            os << what << " is " << m.rows() << "x" << m.cols() << ", expected " << r << "x" << c;
            fail(ErrorKind::validation, os.str());
        }
    };
    shape_is(embedding, config.vocab_size, D, "embedding");
    shape_is(lm_head, D, config.vocab_size, "lm_head");
    if (final_norm.size() != D || layers.size() != config.num_layers) {
        fail(ErrorKind::validation, "final_norm length or layer count disagrees with config");
    }
    for (const auto& lw : layers) {
        shape_is(lw.w_q, D, hd, "w_q");
        shape_is(lw.w_k, D, config.kv_dim(), "w_k");
        shape_is(lw.w_v, D, config.kv_dim(), "w_v");
        shape_is(lw.w_o, hd, D, "w_o");
        shape_is(lw.mlp_gate, D, config.mlp_hidden, "mlp_gate");
        shape_is(lw.mlp_up, D, config.mlp_hidden, "mlp_up");
        shape_is(lw.mlp_down, config.mlp_hidden, D, "mlp_down");
        if (lw.attn_norm.size() != D || lw.mlp_norm.size() != D) {
            fail(ErrorKind::validation, "norm gain length disagrees with model_dim");
        }
    }
}

std::vector<double> rms_norm(std::span<const double> x, std::span<const double> gain) {
    const double ms = dot(x, x) / static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(ms + kRmsEps);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * inv * gain[i];
    }
    return out;
}

double silu(double x) {
    return x / (1.0 + std::exp(-x));
}

std::vector<double> swiglu_mlp(const Matrix& gate, const Matrix& up, const Matrix& down, std::span<const double> h) {
    auto g = vecmat(h, gate);
    const auto u = vecmat(h, up);
    for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] = silu(g[i]) * u[i];
    }
    return vecmat(g, down);
}

void softmax_inplace(std::span<double> v) {
    const double m = *std::max_element(v.begin(), v.end());
    double total = 0.0;
    for (double& x : v) {
        x = std::exp(x - m);
        total += x;
    }
    for (double& x : v) {
        x /= total;
    }
}

void check_tokens(const ModelConfig& cfg, std::span<const TokenId> tokens) {
    if (tokens.size() > cfg.max_seq_len) {
        fail(ErrorKind::contract, "sequence longer than max_seq_len");
    }
    for (TokenId t : tokens) {
        if (t >= cfg.vocab_size) {
            fail(ErrorKind::contract, "token id " + std::to_string(t) + " outside the vocabulary");
        }
    }
}

Matrix forward_logits(const ModelWeights& w, std::span<const TokenId> tokens) {
    const ModelConfig& cfg = w.config;
    require(!tokens.empty(), "forward_logits needs at least one token");
    check_tokens(cfg, tokens);
    const std::size_t n = tokens.size();
    const std::size_t D = cfg.model_dim;
    const std::size_t d = cfg.head_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    Matrix x(n, D);
    for (std::size_t t = 0; t < n; ++t) {
        const auto e = w.embedding.row(tokens[t]);
        std::copy(e.begin(), e.end(), x.row(t).begin());
    }

    for (const auto& lw : w.layers) {
        Matrix h(n, D);
        for (std::size_t t = 0; t < n; ++t) {
            const auto r = rms_norm(x.row(t), lw.attn_norm);
            std::copy(r.begin(), r.end(), h.row(t).begin());
        }
        Matrix q = matmul(h, lw.w_q);
        Matrix k = matmul(h, lw.w_k);
        const Matrix v = matmul(h, lw.w_v);
        if (cfg.rope_enabled) {
            for (std::size_t t = 0; t < n; ++t) {
                for (std::size_t j = 0; j < cfg.num_heads; ++j) {
                    rope_rotate_inplace(q.row(t).subspan(j * d, d), t, cfg.rope_base);
                }
                for (std::size_t i = 0; i < cfg.num_kv_heads; ++i) {
                    rope_rotate_inplace(k.row(t).subspan(i * d, d), t, cfg.rope_base);
                }
            }
        }
        Matrix heads(n, cfg.num_heads * d);
        std::vector<double> scores;
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t j = 0; j < cfg.num_heads; ++j) {
                const std::size_t g = cfg.kv_head_of(j);
                const auto qj = q.row(t).subspan(j * d, d);
                scores.assign(t + 1, 0.0);
                for (std::size_t s = 0; s <= t; ++s) {
                    scores[s] = dot(qj, k.row(s).subspan(g * d, d)) * scale;
                }
                softmax_inplace(scores);
                auto out = heads.row(t).subspan(j * d, d);
                for (std::size_t s = 0; s <= t; ++s) {
                    const auto vs = v.row(s).subspan(g * d, d);
                    for (std::size_t c = 0; c < d; ++c) {
                        out[c] += scores[s] * vs[c];
                    }
                }
            }
        }
        x = x + matmul(heads, lw.w_o);
        for (std::size_t t = 0; t < n; ++t) {
            const auto hn = rms_norm(x.row(t), lw.mlp_norm);
            const auto m = swiglu_mlp(lw.mlp_gate, lw.mlp_up, lw.mlp_down, hn);
            auto xr = x.row(t);
            for (std::size_t c = 0; c < D; ++c) {
                xr[c] += m[c];
            }
        }
    }

    Matrix normed(n, D);
    for (std::size_t t = 0; t < n; ++t) {
        const auto r = rms_norm(x.row(t), w.final_norm);
        std::copy(r.begin(), r.end(), normed.row(t).begin());
    }
    return matmul(normed, w.lm_head);
}

std::string layer_tensor(std::size_t layer, std::string_view leaf) {
    return "layers." + std::to_string(layer) + "." + std::string(leaf);
}

void save_model(const ModelWeights& w, const std::filesystem::path& dir) {
    w.validate();
    TensorWriter writer;
    writer.add("embedding", w.embedding);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const auto& lw = w.layers[l];
        writer.add(layer_tensor(l, "w_q"), lw.w_q);
        writer.add(layer_tensor(l, "w_k"), lw.w_k);
        writer.add(layer_tensor(l, "w_v"), lw.w_v);
        writer.add(layer_tensor(l, "w_o"), lw.w_o);
        writer.add(layer_tensor(l, "attn_norm"), std::span<const double>(lw.attn_norm));
        writer.add(layer_tensor(l, "mlp_norm"), std::span<const double>(lw.mlp_norm));
        writer.add(layer_tensor(l, "mlp_gate"), lw.mlp_gate);
        writer.add(layer_tensor(l, "mlp_up"), lw.mlp_up);
        writer.add(layer_tensor(l, "mlp_down"), lw.mlp_down);
    }
    writer.add("final_norm", std::span<const double>(w.final_norm));
    writer.add("lm_head", w.lm_head);
    nlohmann::json header = to_json(w.config);
    header["compressed"] = false;
    writer.write(dir, std::move(header));
}

ModelWeights load_model(const std::filesystem::path& dir) {
    const TensorBundle bundle = TensorBundle::read(dir);
    const auto& header = bundle.header();
    if (header.value("compressed", false)) {
        fail(ErrorKind::format, dir.string() + " holds a compressed model; load it as compressed");
    }
    ModelWeights w;
    w.config = config_from_json(header);
    const ModelConfig& c = w.config;
    const std::size_t D = c.model_dim;
    const std::size_t hd = c.num_heads * c.head_dim;
    w.embedding = bundle.matrix("embedding", c.vocab_size, D);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        LayerWeights lw;
        lw.w_q = bundle.matrix(layer_tensor(l, "w_q"), D, hd);
        lw.w_k = bundle.matrix(layer_tensor(l, "w_k"), D, c.kv_dim());
        lw.w_v = bundle.matrix(layer_tensor(l, "w_v"), D, c.kv_dim());
        lw.w_o = bundle.matrix(layer_tensor(l, "w_o"), hd, D);
        lw.attn_norm = bundle.vector(layer_tensor(l, "attn_norm"));
        lw.mlp_norm = bundle.vector(layer_tensor(l, "mlp_norm"));
        lw.mlp_gate = bundle.matrix(layer_tensor(l, "mlp_gate"), D, c.mlp_hidden);
        lw.mlp_up = bundle.matrix(layer_tensor(l, "mlp_up"), D, c.mlp_hidden);
        lw.mlp_down = bundle.matrix(layer_tensor(l, "mlp_down"), c.mlp_hidden, D);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = bundle.vector("final_norm");
    w.lm_head = bundle.matrix("lm_head", D, c.vocab_size);
    w.validate();
    return w;
}

} // namespace kvsvd
