// SPDX-License-Identifier: Apache-2.0

#include "kvsvd/compressor.hpp"

#include <sstream>

#include "kvsvd/container.hpp"
#include "kvsvd/error.hpp"

namespace kvsvd {

namespace {

struct SplitFactors {
    Matrix down;             // U_c
    std::vector<Matrix> up;  // d-column blocks of Sigma_c V_c^T
};

SplitFactors factor(const Matrix& weight, std::size_t rank, std::size_t kv_heads, std::size_t head_dim) {
    const auto t = truncate(svd(weight), rank);
    SplitFactors f{t.u_k, {}};
    f.up.reserve(kv_heads);
    for (std::size_t i = 0; i < kv_heads; ++i) {
        f.up.push_back(t.sv_t_k.block(0, i * head_dim, rank, head_dim));
    }
    return f;
}

Matrix hstack(const std::vector<Matrix>& blocks) {
    const std::size_t rows = blocks.front().rows();
    std::size_t cols = 0;
    for (const auto& b : blocks) {
        cols += b.cols();
    }
    Matrix out(rows, cols);
    std::size_t c0 = 0;
    for (const auto& b : blocks) {
        for (std::size_t r = 0; r < rows; ++r) {
            const auto src = b.row(r);
            std::copy(src.begin(), src.end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(c0));
        }
        c0 += b.cols();
    }
    return out;
}

} // namespace

CompressedLayer compress_layer(const LayerWeights& lw, std::size_t d_c, const ModelConfig& cfg,
                               std::optional<std::size_t> value_dim) {
    const std::size_t full = cfg.kv_dim();
    const std::size_t d_v = value_dim.value_or(d_c);
    require(d_c >= 1 && d_c <= full, "d_c must lie in [1, h_kv * d]");
    require(d_v >= 1 && d_v <= full, "value d_c must lie in [1, h_kv * d]");
    const std::size_t d = cfg.head_dim;

    CompressedLayer cl;
    cl.d_c = d_c;
    cl.d_c_v = d_v;

    auto keys = factor(lw.w_k, d_c, cfg.num_kv_heads, d);
    cl.key_down = std::move(keys.down);
    cl.key_up = std::move(keys.up);

    auto values = factor(lw.w_v, d_v, cfg.num_kv_heads, d);
    cl.value_down = std::move(values.down);
    cl.value_up = std::move(values.up);

    cl.fused_query.reserve(cfg.num_heads);
    cl.fused_output.reserve(cfg.num_heads);
    for (std::size_t j = 0; j < cfg.num_heads; ++j) {
        const std::size_t g = cfg.kv_head_of(j);
        const Matrix wq_j = lw.w_q.block(0, j * d, cfg.model_dim, d);
        cl.fused_query.push_back(matmul(wq_j, cl.key_up[g].transpose()));
        const Matrix wo_j = lw.w_o.block(j * d, 0, d, cfg.model_dim);
        cl.fused_output.push_back(matmul(cl.value_up[g], wo_j));
    }

    cl.w_q = lw.w_q;
    cl.w_o = lw.w_o;
    cl.attn_norm = lw.attn_norm;
    cl.mlp_norm = lw.mlp_norm;
    cl.mlp_gate = lw.mlp_gate;
    cl.mlp_up = lw.mlp_up;
    cl.mlp_down = lw.mlp_down;
    return cl;
}

Matrix approx_key_weight(const CompressedLayer& cl) {
    return matmul(cl.key_down, hstack(cl.key_up));
}

Matrix approx_value_weight(const CompressedLayer& cl) {
    return matmul(cl.value_down, hstack(cl.value_up));
}

std::vector<double> CompressedModel::layer_ratios() const {
    std::vector<double> out;
    const double full = static_cast<double>(config.kv_dim());
    for (const auto& slot : layers) {
        if (const auto* cl = std::get_if<CompressedLayer>(&slot)) {
            out.push_back(static_cast<double>(cl->d_c) / full);
        } else {
            out.push_back(1.0);
        }
    }
    return out;
}

double CompressedModel::retained_ratio() const {
    std::size_t total = 0;
    for (const auto& slot : layers) {
        if (const auto* cl = std::get_if<CompressedLayer>(&slot)) {
            total += cl->d_c;
        } else {
            total += config.kv_dim();
        }
    }
    return static_cast<double>(total) / static_cast<double>(layers.size() * config.kv_dim());
}

CompressedModel compress_model(const ModelWeights& w, const CompressionPlan& plan) {
    w.validate();
    if (plan.layers.size() != w.config.num_layers || plan.full_dim != w.config.kv_dim()) {
        fail(ErrorKind::validation, "plan does not match the model configuration");
    }
    CompressedModel cm;
    cm.config = w.config;
    cm.plan = plan;
    cm.embedding = w.embedding;
    cm.final_norm = w.final_norm;
    cm.lm_head = w.lm_head;
    cm.layers.reserve(w.layers.size());
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const auto& entry = plan.layers[l];
        if (entry.layer != l) {
            fail(ErrorKind::validation, "plan layers out of order");
        }
        if (entry.skip) {
            cm.layers.emplace_back(w.layers[l]);
        } else {
            cm.layers.emplace_back(compress_layer(w.layers[l], entry.d_c, w.config));
        }
    }
    return cm;
}

void save_compressed(const CompressedModel& cm, const std::filesystem::path& dir) {
    TensorWriter writer;
    writer.add("embedding", cm.embedding);
    for (std::size_t l = 0; l < cm.layers.size(); ++l) {
        if (const auto* lw = std::get_if<LayerWeights>(&cm.layers[l])) {
            writer.add(layer_tensor(l, "w_q"), lw->w_q);
            writer.add(layer_tensor(l, "w_k"), lw->w_k);
            writer.add(layer_tensor(l, "w_v"), lw->w_v);
            writer.add(layer_tensor(l, "w_o"), lw->w_o);
            writer.add(layer_tensor(l, "attn_norm"), std::span<const double>(lw->attn_norm));
            writer.add(layer_tensor(l, "mlp_norm"), std::span<const double>(lw->mlp_norm));
            writer.add(layer_tensor(l, "mlp_gate"), lw->mlp_gate);
            writer.add(layer_tensor(l, "mlp_up"), lw->mlp_up);
            writer.add(layer_tensor(l, "mlp_down"), lw->mlp_down);
            continue;
        }
        const auto& cl = std::get<CompressedLayer>(cm.layers[l]);
        writer.add(layer_tensor(l, "P_k"), cl.key_down);
        for (std::size_t i = 0; i < cl.key_up.size(); ++i) {
            writer.add(layer_tensor(l, "A." + std::to_string(i)), cl.key_up[i]);
        }
        for (std::size_t j = 0; j < cl.fused_query.size(); ++j) {
            writer.add(layer_tensor(l, "Wq_fused." + std::to_string(j)), cl.fused_query[j]);
        }
        writer.add(layer_tensor(l, "P_v"), cl.value_down);
        for (std::size_t i = 0; i < cl.value_up.size(); ++i) {
            writer.add(layer_tensor(l, "B." + std::to_string(i)), cl.value_up[i]);
        }
        for (std::size_t j = 0; j < cl.fused_output.size(); ++j) {
            writer.add(layer_tensor(l, "M." + std::to_string(j)), cl.fused_output[j]);
        }
        writer.add(layer_tensor(l, "w_q"), cl.w_q);
        writer.add(layer_tensor(l, "w_o"), cl.w_o);
        writer.add(layer_tensor(l, "attn_norm"), std::span<const double>(cl.attn_norm));
        writer.add(layer_tensor(l, "mlp_norm"), std::span<const double>(cl.mlp_norm));
        writer.add(layer_tensor(l, "mlp_gate"), cl.mlp_gate);
        writer.add(layer_tensor(l, "mlp_up"), cl.mlp_up);
        writer.add(layer_tensor(l, "mlp_down"), cl.mlp_down);
    }
    writer.add("final_norm", std::span<const double>(cm.final_norm));
    writer.add("lm_head", cm.lm_head);

    nlohmann::json header = to_json(cm.config);
    header["compressed"] = true;
    header["plan"] = to_json(cm.plan);
    writer.write(dir, std::move(header));
}

bool is_compressed_container(const std::filesystem::path& dir) {
    const auto header = read_json_file(dir / "config.json");
    return header.is_object() && header.value("compressed", false);
}

CompressedModel load_compressed(const std::filesystem::path& dir) {
    const TensorBundle bundle = TensorBundle::read(dir);
    const auto& header = bundle.header();
    if (!header.value("compressed", false)) {
        fail(ErrorKind::format, dir.string() + " holds a plain model, not a compressed one");
    }
    if (!header.contains("plan")) {
        fail(ErrorKind::format, "compressed container lacks its plan");
    }
    CompressedModel cm;
    cm.config = config_from_json(header);
    cm.plan = plan_from_json(header["plan"]);
    const ModelConfig& c = cm.config;
    const std::size_t D = c.model_dim;
    const std::size_t d = c.head_dim;
    const std::size_t hd = c.num_heads * d;
    if (cm.plan.layers.size() != c.num_layers || cm.plan.full_dim != c.kv_dim()) {
        fail(ErrorKind::validation, "embedded plan does not match the model configuration");
    }

    cm.embedding = bundle.matrix("embedding", c.vocab_size, D);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        const auto& entry = cm.plan.layers[l];
        const bool has_factors = bundle.contains(layer_tensor(l, "P_k"));
        if (entry.skip) {
            if (has_factors) {
                fail(ErrorKind::validation, "layer " + std::to_string(l) + " is skipped in the plan but has factors");
            }
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
            cm.layers.emplace_back(std::move(lw));
            continue;
        }

        CompressedLayer cl;
        cl.key_down = bundle.matrix(layer_tensor(l, "P_k"));
        if (cl.key_down.rows() != D || cl.key_down.cols() != entry.d_c) {
            std::ostringstream os;
            os << "layer " << l << ": plan d_c = " << entry.d_c << " but P_k is " << cl.key_down.rows() << "x"
               << cl.key_down.cols();
            fail(ErrorKind::validation, os.str());
        }
        cl.d_c = entry.d_c;
        cl.value_down = bundle.matrix(layer_tensor(l, "P_v"));
        if (cl.value_down.rows() != D || cl.value_down.cols() > c.kv_dim()) {
            fail(ErrorKind::validation, "layer " + std::to_string(l) + ": P_v has the wrong shape");
        }
        cl.d_c_v = cl.value_down.cols();
        for (std::size_t i = 0; i < c.num_kv_heads; ++i) {
            cl.key_up.push_back(bundle.matrix(layer_tensor(l, "A." + std::to_string(i)), cl.d_c, d));
            cl.value_up.push_back(bundle.matrix(layer_tensor(l, "B." + std::to_string(i)), cl.d_c_v, d));
        }
        for (std::size_t j = 0; j < c.num_heads; ++j) {
            cl.fused_query.push_back(bundle.matrix(layer_tensor(l, "Wq_fused." + std::to_string(j)), D, cl.d_c));
            cl.fused_output.push_back(bundle.matrix(layer_tensor(l, "M." + std::to_string(j)), cl.d_c_v, D));
        }
        cl.w_q = bundle.matrix(layer_tensor(l, "w_q"), D, hd);
        cl.w_o = bundle.matrix(layer_tensor(l, "w_o"), hd, D);
        cl.attn_norm = bundle.vector(layer_tensor(l, "attn_norm"));
        cl.mlp_norm = bundle.vector(layer_tensor(l, "mlp_norm"));
        cl.mlp_gate = bundle.matrix(layer_tensor(l, "mlp_gate"), D, c.mlp_hidden);
        cl.mlp_up = bundle.matrix(layer_tensor(l, "mlp_up"), D, c.mlp_hidden);
        cl.mlp_down = bundle.matrix(layer_tensor(l, "mlp_down"), c.mlp_hidden, D);
        cm.layers.emplace_back(std::move(cl));
    }
    cm.final_norm = bundle.vector("final_norm");
    cm.lm_head = bundle.matrix("lm_head", D, c.vocab_size);
    return cm;
}

} // namespace kvsvd
