// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Every command that writes files also writes a
// run manifest next to them; errors go to stderr as one JSON line.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "kvsvd/bounds.hpp"
#include "kvsvd/compressor.hpp"
#include "kvsvd/container.hpp"
#include "kvsvd/error.hpp"
#include "kvsvd/experiments.hpp"
#include "kvsvd/model.hpp"
#include "kvsvd/rng.hpp"
#include "kvsvd/runtime.hpp"
#include "kvsvd/sensitivity.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kvsvd;

namespace {

constexpr const char* kToolVersion = "0.1.0";
constexpr const char* kOutDirEnv = "KVSVD_OUT_DIR";

struct Context {
    std::vector<std::string> argv;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    json seeds = json::object();
    json inputs = json::array();
    json outputs = json::array();
};

Context g_ctx;

json manifest(const std::string& command) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - g_ctx.start).count();
    return {
        {"command", command},     {"args", g_ctx.argv},      {"seeds", g_ctx.seeds},
        {"inputs", g_ctx.inputs}, {"outputs", g_ctx.outputs}, {"tool_version", kToolVersion},
        {"duration_sec", secs},
    };
}

/// --out if given, else $KVSVD_OUT_DIR/<fallback>, else empty.
fs::path resolve_out(const std::string& out, const std::string& fallback) {
    if (!out.empty()) {
        return out;
    }
    if (const char* env = std::getenv(kOutDirEnv); env && *env) {
        return fs::path(env) / fallback;
    }
    return {};
}

fs::path require_out(const std::string& out, const std::string& fallback) {
    auto p = resolve_out(out, fallback);
    if (p.empty()) {
        fail(ErrorKind::validation, std::string("--out is required when ") + kOutDirEnv + " is unset");
    }
    return p;
}

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    write_text_file(path, text);
    g_ctx.outputs.push_back(path.string());
}

/// Manifest for a directory output lives inside it; for a file output it
/// sits beside it as <file>.manifest.json.
void write_manifest(const std::string& command, const fs::path& output, bool is_dir) {
    const fs::path where = is_dir ? output / "manifest.json" : fs::path(output.string() + ".manifest.json");
    write_text_file(where, manifest(command).dump(2) + "\n");
}

double parse_threshold(const std::string& s) {
    if (s == "inf" || s == "infinity") {
        return std::numeric_limits<double>::infinity();
    }
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size() || !(v > 0.0)) {
            throw std::invalid_argument(s);
        }
        return v;
    } catch (const std::logic_error&) {
        fail(ErrorKind::validation, "threshold must be a positive number or inf, got " + s);
    }
}

std::vector<TokenId> parse_tokens(const std::string& s) {
    std::vector<TokenId> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(static_cast<TokenId>(std::stoul(item)));
        } catch (const std::logic_error&) {
            fail(ErrorKind::validation, "bad token id: " + item);
        }
    }
    return out;
}

std::vector<TokenId> seeded_prompt(const ModelConfig& cfg, std::uint64_t seed, std::size_t len) {
    return make_eval_set(cfg, 1, len, 1, seed).prompts.front();
}

struct LoadedModel {
    std::optional<ModelWeights> plain;
    std::optional<CompressedModel> compressed;

    ModelView view() const { return plain ? ModelView(*plain) : ModelView(*compressed); }
};

LoadedModel load_any(const fs::path& dir) {
    g_ctx.inputs.push_back(dir.string());
    LoadedModel m;
    if (is_compressed_container(dir)) {
        m.compressed = load_compressed(dir);
    } else {
        m.plain = load_model(dir);
    }
    return m;
}

ModelWeights load_plain(const fs::path& dir) {
    g_ctx.inputs.push_back(dir.string());
    return load_model(dir);
}

void emit(const std::string& text, const fs::path& out, const std::string& command) {
    if (out.empty()) {
        std::cout << text;
    } else {
        write_file(out, text);
        write_manifest(command, out, false);
    }
}

// ---- gen ----

struct GenArgs {
    std::string preset = "toy-small";
    bool allow_large = false;
    std::uint64_t seed = 0;
    double sigma_max = 1.0;
    double decay = 1.0;
    double shallow_decay = 0.0;
    double deep_decay = 0.0;
    bool no_rope = false;
    std::size_t layers = 0;
    std::size_t heads = 0;
    std::size_t kv_heads = 0;
    std::size_t head_dim = 0;
    std::size_t vocab = 0;
    std::size_t mlp = 0;
    std::size_t max_seq = 0;
    double rope_base = 0.0;
    std::string out;
};

void run_gen(const GenArgs& a) {
    ModelConfig cfg = preset(a.preset);
    if (!is_desk_scale(a.preset) && !a.allow_large) {
        fail(ErrorKind::validation,
             "preset " + a.preset + " is not desk-scale; pass --allow-large to generate it anyway");
    }
    auto set = [](std::size_t& field, std::size_t v) {
        if (v > 0) {
            field = v;
        }
    };
    set(cfg.num_layers, a.layers);
    set(cfg.num_heads, a.heads);
    set(cfg.num_kv_heads, a.kv_heads);
    set(cfg.head_dim, a.head_dim);
    set(cfg.vocab_size, a.vocab);
    set(cfg.mlp_hidden, a.mlp);
    set(cfg.max_seq_len, a.max_seq);
    if (a.rope_base > 0.0) {
        cfg.rope_base = a.rope_base;
    }
    cfg.model_dim = cfg.num_heads * cfg.head_dim;
    cfg.rope_enabled = !a.no_rope;
    try {
        cfg.validate();
    } catch (const Error& e) {
        fail(ErrorKind::validation, e.what());
    }

    SpectrumSpec spec;
    if (a.shallow_decay > 0.0 || a.deep_decay > 0.0) {
        spec = graded_spectrum(cfg.num_layers, a.sigma_max, a.shallow_decay > 0.0 ? a.shallow_decay : a.decay,
                               a.deep_decay > 0.0 ? a.deep_decay : a.decay);
    } else {
        spec.sigma_max = a.sigma_max;
        spec.decay = a.decay;
    }
    try {
        spec.validate(cfg.num_layers);
    } catch (const Error& e) {
        fail(ErrorKind::validation, e.what());
    }
    g_ctx.seeds["model"] = a.seed;
    const fs::path out = require_out(a.out, "model");
    save_model(generate_synthetic(cfg, spec, a.seed), out);
    g_ctx.outputs.push_back(out.string());
    write_manifest("gen", out, true);
}

// ---- plan ----

struct PlanArgs {
    std::string model;
    std::string strategy = "progressive";
    std::size_t d_max = 0;
    std::size_t d_min = 0;
    double target_ratio = 0.0;
    std::string threshold = "inf";
    std::size_t align = 1;
    std::size_t d_c = 0;
    double alpha = 0.0;
    double ratio = 0.0;
    std::string out;
};

void run_plan(const PlanArgs& a) {
    const auto w = load_plain(a.model);
    const auto sens = layer_sensitivities(w);
    const std::size_t full = w.config.kv_dim();
    const double threshold = parse_threshold(a.threshold);
    CompressionPlan plan;
    switch (strategy_from_string(a.strategy)) {
    case Strategy::progressive: {
        const std::size_t d_max = a.d_max > 0 ? a.d_max : full;
        std::size_t d_min = a.d_min;
        if (a.target_ratio > 0.0) {
            d_min = solve_dmin(sens, full, d_max, threshold, a.target_ratio, {a.align});
        } else if (d_min == 0) {
            fail(ErrorKind::validation, "progressive planning needs --d-min or --target-ratio");
        }
        plan = plan_progressive(sens, full, d_max, d_min, threshold, {a.align});
        break;
    }
    case Strategy::uniform:
        if (a.d_c == 0) {
            fail(ErrorKind::validation, "uniform planning needs --d-c");
        }
        plan = plan_uniform(sens, full, a.d_c, threshold);
        break;
    case Strategy::variance_fraction:
        plan = plan_variance_fraction(w, a.alpha);
        break;
    case Strategy::optimal_ratio:
        plan = plan_optimal_ratio(sens, full, a.ratio);
        break;
    case Strategy::custom:
        fail(ErrorKind::validation, "custom plans are written by hand, not generated");
    }
    json j = to_json(plan);
    j["retained_ratio"] = plan.retained_ratio();
    emit(j.dump(2) + "\n", resolve_out(a.out, ""), "plan");
}

// ---- compress ----

void run_compress(const std::string& model, const std::string& plan_path, const std::string& out_arg) {
    const auto w = load_plain(model);
    g_ctx.inputs.push_back(plan_path);
    const auto plan = plan_from_json(read_json_file(plan_path));
    const auto cm = compress_model(w, plan);
    const fs::path out = require_out(out_arg, "compressed");
    save_compressed(cm, out);
    g_ctx.outputs.push_back(out.string());
    write_manifest("compress", out, true);
    json summary = {{"retained_ratio", cm.retained_ratio()}, {"plan_retained_ratio", plan.retained_ratio()},
                    {"layer_ratios", cm.layer_ratios()}, {"out", out.string()}};
    std::cout << summary.dump() << "\n";
}

// ---- decode-compare ----

struct CompareArgs {
    std::string model;
    std::string compressed;
    std::string prompt;
    std::uint64_t prompt_seed = 0;
    std::size_t prompt_len = 8;
    std::size_t steps = 32;
    int width = 64;
    std::string path = "fused";
    std::string format = "json";
    std::uint64_t batch = 1;
    std::uint64_t seq = 0;
    std::uint64_t bytes = 2;
    bool joint = false;
    bool logits = false;
    std::string out;
};

void run_compare(const CompareArgs& a) {
    const auto ref = load_any(a.model);
    const auto cand = load_any(a.compressed);
    const ModelConfig& cfg = ref.view().config();
    std::vector<TokenId> prompt;
    if (!a.prompt.empty()) {
        prompt = parse_tokens(a.prompt);
    } else {
        g_ctx.seeds["prompt"] = a.prompt_seed;
        prompt = seeded_prompt(cfg, a.prompt_seed, a.prompt_len);
    }
    if (a.width != 64 && a.width != 32) {
        fail(ErrorKind::validation, "--width must be 64 or 32");
    }
    if (a.path != "fused" && a.path != "reconstruct") {
        fail(ErrorKind::validation, "--path must be fused or reconstruct");
    }
    DecodeOptions opts;
    opts.width = a.width == 64 ? CacheWidth::f64 : CacheWidth::f32;
    opts.path = a.path == "fused" ? AttentionPath::fused : AttentionPath::reconstruct;
    const auto report = decode_compare(ref.view(), cand.view(), prompt, a.steps, opts);

    json j = to_json(report, a.logits);
    const std::uint64_t seq = a.seq > 0 ? a.seq : prompt.size() + a.steps;
    j["prompt"] = prompt;
    j["cache_accounting"] = {
        {"batch", a.batch},
        {"seq_len", seq},
        {"bytes_per_elem", a.bytes},
        {"count_kv_jointly", a.joint},
        {"reference_bytes", cache_bytes(cfg, ref.view().plan(), a.batch, seq, a.bytes, a.joint)},
        {"candidate_bytes", cache_bytes(cfg, cand.view().plan(), a.batch, seq, a.bytes, a.joint)},
    };
    j["options"] = {{"width", a.width}, {"path", a.path}};

    const fs::path out = resolve_out(a.out, "decode_compare");
    if (!out.empty()) {
        std::error_code ec;
        fs::create_directories(out, ec);
        write_file(out / "report.json", j.dump(2) + "\n");
        write_file(out / "trace.csv", to_csv(report));
        write_manifest("decode-compare", out, true);
    }
    if (a.format == "csv") {
        std::cout << to_csv(report);
    } else if (a.format == "text") {
        std::cout << "steps " << report.steps.size() << "\nmax_abs_logit_diff " << report.max_abs_logit_diff
                  << "\nmean_kl " << report.mean_kl << "\ntop1_agreement " << report.agreement
                  << "\nreference_cache_bytes " << report.reference_cache_bytes << "\ncandidate_cache_bytes "
                  << report.candidate_cache_bytes << "\n";
    } else {
        std::cout << j.dump(2) << "\n";
    }
}

// ---- profile-layer ----

std::vector<std::size_t> parse_sizes(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoul(item));
        } catch (const std::logic_error&) {
            fail(ErrorKind::validation, "bad integer in list: " + item);
        }
    }
    return out;
}

struct EvalArgs {
    std::uint64_t prompt_seed = 0;
    std::size_t prompts = 4;
    std::size_t prompt_len = 8;
    std::size_t steps = 32;
};

void add_eval_options(CLI::App* cmd, EvalArgs& e) {
    cmd->add_option("--prompt-seed", e.prompt_seed, "Seed for the evaluation prompts");
    cmd->add_option("--prompts", e.prompts, "Number of evaluation prompts");
    cmd->add_option("--prompt-len", e.prompt_len, "Prompt length in tokens");
    cmd->add_option("--steps", e.steps, "Decode steps per prompt");
}

void run_profile(const std::string& model, const std::string& dims_arg, const EvalArgs& e, const std::string& out) {
    const auto w = load_plain(model);
    const std::size_t full = w.config.kv_dim();
    std::vector<std::size_t> dims = dims_arg.empty()
                                        ? std::vector<std::size_t>{full / 4, full * 3 / 8, full / 2}
                                        : parse_sizes(dims_arg);
    g_ctx.seeds["prompt"] = e.prompt_seed;
    const KlEvaluator ev(w, make_eval_set(w.config, e.prompts, e.prompt_len, e.steps, e.prompt_seed));
    const Matrix grid = profile_grid(w, dims, ev);
    std::ostringstream os;
    os.precision(17);
    os << "layer";
    for (auto d : dims) {
        os << ",d_c=" << d;
    }
    os << "\n";
    for (std::size_t l = 0; l < grid.rows(); ++l) {
        os << l;
        for (std::size_t c = 0; c < grid.cols(); ++c) {
            os << ',' << grid(l, c);
        }
        os << "\n";
    }
    emit(os.str(), resolve_out(out, ""), "profile-layer");
}

// ---- experiments ----

struct SetupArgs {
    std::size_t models = 20;
    std::uint64_t base_seed = 1;
    double sigma_max = 0.0;
    double shallow_decay = 0.0;
    double deep_decay = 0.0;
    EvalArgs eval;
};

void add_setup_options(CLI::App* cmd, SetupArgs& s) {
    cmd->add_option("--models", s.models, "Number of seeded toy-deep models");
    cmd->add_option("--base-seed", s.base_seed, "Seed of the first model");
    cmd->add_option("--sigma-max", s.sigma_max, "Largest singular value of each projection");
    cmd->add_option("--shallow-decay", s.shallow_decay, "Spectral decay at layer 0");
    cmd->add_option("--deep-decay", s.deep_decay, "Spectral decay at the last layer");
    cmd->add_option("--prompts", s.eval.prompts, "Evaluation prompts per model");
    cmd->add_option("--prompt-len", s.eval.prompt_len, "Prompt length in tokens");
    cmd->add_option("--steps", s.eval.steps, "Decode steps per prompt");
}

ExperimentSetup to_setup(const SetupArgs& s) {
    ExperimentSetup e;
    e.num_models = s.models;
    e.base_seed = s.base_seed;
    e.sigma_max = s.sigma_max;
    e.shallow_decay = s.shallow_decay;
    e.deep_decay = s.deep_decay;
    e.num_prompts = s.eval.prompts;
    e.prompt_len = s.eval.prompt_len;
    e.steps = s.eval.steps;
    g_ctx.seeds["base_seed"] = s.base_seed;
    return e;
}

void run_shallow_vs_deep(const std::string& model, const SetupArgs& s, double fraction, double layer_ratio,
                         const std::string& out) {
    json j;
    if (!model.empty()) {
        const auto w = load_plain(model);
        g_ctx.seeds["prompt"] = s.eval.prompt_seed;
        const KlEvaluator ev(
            w, make_eval_set(w.config, s.eval.prompts, s.eval.prompt_len, s.eval.steps, s.eval.prompt_seed));
        j = to_json(shallow_vs_deep(w, fraction, layer_ratio, ev));
    } else {
        j = to_json(progressive_vs_shallow(to_setup(s), fraction, layer_ratio));
    }
    j["fraction"] = fraction;
    j["layer_ratio"] = layer_ratio;
    emit(j.dump(2) + "\n", resolve_out(out, ""), "shallow-vs-deep");
}

void run_prog_vs_uniform(const SetupArgs& s, double ratio, const std::string& out) {
    json j = to_json(progressive_vs_uniform(to_setup(s), ratio));
    j["ratio"] = ratio;
    emit(j.dump(2) + "\n", resolve_out(out, ""), "progressive-vs-uniform");
}

void run_sweep(const SetupArgs& s, const std::string& ratios_arg, const std::string& out) {
    std::vector<double> ratios;
    std::stringstream ss(ratios_arg);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            ratios.push_back(std::stod(item));
        } catch (const std::logic_error&) {
            fail(ErrorKind::validation, "bad ratio: " + item);
        }
    }
    const auto setup = to_setup(s);
    const Matrix grid = ratio_sweep(setup, ratios);
    std::ostringstream os;
    os.precision(17);
    os << "seed";
    for (double r : ratios) {
        os << ",ratio=" << r;
    }
    os << "\n";
    for (std::size_t i = 0; i < grid.rows(); ++i) {
        os << setup.model_seed(i);
        for (std::size_t c = 0; c < grid.cols(); ++c) {
            os << ',' << grid(i, c);
        }
        os << "\n";
    }
    emit(os.str(), resolve_out(out, ""), "sweep");
}

// ---- verify-bounds ----

struct BoundsArgs {
    std::string model;
    std::string plan;
    std::string kind = "chain";
    std::size_t layers = 4;
    std::size_t min_width = 8;
    std::size_t max_width = 32;
    std::string activation = "relu";
    std::string ranks;
    std::size_t rows = 32;
    std::size_t cols = 16;
    std::size_t rank = 4;
    std::size_t samples = 1000;
    std::uint64_t seed = 0;
    std::string prompt;
    std::size_t steps = 16;
    std::string out;
};

void run_bounds(const BoundsArgs& a) {
    g_ctx.seeds["sample"] = a.seed;
    json j;
    if (!a.model.empty()) {
        const auto w = load_plain(a.model);
        if (a.plan.empty()) {
            fail(ErrorKind::validation, "--plan is required with --model");
        }
        g_ctx.inputs.push_back(a.plan);
        const auto plan = plan_from_json(read_json_file(a.plan));
        const auto prompt = a.prompt.empty() ? seeded_prompt(w.config, a.seed, 8) : parse_tokens(a.prompt);
        j = to_json(advisory_model_report(w, plan, prompt, a.steps));
        j["kind"] = "model";
        j["note"] = "decoder layers are not a chain network; the inequality is not asserted";
    } else if (a.kind == "matrix") {
        Rng rng(a.seed);
        const Matrix w = spectral_matrix(a.rows, a.cols, 1.0, 0.8, rng.next_u64());
        j = to_json(verify_theorem1(w, a.rank, a.samples, rng.next_u64()));
        j["kind"] = "matrix";
    } else if (a.kind == "chain") {
        const auto act = activation_from_string(a.activation);
        const auto net = random_chain(a.layers, a.min_width, a.max_width, act, a.seed);
        std::vector<std::size_t> ranks;
        if (a.ranks.empty()) {
            for (const auto& m : net.weights) {
                ranks.push_back(std::min(m.rows(), m.cols()) / 2);
            }
        } else {
            ranks = parse_sizes(a.ranks);
        }
        if (ranks.size() != net.weights.size()) {
            fail(ErrorKind::validation, "--ranks needs one entry per layer");
        }
        for (std::size_t i = 0; i < ranks.size(); ++i) {
            if (ranks[i] > std::min(net.weights[i].rows(), net.weights[i].cols())) {
                fail(ErrorKind::validation, "rank for layer " + std::to_string(i + 1) + " exceeds min(rows, cols)");
            }
        }
        j = to_json(verify_theorem3(net, ranks, a.samples, splitmix64(a.seed)));
        j["kind"] = "chain";
        j["activation"] = a.activation;
        j["ranks"] = ranks;
        j["lipschitz"] = net.lipschitz();
    } else {
        fail(ErrorKind::validation, "--kind must be chain or matrix");
    }
    emit(j.dump(2) + "\n", resolve_out(a.out, ""), "verify-bounds");
}

// ---- memory ----

struct MemoryArgs {
    std::string preset;
    std::string model;
    std::string plan;
    std::uint64_t batch = 64;
    std::uint64_t seq = 2048;
    std::uint64_t bytes = 2;
    bool joint = false;
    std::string format = "text";
    std::string out;
};

void run_memory(const MemoryArgs& a) {
    ModelConfig cfg;
    if (!a.model.empty()) {
        g_ctx.inputs.push_back(a.model);
        cfg = config_from_json(read_json_file(fs::path(a.model) / "config.json"));
    } else if (!a.preset.empty()) {
        cfg = preset(a.preset);
    } else {
        fail(ErrorKind::validation, "memory needs --preset or --model");
    }
    if (a.batch == 0 || a.seq == 0 || a.bytes == 0) {
        fail(ErrorKind::validation, "--batch, --seq and --bytes must be positive");
    }
    std::optional<CompressionPlan> plan;
    if (!a.plan.empty()) {
        g_ctx.inputs.push_back(a.plan);
        plan = plan_from_json(read_json_file(a.plan));
        if (plan->full_dim != cfg.kv_dim()) {
            fail(ErrorKind::validation, "plan full_dim differs from the model's h_kv * d");
        }
    }
    const auto full = cache_bytes(cfg, nullptr, a.batch, a.seq, a.bytes, a.joint);
    json j = {{"batch", a.batch},          {"seq_len", a.seq}, {"bytes_per_elem", a.bytes},
              {"count_kv_jointly", a.joint}, {"num_layers", cfg.num_layers}, {"kv_dim", cfg.kv_dim()},
              {"full_bytes", full}};
    if (!a.preset.empty()) {
        j["preset"] = a.preset;
    }
    if (plan) {
        const auto comp = cache_bytes(cfg, &*plan, a.batch, a.seq, a.bytes, a.joint);
        j["compressed_bytes"] = comp;
        j["ratio"] = static_cast<double>(comp) / static_cast<double>(full);
    }
    std::string text;
    if (a.format == "json") {
        text = j.dump(2) + "\n";
    } else {
        std::ostringstream os;
        os << "layers " << cfg.num_layers << "  kv_dim " << cfg.kv_dim() << "  batch " << a.batch << "  seq "
           << a.seq << "  bytes/elem " << a.bytes << "  joint " << (a.joint ? "yes" : "no") << "\n";
        os << "full_bytes " << full << " (" << static_cast<double>(full) / 1e9 << " GB)\n";
        if (plan) {
            const auto comp = j["compressed_bytes"].get<std::uint64_t>();
            os << "compressed_bytes " << comp << " (" << static_cast<double>(comp) / 1e9 << " GB)  ratio "
               << j["ratio"].get<double>() << "\n";
        }
        text = os.str();
    }
    emit(text, resolve_out(a.out, ""), "memory");
}

int exit_code(ErrorKind k) {
    switch (k) {
    case ErrorKind::numerical: return 3;
    case ErrorKind::io:
    case ErrorKind::checksum: return 4;
    default: return 2;
    }
}

int report_error(const std::string& kind, const std::string& message, int code) {
    std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << "\n";
    return code;
}

} // namespace

int main(int argc, char** argv) {
    g_ctx.argv.assign(argv, argv + argc);
    CLI::App app{"Low-rank KV cache compression toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    GenArgs gen;
    auto* c_gen = app.add_subcommand("gen", "Generate a synthetic model container");
    c_gen->add_option("--preset", gen.preset, "Model preset")->check(CLI::IsMember(preset_names()));
    c_gen->add_flag("--allow-large", gen.allow_large, "Permit presets that are not desk-scale");
    c_gen->add_option("--seed", gen.seed, "Generator seed");
    c_gen->add_option("--sigma-max", gen.sigma_max, "Largest singular value of each projection");
    c_gen->add_option("--decay", gen.decay, "Geometric spectral decay for every layer");
    c_gen->add_option("--shallow-decay", gen.shallow_decay, "Decay at layer 0 (graded spectra)");
    c_gen->add_option("--deep-decay", gen.deep_decay, "Decay at the last layer (graded spectra)");
    c_gen->add_flag("--no-rope", gen.no_rope, "Disable rotary position embedding");
    c_gen->add_option("--layers", gen.layers, "Override number of layers");
    c_gen->add_option("--heads", gen.heads, "Override number of query heads");
    c_gen->add_option("--kv-heads", gen.kv_heads, "Override number of kv heads");
    c_gen->add_option("--head-dim", gen.head_dim, "Override head dimension");
    c_gen->add_option("--vocab", gen.vocab, "Override vocabulary size");
    c_gen->add_option("--mlp", gen.mlp, "Override MLP hidden width");
    c_gen->add_option("--max-seq", gen.max_seq, "Override maximum sequence length");
    c_gen->add_option("--rope-base", gen.rope_base, "Override RoPE base");
    c_gen->add_option("--out", gen.out, "Output container directory");

    PlanArgs plan;
    auto* c_plan = app.add_subcommand("plan", "Compute a compression plan");
    c_plan->add_option("--model", plan.model, "Model container")->required();
    c_plan->add_option("--strategy", plan.strategy,
                       "progressive | uniform | variance-fraction | optimal-ratio");
    c_plan->add_option("--d-max", plan.d_max, "Largest compressed dimension (default h_kv*d)");
    c_plan->add_option("--d-min", plan.d_min, "Smallest compressed dimension");
    c_plan->add_option("--target-ratio", plan.target_ratio, "Solve d_min for this retained ratio");
    c_plan->add_option("--threshold", plan.threshold, "Skip layers whose cumulative condition number exceeds this");
    c_plan->add_option("--align", plan.align, "Round dimensions up to a multiple of this");
    c_plan->add_option("--d-c", plan.d_c, "Uniform compressed dimension");
    c_plan->add_option("--alpha", plan.alpha, "Variance fraction to keep");
    c_plan->add_option("--ratio", plan.ratio, "Product of per-layer ratios (optimal-ratio)");
    c_plan->add_option("--out", plan.out, "Write the plan here instead of stdout");

    std::string cmp_model;
    std::string cmp_plan;
    std::string cmp_out;
    auto* c_compress = app.add_subcommand("compress", "Compress a model with a plan");
    c_compress->add_option("--model", cmp_model, "Model container")->required();
    c_compress->add_option("--plan", cmp_plan, "Plan JSON")->required();
    c_compress->add_option("--out", cmp_out, "Output container directory");

    CompareArgs cmpr;
    auto* c_cmp = app.add_subcommand("decode-compare", "Decode with two models and compare logits");
    c_cmp->add_option("--model", cmpr.model, "Reference container")->required();
    c_cmp->add_option("--compressed", cmpr.compressed, "Candidate container")->required();
    c_cmp->add_option("--prompt", cmpr.prompt, "Comma-separated token ids");
    c_cmp->add_option("--prompt-seed", cmpr.prompt_seed, "Seed for a random prompt");
    c_cmp->add_option("--prompt-len", cmpr.prompt_len, "Length of the random prompt");
    c_cmp->add_option("--steps", cmpr.steps, "Decode steps");
    c_cmp->add_option("--width", cmpr.width, "Cache element width in bits (64 or 32)");
    c_cmp->add_option("--path", cmpr.path, "fused | reconstruct");
    c_cmp->add_option("--format", cmpr.format, "json | csv | text")->check(CLI::IsMember({"json", "csv", "text"}));
    c_cmp->add_option("--batch", cmpr.batch, "Batch size for cache accounting");
    c_cmp->add_option("--seq", cmpr.seq, "Sequence length for cache accounting (default prompt + steps)");
    c_cmp->add_option("--bytes", cmpr.bytes, "Bytes per element for cache accounting");
    c_cmp->add_flag("--joint", cmpr.joint, "Count K and V jointly in cache accounting");
    c_cmp->add_flag("--logits", cmpr.logits, "Include per-step logits in the JSON report");
    c_cmp->add_option("--out", cmpr.out, "Directory for report.json and trace.csv");

    std::string prof_model;
    std::string prof_dims;
    std::string prof_out;
    EvalArgs prof_eval;
    auto* c_prof = app.add_subcommand("profile-layer", "Single-layer compression grid (layer x d_c)");
    c_prof->add_option("--model", prof_model, "Model container")->required();
    c_prof->add_option("--dims", prof_dims, "Comma-separated d_c values (default 1/4, 3/8, 1/2 of h_kv*d)");
    add_eval_options(c_prof, prof_eval);
    c_prof->add_option("--out", prof_out, "Write the CSV here instead of stdout");

    std::string svd_model;
    std::string svd_out;
    double svd_fraction = 0.125;
    double svd_layer_ratio = 0.5;
    SetupArgs svd_setup;
    auto* c_svd = app.add_subcommand("shallow-vs-deep", "Shallow-block compression against progressive");
    c_svd->add_option("--model", svd_model, "Model container (omit to run the seeded toy-deep experiment)");
    c_svd->add_option("--fraction", svd_fraction, "Fraction of leading layers to compress");
    c_svd->add_option("--layer-ratio", svd_layer_ratio, "Retained ratio within compressed layers");
    add_setup_options(c_svd, svd_setup);
    c_svd->add_option("--prompt-seed", svd_setup.eval.prompt_seed, "Prompt seed (with --model)");
    c_svd->add_option("--out", svd_out, "Write the JSON here instead of stdout");

    double pvu_ratio = 0.6;
    std::string pvu_out;
    SetupArgs pvu_setup;
    auto* c_pvu = app.add_subcommand("progressive-vs-uniform", "Progressive against uniform at a matched ratio");
    c_pvu->add_option("--ratio", pvu_ratio, "Retained ratio");
    add_setup_options(c_pvu, pvu_setup);
    c_pvu->add_option("--out", pvu_out, "Write the JSON here instead of stdout");

    std::string sweep_ratios = "0.4,0.6,0.8,1.0";
    std::string sweep_out;
    SetupArgs sweep_setup;
    sweep_setup.models = 10;
    auto* c_sweep = app.add_subcommand("sweep", "Mean KL of progressive plans over retained ratios");
    c_sweep->add_option("--ratios", sweep_ratios, "Comma-separated retained ratios");
    add_setup_options(c_sweep, sweep_setup);
    c_sweep->add_option("--out", sweep_out, "Write the CSV here instead of stdout");

    BoundsArgs bounds;
    auto* c_bounds = app.add_subcommand("verify-bounds", "Check truncation error bounds");
    c_bounds->add_option("--model", bounds.model, "Model container (advisory report)");
    c_bounds->add_option("--plan", bounds.plan, "Plan JSON for --model");
    c_bounds->add_option("--kind", bounds.kind, "chain | matrix");
    c_bounds->add_option("--layers", bounds.layers, "Chain depth");
    c_bounds->add_option("--min-width", bounds.min_width, "Smallest chain width");
    c_bounds->add_option("--max-width", bounds.max_width, "Largest chain width");
    c_bounds->add_option("--activation", bounds.activation, "relu | identity | silu");
    c_bounds->add_option("--ranks", bounds.ranks, "Comma-separated ranks per chain layer");
    c_bounds->add_option("--rows", bounds.rows, "Matrix rows");
    c_bounds->add_option("--cols", bounds.cols, "Matrix columns");
    c_bounds->add_option("--rank", bounds.rank, "Matrix truncation rank");
    c_bounds->add_option("--samples", bounds.samples, "Random inputs");
    c_bounds->add_option("--seed", bounds.seed, "Seed");
    c_bounds->add_option("--prompt", bounds.prompt, "Comma-separated token ids (with --model)");
    c_bounds->add_option("--steps", bounds.steps, "Decode steps (with --model)");
    c_bounds->add_option("--out", bounds.out, "Write the JSON here instead of stdout");

    MemoryArgs mem;
    auto* c_mem = app.add_subcommand("memory", "KV cache size calculator");
    c_mem->add_option("--preset", mem.preset, "Model preset")->check(CLI::IsMember(preset_names()));
    c_mem->add_option("--model", mem.model, "Model container (config only)");
    c_mem->add_option("--plan", mem.plan, "Plan JSON");
    c_mem->add_option("--batch", mem.batch, "Batch size");
    c_mem->add_option("--seq", mem.seq, "Sequence length");
    c_mem->add_option("--bytes", mem.bytes, "Bytes per element");
    c_mem->add_flag("--joint", mem.joint, "Count K and V jointly");
    c_mem->add_option("--format", mem.format, "text | json")->check(CLI::IsMember({"text", "json"}));
    c_mem->add_option("--out", mem.out, "Write the table here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return report_error("usage", e.what(), 2);
    }

    try {
        if (*c_gen) {
            run_gen(gen);
        } else if (*c_plan) {
            run_plan(plan);
        } else if (*c_compress) {
            run_compress(cmp_model, cmp_plan, cmp_out);
        } else if (*c_cmp) {
            run_compare(cmpr);
        } else if (*c_prof) {
            run_profile(prof_model, prof_dims, prof_eval, prof_out);
        } else if (*c_svd) {
            run_shallow_vs_deep(svd_model, svd_setup, svd_fraction, svd_layer_ratio, svd_out);
        } else if (*c_pvu) {
            run_prog_vs_uniform(pvu_setup, pvu_ratio, pvu_out);
        } else if (*c_sweep) {
            run_sweep(sweep_setup, sweep_ratios, sweep_out);
        } else if (*c_bounds) {
            run_bounds(bounds);
        } else if (*c_mem) {
            run_memory(mem);
        }
    } catch (const Error& e) {
        return report_error(std::string(to_string(e.kind())), e.what(), exit_code(e.kind()));
    } catch (const fs::filesystem_error& e) {
        return report_error("io", e.what(), 4);
    } catch (const nlohmann::json::exception& e) {
        return report_error("format", e.what(), 2);
    } catch (const std::exception& e) {
        return report_error("internal", e.what(), 1);
    }
    return 0;
}
