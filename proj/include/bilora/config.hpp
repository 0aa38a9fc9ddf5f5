// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment configuration and its text format.
//
// The format is INI-like: `[section]` headers, `key = value` lines, and
// comments starting with `#` or `;`. Keys are addressed as `section.key`
// (the same form `--override` takes). Every key has a type and a default;
// unknown keys and malformed values are errors. See schema() for the list.

#include "bilora/adapters.hpp"
#include "bilora/data.hpp"
#include "bilora/error.hpp"
#include "bilora/network.hpp"
#include "bilora/optim.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace bilora {

struct PretrainConfig {
    std::uint64_t steps = 1500;
    std::size_t batch_size = 64;
    double lr = 3e-3;
    BaseRule rule = BaseRule::adamw;
    /// Seeds the source data, base initialization and batch order.
    std::uint64_t seed = 0;
};

struct TrainConfig {
    std::uint64_t steps = 1200;
    std::size_t batch_size = 32;
    std::uint64_t eval_every = 50;
    std::uint64_t snapshot_every = 20;
    /// 0 disables per-step diagnostics (term norms, subspace residuals).
    std::uint64_t diag_every = 0;
    /// Layer monitored by term-norm records; -1 picks the middle adapted layer.
    long monitor_layer = -1;
    double sharpness_rho = 0.05;
    std::size_t sharpness_samples = 50;
    std::uint64_t sharpness_seed = 12345;
};

struct ExperimentConfig {
    TaskConfig source;  ///< pretraining task
    TaskConfig task;    ///< fine-tuning target
    ModelSpec model;
    AdapterOptions adapters;
    OptimConfig optim;
    PretrainConfig pretrain;
    TrainConfig train;
    std::uint64_t seed = 0;
    std::string output_dir = "runs/default";

    ExperimentConfig() {
        source.kind = TaskKind::two_moons;
        source.train_size = 5000;
        source.eval_size = 2000;
        source.label_noise = 0.0;
        task.kind = TaskKind::two_moons;
        task.train_size = 200;
        task.eval_size = 2000;
        task.label_noise = 0.1;
        model.layer_dims = {2, 64, 64, 2};
        model.activations = {Activation::tanh, Activation::tanh};
        model.loss = LossKind::softmax_cross_entropy;
        model.adapter_layers = {0, 1, 2};
    }

    void validate() const {
        source.validate();
        task.validate();
        model.validate();
        OptimConfig resolved = optim;
        resolved.total_steps = train.steps;
        resolved.validate();
        if (adapters.rank < 1) throw ConfigError("adapters.rank must be >= 1");
        if (train.batch_size < 1 || pretrain.batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (train.eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
        if (train.snapshot_every < 1) throw ConfigError("train.snapshot_every must be >= 1");
        if (!(train.sharpness_rho > 0.0) || train.sharpness_samples < 1)
            throw ConfigError("train.sharpness_rho must be > 0 and sharpness_samples >= 1");
    }
};

/// One typed key of the configuration schema.
struct ConfigField {
    std::string key;   ///< section.name
    std::string type;  ///< int, float, bool, string, list or enum values
    std::string doc;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
    return out;
}

inline long parse_int(const std::string& key, const std::string& v) {
    long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
    return out;
}

inline double parse_float(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_uint_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    if (trim(v).empty()) return out;
    for (const auto& item : split(v, ',')) out.push_back(parse_uint(key, item));
    return out;
}

template <class T>
std::string join(const std::vector<T>& v, auto&& fmt) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += fmt(v[i]);
    }
    return s;
}

inline void add_task_fields(std::vector<ConfigField>& f, const std::string& sec, TaskConfig ExperimentConfig::*member) {
    auto task = [member](ExperimentConfig& c) -> TaskConfig& { return c.*member; };
    auto ctask = [member](const ExperimentConfig& c) -> const TaskConfig& { return c.*member; };
    f.push_back({sec + ".kind", "two-gaussians|two-moons|spiral|linear-regression|csv-file", "task generator",
                 [=](auto& c, auto& v) { task(c).kind = parse_task_kind(v); },
                 [=](auto& c) { return to_string(ctask(c).kind); }});
    f.push_back({sec + ".train_size", "int", "training samples",
                 [=](auto& c, auto& v) { task(c).train_size = parse_uint(sec + ".train_size", v); },
                 [=](auto& c) { return std::to_string(ctask(c).train_size); }});
    f.push_back({sec + ".eval_size", "int", "evaluation samples",
                 [=](auto& c, auto& v) { task(c).eval_size = parse_uint(sec + ".eval_size", v); },
                 [=](auto& c) { return std::to_string(ctask(c).eval_size); }});
    f.push_back({sec + ".label_noise", "float", "fraction of training labels flipped, in [0, 1)",
                 [=](auto& c, auto& v) { task(c).label_noise = parse_float(sec + ".label_noise", v); },
                 [=](auto& c) { return format_double(ctask(c).label_noise); }});
    f.push_back({sec + ".dim", "int", "feature dimension (2-D patterns are embedded by a fixed rotation)",
                 [=](auto& c, auto& v) { task(c).dim = parse_uint(sec + ".dim", v); },
                 [=](auto& c) { return std::to_string(ctask(c).dim); }});
    f.push_back({sec + ".rotation", "float", "rotation of the 2-D pattern in radians",
                 [=](auto& c, auto& v) { task(c).rotation = parse_float(sec + ".rotation", v); },
                 [=](auto& c) { return format_double(ctask(c).rotation); }});
    f.push_back({sec + ".point_noise", "float", "jitter stddev of the pattern (target noise for regression)",
                 [=](auto& c, auto& v) { task(c).point_noise = parse_float(sec + ".point_noise", v); },
                 [=](auto& c) { return format_double(ctask(c).point_noise); }});
    f.push_back({sec + ".nuisance_std", "float", "stddev of padding coordinates before the embedding rotation",
                 [=](auto& c, auto& v) { task(c).nuisance_std = parse_float(sec + ".nuisance_std", v); },
                 [=](auto& c) { return format_double(ctask(c).nuisance_std); }});
    f.push_back({sec + ".embed_seed", "int", "seed of the embedding rotation / regression weights",
                 [=](auto& c, auto& v) { task(c).embed_seed = parse_uint(sec + ".embed_seed", v); },
                 [=](auto& c) { return std::to_string(ctask(c).embed_seed); }});
    f.push_back({sec + ".csv_train", "string", "training CSV (csv-file task)",
                 [=](auto& c, auto& v) { task(c).csv_train = v; }, [=](auto& c) { return ctask(c).csv_train; }});
    f.push_back({sec + ".csv_eval", "string", "evaluation CSV (csv-file task)",
                 [=](auto& c, auto& v) { task(c).csv_eval = v; }, [=](auto& c) { return ctask(c).csv_eval; }});
}

} // namespace detail

/// The full key schema, in documentation order.
inline const std::vector<ConfigField>& schema() {
    static const std::vector<ConfigField> fields = [] {
        using namespace detail;
        std::vector<ConfigField> f;
        f.push_back({"run.seed", "int", "experiment seed", [](auto& c, auto& v) { c.seed = parse_uint("run.seed", v); },
                     [](auto& c) { return std::to_string(c.seed); }});
        f.push_back({"run.output_dir", "string", "output directory", [](auto& c, auto& v) { c.output_dir = v; },
                     [](auto& c) { return c.output_dir; }});
        add_task_fields(f, "source", &ExperimentConfig::source);
        add_task_fields(f, "task", &ExperimentConfig::task);

        f.push_back({"model.layer_dims", "list", "widths in,h1,...,out",
                     [](auto& c, auto& v) { c.model.layer_dims = parse_uint_list("model.layer_dims", v); },
                     [](auto& c) { return join(c.model.layer_dims, [](auto d) { return std::to_string(d); }); }});
        f.push_back({"model.activations", "list", "one of relu|tanh|identity per hidden layer",
                     [](auto& c, auto& v) {
                         c.model.activations.clear();
                         if (!trim(v).empty())
                             for (const auto& a : split(v, ',')) c.model.activations.push_back(parse_activation(a));
                     },
                     [](auto& c) { return join(c.model.activations, [](auto a) { return to_string(a); }); }});
        f.push_back({"model.loss", "softmax-cross-entropy|mean-squared-error", "loss head",
                     [](auto& c, auto& v) { c.model.loss = parse_loss_kind(v); },
                     [](auto& c) { return to_string(c.model.loss); }});
        f.push_back({"model.adapter_layers", "list", "layer indices carrying adapters",
                     [](auto& c, auto& v) { c.model.adapter_layers = parse_uint_list("model.adapter_layers", v); },
                     [](auto& c) { return join(c.model.adapter_layers, [](auto d) { return std::to_string(d); }); }});
        f.push_back({"model.rank", "int", "primary adapter rank r1",
                     [](auto& c, auto& v) { c.adapters.rank = parse_uint("model.rank", v); },
                     [](auto& c) { return std::to_string(c.adapters.rank); }});
        f.push_back({"model.alpha", "float", "primary adapter alpha (s1 = alpha / r1)",
                     [](auto& c, auto& v) { c.adapters.alpha = parse_float("model.alpha", v); },
                     [](auto& c) { return format_double(c.adapters.alpha); }});
        f.push_back({"model.aux_rank", "int", "auxiliary adapter rank r2 (bi-lora; 0 disables)",
                     [](auto& c, auto& v) { c.adapters.aux_rank = parse_uint("model.aux_rank", v); },
                     [](auto& c) { return std::to_string(c.adapters.aux_rank); }});
        f.push_back({"model.aux_alpha", "float", "auxiliary adapter alpha (s2 = aux_alpha / r2)",
                     [](auto& c, auto& v) { c.adapters.aux_alpha = parse_float("model.aux_alpha", v); },
                     [](auto& c) { return format_double(c.adapters.aux_alpha); }});

        f.push_back({"optim.method", "full-ft|lora|sam-full|lora-sam|bi-lora", "training strategy",
                     [](auto& c, auto& v) { c.optim.method = parse_method(v); },
                     [](auto& c) { return to_string(c.optim.method); }});
        f.push_back({"optim.eta1", "float", "learning rate (primary / descent)",
                     [](auto& c, auto& v) { c.optim.eta1 = parse_float("optim.eta1", v); },
                     [](auto& c) { return format_double(c.optim.eta1); }});
        f.push_back({"optim.eta2", "float", "auxiliary ascent learning rate; empty = eta1",
                     [](auto& c, auto& v) {
                         if (trim(v).empty()) c.optim.eta2.reset();
                         else c.optim.eta2 = parse_float("optim.eta2", v);
                     },
                     [](auto& c) { return c.optim.eta2 ? format_double(*c.optim.eta2) : std::string(); }});
        f.push_back({"optim.rho", "float", "neighborhood radius",
                     [](auto& c, auto& v) { c.optim.rho = parse_float("optim.rho", v); },
                     [](auto& c) { return format_double(c.optim.rho); }});
        f.push_back({"optim.base_rule", "sgd|adamw", "update rule for trained parameters",
                     [](auto& c, auto& v) { c.optim.rule = parse_base_rule(v); },
                     [](auto& c) { return to_string(c.optim.rule); }});
        f.push_back({"optim.beta1", "float", "adamw beta1", [](auto& c, auto& v) { c.optim.beta1 = parse_float("optim.beta1", v); },
                     [](auto& c) { return format_double(c.optim.beta1); }});
        f.push_back({"optim.beta2", "float", "adamw beta2", [](auto& c, auto& v) { c.optim.beta2 = parse_float("optim.beta2", v); },
                     [](auto& c) { return format_double(c.optim.beta2); }});
        f.push_back({"optim.epsilon", "float", "adamw epsilon",
                     [](auto& c, auto& v) { c.optim.epsilon = parse_float("optim.epsilon", v); },
                     [](auto& c) { return format_double(c.optim.epsilon); }});
        f.push_back({"optim.weight_decay", "float", "decoupled weight decay (primary / full weights only)",
                     [](auto& c, auto& v) { c.optim.weight_decay = parse_float("optim.weight_decay", v); },
                     [](auto& c) { return format_double(c.optim.weight_decay); }});
        f.push_back({"optim.norm_scope", "global|per-layer", "SAM gradient-norm scope",
                     [](auto& c, auto& v) { c.optim.norm_scope = parse_norm_scope(v); },
                     [](auto& c) { return to_string(c.optim.norm_scope); }});
        f.push_back({"optim.clip_includes_scaling", "bool", "clip measures s2*B2A2 (true) or B2A2 (false)",
                     [](auto& c, auto& v) { c.optim.clip_includes_scaling = parse_bool("optim.clip_includes_scaling", v); },
                     [](auto& c) { return std::string(c.optim.clip_includes_scaling ? "true" : "false"); }});
        f.push_back({"optim.schedule", "constant|cosine", "learning-rate schedule",
                     [](auto& c, auto& v) { c.optim.schedule = parse_schedule(v); },
                     [](auto& c) { return to_string(c.optim.schedule); }});
        f.push_back({"optim.warmup_ratio", "float", "linear warmup fraction (cosine schedule)",
                     [](auto& c, auto& v) { c.optim.warmup_ratio = parse_float("optim.warmup_ratio", v); },
                     [](auto& c) { return format_double(c.optim.warmup_ratio); }});

        f.push_back({"pretrain.steps", "int", "full-parameter pretraining steps",
                     [](auto& c, auto& v) { c.pretrain.steps = parse_uint("pretrain.steps", v); },
                     [](auto& c) { return std::to_string(c.pretrain.steps); }});
        f.push_back({"pretrain.batch_size", "int", "pretraining batch size",
                     [](auto& c, auto& v) { c.pretrain.batch_size = parse_uint("pretrain.batch_size", v); },
                     [](auto& c) { return std::to_string(c.pretrain.batch_size); }});
        f.push_back({"pretrain.lr", "float", "pretraining learning rate",
                     [](auto& c, auto& v) { c.pretrain.lr = parse_float("pretrain.lr", v); },
                     [](auto& c) { return format_double(c.pretrain.lr); }});
        f.push_back({"pretrain.seed", "int", "pretraining seed (data, initialization, batch order)",
                     [](auto& c, auto& v) { c.pretrain.seed = parse_uint("pretrain.seed", v); },
                     [](auto& c) { return std::to_string(c.pretrain.seed); }});
        f.push_back({"pretrain.base_rule", "sgd|adamw", "pretraining update rule",
                     [](auto& c, auto& v) { c.pretrain.rule = parse_base_rule(v); },
                     [](auto& c) { return to_string(c.pretrain.rule); }});

        f.push_back({"train.steps", "int", "fine-tuning steps", [](auto& c, auto& v) { c.train.steps = parse_uint("train.steps", v); },
                     [](auto& c) { return std::to_string(c.train.steps); }});
        f.push_back({"train.batch_size", "int", "fine-tuning batch size",
                     [](auto& c, auto& v) { c.train.batch_size = parse_uint("train.batch_size", v); },
                     [](auto& c) { return std::to_string(c.train.batch_size); }});
        f.push_back({"train.eval_every", "int", "steps between evaluation records",
                     [](auto& c, auto& v) { c.train.eval_every = parse_uint("train.eval_every", v); },
                     [](auto& c) { return std::to_string(c.train.eval_every); }});
        f.push_back({"train.snapshot_every", "int", "steps between adapter snapshots",
                     [](auto& c, auto& v) { c.train.snapshot_every = parse_uint("train.snapshot_every", v); },
                     [](auto& c) { return std::to_string(c.train.snapshot_every); }});
        f.push_back({"train.diag_every", "int", "steps between diagnostic records (0 = off)",
                     [](auto& c, auto& v) { c.train.diag_every = parse_uint("train.diag_every", v); },
                     [](auto& c) { return std::to_string(c.train.diag_every); }});
        f.push_back({"train.monitor_layer", "int", "layer for term-norm records (-1 = middle adapted layer)",
                     [](auto& c, auto& v) { c.train.monitor_layer = parse_int("train.monitor_layer", v); },
                     [](auto& c) { return std::to_string(c.train.monitor_layer); }});
        f.push_back({"train.sharpness_rho", "float", "radius of the final sharpness estimate",
                     [](auto& c, auto& v) { c.train.sharpness_rho = parse_float("train.sharpness_rho", v); },
                     [](auto& c) { return format_double(c.train.sharpness_rho); }});
        f.push_back({"train.sharpness_samples", "int", "random directions in the final sharpness estimate",
                     [](auto& c, auto& v) { c.train.sharpness_samples = parse_uint("train.sharpness_samples", v); },
                     [](auto& c) { return std::to_string(c.train.sharpness_samples); }});
        f.push_back({"train.sharpness_seed", "int", "seed of the sharpness directions (shared across runs)",
                     [](auto& c, auto& v) { c.train.sharpness_seed = parse_uint("train.sharpness_seed", v); },
                     [](auto& c) { return std::to_string(c.train.sharpness_seed); }});
        return f;
    }();
    return fields;
}

inline const ConfigField& find_field(const std::string& key) {
    for (const auto& f : schema())
        if (f.key == key) return f;
    throw ConfigError("unknown config key '" + key + "'");
}

inline void set_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    find_field(key).set(cfg, detail::trim(value));
}

inline std::string get_value(const ExperimentConfig& cfg, const std::string& key) { return find_field(key).get(cfg); }

/// Apply a `section.key=value` override.
inline void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
    set_value(cfg, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

/// Parse config text into `cfg` (keys not mentioned keep their values).
/// Sections other than those in the schema are rejected, except the ones
/// listed in `extra_sections`, whose entries are returned untouched.
inline std::map<std::string, std::string> parse_config_text(ExperimentConfig& cfg, const std::string& text,
                                                             const std::vector<std::string>& extra_sections = {}) {
    std::map<std::string, std::string> extras;
    std::stringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find_first_of("#;");
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside a section");
        const std::string key = section + "." + detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (std::find(extra_sections.begin(), extra_sections.end(), section) != extra_sections.end()) {
            extras[key] = value;
            continue;
        }
        try {
            set_value(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return extras;
}

inline ExperimentConfig load_config(const std::filesystem::path& path,
                                    std::map<std::string, std::string>* extras = nullptr,
                                    const std::vector<std::string>& extra_sections = {}) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    ExperimentConfig cfg;
    auto ex = parse_config_text(cfg, ss.str(), extra_sections);
    if (extras) *extras = std::move(ex);
    return cfg;
}

/// Serialize every key (round-trips through parse_config_text).
inline std::string dump_config(const ExperimentConfig& cfg) {
    std::string out, section;
    for (const auto& f : schema()) {
        const auto dot = f.key.find('.');
        const auto sec = f.key.substr(0, dot);
        if (sec != section) {
            if (!section.empty()) out += "\n";
            out += "[" + sec + "]\n";
            section = sec;
        }
        out += f.key.substr(dot + 1) + " = " + f.get(cfg) + "\n";
    }
    return out;
}

/// Reference adapter hyperparameters: lr 5e-4 shared
/// by both modules, rank 8, alpha 16, cosine schedule with 3% warmup.
inline ExperimentConfig reference_profile() {
    ExperimentConfig c;
    c.optim.eta1 = 5e-4;
    c.optim.eta2.reset();
    c.adapters.rank = 8;
    c.adapters.alpha = 16.0;
    c.adapters.aux_rank = 8;
    c.adapters.aux_alpha = 16.0;
    c.optim.schedule = Schedule::cosine;
    c.optim.warmup_ratio = 0.03;
    c.optim.rule = BaseRule::adamw;
    return c;
}

/// Values the optimizer needs that live elsewhere in the config.
inline OptimConfig resolved_optim(const ExperimentConfig& cfg) {
    OptimConfig o = cfg.optim;
    o.total_steps = cfg.train.steps;
    return o;
}

} // namespace bilora
