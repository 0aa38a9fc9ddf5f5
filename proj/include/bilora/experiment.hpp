// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pretrain-then-finetune protocol, sweeps, step-time benchmarks and run
// comparison reports.
//
// A finetune output directory holds:
//   runlog.jsonl   RunLog (see runlog.hpp)
//   config.ini     the resolved configuration
//   model.ckpt     full network including both adapter pairs
//   adapter.ckpt   primary adapter pairs only (adapter methods)
//   merged.ckpt    inference network W0 + s1·B1A1, no adapters
//   timing.json    per-step wall time (kept out of the RunLog)

#include "bilora/adapters.hpp"
#include "bilora/checkpoint.hpp"
#include "bilora/config.hpp"
#include "bilora/data.hpp"
#include "bilora/diagnostics.hpp"
#include "bilora/optim.hpp"
#include "bilora/runlog.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace bilora {

/// Endless sequence of minibatches: a seeded permutation consumed in order
/// and reshuffled whenever it runs out.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed, std::uint64_t stream)
        : order_(n), batch_(std::min(batch, n)), rng_(seed, stream) {
        if (n == 0) throw ContractViolation("BatchSampler: empty dataset");
        std::iota(order_.begin(), order_.end(), 0);
        shuffle();
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> out;
        out.reserve(batch_);
        while (out.size() < batch_) {
            if (pos_ == order_.size()) shuffle();
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    void shuffle() {
        for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
        pos_ = 0;
    }

    std::vector<std::size_t> order_;
    std::size_t batch_;
    std::size_t pos_ = 0;
    RngStream rng_;
};

namespace detail {

inline void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

} // namespace detail

struct MeanStderr {
    double mean = 0.0;
    double stderr_ = 0.0;
    std::size_t n = 0;
};

inline MeanStderr mean_stderr(std::span<const double> v) {
    MeanStderr m;
    m.n = v.size();
    if (v.empty()) return m;
    m.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - m.mean) * (x - m.mean);
        m.stderr_ = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct PretrainResult {
    Network net;
    double train_loss = 0.0;
    double train_metric = 0.0;
    double eval_metric = 0.0;
};

/// Full-parameter training of the base network on the source task.
inline PretrainResult pretrain(const ExperimentConfig& cfg) {
    cfg.source.validate();
    ModelSpec spec = cfg.model;
    spec.adapter_layers.clear();
    spec.validate();
    const auto data = generate_dataset(cfg.source, cfg.pretrain.seed);
    if (data.train.dim() != spec.layer_dims.front())
        throw ConfigError("source feature dim " + std::to_string(data.train.dim()) + " does not match model input " +
                          std::to_string(spec.layer_dims.front()));
    RngStream init_rng(cfg.pretrain.seed, 40);
    PretrainResult r;
    r.net = make_network(spec, init_rng);
    OptimConfig oc;
    oc.method = Method::full_ft;
    oc.eta1 = cfg.pretrain.lr;
    oc.rule = cfg.pretrain.rule;
    oc.validate();
    OptimState state;
    BatchSampler sampler(data.train.size(), cfg.pretrain.batch_size, cfg.pretrain.seed, 41);
    for (std::uint64_t k = 0; k < cfg.pretrain.steps; ++k) {
        const auto idx = sampler.next();
        full_ft_step(r.net, data.train.subset_batch(idx), oc, state);
    }
    const auto train = data.train.to_batch();
    r.train_loss = evaluate_loss(r.net, train, false);
    if (!std::isfinite(r.train_loss)) throw DivergenceError("pretrain: final loss is not finite");
    r.train_metric = metric(r.net, train);
    r.eval_metric = metric(r.net, data.eval.to_batch());
    return r;
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

struct FinetuneResult {
    Network net;
    RunLog log;
    std::vector<EvalPoint> evals;
    std::vector<GapPoint> gaps;
    std::vector<TrajectoryRecord> trajectory;
    std::optional<std::uint64_t> primary_settle;
    std::optional<std::uint64_t> auxiliary_settle;
    std::vector<TermNormRecord> term_norms;
    std::vector<LoraSamSubspaceReport> lora_sam_subspaces;
    std::vector<BiLoraSubspaceReport> bilora_subspaces;
    std::vector<ClipReport> clips;
    std::vector<std::uint64_t> backward_passes;
    std::vector<double> step_seconds;
    SharpnessReport sharpness;
    double late_gap = 0.0;
    std::uint64_t base_checksum_before = 0;
    std::uint64_t base_checksum_after = 0;

    const EvalPoint& last_eval() const { return evals.back(); }
};

/// Layer whose term norms are recorded.
inline std::size_t monitor_layer(const ExperimentConfig& cfg) {
    if (cfg.train.monitor_layer >= 0) {
        const auto l = static_cast<std::size_t>(cfg.train.monitor_layer);
        if (std::find(cfg.model.adapter_layers.begin(), cfg.model.adapter_layers.end(), l) ==
            cfg.model.adapter_layers.end())
            throw ConfigError("train.monitor_layer is not an adapted layer");
        return l;
    }
    if (cfg.model.adapter_layers.empty()) return 0;
    return cfg.model.adapter_layers[cfg.model.adapter_layers.size() / 2];
}

/// Network ready for step 0 of `cfg.optim.method`: a copy of `base` with
/// adapters attached for adapter methods (auxiliary pairs only for bi-lora).
inline Network prepare_network(const ExperimentConfig& cfg, const Network& base) {
    if (base.spec.layer_dims != cfg.model.layer_dims || base.spec.activations != cfg.model.activations ||
        base.spec.loss != cfg.model.loss)
        throw ConfigError("base network architecture differs from the configured model");
    Network net = base;
    for (auto& l : net.layers) {
        l.primary.reset();
        l.auxiliary.reset();
    }
    net.spec.adapter_layers = cfg.model.adapter_layers;
    net.spec.validate();
    if (uses_adapters(cfg.optim.method)) {
        if (net.spec.adapter_layers.empty()) throw ConfigError(to_string(cfg.optim.method) + " needs adapter layers");
        AdapterOptions opt = cfg.adapters;
        if (cfg.optim.method != Method::bi_lora) opt.aux_rank = 0;
        attach_adapters(net, opt, cfg.seed);
    } else {
        net.spec.adapter_layers.clear();
    }
    return net;
}

inline EvalPoint evaluate_point(const Network& net, std::uint64_t step, const Batch& train, const Batch& eval) {
    EvalPoint p;
    p.step = step;
    p.train_loss = evaluate_loss(net, train, false);
    p.train_metric = metric(net, train);
    p.eval_loss = evaluate_loss(net, eval, false);
    p.eval_metric = metric(net, eval);
    return p;
}

/// Run the configured method from `base` on `data`. `base` is not modified.
inline FinetuneResult finetune(const ExperimentConfig& cfg, const Network& base, const DatasetPair& data) {
    cfg.validate();
    const OptimConfig oc = resolved_optim(cfg);
    oc.validate();
    if (data.train.dim() != cfg.model.layer_dims.front())
        throw ConfigError("task feature dim " + std::to_string(data.train.dim()) + " does not match model input " +
                          std::to_string(cfg.model.layer_dims.front()));
    FinetuneResult r;
    r.base_checksum_before = base_checksum(base);
    r.net = prepare_network(cfg, base);
    const bool adapters = uses_adapters(oc.method);
    const std::size_t watched = monitor_layer(cfg);

    r.log.header(cfg);
    const Batch train = data.train.to_batch();
    const Batch eval = data.eval.to_batch();
    BatchSampler sampler(data.train.size(), cfg.train.batch_size, cfg.seed, 1000);
    OptimState state;
    std::vector<ParameterSnapshot> snapshots;

    auto record_point = [&](std::uint64_t done) {
        if (done % cfg.train.eval_every == 0 || done == cfg.train.steps) {
            r.evals.push_back(evaluate_point(r.net, done, train, eval));
            r.log.eval(r.evals.back());
        }
        if (adapters && (done % cfg.train.snapshot_every == 0 || done == cfg.train.steps))
            snapshots.push_back(take_snapshot(r.net, done));
    };

    record_point(0);
    for (std::uint64_t k = 0; k < cfg.train.steps; ++k) {
        const bool diag = cfg.train.diag_every > 0 && k % cfg.train.diag_every == 0;
        state.capture = diag && oc.method == Method::lora_sam;
        const Batch batch = data.train.subset_batch(sampler.next());
        const auto t0 = std::chrono::steady_clock::now();
        StepReport rep = optimizer_step(r.net, batch, oc, state);
        const auto t1 = std::chrono::steady_clock::now();
        r.step_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
        r.backward_passes.push_back(rep.backward_passes);
        r.log.step(rep);
        if ((oc.method == Method::sam_full || oc.method == Method::lora_sam) && oc.rho > 0.0 &&
            !rep.perturbation_applied)
            r.log.event(k, "perturbation_skipped", {{"reason", "zero gradient norm"}, {"grad_norm", rep.grad_norm}});
        if (rep.clip) {
            r.clips.push_back(*rep.clip);
            r.log.clip(k, *rep.clip);
            if (oc.method == Method::bi_lora && rep.clip->c_norm_before == 0.0 && r.net.has_auxiliary())
                r.log.event(k, "zero_auxiliary_norm", {{"reason", "clip skipped"}});
        }
        for (const auto& ctx : rep.perturbations) {
            if (ctx.layer == watched) {
                r.term_norms.push_back(record_term_norms(ctx.b, ctx.a, ctx.eps_b, ctx.eps_a, k, ctx.layer));
                r.log.term_norms(r.term_norms.back());
            }
            r.lora_sam_subspaces.push_back(check_subspaces(ctx, k));
            r.log.subspace(r.lora_sam_subspaces.back());
        }
        if (diag && oc.method == Method::bi_lora && r.net.has_auxiliary()) {
            for (std::size_t l = 0; l < r.net.layers.size(); ++l) {
                if (!r.net.layers[l].auxiliary) continue;
                r.bilora_subspaces.push_back(check_subspaces(r.net.layers[l], k, l));
                r.log.subspace(r.bilora_subspaces.back());
            }
        }
        record_point(k + 1);
    }

    if (snapshots.size() >= 2) {
        r.trajectory = record_trajectory(snapshots, snapshots.back());
        std::vector<std::uint64_t> steps;
        std::vector<double> prim, aux;
        for (const auto& t : r.trajectory) {
            r.log.trajectory(t);
            steps.push_back(t.step);
            prim.push_back(t.cos_primary);
            if (t.cos_auxiliary) aux.push_back(*t.cos_auxiliary);
        }
        r.primary_settle = settle_step(steps, prim, 0.9);
        if (aux.size() == steps.size()) r.auxiliary_settle = settle_step(steps, aux, 0.9);
    }

    r.gaps = track_generalization_gap(r.evals);
    r.late_gap = late_phase_mean_gap(r.gaps);
    RngStream sharp_rng(cfg.train.sharpness_seed, 0);
    r.sharpness = estimate_sharpness(r.net, train, cfg.train.sharpness_rho, cfg.train.sharpness_samples, sharp_rng);
    r.base_checksum_after = base_checksum(base);

    std::size_t triggered = 0;
    double c_sum = 0.0;
    for (const auto& c : r.clips) {
        triggered += c.triggered;
        c_sum += c.c_norm_before;
    }
    const auto counts = adapter_parameter_counts(r.net);
    const auto& last = r.last_eval();
    Json fin{{"method", to_string(oc.method)},
             {"seed", cfg.seed},
             {"steps", cfg.train.steps},
             {"train_loss", last.train_loss},
             {"train_metric", last.train_metric},
             {"eval_loss", last.eval_loss},
             {"eval_metric", last.eval_metric},
             {"late_gap", r.late_gap},
             {"sharpness_rho", r.sharpness.rho_eval},
             {"sharpness_samples", r.sharpness.n_samples},
             {"sharpness_mean", r.sharpness.mean_increase},
             {"sharpness_max", r.sharpness.max_increase},
             {"backward_passes", std::accumulate(r.backward_passes.begin(), r.backward_passes.end(), std::uint64_t{0})},
             {"clip_steps", r.clips.size()},
             {"clip_triggered", triggered},
             {"clip_mean_c_norm", r.clips.empty() ? 0.0 : c_sum / static_cast<double>(r.clips.size())},
             {"primary_parameters", counts.primary},
             {"auxiliary_parameters", counts.auxiliary},
             {"base_checksum", r.base_checksum_before}};
    fin["primary_settle_step"] = r.primary_settle ? Json(*r.primary_settle) : Json(nullptr);
    fin["auxiliary_settle_step"] = r.auxiliary_settle ? Json(*r.auxiliary_settle) : Json(nullptr);
    r.log.final(std::move(fin));
    return r;
}

/// Write a finetune result to `dir` in the layout described at the top.
inline void write_finetune_outputs(const ExperimentConfig& cfg, const FinetuneResult& r,
                                   const std::filesystem::path& dir) {
    detail::ensure_dir(dir);
    r.log.write(dir / "runlog.jsonl");
    detail::write_text(dir / "config.ini", dump_config(cfg));
    save_network(r.net, dir / "model.ckpt");
    if (uses_adapters(cfg.optim.method)) save_adapters(r.net, dir / "adapter.ckpt");
    save_network(merge_for_inference(r.net), dir / "merged.ckpt");
    const double median = detail::quantile(r.step_seconds, 0.5);
    Json timing{{"method", to_string(cfg.optim.method)},
                {"steps", r.step_seconds.size()},
                {"median_step_seconds", median},
                {"q1_step_seconds", detail::quantile(r.step_seconds, 0.25)},
                {"q3_step_seconds", detail::quantile(r.step_seconds, 0.75)}};
    detail::write_text(dir / "timing.json", timing.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepAxis {
    std::string key;
    std::vector<std::string> values;
};

struct SweepSpec {
    ExperimentConfig base;
    std::vector<SweepAxis> axes;
    std::vector<std::uint64_t> seeds{0};
    std::size_t max_cells = 64;
    std::size_t workers = 1;

    std::size_t cell_count() const {
        std::size_t n = 1;
        for (const auto& a : axes) n *= a.values.size();
        return n;
    }
};

/// "optim.rho:0.01,0.05; model.aux_rank:0,2,8"
inline std::vector<SweepAxis> parse_sweep_axes(const std::string& text) {
    std::vector<SweepAxis> axes;
    for (const auto& part : detail::split(text, ';')) {
        if (part.empty()) continue;
        const auto colon = part.find(':');
        if (colon == std::string::npos) throw ConfigError("sweep axis '" + part + "' is not key:v1,v2,...");
        SweepAxis a;
        a.key = detail::trim(part.substr(0, colon));
        find_field(a.key);
        a.values = detail::split(part.substr(colon + 1), ',');
        if (a.values.empty() || a.values.front().empty()) throw ConfigError("sweep axis '" + a.key + "' has no values");
        axes.push_back(std::move(a));
    }
    return axes;
}

/// Build a SweepSpec from a config and the entries of its [sweep] section.
inline SweepSpec make_sweep_spec(const ExperimentConfig& base, const std::map<std::string, std::string>& entries) {
    SweepSpec s;
    s.base = base;
    for (const auto& [key, value] : entries) {
        if (key == "sweep.axes") s.axes = parse_sweep_axes(value);
        else if (key == "sweep.seeds") {
            s.seeds.clear();
            for (auto v : detail::parse_uint_list(key, value)) s.seeds.push_back(v);
        } else if (key == "sweep.max_cells") s.max_cells = detail::parse_uint(key, value);
        else if (key == "sweep.workers") s.workers = detail::parse_uint(key, value);
        else throw ConfigError("unknown config key '" + key + "'");
    }
    return s;
}

struct SweepCell {
    std::vector<std::pair<std::string, std::string>> settings;
    std::vector<std::uint64_t> seeds;
    std::vector<double> metrics;  ///< final eval metric per successful seed
    std::vector<std::string> errors;
    MeanStderr summary;
    std::string label() const {
        std::string s;
        for (const auto& [k, v] : settings) s += (s.empty() ? "" : ",") + k + "=" + v;
        return s.empty() ? "base" : s;
    }
};

namespace detail {

/// Identity of the pretraining problem: cells sharing it share a base network.
inline std::string pretrain_key(const ExperimentConfig& c) {
    std::string k;
    for (const auto& f : schema())
        if (f.key.rfind("source.", 0) == 0 || f.key.rfind("pretrain.", 0) == 0 || f.key == "model.layer_dims" ||
            f.key == "model.activations" || f.key == "model.loss")
            k += f.key + "=" + f.get(c) + "\n";
    return k;
}

inline std::string cell_dir_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "cell_%03zu", index);
    return buf;
}

} // namespace detail

/// Every cell × seed is one finetune run. Cell failures are recorded and the
/// sweep continues. With `out_dir` set, per-run outputs go to
/// out_dir/cell_NNN/seed_S/ and the summary to out_dir/summary.tsv.
inline std::vector<SweepCell> run_sweep(const SweepSpec& spec, const std::filesystem::path& out_dir = {}) {
    const std::size_t n_cells = spec.cell_count();
    if (n_cells > spec.max_cells)
        throw ConfigError("sweep has " + std::to_string(n_cells) + " cells, cap is " + std::to_string(spec.max_cells));
    if (spec.seeds.empty()) throw ConfigError("sweep needs at least one seed");

    std::vector<SweepCell> cells(n_cells);
    std::vector<ExperimentConfig> cell_cfgs(n_cells, spec.base);
    for (std::size_t c = 0; c < n_cells; ++c) {
        std::size_t rem = c;
        for (std::size_t a = spec.axes.size(); a-- > 0;) {
            const auto& axis = spec.axes[a];
            const auto& v = axis.values[rem % axis.values.size()];
            rem /= axis.values.size();
            cells[c].settings.insert(cells[c].settings.begin(), {axis.key, v});
        }
        for (const auto& [k, v] : cells[c].settings) set_value(cell_cfgs[c], k, v);
    }

    std::map<std::string, std::shared_ptr<const Network>> bases;
    std::map<std::string, std::string> base_errors;
    for (const auto& c : cell_cfgs) {
        const auto key = detail::pretrain_key(c);
        if (bases.count(key) || base_errors.count(key)) continue;
        try {
            bases[key] = std::make_shared<const Network>(pretrain(c).net);
        } catch (const Error& e) {
            base_errors[key] = std::string(e.error_class()) + ": " + e.what();
        }
    }

    struct Job {
        std::size_t cell;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (std::size_t c = 0; c < n_cells; ++c)
        for (auto s : spec.seeds) jobs.push_back({c, s});

    struct Outcome {
        std::optional<double> metric;
        std::string error;
    };
    auto run_job = [&](const Job& job) -> Outcome {
        ExperimentConfig cfg = cell_cfgs[job.cell];
        cfg.seed = job.seed;
        const auto key = detail::pretrain_key(cfg);
        if (auto it = base_errors.find(key); it != base_errors.end()) return {std::nullopt, it->second};
        try {
            const auto data = generate_dataset(cfg.task, cfg.seed);
            auto res = finetune(cfg, *bases.at(key), data);
            if (!out_dir.empty())
                write_finetune_outputs(cfg, res,
                                       out_dir / detail::cell_dir_name(job.cell) / ("seed_" + std::to_string(job.seed)));
            return {res.last_eval().eval_metric, {}};
        } catch (const Error& e) {
            return {std::nullopt, std::string(e.error_class()) + ": " + e.what()};
        }
    };

    std::vector<Outcome> outcomes(jobs.size());
    const std::size_t workers = std::max<std::size_t>(1, spec.workers);
    for (std::size_t start = 0; start < jobs.size(); start += workers) {
        std::vector<std::future<Outcome>> running;
        const std::size_t end = std::min(jobs.size(), start + workers);
        if (workers == 1) {
            outcomes[start] = run_job(jobs[start]);
            continue;
        }
        for (std::size_t j = start; j < end; ++j)
            running.push_back(std::async(std::launch::async, run_job, std::cref(jobs[j])));
        for (std::size_t j = start; j < end; ++j) outcomes[j] = running[j - start].get();
    }

    for (std::size_t j = 0; j < jobs.size(); ++j) {
        auto& cell = cells[jobs[j].cell];
        if (outcomes[j].metric) {
            cell.seeds.push_back(jobs[j].seed);
            cell.metrics.push_back(*outcomes[j].metric);
        } else {
            cell.errors.push_back("seed " + std::to_string(jobs[j].seed) + ": " + outcomes[j].error);
        }
    }
    for (auto& c : cells) c.summary = mean_stderr(c.metrics);
    return cells;
}

inline std::string sweep_table(const std::vector<SweepCell>& cells) {
    std::string out;
    if (cells.empty()) return out;
    for (const auto& [k, v] : cells.front().settings) out += k + "\t";
    out += "runs\tfailures\tmean_eval_metric\tstderr_eval_metric\n";
    for (const auto& c : cells) {
        for (const auto& [k, v] : c.settings) out += v + "\t";
        out += std::to_string(c.metrics.size()) + "\t" + std::to_string(c.errors.size()) + "\t" +
               format_double(c.summary.mean) + "\t" + format_double(c.summary.stderr_) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Step-time benchmark
// ---------------------------------------------------------------------------

struct TimingRow {
    Method method = Method::lora;
    std::size_t measured = 0;
    double median_seconds = 0.0;
    double q1_seconds = 0.0;
    double q3_seconds = 0.0;
    double relative_percent = 0.0;  ///< median relative to lora (or the first method)
    std::size_t parameters = 0;
};

/// Wall time of optimizer_step alone for each method on the same model and
/// batch. The model is cfg.model with a seeded random base; bi-lora gets an
/// auxiliary pair of rank aux_rank (rank when aux_rank is 0).
inline std::vector<TimingRow> benchmark_step_time(const ExperimentConfig& cfg, std::span<const Method> methods,
                                                  std::size_t warmup, std::size_t measured) {
    if (measured < 30) throw ConfigError("bench: measured steps must be >= 30");
    if (methods.empty()) throw ConfigError("bench: no methods");
    ModelSpec spec = cfg.model;
    spec.adapter_layers.clear();
    RngStream rng(cfg.seed, 50);
    const Network base = make_network(spec, rng);
    Batch batch;
    batch.inputs = seeded_gaussian(cfg.train.batch_size, spec.layer_dims.front(), rng, 1.0);
    batch.targets = Matrix(cfg.train.batch_size, spec.layer_dims.back());
    for (std::size_t i = 0; i < cfg.train.batch_size; ++i) {
        if (spec.loss == LossKind::softmax_cross_entropy) batch.targets(i, rng.below(spec.layer_dims.back())) = 1.0;
        else
            for (std::size_t j = 0; j < spec.layer_dims.back(); ++j) batch.targets(i, j) = rng.normal();
    }

    std::vector<TimingRow> rows;
    for (const auto m : methods) {
        ExperimentConfig c = cfg;
        c.optim.method = m;
        if (m == Method::bi_lora && c.adapters.aux_rank == 0) c.adapters.aux_rank = c.adapters.rank;
        if (m == Method::bi_lora && !(c.optim.rho > 0.0)) c.optim.rho = 0.05;
        Network net = prepare_network(c, base);
        OptimConfig oc = c.optim;
        oc.schedule = Schedule::constant;
        oc.validate();
        OptimState state;
        for (std::size_t i = 0; i < warmup; ++i) optimizer_step(net, batch, oc, state);
        std::vector<double> times;
        for (std::size_t i = 0; i < measured; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            optimizer_step(net, batch, oc, state);
            const auto t1 = std::chrono::steady_clock::now();
            times.push_back(std::chrono::duration<double>(t1 - t0).count());
        }
        TimingRow row;
        row.method = m;
        row.measured = measured;
        row.median_seconds = detail::quantile(times, 0.5);
        row.q1_seconds = detail::quantile(times, 0.25);
        row.q3_seconds = detail::quantile(times, 0.75);
        row.parameters = parameter_count(net);
        rows.push_back(row);
    }
    auto ref = std::find_if(rows.begin(), rows.end(), [](const auto& r) { return r.method == Method::lora; });
    const double ref_median = (ref != rows.end() ? ref->median_seconds : rows.front().median_seconds);
    for (auto& r : rows) r.relative_percent = r.median_seconds / ref_median * 100.0;
    return rows;
}

inline std::string timing_table(const std::vector<TimingRow>& rows) {
    std::string out = "method\tparameters\tmeasured\tmedian_ms\tq1_ms\tq3_ms\tiqr_ms\trelative_percent\n";
    for (const auto& r : rows)
        out += to_string(r.method) + "\t" + std::to_string(r.parameters) + "\t" + std::to_string(r.measured) + "\t" +
               format_double(1e3 * r.median_seconds) + "\t" + format_double(1e3 * r.q1_seconds) + "\t" +
               format_double(1e3 * r.q3_seconds) + "\t" + format_double(1e3 * (r.q3_seconds - r.q1_seconds)) + "\t" +
               format_double(r.relative_percent) + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Comparison report
// ---------------------------------------------------------------------------

struct RunSummary {
    std::string dir;
    std::string method;
    std::uint64_t seed = 0;
    std::string task;  ///< task.* config entries, one per line
    double train_metric = 0.0;
    double eval_metric = 0.0;
    double late_gap = 0.0;
    double sharpness = 0.0;
    std::uint64_t clip_triggered = 0;
    std::uint64_t clip_steps = 0;
    std::optional<double> median_step_seconds;
};

inline RunSummary summarize_run(const std::filesystem::path& dir) {
    const auto log = read_runlog(dir / "runlog.jsonl");
    const auto headers = records_of(log, "header");
    const auto finals = records_of(log, "final");
    if (headers.size() != 1 || finals.size() != 1)
        throw IoError("'" + dir.string() + "': run log needs exactly one header and one final record");
    RunSummary s;
    s.dir = dir.string();
    const auto& cfg = headers[0].at("config");
    for (auto it = cfg.begin(); it != cfg.end(); ++it)
        if (it.key().rfind("task.", 0) == 0) s.task += it.key() + "=" + it.value().get<std::string>() + "\n";
    const auto& f = finals[0];
    s.method = f.at("method").get<std::string>();
    s.seed = f.at("seed").get<std::uint64_t>();
    s.train_metric = f.at("train_metric").get<double>();
    s.eval_metric = f.at("eval_metric").get<double>();
    s.late_gap = f.at("late_gap").get<double>();
    s.sharpness = f.at("sharpness_mean").get<double>();
    s.clip_triggered = f.at("clip_triggered").get<std::uint64_t>();
    s.clip_steps = f.at("clip_steps").get<std::uint64_t>();
    if (std::filesystem::exists(dir / "timing.json"))
        s.median_step_seconds = Json::parse(detail::read_text(dir / "timing.json")).at("median_step_seconds").get<double>();
    return s;
}

struct MethodStats {
    std::string method;
    MeanStderr eval_metric;
    MeanStderr late_gap;
    MeanStderr sharpness;
};

/// Paired sign test on the final eval metric of two methods, matched by seed.
struct SignTest {
    std::string first, second;
    std::size_t second_better = 0;
    std::size_t first_better = 0;
    std::size_t ties = 0;
    double p_value = 1.0;  ///< exact two-sided binomial, ties dropped
};

/// Two-sided exact binomial p-value for `k` successes out of `n` at p = 1/2.
inline double sign_test_p_value(std::size_t k, std::size_t n) {
    if (n == 0) return 1.0;
    const std::size_t tail = std::min(k, n - k);
    double sum = 0.0;
    for (std::size_t i = 0; i <= tail; ++i)
        sum += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0));
    return std::min(1.0, 2.0 * sum);
}

struct CompareReport {
    std::vector<RunSummary> runs;
    std::vector<MethodStats> methods;
    std::vector<SignTest> sign_tests;

    std::string table() const {
        std::string out = "dir\tmethod\tseed\ttrain_metric\teval_metric\tlate_gap\tsharpness\tclip_triggered\tclip_steps\tmedian_step_ms\n";
        for (const auto& r : runs)
            out += r.dir + "\t" + r.method + "\t" + std::to_string(r.seed) + "\t" + format_double(r.train_metric) + "\t" +
                   format_double(r.eval_metric) + "\t" + format_double(r.late_gap) + "\t" +
                   format_double(r.sharpness) + "\t" + std::to_string(r.clip_triggered) + "\t" +
                   std::to_string(r.clip_steps) + "\t" +
                   (r.median_step_seconds ? format_double(1e3 * *r.median_step_seconds) : std::string("")) + "\n";
        return out;
    }

    std::string text() const {
        std::ostringstream o;
        o.precision(4);
        o << runs.size() << " run(s)\n";
        for (const auto& m : methods)
            o << m.method << " (n=" << m.eval_metric.n << "): eval metric " << m.eval_metric.mean << " +/- "
              << m.eval_metric.stderr_ << ", late gap " << m.late_gap.mean << " +/- " << m.late_gap.stderr_
              << ", sharpness " << m.sharpness.mean << " +/- " << m.sharpness.stderr_ << "\n";
        for (const auto& s : sign_tests)
            o << "sign test " << s.second << " vs " << s.first << ": " << s.second << " better in " << s.second_better
              << ", worse in " << s.first_better << ", ties " << s.ties << ", p = " << s.p_value << "\n";
        return o.str();
    }
};

inline CompareReport compare_report(std::span<const std::filesystem::path> dirs) {
    if (dirs.empty()) throw ConfigError("report: no run directories");
    CompareReport rep;
    for (const auto& d : dirs) rep.runs.push_back(summarize_run(d));
    for (const auto& r : rep.runs)
        if (r.task != rep.runs.front().task)
            throw ConfigError("report: '" + r.dir + "' was run on a different task than '" + rep.runs.front().dir + "'");
    std::vector<std::string> order;
    for (const auto& r : rep.runs)
        if (std::find(order.begin(), order.end(), r.method) == order.end()) order.push_back(r.method);
    for (const auto& m : order) {
        std::vector<double> em, gap, sh;
        for (const auto& r : rep.runs) {
            if (r.method != m) continue;
            em.push_back(r.eval_metric);
            gap.push_back(r.late_gap);
            sh.push_back(r.sharpness);
        }
        rep.methods.push_back({m, mean_stderr(em), mean_stderr(gap), mean_stderr(sh)});
    }
    for (std::size_t i = 0; i < order.size(); ++i)
        for (std::size_t j = i + 1; j < order.size(); ++j) {
            SignTest t;
            t.first = order[i];
            t.second = order[j];
            for (const auto& a : rep.runs) {
                if (a.method != t.first) continue;
                for (const auto& b : rep.runs) {
                    if (b.method != t.second || b.seed != a.seed) continue;
                    if (b.eval_metric > a.eval_metric) ++t.second_better;
                    else if (b.eval_metric < a.eval_metric) ++t.first_better;
                    else ++t.ties;
                    break;
                }
            }
            t.p_value = sign_test_p_value(t.second_better, t.second_better + t.first_better);
            rep.sign_tests.push_back(t);
        }
    return rep;
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

inline std::string landscape_table(const LandscapeScan& scan) {
    std::string out = "radius";
    for (std::size_t r = 0; r < scan.losses.size(); ++r) out += "\trepeat_" + std::to_string(r);
    out += "\tmean\n";
    const auto mean = scan.mean_curve();
    for (std::size_t i = 0; i < scan.radii.size(); ++i) {
        out += format_double(scan.radii[i]);
        for (const auto& row : scan.losses) out += "\t" + format_double(row[i]);
        out += "\t" + format_double(mean[i]) + "\n";
    }
    return out;
}

/// One TSV per record kind present in the log (step, eval, clip,
/// term_norms, subspace, trajectory). Returns the files written.
inline std::vector<std::filesystem::path> export_runlog(const std::vector<Json>& log, const std::filesystem::path& dir) {
    detail::ensure_dir(dir);
    std::vector<std::filesystem::path> written;
    for (const std::string kind : {"step", "eval", "clip", "term_norms", "subspace", "trajectory"}) {
        const auto recs = records_of(log, kind);
        if (recs.empty()) continue;
        std::vector<std::string> cols;
        for (const auto& r : recs)
            for (auto it = r.begin(); it != r.end(); ++it)
                if (it.key() != "kind" && std::find(cols.begin(), cols.end(), it.key()) == cols.end())
                    cols.push_back(it.key());
        std::string out;
        for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "\t" : "") + cols[i];
        out += "\n";
        for (const auto& r : recs) {
            for (std::size_t i = 0; i < cols.size(); ++i) {
                if (i) out += "\t";
                if (!r.contains(cols[i]) || r[cols[i]].is_null()) continue;
                const auto& v = r[cols[i]];
                if (v.is_number_float()) out += format_double(v.get<double>());
                else out += v.dump();
            }
            out += "\n";
        }
        const auto path = dir / (kind + ".tsv");
        detail::write_text(path, out);
        written.push_back(path);
    }
    return written;
}

} // namespace bilora
