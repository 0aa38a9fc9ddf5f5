// SPDX-License-Identifier: Apache-2.0
// Command-line front end: dataset synthesis, pretraining, fine-tuning,
// sweeps, step-time benchmarks, landscape scans, reports and exports.

#include "bilora/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

using namespace bilora;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    std::string method;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "config file (INI-style sections)");
    sub->add_option("--seed", c.seed, "run seed (run.seed)");
    sub->add_option("--out", c.out, "output directory")->capture_default_str();
    sub->add_option("--method", c.method, "lora | lora-sam | bi-lora | full-ft | sam-full");
    sub->add_option("--override", c.overrides, "key=value, repeatable")->allow_extra_args(false);
}

ExperimentConfig resolve(const Common& c, std::map<std::string, std::string>* extras = nullptr,
                         const std::vector<std::string>& sections = {}) {
    ExperimentConfig cfg;
    if (!c.config.empty()) cfg = load_config(c.config, extras, sections);
    for (const auto& o : c.overrides) apply_override(cfg, o);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.method.empty()) cfg.optim.method = parse_method(c.method);
    cfg.validate();
    return cfg;
}

void say(const std::string& line) { std::cout << line << "\n"; }

std::string fmt(double v) { return format_double(v); }

int gen_data(const Common& c) {
    const auto cfg = resolve(c);
    const fs::path out = c.out;
    detail::ensure_dir(out);
    const auto source = generate_dataset(cfg.source, cfg.pretrain.seed);
    const auto task = generate_dataset(cfg.task, cfg.seed);
    write_dataset_csv(source.train, out / "source_train.csv");
    write_dataset_csv(source.eval, out / "source_eval.csv");
    write_dataset_csv(task.train, out / "train.csv");
    write_dataset_csv(task.eval, out / "eval.csv");
    detail::write_text(out / "config.ini", dump_config(cfg));
    say("wrote " + (out / "train.csv").string() + " (" + std::to_string(task.train.size()) + " rows)");
    return 0;
}

int pretrain_cmd(const Common& c) {
    const auto cfg = resolve(c);
    const fs::path out = c.out;
    detail::ensure_dir(out);
    auto r = pretrain(cfg);
    save_network(r.net, out / "base.ckpt");
    detail::write_text(out / "config.ini", dump_config(cfg));
    Json summary{{"train_loss", r.train_loss},
                 {"train_metric", r.train_metric},
                 {"eval_metric", r.eval_metric},
                 {"checksum", base_checksum(r.net)}};
    detail::write_text(out / "pretrain.json", summary.dump(2) + "\n");
    say("pretrain train_metric " + fmt(r.train_metric) + " eval_metric " + fmt(r.eval_metric) + " -> " +
        (out / "base.ckpt").string());
    return 0;
}

Network base_for(const ExperimentConfig& cfg, const std::string& base_path) {
    if (base_path.empty()) return pretrain(cfg).net;
    Network net = load_network(base_path);
    const auto counts = adapter_parameter_counts(net);
    if (counts.primary + counts.auxiliary > 0) throw ConfigError("'" + base_path + "' carries adapters; expected a base");
    return net;
}

int finetune_cmd(const Common& c, const std::string& base_path) {
    const auto cfg = resolve(c);
    const Network base = base_for(cfg, base_path);
    auto r = finetune(cfg, base, generate_dataset(cfg.task, cfg.seed));
    write_finetune_outputs(cfg, r, c.out);
    std::size_t triggered = 0;
    for (const auto& cl : r.clips) triggered += cl.triggered;
    say(to_string(cfg.optim.method) + " seed " + std::to_string(cfg.seed) + " eval_metric " +
        fmt(r.last_eval().eval_metric) + " late_gap " + fmt(r.late_gap) + " sharpness " +
        fmt(r.sharpness.mean_increase) + " clips " + std::to_string(triggered) + "/" + std::to_string(r.clips.size()));
    return 0;
}

int sweep_cmd(const Common& c, const std::string& axes, const std::string& seeds, std::size_t workers) {
    std::map<std::string, std::string> extras;
    const auto cfg = resolve(c, &extras, {"sweep"});
    if (!axes.empty()) extras["sweep.axes"] = axes;
    if (!seeds.empty()) extras["sweep.seeds"] = seeds;
    if (workers > 0) extras["sweep.workers"] = std::to_string(workers);
    const auto spec = make_sweep_spec(cfg, extras);
    const fs::path out = c.out;
    auto cells = run_sweep(spec, out);
    const auto table = sweep_table(cells);
    detail::write_text(out / "summary.tsv", table);
    std::cout << table;
    std::size_t failures = 0;
    for (const auto& cell : cells) {
        failures += cell.errors.size();
        for (const auto& e : cell.errors) std::cerr << "warning: " << cell.label() << ": " << e << "\n";
    }
    return failures == 0 ? 0 : 3;
}

int bench_cmd(const Common& c, const std::vector<std::string>& names, std::size_t warmup, std::size_t measured) {
    const auto cfg = resolve(c);
    std::vector<Method> methods;
    for (const auto& n : names) methods.push_back(parse_method(n));
    const auto rows = benchmark_step_time(cfg, methods, warmup, measured);
    const auto table = timing_table(rows);
    detail::ensure_dir(c.out);
    detail::write_text(fs::path(c.out) / "timing.tsv", table);
    std::cout << table;
    return 0;
}

LandscapeSpace parse_space(const std::string& s) {
    for (auto sp : {LandscapeSpace::lora_params, LandscapeSpace::full_params_excluding_lora, LandscapeSpace::all_params})
        if (to_string(sp) == s) return sp;
    throw ConfigError("unknown landscape space '" + s + "'");
}

int landscape_cmd(const Common& c, const std::string& run_dir, const std::string& space, double radius,
                  std::size_t points, std::size_t repeats) {
    const fs::path dir = run_dir;
    ExperimentConfig cfg = load_config(dir / "config.ini");
    for (const auto& o : c.overrides) apply_override(cfg, o);
    if (c.seed) cfg.seed = *c.seed;
    LandscapeScan scan;
    scan.space = parse_space(space);
    scan.direction_seed = cfg.seed;
    scan.radii = symmetric_grid(radius, points);
    scan.repeats = repeats;
    // The lora-params space needs the adapters; the others scan the inference model.
    Network net = load_network(dir / (scan.space == LandscapeSpace::full_params_excluding_lora ? "merged.ckpt" : "model.ckpt"));
    const auto data = generate_dataset(cfg.task, cfg.seed);
    scan = scan_landscape_1d(net, data.train.to_batch(), scan);
    const auto table = landscape_table(scan);
    const fs::path out = c.out;
    detail::ensure_dir(out);
    detail::write_text(out / "landscape.tsv", table);
    std::cout << table;
    return 0;
}

int report_cmd(const Common& c, const std::vector<std::string>& runs) {
    std::vector<fs::path> dirs(runs.begin(), runs.end());
    const auto rep = compare_report(dirs);
    const fs::path out = c.out;
    detail::ensure_dir(out);
    detail::write_text(out / "report.tsv", rep.table());
    detail::write_text(out / "report.txt", rep.text());
    std::cout << rep.text();
    return 0;
}

int export_cmd(const Common& c, const std::string& run_dir) {
    const auto files = export_runlog(read_runlog(fs::path(run_dir) / "runlog.jsonl"), c.out);
    for (const auto& f : files) say(f.string());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Low-rank adapter fine-tuning with sharpness-aware variants on small MLPs", "bilora"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kCodeVersion));

    Common common;
    std::string base_path, run_dir, axes, seeds, space = "full-params-excluding-lora";
    std::vector<std::string> bench_methods{"lora", "bi-lora", "lora-sam"}, runs;
    std::size_t workers = 0, warmup = 10, measured = 100, points = 10, repeats = 5;
    double radius = 1.0;

    auto* gen = app.add_subcommand("gen-data", "write source and task datasets as CSV");
    add_common(gen, common);
    auto* pre = app.add_subcommand("pretrain", "train the base network on the source task");
    add_common(pre, common);
    auto* fine = app.add_subcommand("finetune", "fine-tune a base network with one method");
    add_common(fine, common);
    fine->add_option("--base", base_path, "base checkpoint (pretrained in-process when omitted)");
    auto* sweep = app.add_subcommand("sweep", "grid of finetune runs, aggregated per cell");
    add_common(sweep, common);
    sweep->add_option("--axes", axes, "key:v1,v2; key2:... (overrides [sweep] axes)");
    sweep->add_option("--seeds", seeds, "comma-separated seeds per cell");
    sweep->add_option("--workers", workers, "parallel cells");
    auto* bench = app.add_subcommand("bench", "median step time per method on one model and batch");
    add_common(bench, common);
    bench->add_option("--methods", bench_methods, "methods to time")->delimiter(',')->capture_default_str();
    bench->add_option("--warmup", warmup, "untimed steps")->capture_default_str();
    bench->add_option("--measured", measured, "timed steps (>= 30)")->capture_default_str();
    auto* land = app.add_subcommand("landscape", "1-D loss scan around a finished run");
    add_common(land, common);
    land->add_option("--run", run_dir, "finetune output directory")->required();
    land->add_option("--space", space, "full-params-excluding-lora | lora-params | all-params")->capture_default_str();
    land->add_option("--radius", radius, "outermost radius")->capture_default_str();
    land->add_option("--points", points, "grid points per side")->capture_default_str();
    land->add_option("--repeats", repeats, "random directions")->capture_default_str();
    auto* report = app.add_subcommand("report", "compare finished runs on one task");
    add_common(report, common);
    report->add_option("runs", runs, "finetune output directories")->required();
    auto* exp = app.add_subcommand("export", "RunLog records as TSV tables");
    add_common(exp, common);
    exp->add_option("--run", run_dir, "finetune output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: UsageError: " << e.what() << "\n";
        return 2;
    }

    try {
        if (*gen) return gen_data(common);
        if (*pre) return pretrain_cmd(common);
        if (*fine) return finetune_cmd(common, base_path);
        if (*sweep) return sweep_cmd(common, axes, seeds, workers);
        if (*bench) return bench_cmd(common, bench_methods, warmup, measured);
        if (*land) return landscape_cmd(common, run_dir, space, radius, points, repeats);
        if (*report) return report_cmd(common, runs);
        if (*exp) return export_cmd(common, run_dir);
    } catch (const Error& e) {
        std::cerr << "error: " << e.error_class() << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: Error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
