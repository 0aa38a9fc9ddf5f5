// SPDX-License-Identifier: Apache-2.0
#pragma once

// Line-delimited JSON run log. Every line is one object with a "kind" field:
//
//   header      version, seed, config (key -> string, every schema key)
//   step        step, loss, lr, grad_norm, backward_passes,
//               perturbation_applied, perturbation_norm[, perturbed_loss]
//   eval        step, train_loss, train_metric, eval_loss, eval_metric
//   clip        step, c_norm_before, c_norm_after, triggered
//   term_norms  step, layer, norm_b_eps_a, norm_eps_b_a, norm_eps_b_eps_a,
//               ratio (null when infinite), ratio_infinite,
//               reconstruction_error, reconstruction_scale
//   subspace    step, layer, method-specific residual fields
//   trajectory  step, cos_primary[, cos_auxiliary, cross_cosine], degenerate
//   event       step, what, detail
//   final       summary of the run
//
// Step indices are strictly increasing within each kind (per layer for
// term_norms and subspace). No wall-clock values are written, so a log is a
// pure function of config and seed.

#include "bilora/config.hpp"
#include "bilora/diagnostics.hpp"
#include "bilora/error.hpp"
#include "bilora/optim.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace bilora {

using Json = nlohmann::json;

inline constexpr const char* kCodeVersion = "0.1.0";

class RunLog {
public:
    void header(const ExperimentConfig& cfg) {
        Json c = Json::object();
        for (const auto& f : schema()) c[f.key] = f.get(cfg);
        push("header", std::nullopt, {{"version", kCodeVersion}, {"seed", cfg.seed}, {"config", c}});
    }

    void step(const StepReport& r) {
        Json j{{"loss", r.loss},
               {"lr", r.lr},
               {"grad_norm", r.grad_norm},
               {"backward_passes", r.backward_passes},
               {"perturbation_applied", r.perturbation_applied},
               {"perturbation_norm", r.perturbation_norm}};
        if (r.perturbed_loss) j["perturbed_loss"] = *r.perturbed_loss;
        push("step", r.step, std::move(j));
    }

    void eval(const EvalPoint& p) {
        push("eval", p.step,
             {{"train_loss", p.train_loss},
              {"train_metric", p.train_metric},
              {"eval_loss", p.eval_loss},
              {"eval_metric", p.eval_metric}});
    }

    void clip(std::uint64_t step, const ClipReport& c) {
        push("clip", step,
             {{"c_norm_before", c.c_norm_before}, {"c_norm_after", c.c_norm_after}, {"triggered", c.triggered}});
    }

    void term_norms(const TermNormRecord& r) {
        const bool inf = std::isinf(r.ratio);
        push("term_norms", r.step,
             {{"layer", r.layer},
              {"norm_b_eps_a", r.norm_b_eps_a},
              {"norm_eps_b_a", r.norm_eps_b_a},
              {"norm_eps_b_eps_a", r.norm_eps_b_eps_a},
              {"ratio", inf ? Json(nullptr) : Json(r.ratio)},
              {"ratio_infinite", inf},
              {"reconstruction_error", r.reconstruction_error},
              {"reconstruction_scale", r.reconstruction_scale}},
             r.layer);
    }

    void subspace(const LoraSamSubspaceReport& r) {
        push("subspace", r.step,
             {{"layer", r.layer},
              {"b_eps_a_residual", r.b_eps_a_outside_col_b.residual},
              {"b_eps_a_norm", r.b_eps_a_outside_col_b.norm},
              {"eps_b_a_residual", r.eps_b_a_outside_row_a.residual},
              {"eps_b_a_norm", r.eps_b_a_outside_row_a.norm},
              {"degenerate", r.b_eps_a_outside_col_b.degenerate || r.eps_b_a_outside_row_a.degenerate}},
             r.layer);
    }

    void subspace(const BiLoraSubspaceReport& r) {
        push("subspace", r.step,
             {{"layer", r.layer},
              {"aux_residual", r.aux_outside_col_b2.residual},
              {"aux_norm", r.aux_outside_col_b2.norm},
              {"max_principal_cosine", r.max_principal_cosine},
              {"degenerate", r.aux_outside_col_b2.degenerate}},
             r.layer);
    }

    void trajectory(const TrajectoryRecord& r) {
        Json j{{"cos_primary", r.cos_primary}, {"degenerate", r.degenerate}};
        if (r.cos_auxiliary) j["cos_auxiliary"] = *r.cos_auxiliary;
        if (r.cross_cosine) j["cross_cosine"] = *r.cross_cosine;
        push("trajectory", r.step, std::move(j));
    }

    void event(std::uint64_t step, const std::string& what, Json detail = Json::object()) {
        records_.push_back({{"kind", "event"}, {"step", step}, {"what", what}, {"detail", std::move(detail)}});
    }

    void final(Json summary) { push("final", std::nullopt, std::move(summary)); }

    const std::vector<Json>& records() const noexcept { return records_; }

    std::string text() const {
        std::string out;
        for (const auto& r : records_) out += r.dump() + "\n";
        return out;
    }

    void write(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
        out << text();
        if (!out) throw IoError("write failed for '" + path.string() + "'");
    }

private:
    void push(const char* kind, std::optional<std::uint64_t> step, Json fields, std::size_t layer = 0) {
        Json rec{{"kind", kind}};
        if (step) {
            const std::string key = std::string(kind) + "/" + std::to_string(layer);
            auto it = last_.find(key);
            if (it != last_.end() && *step <= it->second)
                throw ContractViolation(std::string("RunLog: non-increasing step in '") + kind + "' records");
            last_[key] = *step;
            rec["step"] = *step;
        }
        for (auto& [k, v] : fields.items()) rec[k] = v;
        records_.push_back(std::move(rec));
    }

    std::vector<Json> records_;
    std::map<std::string, std::uint64_t> last_;
};

inline std::vector<Json> parse_runlog(const std::string& text) {
    std::vector<Json> out;
    std::stringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(Json::parse(line));
        } catch (const Json::parse_error& e) {
            throw IoError("run log line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline std::vector<Json> read_runlog(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_runlog(ss.str());
}

/// Records of one kind, in log order.
inline std::vector<Json> records_of(const std::vector<Json>& log, const std::string& kind) {
    std::vector<Json> out;
    for (const auto& r : log)
        if (r.at("kind") == kind) out.push_back(r);
    return out;
}

} // namespace bilora
