// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "bilora/adapters.hpp"
#include "bilora/network.hpp"
#include "bilora/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace bilora {

// ---------------------------------------------------------------------------
// Perturbation term norms
// ---------------------------------------------------------------------------

/// Norms of the three pieces of the effective perturbation
/// (B+εB)(A+εA) − BA = B·εA + εB·A + εB·εA.
struct TermNormRecord {
    std::uint64_t step = 0;
    std::size_t layer = 0;
    double norm_b_eps_a = 0.0;
    double norm_eps_b_a = 0.0;
    double norm_eps_b_eps_a = 0.0;
    /// ‖B·εA + εB·A‖ / ‖εB·εA‖; +inf when the denominator is zero.
    double ratio = std::numeric_limits<double>::infinity();
    /// ‖(B+εB)(A+εA) − BA − (sum of the three terms)‖_F
    double reconstruction_error = 0.0;
    /// Scale the reconstruction error is judged against.
    double reconstruction_scale = 0.0;
};

inline TermNormRecord record_term_norms(const Matrix& b, const Matrix& a, const Matrix& eps_b,
                                        const Matrix& eps_a, std::uint64_t step = 0,
                                        std::size_t layer = 0) {
    TermNormRecord r;
    r.step = step;
    r.layer = layer;
    const Matrix t1 = matmul(b, eps_a);
    const Matrix t2 = matmul(eps_b, a);
    const Matrix t3 = matmul(eps_b, eps_a);
    r.norm_b_eps_a = frobenius_norm(t1);
    r.norm_eps_b_a = frobenius_norm(t2);
    r.norm_eps_b_eps_a = frobenius_norm(t3);
    const double first_two = frobenius_norm(t1 + t2);
    if (r.norm_eps_b_eps_a > 0.0) r.ratio = first_two / r.norm_eps_b_eps_a;

    const Matrix base = matmul(b, a);
    Matrix resid = matmul(b + eps_b, a + eps_a);
    resid -= base;
    resid -= t1;
    resid -= t2;
    resid -= t3;
    r.reconstruction_error = frobenius_norm(resid);
    r.reconstruction_scale = (frobenius_norm(b) + frobenius_norm(eps_b)) *
                             (frobenius_norm(a) + frobenius_norm(eps_a));
    return r;
}

/// Term norms for one layer from its merged-weight gradient, using the
/// layer's own F_total = sqrt(‖∂L/∂B‖² + ‖∂L/∂A‖²). With F_total = 0 the
/// perturbation is zero and the ratio stays at the +inf sentinel.
inline TermNormRecord record_term_norms(const LoRALinear& layer, const Matrix& grad_w, double rho,
                                        std::uint64_t step = 0, std::size_t layer_id = 0) {
    if (!layer.primary) throw ContractViolation("record_term_norms: layer has no primary adapter");
    const auto& p = *layer.primary;
    auto fg = project_grad(grad_w, p);
    const double f_total = std::sqrt(squared_norm(fg.b) + squared_norm(fg.a));
    Matrix eps_b(p.b.rows(), p.b.cols()), eps_a(p.a.rows(), p.a.cols());
    if (f_total > 0.0) {
        eps_b = fg.b;
        eps_b *= rho / f_total;
        eps_a = fg.a;
        eps_a *= rho / f_total;
    }
    return record_term_norms(p.b, p.a, eps_b, eps_a, step, layer_id);
}

// ---------------------------------------------------------------------------
// Convergence trajectories
// ---------------------------------------------------------------------------

/// Flattened adapter state at one step.
struct ParameterSnapshot {
    std::uint64_t step = 0;
    std::vector<double> primary;    ///< concatenated (B1, A1) of all adapted layers
    std::vector<double> auxiliary;  ///< concatenated (B2, A2); empty without auxiliary
    std::vector<double> primary_delta;    ///< concatenated s1·B1A1
    std::vector<double> auxiliary_delta;  ///< concatenated s2·B2A2
};

inline ParameterSnapshot take_snapshot(const Network& net, std::uint64_t step) {
    ParameterSnapshot s;
    s.step = step;
    s.primary = flatten_adapters(net, false);
    s.auxiliary = flatten_adapters(net, true);
    for (const auto& l : net.layers) {
        if (l.primary) {
            auto d = l.primary->delta();
            s.primary_delta.insert(s.primary_delta.end(), d.values().begin(), d.values().end());
        }
        if (l.auxiliary) {
            auto d = l.auxiliary->delta();
            s.auxiliary_delta.insert(s.auxiliary_delta.end(), d.values().begin(), d.values().end());
        }
    }
    return s;
}

struct TrajectoryRecord {
    std::uint64_t step = 0;
    double cos_primary = 0.0;
    std::optional<double> cos_auxiliary;
    /// Cosine between the primary and auxiliary weight deltas at this step.
    std::optional<double> cross_cosine;
    /// Set when a zero-norm vector forced a cosine to 0.
    bool degenerate = false;
};

inline std::vector<TrajectoryRecord> record_trajectory(std::span<const ParameterSnapshot> snapshots,
                                                       const ParameterSnapshot& final_state) {
    if (snapshots.size() < 2) throw ContractViolation("record_trajectory: need at least two snapshots");
    auto zero = [](std::span<const double> v) {
        return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
    };
    std::vector<TrajectoryRecord> out;
    for (const auto& s : snapshots) {
        if (s.primary.size() != final_state.primary.size() || s.auxiliary.size() != final_state.auxiliary.size())
            throw ContractViolation("record_trajectory: snapshot shape differs from final state");
        TrajectoryRecord r;
        r.step = s.step;
        r.cos_primary = cosine(s.primary, final_state.primary);
        r.degenerate = zero(s.primary) || zero(final_state.primary);
        if (!s.auxiliary.empty()) {
            r.cos_auxiliary = cosine(s.auxiliary, final_state.auxiliary);
            r.degenerate = r.degenerate || zero(s.auxiliary) || zero(final_state.auxiliary);
            if (s.primary_delta.size() == s.auxiliary_delta.size()) {
                r.cross_cosine = cosine(s.primary_delta, s.auxiliary_delta);
                r.degenerate = r.degenerate || zero(s.primary_delta) || zero(s.auxiliary_delta);
            }
        }
        out.push_back(r);
    }
    return out;
}

/// First step from which `values` stays at or above `threshold` through the
/// end of the series; nullopt if the last value is below it.
inline std::optional<std::uint64_t> settle_step(std::span<const std::uint64_t> steps,
                                                std::span<const double> values, double threshold) {
    if (steps.size() != values.size()) throw ContractViolation("settle_step: length mismatch");
    std::optional<std::uint64_t> at;
    for (std::size_t i = values.size(); i-- > 0;) {
        if (values[i] < threshold) break;
        at = steps[i];
    }
    return at;
}

// ---------------------------------------------------------------------------
// Landscape scans and sharpness
// ---------------------------------------------------------------------------

enum class LandscapeSpace { lora_params, full_params_excluding_lora, all_params };

inline std::string to_string(LandscapeSpace s) {
    switch (s) {
        case LandscapeSpace::lora_params: return "lora-params";
        case LandscapeSpace::full_params_excluding_lora: return "full-params-excluding-lora";
        case LandscapeSpace::all_params: return "all-params";
    }
    return "?";
}
inline LandscapeSpace parse_landscape_space(const std::string& s) {
    if (s == "lora-params") return LandscapeSpace::lora_params;
    if (s == "full-params-excluding-lora" || s == "full-params") return LandscapeSpace::full_params_excluding_lora;
    if (s == "all-params") return LandscapeSpace::all_params;
    throw ConfigError("unknown landscape space '" + s + "'");
}

struct LandscapeScan {
    LandscapeSpace space = LandscapeSpace::full_params_excluding_lora;
    std::uint64_t direction_seed = 0;
    std::vector<double> radii;
    std::size_t repeats = 1;
    /// Scan along −direction instead (mirror check).
    bool negate = false;
    /// losses[repeat][i] at radii[i]
    std::vector<std::vector<double>> losses;

    std::vector<double> mean_curve() const {
        std::vector<double> m(radii.size(), 0.0);
        for (const auto& row : losses)
            for (std::size_t i = 0; i < m.size(); ++i) m[i] += row[i];
        for (auto& v : m) v /= static_cast<double>(std::max<std::size_t>(1, losses.size()));
        return m;
    }
};

/// Symmetric grid {−max, …, 0, …, max} with `points_per_side` points on each side.
inline std::vector<double> symmetric_grid(double max_radius, std::size_t points_per_side) {
    std::vector<double> g;
    const auto n = static_cast<double>(points_per_side);
    for (std::size_t i = points_per_side; i > 0; --i) g.push_back(-max_radius * static_cast<double>(i) / n);
    g.push_back(0.0);
    for (std::size_t i = 1; i <= points_per_side; ++i) g.push_back(max_radius * static_cast<double>(i) / n);
    return g;
}

inline std::vector<Matrix*> landscape_parameters(Network& net, LandscapeSpace space) {
    std::vector<Matrix*> out;
    if (space != LandscapeSpace::lora_params) out = base_parameters(net);
    if (space != LandscapeSpace::full_params_excluding_lora) {
        auto f = adapter_factors(net, false);
        out.insert(out.end(), f.begin(), f.end());
    }
    return out;
}

/// Loss along filter-normalized random directions. Each selected matrix gets
/// its own Gaussian block rescaled to that matrix's norm (zero-norm matrices
/// get a zero block). Loss is the inference loss (auxiliary excluded) on
/// `data`. The network is restored bitwise.
inline LandscapeScan scan_landscape_1d(Network& net, const Batch& data, LandscapeScan scan) {
    if (scan.radii.empty()) throw ContractViolation("scan_landscape_1d: empty radius grid");
    auto params = landscape_parameters(net, scan.space);
    std::vector<Matrix> saved;
    for (auto* p : params) saved.push_back(*p);
    scan.losses.clear();
    for (std::size_t rep = 0; rep < scan.repeats; ++rep) {
        RngStream rng(scan.direction_seed, rep);
        std::vector<Matrix> dir;
        for (auto* p : params) {
            Matrix d = seeded_gaussian(p->rows(), p->cols(), rng, 1.0);
            const double dn = frobenius_norm(d), pn = frobenius_norm(*p);
            if (dn > 0.0 && pn > 0.0) d *= (scan.negate ? -pn : pn) / dn;
            else d.fill(0.0);
            dir.push_back(std::move(d));
        }
        std::vector<double> row;
        for (double t : scan.radii) {
            for (std::size_t i = 0; i < params.size(); ++i) {
                *params[i] = saved[i];
                if (t != 0.0) params[i]->add_scaled(dir[i], t);
            }
            row.push_back(evaluate_loss(net, data, false));
        }
        for (std::size_t i = 0; i < params.size(); ++i) *params[i] = saved[i];
        scan.losses.push_back(std::move(row));
    }
    return scan;
}

struct SharpnessReport {
    double rho_eval = 0.0;
    std::size_t n_samples = 0;
    double base_loss = 0.0;
    double mean_increase = 0.0;
    double max_increase = 0.0;
};

/// Loss increase under perturbations drawn uniformly on the sphere of radius
/// rho_eval over all entries of `params`. Samples come in antithetic pairs
/// (d, −d), which cancels the linear term of the mean. Parameters are
/// restored bitwise.
template <class LossFn>
SharpnessReport estimate_sharpness(std::span<Matrix* const> params, LossFn&& loss_fn, double rho_eval,
                                   std::size_t n_samples, RngStream& rng) {
    if (!(rho_eval > 0.0)) throw ContractViolation("estimate_sharpness: rho_eval must be positive");
    if (n_samples < 1) throw ContractViolation("estimate_sharpness: need at least one sample");
    SharpnessReport r;
    r.rho_eval = rho_eval;
    r.n_samples = n_samples;
    r.base_loss = loss_fn();
    r.max_increase = -std::numeric_limits<double>::infinity();
    std::vector<Matrix> saved;
    for (auto* p : params) saved.push_back(*p);
    double sum = 0.0;
    std::vector<Matrix> dir;
    double scale = 0.0;
    for (std::size_t s = 0; s < n_samples; ++s) {
        if (s % 2 == 0) {
            dir.clear();
            double sq = 0.0;
            for (auto* p : params) {
                dir.push_back(seeded_gaussian(p->rows(), p->cols(), rng, 1.0));
                sq += squared_norm(dir.back());
            }
            scale = sq > 0.0 ? rho_eval / std::sqrt(sq) : 0.0;
        } else {
            scale = -scale;
        }
        for (std::size_t i = 0; i < params.size(); ++i) params[i]->add_scaled(dir[i], scale);
        const double inc = loss_fn() - r.base_loss;
        for (std::size_t i = 0; i < params.size(); ++i) *params[i] = saved[i];
        sum += inc;
        r.max_increase = std::max(r.max_increase, inc);
    }
    r.mean_increase = sum / static_cast<double>(n_samples);
    return r;
}

/// Sharpness of the inference model: perturbations over every weight and
/// bias of merge_for_inference(net). `net` itself is not touched.
inline SharpnessReport estimate_sharpness(const Network& net, const Batch& data, double rho_eval,
                                          std::size_t n_samples, RngStream& rng) {
    Network merged = merge_for_inference(net);
    auto params = base_parameters(merged);
    return estimate_sharpness(params, [&] { return evaluate_loss(merged, data, false); }, rho_eval, n_samples, rng);
}

// ---------------------------------------------------------------------------
// Subspace checks
// ---------------------------------------------------------------------------

/// A residual together with the norm of the matrix it was measured on.
struct Residual {
    double residual = 0.0;
    double norm = 0.0;
    /// The matrix or its basis was zero; residual defined as 0.
    bool degenerate = false;

    double relative() const noexcept { return norm > 0.0 ? residual / norm : 0.0; }
};

inline Residual column_residual_of(const Matrix& m, const Matrix& basis) {
    Residual r;
    r.norm = frobenius_norm(m);
    const Matrix q = orthonormal_columns(basis);
    if (r.norm == 0.0 || q.cols() == 0) {
        r.degenerate = true;
        return r;
    }
    r.residual = projection_residual(m, q);
    return r;
}

inline Residual row_residual_of(const Matrix& m, const Matrix& basis) {
    return column_residual_of(transpose(m), transpose(basis));
}

struct LoraSamSubspaceReport {
    std::uint64_t step = 0;
    std::size_t layer = 0;
    Residual b_eps_a_outside_col_b;  ///< B·εA against Col(B)
    Residual eps_b_a_outside_row_a;  ///< εB·A against Row(A)
};

inline LoraSamSubspaceReport check_subspaces(const PerturbationContext& ctx, std::uint64_t step = 0) {
    LoraSamSubspaceReport r;
    r.step = step;
    r.layer = ctx.layer;
    r.b_eps_a_outside_col_b = column_residual_of(matmul(ctx.b, ctx.eps_a), ctx.b);
    r.eps_b_a_outside_row_a = row_residual_of(matmul(ctx.eps_b, ctx.a), ctx.a);
    return r;
}

struct BiLoraSubspaceReport {
    std::uint64_t step = 0;
    std::size_t layer = 0;
    Residual aux_outside_col_b2;  ///< s2·B2A2 against Col(B2)
    /// Largest principal-angle cosine between Col(B1) and Col(B2).
    double max_principal_cosine = 0.0;
};

inline BiLoraSubspaceReport check_subspaces(const LoRALinear& layer, std::uint64_t step = 0,
                                            std::size_t layer_id = 0) {
    if (!layer.primary || !layer.auxiliary)
        throw ContractViolation("check_subspaces: layer needs primary and auxiliary pairs");
    BiLoraSubspaceReport r;
    r.step = step;
    r.layer = layer_id;
    r.aux_outside_col_b2 = column_residual_of(layer.auxiliary->delta(), layer.auxiliary->b);
    r.max_principal_cosine = max_principal_cosine(layer.primary->b, layer.auxiliary->b);
    return r;
}

// ---------------------------------------------------------------------------
// Generalization gap
// ---------------------------------------------------------------------------

/// Aligned train/eval measurements at one evaluation point.
struct EvalPoint {
    std::uint64_t step = 0;
    double train_loss = 0.0;
    double eval_loss = 0.0;
    double train_metric = 0.0;
    double eval_metric = 0.0;
};

struct GapPoint {
    std::uint64_t step = 0;
    double loss_gap = 0.0;    ///< eval loss − train loss
    double metric_gap = 0.0;  ///< train metric − eval metric
};

inline std::vector<GapPoint> track_generalization_gap(std::span<const EvalPoint> points) {
    std::vector<GapPoint> out;
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (i > 0 && points[i].step <= points[i - 1].step)
            throw ContractViolation("track_generalization_gap: evaluation steps not increasing");
        out.push_back({points[i].step, points[i].eval_loss - points[i].train_loss,
                       points[i].train_metric - points[i].eval_metric});
    }
    return out;
}

/// Gap series from separately recorded train and eval series.
inline std::vector<GapPoint> track_generalization_gap(std::span<const std::uint64_t> train_steps,
                                                      std::span<const double> train_loss,
                                                      std::span<const double> train_metric,
                                                      std::span<const std::uint64_t> eval_steps,
                                                      std::span<const double> eval_loss,
                                                      std::span<const double> eval_metric) {
    const auto n = train_steps.size();
    if (train_loss.size() != n || train_metric.size() != n || eval_steps.size() != n || eval_loss.size() != n ||
        eval_metric.size() != n)
        throw ContractViolation("track_generalization_gap: series lengths differ");
    std::vector<EvalPoint> pts;
    for (std::size_t i = 0; i < n; ++i) {
        if (train_steps[i] != eval_steps[i])
            throw ContractViolation("track_generalization_gap: series misaligned at index " + std::to_string(i));
        pts.push_back({train_steps[i], train_loss[i], eval_loss[i], train_metric[i], eval_metric[i]});
    }
    return track_generalization_gap(pts);
}

/// Mean loss gap over the last `fraction` of the points (at least one).
inline double late_phase_mean_gap(std::span<const GapPoint> gaps, double fraction = 0.25) {
    if (gaps.empty()) return 0.0;
    const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * gaps.size())));
    double s = 0.0;
    for (std::size_t i = gaps.size() - n; i < gaps.size(); ++i) s += gaps[i].loss_gap;
    return s / static_cast<double>(n);
}

} // namespace bilora
