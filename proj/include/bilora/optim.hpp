// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "bilora/adapters.hpp"
#include "bilora/network.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bilora {

enum class Method { full_ft, lora, sam_full, lora_sam, bi_lora };
enum class BaseRule { sgd, adamw };
enum class NormScope { global, per_layer };
enum class Schedule { constant, cosine };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::full_ft: return "full-ft";
        case Method::lora: return "lora";
        case Method::sam_full: return "sam-full";
        case Method::lora_sam: return "lora-sam";
        case Method::bi_lora: return "bi-lora";
    }
    return "?";
}
inline Method parse_method(const std::string& s) {
    if (s == "full-ft") return Method::full_ft;
    if (s == "lora") return Method::lora;
    if (s == "sam-full") return Method::sam_full;
    if (s == "lora-sam") return Method::lora_sam;
    if (s == "bi-lora") return Method::bi_lora;
    throw ConfigError("unknown method '" + s + "'");
}
inline std::string to_string(BaseRule r) { return r == BaseRule::sgd ? "sgd" : "adamw"; }
inline BaseRule parse_base_rule(const std::string& s) {
    if (s == "sgd") return BaseRule::sgd;
    if (s == "adamw") return BaseRule::adamw;
    throw ConfigError("unknown base rule '" + s + "'");
}
inline std::string to_string(NormScope s) { return s == NormScope::global ? "global" : "per-layer"; }
inline NormScope parse_norm_scope(const std::string& s) {
    if (s == "global") return NormScope::global;
    if (s == "per-layer") return NormScope::per_layer;
    throw ConfigError("unknown norm scope '" + s + "'");
}
inline std::string to_string(Schedule s) { return s == Schedule::constant ? "constant" : "cosine"; }
inline Schedule parse_schedule(const std::string& s) {
    if (s == "constant") return Schedule::constant;
    if (s == "cosine") return Schedule::cosine;
    throw ConfigError("unknown schedule '" + s + "'");
}

inline bool uses_adapters(Method m) { return m == Method::lora || m == Method::lora_sam || m == Method::bi_lora; }

struct OptimConfig {
    Method method = Method::lora;
    double eta1 = 5e-4;
    /// Auxiliary (ascent) learning rate; unset means eta1.
    std::optional<double> eta2;
    double rho = 0.05;
    BaseRule rule = BaseRule::adamw;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
    NormScope norm_scope = NormScope::global;
    /// Whether c_norm measures s2·B2A2 (true) or the raw B2A2 product.
    bool clip_includes_scaling = true;
    Schedule schedule = Schedule::constant;
    double warmup_ratio = 0.0;
    /// Horizon for the cosine schedule.
    std::uint64_t total_steps = 0;

    double ascent_rate() const noexcept { return eta2.value_or(eta1); }

    void validate() const {
        if (!(eta1 >= 0.0) || !(ascent_rate() >= 0.0)) throw ConfigError("learning rates must be non-negative");
        if (!(rho >= 0.0)) throw ConfigError("rho must be non-negative");
        if (method == Method::bi_lora && !(rho > 0.0)) throw ConfigError("bi-lora requires rho > 0");
        if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ConfigError("warmup ratio must lie in [0, 1)");
        if (schedule == Schedule::cosine && total_steps == 0)
            throw ConfigError("cosine schedule needs total_steps");
    }
};

/// Learning-rate multiplier at 0-based step k (linear warmup, then cosine).
inline double schedule_factor(const OptimConfig& cfg, std::uint64_t k) {
    if (cfg.schedule == Schedule::constant) return 1.0;
    const auto total = static_cast<double>(cfg.total_steps);
    const double warm = std::ceil(cfg.warmup_ratio * total);
    const auto kd = static_cast<double>(k);
    if (kd < warm) return (kd + 1.0) / warm;
    if (total <= warm) return 1.0;
    const double progress = std::min(1.0, (kd - warm) / (total - warm));
    return 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

struct Moments {
    Matrix first;
    Matrix second;
};

struct OptimState {
    /// Completed steps (the iteration index k of the next step).
    std::uint64_t step = 0;
    /// AdamW moments, aligned with the trainable-parameter list of the method.
    std::vector<Moments> moments;
    /// Record the applied SAM perturbation and pass-1 merged gradients in
    /// step reports (diagnostics only).
    bool capture = false;
};

/// Norms before and after the auxiliary clip.
struct ClipReport {
    double c_norm_before = 0.0;
    double c_norm_after = 0.0;
    bool triggered = false;
};

/// One adapted layer's factors and the SAM perturbation applied to them.
struct PerturbationContext {
    std::size_t layer = 0;
    Matrix b, a, eps_b, eps_a;
};

struct StepReport {
    std::uint64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    /// Norm of the pass-1 gradient of the trainable parameters.
    double grad_norm = 0.0;
    std::uint64_t backward_passes = 0;
    bool perturbation_applied = false;
    double perturbation_norm = 0.0;
    /// Loss at the perturbed point (SAM variants that perturbed).
    std::optional<double> perturbed_loss;
    std::optional<ClipReport> clip;
    /// Filled when OptimState::capture is set.
    std::vector<PerturbationContext> perturbations;
    GradientSet merged_grad;
};

/// Apply SGD or AdamW to `params` in place. Weight decay is decoupled.
inline void apply_base_rule(std::span<Matrix* const> params, std::span<const Matrix> grads,
                            const OptimConfig& cfg, OptimState& state, double lr) {
    if (params.size() != grads.size()) throw ContractViolation("apply_base_rule: params/grads length mismatch");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (!params[i]->same_shape(grads[i]))
            throw ContractViolation("apply_base_rule: shape mismatch " + params[i]->shape_string() + " vs " +
                                    grads[i].shape_string());
    if (cfg.rule == BaseRule::sgd) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (cfg.weight_decay != 0.0) *params[i] *= 1.0 - lr * cfg.weight_decay;
            params[i]->add_scaled(grads[i], -lr);
        }
        return;
    }
    if (state.moments.empty()) {
        for (auto* p : params) state.moments.push_back({Matrix(p->rows(), p->cols()), Matrix(p->rows(), p->cols())});
    }
    if (state.moments.size() != params.size())
        throw ContractViolation("apply_base_rule: optimizer state does not match parameter list");
    const double t = static_cast<double>(state.step + 1);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i]->values();
        auto g = grads[i].values();
        auto m = state.moments[i].first.values();
        auto v = state.moments[i].second.values();
        if (m.size() != p.size()) throw ContractViolation("apply_base_rule: moment shape mismatch");
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            p[j] -= lr * (mhat / (std::sqrt(vhat) + cfg.epsilon) + cfg.weight_decay * p[j]);
        }
    }
}

/// Gradients and loss from one forward/backward evaluation.
struct GradientPass {
    std::vector<Matrix> grads;
    double loss = 0.0;
};

struct SamGradient {
    GradientPass first;
    GradientPass second;  ///< at the perturbed point; equals `first` when not perturbed
    bool perturbed = false;
    double perturbation_norm = 0.0;
    std::vector<Matrix> eps;  ///< applied perturbation per parameter (empty when not perturbed)
};

/// Two-pass sharpness-aware gradient. `eval` computes gradients at the
/// current values of `params`. The perturbation ρ·g/‖g‖ is normalized over
/// all parameters (global) or per group id in `groups` (per-layer); groups
/// with zero gradient are left unperturbed. Parameters are restored bitwise
/// before returning. If nothing is perturbed (ρ = 0 or all norms zero) the
/// second pass is skipped.
template <class Eval>
SamGradient sharpness_aware_gradient(std::span<Matrix* const> params, std::span<const std::size_t> groups,
                                     Eval&& eval, double rho, NormScope scope) {
    if (groups.size() != params.size()) throw ContractViolation("sharpness_aware_gradient: groups length mismatch");
    SamGradient out;
    out.first = eval();
    if (out.first.grads.size() != params.size())
        throw ContractViolation("sharpness_aware_gradient: eval returned wrong gradient count");

    std::size_t n_groups = 0;
    for (auto g : groups) n_groups = std::max(n_groups, g + 1);
    std::vector<double> group_sq(scope == NormScope::global ? 1 : n_groups, 0.0);
    for (std::size_t i = 0; i < params.size(); ++i)
        group_sq[scope == NormScope::global ? 0 : groups[i]] += squared_norm(out.first.grads[i]);

    bool any = false;
    for (double s : group_sq) any = any || s > 0.0;
    if (rho == 0.0 || !any) {
        out.second = out.first;
        return out;
    }

    std::vector<Matrix> saved;
    saved.reserve(params.size());
    double eps_sq = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        saved.push_back(*params[i]);
        const double norm = std::sqrt(group_sq[scope == NormScope::global ? 0 : groups[i]]);
        Matrix e = out.first.grads[i];
        if (norm > 0.0) e *= rho / norm;
        else e.fill(0.0);
        eps_sq += squared_norm(e);
        *params[i] += e;
        out.eps.push_back(std::move(e));
    }
    out.perturbed = true;
    out.perturbation_norm = std::sqrt(eps_sq);
    out.second = eval();
    for (std::size_t i = 0; i < params.size(); ++i) *params[i] = saved[i];
    return out;
}

namespace detail {

inline double grads_norm(const std::vector<Matrix>& g) {
    double s = 0.0;
    for (const auto& m : g) s += squared_norm(m);
    return std::sqrt(s);
}

inline void require_adapters(const Network& net, const char* who) {
    bool any = false;
    for (const auto& l : net.layers) any = any || l.primary.has_value();
    if (!any) throw ConfigError(std::string(who) + ": network has no adapters");
}

/// Pass over primary factors: forward without auxiliary, backward, chain rule.
inline GradientPass primary_factor_pass(Network& net, const Batch& batch, GradientSet* merged = nullptr) {
    auto cache = forward(net, batch.inputs, false);
    GradientPass pass;
    pass.loss = loss(cache.output, batch.targets, net.spec.loss);
    GradientSet g = backward(net, cache, batch);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        if (!net.layers[l].primary) continue;
        auto fg = project_grad(g.weight[l], *net.layers[l].primary);
        pass.grads.push_back(std::move(fg.b));
        pass.grads.push_back(std::move(fg.a));
    }
    if (merged) *merged = std::move(g);
    return pass;
}

inline std::vector<std::size_t> primary_groups(const Network& net) {
    std::vector<std::size_t> groups;
    for (std::size_t l = 0; l < net.layers.size(); ++l)
        if (net.layers[l].primary) groups.insert(groups.end(), {l, l});
    return groups;
}

inline GradientPass base_pass(Network& net, const Batch& batch, GradientSet* merged = nullptr) {
    auto cache = forward(net, batch.inputs, false);
    GradientPass pass;
    pass.loss = loss(cache.output, batch.targets, net.spec.loss);
    GradientSet g = backward(net, cache, batch);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        pass.grads.push_back(g.weight[l]);
        pass.grads.push_back(g.bias[l]);
    }
    if (merged) *merged = std::move(g);
    return pass;
}

inline std::vector<std::size_t> base_groups(const Network& net) {
    std::vector<std::size_t> groups;
    for (std::size_t l = 0; l < net.layers.size(); ++l) groups.insert(groups.end(), {l, l});
    return groups;
}

inline void check_finite(double loss, std::uint64_t step) {
    if (!std::isfinite(loss))
        throw DivergenceError("non-finite loss at step " + std::to_string(step));
}

} // namespace detail

/// Squared Frobenius norm of B·A via trace((BᵀB)(AAᵀ)); O(r²(m+n)).
inline double product_squared_norm(const Matrix& b, const Matrix& a) {
    const Matrix btb = matmul_tn(b, b);
    const Matrix aat = matmul_nt(a, a);
    double s = 0.0;
    for (std::size_t i = 0; i < btb.size(); ++i) s += btb.values()[i] * aat.values()[i];
    return std::max(0.0, s);
}

/// c_norm = sqrt(Σ_j ‖s2·B2A2‖²) over all layers carrying an auxiliary pair.
inline double auxiliary_norm(const Network& net, bool include_scaling = true) {
    double total = 0.0;
    for (const auto& l : net.layers) {
        if (!l.auxiliary) continue;
        const double s = include_scaling ? l.auxiliary->scaling() : 1.0;
        total += s * s * product_squared_norm(l.auxiliary->b, l.auxiliary->a);
    }
    return std::sqrt(total);
}

/// Scale every auxiliary factor by sqrt(rho / c_norm) when c_norm > rho, so
/// the total auxiliary product norm becomes rho.
inline ClipReport clip_auxiliary(Network& net, double rho, bool include_scaling = true) {
    if (!(rho > 0.0)) throw ContractViolation("clip_auxiliary: rho must be positive");
    ClipReport r;
    r.c_norm_before = auxiliary_norm(net, include_scaling);
    r.c_norm_after = r.c_norm_before;
    if (r.c_norm_before == 0.0 || !(r.c_norm_before > rho)) return r;
    const double factor = std::sqrt(rho / r.c_norm_before);
    for (auto& l : net.layers) {
        if (!l.auxiliary) continue;
        l.auxiliary->b *= factor;
        l.auxiliary->a *= factor;
    }
    r.triggered = true;
    r.c_norm_after = auxiliary_norm(net, include_scaling);
    return r;
}

/// Plain LoRA: one forward/backward, base rule on the primary factors.
inline StepReport lora_step(Network& net, const Batch& batch, const OptimConfig& cfg, OptimState& state) {
    detail::require_adapters(net, "lora_step");
    const auto before = backward_pass_count();
    StepReport rep;
    rep.step = state.step;
    rep.lr = cfg.eta1 * schedule_factor(cfg, state.step);
    auto pass = detail::primary_factor_pass(net, batch, state.capture ? &rep.merged_grad : nullptr);
    detail::check_finite(pass.loss, state.step);
    rep.loss = pass.loss;
    rep.grad_norm = detail::grads_norm(pass.grads);
    auto params = adapter_factors(net, false);
    apply_base_rule(params, pass.grads, cfg, state, rep.lr);
    rep.backward_passes = backward_pass_count() - before;
    ++state.step;
    return rep;
}

/// Full fine-tuning: base rule on every base weight and bias.
inline StepReport full_ft_step(Network& net, const Batch& batch, const OptimConfig& cfg, OptimState& state) {
    const auto before = backward_pass_count();
    StepReport rep;
    rep.step = state.step;
    rep.lr = cfg.eta1 * schedule_factor(cfg, state.step);
    auto pass = detail::base_pass(net, batch, state.capture ? &rep.merged_grad : nullptr);
    detail::check_finite(pass.loss, state.step);
    rep.loss = pass.loss;
    rep.grad_norm = detail::grads_norm(pass.grads);
    auto params = base_parameters(net);
    apply_base_rule(params, pass.grads, cfg, state, rep.lr);
    rep.backward_passes = backward_pass_count() - before;
    ++state.step;
    return rep;
}

/// SAM over every base weight and bias.
inline StepReport sam_full_step(Network& net, const Batch& batch, const OptimConfig& cfg, OptimState& state) {
    const auto before = backward_pass_count();
    StepReport rep;
    rep.step = state.step;
    rep.lr = cfg.eta1 * schedule_factor(cfg, state.step);
    auto params = base_parameters(net);
    const auto groups = detail::base_groups(net);
    auto sam = sharpness_aware_gradient(
        params, groups, [&] { return detail::base_pass(net, batch); }, cfg.rho, cfg.norm_scope);
    detail::check_finite(sam.first.loss, state.step);
    rep.loss = sam.first.loss;
    rep.grad_norm = detail::grads_norm(sam.first.grads);
    rep.perturbation_applied = sam.perturbed;
    rep.perturbation_norm = sam.perturbation_norm;
    if (sam.perturbed) rep.perturbed_loss = sam.second.loss;
    apply_base_rule(params, sam.second.grads, cfg, state, rep.lr);
    rep.backward_passes = backward_pass_count() - before;
    ++state.step;
    return rep;
}

/// SAM restricted to the primary LoRA factors.
inline StepReport lora_sam_step(Network& net, const Batch& batch, const OptimConfig& cfg, OptimState& state) {
    detail::require_adapters(net, "lora_sam_step");
    const auto before = backward_pass_count();
    StepReport rep;
    rep.step = state.step;
    rep.lr = cfg.eta1 * schedule_factor(cfg, state.step);
    auto params = adapter_factors(net, false);
    const auto groups = detail::primary_groups(net);
    bool first_eval = true;
    auto eval = [&] {
        GradientSet* merged = (state.capture && first_eval) ? &rep.merged_grad : nullptr;
        first_eval = false;
        return detail::primary_factor_pass(net, batch, merged);
    };
    auto sam = sharpness_aware_gradient(params, groups, eval, cfg.rho, cfg.norm_scope);
    detail::check_finite(sam.first.loss, state.step);
    rep.loss = sam.first.loss;
    rep.grad_norm = detail::grads_norm(sam.first.grads);
    rep.perturbation_applied = sam.perturbed;
    rep.perturbation_norm = sam.perturbation_norm;
    if (sam.perturbed) {
        rep.perturbed_loss = sam.second.loss;
        if (state.capture) {
            std::size_t idx = 0;
            for (std::size_t l = 0; l < net.layers.size(); ++l) {
                if (!net.layers[l].primary) continue;
                const auto& p = *net.layers[l].primary;
                rep.perturbations.push_back({l, p.b, p.a, sam.eps[idx], sam.eps[idx + 1]});
                idx += 2;
            }
        }
    }
    apply_base_rule(params, sam.second.grads, cfg, state, rep.lr);
    rep.backward_passes = backward_pass_count() - before;
    ++state.step;
    return rep;
}

/// Bi-LoRA: one forward (with auxiliary) and one backward give ∇W L per
/// layer; the primary pair descends via the base rule, the auxiliary pair
/// ascends by plain gradient ascent (both read iterate-k factors), then the
/// auxiliary pairs are clipped to total norm rho.
///
/// With no auxiliary pair anywhere this is exactly lora_step plus an inert
/// clip report. A mix of layers with and without auxiliary pairs is a
/// configuration error.
inline StepReport bilora_step(Network& net, const Batch& batch, const OptimConfig& cfg, OptimState& state) {
    detail::require_adapters(net, "bilora_step");
    bool any_aux = false, all_aux = true;
    for (const auto& l : net.layers) {
        if (!l.primary) continue;
        any_aux = any_aux || l.auxiliary.has_value();
        all_aux = all_aux && l.auxiliary.has_value();
    }
    if (any_aux && !all_aux) throw ConfigError("bilora_step: some adapted layers lack an auxiliary pair");
    if (!any_aux) {
        auto rep = lora_step(net, batch, cfg, state);
        rep.clip = ClipReport{};
        return rep;
    }

    const auto before = backward_pass_count();
    StepReport rep;
    rep.step = state.step;
    const double factor = schedule_factor(cfg, state.step);
    rep.lr = cfg.eta1 * factor;
    const double ascent_lr = cfg.ascent_rate() * factor;

    auto cache = forward(net, batch.inputs, true);
    rep.loss = loss(cache.output, batch.targets, net.spec.loss);
    detail::check_finite(rep.loss, state.step);
    GradientSet g = backward(net, cache, batch);

    std::vector<Matrix> primary_grads;
    std::vector<FactorGrad> aux_grads;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const auto& layer = net.layers[l];
        if (!layer.primary) continue;
        auto fg = project_grad(g.weight[l], *layer.primary);
        primary_grads.push_back(std::move(fg.b));
        primary_grads.push_back(std::move(fg.a));
        aux_grads.push_back(project_grad(g.weight[l], *layer.auxiliary));
    }
    rep.grad_norm = detail::grads_norm(primary_grads);

    auto params = adapter_factors(net, false);
    apply_base_rule(params, primary_grads, cfg, state, rep.lr);
    std::size_t idx = 0;
    for (auto& layer : net.layers) {
        if (!layer.primary) continue;
        layer.auxiliary->b.add_scaled(aux_grads[idx].b, ascent_lr);
        layer.auxiliary->a.add_scaled(aux_grads[idx].a, ascent_lr);
        ++idx;
    }
    rep.clip = clip_auxiliary(net, cfg.rho, cfg.clip_includes_scaling);
    if (state.capture) rep.merged_grad = std::move(g);
    rep.backward_passes = backward_pass_count() - before;
    ++state.step;
    return rep;
}

/// Dispatch on cfg.method.
inline StepReport optimizer_step(Network& net, const Batch& batch, const OptimConfig& cfg, OptimState& state) {
    switch (cfg.method) {
        case Method::full_ft: return full_ft_step(net, batch, cfg, state);
        case Method::lora: return lora_step(net, batch, cfg, state);
        case Method::sam_full: return sam_full_step(net, batch, cfg, state);
        case Method::lora_sam: return lora_sam_step(net, batch, cfg, state);
        case Method::bi_lora: return bilora_step(net, batch, cfg, state);
    }
    throw ConfigError("optimizer_step: unknown method");
}

} // namespace bilora
