// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "bilora/lora_linear.hpp"
#include "bilora/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace bilora {

enum class Activation { relu, tanh, identity };
enum class LossKind { softmax_cross_entropy, mean_squared_error };

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
    }
    return "?";
}
inline std::string to_string(LossKind k) {
    return k == LossKind::softmax_cross_entropy ? "softmax-cross-entropy" : "mean-squared-error";
}
inline Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "identity") return Activation::identity;
    throw ConfigError("unknown activation '" + s + "'");
}
inline LossKind parse_loss_kind(const std::string& s) {
    if (s == "softmax-cross-entropy" || s == "cross-entropy") return LossKind::softmax_cross_entropy;
    if (s == "mean-squared-error" || s == "mse") return LossKind::mean_squared_error;
    throw ConfigError("unknown loss kind '" + s + "'");
}

/// Architecture description. `layer_dims` = {in, h1, ..., out}; one
/// activation per hidden layer; the last layer has no activation.
struct ModelSpec {
    std::vector<std::size_t> layer_dims;
    std::vector<Activation> activations;
    LossKind loss = LossKind::softmax_cross_entropy;
    std::vector<std::size_t> adapter_layers;

    std::size_t num_layers() const noexcept {
        return layer_dims.empty() ? 0 : layer_dims.size() - 1;
    }

    void validate() const {
        if (layer_dims.size() < 2) throw ConfigError("ModelSpec: need at least one layer");
        for (auto d : layer_dims)
            if (d == 0) throw ConfigError("ModelSpec: zero layer width");
        if (activations.size() != num_layers() - 1)
            throw ConfigError("ModelSpec: expected " + std::to_string(num_layers() - 1) +
                              " hidden activations, got " + std::to_string(activations.size()));
        for (auto i : adapter_layers)
            if (i >= num_layers())
                throw ConfigError("ModelSpec: adapter layer index " + std::to_string(i) +
                                  " out of range");
    }

    bool operator==(const ModelSpec&) const = default;
};

struct Batch {
    Matrix inputs;   ///< batch×features
    Matrix targets;  ///< batch×outputs (one-hot for classification)

    std::size_t size() const noexcept { return inputs.rows(); }
};

struct Network {
    ModelSpec spec;
    std::vector<LoRALinear> layers;

    std::size_t input_dim() const { return spec.layer_dims.front(); }
    std::size_t output_dim() const { return spec.layer_dims.back(); }

    bool has_auxiliary() const {
        return std::any_of(layers.begin(), layers.end(), [](const auto& l) { return l.auxiliary.has_value(); });
    }
};

/// Base network with W ~ N(0, 1/fan_in) and zero biases; no adapters.
inline Network make_network(const ModelSpec& spec, RngStream& rng) {
    spec.validate();
    Network net;
    net.spec = spec;
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
        const std::size_t in = spec.layer_dims[l], out = spec.layer_dims[l + 1];
        LoRALinear layer;
        layer.weight = seeded_gaussian(out, in, rng, 1.0 / std::sqrt(static_cast<double>(in)));
        layer.bias = Matrix(1, out);
        net.layers.push_back(std::move(layer));
    }
    return net;
}

/// Number of scalar parameters (base weights, biases and adapter factors).
inline std::size_t parameter_count(const Network& net) {
    std::size_t n = 0;
    for (const auto& l : net.layers) {
        n += l.weight.size() + l.bias.size();
        for (const auto* p : {&l.primary, &l.auxiliary})
            if (*p) n += (*p)->b.size() + (*p)->a.size();
    }
    return n;
}

/// FNV-1a over the bit patterns of every frozen base weight and bias.
inline std::uint64_t base_checksum(const Network& net) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const Matrix& m) {
        for (double v : m.values()) {
            std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
            for (int i = 0; i < 8; ++i) {
                h ^= (bits >> (8 * i)) & 0xffu;
                h *= 1099511628211ull;
            }
        }
    };
    for (const auto& l : net.layers) {
        mix(l.weight);
        mix(l.bias);
    }
    return h;
}

struct ForwardCache {
    std::vector<Matrix> inputs;       ///< input to layer l
    std::vector<Matrix> pre;          ///< pre-activation of layer l
    std::vector<Matrix> weights;      ///< effective weight used by layer l
    Matrix output;
    bool include_aux = false;
};

namespace detail {

inline void add_bias(Matrix& z, const Matrix& bias) {
    for (std::size_t i = 0; i < z.rows(); ++i)
        for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += bias(0, j);
}

inline Matrix activate(const Matrix& z, Activation act) {
    Matrix h = z;
    switch (act) {
        case Activation::relu:
            for (auto& v : h.values()) v = v > 0.0 ? v : 0.0;
            break;
        case Activation::tanh:
            for (auto& v : h.values()) v = std::tanh(v);
            break;
        case Activation::identity: break;
    }
    return h;
}

/// dL/dz given dL/dh, the pre-activation z and the activation output h.
inline Matrix activation_backward(const Matrix& grad_h, const Matrix& z, const Matrix& h, Activation act) {
    Matrix g = grad_h;
    auto gv = g.values();
    auto zv = z.values();
    auto hv = h.values();
    switch (act) {
        case Activation::relu:
            for (std::size_t i = 0; i < gv.size(); ++i)
                if (!(zv[i] > 0.0)) gv[i] = 0.0;
            break;
        case Activation::tanh:
            for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= 1.0 - hv[i] * hv[i];
            break;
        case Activation::identity: break;
    }
    return g;
}

inline std::uint64_t& backward_counter() {
    static thread_local std::uint64_t count = 0;
    return count;
}

} // namespace detail

/// Backward passes run on the calling thread so far.
inline std::uint64_t backward_pass_count() { return detail::backward_counter(); }

/// Forward pass. Adapted layers use W0 + s1·B1A1 (+ s2·B2A2 if include_aux).
inline ForwardCache forward(const Network& net, const Matrix& inputs, bool include_aux) {
    if (inputs.cols() != net.input_dim())
        throw ContractViolation("forward: input has " + std::to_string(inputs.cols()) +
                                " features, network expects " + std::to_string(net.input_dim()));
    ForwardCache cache;
    cache.include_aux = include_aux;
    Matrix h = inputs;
    const std::size_t n = net.layers.size();
    for (std::size_t l = 0; l < n; ++l) {
        const auto& layer = net.layers[l];
        Matrix w = effective_weight(layer, include_aux);
        Matrix z = matmul_nt(h, w);
        detail::add_bias(z, layer.bias);
        cache.inputs.push_back(std::move(h));
        h = l + 1 < n ? detail::activate(z, net.spec.activations[l]) : z;
        cache.pre.push_back(std::move(z));
        cache.weights.push_back(std::move(w));
    }
    cache.output = std::move(h);
    return cache;
}

inline Matrix predict(const Network& net, const Matrix& inputs, bool include_aux = false) {
    return forward(net, inputs, include_aux).output;
}

/// Batch-mean loss. Cross-entropy uses a row-max-shifted log-sum-exp.
inline double loss(const Matrix& predictions, const Matrix& targets, LossKind kind) {
    if (!predictions.same_shape(targets))
        throw ContractViolation("loss: predictions " + predictions.shape_string() + " vs targets " +
                                targets.shape_string());
    const std::size_t b = predictions.rows(), c = predictions.cols();
    if (b == 0) return 0.0;
    double total = 0.0;
    if (kind == LossKind::mean_squared_error) {
        for (std::size_t i = 0; i < predictions.size(); ++i) {
            const double d = predictions.values()[i] - targets.values()[i];
            total += d * d;
        }
    } else {
        for (std::size_t i = 0; i < b; ++i) {
            double mx = predictions(i, 0);
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, predictions(i, j));
            double se = 0.0;
            for (std::size_t j = 0; j < c; ++j) se += std::exp(predictions(i, j) - mx);
            const double lse = mx + std::log(se);
            for (std::size_t j = 0; j < c; ++j) total -= targets(i, j) * (predictions(i, j) - lse);
        }
    }
    return total / static_cast<double>(b);
}

/// dL/d(predictions) for the batch-mean loss above.
inline Matrix loss_gradient(const Matrix& predictions, const Matrix& targets, LossKind kind) {
    if (!predictions.same_shape(targets))
        throw ContractViolation("loss_gradient: predictions " + predictions.shape_string() +
                                " vs targets " + targets.shape_string());
    const std::size_t b = predictions.rows(), c = predictions.cols();
    Matrix g(b, c);
    const double inv_b = b ? 1.0 / static_cast<double>(b) : 0.0;
    if (kind == LossKind::mean_squared_error) {
        for (std::size_t i = 0; i < g.size(); ++i)
            g.values()[i] = 2.0 * (predictions.values()[i] - targets.values()[i]) * inv_b;
    } else {
        for (std::size_t i = 0; i < b; ++i) {
            double mx = predictions(i, 0);
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, predictions(i, j));
            double se = 0.0, tsum = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                se += std::exp(predictions(i, j) - mx);
                tsum += targets(i, j);
            }
            for (std::size_t j = 0; j < c; ++j) {
                const double p = std::exp(predictions(i, j) - mx) / se;
                g(i, j) = (p * tsum - targets(i, j)) * inv_b;
            }
        }
    }
    return g;
}

/// Per-layer gradient w.r.t. the merged weight W and the bias.
struct GradientSet {
    std::vector<Matrix> weight;
    std::vector<Matrix> bias;
};

/// Reverse-mode pass over a cache from `forward`. Produces ∇W L for every
/// layer's merged weight; adapter factor gradients come from project_grad.
inline GradientSet backward(const Network& net, const ForwardCache& cache, const Batch& batch) {
    const std::size_t n = net.layers.size();
    if (cache.weights.size() != n || cache.inputs.size() != n || cache.pre.size() != n)
        throw ContractViolation("backward: cache does not match network depth");
    for (std::size_t l = 0; l < n; ++l)
        if (!cache.weights[l].same_shape(net.layers[l].weight))
            throw ContractViolation("backward: stale cache at layer " + std::to_string(l));
    if (cache.inputs.front().rows() != batch.size() || !cache.output.same_shape(batch.targets))
        throw ContractViolation("backward: cache/batch shape mismatch " +
                                cache.output.shape_string() + " vs " + batch.targets.shape_string());
    ++detail::backward_counter();

    GradientSet grads;
    grads.weight.resize(n);
    grads.bias.resize(n);
    Matrix dz = loss_gradient(cache.output, batch.targets, net.spec.loss);
    for (std::size_t l = n; l-- > 0;) {
        grads.weight[l] = matmul_tn(dz, cache.inputs[l]);
        Matrix db(1, dz.cols());
        for (std::size_t i = 0; i < dz.rows(); ++i)
            for (std::size_t j = 0; j < dz.cols(); ++j) db(0, j) += dz(i, j);
        grads.bias[l] = std::move(db);
        if (l == 0) break;
        Matrix dh = matmul(dz, cache.weights[l]);
        dz = detail::activation_backward(dh, cache.pre[l - 1], cache.inputs[l], net.spec.activations[l - 1]);
    }
    return grads;
}

inline double evaluate_loss(const Network& net, const Batch& batch, bool include_aux) {
    return loss(forward(net, batch.inputs, include_aux).output, batch.targets, net.spec.loss);
}

/// Central differences of `f` w.r.t. every entry of `params`; entries are
/// restored bitwise afterwards.
template <class LossFn>
std::vector<double> central_difference(std::span<double> params, LossFn&& f, double step) {
    if (!(step > 0.0)) throw ContractViolation("central_difference: step must be positive");
    std::vector<double> g(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double saved = params[i];
        params[i] = saved + step;
        const double up = f();
        params[i] = saved - step;
        const double down = f();
        params[i] = saved;
        g[i] = (up - down) / (2.0 * step);
    }
    return g;
}

/// Finite-difference estimate of ∇W L and ∇b L. Perturbing W0 moves the
/// merged weight by the same amount, so the base entries stand in for W.
/// Intended for tiny networks: costs two forwards per scalar.
inline GradientSet finite_difference_grad(Network& net, const Batch& batch, double step,
                                          bool include_aux = true) {
    auto f = [&] { return evaluate_loss(net, batch, include_aux); };
    GradientSet g;
    for (auto& layer : net.layers) {
        Matrix gw(layer.weight.rows(), layer.weight.cols());
        auto dw = central_difference(layer.weight.values(), f, step);
        std::copy(dw.begin(), dw.end(), gw.values().begin());
        Matrix gb(1, layer.bias.cols());
        auto db = central_difference(layer.bias.values(), f, step);
        std::copy(db.begin(), db.end(), gb.values().begin());
        g.weight.push_back(std::move(gw));
        g.bias.push_back(std::move(gb));
    }
    return g;
}

/// Fraction of rows whose argmax matches the target argmax.
inline double accuracy(const Matrix& predictions, const Matrix& targets) {
    if (!predictions.same_shape(targets)) throw ContractViolation("accuracy: shape mismatch");
    if (predictions.rows() == 0) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.rows(); ++i) {
        std::size_t pi = 0, ti = 0;
        for (std::size_t j = 1; j < predictions.cols(); ++j) {
            if (predictions(i, j) > predictions(i, pi)) pi = j;
            if (targets(i, j) > targets(i, ti)) ti = j;
        }
        hits += pi == ti;
    }
    return static_cast<double>(hits) / static_cast<double>(predictions.rows());
}

/// Coefficient of determination over all output columns.
inline double r_squared(const Matrix& predictions, const Matrix& targets) {
    if (!predictions.same_shape(targets)) throw ContractViolation("r_squared: shape mismatch");
    double mean = 0.0;
    for (double v : targets.values()) mean += v;
    mean /= static_cast<double>(std::max<std::size_t>(1, targets.size()));
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const double d = predictions.values()[i] - targets.values()[i];
        const double t = targets.values()[i] - mean;
        ss_res += d * d;
        ss_tot += t * t;
    }
    return ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 0.0;
}

/// Task metric: accuracy for classification, R² for regression.
inline double metric(const Network& net, const Batch& batch, bool include_aux = false) {
    const Matrix p = predict(net, batch.inputs, include_aux);
    return net.spec.loss == LossKind::softmax_cross_entropy ? accuracy(p, batch.targets)
                                                            : r_squared(p, batch.targets);
}

} // namespace bilora
