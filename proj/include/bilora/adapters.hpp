// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "bilora/lora_linear.hpp"
#include "bilora/network.hpp"

#include <vector>

namespace bilora {

struct AdapterOptions {
    std::size_t rank = 8;
    double alpha = 16.0;
    /// Auxiliary rank; 0 disables the auxiliary pair.
    std::size_t aux_rank = 8;
    double aux_alpha = 16.0;
};

/// Attach fresh adapters to every layer listed in net.spec.adapter_layers.
/// Primary pairs draw from stream 2·l, auxiliary pairs from 2·l + 1 of `seed`.
inline void attach_adapters(Network& net, const AdapterOptions& opt, std::uint64_t seed) {
    for (auto l : net.spec.adapter_layers) {
        auto& layer = net.layers.at(l);
        const auto m = layer.out_features(), n = layer.in_features();
        RngStream primary_rng(seed, 2 * l);
        layer.primary = init_adapter(m, n, opt.rank, opt.alpha, primary_rng);
        if (opt.aux_rank > 0) {
            RngStream aux_rng(seed, 2 * l + 1);
            layer.auxiliary = init_adapter(m, n, opt.aux_rank, opt.aux_alpha, aux_rng);
        } else {
            layer.auxiliary.reset();
        }
    }
}

/// Inference network: every adapted layer folded into a plain linear layer
/// with weight W0 + s1·B1A1. Auxiliary pairs are dropped.
inline Network merge_for_inference(const Network& net) {
    Network merged;
    merged.spec = net.spec;
    merged.spec.adapter_layers.clear();
    for (const auto& layer : net.layers) {
        LoRALinear plain;
        plain.weight = effective_weight(layer, false);
        plain.bias = layer.bias;
        merged.layers.push_back(std::move(plain));
    }
    return merged;
}

/// Scalar count of adapter factors, split by role.
struct AdapterCounts {
    std::size_t primary = 0;
    std::size_t auxiliary = 0;
};

inline AdapterCounts adapter_parameter_counts(const Network& net) {
    AdapterCounts c;
    for (const auto& l : net.layers) {
        if (l.primary) c.primary += l.primary->b.size() + l.primary->a.size();
        if (l.auxiliary) c.auxiliary += l.auxiliary->b.size() + l.auxiliary->a.size();
    }
    return c;
}

/// Pointers to the factor matrices of the chosen role, ordered (B, A) per
/// adapted layer.
inline std::vector<Matrix*> adapter_factors(Network& net, bool auxiliary) {
    std::vector<Matrix*> out;
    for (auto& l : net.layers) {
        auto& pair = auxiliary ? l.auxiliary : l.primary;
        if (!pair) continue;
        out.push_back(&pair->b);
        out.push_back(&pair->a);
    }
    return out;
}

/// Base weights and biases of every layer.
inline std::vector<Matrix*> base_parameters(Network& net) {
    std::vector<Matrix*> out;
    for (auto& l : net.layers) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
    }
    return out;
}

/// Concatenated entries of the chosen role's factors.
inline std::vector<double> flatten_adapters(const Network& net, bool auxiliary) {
    std::vector<double> v;
    for (const auto& l : net.layers) {
        const auto& pair = auxiliary ? l.auxiliary : l.primary;
        if (!pair) continue;
        v.insert(v.end(), pair->b.values().begin(), pair->b.values().end());
        v.insert(v.end(), pair->a.values().begin(), pair->a.values().end());
    }
    return v;
}

} // namespace bilora
