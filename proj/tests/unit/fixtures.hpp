// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "bilora/adapters.hpp"
#include "bilora/network.hpp"

#include <vector>

namespace fixture {

using namespace bilora;

inline ModelSpec spec(std::vector<std::size_t> dims, std::vector<Activation> acts,
                      LossKind loss = LossKind::softmax_cross_entropy, std::vector<std::size_t> adapted = {}) {
    ModelSpec s;
    s.layer_dims = std::move(dims);
    s.activations = std::move(acts);
    s.loss = loss;
    s.adapter_layers = std::move(adapted);
    return s;
}

inline Network net(const ModelSpec& s, std::uint64_t seed) {
    RngStream rng(seed, 1);
    Network n = make_network(s, rng);
    for (auto& l : n.layers)
        for (auto& v : l.bias.values()) v = 0.1 * rng.normal();
    return n;
}

/// Random batch; one-hot targets for cross-entropy, Gaussian for MSE.
inline Batch batch(const ModelSpec& s, std::size_t rows, std::uint64_t seed) {
    RngStream rng(seed, 2);
    Batch b;
    b.inputs = seeded_gaussian(rows, s.layer_dims.front(), rng, 1.0);
    b.targets = Matrix(rows, s.layer_dims.back());
    for (std::size_t i = 0; i < rows; ++i) {
        if (s.loss == LossKind::softmax_cross_entropy) b.targets(i, rng.below(s.layer_dims.back())) = 1.0;
        else
            for (std::size_t j = 0; j < s.layer_dims.back(); ++j) b.targets(i, j) = rng.normal();
    }
    return b;
}

/// Give every adapter factor random entries so no product is zero.
inline void randomize_adapters(Network& n, std::uint64_t seed, double scale = 0.3) {
    RngStream rng(seed, 3);
    for (auto& l : n.layers)
        for (auto* p : {&l.primary, &l.auxiliary})
            if (*p) {
                (*p)->b = seeded_gaussian((*p)->b.rows(), (*p)->b.cols(), rng, scale);
                (*p)->a = seeded_gaussian((*p)->a.rows(), (*p)->a.cols(), rng, scale);
            }
}

/// Quietly attach adapters (suppresses rank warnings on tiny layers).
inline void attach(Network& n, std::size_t rank, std::size_t aux_rank, std::uint64_t seed) {
    auto prev = set_warning_sink([](const std::string&) {});
    AdapterOptions o;
    o.rank = rank;
    o.alpha = 2.0 * static_cast<double>(rank);
    o.aux_rank = aux_rank;
    o.aux_alpha = 2.0 * static_cast<double>(aux_rank ? aux_rank : 1);
    attach_adapters(n, o, seed);
    set_warning_sink(prev);
}

} // namespace fixture
