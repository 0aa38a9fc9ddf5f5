// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "bilora/log.hpp"
#include "bilora/matrix.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <utility>

namespace bilora {

/// Low-rank factor pair contributing s·B·A to a host layer, s = alpha / rank.
struct AdapterPair {
    Matrix b;  ///< m×r
    Matrix a;  ///< r×n
    double alpha = 1.0;

    std::size_t rank() const noexcept { return a.rows(); }
    double scaling() const noexcept { return alpha / static_cast<double>(rank()); }

    /// s·B·A
    Matrix delta() const {
        Matrix d = matmul(b, a);
        d *= scaling();
        return d;
    }
};

/// Fresh pair: B = 0, A ~ N(0, 1/n). The product is exactly zero.
inline AdapterPair init_adapter(std::size_t m, std::size_t n, std::size_t rank, double alpha,
                                RngStream& rng) {
    if (rank < 1) throw ContractViolation("init_adapter: rank must be >= 1");
    if (rank > std::min(m, n))
        log_warning("init_adapter: rank " + std::to_string(rank) + " exceeds min(" +
                    std::to_string(m) + ", " + std::to_string(n) + ")");
    AdapterPair p;
    p.b = Matrix(m, rank);
    p.a = seeded_gaussian(rank, n, rng, 1.0 / std::sqrt(static_cast<double>(n)));
    p.alpha = alpha;
    return p;
}

/// Frozen base weight plus optional primary and auxiliary adapter pairs.
/// A layer without a primary pair is a plain linear layer.
struct LoRALinear {
    Matrix weight;  ///< W0, out×in; frozen in adapter modes
    Matrix bias;    ///< 1×out
    std::optional<AdapterPair> primary;
    std::optional<AdapterPair> auxiliary;

    std::size_t out_features() const noexcept { return weight.rows(); }
    std::size_t in_features() const noexcept { return weight.cols(); }
    bool adapted() const noexcept { return primary.has_value(); }
};

/// W0 + s1·B1A1 (+ s2·B2A2 when include_aux and the auxiliary pair exists).
inline Matrix effective_weight(const LoRALinear& layer, bool include_aux) {
    Matrix w = layer.weight;
    if (layer.primary) w.add_scaled(matmul(layer.primary->b, layer.primary->a), layer.primary->scaling());
    if (include_aux && layer.auxiliary)
        w.add_scaled(matmul(layer.auxiliary->b, layer.auxiliary->a), layer.auxiliary->scaling());
    return w;
}

/// Factor gradients from the merged-weight gradient by the chain rule:
/// gB = s·G·Aᵀ, gA = s·Bᵀ·G.
struct FactorGrad {
    Matrix b;
    Matrix a;
};

inline FactorGrad project_grad(const Matrix& grad_w, const AdapterPair& pair) {
    if (grad_w.rows() != pair.b.rows() || grad_w.cols() != pair.a.cols())
        throw ContractViolation("project_grad: gradient " + grad_w.shape_string() +
                                " does not match adapter " + pair.b.shape_string() + " x " +
                                pair.a.shape_string());
    const double s = pair.scaling();
    FactorGrad g{matmul_nt(grad_w, pair.a), matmul_tn(pair.b, grad_w)};
    g.b *= s;
    g.a *= s;
    return g;
}

} // namespace bilora
