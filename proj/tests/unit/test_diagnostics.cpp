// SPDX-License-Identifier: Apache-2.0
#include "bilora/diagnostics.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace bilora;

namespace {

ModelSpec mlp() {
    return fixture::spec({4, 8, 6, 3}, {Activation::tanh, Activation::relu}, LossKind::softmax_cross_entropy, {0, 1});
}

Network adapted(std::uint64_t seed, std::size_t aux_rank = 0) {
    Network n = fixture::net(mlp(), seed);
    fixture::attach(n, 2, aux_rank, seed + 1);
    fixture::randomize_adapters(n, seed + 2);
    return n;
}

bool all_equal(Network& x, Network& y) {
    auto a = landscape_parameters(x, LandscapeSpace::all_params);
    auto b = landscape_parameters(y, LandscapeSpace::all_params);
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!a[i]->bitwise_equal(*b[i])) return false;
    auto xa = adapter_factors(x, true), ya = adapter_factors(y, true);
    for (std::size_t i = 0; i < xa.size(); ++i)
        if (!xa[i]->bitwise_equal(*ya[i])) return false;
    return true;
}

} // namespace

TEST(TermNorms, ScalarHandCase) {
    const double b = 0.7, a = -1.3, eb = 0.02, ea = -0.05;
    auto r = record_term_norms(Matrix{{b}}, Matrix{{a}}, Matrix{{eb}}, Matrix{{ea}});
    EXPECT_NEAR(r.norm_b_eps_a, std::abs(b * ea), 1e-12);
    EXPECT_NEAR(r.norm_eps_b_a, std::abs(eb * a), 1e-12);
    EXPECT_NEAR(r.norm_eps_b_eps_a, std::abs(eb * ea), 1e-12);
    EXPECT_NEAR(r.ratio, std::abs(b * ea + eb * a) / std::abs(eb * ea), 1e-9);
    EXPECT_LE(r.reconstruction_error, 1e-15);
}

TEST(TermNorms, FromGradientScalarLayer) {
    // s = 2, G = 0.6: gB = s·G·a, gA = s·b·G, F = |G|·s·sqrt(a² + b²).
    auto s = fixture::spec({1, 1}, {}, LossKind::mean_squared_error, {0});
    Network n = fixture::net(s, 0);
    fixture::attach(n, 1, 0, 0);
    n.layers[0].primary->b(0, 0) = 0.5;
    n.layers[0].primary->a(0, 0) = 1.5;
    const double g = 0.6, rho = 0.1, sc = 2.0, b = 0.5, a = 1.5;
    const double f = std::abs(g) * sc * std::sqrt(a * a + b * b);
    const double eb = rho * sc * g * a / f, ea = rho * sc * b * g / f;
    auto r = record_term_norms(n.layers[0], Matrix{{g}}, rho, 3, 0);
    EXPECT_EQ(r.step, 3u);
    EXPECT_NEAR(r.norm_b_eps_a, std::abs(b * ea), 1e-12);
    EXPECT_NEAR(r.norm_eps_b_a, std::abs(eb * a), 1e-12);
    EXPECT_NEAR(r.norm_eps_b_eps_a, std::abs(eb * ea), 1e-12);
}

TEST(TermNorms, FreshLayerHasZeroFirstTerm) {
    Network n = fixture::net(mlp(), 3);
    fixture::attach(n, 2, 0, 4);
    auto r = record_term_norms(n.layers[1], oracle::random_matrix(6, 8, 5), 0.05);
    EXPECT_EQ(r.norm_b_eps_a, 0.0);
    EXPECT_GT(r.norm_eps_b_a, 0.0);
    // εA ∝ Bᵀ·G = 0, so the second-order term vanishes too.
    EXPECT_EQ(r.norm_eps_b_eps_a, 0.0);
    EXPECT_TRUE(std::isinf(r.ratio));
}

TEST(TermNorms, ZeroGradientGivesSentinel) {
    Network n = adapted(6);
    auto r = record_term_norms(n.layers[0], Matrix(8, 4), 0.05);
    EXPECT_EQ(r.norm_b_eps_a, 0.0);
    EXPECT_EQ(r.norm_eps_b_a, 0.0);
    EXPECT_EQ(r.norm_eps_b_eps_a, 0.0);
    EXPECT_TRUE(std::isinf(r.ratio));
}

TEST(TermNorms, ReconstructionIdentityOnRandomFactors) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Matrix b = oracle::random_matrix(30, 4, seed), a = oracle::random_matrix(4, 25, seed + 100);
        const Matrix eb = oracle::random_matrix(30, 4, seed + 200, 0.1), ea = oracle::random_matrix(4, 25, seed + 300, 0.1);
        auto r = record_term_norms(b, a, eb, ea);
        EXPECT_LE(r.reconstruction_error, 1e-10 * r.reconstruction_scale);
        EXPECT_GE(r.norm_b_eps_a, 0.0);
        EXPECT_TRUE(std::isfinite(r.ratio));
    }
}

TEST(TermNorms, RequiresPrimaryPair) {
    Network n = fixture::net(mlp(), 1);
    EXPECT_THROW(record_term_norms(n.layers[0], Matrix(8, 4), 0.1), ContractViolation);
}

TEST(Trajectory, FinalAgainstItselfIsOne) {
    Network n = adapted(7, 2);
    auto s = take_snapshot(n, 10);
    std::vector<ParameterSnapshot> snaps{take_snapshot(n, 0), s};
    auto rec = record_trajectory(snaps, s);
    ASSERT_EQ(rec.size(), 2u);
    EXPECT_NEAR(rec[1].cos_primary, 1.0, 1e-12);
    EXPECT_NEAR(*rec[1].cos_auxiliary, 1.0, 1e-12);
    EXPECT_FALSE(rec[1].degenerate);
}

TEST(Trajectory, OrthogonalVectorsGiveZero) {
    ParameterSnapshot a, b, fin;
    a.step = 0;
    a.primary = {1.0, 0.0, 0.0};
    b.step = 1;
    b.primary = {0.0, 2.0, 0.0};
    fin = b;
    std::vector<ParameterSnapshot> snaps{a, b};
    auto rec = record_trajectory(snaps, fin);
    EXPECT_EQ(rec[0].cos_primary, 0.0);
    EXPECT_FALSE(rec[0].cos_auxiliary.has_value());
}

TEST(Trajectory, ZeroVectorIsFlagged) {
    ParameterSnapshot a, fin;
    a.primary = {0.0, 0.0};
    fin.step = 5;
    fin.primary = {1.0, 1.0};
    std::vector<ParameterSnapshot> snaps{a, fin};
    auto rec = record_trajectory(snaps, fin);
    EXPECT_EQ(rec[0].cos_primary, 0.0);
    EXPECT_TRUE(rec[0].degenerate);
}

TEST(Trajectory, CosinesStayInBounds) {
    Network n = adapted(8, 2);
    std::vector<ParameterSnapshot> snaps;
    for (std::uint64_t k = 0; k < 15; ++k) {
        fixture::randomize_adapters(n, 900 + k, 0.5);
        snaps.push_back(take_snapshot(n, k));
    }
    for (const auto& r : record_trajectory(snaps, snaps.back())) {
        EXPECT_LE(std::abs(r.cos_primary), 1.0 + 1e-12);
        EXPECT_LE(std::abs(*r.cos_auxiliary), 1.0 + 1e-12);
        ASSERT_TRUE(r.cross_cosine.has_value());
        EXPECT_LE(std::abs(*r.cross_cosine), 1.0 + 1e-12);
    }
}

TEST(Trajectory, Preconditions) {
    ParameterSnapshot a;
    a.primary = {1.0};
    std::vector<ParameterSnapshot> one{a};
    EXPECT_THROW(record_trajectory(one, a), ContractViolation);
    ParameterSnapshot b;
    b.primary = {1.0, 2.0};
    std::vector<ParameterSnapshot> mixed{a, b};
    EXPECT_THROW(record_trajectory(mixed, b), ContractViolation);
}

TEST(SettleStep, FirstStepThatStaysAbove) {
    const std::vector<std::uint64_t> steps{0, 10, 20, 30, 40};
    EXPECT_EQ(settle_step(steps, std::vector<double>{0.1, 0.95, 0.5, 0.92, 1.0}, 0.9), 30u);
    EXPECT_EQ(settle_step(steps, std::vector<double>{0.91, 0.95, 0.93, 0.92, 1.0}, 0.9), 0u);
    EXPECT_FALSE(settle_step(steps, std::vector<double>{1.0, 1.0, 1.0, 1.0, 0.5}, 0.9).has_value());
    EXPECT_THROW(settle_step(steps, std::vector<double>{1.0}, 0.9), ContractViolation);
}

TEST(Landscape, CenterIsUnperturbedLossAndNetIsRestored) {
    for (auto space : {LandscapeSpace::lora_params, LandscapeSpace::full_params_excluding_lora,
                       LandscapeSpace::all_params}) {
        Network n = adapted(9, 2);
        Network before = n;
        Batch b = fixture::batch(mlp(), 20, 10);
        LandscapeScan scan;
        scan.space = space;
        scan.direction_seed = 11;
        scan.radii = symmetric_grid(0.5, 4);
        scan.repeats = 3;
        auto out = scan_landscape_1d(n, b, scan);
        ASSERT_EQ(out.losses.size(), 3u);
        for (const auto& row : out.losses) {
            ASSERT_EQ(row.size(), 9u);
            EXPECT_EQ(row[4], evaluate_loss(n, b, false));
        }
        EXPECT_TRUE(all_equal(n, before)) << to_string(space);
    }
}

TEST(Landscape, NegatedDirectionMirrorsGrid) {
    Network n = adapted(12);
    Batch b = fixture::batch(mlp(), 20, 13);
    LandscapeScan scan;
    scan.direction_seed = 14;
    scan.radii = symmetric_grid(1.0, 5);
    scan.repeats = 2;
    auto fwd = scan_landscape_1d(n, b, scan);
    scan.negate = true;
    auto back = scan_landscape_1d(n, b, scan);
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t i = 0; i < scan.radii.size(); ++i)
            EXPECT_NEAR(fwd.losses[r][i], back.losses[r][scan.radii.size() - 1 - i], 1e-12);
}

TEST(Landscape, FilterNormalizationMatchesLayerNorms) {
    // Scanning at t moves each selected matrix by exactly t·‖W‖.
    Network n = adapted(15);
    Batch b = fixture::batch(mlp(), 5, 16);
    const Matrix w1 = n.layers[1].weight;
    LandscapeScan scan;
    scan.radii = {0.3};
    scan.direction_seed = 17;
    RngStream rng(17, 0);
    auto params = landscape_parameters(n, scan.space);
    std::vector<Matrix> dir;
    for (auto* p : params) dir.push_back(seeded_gaussian(p->rows(), p->cols(), rng, 1.0));
    Network moved = n;
    auto mparams = landscape_parameters(moved, scan.space);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double pn = frobenius_norm(*params[i]);
        if (pn == 0.0) continue;
        mparams[i]->add_scaled(dir[i], 0.3 * pn / frobenius_norm(dir[i]));
    }
    EXPECT_NEAR(frobenius_norm(moved.layers[1].weight - w1), 0.3 * frobenius_norm(w1), 1e-12);
    auto out = scan_landscape_1d(n, b, scan);
    EXPECT_NEAR(out.losses[0][0], evaluate_loss(moved, b, false), 1e-12);
}

TEST(Landscape, GridIsSymmetric) {
    auto g = symmetric_grid(2.0, 3);
    ASSERT_EQ(g.size(), 7u);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g[i], -g[g.size() - 1 - i]);
    EXPECT_EQ(g[3], 0.0);
    EXPECT_EQ(g.back(), 2.0);
}

TEST(Landscape, EmptyGridIsRejected) {
    Network n = adapted(18);
    LandscapeScan scan;
    EXPECT_THROW(scan_landscape_1d(n, fixture::batch(mlp(), 3, 1), scan), ContractViolation);
}

TEST(Sharpness, TinyRadiusGivesNearZero) {
    Network n = adapted(19, 2);
    Batch b = fixture::batch(mlp(), 30, 20);
    RngStream rng(21, 0);
    auto r = estimate_sharpness(n, b, 1e-6, 50, rng);
    EXPECT_LE(std::abs(r.mean_increase), 1e-6);
    EXPECT_GE(r.max_increase, r.mean_increase);
    EXPECT_EQ(r.n_samples, 50u);
}

TEST(Sharpness, QuadraticMatchesHalfRhoSquaredMeanCurvature) {
    // f(w) = ½Σλᵢwᵢ²; for d uniform on the ρ-sphere, E[f(w+d) − f(w)] = ½ρ²·mean(λ).
    const std::size_t dim = 40;
    Matrix w = oracle::random_matrix(dim, 1, 22);
    std::vector<double> lambda(dim);
    for (std::size_t i = 0; i < dim; ++i) lambda[i] = 0.5 + 3.0 * static_cast<double>(i) / dim;
    double mean_lambda = 0.0;
    for (double l : lambda) mean_lambda += l / dim;
    auto f = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < dim; ++i) s += 0.5 * lambda[i] * w(i, 0) * w(i, 0);
        return s;
    };
    const Matrix saved = w;
    std::vector<Matrix*> ps{&w};
    RngStream rng(23, 0);
    const double rho = 0.2;
    auto r = estimate_sharpness(ps, f, rho, 1000, rng);
    EXPECT_NEAR(r.mean_increase, 0.5 * rho * rho * mean_lambda, 0.1 * 0.5 * rho * rho * mean_lambda);
    EXPECT_TRUE(w.bitwise_equal(saved));
}

TEST(Sharpness, IsotropicQuadraticIsExactUnderAntitheticPairs) {
    Matrix w = oracle::random_matrix(10, 3, 24);
    const double lambda = 2.5, rho = 0.3;
    auto f = [&] { return 0.5 * lambda * squared_norm(w); };
    std::vector<Matrix*> ps{&w};
    RngStream rng(25, 0);
    auto r = estimate_sharpness(ps, f, rho, 10, rng);
    EXPECT_NEAR(r.mean_increase, 0.5 * lambda * rho * rho, 1e-12);
}

TEST(Sharpness, NetworkIsUntouchedAndResultReproducible) {
    Network n = adapted(26, 2);
    Network before = n;
    Batch b = fixture::batch(mlp(), 16, 27);
    RngStream r1(28, 0), r2(28, 0);
    auto x = estimate_sharpness(n, b, 0.05, 20, r1);
    auto y = estimate_sharpness(n, b, 0.05, 20, r2);
    EXPECT_EQ(x.mean_increase, y.mean_increase);
    EXPECT_EQ(x.base_loss, evaluate_loss(n, b, false));
    EXPECT_TRUE(all_equal(n, before));
}

TEST(Sharpness, Preconditions) {
    Network n = adapted(29);
    Batch b = fixture::batch(mlp(), 4, 1);
    RngStream rng(0, 0);
    EXPECT_THROW(estimate_sharpness(n, b, 0.0, 10, rng), ContractViolation);
    EXPECT_THROW(estimate_sharpness(n, b, 0.1, 0, rng), ContractViolation);
}

TEST(Subspaces, LoraSamContainmentOnRandomFactors) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        PerturbationContext ctx{1, oracle::random_matrix(20, 3, seed), oracle::random_matrix(3, 15, seed + 1),
                                oracle::random_matrix(20, 3, seed + 2), oracle::random_matrix(3, 15, seed + 3)};
        auto r = check_subspaces(ctx, 7);
        EXPECT_EQ(r.layer, 1u);
        EXPECT_LE(r.b_eps_a_outside_col_b.residual, 1e-10 * r.b_eps_a_outside_col_b.norm);
        EXPECT_LE(r.eps_b_a_outside_row_a.residual, 1e-10 * r.eps_b_a_outside_row_a.norm);
        EXPECT_FALSE(r.b_eps_a_outside_col_b.degenerate);
    }
}

TEST(Subspaces, OracleSeesResidualOutsideSmallerBasis) {
    // A matrix not built from B has a large residual; confirms the check is not vacuous.
    const Matrix b = oracle::random_matrix(20, 3, 1);
    const Matrix m = oracle::random_matrix(20, 6, 2);
    auto r = column_residual_of(m, b);
    EXPECT_NEAR(r.residual, oracle::least_squares_residual(m, b), 1e-9);
    EXPECT_GT(r.relative(), 0.1);
}

TEST(Subspaces, BiLoraContainmentAndIndependence) {
    auto s = fixture::spec({64, 64, 2}, {Activation::tanh}, LossKind::softmax_cross_entropy, {0});
    Network n = fixture::net(s, 30);
    fixture::attach(n, 8, 8, 31);
    fixture::randomize_adapters(n, 32);
    auto r = check_subspaces(n.layers[0], 4, 0);
    EXPECT_LE(r.aux_outside_col_b2.residual, 1e-10 * r.aux_outside_col_b2.norm);
    EXPECT_LT(r.max_principal_cosine, 1.0 - 1e-6);
    EXPECT_GT(r.max_principal_cosine, 0.0);
}

TEST(Subspaces, ZeroFactorIsFlagged) {
    Network n = fixture::net(mlp(), 33);
    fixture::attach(n, 2, 2, 34);
    auto r = check_subspaces(n.layers[0]);
    EXPECT_TRUE(r.aux_outside_col_b2.degenerate);
    EXPECT_EQ(r.aux_outside_col_b2.residual, 0.0);
    Network plain = fixture::net(mlp(), 35);
    EXPECT_THROW(check_subspaces(plain.layers[0]), ContractViolation);
}

TEST(Gap, HandSeries) {
    const std::vector<std::uint64_t> steps{0, 10};
    const std::vector<double> train{1.0, 0.5}, eval{1.2, 0.9}, tm{0.8, 0.9}, em{0.7, 0.85};
    auto g = track_generalization_gap(steps, train, tm, steps, eval, em);
    ASSERT_EQ(g.size(), 2u);
    EXPECT_NEAR(g[0].loss_gap, 0.2, 1e-15);
    EXPECT_NEAR(g[1].loss_gap, 0.4, 1e-15);
    EXPECT_NEAR(g[0].metric_gap, 0.1, 1e-15);
    EXPECT_NEAR(late_phase_mean_gap(g, 0.5), 0.4, 1e-15);
    EXPECT_NEAR(late_phase_mean_gap(g, 1.0), 0.3, 1e-15);
}

TEST(Gap, IdenticalSeriesGiveZero) {
    const std::vector<std::uint64_t> steps{0, 5, 9};
    const std::vector<double> l{0.9, 0.4, 0.3}, m{0.5, 0.8, 0.9};
    for (const auto& p : track_generalization_gap(steps, l, m, steps, l, m)) {
        EXPECT_EQ(p.loss_gap, 0.0);
        EXPECT_EQ(p.metric_gap, 0.0);
    }
}

TEST(Gap, MisalignedSeriesAreRejected) {
    const std::vector<std::uint64_t> a{0, 10}, b{0, 11};
    const std::vector<double> v{1.0, 1.0};
    EXPECT_THROW(track_generalization_gap(a, v, v, b, v, v), ContractViolation);
    const std::vector<double> short_v{1.0};
    EXPECT_THROW(track_generalization_gap(a, v, v, a, short_v, v), ContractViolation);
    std::vector<EvalPoint> back{{5}, {3}};
    EXPECT_THROW(track_generalization_gap(back), ContractViolation);
}
