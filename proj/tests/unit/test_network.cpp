// SPDX-License-Identifier: Apache-2.0
#include "bilora/network.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace bilora;

namespace {

struct Arch {
    const char* name;
    ModelSpec spec;
};

std::vector<Arch> architectures() {
    return {
        {"one_hidden_tanh_ce", fixture::spec({3, 5, 2}, {Activation::tanh})},
        {"two_hidden_relu_tanh_ce", fixture::spec({4, 6, 5, 3}, {Activation::relu, Activation::tanh})},
        {"two_hidden_tanh_mse",
         fixture::spec({3, 4, 4, 2}, {Activation::tanh, Activation::identity}, LossKind::mean_squared_error)},
    };
}

void expect_grads_close(const GradientSet& got, const GradientSet& want) {
    ASSERT_EQ(got.weight.size(), want.weight.size());
    for (std::size_t l = 0; l < got.weight.size(); ++l) {
        for (std::size_t i = 0; i < got.weight[l].size(); ++i)
            EXPECT_TRUE(oracle::close(got.weight[l].values()[i], want.weight[l].values()[i], 1e-5, 1e-7))
                << "layer " << l << " weight entry " << i << ": " << got.weight[l].values()[i] << " vs "
                << want.weight[l].values()[i];
        for (std::size_t i = 0; i < got.bias[l].size(); ++i)
            EXPECT_TRUE(oracle::close(got.bias[l].values()[i], want.bias[l].values()[i], 1e-5, 1e-7))
                << "layer " << l << " bias entry " << i;
    }
}

} // namespace

TEST(Backward, MatchesFiniteDifferencesAcrossSeedsAndArchitectures) {
    for (const auto& arch : architectures()) {
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            SCOPED_TRACE(std::string(arch.name) + " seed " + std::to_string(seed));
            Network net = fixture::net(arch.spec, seed);
            const Batch b = fixture::batch(arch.spec, 7, seed + 10);
            const auto cache = forward(net, b.inputs, true);
            const GradientSet g = backward(net, cache, b);
            expect_grads_close(g, finite_difference_grad(net, b, 1e-5));
        }
    }
}

TEST(Backward, MatchesFiniteDifferencesWithAdapters) {
    for (const auto& arch : architectures()) {
        ModelSpec s = arch.spec;
        for (std::size_t l = 0; l < s.num_layers(); ++l) s.adapter_layers.push_back(l);
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            SCOPED_TRACE(std::string(arch.name) + " seed " + std::to_string(seed));
            Network net = fixture::net(s, seed);
            fixture::attach(net, 2, 2, seed);
            fixture::randomize_adapters(net, seed);
            const Batch b = fixture::batch(s, 6, seed + 20);
            const GradientSet g = backward(net, forward(net, b.inputs, true), b);
            expect_grads_close(g, finite_difference_grad(net, b, 1e-5, true));
        }
    }
}

TEST(Backward, ClosedFormLinearMse) {
    // y = x·Wᵀ, L = (1/B)·Σ(y − t)², ∇W = (2/B)·(XWᵀ − Y)ᵀ·X
    ModelSpec s = fixture::spec({2, 2}, {}, LossKind::mean_squared_error);
    Network net = fixture::net(s, 0);
    net.layers[0].weight = Matrix{{0.5, -1.0}, {2.0, 0.25}};
    net.layers[0].bias = Matrix(1, 2);
    Batch b{Matrix{{1.0, 2.0}, {-1.0, 0.5}}, Matrix{{0.0, 1.0}, {1.0, -1.0}}};
    const GradientSet g = backward(net, forward(net, b.inputs, true), b);
    const Matrix resid = oracle::triple_loop(b.inputs, transpose(net.layers[0].weight)) - b.targets;
    const Matrix want = (2.0 / 2.0) * oracle::triple_loop(transpose(resid), b.inputs);
    EXPECT_LE(oracle::max_abs_diff(g.weight[0], want), 1e-12);
}

TEST(Backward, ZeroLossPointHasZeroGradient) {
    ModelSpec s = fixture::spec({3, 2}, {}, LossKind::mean_squared_error);
    Network net = fixture::net(s, 4);
    Batch b;
    b.inputs = oracle::random_matrix(5, 3, 4);
    b.targets = predict(net, b.inputs);
    const GradientSet g = backward(net, forward(net, b.inputs, true), b);
    EXPECT_EQ(frobenius_norm(g.weight[0]), 0.0);
    EXPECT_EQ(frobenius_norm(g.bias[0]), 0.0);
}

TEST(Backward, StaleCacheIsRejected) {
    ModelSpec s = fixture::spec({3, 4, 2}, {Activation::tanh});
    Network net = fixture::net(s, 1);
    const Batch b = fixture::batch(s, 4, 1);
    const auto cache = forward(net, b.inputs, true);
    Network other = fixture::net(fixture::spec({3, 5, 2}, {Activation::tanh}), 1);
    EXPECT_THROW(backward(other, cache, b), ContractViolation);
    const Batch wrong = fixture::batch(s, 5, 1);
    EXPECT_THROW(backward(net, cache, wrong), ContractViolation);
}

TEST(Backward, CounterCountsPasses) {
    ModelSpec s = fixture::spec({3, 4, 2}, {Activation::tanh});
    Network net = fixture::net(s, 1);
    const Batch b = fixture::batch(s, 4, 1);
    const auto before = backward_pass_count();
    for (int i = 0; i < 3; ++i) backward(net, forward(net, b.inputs, true), b);
    EXPECT_EQ(backward_pass_count() - before, 3u);
}

TEST(FiniteDifference, AnalyticQuadratic) {
    std::vector<double> w{1.0, 2.0};
    auto g = central_difference(w, [&] { return w[0] * w[0] + w[1] * w[1]; }, 1e-5);
    EXPECT_NEAR(g[0], 2.0, 1e-8);
    EXPECT_NEAR(g[1], 4.0, 1e-8);
    EXPECT_EQ(w[0], 1.0);
    EXPECT_EQ(w[1], 2.0);
}

TEST(FiniteDifference, ConstantOutputGivesZero) {
    ModelSpec s = fixture::spec({3, 4, 2}, {Activation::relu}, LossKind::mean_squared_error);
    Network net = fixture::net(s, 2);
    for (auto& l : net.layers) l.weight.fill(0.0);
    net.layers[0].bias.fill(-1.0);  // relu kills every hidden unit
    const Batch b = fixture::batch(s, 4, 2);
    const GradientSet g = finite_difference_grad(net, b, 1e-5);
    EXPECT_EQ(frobenius_norm(g.weight[0]), 0.0);
}

TEST(Forward, HandComputedSingleLayerWithAdapters) {
    ModelSpec s = fixture::spec({2, 2}, {}, LossKind::mean_squared_error, {0});
    Network net = fixture::net(s, 0);
    auto& l = net.layers[0];
    l.weight = Matrix{{1.0, 2.0}, {3.0, 4.0}};
    l.bias = Matrix(1, 2);
    l.primary = AdapterPair{Matrix{{1.0}, {0.0}}, Matrix{{0.5, -1.0}}, 2.0};   // s1 = 2
    l.auxiliary = AdapterPair{Matrix{{0.0}, {2.0}}, Matrix{{1.0, 1.0}}, 3.0};  // s2 = 3
    const Matrix x{{1.0, -2.0}};
    // W = W0 + 2·[[0.5,-1],[0,0]] + 3·[[0,0],[2,2]] = [[2,0],[9,10]]
    const Matrix want{{2.0, -11.0}};
    EXPECT_LE(oracle::max_abs_diff(forward(net, x, true).output, want), 1e-12);
    // Without the auxiliary: [[2,0],[3,4]]
    EXPECT_LE(oracle::max_abs_diff(forward(net, x, false).output, Matrix{{2.0, -5.0}}), 1e-12);
}

TEST(Forward, FreshAdaptersLeaveOutputBitwiseUnchanged) {
    ModelSpec s = fixture::spec({4, 6, 3}, {Activation::tanh}, LossKind::softmax_cross_entropy, {0, 1});
    Network base = fixture::net(s, 5);
    Network adapted = base;
    fixture::attach(adapted, 2, 2, 9);
    const Matrix x = oracle::random_matrix(5, 4, 5);
    EXPECT_TRUE(forward(adapted, x, true).output.bitwise_equal(forward(base, x, true).output));
}

TEST(Forward, ExcludingAuxiliaryEqualsRemovingIt) {
    ModelSpec s = fixture::spec({4, 6, 3}, {Activation::tanh}, LossKind::softmax_cross_entropy, {0, 1});
    Network net = fixture::net(s, 5);
    fixture::attach(net, 2, 2, 9);
    fixture::randomize_adapters(net, 3);
    Network stripped = net;
    for (auto& l : stripped.layers) l.auxiliary.reset();
    const Matrix x = oracle::random_matrix(5, 4, 6);
    EXPECT_TRUE(forward(net, x, false).output.bitwise_equal(forward(stripped, x, true).output));
    EXPECT_FALSE(forward(net, x, true).output.bitwise_equal(forward(stripped, x, true).output));
}

TEST(Forward, InputShapeMismatchThrows) {
    ModelSpec s = fixture::spec({4, 3}, {});
    Network net = fixture::net(s, 1);
    EXPECT_THROW(forward(net, Matrix(2, 5), false), ContractViolation);
}

TEST(Loss, KnownValues) {
    const Matrix p{{1.0, 2.0}, {3.0, 4.0}};
    EXPECT_EQ(loss(p, p, LossKind::mean_squared_error), 0.0);
    EXPECT_NEAR(loss(Matrix{{0.0, 0.0}}, Matrix{{0.0, 1.0}}, LossKind::softmax_cross_entropy), std::log(2.0), 1e-15);
}

TEST(Loss, CrossEntropyMatchesDirectFormula) {
    const Matrix logits = oracle::random_matrix(16, 4, 3, 3.0);
    bilora::RngStream rng(3, 9);
    Matrix t(16, 4);
    for (std::size_t i = 0; i < 16; ++i) t(i, rng.below(4)) = 1.0;
    double want = 0.0;
    for (std::size_t i = 0; i < 16; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < 4; ++j) z += std::exp(logits(i, j));
        for (std::size_t j = 0; j < 4; ++j) want -= t(i, j) * std::log(std::exp(logits(i, j)) / z);
    }
    want /= 16.0;
    EXPECT_NEAR(loss(logits, t, LossKind::softmax_cross_entropy), want, 1e-12);
}

TEST(Loss, StableForHugeLogitsAndNonNegative) {
    const Matrix logits{{1000.0, -1000.0}, {-800.0, 900.0}};
    const Matrix t{{1.0, 0.0}, {1.0, 0.0}};
    const double l = loss(logits, t, LossKind::softmax_cross_entropy);
    EXPECT_TRUE(std::isfinite(l));
    EXPECT_NEAR(l, 1700.0 / 2.0, 1e-9);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Matrix p = oracle::random_matrix(5, 3, seed, 5.0);
        const Matrix q = oracle::random_matrix(5, 3, seed + 1);
        EXPECT_GE(loss(p, q, LossKind::mean_squared_error), 0.0);
    }
}

TEST(Network, ChecksumTracksBaseWeightsOnly) {
    ModelSpec s = fixture::spec({3, 4, 2}, {Activation::tanh}, LossKind::softmax_cross_entropy, {0});
    Network net = fixture::net(s, 1);
    const auto c0 = base_checksum(net);
    fixture::attach(net, 2, 0, 1);
    fixture::randomize_adapters(net, 1);
    EXPECT_EQ(base_checksum(net), c0);
    net.layers[1].weight(0, 0) += 1e-12;
    EXPECT_NE(base_checksum(net), c0);
}

TEST(Network, ForwardIsDeterministic) {
    ModelSpec s = fixture::spec({3, 8, 8, 2}, {Activation::relu, Activation::tanh});
    Network net = fixture::net(s, 3);
    const Matrix x = oracle::random_matrix(10, 3, 3);
    EXPECT_TRUE(forward(net, x, true).output.bitwise_equal(forward(net, x, true).output));
}

TEST(ModelSpec, ValidationRejectsBadSpecs) {
    EXPECT_THROW(fixture::spec({3}, {}).validate(), ConfigError);
    EXPECT_THROW(fixture::spec({3, 0, 2}, {Activation::tanh}).validate(), ConfigError);
    EXPECT_THROW(fixture::spec({3, 4, 2}, {}).validate(), ConfigError);
    EXPECT_THROW(fixture::spec({3, 4, 2}, {Activation::tanh}, LossKind::mean_squared_error, {2}).validate(),
                 ConfigError);
    EXPECT_NO_THROW(fixture::spec({3, 4, 2}, {Activation::tanh}, LossKind::mean_squared_error, {1}).validate());
}

TEST(Metric, AccuracyAndRSquared) {
    EXPECT_EQ(accuracy(Matrix{{0.1, 0.9}, {0.8, 0.2}}, Matrix{{0, 1}, {0, 1}}), 0.5);
    const Matrix t{{1.0}, {2.0}, {3.0}};
    EXPECT_EQ(r_squared(t, t), 1.0);
    EXPECT_NEAR(r_squared(Matrix{{2.0}, {2.0}, {2.0}}, t), 0.0, 1e-15);
}
