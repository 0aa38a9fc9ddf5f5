// SPDX-License-Identifier: Apache-2.0
#include "bilora/data.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace bilora;

namespace {

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "bilora_test_data";
    std::filesystem::create_directories(dir);
    return dir / name;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

TaskConfig task(TaskKind kind, std::size_t train, double noise = 0.0) {
    TaskConfig t;
    t.kind = kind;
    t.train_size = train;
    t.eval_size = 50;
    t.label_noise = noise;
    return t;
}

/// Rosenblatt perceptron with a bias column; returns training accuracy.
double perceptron_accuracy(const Dataset& d, int epochs) {
    std::vector<double> w(d.dim() + 1, 0.0);
    auto side = [&](std::size_t i) {
        double z = w.back();
        for (std::size_t j = 0; j < d.dim(); ++j) z += w[j] * d.features(i, j);
        return z;
    };
    for (int e = 0; e < epochs; ++e) {
        bool clean = true;
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double y = d.labels[i] == 1 ? 1.0 : -1.0;
            if (y * side(i) <= 0.0) {
                clean = false;
                for (std::size_t j = 0; j < d.dim(); ++j) w[j] += y * d.features(i, j);
                w.back() += y;
            }
        }
        if (clean) break;
    }
    std::size_t right = 0;
    for (std::size_t i = 0; i < d.size(); ++i) right += (side(i) > 0.0) == (d.labels[i] == 1);
    return static_cast<double>(right) / static_cast<double>(d.size());
}

} // namespace

TEST(GenerateDataset, SeparableGaussiansAdmitPerfectLinearProbe) {
    for (std::uint64_t seed : {0u, 1u, 2u}) {
        auto d = generate_dataset(task(TaskKind::two_gaussians, 400), seed);
        EXPECT_EQ(perceptron_accuracy(d.train, 1000), 1.0) << "seed " << seed;
    }
}

TEST(GenerateDataset, SameSeedSameData) {
    for (auto kind : {TaskKind::two_gaussians, TaskKind::two_moons, TaskKind::spiral, TaskKind::linear_regression}) {
        auto t = task(kind, 64, kind == TaskKind::linear_regression ? 0.0 : 0.2);
        auto a = generate_dataset(t, 9), b = generate_dataset(t, 9), c = generate_dataset(t, 10);
        EXPECT_TRUE(a.train.features.bitwise_equal(b.train.features)) << to_string(kind);
        EXPECT_TRUE(a.eval.features.bitwise_equal(b.eval.features));
        EXPECT_EQ(a.train.labels, b.train.labels);
        EXPECT_FALSE(a.train.features.bitwise_equal(c.train.features));
    }
}

TEST(GenerateDataset, SameSeedByteIdenticalFiles) {
    auto t = task(TaskKind::two_moons, 100, 0.1);
    write_dataset_csv(generate_dataset(t, 3).train, scratch("a.csv"));
    write_dataset_csv(generate_dataset(t, 3).train, scratch("b.csv"));
    const auto a = slurp(scratch("a.csv"));
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, slurp(scratch("b.csv")));
}

TEST(GenerateDataset, NoiseFlipsExactlyTheRequestedCount) {
    auto t = task(TaskKind::two_moons, 200, 0.1);
    auto clean_t = t;
    clean_t.label_noise = 0.0;
    for (std::uint64_t seed : {0u, 5u, 77u}) {
        auto noisy = generate_dataset(t, seed), clean = generate_dataset(clean_t, seed);
        std::size_t flipped = 0;
        for (std::size_t i = 0; i < 200; ++i) flipped += noisy.train.labels[i] != clean.train.labels[i];
        EXPECT_EQ(flipped, 20u);
        EXPECT_EQ(noisy.eval.labels, clean.eval.labels);
        EXPECT_TRUE(noisy.train.features.bitwise_equal(clean.train.features));
    }
}

TEST(FlipLabels, ReturnsSortedDistinctRows) {
    Dataset d = generate_dataset(task(TaskKind::spiral, 30), 1).train;
    RngStream rng(4, 0);
    auto idx = flip_labels(d, 0.5, rng);
    ASSERT_EQ(idx.size(), 15u);
    for (std::size_t i = 1; i < idx.size(); ++i) EXPECT_LT(idx[i - 1], idx[i]);
    RngStream again(4, 0);
    EXPECT_TRUE(flip_labels(d, 0.0, again).empty());
}

TEST(GenerateDataset, TwoClassTasksAreBalanced) {
    for (auto kind : {TaskKind::two_gaussians, TaskKind::two_moons, TaskKind::spiral}) {
        auto d = generate_dataset(task(kind, 101), 2);
        std::size_t ones = 0;
        for (auto l : d.train.labels) ones += l;
        EXPECT_EQ(ones, 50u) << to_string(kind);
        ones = 0;
        for (auto l : d.eval.labels) ones += l;
        EXPECT_EQ(ones, 25u);
    }
}

TEST(GenerateDataset, EmbeddingWithoutNuisanceStaysInAPlane) {
    // The embedding is an orthogonal map of the zero-padded 2-D pattern, so
    // with nuisance_std = 0 the 8-D features span exactly two directions.
    auto t = task(TaskKind::two_moons, 60);
    t.dim = 8;
    auto d = generate_dataset(t, 6).train;
    ASSERT_EQ(d.dim(), 8u);
    auto ev = symmetric_eigenvalues(matmul_tn(d.features, d.features));
    std::sort(ev.begin(), ev.end());
    for (std::size_t i = 0; i < 6; ++i) EXPECT_LT(std::abs(ev[i]), 1e-10 * ev.back());
    EXPECT_GT(ev[6], 1.0);
    t.nuisance_std = 1.0;
    auto noisy = symmetric_eigenvalues(matmul_tn(generate_dataset(t, 6).train.features,
                                                 generate_dataset(t, 6).train.features));
    std::sort(noisy.begin(), noisy.end());
    EXPECT_GT(noisy[0], 1.0);
}

TEST(GenerateDataset, RegressionHasValuesNotLabels) {
    auto t = task(TaskKind::linear_regression, 30);
    t.dim = 3;
    auto d = generate_dataset(t, 1);
    EXPECT_FALSE(d.train.classification);
    EXPECT_EQ(d.train.values.rows(), 30u);
    EXPECT_TRUE(d.train.labels.empty());
    auto b = d.train.to_batch();
    EXPECT_EQ(b.targets.cols(), 1u);
}

TEST(GenerateDataset, InvalidConfigurationsAreRejected) {
    EXPECT_THROW(parse_task_kind("mnist"), ConfigError);
    auto t = task(TaskKind::two_moons, 0);
    EXPECT_THROW(generate_dataset(t, 0), ConfigError);
    t = task(TaskKind::two_moons, 10, 1.0);
    EXPECT_THROW(generate_dataset(t, 0), ConfigError);
    t = task(TaskKind::two_moons, 10, -0.1);
    EXPECT_THROW(generate_dataset(t, 0), ConfigError);
    t = task(TaskKind::csv_file, 10);
    EXPECT_THROW(generate_dataset(t, 0), ConfigError);
}

TEST(DatasetCsv, RoundTripIsExact) {
    for (auto kind : {TaskKind::spiral, TaskKind::linear_regression}) {
        auto t = task(kind, 40);
        t.dim = 3;
        auto d = generate_dataset(t, 8).train;
        write_dataset_csv(d, scratch("rt.csv"));
        auto back = read_dataset_csv(scratch("rt.csv"));
        EXPECT_TRUE(back.features.bitwise_equal(d.features)) << to_string(kind);
        EXPECT_EQ(back.classification, d.classification);
        EXPECT_EQ(back.labels, d.labels);
        if (!d.classification) {
            EXPECT_TRUE(back.values.bitwise_equal(d.values));
        }
    }
}

TEST(DatasetCsv, CsvTaskLoadsBothSplits) {
    auto src = generate_dataset(task(TaskKind::two_moons, 30), 2);
    write_dataset_csv(src.train, scratch("tr.csv"));
    write_dataset_csv(src.eval, scratch("ev.csv"));
    TaskConfig t;
    t.kind = TaskKind::csv_file;
    t.csv_train = scratch("tr.csv").string();
    t.csv_eval = scratch("ev.csv").string();
    auto d = generate_dataset(t, 0);
    EXPECT_TRUE(d.train.features.bitwise_equal(src.train.features));
    EXPECT_EQ(d.eval.labels, src.eval.labels);
}

TEST(DatasetCsv, MalformedFilesAreIoErrors) {
    {
        std::ofstream out(scratch("bad.csv"));
        out << "x0,x1,y\n1.0,2.0,0\n1.0,oops,1\n";
    }
    EXPECT_THROW(read_dataset_csv(scratch("bad.csv")), IoError);
    {
        std::ofstream out(scratch("cols.csv"));
        out << "x0,y\n1.0,2.0,0\n";
    }
    EXPECT_THROW(read_dataset_csv(scratch("cols.csv")), IoError);
    EXPECT_THROW(read_dataset_csv(scratch("missing.csv")), IoError);
}

TEST(Dataset, SubsetBatchIsOneHot) {
    auto d = generate_dataset(task(TaskKind::two_moons, 10), 1).train;
    std::vector<std::size_t> rows{3, 0, 3};
    auto b = d.subset_batch(rows);
    ASSERT_EQ(b.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(b.targets(i, d.labels[rows[i]]), 1.0);
        EXPECT_EQ(b.targets(i, 0) + b.targets(i, 1), 1.0);
        EXPECT_EQ(b.inputs(i, 1), d.features(rows[i], 1));
    }
}
