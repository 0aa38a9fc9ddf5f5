// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic tasks and the tabular dataset format.
//
// A dataset file is CSV with a header row `x0,x1,...,x{d-1},y` followed by
// one sample per line. Feature values are written with 17 significant
// digits. For classification `y` is the integer class index; for regression
// it is the real-valued target.

#include "bilora/error.hpp"
#include "bilora/matrix.hpp"
#include "bilora/network.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace bilora {

enum class TaskKind { two_gaussians, two_moons, spiral, linear_regression, csv_file };

inline std::string to_string(TaskKind k) {
    switch (k) {
        case TaskKind::two_gaussians: return "two-gaussians";
        case TaskKind::two_moons: return "two-moons";
        case TaskKind::spiral: return "spiral";
        case TaskKind::linear_regression: return "linear-regression";
        case TaskKind::csv_file: return "csv-file";
    }
    return "?";
}
inline TaskKind parse_task_kind(const std::string& s) {
    if (s == "two-gaussians") return TaskKind::two_gaussians;
    if (s == "two-moons") return TaskKind::two_moons;
    if (s == "spiral") return TaskKind::spiral;
    if (s == "linear-regression") return TaskKind::linear_regression;
    if (s == "csv-file") return TaskKind::csv_file;
    throw ConfigError("unknown task '" + s + "'");
}

struct TaskConfig {
    TaskKind kind = TaskKind::two_moons;
    std::size_t train_size = 200;
    std::size_t eval_size = 2000;
    /// Fraction of training labels flipped (classification only).
    double label_noise = 0.0;
    /// Feature dimension. 2-D tasks are embedded by a fixed rotation
    /// (seeded by embed_seed) after padding with nuisance coordinates.
    std::size_t dim = 2;
    /// Rotation of the 2-D pattern in radians (domain shift knob).
    double rotation = 0.0;
    /// Isotropic jitter on the 2-D pattern.
    double point_noise = 0.1;
    /// Stddev of the nuisance coordinates.
    double nuisance_std = 0.0;
    std::uint64_t embed_seed = 7;
    std::string csv_train;
    std::string csv_eval;

    bool classification() const noexcept { return kind != TaskKind::linear_regression; }

    void validate() const {
        if (kind != TaskKind::csv_file && (train_size < 1 || eval_size < 1))
            throw ConfigError("task sizes must be >= 1");
        if (!(label_noise >= 0.0 && label_noise < 1.0)) throw ConfigError("label noise must lie in [0, 1)");
        if (kind != TaskKind::linear_regression && kind != TaskKind::csv_file && dim < 2)
            throw ConfigError("2-D tasks need dim >= 2");
        if (kind == TaskKind::csv_file && (csv_train.empty() || csv_eval.empty()))
            throw ConfigError("csv-file task needs csv_train and csv_eval");
    }
};

struct Dataset {
    Matrix features;
    /// Class index per row (classification).
    std::vector<std::size_t> labels;
    /// Regression targets, rows × 1 (regression).
    Matrix values;
    std::size_t num_classes = 2;
    bool classification = true;

    std::size_t size() const noexcept { return features.rows(); }
    std::size_t dim() const noexcept { return features.cols(); }

    Batch to_batch() const { return subset_batch(all_indices()); }

    std::vector<std::size_t> all_indices() const {
        std::vector<std::size_t> idx(size());
        std::iota(idx.begin(), idx.end(), 0);
        return idx;
    }

    Batch subset_batch(std::span<const std::size_t> rows) const {
        Batch b;
        b.inputs = Matrix(rows.size(), dim());
        b.targets = Matrix(rows.size(), classification ? num_classes : 1);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t j = 0; j < dim(); ++j) b.inputs(i, j) = features(rows[i], j);
            if (classification) b.targets(i, labels[rows[i]]) = 1.0;
            else b.targets(i, 0) = values(rows[i], 0);
        }
        return b;
    }
};

struct DatasetPair {
    Dataset train;
    Dataset eval;
};

namespace detail {

/// Random orthogonal d×d matrix (Gram-Schmidt of a Gaussian draw).
inline Matrix random_rotation(std::size_t d, std::uint64_t seed) {
    RngStream rng(seed, 0x0e5b);
    Matrix g = seeded_gaussian(d, d, rng, 1.0);
    Matrix q = orthonormal_columns(g);
    if (q.cols() != d) throw ContractViolation("random_rotation: degenerate draw");
    return q;
}

inline void pattern_point(TaskKind kind, std::size_t label, RngStream& rng, double noise, double& x, double& y) {
    const double pi = 3.14159265358979323846;
    switch (kind) {
        case TaskKind::two_gaussians:
        {
            // Unit-variance clusters whose means are 4σ apart. The offset
            // along the separating axis is truncated to |v| < 1.8, so the
            // classes are linearly separable with margin 0.2.
            double v = rng.normal();
            while (std::abs(v) >= 1.8) v = rng.normal();
            x = (label == 0 ? -2.0 : 2.0) + v;
            y = rng.normal();
            return;
        }
        case TaskKind::two_moons: {
            const double t = pi * rng.uniform();
            if (label == 0) {
                x = std::cos(t);
                y = std::sin(t);
            } else {
                x = 1.0 - std::cos(t);
                y = 0.5 - std::sin(t);
            }
            x += noise * rng.normal() - 0.5;
            y += noise * rng.normal() - 0.25;
            return;
        }
        case TaskKind::spiral: {
            const double r = rng.uniform();
            const double theta = 3.0 * pi * r + (label == 0 ? 0.0 : pi);
            x = 2.0 * r * std::cos(theta) + noise * rng.normal();
            y = 2.0 * r * std::sin(theta) + noise * rng.normal();
            return;
        }
        default: throw ContractViolation("pattern_point: not a 2-D task");
    }
}

inline Dataset synthesize(const TaskConfig& cfg, std::size_t n, std::uint64_t seed, std::uint64_t stream) {
    RngStream rng(seed, stream);
    Dataset ds;
    if (cfg.kind == TaskKind::linear_regression) {
        ds.classification = false;
        ds.num_classes = 0;
        RngStream wrng(cfg.embed_seed, 0x11);
        const Matrix w = seeded_gaussian(cfg.dim, 1, wrng, 1.0 / std::sqrt(static_cast<double>(cfg.dim)));
        ds.features = seeded_gaussian(n, cfg.dim, rng, 1.0);
        ds.values = matmul(ds.features, w);
        for (auto& v : ds.values.values()) v += cfg.point_noise * rng.normal();
        return ds;
    }
    ds.classification = true;
    ds.num_classes = 2;
    ds.features = Matrix(n, cfg.dim);
    ds.labels.resize(n);
    const double c = std::cos(cfg.rotation), s = std::sin(cfg.rotation);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t label = i % 2;
        double x = 0.0, y = 0.0;
        pattern_point(cfg.kind, label, rng, cfg.point_noise, x, y);
        ds.features(i, 0) = c * x - s * y;
        ds.features(i, 1) = s * x + c * y;
        for (std::size_t j = 2; j < cfg.dim; ++j) ds.features(i, j) = cfg.nuisance_std * rng.normal();
        ds.labels[i] = label;
    }
    if (cfg.dim > 2) ds.features = matmul_nt(ds.features, random_rotation(cfg.dim, cfg.embed_seed));
    return ds;
}

} // namespace detail

/// Flip exactly round(fraction·n) labels, chosen by a seeded partial shuffle.
/// Returns the flipped row indices in ascending order.
inline std::vector<std::size_t> flip_labels(Dataset& ds, double fraction, RngStream& rng) {
    if (!ds.classification || fraction <= 0.0) return {};
    const std::size_t n = ds.size();
    const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    std::vector<std::size_t> idx = ds.all_indices();
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) {
        const auto shift = 1 + (ds.num_classes > 2 ? rng.below(ds.num_classes - 1) : 0);
        ds.labels[i] = (ds.labels[i] + shift) % ds.num_classes;
    }
    return idx;
}

inline Dataset read_dataset_csv(const std::filesystem::path& path);

/// Train split (with label noise) and clean eval split. Train and eval draw
/// from independent streams of `seed`.
inline DatasetPair generate_dataset(const TaskConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DatasetPair out;
    if (cfg.kind == TaskKind::csv_file) {
        out.train = read_dataset_csv(cfg.csv_train);
        out.eval = read_dataset_csv(cfg.csv_eval);
        if (out.train.dim() != out.eval.dim()) throw ConfigError("csv train/eval feature dims differ");
    } else {
        out.train = detail::synthesize(cfg, cfg.train_size, seed, 1);
        out.eval = detail::synthesize(cfg, cfg.eval_size, seed, 2);
    }
    RngStream noise_rng(seed, 3);
    flip_labels(out.train, cfg.label_noise, noise_rng);
    return out;
}

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_dataset_csv(const Dataset& ds, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    for (std::size_t j = 0; j < ds.dim(); ++j) out << 'x' << j << ',';
    out << "y\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t j = 0; j < ds.dim(); ++j) out << format_double(ds.features(i, j)) << ',';
        if (ds.classification) out << ds.labels[i];
        else out << format_double(ds.values(i, 0));
        out << '\n';
    }
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

/// Reads the CSV format above. Integer-valued `y` columns are read as class
/// labels, anything else as regression targets.
inline Dataset read_dataset_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw IoError("'" + path.string() + "': empty file");
    const auto dim = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
    if (dim == 0) throw IoError("'" + path.string() + "': need at least one feature column");
    std::vector<double> feats, ys;
    bool integral = true;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) {
            try {
                std::size_t used = 0;
                row.push_back(std::stod(cell, &used));
                if (used != cell.size()) throw std::invalid_argument(cell);
            } catch (const std::exception&) {
                throw IoError("'" + path.string() + "' line " + std::to_string(lineno) + ": bad number '" + cell + "'");
            }
        }
        if (row.size() != dim + 1)
            throw IoError("'" + path.string() + "' line " + std::to_string(lineno) + ": wrong column count");
        feats.insert(feats.end(), row.begin(), row.end() - 1);
        ys.push_back(row.back());
        integral = integral && row.back() >= 0.0 && std::floor(row.back()) == row.back();
    }
    Dataset ds;
    ds.features = Matrix(ys.size(), dim);
    std::copy(feats.begin(), feats.end(), ds.features.values().begin());
    ds.classification = integral;
    if (integral) {
        std::size_t mx = 0;
        for (double y : ys) {
            ds.labels.push_back(static_cast<std::size_t>(y));
            mx = std::max(mx, ds.labels.back());
        }
        ds.num_classes = std::max<std::size_t>(2, mx + 1);
    } else {
        ds.values = Matrix(ys.size(), 1);
        std::copy(ys.begin(), ys.end(), ds.values.values().begin());
        ds.num_classes = 0;
    }
    return ds;
}

} // namespace bilora
