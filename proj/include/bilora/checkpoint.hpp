// SPDX-License-Identifier: Apache-2.0
#pragma once

// Binary checkpoint container. All integers are u64 little-endian, all
// floats IEEE-754 binary64 little-endian.
//
//   magic    8 bytes  "BILORACK"
//   version  u64      1
//   kind     u64      0 = full network, 1 = adapter-only (primary pairs)
//   spec:
//     n_dims u64, dims[n_dims] u64
//     n_act  u64, activation[n_act] u64   (0 relu, 1 tanh, 2 identity)
//     loss   u64                          (0 cross-entropy, 1 mse)
//     n_adp  u64, adapter_layer[n_adp] u64
//   kind 0, per layer in order:
//     matrix W0, matrix bias
//     flags u64 (bit 0: primary present, bit 1: auxiliary present)
//     [pair primary] [pair auxiliary]
//   kind 1:
//     n_pairs u64, then per pair: layer u64, pair
//   matrix := rows u64, cols u64, rows·cols f64 (row-major)
//   pair   := alpha f64, matrix B, matrix A

#include "bilora/error.hpp"
#include "bilora/network.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace bilora {

inline constexpr std::array<char, 8> kCheckpointMagic{'B', 'I', 'L', 'O', 'R', 'A', 'C', 'K'};
inline constexpr std::uint64_t kCheckpointVersion = 1;

enum class CheckpointKind : std::uint64_t { full = 0, adapters = 1 };

namespace detail {

class ByteWriter {
public:
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
    void matrix(const Matrix& m) {
        u64(m.rows());
        u64(m.cols());
        for (double v : m.values()) f64(v);
    }
    const std::vector<char>& bytes() const noexcept { return bytes_; }

private:
    std::vector<char> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    void raw(char* out, std::size_t n) {
        need(n);
        std::memcpy(out, bytes_.data() + pos_, n);
        pos_ += n;
    }
    Matrix matrix() {
        const auto r = u64(), c = u64();
        if (c != 0 && r > (bytes_.size() - pos_) / 8 / c) throw IoError("checkpoint: matrix larger than file");
        Matrix m(r, c);
        for (auto& v : m.values()) v = f64();
        return m;
    }
    bool done() const noexcept { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw IoError("checkpoint: truncated file");
    }
    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

inline std::uint64_t activation_code(Activation a) {
    switch (a) {
        case Activation::relu: return 0;
        case Activation::tanh: return 1;
        case Activation::identity: return 2;
    }
    return 0;
}
inline Activation activation_from(std::uint64_t c) {
    if (c == 0) return Activation::relu;
    if (c == 1) return Activation::tanh;
    if (c == 2) return Activation::identity;
    throw IoError("checkpoint: bad activation code");
}

inline void write_spec(ByteWriter& w, const ModelSpec& s) {
    w.u64(s.layer_dims.size());
    for (auto d : s.layer_dims) w.u64(d);
    w.u64(s.activations.size());
    for (auto a : s.activations) w.u64(activation_code(a));
    w.u64(s.loss == LossKind::softmax_cross_entropy ? 0 : 1);
    w.u64(s.adapter_layers.size());
    for (auto l : s.adapter_layers) w.u64(l);
}

inline std::uint64_t bounded_count(ByteReader& r) {
    const auto n = r.u64();
    if (n > (1u << 20)) throw IoError("checkpoint: implausible count");
    return n;
}

inline ModelSpec read_spec(ByteReader& r) {
    ModelSpec s;
    for (auto n = bounded_count(r); n > 0; --n) s.layer_dims.push_back(r.u64());
    for (auto n = bounded_count(r); n > 0; --n) s.activations.push_back(activation_from(r.u64()));
    const auto loss = r.u64();
    if (loss > 1) throw IoError("checkpoint: bad loss code");
    s.loss = loss == 0 ? LossKind::softmax_cross_entropy : LossKind::mean_squared_error;
    for (auto n = bounded_count(r); n > 0; --n) s.adapter_layers.push_back(r.u64());
    try {
        s.validate();
    } catch (const ConfigError& e) {
        throw IoError(std::string("checkpoint: invalid model spec: ") + e.what());
    }
    return s;
}

inline void write_pair(ByteWriter& w, const AdapterPair& p) {
    w.f64(p.alpha);
    w.matrix(p.b);
    w.matrix(p.a);
}

inline AdapterPair read_pair(ByteReader& r) {
    AdapterPair p;
    p.alpha = r.f64();
    p.b = r.matrix();
    p.a = r.matrix();
    return p;
}

inline void write_header(ByteWriter& w, CheckpointKind kind, const ModelSpec& spec) {
    w.raw(kCheckpointMagic.data(), kCheckpointMagic.size());
    w.u64(kCheckpointVersion);
    w.u64(static_cast<std::uint64_t>(kind));
    write_spec(w, spec);
}

inline ModelSpec read_header(ByteReader& r, CheckpointKind expected) {
    std::array<char, 8> magic{};
    r.raw(magic.data(), magic.size());
    if (magic != kCheckpointMagic) throw IoError("checkpoint: bad magic");
    if (r.u64() != kCheckpointVersion) throw IoError("checkpoint: unsupported version");
    if (r.u64() != static_cast<std::uint64_t>(expected)) throw IoError("checkpoint: unexpected kind");
    return read_spec(r);
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace detail

inline std::vector<char> encode_network(const Network& net) {
    detail::ByteWriter w;
    detail::write_header(w, CheckpointKind::full, net.spec);
    for (const auto& l : net.layers) {
        w.matrix(l.weight);
        w.matrix(l.bias);
        w.u64((l.primary ? 1u : 0u) | (l.auxiliary ? 2u : 0u));
        if (l.primary) detail::write_pair(w, *l.primary);
        if (l.auxiliary) detail::write_pair(w, *l.auxiliary);
    }
    return w.bytes();
}

inline Network decode_network(std::vector<char> bytes) {
    detail::ByteReader r(std::move(bytes));
    Network net;
    net.spec = detail::read_header(r, CheckpointKind::full);
    for (std::size_t l = 0; l < net.spec.num_layers(); ++l) {
        LoRALinear layer;
        layer.weight = r.matrix();
        layer.bias = r.matrix();
        if (layer.weight.rows() != net.spec.layer_dims[l + 1] || layer.weight.cols() != net.spec.layer_dims[l] ||
            layer.bias.rows() != 1 || layer.bias.cols() != layer.weight.rows())
            throw IoError("checkpoint: layer " + std::to_string(l) + " shape disagrees with spec");
        const auto flags = r.u64();
        if (flags & ~3ull) throw IoError("checkpoint: bad layer flags");
        if (flags & 1u) layer.primary = detail::read_pair(r);
        if (flags & 2u) layer.auxiliary = detail::read_pair(r);
        net.layers.push_back(std::move(layer));
    }
    if (!r.done()) throw IoError("checkpoint: trailing bytes");
    return net;
}

inline void save_network(const Network& net, const std::filesystem::path& path) {
    detail::write_file(path, encode_network(net));
}

inline Network load_network(const std::filesystem::path& path) { return decode_network(detail::read_file(path)); }

/// Adapter-only container: the primary pairs of every adapted layer.
inline std::vector<char> encode_adapters(const Network& net) {
    detail::ByteWriter w;
    detail::write_header(w, CheckpointKind::adapters, net.spec);
    std::uint64_t n = 0;
    for (const auto& l : net.layers) n += l.primary.has_value();
    w.u64(n);
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        if (!net.layers[i].primary) continue;
        w.u64(i);
        detail::write_pair(w, *net.layers[i].primary);
    }
    return w.bytes();
}

/// Install adapter pairs from an adapter-only container onto `base`
/// (whose spec must match apart from adapter placement).
inline void apply_adapters(Network& base, std::vector<char> bytes) {
    detail::ByteReader r(std::move(bytes));
    ModelSpec spec = detail::read_header(r, CheckpointKind::adapters);
    if (spec.layer_dims != base.spec.layer_dims || spec.activations != base.spec.activations ||
        spec.loss != base.spec.loss)
        throw ContractViolation("apply_adapters: architecture differs from base network");
    for (auto n = detail::bounded_count(r); n > 0; --n) {
        const auto l = r.u64();
        if (l >= base.layers.size()) throw IoError("checkpoint: adapter layer out of range");
        auto pair = detail::read_pair(r);
        auto& layer = base.layers[l];
        if (pair.b.rows() != layer.out_features() || pair.a.cols() != layer.in_features() ||
            pair.b.cols() != pair.a.rows())
            throw IoError("checkpoint: adapter shape disagrees with layer " + std::to_string(l));
        layer.primary = std::move(pair);
        layer.auxiliary.reset();
    }
    if (!r.done()) throw IoError("checkpoint: trailing bytes");
    base.spec.adapter_layers = spec.adapter_layers;
}

inline void save_adapters(const Network& net, const std::filesystem::path& path) {
    detail::write_file(path, encode_adapters(net));
}

inline void load_adapters(Network& base, const std::filesystem::path& path) {
    apply_adapters(base, detail::read_file(path));
}

} // namespace bilora
