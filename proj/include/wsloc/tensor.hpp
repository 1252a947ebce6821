#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace wsloc {

/// Dense row-major array of doubles. Rank-3 tensors are laid out as
/// (channel, row, col); rank-2 maps as (row, col).
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s)
        : shape(std::move(s)), data(checked_numel(shape), 0.0) {}

    Tensor(std::vector<std::size_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (checked_numel(shape) != data.size())
            throw std::invalid_argument("tensor shape does not match data size");
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    bool empty() const { return data.empty(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    double& operator()(std::size_t i, std::size_t j) {
        return data[i * shape[1] + j];
    }
    double operator()(std::size_t i, std::size_t j) const {
        return data[i * shape[1] + j];
    }

    double& operator()(std::size_t c, std::size_t i, std::size_t j) {
        return data[(c * shape[1] + i) * shape[2] + j];
    }
    double operator()(std::size_t c, std::size_t i, std::size_t j) const {
        return data[(c * shape[1] + i) * shape[2] + j];
    }

    double& operator()(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
        return data[((a * shape[1] + b) * shape[2] + c) * shape[3] + d];
    }
    double operator()(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
        return data[((a * shape[1] + b) * shape[2] + c) * shape[3] + d];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    bool all_finite() const {
        return std::all_of(data.begin(), data.end(),
                           [](double v) { return std::isfinite(v); });
    }

  private:
    static std::size_t checked_numel(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t e : s) {
            if (e == 0) throw std::invalid_argument("tensor extent must be positive");
            n *= e;
        }
        return s.empty() ? 0 : n;
    }
};

/// xoshiro256++ seeded through splitmix64. The generator is fixed so that a
/// given seed replays the same sequence on every platform. Streams for
/// independent consumers are derived with derive(seed, stream) rather than by
/// sharing one generator.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& word : state_) word = splitmix64(x);
    }

    static Rng derive(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t x = seed;
        std::uint64_t mixed = splitmix64(x) ^ (stream * 0x9e3779b97f4a7c15ULL);
        return Rng(mixed);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_int(std::uint64_t n) {
        // Rejection sampling keeps the draw unbiased and deterministic.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    /// Standard normal via Box-Muller. Both uniforms are consumed every call,
    /// so the generator state alone captures the full RNG state.
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = uniform_int(i);
            std::swap(items[i - 1], items[j]);
        }
    }

    std::array<std::uint64_t, 4> state() const { return state_; }

    static Rng from_state(const std::array<std::uint64_t, 4>& s) {
        Rng r(0);
        r.state_ = s;
        return r;
    }

  private:
    std::array<std::uint64_t, 4> state_{};

    static std::uint64_t splitmix64(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static std::uint64_t rotl(std::uint64_t v, int k) {
        return (v << k) | (v >> (64 - k));
    }
};

/// log(sum_i exp(scale * v_i)) with max subtraction. Safe for |scale * v| up
/// to well past 1e4.
inline double stable_logsumexp(const std::vector<double>& values, double scale) {
    if (values.empty()) throw std::invalid_argument("empty reduction");
    if (scale <= 0.0) throw std::invalid_argument("invalid scale");
    double m = -std::numeric_limits<double>::infinity();
    for (double v : values) m = std::max(m, scale * v);
    double acc = 0.0;
    for (double v : values) acc += std::exp(scale * v - m);
    return m + std::log(acc);
}

/// Softmax over every entry of a spatial map, computed with max subtraction.
inline Tensor spatial_softmax(const Tensor& map) {
    if (map.empty()) throw std::invalid_argument("empty reduction");
    Tensor out(map.shape);
    const double m = *std::max_element(map.data.begin(), map.data.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < map.numel(); ++i) {
        out.data[i] = std::exp(map.data[i] - m);
        sum += out.data[i];
    }
    for (double& v : out.data) v /= sum;
    return out;
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// log(sigmoid(x)) without underflow for large negative x.
inline double log_sigmoid(double x) {
    if (x >= 0.0) return -std::log1p(std::exp(-x));
    return x - std::log1p(std::exp(x));
}

// ---------------------------------------------------------------------------
// Binary tensor file format: magic "WLT1", u32 little-endian rank, rank u32
// extents, then raw little-endian doubles in row-major order.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error("truncated tensor record");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8))
        throw std::runtime_error("truncated tensor record");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
    os.write("WLT1", 4);
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape) detail::put_u32(os, static_cast<std::uint32_t>(e));
    for (double v : t.data) detail::put_f64(os, v);
}

inline Tensor read_tensor(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "WLT1", 4) != 0)
        throw std::runtime_error("bad tensor magic");
    const std::uint32_t rank = detail::get_u32(is);
    if (rank > 8) throw std::runtime_error("implausible tensor rank");
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
        e = detail::get_u32(is);
        if (e == 0) throw std::runtime_error("zero tensor extent");
        n *= e;
    }
    std::vector<double> data(n);
    for (double& v : data) v = detail::get_f64(is);
    return Tensor(std::move(shape), std::move(data));
}

inline void write_tensor_file(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_tensor(os, t);
}

inline Tensor read_tensor_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    return read_tensor(is);
}

}  // namespace wsloc
