#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace gseg {

// ---------------------------------------------------------------------------
// Errors. The CLI maps usage_error to exit code 1, everything else to 2.
// ---------------------------------------------------------------------------

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct usage_error : error { using error::error; };
struct format_error : error { using error::error; };       // malformed file
struct data_error : error { using error::error; };         // well-formed but bad values
struct consistency_error : error { using error::error; };  // inputs disagree
struct shape_error : error { using error::error; };
struct numeric_error : error { using error::error; };      // NaN/Inf produced
struct degenerate_input_error : error { using error::error; };
struct io_error : error { using error::error; };

// ---------------------------------------------------------------------------
// 3D shape / coordinate helpers. Storage order is [z][y][x], x fastest,
// matching the NIfTI on-disk order.
// ---------------------------------------------------------------------------

struct Shape3 {
    int x = 0, y = 0, z = 0;

    std::size_t count() const {
        return std::size_t(x) * std::size_t(y) * std::size_t(z);
    }
    bool operator==(const Shape3&) const = default;
};

inline std::size_t lindex(const Shape3& s, int x, int y, int z) {
    return (std::size_t(z) * s.y + y) * s.x + x;
}

struct Coord3 {
    int x = 0, y = 0, z = 0;
    bool operator==(const Coord3&) const = default;
};

// Shortest decimal form that parses back to the exact same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// distribution mappings are hand-rolled so streams do not depend on the
// standard library implementation.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // uniform in [0,1)
    double uniform() {
        return double(gen_() >> 11) * 0x1.0p-53;
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw usage_error("Rng::below: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do { v = gen_(); } while (v >= limit);
        return v % n;
    }

    double normal(double mean = 0.0, double sd = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + sd * spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double k = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * k;
        has_spare_ = true;
        return mean + sd * u * k;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[below(i)]);
    }

  private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Percentile with linear interpolation between order statistics. One
// definition shared by the 99.5 rescale, the quintile features, and HD95.
// ---------------------------------------------------------------------------

template <typename T>
double percentile_sorted(const std::vector<T>& sorted, double p) {
    if (sorted.empty())
        throw degenerate_input_error("percentile of empty sample");
    if (sorted.size() == 1) return double(sorted[0]);
    const double rank = std::clamp(p, 0.0, 100.0) / 100.0 * double(sorted.size() - 1);
    const std::size_t lo = std::size_t(rank);
    if (lo + 1 >= sorted.size()) return double(sorted.back());
    const double frac = rank - double(lo);
    return double(sorted[lo]) * (1.0 - frac) + double(sorted[lo + 1]) * frac;
}

template <typename T>
double percentile(std::vector<T> sample, double p) {
    std::sort(sample.begin(), sample.end());
    return percentile_sorted(sample, p);
}

// ---------------------------------------------------------------------------
// FNV-1a content hash, used to key the on-disk artifact cache.
// ---------------------------------------------------------------------------

class Fnv1a {
  public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001b3ull;
        }
    }
    template <typename T>
    void update_pod(const T& v) { update(&v, sizeof(T)); }
    template <typename T>
    void update_vec(const std::vector<T>& v) {
        static_assert(std::is_trivially_copyable_v<T>);
        update(v.data(), v.size() * sizeof(T));
    }
    std::uint64_t digest() const { return h_; }

  private:
    std::uint64_t h_ = 0xcbf29ce484222325ull;
};

// ---------------------------------------------------------------------------
// parallel_for: static contiguous chunks, each index owned by exactly one
// worker, so any operation whose outputs are disjoint per index is
// bit-identical for every thread count.
// ---------------------------------------------------------------------------

inline unsigned& thread_count() {
    static unsigned n = std::max(1u, std::thread::hardware_concurrency());
    return n;
}

template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const unsigned jobs = std::min<std::size_t>(thread_count(), n);
    if (jobs <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> workers;
    workers.reserve(jobs);
    const std::size_t chunk = (n + jobs - 1) / jobs;
    for (unsigned t = 0; t < jobs; ++t) {
        const std::size_t lo = t * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        workers.emplace_back([lo, hi, &fn] {
            for (std::size_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& w : workers) w.join();
}

}  // namespace gseg
