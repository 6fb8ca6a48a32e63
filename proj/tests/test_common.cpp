#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <vector>

#include "graphseg/common.hpp"

using namespace gseg;

TEST_CASE("splitmix64 reference values") {
    // Published outputs of the reference splitmix64 stream seeded with 0.
    CHECK(splitmix64(0) == 0xE220A8397B1DCDAFull);
    CHECK(splitmix64(0x9E3779B97F4A7C15ull) == 0x6E789E6AA1B965F4ull);
    CHECK(splitmix64(1) != splitmix64(2));
}

TEST_CASE("fnv1a reference values") {
    Fnv1a h;
    CHECK(h.digest() == 0xcbf29ce484222325ull);
    h.update("a", 1);
    CHECK(h.digest() == 0xaf63dc4c8601ec8cull);
    Fnv1a h2;
    h2.update("foobar", 6);
    CHECK(h2.digest() == 0x85944171f73967e8ull);
}

TEST_CASE("rng streams are reproducible and distribution-correct") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        const double u = a.uniform();
        CHECK(u == b.uniform());
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
    Rng c(7);
    for (int i = 0; i < 1000; ++i) {
        const auto v = c.below(13);
        CHECK(v < 13);
    }
    // Box-Muller sanity: moments of a long stream.
    Rng d(3);
    double sum = 0.0, sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = d.normal();
        sum += x;
        sq += x * x;
    }
    CHECK(std::abs(sum / n) < 0.02);
    CHECK(std::abs(sq / n - 1.0) < 0.02);
}

TEST_CASE("shuffle is a uniform-ish permutation") {
    std::vector<int> v(10);
    std::iota(v.begin(), v.end(), 0);
    Rng r(1);
    r.shuffle(v);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 10; ++i) CHECK(sorted[i] == i);
    // First-position frequency over many shuffles stays near uniform.
    std::vector<int> count(10, 0);
    Rng r2(2);
    for (int trial = 0; trial < 20000; ++trial) {
        std::iota(v.begin(), v.end(), 0);
        r2.shuffle(v);
        ++count[std::size_t(v[0])];
    }
    for (int c : count) CHECK(std::abs(c - 2000) < 300);
}

TEST_CASE("percentile uses linear interpolation between order statistics") {
    std::vector<float> vals(1000);
    std::iota(vals.begin(), vals.end(), 1.0f);
    CHECK(percentile(vals, 99.5) == Catch::Approx(995.005).epsilon(1e-12));
    CHECK(percentile(vals, 0.0) == 1.0);
    CHECK(percentile(vals, 100.0) == 1000.0);
    CHECK(percentile(std::vector<float>{5.0f}, 37.0) == 5.0);
    CHECK(percentile(std::vector<float>{1.0f, 2.0f}, 50.0) == Catch::Approx(1.5));
    CHECK_THROWS_AS(percentile(std::vector<float>{}, 50.0), degenerate_input_error);
}

TEST_CASE("lindex is x-fastest") {
    Shape3 s{3, 4, 5};
    CHECK(lindex(s, 0, 0, 0) == 0);
    CHECK(lindex(s, 1, 0, 0) == 1);
    CHECK(lindex(s, 0, 1, 0) == 3);
    CHECK(lindex(s, 0, 0, 1) == 12);
    CHECK(lindex(s, 2, 3, 4) == s.count() - 1);
}

TEST_CASE("parallel_for touches each index exactly once for any thread count") {
    for (unsigned jobs : {1u, 2u, 3u, 7u}) {
        thread_count() = jobs;
        std::vector<std::atomic<int>> hits(1000);
        parallel_for(hits.size(), [&](std::size_t i) { hits[i].fetch_add(1); });
        for (auto& h : hits) CHECK(h.load() == 1);
    }
    thread_count() = std::max(1u, std::thread::hardware_concurrency());
}

TEST_CASE("rng::below rejects zero") {
    Rng r(0);
    CHECK_THROWS_AS(r.below(0), usage_error);
}
