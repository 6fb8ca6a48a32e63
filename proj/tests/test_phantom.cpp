#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "graphseg/phantom.hpp"
#include "graphseg/volume.hpp"

using namespace gseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    static fs::path p = [] {
        auto d = fs::temp_directory_path() / "graphseg_phantom_test";
        fs::create_directories(d);
        return d;
    }();
    return p;
}

std::vector<unsigned char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("noiseless phantom intensities equal the class table exactly") {
    PhantomSpec spec;
    spec.shape = {32, 32, 32};
    spec.noise_std = 0.0;
    auto [vol, lab] = generate_phantom(spec, 4);
    for (std::size_t i = 0; i < vol.brain_mask.size(); ++i) {
        if (!vol.brain_mask[i]) {
            for (int c = 0; c < kNumModalities; ++c) REQUIRE(vol.channels[c][i] == 0.0f);
            REQUIRE(lab.labels[i] == 0);
        } else {
            const auto& row = spec.intensity[lab.labels[i]];
            for (int c = 0; c < kNumModalities; ++c) REQUIRE(vol.channels[c][i] == row[c]);
        }
    }
}

TEST_CASE("same seed twice gives bit-identical phantoms") {
    PhantomSpec spec;
    auto [v1, l1] = generate_phantom(spec, 1234);
    auto [v2, l2] = generate_phantom(spec, 1234);
    for (int c = 0; c < kNumModalities; ++c) CHECK(v1.channels[c] == v2.channels[c]);
    CHECK(l1.labels == l2.labels);
    CHECK(v1.brain_mask == v2.brain_mask);
    auto [v3, l3] = generate_phantom(spec, 1235);
    CHECK(v3.channels[0] != v1.channels[0]);
}

TEST_CASE("label histogram matches an analytic sphere scan") {
    // Degenerate ranges pin the geometry: centered sphere of radius 9, so the
    // per-case rotation cannot move any voxel and membership is d^2 vs r^2.
    PhantomSpec spec;
    spec.shape = {32, 32, 32};
    spec.center_wander = 0.0;
    spec.edema_radius_min = 9.0;
    spec.edema_radius_max = 9.0;
    auto [vol, lab] = generate_phantom(spec, 2024);

    const double cx = (spec.shape.x - 1) * 0.5;
    const std::array<double, 3> brain_r{spec.brain_radius_frac[0] * spec.shape.x,
                                        spec.brain_radius_frac[1] * spec.shape.y,
                                        spec.brain_radius_frac[2] * spec.shape.z};
    std::array<std::size_t, kNumClasses> expected{}, got{};
    std::size_t expected_outside = 0, got_outside = 0;
    for (int z = 0; z < spec.shape.z; ++z)
        for (int y = 0; y < spec.shape.y; ++y)
            for (int x = 0; x < spec.shape.x; ++x) {
                const double dx = x - cx, dy = y - cx, dz = z - cx;
                const double be = (dx / brain_r[0]) * (dx / brain_r[0]) +
                                  (dy / brain_r[1]) * (dy / brain_r[1]) +
                                  (dz / brain_r[2]) * (dz / brain_r[2]);
                const std::size_t i = lindex(spec.shape, x, y, z);
                if (be > 1.0) {
                    ++expected_outside;
                    if (!vol.brain_mask[i]) ++got_outside;
                    continue;
                }
                const double d2 = dx * dx + dy * dy + dz * dz;
                const double r = 9.0;
                int cls = 0;
                if (d2 <= (r * spec.et_ratio) * (r * spec.et_ratio))
                    cls = 3;
                else if (d2 <= (r * spec.core_ratio) * (r * spec.core_ratio))
                    cls = 1;
                else if (d2 <= r * r)
                    cls = 2;
                ++expected[std::size_t(cls)];
            }
    for (std::size_t i = 0; i < lab.labels.size(); ++i)
        if (vol.brain_mask[i]) ++got[lab.labels[i]];
    for (int c = 0; c < kNumClasses; ++c) CHECK(got[std::size_t(c)] == expected[std::size_t(c)]);
    CHECK(got_outside == expected_outside);  // mask is exactly the brain ellipsoid
}

TEST_CASE("tumor labels only occur inside the brain and all classes appear") {
    PhantomSpec spec;
    for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
        auto [vol, lab] = generate_phantom(spec, seed);
        std::array<std::size_t, kNumClasses> hist{};
        std::size_t brain = 0;
        for (std::size_t i = 0; i < lab.labels.size(); ++i) {
            if (lab.labels[i] != 0) REQUIRE(vol.brain_mask[i] == 1);
            if (vol.brain_mask[i]) {
                ++brain;
                ++hist[lab.labels[i]];
            }
        }
        for (int c = 0; c < kNumClasses; ++c) CHECK(hist[std::size_t(c)] > 0);
        // engineered imbalance: healthy dominates the brain
        const double healthy_frac = double(hist[0]) / double(brain);
        CHECK(healthy_frac > 0.85);
        CHECK(healthy_frac < 0.98);
    }
}

TEST_CASE("impossible placement raises a spec error") {
    PhantomSpec spec;
    spec.shape = {24, 24, 24};
    spec.edema_radius_min = 30.0;  // tumor larger than the brain
    spec.edema_radius_max = 31.0;
    spec.max_placement_attempts = 5;
    CHECK_THROWS_AS(generate_phantom(spec, 1), usage_error);
}

TEST_CASE("generate_dataset writes 25 cases with a disjoint-split manifest") {
    PhantomSpec spec;
    spec.shape = {32, 32, 32};
    const auto out = (temp_dir() / "set_a").string();
    generate_dataset(spec, 20, 5, 42, out);
    const auto entries = read_manifest(out + "/manifest.txt");
    REQUIRE(entries.size() == 25);
    std::size_t trains = 0, vals = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        CHECK(entries[i].case_id == phantom_case_id(int(i)));
        (entries[i].split == "train" ? trains : vals) += 1;
        CHECK(fs::is_directory(fs::path(out) / entries[i].case_id));
    }
    CHECK(trains == 20);
    CHECK(vals == 5);
}

TEST_CASE("dataset regeneration with the same master seed is byte-identical") {
    PhantomSpec spec;
    spec.shape = {24, 24, 24};
    spec.edema_radius_min = 4.0;
    spec.edema_radius_max = 5.0;
    const auto a = temp_dir() / "regen_a";
    const auto b = temp_dir() / "regen_b";
    generate_dataset(spec, 2, 1, 7, a.string());
    generate_dataset(spec, 2, 1, 7, b.string());
    for (int i = 0; i < 3; ++i) {
        const auto id = phantom_case_id(i);
        for (int c = 0; c < kNumModalities; ++c) {
            const auto rel = id + "/" + id + "_" + kModalitySuffix[std::size_t(c)] + ".nii.gz";
            CHECK(slurp(a / rel) == slurp(b / rel));
        }
        const auto seg = id + "/" + id + "_seg.nii.gz";
        CHECK(slurp(a / seg) == slurp(b / seg));
    }
    CHECK(slurp(a / "manifest.txt") == slurp(b / "manifest.txt"));
}

TEST_CASE("every generated case loads back and passes volume invariants") {
    PhantomSpec spec;
    spec.shape = {28, 28, 28};
    spec.edema_radius_min = 5.0;
    spec.edema_radius_max = 6.0;
    const auto out = (temp_dir() / "loadable").string();
    generate_dataset(spec, 2, 1, 99, out);
    for (const auto& e : read_manifest(out + "/manifest.txt")) {
        const auto dir = out + "/" + e.case_id;
        auto [vol, lab] = load_case(case_image_paths(dir, e.case_id),
                                    case_label_path(dir, e.case_id));
        CHECK(vol.shape == spec.shape);
        CHECK(lab.shape == spec.shape);
        CHECK(vol.mask_count() > 0);
        auto [cv, cl] = crop_to_brain_bbox(vol, &lab);
        CHECK(cv.shape.x <= spec.shape.x);
        CHECK(cv.mask_count() == vol.mask_count());
    }
}
