#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "graphseg/common.hpp"
#include "graphseg/nifti.hpp"
#include "graphseg/volume.hpp"

namespace gseg {

// ---------------------------------------------------------------------------
// Synthetic cases: an axis-aligned brain ellipsoid containing one randomly
// rotated, randomly placed trio of nested tumor ellipsoids sharing a center.
// Labels: 3 innermost (enhancing), 1 middle shell (core), 2 outer shell
// (edema), 0 elsewhere. Intensities follow a per-class table plus Gaussian
// noise; everything outside the brain is exactly zero.
// ---------------------------------------------------------------------------

struct PhantomSpec {
    Shape3 shape{64, 64, 64};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    // Brain semi-axes as fractions of the volume extent per axis.
    std::array<double, 3> brain_radius_frac{0.36, 0.38, 0.34};
    // Edema (outermost) semi-axes drawn per axis from this range, voxels.
    double edema_radius_min = 9.0;
    double edema_radius_max = 11.0;
    // Inner compartments scale the edema semi-axes.
    double core_ratio = 0.72;
    double et_ratio = 0.45;
    // Tumor center offset from brain center, per axis, as a fraction of the
    // brain semi-axis.
    double center_wander = 0.35;
    // intensity[class][modality]; modality order T1, T1ce, T2, FLAIR.
    // Contrast design: FLAIR elevated on all tumor classes, T1ce elevated on
    // enhancing tissue and depressed on core.
    std::array<std::array<float, kNumModalities>, kNumClasses> intensity{{
        {600.0f, 620.0f, 500.0f, 400.0f},   // 0 healthy
        {450.0f, 300.0f, 650.0f, 700.0f},   // 1 necrotic / non-enhancing core
        {500.0f, 520.0f, 700.0f, 800.0f},   // 2 edema
        {550.0f, 900.0f, 600.0f, 750.0f},   // 3 enhancing
    }};
    double noise_std = 25.0;
    std::uint64_t seed = 0;
    int max_placement_attempts = 100;
};

namespace detail {

// Rz(a)·Ry(b)·Rx(g), row-major.
inline std::array<double, 9> rotation_matrix(double a, double b, double g) {
    const double ca = std::cos(a), sa = std::sin(a);
    const double cb = std::cos(b), sb = std::sin(b);
    const double cg = std::cos(g), sg = std::sin(g);
    return {ca * cb, ca * sb * sg - sa * cg, ca * sb * cg + sa * sg,
            sa * cb, sa * sb * sg + ca * cg, sa * sb * cg - ca * sg,
            -sb,     cb * sg,                cb * cg};
}

struct TumorGeometry {
    std::array<double, 3> center;
    std::array<double, 3> edema_radii;
    std::array<double, 9> rot;  // world -> tumor frame uses the transpose

    // Squared tumor-frame ellipsoid coordinate with unit radii scaled by `s`.
    double norm2(double x, double y, double z, double s) const {
        const double dx = x - center[0], dy = y - center[1], dz = z - center[2];
        const double u = rot[0] * dx + rot[3] * dy + rot[6] * dz;
        const double v = rot[1] * dx + rot[4] * dy + rot[7] * dz;
        const double w = rot[2] * dx + rot[5] * dy + rot[8] * dz;
        const double ru = u / (edema_radii[0] * s);
        const double rv = v / (edema_radii[1] * s);
        const double rw = w / (edema_radii[2] * s);
        return ru * ru + rv * rv + rw * rw;
    }
};

}  // namespace detail

inline void validate_phantom_spec(const PhantomSpec& spec) {
    if (spec.shape.x < 8 || spec.shape.y < 8 || spec.shape.z < 8)
        throw usage_error("phantom: volume shape too small");
    if (!(spec.edema_radius_min > 0.0) || spec.edema_radius_max < spec.edema_radius_min)
        throw usage_error("phantom: bad edema radius range");
    if (!(spec.et_ratio > 0.0 && spec.et_ratio < spec.core_ratio && spec.core_ratio < 1.0))
        throw usage_error("phantom: compartment ratios must satisfy 0 < et < core < 1");
    if (!(spec.noise_std >= 0.0) || !std::isfinite(spec.noise_std))
        throw usage_error("phantom: noise std must be finite and non-negative");
    for (const auto& row : spec.intensity)
        for (float f : row)
            if (!std::isfinite(f)) throw usage_error("phantom: non-finite intensity table");
}

inline std::pair<MultiModalVolume, LabelVolume> generate_phantom(const PhantomSpec& spec,
                                                                 std::uint64_t case_seed) {
    validate_phantom_spec(spec);
    const Shape3 shp = spec.shape;
    const std::size_t n = shp.count();

    const std::array<double, 3> brain_center{(shp.x - 1) * 0.5, (shp.y - 1) * 0.5,
                                             (shp.z - 1) * 0.5};
    const std::array<double, 3> brain_radii{spec.brain_radius_frac[0] * shp.x,
                                            spec.brain_radius_frac[1] * shp.y,
                                            spec.brain_radius_frac[2] * shp.z};

    std::vector<std::uint8_t> brain(n, 0);
    for (int z = 0; z < shp.z; ++z)
        for (int y = 0; y < shp.y; ++y)
            for (int x = 0; x < shp.x; ++x) {
                const double dx = (x - brain_center[0]) / brain_radii[0];
                const double dy = (y - brain_center[1]) / brain_radii[1];
                const double dz = (z - brain_center[2]) / brain_radii[2];
                brain[lindex(shp, x, y, z)] = (dx * dx + dy * dy + dz * dz <= 1.0) ? 1 : 0;
            }

    Rng rng(case_seed);
    LabelVolume lab;
    lab.shape = shp;

    bool placed = false;
    for (int attempt = 0; attempt < spec.max_placement_attempts && !placed; ++attempt) {
        detail::TumorGeometry geo;
        const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double b = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double g = rng.uniform(0.0, 2.0 * std::numbers::pi);
        geo.rot = detail::rotation_matrix(a, b, g);
        for (int i = 0; i < 3; ++i)
            geo.center[i] = brain_center[i] +
                            rng.uniform(-1.0, 1.0) * spec.center_wander * brain_radii[i];
        for (int i = 0; i < 3; ++i)
            geo.edema_radii[i] = rng.uniform(spec.edema_radius_min, spec.edema_radius_max);

        lab.labels.assign(n, 0);
        bool contained = true;
        for (int z = 0; z < shp.z && contained; ++z)
            for (int y = 0; y < shp.y && contained; ++y)
                for (int x = 0; x < shp.x; ++x) {
                    if (geo.norm2(x, y, z, 1.0) > 1.0) continue;
                    const std::size_t i = lindex(shp, x, y, z);
                    if (!brain[i]) {
                        contained = false;
                        break;
                    }
                    if (geo.norm2(x, y, z, spec.et_ratio) <= 1.0)
                        lab.labels[i] = 3;
                    else if (geo.norm2(x, y, z, spec.core_ratio) <= 1.0)
                        lab.labels[i] = 1;
                    else
                        lab.labels[i] = 2;
                }
        placed = contained;
    }
    if (!placed)
        throw usage_error("phantom: could not place tumor inside brain; spec too tight");

    MultiModalVolume vol;
    vol.shape = shp;
    vol.original_shape = shp;
    vol.spacing = spec.spacing;
    for (int c = 0; c < kNumModalities; ++c) vol.channels[c].assign(n, 0.0f);
    // Noise is drawn voxel-major then channel-minor, only inside the brain,
    // so the stream is a pure function of the accepted geometry.
    for (std::size_t i = 0; i < n; ++i) {
        if (!brain[i]) continue;
        const auto& row = spec.intensity[lab.labels[i]];
        for (int c = 0; c < kNumModalities; ++c)
            vol.channels[c][i] = row[c] + float(rng.normal(0.0, spec.noise_std));
    }
    vol.brain_mask = std::move(brain);
    return {std::move(vol), std::move(lab)};
}

// ---------------------------------------------------------------------------
// Dataset emission: out/case_XXX/{case_XXX_t1,t1ce,t2,flair,seg}.nii.gz plus
// out/manifest.txt with one "case_id split" line per case.
// ---------------------------------------------------------------------------

inline std::uint64_t phantom_case_seed(std::uint64_t master_seed, int case_index) {
    return splitmix64(master_seed + 0x9E3779B97F4A7C15ULL * std::uint64_t(case_index + 1));
}

inline std::string phantom_case_id(int case_index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "case_%03d", case_index);
    return buf;
}

inline const std::array<std::string, kNumModalities> kModalitySuffix{"t1", "t1ce", "t2",
                                                                     "flair"};

inline std::array<std::string, kNumModalities> case_image_paths(const std::string& case_dir,
                                                                const std::string& case_id) {
    std::array<std::string, kNumModalities> paths;
    for (int c = 0; c < kNumModalities; ++c)
        paths[c] = case_dir + "/" + case_id + "_" + kModalitySuffix[c] + ".nii.gz";
    return paths;
}

inline std::string case_label_path(const std::string& case_dir, const std::string& case_id) {
    return case_dir + "/" + case_id + "_seg.nii.gz";
}

inline void generate_dataset(const PhantomSpec& spec, int n_train, int n_val,
                             std::uint64_t master_seed, const std::string& out_dir) {
    if (n_train < 1 || n_val < 1)
        throw usage_error("generate_dataset: need at least one case per split");
    validate_phantom_spec(spec);
    std::filesystem::create_directories(out_dir);

    const int total = n_train + n_val;
    std::vector<std::string> manifest(total);
    parallel_for(std::size_t(total), [&](std::size_t idx) {
        const int i = int(idx);
        const std::string id = phantom_case_id(i);
        const std::string dir = out_dir + "/" + id;
        std::filesystem::create_directories(dir);
        auto [vol, lab] = generate_phantom(spec, phantom_case_seed(master_seed, i));
        const auto img_paths = case_image_paths(dir, id);
        for (int c = 0; c < kNumModalities; ++c)
            nifti::write(img_paths[c], vol.shape, vol.spacing, vol.channels[c],
                         nifti::kDtFloat32);
        std::vector<std::uint8_t> raw(lab.labels.size());
        for (std::size_t k = 0; k < raw.size(); ++k)
            raw[k] = (lab.labels[k] == 3) ? 4 : lab.labels[k];
        nifti::write(case_label_path(dir, id), lab.shape, vol.spacing, raw,
                     nifti::kDtUint8);
        manifest[idx] = id + " " + (i < n_train ? "train" : "val");
    });

    std::ofstream mf(out_dir + "/manifest.txt", std::ios::binary);
    if (!mf) throw io_error("generate_dataset: cannot write manifest in " + out_dir);
    for (const auto& line : manifest) mf << line << "\n";
    if (!mf.good()) throw io_error("generate_dataset: manifest write failed");
}

struct ManifestEntry {
    std::string case_id;
    std::string split;  // "train" or "val"
};

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open manifest: " + path);
    std::vector<ManifestEntry> entries;
    std::string id, split;
    while (in >> id >> split) {
        if (split != "train" && split != "val")
            throw format_error("manifest split must be train or val: " + path);
        entries.push_back({id, split});
    }
    if (entries.empty()) throw format_error("manifest is empty: " + path);
    return entries;
}

}  // namespace gseg
