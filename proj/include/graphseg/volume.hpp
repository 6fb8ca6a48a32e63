#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "graphseg/common.hpp"
#include "graphseg/nifti.hpp"

namespace gseg {

constexpr int kNumModalities = 4;  // T1, T1ce, T2, FLAIR
constexpr int kNumClasses = 4;     // healthy, necrotic/NET, edema, enhancing

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct MultiModalVolume {
    Shape3 shape;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    // channel-major: channels[c][(z*Y + y)*X + x]
    std::array<std::vector<float>, kNumModalities> channels;
    std::vector<std::uint8_t> brain_mask;  // 1 where any channel nonzero at load
    Coord3 origin_offset;                  // crop corner into the original grid
    Shape3 original_shape;                 // pre-crop grid shape

    float& at(int c, int x, int y, int z) { return channels[c][lindex(shape, x, y, z)]; }
    float at(int c, int x, int y, int z) const { return channels[c][lindex(shape, x, y, z)]; }
    bool masked(std::size_t i) const { return brain_mask[i] != 0; }

    std::size_t mask_count() const {
        std::size_t n = 0;
        for (auto m : brain_mask) n += m;
        return n;
    }
};

struct LabelVolume {
    Shape3 shape;
    std::vector<std::uint8_t> labels;  // values in {0,1,2,3}

    std::uint8_t at(int x, int y, int z) const { return labels[lindex(shape, x, y, z)]; }
};

struct DatasetStats {
    std::array<double, kNumModalities> mean{};
    std::array<double, kNumModalities> stddev{};
    std::size_t corpus_size = 0;
};

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

inline void derive_brain_mask(MultiModalVolume& v) {
    const std::size_t n = v.shape.count();
    v.brain_mask.assign(n, 0);
    for (int c = 0; c < kNumModalities; ++c)
        for (std::size_t i = 0; i < n; ++i)
            if (v.channels[c][i] != 0.0f) v.brain_mask[i] = 1;
}

// image_paths order: T1, T1ce, T2, FLAIR. Raw label value 4 becomes class 3.
inline std::pair<MultiModalVolume, LabelVolume> load_case(
    const std::array<std::string, kNumModalities>& image_paths,
    const std::string& label_path = {}) {
    MultiModalVolume v;
    for (int c = 0; c < kNumModalities; ++c) {
        nifti::Image img = nifti::read(image_paths[c]);
        if (c == 0) {
            v.shape = img.shape;
            v.original_shape = img.shape;
            v.spacing = img.spacing;
        } else if (!(img.shape == v.shape)) {
            throw consistency_error("modality shape mismatch: " + image_paths[c]);
        }
        v.channels[c] = std::move(img.data);
    }
    derive_brain_mask(v);

    LabelVolume l;
    if (!label_path.empty()) {
        nifti::Image img = nifti::read(label_path);
        if (!(img.shape == v.shape))
            throw consistency_error("label shape mismatch: " + label_path);
        l.shape = img.shape;
        l.labels.resize(img.data.size());
        for (std::size_t i = 0; i < img.data.size(); ++i) {
            const float f = img.data[i];
            if (f != 0.0f && f != 1.0f && f != 2.0f && f != 4.0f)
                throw data_error("label value outside {0,1,2,4} in " + label_path);
            l.labels[i] = (f == 4.0f) ? 3 : std::uint8_t(f);
        }
    }
    return {std::move(v), std::move(l)};
}

// ---------------------------------------------------------------------------
// Preprocessing chain: crop -> per-channel 99.5-percentile rescale ->
// corpus standardization.
// ---------------------------------------------------------------------------

inline std::pair<MultiModalVolume, LabelVolume> crop_to_brain_bbox(
    const MultiModalVolume& v, const LabelVolume* l = nullptr) {
    int lo[3] = {v.shape.x, v.shape.y, v.shape.z};
    int hi[3] = {-1, -1, -1};
    for (int z = 0; z < v.shape.z; ++z)
        for (int y = 0; y < v.shape.y; ++y)
            for (int x = 0; x < v.shape.x; ++x)
                if (v.brain_mask[lindex(v.shape, x, y, z)]) {
                    lo[0] = std::min(lo[0], x); hi[0] = std::max(hi[0], x);
                    lo[1] = std::min(lo[1], y); hi[1] = std::max(hi[1], y);
                    lo[2] = std::min(lo[2], z); hi[2] = std::max(hi[2], z);
                }
    if (hi[0] < 0)
        throw degenerate_input_error("crop_to_brain_bbox: brain mask is empty");

    MultiModalVolume out;
    out.shape = {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};
    out.spacing = v.spacing;
    out.origin_offset = {v.origin_offset.x + lo[0], v.origin_offset.y + lo[1],
                         v.origin_offset.z + lo[2]};
    out.original_shape = v.original_shape;
    const std::size_t n = out.shape.count();
    for (int c = 0; c < kNumModalities; ++c) out.channels[c].resize(n);
    out.brain_mask.resize(n);
    for (int z = 0; z < out.shape.z; ++z)
        for (int y = 0; y < out.shape.y; ++y)
            for (int x = 0; x < out.shape.x; ++x) {
                const std::size_t src = lindex(v.shape, x + lo[0], y + lo[1], z + lo[2]);
                const std::size_t dst = lindex(out.shape, x, y, z);
                for (int c = 0; c < kNumModalities; ++c)
                    out.channels[c][dst] = v.channels[c][src];
                out.brain_mask[dst] = v.brain_mask[src];
            }

    LabelVolume lout;
    if (l) {
        if (!(l->shape == v.shape))
            throw consistency_error("label shape does not match volume in crop");
        lout.shape = out.shape;
        lout.labels.resize(n);
        for (int z = 0; z < out.shape.z; ++z)
            for (int y = 0; y < out.shape.y; ++y)
                for (int x = 0; x < out.shape.x; ++x)
                    lout.labels[lindex(out.shape, x, y, z)] =
                        l->labels[lindex(v.shape, x + lo[0], y + lo[1], z + lo[2])];
    }
    return {std::move(out), std::move(lout)};
}

// Divides each channel by its own 99.5th percentile over nonzero voxels.
inline MultiModalVolume rescale_by_percentile(const MultiModalVolume& v,
                                              double pct = 99.5) {
    MultiModalVolume out = v;
    for (int c = 0; c < kNumModalities; ++c) {
        std::vector<float> nonzero;
        nonzero.reserve(v.channels[c].size() / 2);
        for (float f : v.channels[c])
            if (f != 0.0f) nonzero.push_back(f);
        if (nonzero.empty())
            throw degenerate_input_error(
                "rescale_by_percentile: channel " + std::to_string(c) + " is all zeros");
        const double divisor = percentile(std::move(nonzero), pct);
        if (divisor == 0.0)
            throw degenerate_input_error(
                "rescale_by_percentile: zero percentile in channel " + std::to_string(c));
        const float inv = float(1.0 / divisor);
        for (auto& f : out.channels[c]) f *= inv;
    }
    return out;
}

// Population (divide-by-N) moments pooled over nonzero voxels of the corpus.
inline DatasetStats compute_dataset_stats(const std::vector<const MultiModalVolume*>& corpus) {
    if (corpus.empty())
        throw usage_error("compute_dataset_stats: empty corpus");
    DatasetStats stats;
    stats.corpus_size = corpus.size();
    for (int c = 0; c < kNumModalities; ++c) {
        double sum = 0.0, sum_sq = 0.0;
        std::size_t n = 0;
        for (const auto* v : corpus) {
            double s = 0.0, s2 = 0.0;  // per-case partials, merged in case order
            std::size_t k = 0;
            for (float f : v->channels[c])
                if (f != 0.0f) {
                    s += f;
                    s2 += double(f) * double(f);
                    ++k;
                }
            sum += s;
            sum_sq += s2;
            n += k;
        }
        if (n < 2)
            throw degenerate_input_error(
                "compute_dataset_stats: channel " + std::to_string(c) +
                " has fewer than 2 nonzero voxels corpus-wide");
        stats.mean[c] = sum / double(n);
        const double var = sum_sq / double(n) - stats.mean[c] * stats.mean[c];
        stats.stddev[c] = std::sqrt(std::max(var, 0.0));
        if (stats.stddev[c] <= 0.0)
            throw degenerate_input_error(
                "compute_dataset_stats: zero variance in channel " + std::to_string(c));
    }
    return stats;
}

inline DatasetStats compute_dataset_stats(const std::vector<MultiModalVolume>& corpus) {
    std::vector<const MultiModalVolume*> ptrs;
    ptrs.reserve(corpus.size());
    for (const auto& v : corpus) ptrs.push_back(&v);
    return compute_dataset_stats(ptrs);
}

// Applied to every voxel, background included, so the transform stays affine.
inline MultiModalVolume standardize(const MultiModalVolume& v, const DatasetStats& stats) {
    for (int c = 0; c < kNumModalities; ++c)
        if (!(stats.stddev[c] > 0.0))
            throw usage_error("standardize: stddev must be positive");
    MultiModalVolume out = v;
    for (int c = 0; c < kNumModalities; ++c) {
        const float mean = float(stats.mean[c]);
        const float inv = float(1.0 / stats.stddev[c]);
        for (auto& f : out.channels[c]) f = (f - mean) * inv;
    }
    return out;
}

inline MultiModalVolume unstandardize(const MultiModalVolume& v, const DatasetStats& stats) {
    MultiModalVolume out = v;
    for (int c = 0; c < kNumModalities; ++c) {
        const float mean = float(stats.mean[c]);
        const float sd = float(stats.stddev[c]);
        for (auto& f : out.channels[c]) f = f * sd + mean;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prediction export: uint8 NIfTI with raw BraTS values {0,1,2,4}, original
// (pre-crop) geometry restored, header copied from the reference input.
// ---------------------------------------------------------------------------

inline void export_prediction(const std::string& path, const LabelVolume& pred,
                              const Shape3& original_shape, const Coord3& origin_offset,
                              const std::array<double, 3>& spacing,
                              const std::vector<unsigned char>& reference_header = {}) {
    if (origin_offset.x + pred.shape.x > original_shape.x ||
        origin_offset.y + pred.shape.y > original_shape.y ||
        origin_offset.z + pred.shape.z > original_shape.z)
        throw consistency_error("export_prediction: crop does not fit original shape");
    std::vector<std::uint8_t> full(original_shape.count(), 0);
    for (int z = 0; z < pred.shape.z; ++z)
        for (int y = 0; y < pred.shape.y; ++y)
            for (int x = 0; x < pred.shape.x; ++x) {
                std::uint8_t cls = pred.labels[lindex(pred.shape, x, y, z)];
                if (cls == 3) cls = 4;  // internal class 3 exports as BraTS label 4
                full[lindex(original_shape, x + origin_offset.x, y + origin_offset.y,
                            z + origin_offset.z)] = cls;
            }
    nifti::write(path, original_shape, spacing, full, nifti::kDtUint8, reference_header);
}

}  // namespace gseg
