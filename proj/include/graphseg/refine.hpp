#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "graphseg/autodiff.hpp"
#include "graphseg/common.hpp"
#include "graphseg/graph.hpp"
#include "graphseg/supervoxel.hpp"
#include "graphseg/volume.hpp"

namespace gseg {

// ---------------------------------------------------------------------------
// Voxel-space refinement: node logits are painted back onto the voxel grid,
// the predicted tumorous patch is cropped with a margin, and a small 3D CNN
// re-scores that patch from the logits stacked with the raw modalities.
// ---------------------------------------------------------------------------

constexpr float kBackgroundLogit = 10.0f;  // class-0 logit outside the brain

struct LogitVolume {
    Shape3 shape;
    std::vector<float> data;  // [class][z][y][x], class-major

    float at(int c, int x, int y, int z) const {
        return data[std::size_t(c) * shape.count() + lindex(shape, x, y, z)];
    }
};

// Argmax with ties toward the higher class, shared by every consumer of
// 4-logit vectors in this module.
inline int argmax_class(const std::array<float, kNumClasses>& v) {
    int best = 0;
    for (int c = 1; c < kNumClasses; ++c)
        if (v[std::size_t(c)] >= v[std::size_t(best)]) best = c;
    return best;
}

inline std::array<float, kNumClasses> logits_at(const LogitVolume& lv, std::size_t vi) {
    std::array<float, kNumClasses> out;
    for (int c = 0; c < kNumClasses; ++c)
        out[std::size_t(c)] = lv.data[std::size_t(c) * lv.shape.count() + vi];
    return out;
}

inline LogitVolume reproject_logits(const std::vector<float>& node_logits,
                                    const SupervoxelPartition& p) {
    if (node_logits.size() != std::size_t(p.count()) * kNumClasses)
        throw consistency_error("reproject_logits: one logit row per supervoxel required");
    LogitVolume lv;
    lv.shape = p.shape;
    const std::size_t n_vox = p.shape.count();
    lv.data.assign(std::size_t(kNumClasses) * n_vox, 0.0f);
    for (std::size_t vi = 0; vi < n_vox; ++vi) {
        const std::int32_t id = p.assignment[vi];
        if (id < 0) {
            lv.data[vi] = kBackgroundLogit;  // background vector (10,0,0,0)
            continue;
        }
        for (int c = 0; c < kNumClasses; ++c)
            lv.data[std::size_t(c) * n_vox + vi] =
                node_logits[std::size_t(id) * kNumClasses + std::size_t(c)];
    }
    return lv;
}

// Voxel labels from per-node classes; out-of-brain voxels are 0.
inline LabelVolume labels_from_nodes(const std::vector<std::uint8_t>& node_classes,
                                     const SupervoxelPartition& p) {
    if (node_classes.size() != std::size_t(p.count()))
        throw consistency_error("labels_from_nodes: one class per supervoxel required");
    LabelVolume out;
    out.shape = p.shape;
    out.labels.assign(p.shape.count(), 0);
    for (std::size_t vi = 0; vi < p.assignment.size(); ++vi)
        if (p.assignment[vi] >= 0) out.labels[vi] = node_classes[std::size_t(p.assignment[vi])];
    return out;
}

// ---------------------------------------------------------------------------
// Patch cropping around the predicted tumor.
// ---------------------------------------------------------------------------

struct PatchBounds {
    Coord3 lo, hi;  // inclusive
    bool empty = true;

    int sx() const { return hi.x - lo.x + 1; }
    int sy() const { return hi.y - lo.y + 1; }
    int sz() const { return hi.z - lo.z + 1; }
    bool contains(int x, int y, int z) const {
        return !empty && x >= lo.x && x <= hi.x && y >= lo.y && y <= hi.y && z >= lo.z &&
               z <= hi.z;
    }
};

inline PatchBounds tumor_patch(const LogitVolume& lv, int margin = 8) {
    if (margin < 0) throw usage_error("tumor_patch: margin must be >= 0");
    PatchBounds b;
    int lo[3] = {lv.shape.x, lv.shape.y, lv.shape.z};
    int hi[3] = {-1, -1, -1};
    for (int z = 0; z < lv.shape.z; ++z)
        for (int y = 0; y < lv.shape.y; ++y)
            for (int x = 0; x < lv.shape.x; ++x) {
                if (argmax_class(logits_at(lv, lindex(lv.shape, x, y, z))) == 0) continue;
                lo[0] = std::min(lo[0], x);
                lo[1] = std::min(lo[1], y);
                lo[2] = std::min(lo[2], z);
                hi[0] = std::max(hi[0], x);
                hi[1] = std::max(hi[1], y);
                hi[2] = std::max(hi[2], z);
            }
    if (hi[0] < 0) return b;  // no predicted tumor: empty sentinel, CNN is skipped
    b.empty = false;
    b.lo = {std::max(0, lo[0] - margin), std::max(0, lo[1] - margin),
            std::max(0, lo[2] - margin)};
    b.hi = {std::min(lv.shape.x - 1, hi[0] + margin), std::min(lv.shape.y - 1, hi[1] + margin),
            std::min(lv.shape.z - 1, hi[2] + margin)};
    return b;
}

// ---------------------------------------------------------------------------
// The CNN: conv(8 -> 16, 5x5x5, pad 2) -> ReLU -> conv(16 -> 4, 5x5x5, pad 2).
// ---------------------------------------------------------------------------

struct CnnConfig {
    int kernel = 5;
    int padding = 2;
    int in_channels = 2 * kNumModalities;  // 4 logits stacked with 4 modalities
    int mid_channels = 16;
    int out_classes = kNumClasses;
    double lr0 = 0.0005;
    double lr_decay = 0.98;
    double weight_decay = 0.0001;
    int epochs = 100;
    int samples_per_batch = 1;
    int crop_margin = 8;
    std::uint64_t seed = 0;

    void validate() const {
        if (kernel != 5 || padding != 2 || in_channels != 8 || mid_channels != 16 ||
            out_classes != kNumClasses)
            throw usage_error("cnn: architecture is fixed by the pipeline");
        if (epochs < 1) throw usage_error("cnn: epochs must be >= 1");
        if (crop_margin < 0) throw usage_error("cnn: crop margin must be >= 0");
    }
};

template <typename T>
struct CnnModelT {
    CnnConfig cfg;
    ParameterT<T> k1, b1, k2, b2;

    std::vector<ParameterT<T>*> params() { return {&k1, &b1, &k2, &b2}; }
    std::vector<const ParameterT<T>*> params() const { return {&k1, &b1, &k2, &b2}; }
};

using CnnModel = CnnModelT<float>;

template <typename T>
CnnModelT<T> make_cnn_model(const CnnConfig& cfg, Rng& rng) {
    cfg.validate();
    CnnModelT<T> m;
    m.cfg = cfg;
    const int k = cfg.kernel;
    m.k1 = ParameterT<T>("cnn.conv1.K",
                         TensorT<T>({cfg.mid_channels, cfg.in_channels, k, k, k}));
    m.b1 = ParameterT<T>("cnn.conv1.b", TensorT<T>({cfg.mid_channels}));
    m.k2 = ParameterT<T>("cnn.conv2.K",
                         TensorT<T>({cfg.out_classes, cfg.mid_channels, k, k, k}));
    m.b2 = ParameterT<T>("cnn.conv2.b", TensorT<T>({cfg.out_classes}));
    glorot_init(m.k1.value, cfg.in_channels * k * k * k, cfg.mid_channels, rng);
    glorot_init(m.k2.value, cfg.mid_channels * k * k * k, cfg.out_classes, rng);
    return m;
}

template <typename T>
typename TapeT<T>::Id cnn_forward(TapeT<T>& tape, CnnModelT<T>& model,
                                  typename TapeT<T>::Id input) {
    const auto& X = tape.value(input);
    if (X.shape.size() != 4 || X.dim(0) != model.cfg.in_channels)
        throw shape_error("cnn_forward: input must be [8, X, Y, Z]");
    const auto h1 = tape.relu(tape.add_bias(
        tape.conv3d(input, tape.param(model.k1), model.cfg.padding), tape.param(model.b1)));
    return tape.add_bias(tape.conv3d(h1, tape.param(model.k2), model.cfg.padding),
                         tape.param(model.b2));
}

// Patch input: the four reprojected logit channels stacked with the four
// modality channels, cropped to the bounds.
inline Tensor make_cnn_input(const LogitVolume& lv, const MultiModalVolume& v,
                             const PatchBounds& b) {
    if (!(lv.shape == v.shape)) throw shape_error("make_cnn_input: shape mismatch");
    if (b.empty) throw usage_error("make_cnn_input: empty patch");
    Tensor t({2 * kNumModalities, b.sx(), b.sy(), b.sz()});
    const std::size_t patch_vox = std::size_t(b.sx()) * std::size_t(b.sy()) * std::size_t(b.sz());
    const Shape3 pshape{b.sx(), b.sy(), b.sz()};
    for (int z = b.lo.z; z <= b.hi.z; ++z)
        for (int y = b.lo.y; y <= b.hi.y; ++y)
            for (int x = b.lo.x; x <= b.hi.x; ++x) {
                const std::size_t src = lindex(v.shape, x, y, z);
                const std::size_t dst = lindex(pshape, x - b.lo.x, y - b.lo.y, z - b.lo.z);
                for (int c = 0; c < kNumModalities; ++c) {
                    t.values[std::size_t(c) * patch_vox + dst] =
                        lv.data[std::size_t(c) * v.shape.count() + src];
                    t.values[std::size_t(kNumModalities + c) * patch_vox + dst] =
                        v.channels[std::size_t(c)][src];
                }
            }
    return t;
}

inline std::vector<int> crop_targets(const LabelVolume& l, const PatchBounds& b) {
    std::vector<int> out;
    out.reserve(std::size_t(b.sx()) * std::size_t(b.sy()) * std::size_t(b.sz()));
    for (int z = b.lo.z; z <= b.hi.z; ++z)
        for (int y = b.lo.y; y <= b.hi.y; ++y)
            for (int x = b.lo.x; x <= b.hi.x; ++x)
                out.push_back(int(l.labels[lindex(l.shape, x, y, z)]));
    return out;
}

// ---------------------------------------------------------------------------
// CNN training: logit volumes are fixed inputs (nothing propagates into the
// network that produced them); unweighted voxel cross-entropy on the cropped
// patch; one sample per optimizer step.
// ---------------------------------------------------------------------------

struct CnnCase {
    const LogitVolume* logits = nullptr;
    const MultiModalVolume* image = nullptr;
    const LabelVolume* labels = nullptr;
};

struct CnnTrainResult {
    CnnModel model;
    std::vector<double> epoch_loss;
    bool trained = false;
};

inline CnnTrainResult train_cnn(const std::vector<CnnCase>& cases, const CnnConfig& cfg,
                                std::ostream* log = nullptr) {
    cfg.validate();
    if (cases.empty()) throw usage_error("train_cnn: empty training set");
    for (const auto& c : cases) {
        if (!c.logits || !c.image || !c.labels)
            throw usage_error("train_cnn: incomplete case");
        if (!(c.logits->shape == c.image->shape) || !(c.image->shape == c.labels->shape))
            throw shape_error("train_cnn: case shapes disagree");
    }

    Rng rng(cfg.seed);
    CnnTrainResult res;
    res.model = make_cnn_model<float>(cfg, rng);

    std::vector<int> usable;
    std::vector<PatchBounds> bounds(cases.size());
    for (std::size_t i = 0; i < cases.size(); ++i) {
        bounds[i] = tumor_patch(*cases[i].logits, cfg.crop_margin);
        if (!bounds[i].empty) usable.push_back(int(i));
    }
    if (usable.empty()) {
        std::fprintf(stderr,
                     "warning: no training case predicts any tumor; refinement stays untrained\n");
        return res;
    }

    auto params = res.model.params();
    const std::array<float, kNumClasses> unit_weights{1.0f, 1.0f, 1.0f, 1.0f};
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at_epoch(cfg.lr0, cfg.lr_decay, epoch);
        rng.shuffle(usable);
        double loss_sum = 0.0;
        for (const int i : usable) {
            const auto& b = bounds[std::size_t(i)];
            TapeT<float> tape;
            const auto input =
                tape.input(make_cnn_input(*cases[std::size_t(i)].logits,
                                          *cases[std::size_t(i)].image, b),
                           /*needs_grad=*/false);
            const auto logits = cnn_forward(tape, res.model, input);
            const auto rows = tape.channels_to_rows(logits);
            const auto loss = tape.weighted_cross_entropy(
                rows, crop_targets(*cases[std::size_t(i)].labels, b), unit_weights);
            loss_sum += double(tape.value(loss).values[0]);
            for (auto* p : params) p->zero_grad();
            tape.backward(loss);
            adamw_step(params, lr, cfg.weight_decay);
        }
        res.epoch_loss.push_back(loss_sum / double(usable.size()));
        if (log)
            (*log) << epoch << ", " << format_double(lr) << ", "
                   << format_double(res.epoch_loss.back()) << "\n";
    }
    res.trained = true;
    return res;
}

// CNN logits for one case's patch (inference).
inline Tensor cnn_patch_logits(CnnModel& model, const LogitVolume& lv,
                               const MultiModalVolume& v, const PatchBounds& b) {
    TapeT<float> tape;
    const auto out = cnn_forward(tape, model, tape.input(make_cnn_input(lv, v, b)));
    return tape.value(out);
}

// ---------------------------------------------------------------------------
// Merge: CNN argmax inside the patch (in-brain only), network prediction
// outside, background forced to 0.
// ---------------------------------------------------------------------------

inline LabelVolume merge_predictions(const LabelVolume& gnn_pred, const Tensor& cnn_logits,
                                     const PatchBounds& b,
                                     const std::vector<std::uint8_t>& brain_mask) {
    if (brain_mask.size() != gnn_pred.shape.count())
        throw shape_error("merge_predictions: mask size mismatch");
    LabelVolume out = gnn_pred;
    if (b.empty) return out;
    if (cnn_logits.shape.size() != 4 || cnn_logits.dim(0) != kNumClasses ||
        cnn_logits.dim(1) != b.sx() || cnn_logits.dim(2) != b.sy() ||
        cnn_logits.dim(3) != b.sz())
        throw shape_error("merge_predictions: logits do not match the patch");
    if (b.lo.x < 0 || b.lo.y < 0 || b.lo.z < 0 || b.hi.x >= gnn_pred.shape.x ||
        b.hi.y >= gnn_pred.shape.y || b.hi.z >= gnn_pred.shape.z)
        throw usage_error("merge_predictions: bounds exceed the volume");
    const Shape3 pshape{b.sx(), b.sy(), b.sz()};
    const std::size_t patch_vox = pshape.count();
    for (int z = b.lo.z; z <= b.hi.z; ++z)
        for (int y = b.lo.y; y <= b.hi.y; ++y)
            for (int x = b.lo.x; x <= b.hi.x; ++x) {
                const std::size_t vi = lindex(gnn_pred.shape, x, y, z);
                if (!brain_mask[vi]) {
                    out.labels[vi] = 0;
                    continue;
                }
                const std::size_t pv = lindex(pshape, x - b.lo.x, y - b.lo.y, z - b.lo.z);
                std::array<float, kNumClasses> v;
                for (int c = 0; c < kNumClasses; ++c)
                    v[std::size_t(c)] = cnn_logits.values[std::size_t(c) * patch_vox + pv];
                out.labels[vi] = std::uint8_t(argmax_class(v));
            }
    return out;
}

}  // namespace gseg
