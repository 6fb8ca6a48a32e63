#pragma once

// Batch drivers behind the CLI: preprocess -> supervoxels -> graphs -> node
// classifier -> reprojection/crop -> voxel refiner -> merged prediction ->
// evaluation. Intermediate artifacts are cached on disk keyed by content
// hash; commands never write into their input directories.

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "graphseg/common.hpp"
#include "graphseg/config.hpp"
#include "graphseg/graph.hpp"
#include "graphseg/gnn.hpp"
#include "graphseg/metrics.hpp"
#include "graphseg/nifti.hpp"
#include "graphseg/phantom.hpp"
#include "graphseg/refine.hpp"
#include "graphseg/supervoxel.hpp"
#include "graphseg/volume.hpp"

namespace gseg {

// ---------------------------------------------------------------------------
// Artifact layout
// ---------------------------------------------------------------------------

inline std::string manifest_path(const std::string& dir) { return dir + "/manifest.txt"; }
inline std::string dataset_stats_path(const std::string& dir) {
    return dir + "/dataset_stats.txt";
}

inline std::array<std::string, kNumModalities> pre_image_paths(const std::string& dir,
                                                               const std::string& id) {
    std::array<std::string, kNumModalities> p;
    for (int c = 0; c < kNumModalities; ++c)
        p[c] = dir + "/" + id + "/" + id + "_pre_" + kModalitySuffix[c] + ".nii.gz";
    return p;
}
inline std::string pre_mask_path(const std::string& dir, const std::string& id) {
    return dir + "/" + id + "/" + id + "_mask.nii.gz";
}
inline std::string pre_seg_path(const std::string& dir, const std::string& id) {
    return dir + "/" + id + "/" + id + "_seg.nii.gz";
}
inline std::string pre_geom_path(const std::string& dir, const std::string& id) {
    return dir + "/" + id + "/" + id + "_geom.txt";
}
inline std::string pre_refhdr_path(const std::string& dir, const std::string& id) {
    return dir + "/" + id + "/" + id + "_refhdr.bin";
}

inline std::string cache_dir_path(const std::string& out_dir) { return out_dir + "/cache"; }
inline std::string gnn_checkpoint_path(const std::string& out_dir) {
    return out_dir + "/gnn.ckpt";
}
inline std::string cnn_checkpoint_path(const std::string& out_dir) {
    return out_dir + "/cnn.ckpt";
}
inline std::string gnn_log_path(const std::string& out_dir) {
    return out_dir + "/gnn_train_log.txt";
}
inline std::string cnn_log_path(const std::string& out_dir) {
    return out_dir + "/cnn_train_log.txt";
}
inline std::string resolved_config_path(const std::string& out_dir) {
    return out_dir + "/config_resolved.txt";
}
inline std::string prediction_path(const std::string& dir, const std::string& id) {
    return dir + "/" + id + "_pred.nii.gz";
}
inline std::string bounds_path(const std::string& dir, const std::string& id) {
    return dir + "/" + id + "_bounds.txt";
}

// ---------------------------------------------------------------------------
// Small shared helpers
// ---------------------------------------------------------------------------

namespace pipeline_detail {

// parallel_for whose body may throw: exceptions are captured per index and
// the lowest-index one is rethrown after the join, so failures are
// deterministic under any job count.
template <typename Fn>
void parallel_cases(std::size_t n, Fn&& fn) {
    std::vector<std::exception_ptr> errors(n);
    parallel_for(n, [&](std::size_t i) {
        try {
            fn(i);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    });
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::vector<unsigned char> read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open: " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace pipeline_detail

inline std::vector<ManifestEntry> filter_split(const std::vector<ManifestEntry>& entries,
                                               const std::string& split) {
    if (split != "all" && split != "train" && split != "val")
        throw usage_error("split must be train, val, or all: " + split);
    if (split == "all") return entries;
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
        if (e.split == split) out.push_back(e);
    if (out.empty()) throw data_error("manifest has no cases in split " + split);
    return out;
}

// Raw segmentation values {0,1,2,4} map to internal classes {0,1,2,3}.
inline LabelVolume read_label_volume(const std::string& path,
                                     std::array<double, 3>* spacing_out = nullptr) {
    nifti::Image img = nifti::read(path);
    LabelVolume l;
    l.shape = img.shape;
    l.labels.resize(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const float f = img.data[i];
        if (f != 0.0f && f != 1.0f && f != 2.0f && f != 4.0f)
            throw data_error("label value outside {0,1,2,4} in " + path);
        l.labels[i] = (f == 4.0f) ? 3 : std::uint8_t(f);
    }
    if (spacing_out) *spacing_out = img.spacing;
    return l;
}

inline void save_dataset_stats(const std::string& path, const DatasetStats& s) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write dataset stats: " + path);
    out << "mean =";
    for (double v : s.mean) out << ' ' << format_double(v);
    out << "\nstddev =";
    for (double v : s.stddev) out << ' ' << format_double(v);
    out << "\ncorpus_size = " << s.corpus_size << "\n";
    if (!out.good()) throw io_error("dataset stats write failed: " + path);
}

inline DatasetStats load_dataset_stats(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open dataset stats: " + path);
    DatasetStats s;
    std::string key, eq;
    if (!(in >> key >> eq) || key != "mean" || eq != "=")
        throw format_error("dataset stats: expected mean: " + path);
    for (auto& v : s.mean)
        if (!(in >> v)) throw format_error("dataset stats: bad mean: " + path);
    if (!(in >> key >> eq) || key != "stddev" || eq != "=")
        throw format_error("dataset stats: expected stddev: " + path);
    for (auto& v : s.stddev)
        if (!(in >> v)) throw format_error("dataset stats: bad stddev: " + path);
    if (!(in >> key >> eq >> s.corpus_size) || key != "corpus_size" || eq != "=")
        throw format_error("dataset stats: expected corpus_size: " + path);
    return s;
}

inline void save_geometry(const std::string& path, const MultiModalVolume& v) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write geometry: " + path);
    out << "original_shape = " << v.original_shape.x << ' ' << v.original_shape.y << ' '
        << v.original_shape.z << "\n"
        << "origin_offset = " << v.origin_offset.x << ' ' << v.origin_offset.y << ' '
        << v.origin_offset.z << "\n"
        << "spacing = " << format_double(v.spacing[0]) << ' ' << format_double(v.spacing[1])
        << ' ' << format_double(v.spacing[2]) << "\n";
    if (!out.good()) throw io_error("geometry write failed: " + path);
}

inline void load_geometry(const std::string& path, MultiModalVolume& v) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open geometry: " + path);
    std::string key, eq;
    if (!(in >> key >> eq >> v.original_shape.x >> v.original_shape.y >>
          v.original_shape.z) ||
        key != "original_shape" || eq != "=")
        throw format_error("geometry: expected original_shape: " + path);
    if (!(in >> key >> eq >> v.origin_offset.x >> v.origin_offset.y >> v.origin_offset.z) ||
        key != "origin_offset" || eq != "=")
        throw format_error("geometry: expected origin_offset: " + path);
    if (!(in >> key >> eq >> v.spacing[0] >> v.spacing[1] >> v.spacing[2]) ||
        key != "spacing" || eq != "=")
        throw format_error("geometry: expected spacing: " + path);
}

// ---------------------------------------------------------------------------
// Preprocess: crop -> rescale -> standardize with train-split statistics.
// ---------------------------------------------------------------------------

inline void run_preprocess(const std::string& data_dir, const std::string& out_dir,
                           const PipelineConfig& cfg) {
    const auto entries = read_manifest(manifest_path(data_dir));
    const std::size_t n = entries.size();
    std::filesystem::create_directories(out_dir);

    std::vector<MultiModalVolume> vols(n);
    std::vector<LabelVolume> labs(n);
    std::vector<std::vector<unsigned char>> refhdr(n);
    pipeline_detail::parallel_cases(n, [&](std::size_t i) {
        const std::string& id = entries[i].case_id;
        const std::string case_dir = data_dir + "/" + id;
        const auto img_paths = case_image_paths(case_dir, id);
        const std::string lab_path = case_label_path(case_dir, id);
        const bool has_labels = std::filesystem::exists(lab_path);
        auto [v, l] = load_case(img_paths, has_labels ? lab_path : std::string{});
        refhdr[i] = nifti::read(img_paths[0]).header_bytes;
        auto [cv, cl] = crop_to_brain_bbox(v, has_labels ? &l : nullptr);
        vols[i] = rescale_by_percentile(cv, cfg.rescale_pct);
        labs[i] = std::move(cl);
    });

    // Leakage guard: statistics come exclusively from the train split and are
    // applied to every split.
    std::vector<const MultiModalVolume*> train_vols;
    for (std::size_t i = 0; i < n; ++i)
        if (entries[i].split == "train") train_vols.push_back(&vols[i]);
    if (train_vols.empty()) throw data_error("preprocess: manifest has no train cases");
    const DatasetStats stats = compute_dataset_stats(train_vols);

    pipeline_detail::parallel_cases(n, [&](std::size_t i) {
        const std::string& id = entries[i].case_id;
        std::filesystem::create_directories(out_dir + "/" + id);
        const MultiModalVolume sv = standardize(vols[i], stats);
        const auto out_paths = pre_image_paths(out_dir, id);
        for (int c = 0; c < kNumModalities; ++c)
            nifti::write(out_paths[c], sv.shape, sv.spacing, sv.channels[c],
                         nifti::kDtFloat32);
        nifti::write(pre_mask_path(out_dir, id), sv.shape, sv.spacing, sv.brain_mask,
                     nifti::kDtUint8);
        if (!labs[i].labels.empty()) {
            std::vector<std::uint8_t> raw(labs[i].labels.size());
            for (std::size_t k = 0; k < raw.size(); ++k)
                raw[k] = (labs[i].labels[k] == 3) ? 4 : labs[i].labels[k];
            nifti::write(pre_seg_path(out_dir, id), labs[i].shape, sv.spacing, raw,
                         nifti::kDtUint8);
        }
        save_geometry(pre_geom_path(out_dir, id), sv);
        nifti::write_file_raw(pre_refhdr_path(out_dir, id), refhdr[i]);
    });

    save_dataset_stats(dataset_stats_path(out_dir), stats);
    std::filesystem::copy_file(manifest_path(data_dir), manifest_path(out_dir),
                               std::filesystem::copy_options::overwrite_existing);
}

struct PreprocessedCase {
    std::string id;
    MultiModalVolume volume;  // cropped + standardized; mask from the mask file
    LabelVolume labels;       // empty when the case has no segmentation
    std::vector<unsigned char> reference_header;
};

inline PreprocessedCase load_preprocessed_case(const std::string& dir, const std::string& id,
                                               bool require_labels) {
    PreprocessedCase c;
    c.id = id;
    const auto paths = pre_image_paths(dir, id);
    for (int ch = 0; ch < kNumModalities; ++ch) {
        nifti::Image img = nifti::read(paths[ch]);
        if (ch == 0) {
            c.volume.shape = img.shape;
            c.volume.spacing = img.spacing;
        } else if (!(img.shape == c.volume.shape)) {
            throw consistency_error("preprocessed modality shape mismatch: " + paths[ch]);
        }
        c.volume.channels[ch] = std::move(img.data);
    }
    {
        nifti::Image mask = nifti::read(pre_mask_path(dir, id));
        if (!(mask.shape == c.volume.shape))
            throw consistency_error("mask shape mismatch: " + pre_mask_path(dir, id));
        c.volume.brain_mask.resize(mask.data.size());
        for (std::size_t i = 0; i < mask.data.size(); ++i)
            c.volume.brain_mask[i] = mask.data[i] != 0.0f ? 1 : 0;
    }
    load_geometry(pre_geom_path(dir, id), c.volume);
    const std::string seg = pre_seg_path(dir, id);
    if (std::filesystem::exists(seg)) {
        c.labels = read_label_volume(seg);
        if (!(c.labels.shape == c.volume.shape))
            throw consistency_error("label shape mismatch: " + seg);
    } else if (require_labels) {
        throw data_error("case " + id + " has no segmentation: " + seg);
    }
    const std::string hdr = pre_refhdr_path(dir, id);
    if (std::filesystem::exists(hdr)) c.reference_header = pipeline_detail::read_bytes(hdr);
    return c;
}

// ---------------------------------------------------------------------------
// Content-hash cache for partitions, graphs, and logit volumes.
// ---------------------------------------------------------------------------

namespace pipeline_detail {

inline std::uint64_t volume_hash(const MultiModalVolume& v) {
    Fnv1a h;
    h.update_pod(v.shape);
    h.update_pod(v.spacing);
    for (int c = 0; c < kNumModalities; ++c) h.update_vec(v.channels[c]);
    h.update_vec(v.brain_mask);
    return h.digest();
}

inline std::uint64_t partition_key(std::uint64_t vol_hash, int k, double m, int iters,
                                   std::uint64_t seed) {
    Fnv1a h;
    h.update_pod(vol_hash);
    h.update_pod(k);
    h.update_pod(m);
    h.update_pod(iters);
    h.update_pod(seed);
    return h.digest();
}

}  // namespace pipeline_detail

// Load-or-compute wrappers. The key folds in every input the artifact depends
// on, so stale entries are unreachable rather than invalidated.
inline SupervoxelPartition partition_for_case(const std::string& cache_dir,
                                              const std::string& id,
                                              const MultiModalVolume& v,
                                              const PipelineConfig& cfg,
                                              std::uint64_t* key_out = nullptr) {
    const std::uint64_t key = pipeline_detail::partition_key(
        pipeline_detail::volume_hash(v), cfg.slic_k, cfg.slic_m, cfg.slic_iters, cfg.seed);
    if (key_out) *key_out = key;
    const std::string path =
        cache_dir + "/" + id + "_part_" + pipeline_detail::hash_hex(key) + ".svp";
    if (std::filesystem::exists(path)) {
        SupervoxelPartition p = load_partition(path);
        if (!(p.shape == v.shape))
            throw consistency_error("cached partition shape mismatch: " + path);
        return p;
    }
    SupervoxelPartition p = slic_partition(v, cfg.slic_k, cfg.slic_m, cfg.slic_iters, cfg.seed);
    std::filesystem::create_directories(cache_dir);
    save_partition(path, p);
    return p;
}

inline BrainGraph graph_for_case(const std::string& cache_dir, const std::string& id,
                                 const MultiModalVolume& v, const SupervoxelPartition& p,
                                 const LabelVolume* labels, std::uint64_t partition_key,
                                 std::uint64_t* key_out = nullptr) {
    Fnv1a h;
    h.update_pod(partition_key);
    const bool labeled = labels != nullptr;
    h.update_pod(labeled);
    if (labeled) h.update_vec(labels->labels);
    const std::uint64_t key = h.digest();
    if (key_out) *key_out = key;
    const std::string path =
        cache_dir + "/" + id + "_graph_" + pipeline_detail::hash_hex(key) + ".bgr";
    if (std::filesystem::exists(path)) return load_graph(path);
    BrainGraph g = build_graph(v, p, labels);
    std::filesystem::create_directories(cache_dir);
    save_graph(path, g);
    return g;
}

inline void save_logit_volume(const std::string& path, const LogitVolume& lv) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write logit volume: " + path);
    out.write("LGV1", 4);
    const std::int32_t dims[3] = {lv.shape.x, lv.shape.y, lv.shape.z};
    out.write(reinterpret_cast<const char*>(dims), sizeof dims);
    out.write(reinterpret_cast<const char*>(lv.data.data()),
              std::streamsize(lv.data.size() * sizeof(float)));
    if (!out.good()) throw io_error("logit volume write failed: " + path);
}

inline LogitVolume load_logit_volume(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open logit volume: " + path);
    char magic[4];
    std::int32_t dims[3];
    if (!in.read(magic, 4) || std::memcmp(magic, "LGV1", 4) != 0)
        throw format_error("bad logit volume magic: " + path);
    if (!in.read(reinterpret_cast<char*>(dims), sizeof dims) || dims[0] <= 0 ||
        dims[1] <= 0 || dims[2] <= 0)
        throw format_error("bad logit volume dims: " + path);
    LogitVolume lv;
    lv.shape = {dims[0], dims[1], dims[2]};
    lv.data.resize(std::size_t(kNumClasses) * lv.shape.count());
    if (!in.read(reinterpret_cast<char*>(lv.data.data()),
                 std::streamsize(lv.data.size() * sizeof(float))))
        throw format_error("truncated logit volume: " + path);
    return lv;
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

inline GnnModel load_gnn_model(const std::string& path, const PipelineConfig& cfg) {
    Rng rng(0);
    GnnModel model = make_gnn_model<float>(cfg.gnn_config(), rng);
    load_checkpoint(path, model.params());
    return model;
}

inline CnnModel load_cnn_model(const std::string& path, const PipelineConfig& cfg) {
    Rng rng(0);
    CnnModel model = make_cnn_model<float>(cfg.cnn_config(), rng);
    load_checkpoint(path, model.params());
    return model;
}

inline void run_train(const std::string& data_dir, const std::string& out_dir,
                      const PipelineConfig& cfg, const std::string& stage) {
    if (stage != "gnn" && stage != "cnn" && stage != "both")
        throw usage_error("stage must be gnn, cnn, or both: " + stage);
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    const std::string cache = cache_dir_path(out_dir);
    std::filesystem::create_directories(cache);
    {
        PipelineConfig resolved = cfg;
        resolved.data_dir = data_dir;
        resolved.out_dir = out_dir;
        save_config(resolved_config_path(out_dir), resolved);
    }

    const auto entries = filter_split(read_manifest(manifest_path(data_dir)), "train");
    const std::size_t n = entries.size();
    std::vector<PreprocessedCase> cases(n);
    pipeline_detail::parallel_cases(n, [&](std::size_t i) {
        cases[i] = load_preprocessed_case(data_dir, entries[i].case_id, true);
    });

    std::vector<SupervoxelPartition> parts(n);
    std::vector<BrainGraph> graphs(n);
    std::vector<std::uint64_t> graph_keys(n);
    for (std::size_t i = 0; i < n; ++i) {  // serial: the heavy ops parallelize inside
        std::uint64_t pkey = 0;
        parts[i] = partition_for_case(cache, cases[i].id, cases[i].volume, cfg, &pkey);
        graphs[i] = graph_for_case(cache, cases[i].id, cases[i].volume, parts[i],
                                   &cases[i].labels, pkey, &graph_keys[i]);
    }

    if (stage == "gnn" || stage == "both") {
        std::vector<const BrainGraph*> gp;
        for (const auto& g : graphs) gp.push_back(&g);
        std::ofstream log(gnn_log_path(out_dir), std::ios::binary);
        if (!log) throw io_error("cannot write training log in " + out_dir);
        GnnTrainResult res = train_gnn(gp, cfg.gnn_config(), &log);
        const auto& cm = res.model;
        save_checkpoint(gnn_checkpoint_path(out_dir), cm.params(), cfg.gnn_epochs);
    }

    if (stage == "cnn" || stage == "both") {
        const std::string gnn_path = gnn_checkpoint_path(out_dir);
        if (!std::filesystem::exists(gnn_path))
            throw usage_error("no GNN checkpoint at " + gnn_path +
                              "; run --stage gnn (or both) into this output directory first");
        const auto ckpt_bytes = pipeline_detail::read_bytes(gnn_path);
        Fnv1a ch;
        ch.update(ckpt_bytes.data(), ckpt_bytes.size());
        const std::uint64_t ckpt_hash = ch.digest();

        GnnModel gnn;  // loaded only if some logit volume is not cached
        bool gnn_loaded = false;
        std::vector<LogitVolume> logits(n);
        for (std::size_t i = 0; i < n; ++i) {
            Fnv1a h;
            h.update_pod(graph_keys[i]);
            h.update_pod(ckpt_hash);
            const std::string path = cache + "/" + cases[i].id + "_logits_" +
                                     pipeline_detail::hash_hex(h.digest()) + ".lgv";
            if (std::filesystem::exists(path)) {
                logits[i] = load_logit_volume(path);
                if (!(logits[i].shape == cases[i].volume.shape))
                    throw consistency_error("cached logit volume shape mismatch: " + path);
                continue;
            }
            if (!gnn_loaded) {
                gnn = load_gnn_model(gnn_path, cfg);
                gnn_loaded = true;
            }
            const auto node_logits = gnn_node_logits(gnn, graphs[i]);
            logits[i] = reproject_logits(node_logits, parts[i]);
            save_logit_volume(path, logits[i]);
        }

        std::vector<CnnCase> cnn_cases(n);
        for (std::size_t i = 0; i < n; ++i)
            cnn_cases[i] = {&logits[i], &cases[i].volume, &cases[i].labels};
        std::ofstream log(cnn_log_path(out_dir), std::ios::binary);
        if (!log) throw io_error("cannot write training log in " + out_dir);
        CnnTrainResult res = train_cnn(cnn_cases, cfg.cnn_config(), &log);
        const auto& cm = res.model;
        save_checkpoint(cnn_checkpoint_path(out_dir), cm.params(), cfg.cnn_epochs);
    }
}

// ---------------------------------------------------------------------------
// Prediction driver
// ---------------------------------------------------------------------------

inline void run_predict(const std::string& data_dir, const std::string& gnn_ckpt,
                        const std::string& cnn_ckpt, const std::string& out_dir,
                        const PipelineConfig& cfg, const std::string& split = "all") {
    cfg.validate();
    const auto entries = filter_split(read_manifest(manifest_path(data_dir)), split);
    std::filesystem::create_directories(out_dir);
    const std::string cache = cache_dir_path(out_dir);
    std::filesystem::create_directories(cache);

    GnnModel gnn = load_gnn_model(gnn_ckpt, cfg);
    CnnModel cnn;
    const bool joint = !cnn_ckpt.empty();
    if (joint) cnn = load_cnn_model(cnn_ckpt, cfg);

    for (const auto& entry : entries) {
        const auto c = load_preprocessed_case(data_dir, entry.case_id, false);
        std::uint64_t pkey = 0;
        const auto part = partition_for_case(cache, c.id, c.volume, cfg, &pkey);
        const auto g = graph_for_case(cache, c.id, c.volume, part, nullptr, pkey);
        const auto node_logits = gnn_node_logits(gnn, g);
        LabelVolume pred = labels_from_nodes(gnn_predict(gnn, g), part);

        if (joint) {
            const LogitVolume lv = reproject_logits(node_logits, part);
            const PatchBounds b = tumor_patch(lv, cfg.cnn_crop_margin);
            {
                // Bounds are reported in the original (pre-crop) voxel grid.
                std::ofstream bf(bounds_path(out_dir, c.id), std::ios::binary);
                if (!bf) throw io_error("cannot write bounds in " + out_dir);
                if (b.empty) {
                    bf << "empty\n";
                } else {
                    bf << b.lo.x + c.volume.origin_offset.x << ' '
                       << b.lo.y + c.volume.origin_offset.y << ' '
                       << b.lo.z + c.volume.origin_offset.z << ' '
                       << b.hi.x + c.volume.origin_offset.x << ' '
                       << b.hi.y + c.volume.origin_offset.y << ' '
                       << b.hi.z + c.volume.origin_offset.z << '\n';
                }
                if (!bf.good()) throw io_error("bounds write failed in " + out_dir);
            }
            if (!b.empty) {
                const Tensor patch_logits = cnn_patch_logits(cnn, lv, c.volume, b);
                pred = merge_predictions(pred, patch_logits, b, c.volume.brain_mask);
            }
        }

        export_prediction(prediction_path(out_dir, c.id), pred, c.volume.original_shape,
                          c.volume.origin_offset, c.volume.spacing, c.reference_header);
    }
}

// ---------------------------------------------------------------------------
// Evaluation driver
// ---------------------------------------------------------------------------

inline std::vector<std::pair<std::string, CaseReport>> run_evaluate(
    const std::string& pred_dir, const std::string& truth_dir, const std::string& out_file,
    const std::string& split = "all", double penalty = kDefaultHdPenalty) {
    const auto entries = filter_split(read_manifest(manifest_path(truth_dir)), split);
    const std::size_t n = entries.size();
    std::vector<std::pair<std::string, CaseReport>> cases(n);
    pipeline_detail::parallel_cases(n, [&](std::size_t i) {
        const std::string& id = entries[i].case_id;
        const std::string truth_path = case_label_path(truth_dir + "/" + id, id);
        std::array<double, 3> spacing{1.0, 1.0, 1.0};
        const LabelVolume truth = read_label_volume(truth_path, &spacing);
        const std::string pred_path = prediction_path(pred_dir, id);
        if (!std::filesystem::exists(pred_path)) {
            cases[i] = {id, missing_case_report(penalty)};
            return;
        }
        const LabelVolume pred = read_label_volume(pred_path);
        if (!(pred.shape == truth.shape))
            throw consistency_error("prediction shape mismatch for case " + id);
        cases[i] = {id, evaluate_case(pred, truth, spacing, penalty)};
    });

    std::ofstream out(out_file, std::ios::binary);
    if (!out) throw io_error("cannot write report: " + out_file);
    write_report(out, cases);
    if (!out.good()) throw io_error("report write failed: " + out_file);
    return cases;
}

// ---------------------------------------------------------------------------
// Supervoxel tuning driver
// ---------------------------------------------------------------------------

inline void write_asa_table(std::ostream& os, const GridSearchResult& res) {
    os << "k,m,mean_asa,best\n";
    for (const auto& cell : res.table)
        os << cell.k << ',' << format_double(cell.m) << ',' << format_double(cell.mean_asa)
           << ',' << ((cell.k == res.best_k && cell.m == res.best_m) ? "*" : "") << '\n';
}

inline GridSearchResult run_tune_slic(const std::string& data_dir,
                                      const std::vector<int>& k_grid,
                                      const std::vector<double>& m_grid,
                                      const std::string& out_file,
                                      const PipelineConfig& cfg,
                                      const std::string& split = "train") {
    const auto entries = filter_split(read_manifest(manifest_path(data_dir)), split);
    const std::size_t n = entries.size();
    std::vector<PreprocessedCase> cases(n);
    pipeline_detail::parallel_cases(n, [&](std::size_t i) {
        cases[i] = load_preprocessed_case(data_dir, entries[i].case_id, true);
    });
    std::vector<std::pair<const MultiModalVolume*, const LabelVolume*>> pairs;
    for (const auto& c : cases) pairs.emplace_back(&c.volume, &c.labels);

    const GridSearchResult res =
        slic_grid_search(pairs, k_grid, m_grid, cfg.slic_iters, cfg.seed);

    std::ofstream out(out_file, std::ios::binary);
    if (!out) throw io_error("cannot write ASA table: " + out_file);
    write_asa_table(out, res);
    if (!out.good()) throw io_error("ASA table write failed: " + out_file);
    return res;
}

}  // namespace gseg
