#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "graphseg/common.hpp"
#include "graphseg/supervoxel.hpp"
#include "graphseg/volume.hpp"

namespace gseg {

// ---------------------------------------------------------------------------
// Supervoxel graph: one node per supervoxel, an unweighted undirected edge
// wherever two supervoxels share a voxel face, 20 intensity features per node.
// ---------------------------------------------------------------------------

constexpr int kQuantilesPerModality = 5;
constexpr int kNodeFeatureDim = kNumModalities * kQuantilesPerModality;  // 20
constexpr std::array<double, kQuantilesPerModality> kQuantilePoints{10.0, 30.0, 50.0, 70.0,
                                                                    90.0};

struct BrainGraph {
    int node_count = 0;
    std::vector<float> node_features;  // node-major rows of 20, modality-major within a row
    std::vector<std::uint8_t> node_labels;  // empty when unlabeled
    std::vector<std::pair<std::int32_t, std::int32_t>> edges;  // a < b, sorted, deduplicated
    std::vector<std::int32_t> node_to_supervoxel;

    bool labeled() const { return !node_labels.empty(); }
    const float* features_row(int n) const {
        return node_features.data() + std::size_t(n) * kNodeFeatureDim;
    }
};

inline std::vector<float> compute_node_features(const MultiModalVolume& v,
                                                const SupervoxelPartition& p) {
    if (!(v.shape == p.shape)) throw shape_error("compute_node_features: shape mismatch");
    const int n_nodes = p.count();
    std::vector<float> feats(std::size_t(n_nodes) * kNodeFeatureDim);
    parallel_for(std::size_t(n_nodes), [&](std::size_t s) {
        const auto& mem = p.members[s];
        if (mem.empty()) throw degenerate_input_error("compute_node_features: empty supervoxel");
        std::vector<double> vals(mem.size());
        for (int c = 0; c < kNumModalities; ++c) {
            for (std::size_t i = 0; i < mem.size(); ++i)
                vals[i] = double(v.channels[std::size_t(c)][mem[i]]);
            std::sort(vals.begin(), vals.end());
            for (int q = 0; q < kQuantilesPerModality; ++q) {
                const double f = percentile_sorted(vals, kQuantilePoints[std::size_t(q)]);
                if (!std::isfinite(f))
                    throw numeric_error("compute_node_features: non-finite feature");
                feats[s * kNodeFeatureDim + std::size_t(c) * kQuantilesPerModality +
                      std::size_t(q)] = float(f);
            }
        }
    });
    return feats;
}

// Per-supervoxel mode over in-brain voxels; ties break toward the highest
// class so ambiguous nodes lean tumorous.
inline std::vector<std::uint8_t> compute_node_labels(const SupervoxelPartition& p,
                                                     const LabelVolume& l) {
    if (!(p.shape == l.shape)) throw shape_error("compute_node_labels: shape mismatch");
    std::vector<std::uint8_t> out(std::size_t(p.count()));
    parallel_for(std::size_t(p.count()), [&](std::size_t s) {
        std::array<std::size_t, kNumClasses> hist{};
        for (std::size_t vi : p.members[s]) ++hist[l.labels[vi]];
        int best = 0;
        for (int c = 1; c < kNumClasses; ++c)
            if (hist[std::size_t(c)] >= hist[std::size_t(best)]) best = c;
        out[s] = std::uint8_t(best);
    });
    return out;
}

inline BrainGraph build_graph(const MultiModalVolume& v, const SupervoxelPartition& p,
                              const LabelVolume* l = nullptr) {
    if (p.count() == 0) throw degenerate_input_error("build_graph: partition has no supervoxels");
    BrainGraph g;
    g.node_count = p.count();
    g.node_features = compute_node_features(v, p);
    if (l) g.node_labels = compute_node_labels(p, *l);
    g.node_to_supervoxel.resize(std::size_t(p.count()));
    for (int s = 0; s < p.count(); ++s) g.node_to_supervoxel[std::size_t(s)] = s;

    // face adjacency: scan +x/+y/+z once so each boundary face is seen once
    const Shape3 shp = p.shape;
    std::vector<std::pair<std::int32_t, std::int32_t>> pairs;
    for (int z = 0; z < shp.z; ++z)
        for (int y = 0; y < shp.y; ++y)
            for (int x = 0; x < shp.x; ++x) {
                const std::int32_t a = p.assignment[lindex(shp, x, y, z)];
                if (a < 0) continue;
                const auto visit = [&](std::int32_t b) {
                    if (b < 0 || b == a) return;
                    pairs.emplace_back(std::min(a, b), std::max(a, b));
                };
                if (x + 1 < shp.x) visit(p.assignment[lindex(shp, x + 1, y, z)]);
                if (y + 1 < shp.y) visit(p.assignment[lindex(shp, x, y + 1, z)]);
                if (z + 1 < shp.z) visit(p.assignment[lindex(shp, x, y, z + 1)]);
            }
    std::sort(pairs.begin(), pairs.end());
    pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
    g.edges = std::move(pairs);
    return g;
}

// w_c = N/(4*N_c) over all training nodes, clipped to [0.2, 20]; an absent
// class gets the full clip weight.
inline std::array<double, kNumClasses> compute_class_weights(
    const std::vector<const BrainGraph*>& graphs) {
    if (graphs.empty()) throw usage_error("compute_class_weights: no graphs");
    std::array<std::size_t, kNumClasses> counts{};
    std::size_t total = 0;
    for (const auto* g : graphs) {
        if (!g->labeled()) throw usage_error("compute_class_weights: unlabeled graph");
        for (const auto lab : g->node_labels) {
            if (lab >= kNumClasses) throw data_error("compute_class_weights: label out of range");
            ++counts[lab];
            ++total;
        }
    }
    if (total == 0) throw usage_error("compute_class_weights: graphs have no nodes");
    std::array<double, kNumClasses> w{};
    for (int c = 0; c < kNumClasses; ++c) {
        const auto n_c = counts[std::size_t(c)];
        w[std::size_t(c)] =
            n_c == 0 ? 20.0
                     : std::clamp(double(total) / (4.0 * double(n_c)), 0.2, 20.0);
    }
    return w;
}

// ---------------------------------------------------------------------------
// Serialization: "BGR1" + node count + f32 feature matrix + labels +
// edge list + node_to_supervoxel map.
// ---------------------------------------------------------------------------

inline void save_graph(const std::string& path, const BrainGraph& g) {
    std::filesystem::path fp(path);
    if (fp.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(fp.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write graph: " + path);
    out.write("BGR1", 4);
    const auto put_u32 = [&](std::uint32_t x) {
        out.write(reinterpret_cast<const char*>(&x), 4);
    };
    put_u32(std::uint32_t(g.node_count));
    put_u32(std::uint32_t(kNodeFeatureDim));
    out.write(reinterpret_cast<const char*>(g.node_features.data()),
              std::streamsize(g.node_features.size() * sizeof(float)));
    put_u32(g.labeled() ? 1u : 0u);
    if (g.labeled())
        out.write(reinterpret_cast<const char*>(g.node_labels.data()),
                  std::streamsize(g.node_labels.size()));
    put_u32(std::uint32_t(g.edges.size()));
    for (const auto& [a, b] : g.edges) {
        out.write(reinterpret_cast<const char*>(&a), 4);
        out.write(reinterpret_cast<const char*>(&b), 4);
    }
    out.write(reinterpret_cast<const char*>(g.node_to_supervoxel.data()),
              std::streamsize(g.node_to_supervoxel.size() * sizeof(std::int32_t)));
    if (!out.good()) throw io_error("graph write failed: " + path);
}

inline BrainGraph load_graph(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open graph: " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "BGR1", 4) != 0)
        throw format_error("bad graph magic: " + path);
    const auto get_u32 = [&]() {
        std::uint32_t x;
        if (!in.read(reinterpret_cast<char*>(&x), 4))
            throw format_error("graph truncated: " + path);
        return x;
    };
    BrainGraph g;
    g.node_count = int(get_u32());
    const std::uint32_t dim = get_u32();
    if (dim != std::uint32_t(kNodeFeatureDim))
        throw format_error("graph feature dim mismatch: " + path);
    g.node_features.resize(std::size_t(g.node_count) * kNodeFeatureDim);
    if (!in.read(reinterpret_cast<char*>(g.node_features.data()),
                 std::streamsize(g.node_features.size() * sizeof(float))))
        throw format_error("graph features truncated: " + path);
    if (get_u32() != 0) {
        g.node_labels.resize(std::size_t(g.node_count));
        if (!in.read(reinterpret_cast<char*>(g.node_labels.data()),
                     std::streamsize(g.node_labels.size())))
            throw format_error("graph labels truncated: " + path);
        for (const auto lab : g.node_labels)
            if (lab >= kNumClasses) throw format_error("graph label out of range: " + path);
    }
    const std::uint32_t n_edges = get_u32();
    g.edges.resize(n_edges);
    for (auto& [a, b] : g.edges) {
        if (!in.read(reinterpret_cast<char*>(&a), 4) ||
            !in.read(reinterpret_cast<char*>(&b), 4))
            throw format_error("graph edges truncated: " + path);
        if (a < 0 || b < 0 || a >= g.node_count || b >= g.node_count || a >= b)
            throw format_error("graph edge malformed: " + path);
    }
    g.node_to_supervoxel.resize(std::size_t(g.node_count));
    if (!in.read(reinterpret_cast<char*>(g.node_to_supervoxel.data()),
                 std::streamsize(g.node_to_supervoxel.size() * sizeof(std::int32_t))))
        throw format_error("graph node map truncated: " + path);
    return g;
}

}  // namespace gseg
