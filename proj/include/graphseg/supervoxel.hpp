#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "graphseg/common.hpp"
#include "graphseg/volume.hpp"

namespace gseg {

// ---------------------------------------------------------------------------
// Multi-channel 3D SLIC restricted to the brain mask: the center grid is
// sized from the in-brain voxel count, centers landing on unmasked voxels are
// dropped, and clustering assigns in-brain voxels only. Post-passes discard
// any supervoxel that ends up mostly unmasked, re-attach orphaned in-brain
// voxels to the nearest surviving supervoxel, enforce 6-connectivity, and
// compact ids.
// ---------------------------------------------------------------------------

struct SupervoxelPartition {
    Shape3 shape;
    std::vector<std::int32_t> assignment;  // supervoxel id per voxel, -1 out-of-brain
    std::vector<std::vector<std::size_t>> members;  // id -> in-brain voxel linear indices
    int k_requested = 0;
    double m = 0.0;
    double grid_spacing = 0.0;  // the SLIC S value
    int iterations = 0;
    std::uint64_t seed = 0;

    int count() const { return int(members.size()); }
};

namespace sv_detail {

constexpr std::array<std::array<int, 3>, 6> kFaceNeighbors{{
    {1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1},
}};

struct Center {
    std::array<double, kNumModalities> intensity;
    std::array<double, 3> pos;
    // update accumulators
    std::array<double, kNumModalities> sum_i;
    std::array<double, 3> sum_p;
    std::size_t n = 0;
};

// Squared intensity-gradient magnitude summed over channels; central
// differences clamped at the border.
inline double gradient_mag2(const MultiModalVolume& v, int x, int y, int z) {
    double g = 0.0;
    for (int c = 0; c < kNumModalities; ++c) {
        const auto sample = [&](int xx, int yy, int zz) {
            xx = std::clamp(xx, 0, v.shape.x - 1);
            yy = std::clamp(yy, 0, v.shape.y - 1);
            zz = std::clamp(zz, 0, v.shape.z - 1);
            return double(v.channels[std::size_t(c)][lindex(v.shape, xx, yy, zz)]);
        };
        const double gx = sample(x + 1, y, z) - sample(x - 1, y, z);
        const double gy = sample(x, y + 1, z) - sample(x, y - 1, z);
        const double gz = sample(x, y, z + 1) - sample(x, y, z - 1);
        g += gx * gx + gy * gy + gz * gz;
    }
    return g;
}

// Largest-first fragment bookkeeping for the connectivity pass.
struct Fragment {
    std::vector<std::size_t> voxels;
    std::size_t min_index;
};

}  // namespace sv_detail

inline SupervoxelPartition slic_partition(const MultiModalVolume& v, int k, double m,
                                          int max_iter = 10, std::uint64_t seed = 0) {
    using sv_detail::Center;
    if (k < 1) throw usage_error("slic_partition: k must be >= 1");
    if (!(m > 0.0)) throw usage_error("slic_partition: m must be positive");
    const Shape3 shp = v.shape;
    const std::size_t n_vox = shp.count();
    const std::size_t n_in = v.mask_count();
    if (n_in == 0) throw degenerate_input_error("slic_partition: empty brain mask");
    if (std::size_t(k) > n_in) {
        std::fprintf(stderr, "warning: slic k=%d exceeds in-brain voxel count %zu; clamped\n",
                     k, n_in);
        k = int(n_in);
    }

    const double S = std::cbrt(double(n_in) / double(k));

    // --- initialization: balanced grid, snapped away from edges -----------
    std::vector<Center> centers;
    {
        std::array<std::vector<int>, 3> axis_pos;
        const std::array<int, 3> dims{shp.x, shp.y, shp.z};
        for (int a = 0; a < 3; ++a) {
            const int n_a = std::max(1, int(std::lround(double(dims[std::size_t(a)]) / S)));
            const double step = double(dims[std::size_t(a)]) / double(n_a);
            for (int j = 0; j < n_a; ++j) {
                const int p = std::clamp(int(std::lround((j + 0.5) * step - 0.5)), 0,
                                         dims[std::size_t(a)] - 1);
                axis_pos[std::size_t(a)].push_back(p);
            }
        }
        std::vector<char> taken(n_vox, 0);  // voxels already used by a center
        for (int z : axis_pos[2])
            for (int y : axis_pos[1])
                for (int x : axis_pos[0]) {
                    int bx = x, by = y, bz = z;
                    if (S >= 2.0) {
                        // snap to the lowest-gradient voxel in the 3^3 box
                        double best = std::numeric_limits<double>::infinity();
                        for (int dz = -1; dz <= 1; ++dz)
                            for (int dy = -1; dy <= 1; ++dy)
                                for (int dx = -1; dx <= 1; ++dx) {
                                    const int xx = x + dx, yy = y + dy, zz = z + dz;
                                    if (xx < 0 || yy < 0 || zz < 0 || xx >= shp.x ||
                                        yy >= shp.y || zz >= shp.z)
                                        continue;
                                    const double g = sv_detail::gradient_mag2(v, xx, yy, zz);
                                    if (g < best) {
                                        best = g;
                                        bx = xx;
                                        by = yy;
                                        bz = zz;
                                    }
                                }
                    }
                    const std::size_t vi = lindex(shp, bx, by, bz);
                    if (!v.brain_mask[vi]) continue;  // centers on unmasked voxels dropped
                    if (taken[vi]) continue;
                    taken[vi] = 1;
                    Center c;
                    for (int ch = 0; ch < kNumModalities; ++ch)
                        c.intensity[std::size_t(ch)] = v.channels[std::size_t(ch)][vi];
                    c.pos = {double(bx), double(by), double(bz)};
                    centers.push_back(c);
                }
    }
    if (centers.empty())
        throw degenerate_input_error("slic_partition: no usable cluster centers");

    // --- k-means iterations -------------------------------------------------
    std::vector<std::int32_t> assignment(n_vox, -1);
    const double inv_s2_m2 = (m * m) / (S * S);
    int iterations = 0;

    // Spatial hash of centers, cell edge S; a voxel's candidates live in the
    // 3^3 cells around it because the window is +-S per axis.
    const int cx = std::max(1, int(std::ceil(shp.x / S)));
    const int cy = std::max(1, int(std::ceil(shp.y / S)));
    const int cz = std::max(1, int(std::ceil(shp.z / S)));
    const auto cell_of = [&](double px, double py, double pz) {
        const int ix = std::clamp(int(px / S), 0, cx - 1);
        const int iy = std::clamp(int(py / S), 0, cy - 1);
        const int iz = std::clamp(int(pz / S), 0, cz - 1);
        return (std::size_t(iz) * std::size_t(cy) + std::size_t(iy)) * std::size_t(cx) +
               std::size_t(ix);
    };

    for (int iter = 0; iter < max_iter; ++iter) {
        ++iterations;
        std::vector<std::vector<int>> buckets(std::size_t(cx) * std::size_t(cy) *
                                              std::size_t(cz));
        for (int ci = 0; ci < int(centers.size()); ++ci)
            buckets[cell_of(centers[std::size_t(ci)].pos[0], centers[std::size_t(ci)].pos[1],
                            centers[std::size_t(ci)].pos[2])]
                .push_back(ci);

        parallel_for(n_vox, [&](std::size_t vi) {
            if (!v.brain_mask[vi]) return;  // clustering runs on the brain mask only
            const int x = int(vi % std::size_t(shp.x));
            const int y = int((vi / std::size_t(shp.x)) % std::size_t(shp.y));
            const int z = int(vi / (std::size_t(shp.x) * std::size_t(shp.y)));
            double best = std::numeric_limits<double>::infinity();
            std::int32_t best_id = -1;
            const int bx = std::clamp(int(x / S), 0, cx - 1);
            const int by = std::clamp(int(y / S), 0, cy - 1);
            const int bz = std::clamp(int(z / S), 0, cz - 1);
            for (int dz = -1; dz <= 1; ++dz)
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int ix = bx + dx, iy = by + dy, iz = bz + dz;
                        if (ix < 0 || iy < 0 || iz < 0 || ix >= cx || iy >= cy || iz >= cz)
                            continue;
                        for (int ci :
                             buckets[(std::size_t(iz) * std::size_t(cy) + std::size_t(iy)) *
                                         std::size_t(cx) +
                                     std::size_t(ix)]) {
                            const Center& c = centers[std::size_t(ci)];
                            const double ddx = double(x) - c.pos[0];
                            const double ddy = double(y) - c.pos[1];
                            const double ddz = double(z) - c.pos[2];
                            if (std::abs(ddx) > S || std::abs(ddy) > S || std::abs(ddz) > S)
                                continue;  // +-S search window
                            double dc2 = 0.0;
                            for (int ch = 0; ch < kNumModalities; ++ch) {
                                const double d =
                                    double(v.channels[std::size_t(ch)][vi]) -
                                    c.intensity[std::size_t(ch)];
                                dc2 += d * d;
                            }
                            const double ds2 = ddx * ddx + ddy * ddy + ddz * ddz;
                            const double d2 = dc2 + ds2 * inv_s2_m2;
                            if (d2 < best || (d2 == best && ci < best_id)) {
                                best = d2;
                                best_id = ci;
                            }
                        }
                    }
            assignment[vi] = best_id;
        });

        // serial update in linear-index order: bit-identical for any thread count
        for (auto& c : centers) {
            c.sum_i.fill(0.0);
            c.sum_p.fill(0.0);
            c.n = 0;
        }
        for (std::size_t vi = 0; vi < n_vox; ++vi) {
            const std::int32_t id = assignment[vi];
            if (id < 0) continue;
            Center& c = centers[std::size_t(id)];
            for (int ch = 0; ch < kNumModalities; ++ch)
                c.sum_i[std::size_t(ch)] += double(v.channels[std::size_t(ch)][vi]);
            const int x = int(vi % std::size_t(shp.x));
            const int y = int((vi / std::size_t(shp.x)) % std::size_t(shp.y));
            const int z = int(vi / (std::size_t(shp.x) * std::size_t(shp.y)));
            c.sum_p[0] += x;
            c.sum_p[1] += y;
            c.sum_p[2] += z;
            c.n += 1;
        }
        double max_move2 = 0.0;
        for (auto& c : centers) {
            if (c.n == 0) continue;
            std::array<double, 3> np{c.sum_p[0] / double(c.n), c.sum_p[1] / double(c.n),
                                     c.sum_p[2] / double(c.n)};
            const double dx = np[0] - c.pos[0], dy = np[1] - c.pos[1], dz = np[2] - c.pos[2];
            max_move2 = std::max(max_move2, dx * dx + dy * dy + dz * dz);
            c.pos = np;
            for (int ch = 0; ch < kNumModalities; ++ch)
                c.intensity[std::size_t(ch)] = c.sum_i[std::size_t(ch)] / double(c.n);
        }
        if (max_move2 < 0.25) break;  // center movement < 0.5 voxel
    }

    // --- discard mostly-unmasked supervoxels --------------------------------
    std::vector<std::size_t> masked_count(centers.size(), 0), unmasked_count(centers.size(), 0);
    for (std::size_t vi = 0; vi < n_vox; ++vi) {
        const std::int32_t id = assignment[vi];
        if (id < 0) continue;
        (v.brain_mask[vi] ? masked_count : unmasked_count)[std::size_t(id)] += 1;
    }
    std::vector<char> survives(centers.size(), 0);
    for (std::size_t i = 0; i < centers.size(); ++i)
        survives[i] = masked_count[i] > 0 && unmasked_count[i] <= masked_count[i];

    // out-of-brain voxels leave the partition; orphaned in-brain voxels queue
    // for re-attachment
    std::deque<std::size_t> frontier;
    for (std::size_t vi = 0; vi < n_vox; ++vi) {
        if (!v.brain_mask[vi]) {
            assignment[vi] = -1;
            continue;
        }
        const std::int32_t id = assignment[vi];
        if (id >= 0 && survives[std::size_t(id)])
            frontier.push_back(vi);
        else
            assignment[vi] = -1;
    }

    // multi-source BFS: orphans adopt the id of the first region to reach them
    const auto for_each_neighbor = [&shp](std::size_t vi, auto&& fn) {
        const int x = int(vi % std::size_t(shp.x));
        const int y = int((vi / std::size_t(shp.x)) % std::size_t(shp.y));
        const int z = int(vi / (std::size_t(shp.x) * std::size_t(shp.y)));
        for (const auto& d : sv_detail::kFaceNeighbors) {
            const int xx = x + d[0], yy = y + d[1], zz = z + d[2];
            if (xx < 0 || yy < 0 || zz < 0 || xx >= shp.x || yy >= shp.y || zz >= shp.z)
                continue;
            fn(lindex(shp, xx, yy, zz));
        }
    };
    while (!frontier.empty()) {
        const std::size_t vi = frontier.front();
        frontier.pop_front();
        const std::int32_t id = assignment[vi];
        for_each_neighbor(vi, [&](std::size_t ni) {
            if (!v.brain_mask[ni] || assignment[ni] >= 0) return;
            assignment[ni] = id;
            frontier.push_back(ni);
        });
    }

    // in-brain voxels unreachable from any survivor become fresh supervoxels
    std::int32_t next_id = std::int32_t(centers.size());
    for (std::size_t vi = 0; vi < n_vox; ++vi) {
        if (!v.brain_mask[vi] || assignment[vi] >= 0) continue;
        const std::int32_t fresh = next_id++;
        assignment[vi] = fresh;
        std::deque<std::size_t> q{vi};
        while (!q.empty()) {
            const std::size_t cur = q.front();
            q.pop_front();
            for_each_neighbor(cur, [&](std::size_t ni) {
                if (!v.brain_mask[ni] || assignment[ni] >= 0) return;
                assignment[ni] = fresh;
                q.push_back(ni);
            });
        }
    }

    // --- connectivity enforcement -------------------------------------------
    const std::size_t frag_threshold = std::size_t(std::max(1.0, S * S * S / 4.0));
    for (int round = 0;; ++round) {
        if (round > 100)
            throw consistency_error("slic_partition: connectivity enforcement did not settle");
        // component labelling per current id
        std::vector<std::int32_t> comp(n_vox, -1);
        std::vector<sv_detail::Fragment> fragments;  // one entry per component
        std::vector<std::int32_t> comp_id;           // supervoxel id per component
        for (std::size_t vi = 0; vi < n_vox; ++vi) {
            if (assignment[vi] < 0 || comp[vi] >= 0) continue;
            const std::int32_t cid = std::int32_t(fragments.size());
            sv_detail::Fragment frag;
            frag.min_index = vi;
            comp[vi] = cid;
            std::deque<std::size_t> q{vi};
            while (!q.empty()) {
                const std::size_t cur = q.front();
                q.pop_front();
                frag.voxels.push_back(cur);
                for_each_neighbor(cur, [&](std::size_t ni) {
                    if (comp[ni] >= 0 || assignment[ni] != assignment[vi]) return;
                    comp[ni] = cid;
                    q.push_back(ni);
                });
            }
            fragments.push_back(std::move(frag));
            comp_id.push_back(assignment[vi]);
        }
        // current supervoxel sizes
        std::vector<std::size_t> sv_size(std::size_t(next_id), 0);
        for (std::size_t vi = 0; vi < n_vox; ++vi)
            if (assignment[vi] >= 0) sv_size[std::size_t(assignment[vi])] += 1;
        // keep the largest component per id (ties: smallest min_index)
        std::vector<std::int32_t> keeper(std::size_t(next_id), -1);
        for (std::int32_t c = 0; c < std::int32_t(fragments.size()); ++c) {
            const std::int32_t id = comp_id[std::size_t(c)];
            const std::int32_t cur = keeper[std::size_t(id)];
            if (cur < 0 ||
                fragments[std::size_t(c)].voxels.size() >
                    fragments[std::size_t(cur)].voxels.size() ||
                (fragments[std::size_t(c)].voxels.size() ==
                     fragments[std::size_t(cur)].voxels.size() &&
                 fragments[std::size_t(c)].min_index < fragments[std::size_t(cur)].min_index))
                keeper[std::size_t(id)] = c;
        }
        bool changed = false;
        for (std::int32_t c = 0; c < std::int32_t(fragments.size()); ++c) {
            const std::int32_t id = comp_id[std::size_t(c)];
            if (keeper[std::size_t(id)] == c) continue;
            const auto& frag = fragments[std::size_t(c)];
            changed = true;
            if (frag.voxels.size() >= frag_threshold) {
                const std::int32_t fresh = next_id++;
                sv_size.push_back(frag.voxels.size());
                for (std::size_t vi : frag.voxels) assignment[vi] = fresh;
                continue;
            }
            // merge into the largest 6-adjacent neighbor supervoxel
            std::int32_t target = -1;
            std::size_t target_size = 0;
            for (std::size_t vi : frag.voxels)
                for_each_neighbor(vi, [&](std::size_t ni) {
                    const std::int32_t nid = assignment[ni];
                    if (nid < 0 || nid == id) return;
                    const std::size_t ns = sv_size[std::size_t(nid)];
                    if (ns > target_size || (ns == target_size && nid < target)) {
                        target = nid;
                        target_size = ns;
                    }
                });
            if (target < 0) {
                const std::int32_t fresh = next_id++;
                sv_size.push_back(frag.voxels.size());
                for (std::size_t vi : frag.voxels) assignment[vi] = fresh;
            } else {
                for (std::size_t vi : frag.voxels) assignment[vi] = target;
            }
        }
        if (!changed) break;
    }

    // --- compact ids ordered by first (minimum) linear voxel index ----------
    std::vector<std::int32_t> first_seen_order;
    std::vector<std::int32_t> remap(std::size_t(next_id), -1);
    for (std::size_t vi = 0; vi < n_vox; ++vi) {
        const std::int32_t id = assignment[vi];
        if (id < 0 || remap[std::size_t(id)] >= 0) continue;
        remap[std::size_t(id)] = std::int32_t(first_seen_order.size());
        first_seen_order.push_back(id);
    }
    SupervoxelPartition part;
    part.shape = shp;
    part.assignment.assign(n_vox, -1);
    part.members.resize(first_seen_order.size());
    for (std::size_t vi = 0; vi < n_vox; ++vi) {
        const std::int32_t id = assignment[vi];
        if (id < 0) continue;
        const std::int32_t nid = remap[std::size_t(id)];
        part.assignment[vi] = nid;
        part.members[std::size_t(nid)].push_back(vi);
    }
    part.k_requested = k;
    part.m = m;
    part.grid_spacing = S;
    part.iterations = iterations;
    part.seed = seed;
    return part;
}

// Throws if the partition violates coverage, disjointness, contiguity of ids,
// or 6-connectivity against the given mask.
inline void validate_partition(const SupervoxelPartition& p,
                               const std::vector<std::uint8_t>& brain_mask) {
    const std::size_t n_vox = p.shape.count();
    if (p.assignment.size() != n_vox || brain_mask.size() != n_vox)
        throw shape_error("validate_partition: size mismatch");
    std::vector<std::size_t> seen(std::size_t(p.count()), 0);
    for (std::size_t vi = 0; vi < n_vox; ++vi) {
        const std::int32_t id = p.assignment[vi];
        if (brain_mask[vi]) {
            if (id < 0 || id >= p.count())
                throw consistency_error("validate_partition: in-brain voxel without valid id");
            ++seen[std::size_t(id)];
        } else if (id != -1) {
            throw consistency_error("validate_partition: out-of-brain voxel has an id");
        }
    }
    for (int s = 0; s < p.count(); ++s) {
        const auto& mem = p.members[std::size_t(s)];
        if (mem.empty()) throw consistency_error("validate_partition: empty supervoxel");
        if (mem.size() != seen[std::size_t(s)])
            throw consistency_error("validate_partition: member list disagrees with assignment");
        // flood fill from the first member must reach them all
        std::vector<char> in_set(n_vox, 0), visited(n_vox, 0);
        for (std::size_t vi : mem) in_set[vi] = 1;
        std::deque<std::size_t> q{mem.front()};
        visited[mem.front()] = 1;
        std::size_t reached = 0;
        while (!q.empty()) {
            const std::size_t vi = q.front();
            q.pop_front();
            ++reached;
            const int x = int(vi % std::size_t(p.shape.x));
            const int y = int((vi / std::size_t(p.shape.x)) % std::size_t(p.shape.y));
            const int z = int(vi / (std::size_t(p.shape.x) * std::size_t(p.shape.y)));
            for (const auto& d : sv_detail::kFaceNeighbors) {
                const int xx = x + d[0], yy = y + d[1], zz = z + d[2];
                if (xx < 0 || yy < 0 || zz < 0 || xx >= p.shape.x || yy >= p.shape.y ||
                    zz >= p.shape.z)
                    continue;
                const std::size_t ni = lindex(p.shape, xx, yy, zz);
                if (in_set[ni] && !visited[ni]) {
                    visited[ni] = 1;
                    q.push_back(ni);
                }
            }
        }
        if (reached != mem.size())
            throw consistency_error("validate_partition: supervoxel not 6-connected");
    }
}

// ---------------------------------------------------------------------------
// Achievable segmentation accuracy: fraction of in-brain voxels recovered if
// every supervoxel takes its most common label.
// ---------------------------------------------------------------------------

inline double achievable_segmentation_accuracy(const SupervoxelPartition& p,
                                               const LabelVolume& l) {
    if (!(p.shape == l.shape))
        throw shape_error("achievable_segmentation_accuracy: shape mismatch");
    std::size_t covered = 0, agree = 0;
    for (const auto& mem : p.members) {
        std::array<std::size_t, kNumClasses> hist{};
        for (std::size_t vi : mem) ++hist[l.labels[vi]];
        covered += mem.size();
        agree += *std::max_element(hist.begin(), hist.end());
    }
    if (covered == 0)
        throw degenerate_input_error("achievable_segmentation_accuracy: empty partition");
    return double(agree) / double(covered);
}

// ---------------------------------------------------------------------------
// Grid search over (k, m); mean ASA per cell, ties toward smaller k then m.
// ---------------------------------------------------------------------------

struct GridSearchCell {
    int k;
    double m;
    double mean_asa;
};

struct GridSearchResult {
    std::vector<GridSearchCell> table;  // k-major, then m
    int best_k = 0;
    double best_m = 0.0;
};

inline GridSearchResult slic_grid_search(
    const std::vector<std::pair<const MultiModalVolume*, const LabelVolume*>>& cases,
    const std::vector<int>& k_grid, const std::vector<double>& m_grid, int max_iter = 10,
    std::uint64_t seed = 0) {
    if (cases.empty() || k_grid.empty() || m_grid.empty())
        throw usage_error("slic_grid_search: cases and grids must be nonempty");
    GridSearchResult res;
    double best = -1.0;
    for (int k : k_grid)
        for (double m : m_grid) {
            double sum = 0.0;
            for (const auto& [vol, lab] : cases) {
                const auto part = slic_partition(*vol, k, m, max_iter, seed);
                sum += achievable_segmentation_accuracy(part, *lab);
            }
            const double mean = sum / double(cases.size());
            res.table.push_back({k, m, mean});
            if (mean > best) {
                best = mean;
                res.best_k = k;
                res.best_m = m;
            }
        }
    return res;
}

// ---------------------------------------------------------------------------
// Serialization: "SVP1" + shape + int32 assignment grid, with a plain-text
// metadata record alongside.
// ---------------------------------------------------------------------------

inline std::string partition_meta_path(const std::string& path) { return path + ".meta"; }

inline void save_partition(const std::string& path, const SupervoxelPartition& p) {
    std::filesystem::path fp(path);
    if (fp.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(fp.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write partition: " + path);
    out.write("SVP1", 4);
    const std::int32_t dims[3] = {p.shape.x, p.shape.y, p.shape.z};
    out.write(reinterpret_cast<const char*>(dims), sizeof dims);
    out.write(reinterpret_cast<const char*>(p.assignment.data()),
              std::streamsize(p.assignment.size() * sizeof(std::int32_t)));
    if (!out.good()) throw io_error("partition write failed: " + path);
    out.close();

    std::ofstream meta(partition_meta_path(path), std::ios::binary | std::ios::trunc);
    if (!meta) throw io_error("cannot write partition metadata: " + path);
    meta << "k = " << p.k_requested << "\n";
    meta << "m = " << format_double(p.m) << "\n";
    meta << "S = " << format_double(p.grid_spacing) << "\n";
    meta << "iterations = " << p.iterations << "\n";
    meta << "seed = " << p.seed << "\n";
    if (!meta.good()) throw io_error("partition metadata write failed: " + path);
}

inline SupervoxelPartition load_partition(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open partition: " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "SVP1", 4) != 0)
        throw format_error("bad partition magic: " + path);
    std::int32_t dims[3];
    if (!in.read(reinterpret_cast<char*>(dims), sizeof dims))
        throw format_error("partition header truncated: " + path);
    if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
        throw format_error("partition dims must be positive: " + path);
    SupervoxelPartition p;
    p.shape = {dims[0], dims[1], dims[2]};
    p.assignment.resize(p.shape.count());
    if (!in.read(reinterpret_cast<char*>(p.assignment.data()),
                 std::streamsize(p.assignment.size() * sizeof(std::int32_t))))
        throw format_error("partition grid truncated: " + path);

    std::int32_t max_id = -1;
    for (const auto id : p.assignment) {
        if (id < -1) throw format_error("partition contains id < -1: " + path);
        max_id = std::max(max_id, id);
    }
    p.members.resize(std::size_t(max_id + 1));
    for (std::size_t vi = 0; vi < p.assignment.size(); ++vi)
        if (p.assignment[vi] >= 0) p.members[std::size_t(p.assignment[vi])].push_back(vi);
    for (const auto& mem : p.members)
        if (mem.empty()) throw format_error("partition ids not contiguous: " + path);

    std::ifstream meta(partition_meta_path(path), std::ios::binary);
    if (meta) {
        std::string key, eq;
        while (meta >> key >> eq) {
            std::string val;
            if (eq != "=" || !(meta >> val))
                throw format_error("partition metadata malformed: " + path);
            try {
                if (key == "k") p.k_requested = std::stoi(val);
                else if (key == "m") p.m = std::stod(val);
                else if (key == "S") p.grid_spacing = std::stod(val);
                else if (key == "iterations") p.iterations = std::stoi(val);
                else if (key == "seed") p.seed = std::stoull(val);
                else throw format_error("partition metadata unknown key " + key + ": " + path);
            } catch (const std::logic_error&) {
                throw format_error("partition metadata bad value for " + key + ": " + path);
            }
        }
    }
    return p;
}

}  // namespace gseg
