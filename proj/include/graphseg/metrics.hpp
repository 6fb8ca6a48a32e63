#pragma once

// Segmentation scoring: Dice overlap and 95th-percentile symmetric Hausdorff
// distance, reported over the composite tumor regions WT / TC / ET.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "graphseg/common.hpp"
#include "graphseg/volume.hpp"

namespace gseg {

// Scored when exactly one mask of a pair is empty; the 300.0 alternative used
// for failed cases in some evaluation campaigns can be passed explicitly.
constexpr double kDefaultHdPenalty = 373.13;

struct BinaryMask {
    Shape3 shape{0, 0, 0};
    std::vector<std::uint8_t> voxels;  // size == shape.count(), 1 = inside
};

// Composite regions: whole tumor {1,2,3}, tumor core {1,3}, enhancing {3}.
enum class Region : int { WT = 0, TC = 1, ET = 2 };

constexpr std::array<Region, 3> kRegions{Region::WT, Region::TC, Region::ET};

inline const char* region_name(Region r) {
    switch (r) {
        case Region::WT: return "WT";
        case Region::TC: return "TC";
        case Region::ET: return "ET";
    }
    throw usage_error("region_name: unknown region");
}

inline bool region_contains(Region r, std::uint8_t cls) {
    switch (r) {
        case Region::WT: return cls >= 1 && cls <= 3;
        case Region::TC: return cls == 1 || cls == 3;
        case Region::ET: return cls == 3;
    }
    return false;
}

inline BinaryMask region_mask(const LabelVolume& l, Region r) {
    BinaryMask m;
    m.shape = l.shape;
    m.voxels.resize(l.labels.size());
    for (std::size_t i = 0; i < l.labels.size(); ++i)
        m.voxels[i] = region_contains(r, l.labels[i]) ? 1 : 0;
    return m;
}

// 2TP / (2TP + FP + FN); the denominator equals |pred| + |truth|.
inline double dice(const BinaryMask& pred, const BinaryMask& truth) {
    if (!(pred.shape == truth.shape))
        throw shape_error("dice: mask shapes differ");
    std::size_t tp = 0, np = 0, nt = 0;
    for (std::size_t i = 0; i < pred.voxels.size(); ++i) {
        const bool p = pred.voxels[i] != 0;
        const bool t = truth.voxels[i] != 0;
        np += p;
        nt += t;
        tp += p && t;
    }
    if (np == 0 && nt == 0) return 1.0;
    if (np == 0 || nt == 0) return 0.0;
    return 2.0 * static_cast<double>(tp) / static_cast<double>(np + nt);
}

namespace metrics_detail {

// Lower-envelope squared-distance transform along one line of n samples at
// positions i*step: out[i] = min_q ((i-q)^2 * step^2 + f[q]). Sources with
// f = +inf never enter the envelope; an all-inf line stays all-inf.
inline void dt_line(const std::vector<double>& f, int n, double step,
                    std::vector<int>& v, std::vector<double>& z,
                    std::vector<double>& out) {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        const double xq = q * step;
        double s = 0.0;
        while (k >= 0) {
            const double xv = v[k] * step;
            s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
            if (s <= z[k])
                --k;
            else
                break;
        }
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -kInf;
        } else {
            ++k;
            v[k] = q;
            z[k] = s;
        }
        z[k + 1] = kInf;
    }
    if (k < 0) {
        std::fill_n(out.begin(), n, kInf);
        return;
    }
    int j = 0;
    for (int p = 0; p < n; ++p) {
        const double xp = p * step;
        while (z[j + 1] < xp) ++j;
        const double dx = xp - v[j] * step;
        out[p] = dx * dx + f[v[j]];
    }
}

// Exact squared Euclidean distance from every voxel to the nearest set voxel,
// via separable per-axis transforms. Anisotropy enters through the per-axis
// sample step.
inline std::vector<double> squared_distance_field(const BinaryMask& m,
                                                  const std::array<double, 3>& spacing) {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    const Shape3& s = m.shape;
    std::vector<double> d(s.count());
    for (std::size_t i = 0; i < d.size(); ++i)
        d[i] = m.voxels[i] ? 0.0 : kInf;

    const int maxdim = std::max({s.x, s.y, s.z});
    std::vector<double> f(maxdim), out(maxdim), z(maxdim + 1);
    std::vector<int> v(maxdim);

    for (int zc = 0; zc < s.z; ++zc)
        for (int y = 0; y < s.y; ++y) {
            for (int x = 0; x < s.x; ++x) f[x] = d[lindex(s, x, y, zc)];
            dt_line(f, s.x, spacing[0], v, z, out);
            for (int x = 0; x < s.x; ++x) d[lindex(s, x, y, zc)] = out[x];
        }
    for (int zc = 0; zc < s.z; ++zc)
        for (int x = 0; x < s.x; ++x) {
            for (int y = 0; y < s.y; ++y) f[y] = d[lindex(s, x, y, zc)];
            dt_line(f, s.y, spacing[1], v, z, out);
            for (int y = 0; y < s.y; ++y) d[lindex(s, x, y, zc)] = out[y];
        }
    for (int y = 0; y < s.y; ++y)
        for (int x = 0; x < s.x; ++x) {
            for (int zc = 0; zc < s.z; ++zc) f[zc] = d[lindex(s, x, y, zc)];
            dt_line(f, s.z, spacing[2], v, z, out);
            for (int zc = 0; zc < s.z; ++zc) d[lindex(s, x, y, zc)] = out[zc];
        }
    return d;
}

}  // namespace metrics_detail

// 95th percentile (linear interpolation) of the concatenated bidirectional
// nearest-voxel distances. Both masks empty -> 0.0; exactly one empty -> the
// penalty constant.
inline double hd95(const BinaryMask& pred, const BinaryMask& truth,
                   const std::array<double, 3>& spacing = {1.0, 1.0, 1.0},
                   double empty_penalty = kDefaultHdPenalty) {
    if (!(pred.shape == truth.shape))
        throw shape_error("hd95: mask shapes differ");
    for (double sp : spacing)
        if (!(sp > 0.0) || !std::isfinite(sp))
            throw usage_error("hd95: spacing components must be positive and finite");

    const std::size_t np = static_cast<std::size_t>(
        std::count(pred.voxels.begin(), pred.voxels.end(), std::uint8_t(1)));
    const std::size_t nt = static_cast<std::size_t>(
        std::count(truth.voxels.begin(), truth.voxels.end(), std::uint8_t(1)));
    if (np == 0 && nt == 0) return 0.0;
    if (np == 0 || nt == 0) return empty_penalty;

    const auto to_truth = metrics_detail::squared_distance_field(truth, spacing);
    const auto to_pred = metrics_detail::squared_distance_field(pred, spacing);
    std::vector<double> dists;
    dists.reserve(np + nt);
    for (std::size_t i = 0; i < pred.voxels.size(); ++i)
        if (pred.voxels[i]) dists.push_back(std::sqrt(to_truth[i]));
    for (std::size_t i = 0; i < truth.voxels.size(); ++i)
        if (truth.voxels[i]) dists.push_back(std::sqrt(to_pred[i]));
    return percentile(std::move(dists), 95.0);
}

struct RegionScore {
    double dice = 0.0;
    double hd95 = 0.0;
    bool both_empty = false;  // scored by the empty/empty convention
    bool one_empty = false;   // scored by the one-empty penalty convention
};

struct CaseReport {
    std::array<RegionScore, 3> regions{};  // indexed by Region
    bool missing_pred = false;             // no prediction produced for the case
};

// Convention for a case with no prediction at all: every region scores Dice 0
// and the HD95 penalty, and the row is flagged.
inline CaseReport missing_case_report(double empty_penalty = kDefaultHdPenalty) {
    CaseReport rep;
    rep.missing_pred = true;
    for (auto& rs : rep.regions) {
        rs.dice = 0.0;
        rs.hd95 = empty_penalty;
    }
    return rep;
}

inline CaseReport evaluate_case(const LabelVolume& pred, const LabelVolume& truth,
                                const std::array<double, 3>& spacing = {1.0, 1.0, 1.0},
                                double empty_penalty = kDefaultHdPenalty) {
    if (!(pred.shape == truth.shape))
        throw shape_error("evaluate_case: label volume shapes differ");
    CaseReport rep;
    for (Region r : kRegions) {
        const auto pm = region_mask(pred, r);
        const auto tm = region_mask(truth, r);
        const bool pe = std::count(pm.voxels.begin(), pm.voxels.end(), std::uint8_t(1)) == 0;
        const bool te = std::count(tm.voxels.begin(), tm.voxels.end(), std::uint8_t(1)) == 0;
        auto& rs = rep.regions[static_cast<int>(r)];
        rs.dice = dice(pm, tm);
        rs.hd95 = hd95(pm, tm, spacing, empty_penalty);
        rs.both_empty = pe && te;
        rs.one_empty = pe != te;
    }
    return rep;
}

struct SummaryStats {
    double mean = 0.0;
    double median = 0.0;
};

inline SummaryStats summarize(const std::vector<double>& xs) {
    if (xs.empty()) throw degenerate_input_error("summarize: empty sample");
    SummaryStats s;
    s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) /
             static_cast<double>(xs.size());
    s.median = percentile(xs, 50.0);
    return s;
}

inline std::string report_flags(const CaseReport& rep) {
    if (rep.missing_pred) return "missing-pred";
    std::string out;
    for (Region r : kRegions) {
        const auto& rs = rep.regions[static_cast<int>(r)];
        if (!rs.both_empty && !rs.one_empty) continue;
        if (!out.empty()) out += ';';
        out += region_name(r);
        out += rs.both_empty ? ":both-empty" : ":one-empty";
    }
    return out.empty() ? "-" : out;
}

// One CSV row per case (id, Dice WT/TC/ET, HD95 WT/TC/ET, flags) followed by
// mean and median rows over each numeric column; penalty scores participate
// in the aggregates.
inline void write_report(std::ostream& os,
                         const std::vector<std::pair<std::string, CaseReport>>& cases) {
    if (cases.empty()) throw degenerate_input_error("write_report: no cases");
    os << "case,dice_wt,dice_tc,dice_et,hd95_wt,hd95_tc,hd95_et,flags\n";
    std::array<std::vector<double>, 6> columns;
    for (const auto& [id, rep] : cases) {
        if (id.find_first_of(",\n") != std::string::npos)
            throw usage_error("write_report: case id contains a CSV delimiter: " + id);
        os << id;
        for (int r = 0; r < 3; ++r) {
            os << ',' << format_double(rep.regions[r].dice);
            columns[r].push_back(rep.regions[r].dice);
        }
        for (int r = 0; r < 3; ++r) {
            os << ',' << format_double(rep.regions[r].hd95);
            columns[3 + r].push_back(rep.regions[r].hd95);
        }
        os << ',' << report_flags(rep) << '\n';
    }
    std::array<SummaryStats, 6> stats;
    for (int c = 0; c < 6; ++c) stats[c] = summarize(columns[c]);
    os << "mean";
    for (int c = 0; c < 6; ++c) os << ',' << format_double(stats[c].mean);
    os << ",-\nmedian";
    for (int c = 0; c < 6; ++c) os << ',' << format_double(stats[c].median);
    os << ",-\n";
}

}  // namespace gseg
