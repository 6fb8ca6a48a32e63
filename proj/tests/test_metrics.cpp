#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "graphseg/common.hpp"
#include "graphseg/metrics.hpp"
#include "graphseg/volume.hpp"

using namespace gseg;

namespace {

BinaryMask make_mask(Shape3 shp, const std::vector<Coord3>& set_voxels) {
    BinaryMask m;
    m.shape = shp;
    m.voxels.assign(shp.count(), 0);
    for (const auto& c : set_voxels) m.voxels[lindex(shp, c.x, c.y, c.z)] = 1;
    return m;
}

BinaryMask random_mask(Shape3 shp, double fill_prob, Rng& rng) {
    BinaryMask m;
    m.shape = shp;
    m.voxels.resize(shp.count());
    for (auto& v : m.voxels) v = rng.uniform() < fill_prob ? 1 : 0;
    return m;
}

std::vector<Coord3> mask_coords(const BinaryMask& m) {
    std::vector<Coord3> out;
    for (int z = 0; z < m.shape.z; ++z)
        for (int y = 0; y < m.shape.y; ++y)
            for (int x = 0; x < m.shape.x; ++x)
                if (m.voxels[lindex(m.shape, x, y, z)]) out.push_back({x, y, z});
    return out;
}

// Index-set oracle: Dice as 2|A∩B| / (|A|+|B|) over explicit voxel-index sets.
double dice_oracle(const BinaryMask& a, const BinaryMask& b) {
    std::set<std::size_t> sa, sb;
    for (std::size_t i = 0; i < a.voxels.size(); ++i) {
        if (a.voxels[i]) sa.insert(i);
        if (b.voxels[i]) sb.insert(i);
    }
    if (sa.empty() && sb.empty()) return 1.0;
    if (sa.empty() || sb.empty()) return 0.0;
    std::vector<std::size_t> inter;
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(),
                          std::back_inserter(inter));
    return 2.0 * static_cast<double>(inter.size()) /
           static_cast<double>(sa.size() + sb.size());
}

// All-pairs brute force: for every voxel of one mask, scan the whole other
// mask for the nearest voxel. O(|A|·|B|), only viable at test sizes.
std::vector<double> directed_distances_oracle(const std::vector<Coord3>& from,
                                              const std::vector<Coord3>& to,
                                              const std::array<double, 3>& sp) {
    std::vector<double> out;
    out.reserve(from.size());
    for (const auto& a : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& b : to) {
            const double dx = (a.x - b.x) * sp[0];
            const double dy = (a.y - b.y) * sp[1];
            const double dz = (a.z - b.z) * sp[2];
            best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
        }
        out.push_back(best);
    }
    return out;
}

double hd95_oracle(const BinaryMask& a, const BinaryMask& b,
                   const std::array<double, 3>& sp, double penalty) {
    const auto ca = mask_coords(a);
    const auto cb = mask_coords(b);
    if (ca.empty() && cb.empty()) return 0.0;
    if (ca.empty() || cb.empty()) return penalty;
    auto d = directed_distances_oracle(ca, cb, sp);
    const auto back = directed_distances_oracle(cb, ca, sp);
    d.insert(d.end(), back.begin(), back.end());
    return percentile(std::move(d), 95.0);
}

double hd100_oracle(const BinaryMask& a, const BinaryMask& b,
                    const std::array<double, 3>& sp) {
    const auto ca = mask_coords(a);
    const auto cb = mask_coords(b);
    auto d = directed_distances_oracle(ca, cb, sp);
    const auto back = directed_distances_oracle(cb, ca, sp);
    d.insert(d.end(), back.begin(), back.end());
    return *std::max_element(d.begin(), d.end());
}

LabelVolume random_label_volume(Shape3 shp, Rng& rng) {
    LabelVolume l;
    l.shape = shp;
    l.labels.resize(shp.count());
    for (auto& v : l.labels) v = static_cast<std::uint8_t>(rng.below(4));
    return l;
}

}  // namespace

TEST_CASE("region masks select their class sets") {
    const Shape3 shp{4, 1, 1};
    LabelVolume l;
    l.shape = shp;
    l.labels = {0, 1, 2, 3};

    const auto wt = region_mask(l, Region::WT);
    const auto tc = region_mask(l, Region::TC);
    const auto et = region_mask(l, Region::ET);
    REQUIRE(wt.voxels == std::vector<std::uint8_t>{0, 1, 1, 1});
    REQUIRE(tc.voxels == std::vector<std::uint8_t>{0, 1, 0, 1});
    REQUIRE(et.voxels == std::vector<std::uint8_t>{0, 0, 0, 1});

    SECTION("all-healthy volume gives all-false masks") {
        LabelVolume h;
        h.shape = {3, 3, 3};
        h.labels.assign(27, 0);
        for (Region r : {Region::WT, Region::TC, Region::ET}) {
            const auto m = region_mask(h, r);
            REQUIRE(m.shape == h.shape);
            REQUIRE(std::count(m.voxels.begin(), m.voxels.end(), 1) == 0);
        }
    }

    SECTION("random labels match the per-voxel membership oracle") {
        Rng rng(401);
        const auto rl = random_label_volume({7, 5, 6}, rng);
        const std::set<int> wt_set{1, 2, 3}, tc_set{1, 3}, et_set{3};
        const auto check = [&](Region r, const std::set<int>& cls) {
            const auto m = region_mask(rl, r);
            for (std::size_t i = 0; i < rl.labels.size(); ++i)
                REQUIRE(static_cast<bool>(m.voxels[i]) == (cls.count(rl.labels[i]) > 0));
        };
        check(Region::WT, wt_set);
        check(Region::TC, tc_set);
        check(Region::ET, et_set);
    }

    SECTION("region names") {
        REQUIRE(std::string(region_name(Region::WT)) == "WT");
        REQUIRE(std::string(region_name(Region::TC)) == "TC");
        REQUIRE(std::string(region_name(Region::ET)) == "ET");
    }
}

TEST_CASE("dice hand cases and conventions") {
    const Shape3 shp{4, 4, 1};

    SECTION("identical nonempty masks give 1.0") {
        const auto m = make_mask(shp, {{0, 0, 0}, {2, 3, 0}});
        REQUIRE(dice(m, m) == 1.0);
    }

    SECTION("one shared voxel out of two each gives exactly 0.5") {
        const auto pred = make_mask(shp, {{1, 1, 0}, {2, 2, 0}});
        const auto truth = make_mask(shp, {{2, 2, 0}, {3, 3, 0}});
        REQUIRE(dice(pred, truth) == 0.5);
    }

    SECTION("empty-mask conventions") {
        const auto empty = make_mask(shp, {});
        const auto one = make_mask(shp, {{1, 2, 0}});
        REQUIRE(dice(empty, empty) == 1.0);
        REQUIRE(dice(empty, one) == 0.0);
        REQUIRE(dice(one, empty) == 0.0);
    }

    SECTION("shape mismatch throws") {
        const auto a = make_mask({4, 4, 1}, {});
        const auto b = make_mask({4, 1, 4}, {});
        REQUIRE_THROWS_AS(dice(a, b), shape_error);
    }

    SECTION("proper nonempty subset scores below 1") {
        const auto truth = make_mask(shp, {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}});
        const auto pred = make_mask(shp, {{0, 0, 0}, {1, 0, 0}});
        REQUIRE(dice(pred, truth) < 1.0);
        REQUIRE(dice(pred, truth) == 2.0 * 2.0 / 5.0);
    }
}

TEST_CASE("dice equals the set-counting oracle on random pairs") {
    Rng rng(402);
    const Shape3 shp{16, 16, 16};
    for (int t = 0; t < 200; ++t) {
        const double pa = rng.uniform(0.0, 0.2);
        const double pb = rng.uniform(0.0, 0.2);
        const auto a = random_mask(shp, pa, rng);
        const auto b = random_mask(shp, pb, rng);
        const double d = dice(a, b);
        REQUIRE(d == dice_oracle(a, b));
        REQUIRE(d == dice(b, a));
        REQUIRE(d >= 0.0);
        REQUIRE(d <= 1.0);
    }
}

TEST_CASE("dice is non-decreasing as a nested prediction grows") {
    Rng rng(403);
    const Shape3 shp{10, 10, 10};
    const auto truth = random_mask(shp, 0.1, rng);
    std::vector<std::size_t> truth_idx;
    for (std::size_t i = 0; i < truth.voxels.size(); ++i)
        if (truth.voxels[i]) truth_idx.push_back(i);
    REQUIRE(truth_idx.size() > 10);
    rng.shuffle(truth_idx);

    BinaryMask pred;
    pred.shape = shp;
    pred.voxels.assign(shp.count(), 0);
    double prev = dice(pred, truth);
    REQUIRE(prev == 0.0);
    for (std::size_t i = 0; i < truth_idx.size(); ++i) {
        pred.voxels[truth_idx[i]] = 1;
        const double d = dice(pred, truth);
        REQUIRE(d >= prev);
        prev = d;
    }
    REQUIRE(prev == 1.0);
}

TEST_CASE("hd95 hand cases and conventions") {
    const Shape3 shp{8, 8, 8};

    SECTION("identical masks give 0.0") {
        const auto m = make_mask(shp, {{1, 2, 3}, {4, 5, 6}, {7, 0, 0}});
        REQUIRE(hd95(m, m) == 0.0);
    }

    SECTION("two single voxels 3 apart give 3.0 at unit spacing") {
        const auto a = make_mask(shp, {{1, 4, 4}});
        const auto b = make_mask(shp, {{4, 4, 4}});
        REQUIRE(hd95(a, b) == 3.0);
        REQUIRE(hd95(b, a) == 3.0);
    }

    SECTION("empty-mask conventions and the penalty knob") {
        const auto empty = make_mask(shp, {});
        const auto one = make_mask(shp, {{3, 3, 3}});
        REQUIRE(hd95(empty, empty) == 0.0);
        REQUIRE(hd95(empty, one) == kDefaultHdPenalty);
        REQUIRE(hd95(one, empty) == kDefaultHdPenalty);
        REQUIRE(kDefaultHdPenalty == 373.13);
        REQUIRE(hd95(one, empty, {1.0, 1.0, 1.0}, 300.0) == 300.0);
    }

    SECTION("shape mismatch and bad spacing throw") {
        const auto a = make_mask({4, 4, 4}, {{0, 0, 0}});
        const auto b = make_mask({4, 4, 2}, {{0, 0, 0}});
        REQUIRE_THROWS_AS(hd95(a, b), shape_error);
        REQUIRE_THROWS_AS(hd95(a, a, {1.0, 0.0, 1.0}), usage_error);
        REQUIRE_THROWS_AS(hd95(a, a, {1.0, -2.0, 1.0}), usage_error);
    }
}

TEST_CASE("hd95 equals the all-pairs oracle on sparse random masks") {
    Rng rng(404);
    const Shape3 shp{12, 12, 12};
    const std::array<double, 3> unit{1.0, 1.0, 1.0};
    int nonempty_pairs = 0;
    for (int t = 0; t < 30; ++t) {
        const auto a = random_mask(shp, rng.uniform(0.005, 0.05), rng);
        const auto b = random_mask(shp, rng.uniform(0.005, 0.05), rng);
        const double h = hd95(a, b);
        REQUIRE(h == hd95_oracle(a, b, unit, kDefaultHdPenalty));
        REQUIRE(h == hd95(b, a));
        if (!mask_coords(a).empty() && !mask_coords(b).empty()) {
            ++nonempty_pairs;
            REQUIRE(h <= hd100_oracle(a, b, unit));
        }
    }
    REQUIRE(nonempty_pairs >= 20);
}

TEST_CASE("hd95 respects anisotropic spacing") {
    const Shape3 shp{9, 9, 9};
    const std::array<double, 3> sp{1.0, 2.0, 0.5};

    SECTION("axis-aligned single-voxel pairs scale by spacing") {
        const auto c = make_mask(shp, {{4, 4, 4}});
        REQUIRE(hd95(make_mask(shp, {{6, 4, 4}}), c, sp) == 2.0);
        REQUIRE(hd95(make_mask(shp, {{4, 6, 4}}), c, sp) == 4.0);
        REQUIRE(hd95(make_mask(shp, {{4, 4, 6}}), c, sp) == 1.0);
    }

    SECTION("random masks match the oracle within 1e-9") {
        Rng rng(405);
        for (int t = 0; t < 10; ++t) {
            const auto a = random_mask(shp, 0.03, rng);
            const auto b = random_mask(shp, 0.03, rng);
            const double h = hd95(a, b, sp);
            const double o = hd95_oracle(a, b, sp, kDefaultHdPenalty);
            REQUIRE(std::abs(h - o) <= 1e-9);
        }
    }
}

TEST_CASE("evaluate_case composes regions with flags") {
    const Shape3 shp{6, 6, 6};

    SECTION("pred equals truth: all dice 1, all hd95 0, no flags") {
        LabelVolume truth;
        truth.shape = shp;
        truth.labels.assign(shp.count(), 0);
        truth.labels[lindex(shp, 1, 1, 1)] = 1;
        truth.labels[lindex(shp, 2, 2, 2)] = 2;
        truth.labels[lindex(shp, 3, 3, 3)] = 3;
        const auto rep = evaluate_case(truth, truth);
        for (const auto& rs : rep.regions) {
            REQUIRE(rs.dice == 1.0);
            REQUIRE(rs.hd95 == 0.0);
            REQUIRE_FALSE(rs.both_empty);
            REQUIRE_FALSE(rs.one_empty);
        }
    }

    SECTION("truth has enhancing tumor but pred has none") {
        LabelVolume truth;
        truth.shape = shp;
        truth.labels.assign(shp.count(), 0);
        truth.labels[lindex(shp, 1, 1, 1)] = 3;
        truth.labels[lindex(shp, 2, 2, 2)] = 2;
        truth.labels[lindex(shp, 3, 3, 3)] = 1;
        LabelVolume pred = truth;
        pred.labels[lindex(shp, 1, 1, 1)] = 1;  // demote enhancing to necrotic

        const auto rep = evaluate_case(pred, truth);
        const auto& et = rep.regions[static_cast<int>(Region::ET)];
        REQUIRE(et.dice == 0.0);
        REQUIRE(et.hd95 == kDefaultHdPenalty);
        REQUIRE(et.one_empty);
        REQUIRE_FALSE(et.both_empty);
        // WT voxel set is unchanged; TC swaps one member's class but not the set.
        REQUIRE(rep.regions[static_cast<int>(Region::WT)].dice == 1.0);
        REQUIRE(rep.regions[static_cast<int>(Region::TC)].dice == 1.0);
    }

    SECTION("absent region in both volumes is flagged both_empty") {
        LabelVolume truth;
        truth.shape = shp;
        truth.labels.assign(shp.count(), 0);
        truth.labels[lindex(shp, 2, 2, 2)] = 2;  // edema only
        const auto rep = evaluate_case(truth, truth);
        const auto& tc = rep.regions[static_cast<int>(Region::TC)];
        REQUIRE(tc.dice == 1.0);
        REQUIRE(tc.hd95 == 0.0);
        REQUIRE(tc.both_empty);
    }

    SECTION("per-region scores match direct dice/hd95 calls") {
        Rng rng(406);
        const auto pred = random_label_volume(shp, rng);
        const auto truth = random_label_volume(shp, rng);
        const auto rep = evaluate_case(pred, truth);
        for (Region r : {Region::WT, Region::TC, Region::ET}) {
            const auto pm = region_mask(pred, r);
            const auto tm = region_mask(truth, r);
            const auto& rs = rep.regions[static_cast<int>(r)];
            REQUIRE(rs.dice == dice(pm, tm));
            REQUIRE(rs.hd95 == hd95(pm, tm));
        }
    }

    SECTION("shape mismatch throws") {
        LabelVolume a;
        a.shape = {4, 4, 4};
        a.labels.assign(64, 0);
        LabelVolume b;
        b.shape = {4, 4, 5};
        b.labels.assign(80, 0);
        REQUIRE_THROWS_AS(evaluate_case(a, b), shape_error);
    }
}

TEST_CASE("summary statistics match recomputation from individual reports") {
    Rng rng(407);
    const Shape3 shp{8, 8, 8};
    std::vector<std::pair<std::string, CaseReport>> cases;
    for (int i = 0; i < 5; ++i) {
        const auto pred = random_label_volume(shp, rng);
        const auto truth = random_label_volume(shp, rng);
        cases.emplace_back("case" + std::to_string(i), evaluate_case(pred, truth));
    }

    for (int r = 0; r < 3; ++r) {
        std::vector<double> dices, hds;
        for (const auto& [id, rep] : cases) {
            dices.push_back(rep.regions[r].dice);
            hds.push_back(rep.regions[r].hd95);
        }
        for (const auto* col : {&dices, &hds}) {
            const auto s = summarize(*col);
            REQUIRE(s.mean ==
                    std::accumulate(col->begin(), col->end(), 0.0) /
                        static_cast<double>(col->size()));
            auto sorted = *col;
            std::sort(sorted.begin(), sorted.end());
            REQUIRE(s.median == sorted[2]);
        }
    }

    SECTION("median of an even-sized set interpolates") {
        const auto s = summarize({1.0, 2.0, 4.0, 8.0});
        REQUIRE(s.median == 3.0);
        REQUIRE(s.mean == 3.75);
    }

    SECTION("empty set throws") {
        REQUIRE_THROWS_AS(summarize({}), degenerate_input_error);
    }
}

TEST_CASE("case report CSV round-trips values and flags") {
    const Shape3 shp{6, 6, 6};
    LabelVolume truth;
    truth.shape = shp;
    truth.labels.assign(shp.count(), 0);
    truth.labels[lindex(shp, 1, 1, 1)] = 3;
    truth.labels[lindex(shp, 2, 2, 2)] = 2;
    truth.labels[lindex(shp, 4, 4, 4)] = 1;
    LabelVolume pred = truth;
    pred.labels[lindex(shp, 1, 1, 1)] = 1;  // ET one-empty

    std::vector<std::pair<std::string, CaseReport>> cases;
    cases.emplace_back("alpha", evaluate_case(truth, truth));
    cases.emplace_back("beta", evaluate_case(pred, truth));

    std::ostringstream os;
    write_report(os, cases);
    std::istringstream is(os.str());
    std::vector<std::string> lines;
    for (std::string line; std::getline(is, line);) lines.push_back(line);

    REQUIRE(lines.size() == 5);
    REQUIRE(lines[0] == "case,dice_wt,dice_tc,dice_et,hd95_wt,hd95_tc,hd95_et,flags");

    const auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        for (char c : s) {
            if (c == ',') {
                out.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        out.push_back(cur);
        return out;
    };

    const auto row1 = split(lines[1]);
    REQUIRE(row1.size() == 8);
    REQUIRE(row1[0] == "alpha");
    for (int i = 1; i <= 3; ++i) REQUIRE(std::stod(row1[i]) == 1.0);
    for (int i = 4; i <= 6; ++i) REQUIRE(std::stod(row1[i]) == 0.0);
    REQUIRE(row1[7] == "-");

    const auto row2 = split(lines[2]);
    REQUIRE(row2[0] == "beta");
    REQUIRE(std::stod(row2[1]) == 1.0);                       // WT dice
    REQUIRE(std::stod(row2[3]) == 0.0);                       // ET dice
    REQUIRE(std::stod(row2[6]) == kDefaultHdPenalty);         // ET hd95
    REQUIRE(row2[7] == "ET:one-empty");

    const auto mean_row = split(lines[3]);
    const auto median_row = split(lines[4]);
    REQUIRE(mean_row[0] == "mean");
    REQUIRE(median_row[0] == "median");
    // Column aggregate oracle: mean/median of the two ET hd95 values.
    const std::vector<double> et_hd{0.0, kDefaultHdPenalty};
    REQUIRE(std::stod(mean_row[6]) == summarize(et_hd).mean);
    REQUIRE(std::stod(median_row[6]) == summarize(et_hd).median);
    REQUIRE(mean_row[7] == "-");

    SECTION("empty case list is rejected") {
        std::ostringstream sink;
        REQUIRE_THROWS_AS(write_report(sink, {}), degenerate_input_error);
    }

    SECTION("missing prediction scores zero overlap and the penalty") {
        const auto rep = missing_case_report();
        for (const auto& rs : rep.regions) {
            REQUIRE(rs.dice == 0.0);
            REQUIRE(rs.hd95 == kDefaultHdPenalty);
        }
        REQUIRE(report_flags(rep) == "missing-pred");
        const auto alt = missing_case_report(300.0);
        REQUIRE(alt.regions[0].hd95 == 300.0);
    }
}
