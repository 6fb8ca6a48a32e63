#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <sstream>

#include "graphseg/autodiff.hpp"
#include "graphseg/common.hpp"
#include "graphseg/gnn.hpp"
#include "graphseg/refine.hpp"
#include "graphseg/supervoxel.hpp"
#include "graphseg/volume.hpp"

using namespace gseg;

namespace {

SupervoxelPartition make_partition(Shape3 shp, std::vector<std::int32_t> assign) {
    SupervoxelPartition p;
    p.shape = shp;
    p.assignment = std::move(assign);
    std::int32_t max_id = -1;
    for (auto id : p.assignment) max_id = std::max(max_id, id);
    p.members.resize(std::size_t(max_id + 1));
    for (std::size_t vi = 0; vi < p.assignment.size(); ++vi)
        if (p.assignment[vi] >= 0) p.members[std::size_t(p.assignment[vi])].push_back(vi);
    return p;
}

LogitVolume logits_of_classes(Shape3 shp, const std::vector<std::uint8_t>& cls) {
    LogitVolume lv;
    lv.shape = shp;
    lv.data.assign(std::size_t(kNumClasses) * shp.count(), 0.0f);
    for (std::size_t vi = 0; vi < shp.count(); ++vi)
        lv.data[std::size_t(cls[vi]) * shp.count() + vi] = 3.0f;
    return lv;
}

}  // namespace

TEST_CASE("reprojection paints node logits onto voxels") {
    const Shape3 shp{10, 8, 6};
    Rng rng(21);
    std::vector<std::int32_t> assign(shp.count(), -1);
    const int ids = 12;
    for (std::size_t vi = 0; vi < assign.size(); ++vi)
        if (rng.uniform() < 0.8) assign[vi] = std::int32_t(vi % ids);
    for (int i = 0; i < ids; ++i) assign[std::size_t(i)] = i;  // all ids present
    const auto p = make_partition(shp, assign);
    std::vector<float> node_logits(std::size_t(ids) * kNumClasses);
    for (auto& x : node_logits) x = float(rng.uniform(-2.0, 2.0));

    const auto lv = reproject_logits(node_logits, p);
    REQUIRE(lv.shape == shp);
    for (int z = 0; z < shp.z; ++z)
        for (int y = 0; y < shp.y; ++y)
            for (int x = 0; x < shp.x; ++x) {
                const std::size_t vi = lindex(shp, x, y, z);
                const auto got = logits_at(lv, vi);
                if (p.assignment[vi] < 0) {
                    REQUIRE(got == std::array<float, 4>{kBackgroundLogit, 0.0f, 0.0f, 0.0f});
                } else {
                    for (int c = 0; c < kNumClasses; ++c)
                        REQUIRE(got[std::size_t(c)] ==
                                node_logits[std::size_t(p.assignment[vi]) * kNumClasses +
                                            std::size_t(c)]);
                }
            }

    // per-supervoxel argmax equals the node's own argmax
    for (int s = 0; s < ids; ++s) {
        std::array<float, kNumClasses> row;
        for (int c = 0; c < kNumClasses; ++c)
            row[std::size_t(c)] = node_logits[std::size_t(s) * kNumClasses + std::size_t(c)];
        const int want = argmax_class(row);
        for (std::size_t vi : p.members[std::size_t(s)])
            REQUIRE(argmax_class(logits_at(lv, vi)) == want);
    }

    node_logits.resize(node_logits.size() - kNumClasses);
    REQUIRE_THROWS_AS(reproject_logits(node_logits, p), consistency_error);
}

TEST_CASE("labels_from_nodes paints classes with background zero") {
    const Shape3 shp{4, 3, 2};
    std::vector<std::int32_t> assign(shp.count(), -1);
    assign[0] = 0;
    assign[1] = 1;
    assign[2] = 1;
    const auto p = make_partition(shp, assign);
    const auto out = labels_from_nodes({2, 3}, p);
    REQUIRE(out.labels[0] == 2);
    REQUIRE(out.labels[1] == 3);
    REQUIRE(out.labels[2] == 3);
    for (std::size_t vi = 3; vi < shp.count(); ++vi) REQUIRE(out.labels[vi] == 0);
    REQUIRE_THROWS_AS(labels_from_nodes({2}, p), consistency_error);
}

TEST_CASE("tumor patch bounds follow box arithmetic") {
    const Shape3 shp{64, 64, 64};
    std::vector<std::uint8_t> cls(shp.count(), 0);
    for (int z = 8; z <= 15; ++z)
        for (int y = 8; y <= 15; ++y)
            for (int x = 8; x <= 15; ++x) cls[lindex(shp, x, y, z)] = 1;
    const auto lv = logits_of_classes(shp, cls);
    const auto b = tumor_patch(lv, 8);
    REQUIRE_FALSE(b.empty);
    REQUIRE(b.lo == Coord3{0, 0, 0});
    REQUIRE(b.hi == Coord3{23, 23, 23});
    REQUIRE(b.sx() == 24);
}

TEST_CASE("no predicted tumor yields the empty sentinel") {
    const Shape3 shp{12, 12, 12};
    const auto lv = logits_of_classes(shp, std::vector<std::uint8_t>(shp.count(), 0));
    const auto b = tumor_patch(lv, 8);
    REQUIRE(b.empty);
}

TEST_CASE("random patches match the coordinate-scan oracle and contain all tumor") {
    Rng rng(31);
    for (int trial = 0; trial < 30; ++trial) {
        const Shape3 shp{12, 10, 9};
        LogitVolume lv;
        lv.shape = shp;
        lv.data.resize(std::size_t(kNumClasses) * shp.count());
        for (auto& x : lv.data) x = float(rng.uniform(-1.0, 1.0));
        const int margin = int(rng.below(5));
        const auto b = tumor_patch(lv, margin);

        int lo[3] = {shp.x, shp.y, shp.z};
        int hi[3] = {-1, -1, -1};
        for (int z = 0; z < shp.z; ++z)
            for (int y = 0; y < shp.y; ++y)
                for (int x = 0; x < shp.x; ++x) {
                    if (argmax_class(logits_at(lv, lindex(shp, x, y, z))) == 0) continue;
                    lo[0] = std::min(lo[0], x);
                    lo[1] = std::min(lo[1], y);
                    lo[2] = std::min(lo[2], z);
                    hi[0] = std::max(hi[0], x);
                    hi[1] = std::max(hi[1], y);
                    hi[2] = std::max(hi[2], z);
                }
        if (hi[0] < 0) {
            REQUIRE(b.empty);
            continue;
        }
        REQUIRE_FALSE(b.empty);
        REQUIRE(b.lo == Coord3{std::max(0, lo[0] - margin), std::max(0, lo[1] - margin),
                               std::max(0, lo[2] - margin)});
        REQUIRE(b.hi == Coord3{std::min(shp.x - 1, hi[0] + margin),
                               std::min(shp.y - 1, hi[1] + margin),
                               std::min(shp.z - 1, hi[2] + margin)});
        for (int z = 0; z < shp.z; ++z)
            for (int y = 0; y < shp.y; ++y)
                for (int x = 0; x < shp.x; ++x)
                    if (argmax_class(logits_at(lv, lindex(shp, x, y, z))) != 0)
                        REQUIRE(b.contains(x, y, z));
    }
}

TEST_CASE("zero cnn maps zero input to zero logits") {
    Rng rng(41);
    CnnConfig cfg;
    auto model = make_cnn_model<float>(cfg, rng);
    for (auto* p : model.params())
        std::fill(p->value.values.begin(), p->value.values.end(), 0.0f);
    TapeT<float> tape;
    const auto out = cnn_forward(tape, model, tape.input(Tensor({8, 4, 4, 4})));
    for (const auto v : tape.value(out).values) REQUIRE(v == 0.0f);
    REQUIRE(tape.value(out).shape == std::vector<int>{4, 4, 4, 4});
}

TEST_CASE("first conv layer stamps the point-reflected kernel at an impulse") {
    Rng rng(42);
    CnnConfig cfg;
    auto model = make_cnn_model<float>(cfg, rng);
    std::fill(model.k1.value.values.begin(), model.k1.value.values.end(), 0.0f);
    std::fill(model.b1.value.values.begin(), model.b1.value.values.end(), 0.0f);
    // filter 0 reads input channel 0 with a known 5^3 pattern
    Tensor pattern({5, 5, 5});
    for (std::size_t i = 0; i < pattern.values.size(); ++i)
        pattern.values[i] = float(i) * 0.01f + 1.0f;
    const int k = 5;
    for (int kx = 0; kx < k; ++kx)
        for (int ky = 0; ky < k; ++ky)
            for (int kz = 0; kz < k; ++kz)
                model.k1.value.values[std::size_t(
                    ((0 * 8 + 0) * k + kx) * k * k + std::size_t(ky) * k + std::size_t(kz))] =
                    pattern.values[std::size_t(kx) * k * k + std::size_t(ky) * k +
                                   std::size_t(kz)];

    Tensor input({8, 7, 7, 7});
    const Shape3 ps{7, 7, 7};
    const int ix = 3, iy = 3, iz = 3;
    input.values[lindex(ps, ix, iy, iz)] = 1.0f;  // impulse in channel 0

    TapeT<float> tape;
    const auto out =
        tape.value(tape.conv3d(tape.input(std::move(input)), tape.param(model.k1), 2));
    const std::size_t vox = ps.count();
    for (int x = 0; x < 7; ++x)
        for (int y = 0; y < 7; ++y)
            for (int z = 0; z < 7; ++z) {
                const int kx = ix - x + 2, ky = iy - y + 2, kz = iz - z + 2;
                float want = 0.0f;
                if (kx >= 0 && kx < k && ky >= 0 && ky < k && kz >= 0 && kz < k)
                    want = pattern.values[std::size_t(kx) * k * k + std::size_t(ky) * k +
                                          std::size_t(kz)];
                REQUIRE(out.values[lindex(ps, x, y, z)] == want);
            }
    // remaining filters have zero kernels
    for (std::size_t i = vox; i < out.values.size(); ++i) REQUIRE(out.values[i] == 0.0f);
}

TEST_CASE("cnn gradients match finite differences on a sampled 8x8x8 patch") {
    Rng rng(51);
    CnnConfig cfg;
    auto model = make_cnn_model<double>(cfg, rng);

    TensorT<double> input({8, 8, 8, 8});
    for (auto& v : input.values) v = rng.uniform(-1.0, 1.0);
    std::vector<int> targets(512);
    for (auto& t : targets) t = int(rng.below(kNumClasses));
    const std::array<double, 4> wts{1.0, 1.0, 1.0, 1.0};

    const auto eval_loss = [&]() {
        TapeT<double> tape;
        const auto logits = cnn_forward(tape, model, tape.input(input));
        return tape
            .value(tape.weighted_cross_entropy(tape.channels_to_rows(logits), targets, wts))
            .values[0];
    };

    for (auto* p : model.params()) p->zero_grad();
    {
        TapeT<double> tape;
        const auto logits = cnn_forward(tape, model, tape.input(input));
        tape.backward(
            tape.weighted_cross_entropy(tape.channels_to_rows(logits), targets, wts));
    }

    // all bias coordinates plus a deterministic sample of kernel coordinates
    std::vector<std::pair<ParameterT<double>*, std::size_t>> coords;
    for (std::size_t i = 0; i < model.b1.value.values.size(); ++i) coords.push_back({&model.b1, i});
    for (std::size_t i = 0; i < model.b2.value.values.size(); ++i) coords.push_back({&model.b2, i});
    Rng pick(52);
    for (int i = 0; i < 100; ++i)
        coords.push_back({&model.k1, pick.below(model.k1.value.values.size())});
    for (int i = 0; i < 100; ++i)
        coords.push_back({&model.k2, pick.below(model.k2.value.values.size())});

    const double h = 1e-5;
    double worst = 0.0;
    for (const auto& [p, i] : coords) {
        const double saved = p->value.values[i];
        p->value.values[i] = saved + h;
        const double up = eval_loss();
        p->value.values[i] = saved - h;
        const double dn = eval_loss();
        p->value.values[i] = saved;
        const double fd = (up - dn) / (2.0 * h);
        const double ad = p->grad.values[i];
        worst = std::max(worst, std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)}));
    }
    REQUIRE(worst < 1e-4);
}

TEST_CASE("cnn training descends, repeats exactly, and leaves the gnn untouched") {
    const Shape3 shp{12, 12, 12};
    Rng rng(61);

    // ground truth: a labeled box in a masked cube
    LabelVolume truth;
    truth.shape = shp;
    truth.labels.assign(shp.count(), 0);
    for (int z = 3; z <= 8; ++z)
        for (int y = 3; y <= 8; ++y)
            for (int x = 3; x <= 8; ++x)
                truth.labels[lindex(shp, x, y, z)] = std::uint8_t(1 + (x + y + z) % 3);

    MultiModalVolume img;
    img.shape = shp;
    img.original_shape = shp;
    img.brain_mask.assign(shp.count(), 1);
    for (int c = 0; c < kNumModalities; ++c) {
        img.channels[std::size_t(c)].resize(shp.count());
        for (std::size_t vi = 0; vi < shp.count(); ++vi)
            img.channels[std::size_t(c)][vi] =
                float(truth.labels[vi]) * (0.4f + 0.1f * float(c)) +
                float(rng.uniform(-0.05, 0.05));
    }

    // imperfect starting logits: correct class logit 2, but eroded box edges
    std::vector<std::uint8_t> noisy = truth.labels;
    for (int z = 3; z <= 8; ++z)
        for (int y = 3; y <= 8; ++y) noisy[lindex(shp, 3, y, z)] = 0;
    const auto lv = logits_of_classes(shp, noisy);

    CnnConfig cfg;
    cfg.epochs = 30;
    cfg.crop_margin = 2;
    cfg.lr0 = 0.003;
    cfg.seed = 5;

    const std::vector<CnnCase> cases{{&lv, &img, &truth}};

    // a bystander network that must not move during refinement training
    Rng grng(62);
    GnnConfig gcfg;
    gcfg.depth = 2;
    gcfg.hidden = 6;
    auto gnn = make_gnn_model<float>(gcfg, grng);
    const auto gnn_before = serialize_checkpoint(std::as_const(gnn).params(), 0);

    std::ostringstream log;
    const auto r1 = train_cnn(cases, cfg, &log);
    REQUIRE(r1.trained);
    REQUIRE(r1.epoch_loss.size() == 30);
    REQUIRE(r1.epoch_loss.back() < r1.epoch_loss.front());
    REQUIRE(serialize_checkpoint(std::as_const(gnn).params(), 0) == gnn_before);

    const auto r2 = train_cnn(cases, cfg);
    REQUIRE(r1.epoch_loss == r2.epoch_loss);
    auto m1 = r1.model;
    auto m2 = r2.model;
    const auto p1 = m1.params();
    const auto p2 = m2.params();
    for (std::size_t i = 0; i < p1.size(); ++i)
        REQUIRE(p1[i]->value.values == p2[i]->value.values);

    int lines = 0;
    std::istringstream rows(log.str());
    for (std::string line; std::getline(rows, line);) ++lines;
    REQUIRE(lines == 30);
}

TEST_CASE("training with no predicted tumor anywhere stays untrained") {
    const Shape3 shp{8, 8, 8};
    const auto lv = logits_of_classes(shp, std::vector<std::uint8_t>(shp.count(), 0));
    MultiModalVolume img;
    img.shape = shp;
    img.original_shape = shp;
    img.brain_mask.assign(shp.count(), 1);
    for (auto& ch : img.channels) ch.assign(shp.count(), 1.0f);
    LabelVolume truth;
    truth.shape = shp;
    truth.labels.assign(shp.count(), 0);

    CnnConfig cfg;
    cfg.epochs = 5;
    const auto res = train_cnn({{&lv, &img, &truth}}, cfg);
    REQUIRE_FALSE(res.trained);
    REQUIRE(res.epoch_loss.empty());
}

TEST_CASE("merging respects bounds, mask, and the argmax tie rule") {
    const Shape3 shp{10, 9, 8};
    Rng rng(71);
    LabelVolume gnn_pred;
    gnn_pred.shape = shp;
    gnn_pred.labels.resize(shp.count());
    std::vector<std::uint8_t> mask(shp.count());
    for (std::size_t vi = 0; vi < shp.count(); ++vi) {
        mask[vi] = rng.uniform() < 0.8 ? 1 : 0;
        gnn_pred.labels[vi] = mask[vi] ? std::uint8_t(rng.below(kNumClasses)) : 0;
    }

    SECTION("empty bounds returns the gnn prediction") {
        PatchBounds b;
        const auto out = merge_predictions(gnn_pred, Tensor({4, 1, 1, 1}), b, mask);
        REQUIRE(out.labels == gnn_pred.labels);
    }

    SECTION("random logits match the two-branch oracle and stay inside bounds") {
        PatchBounds b;
        b.empty = false;
        b.lo = {2, 1, 3};
        b.hi = {7, 6, 6};
        Tensor logits({4, b.sx(), b.sy(), b.sz()});
        for (auto& v : logits.values) v = float(rng.uniform(-1.0, 1.0));
        const auto out = merge_predictions(gnn_pred, logits, b, mask);
        const Shape3 ps{b.sx(), b.sy(), b.sz()};
        for (int z = 0; z < shp.z; ++z)
            for (int y = 0; y < shp.y; ++y)
                for (int x = 0; x < shp.x; ++x) {
                    const std::size_t vi = lindex(shp, x, y, z);
                    if (!b.contains(x, y, z)) {
                        REQUIRE(out.labels[vi] == gnn_pred.labels[vi]);
                    } else if (!mask[vi]) {
                        REQUIRE(out.labels[vi] == 0);
                    } else {
                        std::array<float, 4> v;
                        for (int c = 0; c < 4; ++c)
                            v[std::size_t(c)] = logits.values[std::size_t(c) * ps.count() +
                                                              lindex(ps, x - b.lo.x, y - b.lo.y,
                                                                     z - b.lo.z)];
                        REQUIRE(int(out.labels[vi]) == argmax_class(v));
                    }
                }
    }

    SECTION("cnn logits equal to the gnn reprojection reproduce the gnn labels") {
        // constant-per-region logits via a two-region partition
        std::vector<std::int32_t> assign(shp.count(), -1);
        for (std::size_t vi = 0; vi < shp.count(); ++vi)
            if (mask[vi]) assign[vi] = vi % 2 == 0 ? 0 : 1;
        bool has0 = false, has1 = false;
        for (const auto a : assign) {
            has0 = has0 || a == 0;
            has1 = has1 || a == 1;
        }
        REQUIRE((has0 && has1));
        const auto p = make_partition(shp, assign);
        const std::vector<float> node_logits{0.1f, 0.2f, 2.0f, 0.4f,   // node 0 -> class 2
                                             1.5f, 0.3f, 0.2f, 1.5f};  // node 1 -> tie -> 3
        const auto lv = reproject_logits(node_logits, p);
        const auto pred = labels_from_nodes({2, 3}, p);
        const auto b = tumor_patch(lv, 1);
        REQUIRE_FALSE(b.empty);
        Tensor patch({4, b.sx(), b.sy(), b.sz()});
        const Shape3 ps{b.sx(), b.sy(), b.sz()};
        for (int z = b.lo.z; z <= b.hi.z; ++z)
            for (int y = b.lo.y; y <= b.hi.y; ++y)
                for (int x = b.lo.x; x <= b.hi.x; ++x)
                    for (int c = 0; c < 4; ++c)
                        patch.values[std::size_t(c) * ps.count() +
                                     lindex(ps, x - b.lo.x, y - b.lo.y, z - b.lo.z)] =
                            lv.at(c, x, y, z);
        const auto out = merge_predictions(pred, patch, b, mask);
        REQUIRE(out.labels == pred.labels);
    }
}
