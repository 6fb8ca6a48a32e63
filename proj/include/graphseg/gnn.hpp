#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "graphseg/autodiff.hpp"
#include "graphseg/common.hpp"
#include "graphseg/graph.hpp"

namespace gseg {

// ---------------------------------------------------------------------------
// Max-pooling GraphSAGE network over supervoxel graphs: each layer transforms
// every neighbor through a shared pooling map, takes an elementwise max over
// the neighborhood (self included), concatenates that with the node's own
// state, and applies a learned linear map. ReLU between layers, raw logits
// at the end.
// ---------------------------------------------------------------------------

struct GnnConfig {
    int depth = 6;
    int hidden = 256;
    int in_features = kNodeFeatureDim;
    int out_classes = kNumClasses;
    double lr0 = 0.0005;
    double lr_decay = 0.98;
    double weight_decay = 0.0001;
    int epochs = 300;
    int graphs_per_batch = 6;
    std::uint64_t seed = 0;
    int neighbor_sample_cap = 0;  // 0 keeps full neighborhoods

    void validate() const {
        if (depth < 1) throw usage_error("gnn: depth must be >= 1");
        if (hidden < 1) throw usage_error("gnn: hidden width must be >= 1");
        if (in_features != kNodeFeatureDim || out_classes != kNumClasses)
            throw usage_error("gnn: feature/class widths are fixed by the pipeline");
        if (epochs < 1) throw usage_error("gnn: epochs must be >= 1");
        if (graphs_per_batch < 1) throw usage_error("gnn: graphs_per_batch must be >= 1");
    }
};

// W is stored input-major ([2*in, out]) to match row-vector matmul; W_pool is
// [in, in] so pooled neighbors keep the layer's input width.
template <typename T>
struct GraphSagePoolLayerT {
    ParameterT<T> W;
    ParameterT<T> b;
    ParameterT<T> W_pool;
    ParameterT<T> b_pool;
};

template <typename T>
struct GnnModelT {
    GnnConfig cfg;
    std::vector<GraphSagePoolLayerT<T>> layers;

    std::vector<ParameterT<T>*> params() {
        std::vector<ParameterT<T>*> out;
        for (auto& l : layers) {
            out.push_back(&l.W);
            out.push_back(&l.b);
            out.push_back(&l.W_pool);
            out.push_back(&l.b_pool);
        }
        return out;
    }
    std::vector<const ParameterT<T>*> params() const {
        std::vector<const ParameterT<T>*> out;
        for (const auto& l : layers) {
            out.push_back(&l.W);
            out.push_back(&l.b);
            out.push_back(&l.W_pool);
            out.push_back(&l.b_pool);
        }
        return out;
    }
};

using GnnModel = GnnModelT<float>;

template <typename T>
GnnModelT<T> make_gnn_model(const GnnConfig& cfg, Rng& rng) {
    cfg.validate();
    GnnModelT<T> model;
    model.cfg = cfg;
    for (int l = 0; l < cfg.depth; ++l) {
        const int in = l == 0 ? cfg.in_features : cfg.hidden;
        const int out = l == cfg.depth - 1 ? cfg.out_classes : cfg.hidden;
        GraphSagePoolLayerT<T> layer;
        const std::string tag = "gnn.layer" + std::to_string(l);
        layer.W = ParameterT<T>(tag + ".W", TensorT<T>({2 * in, out}));
        layer.b = ParameterT<T>(tag + ".b", TensorT<T>({out}));
        layer.W_pool = ParameterT<T>(tag + ".W_pool", TensorT<T>({in, in}));
        layer.b_pool = ParameterT<T>(tag + ".b_pool", TensorT<T>({in}));
        glorot_init(layer.W.value, 2 * in, out, rng);
        glorot_init(layer.W_pool.value, in, in, rng);
        model.layers.push_back(std::move(layer));
    }
    return model;
}

// CSR neighborhoods with a guaranteed self-loop per node. A positive cap
// uniformly subsamples neighbors beyond that size (self always kept).
inline Neighborhood make_neighborhood(const BrainGraph& g, int sample_cap = 0,
                                      Rng* rng = nullptr) {
    std::vector<std::vector<int>> adj(std::size_t(g.node_count));
    for (const auto& [a, b] : g.edges) {
        adj[std::size_t(a)].push_back(b);
        adj[std::size_t(b)].push_back(a);
    }
    Neighborhood nb;
    nb.offsets.push_back(0);
    for (int u = 0; u < g.node_count; ++u) {
        auto& list = adj[std::size_t(u)];
        std::sort(list.begin(), list.end());
        list.erase(std::unique(list.begin(), list.end()), list.end());
        if (sample_cap > 0 && int(list.size()) > sample_cap) {
            if (!rng) throw usage_error("make_neighborhood: sampling requires an rng");
            rng->shuffle(list);
            list.resize(std::size_t(sample_cap));
            std::sort(list.begin(), list.end());
        }
        nb.indices.push_back(u);  // self-loop: neighborhoods are never empty
        nb.indices.insert(nb.indices.end(), list.begin(), list.end());
        nb.offsets.push_back(int(nb.indices.size()));
    }
    nb.validate(g.node_count);
    return nb;
}

// One layer: out = W(h_u || max_{v in V(u) u {u}} relu(W_pool h_v + b_pool)) + b,
// ReLU on top unless this is the network's output layer.
template <typename T>
typename TapeT<T>::Id layer_forward(TapeT<T>& tape, typename TapeT<T>::Id h,
                                    GraphSagePoolLayerT<T>& layer, const Neighborhood& nb,
                                    bool output_layer) {
    const auto w = tape.param(layer.W);
    const auto b = tape.param(layer.b);
    const auto wp = tape.param(layer.W_pool);
    const auto bp = tape.param(layer.b_pool);
    const auto pooled = tape.relu(tape.add_bias(tape.matmul(h, wp), bp));
    const auto agg = tape.neighbor_max(pooled, nb);
    const auto cat = tape.concat_cols(h, agg);
    const auto lin = tape.add_bias(tape.matmul(cat, w), b);
    return output_layer ? lin : tape.relu(lin);
}

template <typename T>
typename TapeT<T>::Id gnn_forward(TapeT<T>& tape, GnnModelT<T>& model,
                                  typename TapeT<T>::Id features, const Neighborhood& nb) {
    const auto& f = tape.value(features);
    if (f.shape.size() != 2 || f.cols() != model.cfg.in_features)
        throw shape_error("gnn_forward: features must be S x in_features");
    if (nb.segments() != f.rows())
        throw shape_error("gnn_forward: neighborhood segment count mismatch");
    auto h = features;
    for (int l = 0; l < model.cfg.depth; ++l)
        h = layer_forward(tape, h, model.layers[std::size_t(l)], nb,
                          l == model.cfg.depth - 1);
    return h;
}

// Inference: per-node logits as a flat S x 4 row-major table.
template <typename T>
std::vector<T> gnn_node_logits(GnnModelT<T>& model, const BrainGraph& g) {
    TapeT<T> tape;
    TensorT<T> feats({g.node_count, model.cfg.in_features});
    for (std::size_t i = 0; i < feats.values.size(); ++i)
        feats.values[i] = T(g.node_features[i]);
    const auto nb = make_neighborhood(g);
    const auto logits = gnn_forward(tape, model, tape.input(std::move(feats)), nb);
    return tape.value(logits).values;
}

// Argmax class per node, ties toward the higher class.
template <typename T>
std::vector<std::uint8_t> gnn_predict(GnnModelT<T>& model, const BrainGraph& g) {
    const auto logits = gnn_node_logits(model, g);
    std::vector<std::uint8_t> out(std::size_t(g.node_count));
    for (int n = 0; n < g.node_count; ++n) {
        int best = 0;
        for (int c = 1; c < kNumClasses; ++c)
            if (logits[std::size_t(n) * kNumClasses + std::size_t(c)] >=
                logits[std::size_t(n) * kNumClasses + std::size_t(best)])
                best = c;
        out[std::size_t(n)] = std::uint8_t(best);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training: shuffled mini-batches of graphs merged as disjoint unions,
// node-weighted cross-entropy, AdamW with exponential lr decay.
// ---------------------------------------------------------------------------

struct GnnTrainResult {
    GnnModel model;
    std::vector<double> epoch_loss;
    std::array<double, kNumClasses> class_weights{};
};

namespace gnn_detail {

struct Batch {
    Tensor features;
    Neighborhood nb;
    std::vector<int> targets;
};

inline Batch merge_graphs(const std::vector<const BrainGraph*>& graphs) {
    int total = 0;
    for (const auto* g : graphs) total += g->node_count;
    Batch batch;
    batch.features = Tensor({total, kNodeFeatureDim});
    batch.nb.offsets.push_back(0);
    int base = 0;
    for (const auto* g : graphs) {
        std::copy(g->node_features.begin(), g->node_features.end(),
                  batch.features.values.begin() +
                      std::size_t(base) * std::size_t(kNodeFeatureDim));
        const auto nb = make_neighborhood(*g);
        for (int u = 0; u < g->node_count; ++u) {
            for (int i = nb.offsets[std::size_t(u)]; i < nb.offsets[std::size_t(u) + 1]; ++i)
                batch.nb.indices.push_back(nb.indices[std::size_t(i)] + base);
            batch.nb.offsets.push_back(int(batch.nb.indices.size()));
        }
        for (const auto lab : g->node_labels) batch.targets.push_back(int(lab));
        base += g->node_count;
    }
    batch.nb.validate(total);
    return batch;
}

}  // namespace gnn_detail

inline GnnTrainResult train_gnn(const std::vector<const BrainGraph*>& graphs,
                                const GnnConfig& cfg, std::ostream* log = nullptr) {
    cfg.validate();
    if (graphs.empty()) throw usage_error("train_gnn: empty training set");
    for (const auto* g : graphs)
        if (!g->labeled()) throw usage_error("train_gnn: all training graphs must be labeled");

    GnnTrainResult res;
    res.class_weights = compute_class_weights(graphs);
    std::array<float, kNumClasses> wts{};
    for (int c = 0; c < kNumClasses; ++c)
        wts[std::size_t(c)] = float(res.class_weights[std::size_t(c)]);

    Rng rng(cfg.seed);
    res.model = make_gnn_model<float>(cfg, rng);
    auto params = res.model.params();

    std::vector<int> order(graphs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = int(i);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at_epoch(cfg.lr0, cfg.lr_decay, epoch);
        rng.shuffle(order);
        double loss_sum = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += std::size_t(cfg.graphs_per_batch)) {
            std::vector<const BrainGraph*> chunk;
            for (std::size_t i = start;
                 i < std::min(order.size(), start + std::size_t(cfg.graphs_per_batch)); ++i)
                chunk.push_back(graphs[std::size_t(order[i])]);
            auto batch = gnn_detail::merge_graphs(chunk);

            TapeT<float> tape;
            const auto logits =
                gnn_forward(tape, res.model, tape.input(std::move(batch.features)), batch.nb);
            const auto loss = tape.weighted_cross_entropy(logits, batch.targets, wts);
            loss_sum += double(tape.value(loss).values[0]);
            ++batches;
            for (auto* p : params) p->zero_grad();
            tape.backward(loss);
            adamw_step(params, lr, cfg.weight_decay);
        }
        res.epoch_loss.push_back(loss_sum / double(batches));
        if (log)
            (*log) << epoch << ", " << format_double(lr) << ", "
                   << format_double(res.epoch_loss.back()) << "\n";
    }
    return res;
}

}  // namespace gseg
