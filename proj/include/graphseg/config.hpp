#pragma once

// Declarative pipeline configuration: one flat `key = value` file covering
// every stage. Unknown and duplicate keys are rejected so a typo cannot
// silently fall back to a default; every run logs the resolved form.

#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <string>

#include "graphseg/common.hpp"
#include "graphseg/gnn.hpp"
#include "graphseg/metrics.hpp"
#include "graphseg/refine.hpp"

namespace gseg {

struct PipelineConfig {
    // supervoxel clustering
    int slic_k = 15000;
    double slic_m = 0.5;
    int slic_iters = 10;
    // preprocessing
    double rescale_pct = 99.5;
    // node classifier
    int gnn_depth = 6;
    int gnn_hidden = 256;
    double gnn_lr0 = 0.0005;
    double gnn_lr_decay = 0.98;
    double gnn_weight_decay = 0.0001;
    int gnn_epochs = 300;
    int gnn_graphs_per_batch = 6;
    int gnn_sample_cap = 0;
    // voxel refiner
    double cnn_lr0 = 0.0005;
    double cnn_lr_decay = 0.98;
    double cnn_weight_decay = 0.0001;
    int cnn_epochs = 100;
    int cnn_crop_margin = 8;
    // evaluation
    double hd_penalty = kDefaultHdPenalty;
    // shared
    std::uint64_t seed = 0;
    std::string data_dir;  // optional; --data overrides
    std::string out_dir;   // optional; --out overrides

    GnnConfig gnn_config() const {
        GnnConfig c;
        c.depth = gnn_depth;
        c.hidden = gnn_hidden;
        c.lr0 = gnn_lr0;
        c.lr_decay = gnn_lr_decay;
        c.weight_decay = gnn_weight_decay;
        c.epochs = gnn_epochs;
        c.graphs_per_batch = gnn_graphs_per_batch;
        c.neighbor_sample_cap = gnn_sample_cap;
        c.seed = seed;
        c.validate();
        return c;
    }

    CnnConfig cnn_config() const {
        CnnConfig c;
        c.lr0 = cnn_lr0;
        c.lr_decay = cnn_lr_decay;
        c.weight_decay = cnn_weight_decay;
        c.epochs = cnn_epochs;
        c.crop_margin = cnn_crop_margin;
        c.seed = seed + 1;  // decorrelated from the GNN init/shuffle stream
        c.validate();
        return c;
    }

    void validate() const {
        if (slic_k < 1) throw usage_error("config: slic_k must be >= 1");
        if (!(slic_m > 0.0)) throw usage_error("config: slic_m must be positive");
        if (slic_iters < 1) throw usage_error("config: slic_iters must be >= 1");
        if (!(rescale_pct > 0.0) || rescale_pct > 100.0)
            throw usage_error("config: rescale_pct must be in (0,100]");
        if (!(hd_penalty >= 0.0)) throw usage_error("config: hd_penalty must be >= 0");
        gnn_config();
        cnn_config();
    }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline long long to_int(const std::string& key, const std::string& v) {
    long long out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
        throw format_error("config: bad integer for " + key + ": " + v);
    return out;
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size())
            throw format_error("config: bad number for " + key + ": " + v);
        return out;
    } catch (const std::logic_error&) {
        throw format_error("config: bad number for " + key + ": " + v);
    }
}

}  // namespace config_detail

inline PipelineConfig parse_config(std::istream& in, const std::string& origin = "<config>") {
    PipelineConfig cfg;
    std::set<std::string> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string text = config_detail::trim(line);
        if (text.empty()) continue;
        const auto eq = text.find('=');
        if (eq == std::string::npos)
            throw format_error(origin + ":" + std::to_string(lineno) +
                               ": expected key = value");
        const std::string key = config_detail::trim(text.substr(0, eq));
        const std::string val = config_detail::trim(text.substr(eq + 1));
        if (key.empty() || val.empty())
            throw format_error(origin + ":" + std::to_string(lineno) +
                               ": expected key = value");
        if (!seen.insert(key).second)
            throw format_error(origin + ":" + std::to_string(lineno) +
                               ": duplicate key " + key);

        using config_detail::to_double;
        using config_detail::to_int;
        if (key == "slic_k") cfg.slic_k = int(to_int(key, val));
        else if (key == "slic_m") cfg.slic_m = to_double(key, val);
        else if (key == "slic_iters") cfg.slic_iters = int(to_int(key, val));
        else if (key == "rescale_pct") cfg.rescale_pct = to_double(key, val);
        else if (key == "gnn_depth") cfg.gnn_depth = int(to_int(key, val));
        else if (key == "gnn_hidden") cfg.gnn_hidden = int(to_int(key, val));
        else if (key == "gnn_lr0") cfg.gnn_lr0 = to_double(key, val);
        else if (key == "gnn_lr_decay") cfg.gnn_lr_decay = to_double(key, val);
        else if (key == "gnn_weight_decay") cfg.gnn_weight_decay = to_double(key, val);
        else if (key == "gnn_epochs") cfg.gnn_epochs = int(to_int(key, val));
        else if (key == "gnn_graphs_per_batch") cfg.gnn_graphs_per_batch = int(to_int(key, val));
        else if (key == "gnn_sample_cap") cfg.gnn_sample_cap = int(to_int(key, val));
        else if (key == "cnn_lr0") cfg.cnn_lr0 = to_double(key, val);
        else if (key == "cnn_lr_decay") cfg.cnn_lr_decay = to_double(key, val);
        else if (key == "cnn_weight_decay") cfg.cnn_weight_decay = to_double(key, val);
        else if (key == "cnn_epochs") cfg.cnn_epochs = int(to_int(key, val));
        else if (key == "cnn_crop_margin") cfg.cnn_crop_margin = int(to_int(key, val));
        else if (key == "hd_penalty") cfg.hd_penalty = to_double(key, val);
        else if (key == "seed") cfg.seed = std::uint64_t(to_int(key, val));
        else if (key == "data_dir") cfg.data_dir = val;
        else if (key == "out_dir") cfg.out_dir = val;
        else
            throw format_error(origin + ":" + std::to_string(lineno) +
                               ": unknown key " + key);
    }
    cfg.validate();
    return cfg;
}

inline PipelineConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open config: " + path);
    return parse_config(in, path);
}

// Canonical resolved form: every key, fixed order, round-trip exact values.
inline void write_config(std::ostream& os, const PipelineConfig& cfg) {
    os << "slic_k = " << cfg.slic_k << "\n"
       << "slic_m = " << format_double(cfg.slic_m) << "\n"
       << "slic_iters = " << cfg.slic_iters << "\n"
       << "rescale_pct = " << format_double(cfg.rescale_pct) << "\n"
       << "gnn_depth = " << cfg.gnn_depth << "\n"
       << "gnn_hidden = " << cfg.gnn_hidden << "\n"
       << "gnn_lr0 = " << format_double(cfg.gnn_lr0) << "\n"
       << "gnn_lr_decay = " << format_double(cfg.gnn_lr_decay) << "\n"
       << "gnn_weight_decay = " << format_double(cfg.gnn_weight_decay) << "\n"
       << "gnn_epochs = " << cfg.gnn_epochs << "\n"
       << "gnn_graphs_per_batch = " << cfg.gnn_graphs_per_batch << "\n"
       << "gnn_sample_cap = " << cfg.gnn_sample_cap << "\n"
       << "cnn_lr0 = " << format_double(cfg.cnn_lr0) << "\n"
       << "cnn_lr_decay = " << format_double(cfg.cnn_lr_decay) << "\n"
       << "cnn_weight_decay = " << format_double(cfg.cnn_weight_decay) << "\n"
       << "cnn_epochs = " << cfg.cnn_epochs << "\n"
       << "cnn_crop_margin = " << cfg.cnn_crop_margin << "\n"
       << "hd_penalty = " << format_double(cfg.hd_penalty) << "\n"
       << "seed = " << cfg.seed << "\n";
    if (!cfg.data_dir.empty()) os << "data_dir = " << cfg.data_dir << "\n";
    if (!cfg.out_dir.empty()) os << "out_dir = " << cfg.out_dir << "\n";
}

inline void save_config(const std::string& path, const PipelineConfig& cfg) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write config: " + path);
    write_config(out, cfg);
    if (!out.good()) throw io_error("config write failed: " + path);
}

}  // namespace gseg
