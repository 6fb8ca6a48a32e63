// Command-line front end: gen-phantoms / preprocess / tune-slic / train /
// predict / evaluate. Exit codes: 0 success, 1 usage error, 2 data or
// processing error. Progress goes to stderr; tables and reports go to stdout
// and to their output files.

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "graphseg/pipeline.hpp"

namespace {

gseg::PipelineConfig resolve_config(const std::string& config_path, const std::string& data,
                                    const std::string& out) {
    gseg::PipelineConfig cfg;
    if (!config_path.empty()) cfg = gseg::load_config(config_path);
    if (!data.empty()) cfg.data_dir = data;
    if (!out.empty()) cfg.out_dir = out;
    cfg.validate();
    std::cerr << "resolved config:\n";
    gseg::write_config(std::cerr, cfg);
    return cfg;
}

std::vector<std::string> split_commas(const std::string& s) {
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
}

std::vector<int> parse_int_list(const std::string& flag, const std::string& s) {
    std::vector<int> out;
    for (const auto& tok : split_commas(s)) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoi(tok, &used));
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::logic_error&) {
            throw gseg::usage_error(flag + ": bad integer list element: " + tok);
        }
    }
    return out;
}

std::vector<double> parse_double_list(const std::string& flag, const std::string& s) {
    std::vector<double> out;
    for (const auto& tok : split_commas(s)) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(tok, &used));
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::logic_error&) {
            throw gseg::usage_error(flag + ": bad number list element: " + tok);
        }
    }
    return out;
}

std::string require_dir(const std::string& what, const std::string& resolved) {
    if (resolved.empty())
        throw gseg::usage_error("no " + what + " given (flag or config file)");
    return resolved;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"supervoxel-graph brain tumor segmentation pipeline"};
    app.require_subcommand(1);
    unsigned jobs = gseg::thread_count();
    app.add_option("-j,--jobs", jobs, "worker threads (any count is deterministic)");

    std::string gp_out;
    int gp_train = 20, gp_val = 5;
    std::uint64_t gp_seed = 0;
    auto* gp = app.add_subcommand("gen-phantoms", "generate a synthetic phantom dataset");
    gp->add_option("--out", gp_out, "output dataset directory")->required();
    gp->add_option("--train", gp_train, "training cases");
    gp->add_option("--val", gp_val, "validation cases");
    gp->add_option("--seed", gp_seed, "master seed");

    std::string pp_data, pp_out, pp_config;
    auto* pp = app.add_subcommand("preprocess", "crop, rescale, and standardize a dataset");
    pp->add_option("--data", pp_data, "raw dataset directory");
    pp->add_option("--out", pp_out, "preprocessed output directory");
    pp->add_option("--config", pp_config, "pipeline config file");

    std::string ts_data, ts_out = "asa_table.csv", ts_config, ts_split = "train";
    std::string ts_kgrid, ts_mgrid;
    auto* ts = app.add_subcommand("tune-slic", "grid-search supervoxel parameters by ASA");
    ts->add_option("--data", ts_data, "preprocessed dataset directory");
    ts->add_option("--k-grid", ts_kgrid, "comma-separated supervoxel counts")->required();
    ts->add_option("--m-grid", ts_mgrid, "comma-separated compactness values")->required();
    ts->add_option("--out", ts_out, "ASA table output file");
    ts->add_option("--config", ts_config, "pipeline config file");
    ts->add_option("--split", ts_split, "manifest split to tune on");

    std::string tr_data, tr_out, tr_config, tr_stage = "both";
    auto* tr = app.add_subcommand("train", "train the node classifier and voxel refiner");
    tr->add_option("--data", tr_data, "preprocessed dataset directory");
    tr->add_option("--out", tr_out, "run output directory");
    tr->add_option("--config", tr_config, "pipeline config file");
    tr->add_option("--stage", tr_stage, "gnn, cnn, or both");

    std::string pd_data, pd_gnn, pd_cnn, pd_out, pd_config, pd_split = "all";
    auto* pd = app.add_subcommand("predict", "write per-case segmentation predictions");
    pd->add_option("--data", pd_data, "preprocessed dataset directory");
    pd->add_option("--gnn", pd_gnn, "node classifier checkpoint")->required();
    pd->add_option("--cnn", pd_cnn, "voxel refiner checkpoint (omit for GNN-only)");
    pd->add_option("--out", pd_out, "prediction output directory");
    pd->add_option("--config", pd_config, "pipeline config file");
    pd->add_option("--split", pd_split, "manifest split to predict");

    std::string ev_pred, ev_truth, ev_out, ev_split = "all";
    double ev_penalty = gseg::kDefaultHdPenalty;
    auto* ev = app.add_subcommand("evaluate", "score predictions against ground truth");
    ev->add_option("--pred", ev_pred, "prediction directory")->required();
    ev->add_option("--truth", ev_truth, "ground-truth dataset directory")->required();
    ev->add_option("--out", ev_out, "CSV report output file")->required();
    ev->add_option("--split", ev_split, "manifest split to score");
    ev->add_option("--penalty", ev_penalty, "HD95 for one-empty and missing cases");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }
    gseg::thread_count() = std::max(1u, jobs);

    try {
        if (gp->parsed()) {
            gseg::PhantomSpec spec;
            gseg::generate_dataset(spec, gp_train, gp_val, gp_seed, gp_out);
            std::cerr << "wrote " << (gp_train + gp_val) << " cases to " << gp_out << "\n";
        } else if (pp->parsed()) {
            const auto cfg = resolve_config(pp_config, pp_data, pp_out);
            const auto data = require_dir("data directory", cfg.data_dir);
            const auto out = require_dir("output directory", cfg.out_dir);
            gseg::run_preprocess(data, out, cfg);
            std::cerr << "preprocessed dataset written to " << out << "\n";
        } else if (ts->parsed()) {
            const auto cfg = resolve_config(ts_config, ts_data, "");
            const auto data = require_dir("data directory", cfg.data_dir);
            const auto ks = parse_int_list("--k-grid", ts_kgrid);
            const auto ms = parse_double_list("--m-grid", ts_mgrid);
            const auto res = gseg::run_tune_slic(data, ks, ms, ts_out, cfg, ts_split);
            gseg::write_asa_table(std::cout, res);
            std::cerr << "best cell: k = " << res.best_k << ", m = " << res.best_m
                      << " (table written to " << ts_out << ")\n";
        } else if (tr->parsed()) {
            const auto cfg = resolve_config(tr_config, tr_data, tr_out);
            const auto data = require_dir("data directory", cfg.data_dir);
            const auto out = require_dir("output directory", cfg.out_dir);
            gseg::run_train(data, out, cfg, tr_stage);
            std::cerr << "training artifacts written to " << out << "\n";
        } else if (pd->parsed()) {
            const auto cfg = resolve_config(pd_config, pd_data, pd_out);
            const auto data = require_dir("data directory", cfg.data_dir);
            const auto out = require_dir("output directory", cfg.out_dir);
            gseg::run_predict(data, pd_gnn, pd_cnn, out, cfg, pd_split);
            std::cerr << "predictions written to " << out << "\n";
        } else if (ev->parsed()) {
            const auto cases = gseg::run_evaluate(ev_pred, ev_truth, ev_out, ev_split,
                                                  ev_penalty);
            gseg::write_report(std::cout, cases);
            std::cerr << "report written to " << ev_out << "\n";
        }
        return 0;
    } catch (const gseg::usage_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
