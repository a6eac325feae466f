#pragma once

#include <algorithm>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dilkit/report.hpp"

namespace dilkit {

namespace detail {

inline std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

struct CommonOpts {
    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    bool seed_set = false;
    int stages = 0;
    std::string severity_csv;
    std::string drop_csv;
};

inline void add_common(CLI::App* cmd, CommonOpts& o, bool config_required = true) {
    auto* copt = cmd->add_option("--config", o.config_path, "experiment config (JSON)");
    if (config_required) copt->required();
    cmd->add_option("--seed", o.seed, "override the config seed")->each([&o](const std::string&) {
        o.seed_set = true;
    });
    cmd->add_option("--out-dir", o.out_dir, "output directory");
    cmd->add_option("--stages", o.stages, "override the stage count");
    cmd->add_option("--severity", o.severity_csv,
                    "per-stage domain severities, comma separated");
    cmd->add_option("--drop", o.drop_csv,
                    "components to disable: pseudo,distill,div,norm,uw,query-enhancer,pudd");
}

inline ExperimentConfig resolve_config(const CommonOpts& o) {
    ExperimentConfig cfg = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
    if (o.seed_set) cfg.seed = o.seed;
    if (o.stages > 0) {
        cfg.stages = o.stages;
        if (!cfg.severity.empty()) cfg.severity.clear();  // fall back to the default schedule
    }
    if (!o.severity_csv.empty()) {
        cfg.severity.clear();
        for (const std::string& s : split_csv(o.severity_csv)) {
            try {
                cfg.severity.push_back(std::stod(s));
            } catch (const std::exception&) {
                throw ConfigError("--severity: bad number '" + s + "'");
            }
        }
    }
    if (!o.drop_csv.empty()) {
        std::set<std::string> merged(cfg.drop.begin(), cfg.drop.end());
        for (const std::string& d : split_csv(o.drop_csv)) merged.insert(d);
        cfg.drop.assign(merged.begin(), merged.end());
    }
    validate(cfg);
    return cfg;
}

inline int do_run(const CommonOpts& o) {
    ExperimentConfig cfg = resolve_config(o);
    SyntheticStream stream = generate_stream(cfg, cfg.seed);
    ModelState final_state;
    ExperimentResult res = run_experiment(cfg, &stream, &final_state);
    write_run_outputs(res, final_state, stream, o.out_dir);
    std::cout << "stages: " << cfg.stages << ", pool: " << final_state.pool.size()
              << ", avg_acc: " << res.avg_acc_value;
    if (cfg.stages >= 2) std::cout << ", avg_f: " << res.avg_f_value;
    std::cout << "\noutputs in " << o.out_dir << "\n";
    return 0;
}

inline int do_drift(const CommonOpts& o, int train_stages, int probe_stage) {
    ExperimentConfig cfg = resolve_config(o);
    if (probe_stage <= 0) probe_stage = train_stages + 1;
    if (train_stages < 1 || train_stages > cfg.stages)
        throw ConfigError("--train-stages must lie in [1, stages]");
    if (probe_stage < 1 || probe_stage > cfg.stages)
        throw ConfigError("--probe-stage must lie in [1, stages]");
    SyntheticStream stream = generate_stream(cfg, cfg.seed);
    ModelState st = init_state(cfg);
    RunLog log;
    for (int k = 1; k <= train_stages; ++k)
        run_stage(st, stream.stages[static_cast<std::size_t>(k - 1)], k, log);
    DriftReport rep =
        measure_drift(st, stream.stages[static_cast<std::size_t>(probe_stage - 1)].train);
    nlohmann::json j{{"train_stages", train_stages},
                     {"probe_stage", probe_stage},
                     {"mean_drift", rep.mean_drift},
                     {"scores", rep.scores},
                     {"would_expand", should_expand(rep.mean_drift, cfg.theta)},
                     {"theta", cfg.theta}};
    std::filesystem::create_directories(o.out_dir);
    detail::write_file(o.out_dir + "/drift.json", j.dump(1) + "\n");
    std::cout << "mean drift after stage " << train_stages << " on stage " << probe_stage
              << " data: " << rep.mean_drift << " (theta " << cfg.theta << ", expand: "
              << (should_expand(rep.mean_drift, cfg.theta) ? "yes" : "no") << ")\n";
    return 0;
}

inline int do_report(const std::string& run_dir) {
    ExperimentConfig cfg = load_config(run_dir + "/config.json");
    std::ifstream in(run_dir + "/runlog.json");
    if (!in) throw ConfigError("report: missing " + run_dir + "/runlog.json");
    nlohmann::json j;
    in >> j;
    ExperimentResult res;
    res.cfg = cfg;
    res.log = runlog_from_json(j);
    SyntheticStream stream = generate_stream(cfg, cfg.seed);
    ModelState final_state = load_checkpoint(run_dir + "/checkpoint.json", cfg);

    // rebuild the R matrix from the final summary data
    std::ifstream sin(run_dir + "/summary.json");
    if (!sin) throw ConfigError("report: missing " + run_dir + "/summary.json");
    nlohmann::json js;
    sin >> js;
    res.r.rows = js.at("rmatrix").get<std::vector<std::vector<double>>>();
    res.avg_acc_value = avg_acc(res.r);
    if (cfg.stages >= 2) res.avg_f_value = avg_f(res.r);

    detail::write_file(run_dir + "/metrics.csv", metrics_csv(res.log));
    detail::write_file(run_dir + "/summary.json", summary_json(res).dump(1) + "\n");
    std::filesystem::create_directories(run_dir + "/plots");
    const auto& probe = stream.stages.back().test;
    detail::write_file(run_dir + "/plots/selection_heatmap.svg",
                       selection_heatmap_svg(final_state, probe));
    detail::write_file(run_dir + "/plots/usage_histogram.svg",
                       usage_histogram_svg(final_state, probe));
    detail::write_file(run_dir + "/plots/uw_weights.svg", uw_weights_svg(res.log));
    std::cout << "report refreshed in " << run_dir << "\n";
    return 0;
}

inline int do_xcomp(const std::string& run_dir) {
    ExperimentConfig cfg = load_config(run_dir + "/config.json");
    SyntheticStream stream = generate_stream(cfg, cfg.seed);
    std::vector<StageSnapshot> snaps;
    for (int k = 1; k <= cfg.stages; ++k) {
        ModelState st = load_checkpoint(run_dir + "/snapshots/stage_" + std::to_string(k) +
                                            ".json",
                                        cfg);
        snaps.push_back(StageSnapshot{st.pool, st.bank, st.adapters, st.student});
    }
    CrossComposition xc = cross_composition(cfg, snaps, stream);
    detail::write_file(run_dir + "/xcomp.json", xcomp_json(xc).dump(1) + "\n");
    std::cout << "cross-composition grid written; head-swap drop " << xc.head_swap_drop
              << ", backbone-swap drop " << xc.backbone_swap_drop << "\n";
    return 0;
}

}  // namespace detail

/// Command line front end. Exit codes: 0 success, 2 configuration/usage
/// error, 3 numerical abort, 1 anything else.
inline int cli_main(int argc, char** argv) {
    CLI::App app{"desk-scale rehearsal-free domain-incremental learning toolkit"};
    app.require_subcommand(1);

    detail::CommonOpts run_o;
    CLI::App* run = app.add_subcommand("run", "run a full multi-stage experiment");
    detail::add_common(run, run_o);

    detail::CommonOpts drift_o;
    int train_stages = 1, probe_stage = 0;
    CLI::App* drift = app.add_subcommand("drift", "measure drift on a stage pair");
    detail::add_common(drift, drift_o);
    drift->add_option("--train-stages", train_stages, "stages to train before probing");
    drift->add_option("--probe-stage", probe_stage, "stage whose data is probed (default: next)");

    detail::CommonOpts abl_o;
    CLI::App* ablate = app.add_subcommand("ablate", "run with components disabled");
    detail::add_common(ablate, abl_o);
    ablate->get_option("--drop")->required();

    std::string report_dir;
    CLI::App* report = app.add_subcommand("report", "re-emit CSV/JSON/SVG for a finished run");
    report->add_option("--run-dir", report_dir, "directory of a finished run")->required();

    std::string xcomp_dir;
    CLI::App* xcomp = app.add_subcommand("xcomp", "cross-composition diagnostic grid");
    xcomp->add_option("--run-dir", xcomp_dir, "directory of a finished run")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (run->parsed()) return detail::do_run(run_o);
        if (drift->parsed()) return detail::do_drift(drift_o, train_stages, probe_stage);
        if (ablate->parsed()) return detail::do_run(abl_o);
        if (report->parsed()) return detail::do_report(report_dir);
        if (xcomp->parsed()) return detail::do_xcomp(xcomp_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalAbort& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace dilkit
