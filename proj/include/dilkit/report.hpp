#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dilkit/checkpoint.hpp"
#include "dilkit/metrics.hpp"
#include "dilkit/trainer.hpp"

namespace dilkit {

namespace detail {

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << content;
}

// Minimal SVG canvas: rects, lines, text.
struct Svg {
    std::string body;
    double width, height;
    Svg(double w, double h) : width(w), height(h) {}

    void rect(double x, double y, double w, double h, const std::string& fill,
              double opacity = 1.0) {
        body += "<rect x=\"" + fmt(x) + "\" y=\"" + fmt(y) + "\" width=\"" + fmt(w) +
                "\" height=\"" + fmt(h) + "\" fill=\"" + fill + "\" fill-opacity=\"" +
                fmt(opacity) + "\"/>\n";
    }
    void line(double x1, double y1, double x2, double y2, const std::string& stroke,
              double sw = 1.0) {
        body += "<line x1=\"" + fmt(x1) + "\" y1=\"" + fmt(y1) + "\" x2=\"" + fmt(x2) +
                "\" y2=\"" + fmt(y2) + "\" stroke=\"" + stroke + "\" stroke-width=\"" + fmt(sw) +
                "\"/>\n";
    }
    void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
        body += "<polyline fill=\"none\" stroke=\"" + stroke + "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : pts) body += fmt(x) + "," + fmt(y) + " ";
        body += "\"/>\n";
    }
    void text(double x, double y, const std::string& s, int size = 11) {
        body += "<text x=\"" + fmt(x) + "\" y=\"" + fmt(y) + "\" font-size=\"" +
                std::to_string(size) + "\" font-family=\"sans-serif\">" + s + "</text>\n";
    }
    std::string str() const {
        return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(width) +
               "\" height=\"" + fmt(height) + "\">\n<rect width=\"100%\" height=\"100%\" "
               "fill=\"white\"/>\n" + body + "</svg>\n";
    }
};

}  // namespace detail

inline std::string metrics_csv(const RunLog& log) {
    static const char* kLossNames[] = {"ce", "real", "pseudo", "div", "norm"};
    std::string csv =
        "stage,epoch,lr,loss_total,loss_ce,loss_real,loss_pseudo,loss_div,loss_norm,"
        "w_ce,w_real,w_pseudo,w_div,w_norm,val_acc\n";
    for (const EpochRow& r : log.epochs) {
        csv += std::to_string(r.stage) + "," + std::to_string(r.epoch) + "," +
               detail::fmt(r.lr) + "," + detail::fmt(r.total);
        for (const char* n : kLossNames)
            csv += "," + (r.loss.count(n) ? detail::fmt(r.loss.at(n)) : std::string());
        for (const char* n : kLossNames)
            csv += "," + (r.weight.count(n) ? detail::fmt(r.weight.at(n)) : std::string());
        csv += "," + detail::fmt(r.val_acc) + "\n";
    }
    return csv;
}

inline nlohmann::json rmatrix_json(const RMatrix& r) {
    return nlohmann::json{{"r", r.rows}};
}

inline nlohmann::json summary_json(const ExperimentResult& res) {
    nlohmann::json j;
    j["config"] = to_json(res.cfg);
    j["config_hash"] = config_hash(res.cfg);
    nlohmann::json stages = nlohmann::json::array();
    for (const StageLog& s : res.log.stages) {
        stages.push_back({{"stage", s.stage},
                          {"drift_measured", s.drift_measured},
                          {"mean_drift", s.mean_drift},
                          {"drift_scores", s.drift.scores},
                          {"expanded", s.expanded},
                          {"expansion", s.expansion},
                          {"pool_size_after", s.pool_size_after},
                          {"epochs_run", s.epochs_run},
                          {"best_val_acc", s.best_val_acc}});
    }
    j["stages"] = std::move(stages);
    j["rmatrix"] = res.r.rows;
    j["avg_acc"] = res.avg_acc_value;
    if (res.cfg.stages >= 2)
        j["avg_f"] = res.avg_f_value;
    else
        j["avg_f"] = nullptr;
    j["events"] = res.log.events;
    return j;
}

inline nlohmann::json runlog_json(const RunLog& log) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const EpochRow& r : log.epochs)
        epochs.push_back({{"stage", r.stage},
                          {"epoch", r.epoch},
                          {"lr", r.lr},
                          {"total", r.total},
                          {"loss", r.loss},
                          {"weight", r.weight},
                          {"val_acc", r.val_acc}});
    nlohmann::json stages = nlohmann::json::array();
    for (const StageLog& s : log.stages)
        stages.push_back({{"stage", s.stage},
                          {"drift_measured", s.drift_measured},
                          {"mean_drift", s.mean_drift},
                          {"drift_scores", s.drift.scores},
                          {"expanded", s.expanded},
                          {"expansion", s.expansion},
                          {"pool_size_after", s.pool_size_after},
                          {"epochs_run", s.epochs_run},
                          {"best_val_acc", s.best_val_acc}});
    return nlohmann::json{
        {"events", log.events}, {"epochs", std::move(epochs)}, {"stages", std::move(stages)}};
}

inline RunLog runlog_from_json(const nlohmann::json& j) {
    RunLog log;
    log.events = j.at("events").get<std::vector<std::string>>();
    for (const auto& je : j.at("epochs")) {
        EpochRow r;
        r.stage = je.at("stage").get<int>();
        r.epoch = je.at("epoch").get<int>();
        r.lr = je.at("lr").get<double>();
        r.total = je.at("total").get<double>();
        r.loss = je.at("loss").get<std::map<std::string, double>>();
        r.weight = je.at("weight").get<std::map<std::string, double>>();
        r.val_acc = je.at("val_acc").get<double>();
        log.epochs.push_back(std::move(r));
    }
    for (const auto& js : j.at("stages")) {
        StageLog s;
        s.stage = js.at("stage").get<int>();
        s.drift_measured = js.at("drift_measured").get<bool>();
        s.mean_drift = js.at("mean_drift").get<double>();
        s.drift.scores = js.at("drift_scores").get<std::vector<std::vector<double>>>();
        s.drift.finalize();
        s.expanded = js.at("expanded").get<bool>();
        s.expansion = js.at("expansion").get<int>();
        s.pool_size_after = js.at("pool_size_after").get<int>();
        s.epochs_run = js.at("epochs_run").get<int>();
        s.best_val_acc = js.at("best_val_acc").get<double>();
        log.stages.push_back(std::move(s));
    }
    return log;
}

inline nlohmann::json xcomp_json(const CrossComposition& xc) {
    nlohmann::json grid = nlohmann::json::array();
    for (const auto& row : xc.grid) {
        nlohmann::json jrow = nlohmann::json::array();
        for (const auto& cell : row)
            jrow.push_back({{"accuracy", cell.accuracy},
                            {"macro_f1", cell.f1},
                            {"mean_accuracy", cell.mean_accuracy},
                            {"mean_f1", cell.mean_f1}});
        grid.push_back(std::move(jrow));
    }
    return nlohmann::json{{"grid", std::move(grid)},
                          {"head_swap_drop", xc.head_swap_drop},
                          {"backbone_swap_drop", xc.backbone_swap_drop}};
}

/// Prompt-selection heatmap of the final model over a probe batch: one row
/// per sample, one column per pool entry, intensity = routing weight
/// (first adapter layer).
inline std::string selection_heatmap_svg(const ModelState& st, const std::vector<Sample>& probe) {
    const int n_samples = std::min<int>(48, static_cast<int>(probe.size()));
    std::vector<int> idx(static_cast<std::size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) idx[static_cast<std::size_t>(i)] = i;
    Batch batch = make_batch(probe, idx);
    Tape tp;
    ForwardOutput out = model_forward(tp, st, batch, eval_options(st.cfg));
    const auto& w = out.full_weights.front();
    const int n = st.pool.size();
    const double cell = 8.0, margin = 40.0;
    detail::Svg svg(margin * 2 + n * cell, margin * 2 + n_samples * cell);
    svg.text(margin, margin - 14, "prompt selection weights (first adapter layer)");
    for (int b = 0; b < n_samples; ++b)
        for (int i = 0; i < n; ++i) {
            const double v = w[static_cast<std::size_t>(b) * n + i];
            if (v <= 0.0) continue;
            svg.rect(margin + i * cell, margin + b * cell, cell - 1, cell - 1, "#1457b0",
                     std::min(1.0, v * 3.0));
        }
    for (int f : st.pool.frozen)
        svg.rect(margin + f * cell, margin + n_samples * cell + 4, cell - 1, 6, "#888888");
    for (int a : st.pool.active)
        svg.rect(margin + a * cell, margin + n_samples * cell + 4, cell - 1, 6, "#d06014");
    return svg.str();
}

/// Batch-mean usage per prompt as bars, frozen vs active.
inline std::string usage_histogram_svg(const ModelState& st, const std::vector<Sample>& probe) {
    const int n_samples = std::min<int>(128, static_cast<int>(probe.size()));
    std::vector<int> idx(static_cast<std::size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) idx[static_cast<std::size_t>(i)] = i;
    Batch batch = make_batch(probe, idx);
    Tape tp;
    ForwardOutput out = model_forward(tp, st, batch, eval_options(st.cfg));
    std::vector<double> usage(static_cast<std::size_t>(st.pool.size()), 0.0);
    for (const auto& layer_w : out.full_weights) {
        auto mean = batch_mean_weights(layer_w, batch.size, st.pool.size());
        for (std::size_t i = 0; i < usage.size(); ++i) usage[i] += mean[i];
    }
    for (auto& u : usage) u /= static_cast<double>(out.full_weights.size());
    double peak = 1e-12;
    for (double u : usage) peak = std::max(peak, u);
    const int n = st.pool.size();
    const double bar = 9.0, h = 220.0, margin = 40.0;
    detail::Svg svg(margin * 2 + n * bar, h + 2 * margin);
    svg.text(margin, margin - 14, "mean prompt usage (all adapter layers)");
    std::vector<bool> frozen(static_cast<std::size_t>(n), false);
    for (int f : st.pool.frozen) frozen[static_cast<std::size_t>(f)] = true;
    for (int i = 0; i < n; ++i) {
        const double bh = usage[static_cast<std::size_t>(i)] / peak * h;
        svg.rect(margin + i * bar, margin + h - bh, bar - 1.5, bh,
                 frozen[static_cast<std::size_t>(i)] ? "#888888" : "#d06014");
    }
    svg.line(margin, margin + h, margin + n * bar, margin + h, "#222222");
    return svg.str();
}

/// Uncertainty-weight curves per loss term across epochs (stages >= 2).
inline std::string uw_weights_svg(const RunLog& log) {
    static const char* kNames[] = {"ce", "real", "pseudo", "div", "norm"};
    static const char* kColors[] = {"#1457b0", "#d06014", "#178744", "#a02090", "#707010"};
    std::vector<const EpochRow*> rows;
    for (const EpochRow& r : log.epochs)
        if (r.stage >= 2) rows.push_back(&r);
    const double w = 560, h = 260, margin = 46;
    detail::Svg svg(w + 2 * margin, h + 2 * margin);
    svg.text(margin, margin - 14, "uncertainty loss weights w_i = exp(-s_i) per epoch");
    svg.line(margin, margin + h, margin + w, margin + h, "#222222");
    svg.line(margin, margin, margin, margin + h, "#222222");
    if (rows.empty()) return svg.str();
    double peak = 1.0;
    for (const EpochRow* r : rows)
        for (const char* n : kNames)
            if (r->weight.count(n)) peak = std::max(peak, r->weight.at(n));
    const double dx = rows.size() > 1 ? w / static_cast<double>(rows.size() - 1) : 0.0;
    for (int k = 0; k < 5; ++k) {
        std::vector<std::pair<double, double>> pts;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (!rows[i]->weight.count(kNames[k])) continue;
            pts.emplace_back(margin + dx * static_cast<double>(i),
                             margin + h - rows[i]->weight.at(kNames[k]) / peak * h);
        }
        if (!pts.empty()) svg.polyline(pts, kColors[k]);
        svg.text(margin + w + 4, margin + 14 * (k + 1), kNames[k], 10);
        svg.rect(margin + w - 12, margin + 14 * (k + 1) - 8 + 0.0, 8, 8, kColors[k]);
    }
    return svg.str();
}

/// All run artifacts into out_dir: metrics.csv, summary.json, rmatrix.json,
/// xcomp.json, plots/*.svg, checkpoint.json and per-stage snapshots.
inline void write_run_outputs(const ExperimentResult& res, const ModelState& final_state,
                              const SyntheticStream& stream, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    fs::create_directories(out_dir + "/plots");
    fs::create_directories(out_dir + "/snapshots");

    detail::write_file(out_dir + "/config.json", to_json(res.cfg).dump(1) + "\n");
    detail::write_file(out_dir + "/metrics.csv", metrics_csv(res.log));
    detail::write_file(out_dir + "/summary.json", summary_json(res).dump(1) + "\n");
    detail::write_file(out_dir + "/rmatrix.json", rmatrix_json(res.r).dump(1) + "\n");
    detail::write_file(out_dir + "/runlog.json", runlog_json(res.log).dump(1) + "\n");

    CrossComposition xc = cross_composition(res.cfg, res.snapshots, stream);
    detail::write_file(out_dir + "/xcomp.json", xcomp_json(xc).dump(1) + "\n");

    const auto& probe = stream.stages.back().test;
    detail::write_file(out_dir + "/plots/selection_heatmap.svg",
                       selection_heatmap_svg(final_state, probe));
    detail::write_file(out_dir + "/plots/usage_histogram.svg",
                       usage_histogram_svg(final_state, probe));
    detail::write_file(out_dir + "/plots/uw_weights.svg", uw_weights_svg(res.log));

    save_checkpoint(final_state, out_dir + "/checkpoint.json");
    for (std::size_t i = 0; i < res.snapshots.size(); ++i) {
        ModelState snap_state = final_state;
        snap_state.pool = res.snapshots[i].pool;
        snap_state.bank = res.snapshots[i].bank;
        snap_state.adapters = res.snapshots[i].adapters;
        snap_state.student = res.snapshots[i].head;
        snap_state.stages_done = static_cast<int>(i) + 1;
        save_checkpoint(snap_state, out_dir + "/snapshots/stage_" + std::to_string(i + 1) +
                                        ".json");
    }
}

}  // namespace dilkit
