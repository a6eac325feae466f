#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dilkit/class_stats.hpp"
#include "dilkit/drift.hpp"
#include "dilkit/metrics.hpp"
#include "dilkit/model.hpp"
#include "dilkit/optimizer.hpp"
#include "dilkit/uncertainty.hpp"

namespace dilkit {

struct EpochRow {
    int stage = 0;
    int epoch = 0;
    double lr = 0.0;
    std::map<std::string, double> loss;    // mean per-iteration loss values
    std::map<std::string, double> weight;  // effective loss weights (1.0 without UW)
    double total = 0.0;
    double val_acc = 0.0;
};

struct StageLog {
    int stage = 0;
    bool drift_measured = false;
    double mean_drift = 0.0;
    bool expanded = false;
    int expansion = 0;
    int pool_size_after = 0;
    int epochs_run = 0;
    double best_val_acc = 0.0;
    DriftReport drift;
};

/// Ordered record of everything a run does: protocol events (for the
/// ordering assertions), per-epoch metric rows and per-stage summaries.
struct RunLog {
    std::vector<std::string> events;
    std::vector<EpochRow> epochs;
    std::vector<StageLog> stages;

    void event(std::string e) { events.push_back(std::move(e)); }
};

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

inline ForwardOptions eval_options(const ExperimentConfig& cfg) {
    ForwardOptions opt;
    opt.train = false;
    opt.query_enhancer = !cfg.dropped("query-enhancer");
    return opt;
}

inline std::vector<int> predict(const ModelState& st, const std::vector<Sample>& samples) {
    std::vector<int> pred;
    pred.reserve(samples.size());
    const ForwardOptions opt = eval_options(st.cfg);
    const int bs = st.cfg.batch_size;
    const int n = static_cast<int>(samples.size());
    for (int start = 0; start < n; start += bs) {
        const int end = std::min(start + bs, n);
        std::vector<int> idx(static_cast<std::size_t>(end - start));
        for (int i = start; i < end; ++i) idx[static_cast<std::size_t>(i - start)] = i;
        Batch batch = make_batch(samples, idx);
        Tape tp;
        ForwardOutput out = model_forward(tp, st, batch, opt);
        const auto& z = out.logits.value();
        const int c = st.cfg.classes;
        for (int b = 0; b < batch.size; ++b) {
            int best = 0;
            for (int k = 1; k < c; ++k)
                if (z[static_cast<std::size_t>(b) * c + k] > z[static_cast<std::size_t>(b) * c + best])
                    best = k;
            pred.push_back(best);
        }
    }
    return pred;
}

inline double evaluate_accuracy(const ModelState& st, const std::vector<Sample>& samples) {
    std::vector<int> truth(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) truth[i] = samples[i].label;
    return accuracy(predict(st, samples), truth);
}

// ---------------------------------------------------------------------------
// drift measurement
// ---------------------------------------------------------------------------

/// Evaluation pass over the next domain's training data with the frozen
/// model: per batch and adapter layer, score the selection signal against
/// the monitor windows carried over from the completed stage, updating the
/// windows as batches stream.
inline DriftReport measure_drift(ModelState& st, const std::vector<Sample>& data) {
    const int bs = st.cfg.batch_size;
    const int nb = static_cast<int>(data.size()) / bs;
    if (nb < 1) throw ContractError("measure_drift: loader has no complete batch");
    DriftReport rep;
    rep.scores.assign(st.monitors.size(), {});
    const ForwardOptions opt = eval_options(st.cfg);
    for (int t = 0; t < nb; ++t) {
        std::vector<int> idx(static_cast<std::size_t>(bs));
        for (int i = 0; i < bs; ++i) idx[static_cast<std::size_t>(i)] = t * bs + i;
        Batch batch = make_batch(data, idx);
        Tape tp;
        ForwardOutput out = model_forward(tp, st, batch, opt);
        for (std::size_t li = 0; li < st.monitors.size(); ++li) {
            auto mean = batch_mean_weights(out.full_weights[li], batch.size, st.pool.size());
            rep.scores[li].push_back(observe(st.monitors[li], mean));
        }
    }
    rep.finalize();
    return rep;
}

// ---------------------------------------------------------------------------
// loss assembly
// ---------------------------------------------------------------------------

struct LossToggles {
    bool real = false;
    bool pseudo = false;
    bool div = true;
    bool norm = false;
    bool uw = false;
    bool div_zero_scale = false;  // compute the div loss but multiply by 0
};

inline LossToggles stage_toggles(const ExperimentConfig& cfg, int stage_idx) {
    LossToggles t;
    const bool stage1 = stage_idx == 1;
    t.real = !stage1 && !cfg.dropped("distill");
    t.pseudo = !stage1 && !cfg.dropped("pseudo");
    t.div = !cfg.dropped("div");
    t.norm = !stage1 && !cfg.dropped("norm");
    t.uw = !stage1 && !cfg.dropped("uw");
    return t;
}

struct LossBundle {
    std::vector<std::pair<std::string, Tensor>> losses;
    Tensor total;
    Tensor s_leaf;             // defined when UW is active
    std::vector<int> s_index;  // uw indices of the bound losses
};

inline LossBundle assemble_losses(Tape& tp, ModelState& st, const Batch& batch,
                                  const ForwardOutput& out, const LossToggles& tg) {
    const ExperimentConfig& cfg = st.cfg;
    LossBundle lb;
    lb.losses.emplace_back("ce", cross_entropy(out.logits, batch.labels));
    if (tg.real)
        lb.losses.emplace_back(
            "real", real_kd_loss(tp, out.features.value(), batch.size, st.teacher,
                                 out.bind.head_w, out.bind.head_b, cfg.kd_temperature));
    if (tg.pseudo) {
        PseudoSample ps = sample_pseudo(st.cumulative, cfg.resolved_pseudo_count(), st.train_rng,
                                        cfg.variance_floor);
        lb.losses.emplace_back(
            "pseudo", pseudo_kd_loss(tp, ps.features, static_cast<int>(ps.classes.size()),
                                     st.teacher, out.bind.head_w, out.bind.head_b,
                                     cfg.kd_temperature));
    }
    if (tg.div) {
        Tensor acc;
        for (const Tensor& w : out.active_weights) {
            Tensor dl = diversity_loss(w, out.bind.pv_active);
            acc = acc.defined() ? add(acc, dl) : dl;
        }
        Tensor dmean = scale(acc, 1.0 / static_cast<double>(out.active_weights.size()));
        if (tg.div_zero_scale) dmean = scale(dmean, 0.0);
        lb.losses.emplace_back("div", dmean);
    }
    if (tg.norm) lb.losses.emplace_back("norm", norm_loss(out.bind.pv_active));

    if (tg.uw) {
        std::vector<double> svals;
        for (const auto& [name, loss] : lb.losses) {
            const int i = st.uw.index_of(name);
            lb.s_index.push_back(i);
            svals.push_back(st.uw.s[static_cast<std::size_t>(i)]);
        }
        lb.s_leaf = tp.leaf({static_cast<int>(svals.size())}, svals, true);
        lb.total = total_loss(lb.losses, lb.s_leaf);
    } else {
        lb.total = plain_loss_sum(lb.losses);
    }
    return lb;
}

// ---------------------------------------------------------------------------
// stage training
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<Param> stage_params(ModelState& st, bool query_enhancer, bool use_uw) {
    const ExperimentConfig& cfg = st.cfg;
    const int d = cfg.feature_dim, da = cfg.bottleneck_dim;
    std::vector<Param> params;
    params.push_back(make_param_rows("pool.keys", &st.pool.keys, st.pool.active, da));
    params.push_back(make_param_rows("pool.values", &st.pool.values, st.pool.active, da));
    for (int l : st.adapter_layer_ids) {
        LayerAdapters& a = st.adapters[static_cast<std::size_t>(l)];
        const std::string prefix = "adapter" + std::to_string(l) + ".";
        params.push_back(make_param(prefix + "w_down", &a.w_down, d, da));
        params.push_back(make_param(prefix + "w_up", &a.w_up, da, d));
        if (query_enhancer) {
            params.push_back(make_param(prefix + "w1", &a.w1, 3 * d, da));
            params.push_back(make_param(prefix + "ln_g", &a.ln_g, 1, da, false));
            params.push_back(make_param(prefix + "ln_b", &a.ln_b, 1, da, false));
            params.push_back(make_param(prefix + "w2", &a.w2, da, d));
        }
    }
    params.push_back(make_param("head.w", &st.student.weight, cfg.classes, d));
    params.push_back(make_param("head.b", &st.student.bias, 1, cfg.classes, false));
    if (use_uw) params.push_back(make_param("uw.s", &st.uw.s, 5, 1, false));
    return params;
}

}  // namespace detail

inline void train_stage(ModelState& st, const StageData& data, int stage_idx, RunLog& log,
                        StageLog& slog) {
    const ExperimentConfig& cfg = st.cfg;
    const bool stage1 = stage_idx == 1;
    const bool qe = !cfg.dropped("query-enhancer");
    const LossToggles tg = stage_toggles(cfg, stage_idx);
    const std::string tag = "stage" + std::to_string(stage_idx);

    if (!stage1) {
        if (!st.has_teacher) throw ContractError("train_stage: stage >= 2 without a teacher");
        if (!st.has_stats)
            throw ContractError("train_stage: stage >= 2 without cumulative statistics");
    }
    if (tg.uw && (!st.uw_active || cfg.uw_reset_per_stage)) {
        st.uw.reset();
        st.uw_active = true;
        log.event(tag + ":uw_init");
    }

    std::vector<Param> params = detail::stage_params(st, qe, tg.uw);
    int uw_param = -1;
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].name == "uw.s") uw_param = static_cast<int>(i);
    AdamW opt;
    opt.weight_decay = cfg.weight_decay;

    const int bs = cfg.batch_size;
    const int nb = static_cast<int>(data.train.size()) / bs;
    if (nb < 1) throw ContractError("train_stage: train split smaller than one batch");

    double best_val = -1.0;
    int best_epoch = -1;
    int epochs_run = 0;

    ForwardOptions fo;
    fo.train = true;
    fo.query_enhancer = qe;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs);
        Rng shuffle_rng = st.train_rng.child(tag + "-shuffle-e" + std::to_string(epoch));
        std::vector<int> perm = shuffle_rng.permutation(static_cast<int>(data.train.size()));

        EpochRow row;
        row.stage = stage_idx;
        row.epoch = epoch;
        row.lr = lr;
        for (int t = 0; t < nb; ++t) {
            std::vector<int> idx(perm.begin() + static_cast<std::ptrdiff_t>(t) * bs,
                                 perm.begin() + static_cast<std::ptrdiff_t>(t + 1) * bs);
            Batch batch = make_batch(data.train, idx);
            Tape tp;
            ForwardOutput out = model_forward(tp, st, batch, fo);
            LossBundle lb = assemble_losses(tp, st, batch, out, tg);
            tp.backward(lb.total);

            for (const auto& [name, tensor] : out.bind.bound) {
                for (Param& p : params)
                    if (p.name == name) {
                        p.set_grad(tp.grad(tensor));
                        break;
                    }
            }
            if (uw_param >= 0) {
                std::vector<double> g(st.uw.s.size(), 0.0);
                const auto& gs = tp.grad(lb.s_leaf);
                for (std::size_t i = 0; i < lb.s_index.size(); ++i)
                    g[static_cast<std::size_t>(lb.s_index[i])] = gs[i];
                params[static_cast<std::size_t>(uw_param)].set_grad(g);
            }
            opt.step(params, lr);
            if (tg.uw) clamp_log_variances(st.uw);

            if (qe && !out.q_raw0.empty())
                write_memory_ema(st.bank, out.q_raw0, out.q_enh0, batch.size);

            for (std::size_t li = 0; li < st.monitors.size(); ++li) {
                auto mean = batch_mean_weights(out.full_weights[li], batch.size, st.pool.size());
                observe(st.monitors[li], mean);
            }

            row.total += lb.total.scalar();
            for (const auto& [name, loss] : lb.losses) row.loss[name] += loss.scalar();
        }
        row.total /= nb;
        for (auto& [name, v] : row.loss) v /= nb;
        for (const auto& [name, v] : row.loss)
            row.weight[name] = tg.uw ? st.uw.weight(name) : 1.0;
        row.val_acc = evaluate_accuracy(st, data.val);
        log.epochs.push_back(row);
        epochs_run = epoch + 1;

        // Early stopping halts training but keeps the final weights, so the
        // drift monitors' window tail stays aligned with the model that
        // runs the next drift pass.
        if (row.val_acc > best_val) {
            best_val = row.val_acc;
            best_epoch = epoch;
        } else if (epoch - best_epoch >= cfg.patience) {
            log.event(tag + ":early_stop:e" + std::to_string(epoch));
            break;
        }
    }
    slog.epochs_run = epochs_run;
    slog.best_val_acc = best_val;
}

// ---------------------------------------------------------------------------
// stage protocol
// ---------------------------------------------------------------------------

/// One evaluation pass over the finished stage's training data, streaming
/// per-class feature statistics, merged into the cumulative assets.
inline void collect_stage_stats(ModelState& st, const std::vector<Sample>& train) {
    const ExperimentConfig& cfg = st.cfg;
    ClassStats stage_stats(cfg.classes, cfg.feature_dim);
    const ForwardOptions opt = eval_options(cfg);
    const int bs = cfg.batch_size;
    const int n = static_cast<int>(train.size());
    for (int start = 0; start < n; start += bs) {
        const int end = std::min(start + bs, n);
        std::vector<int> idx(static_cast<std::size_t>(end - start));
        for (int i = start; i < end; ++i) idx[static_cast<std::size_t>(i - start)] = i;
        Batch batch = make_batch(train, idx);
        Tape tp;
        ForwardOutput out = model_forward(tp, st, batch, opt);
        const auto& f = out.features.value();
        for (int b = 0; b < batch.size; ++b)
            welford_update(stage_stats, f.data() + static_cast<std::size_t>(b) * cfg.feature_dim,
                           batch.labels[static_cast<std::size_t>(b)]);
    }
    st.cumulative = st.has_stats ? merge_stats(st.cumulative, stage_stats) : stage_stats;
    st.has_stats = true;
}

inline StageSnapshot snapshot_stage(const ModelState& st) {
    return StageSnapshot{st.pool, st.bank, st.adapters, st.student};
}

/// The full per-stage protocol. Stage 1 trains the unpartitioned pool with
/// the plain ce+div objective. Later stages first measure drift on the
/// incoming data with the frozen model, expand the pool proportionally if
/// the drift clears the threshold, then train with the uncertainty-
/// weighted loss set. Every stage ends by banking its knowledge assets:
/// merged class statistics and a frozen teacher copy of the student head.
inline StageLog run_stage(ModelState& st, const StageData& data, int stage_idx, RunLog& log) {
    const ExperimentConfig& cfg = st.cfg;
    StageLog slog;
    slog.stage = stage_idx;
    const std::string tag = "stage" + std::to_string(stage_idx);
    log.event(tag + ":begin");

    if (stage_idx >= 2 && !cfg.dropped("pudd")) {
        log.event(tag + ":drift_measure");
        slog.drift = measure_drift(st, data.train);
        slog.mean_drift = slog.drift.mean_drift;
        slog.drift_measured = true;
        if (should_expand(slog.mean_drift, cfg.theta)) {
            const int e = expansion_size(static_cast<int>(st.pool.active.size()),
                                         slog.mean_drift, cfg.d_max, cfg.e_min, cfg.e_max);
            Rng expand_rng = Rng(cfg.seed).child("expand-" + tag);
            expand_pool(st.pool, e, expand_rng);
            slog.expanded = true;
            slog.expansion = e;
            log.event(tag + ":expand:" + std::to_string(e));
        }
    }

    log.event(tag + ":train_begin");
    train_stage(st, data, stage_idx, log, slog);
    log.event(tag + ":train_end");

    collect_stage_stats(st, data.train);
    log.event(tag + ":stats_merge");
    st.teacher = snapshot_teacher(st.student);
    st.has_teacher = true;
    log.event(tag + ":teacher_snapshot");

    slog.pool_size_after = st.pool.size();
    st.stages_done = stage_idx;
    log.stages.push_back(slog);
    return slog;
}

// ---------------------------------------------------------------------------
// whole experiment
// ---------------------------------------------------------------------------

struct ExperimentResult {
    ExperimentConfig cfg;
    RMatrix r;
    double avg_acc_value = 0.0;
    double avg_f_value = 0.0;
    RunLog log;
    std::vector<StageSnapshot> snapshots;
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                       const SyntheticStream* premade = nullptr,
                                       ModelState* final_state = nullptr) {
    ExperimentResult res;
    res.cfg = cfg;
    SyntheticStream local;
    const SyntheticStream* stream = premade;
    if (!stream) {
        local = generate_stream(cfg, cfg.seed);
        stream = &local;
    }
    ModelState st = init_state(cfg);
    for (int k = 1; k <= cfg.stages; ++k) {
        run_stage(st, stream->stages[static_cast<std::size_t>(k - 1)], k, res.log);
        std::vector<double> row;
        for (int j = 0; j < k; ++j)
            row.push_back(evaluate_accuracy(st, stream->stages[static_cast<std::size_t>(j)].test));
        res.r.rows.push_back(std::move(row));
        res.snapshots.push_back(snapshot_stage(st));
    }
    res.avg_acc_value = avg_acc(res.r);
    if (cfg.stages >= 2) res.avg_f_value = avg_f(res.r);
    if (final_state) *final_state = st;
    return res;
}

/// Evaluate every (representation snapshot i, head j) pair over every
/// stage test set.
inline CrossComposition cross_composition(const ExperimentConfig& cfg,
                                          const std::vector<StageSnapshot>& snaps,
                                          const SyntheticStream& stream) {
    if (snaps.empty()) throw ContractError("cross_composition: no snapshots");
    CrossComposition xc;
    const std::size_t t = snaps.size();
    xc.grid.assign(t, std::vector<CrossCompositionCell>(t));
    ModelState base = init_state(cfg);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < t; ++j) {
            base.pool = snaps[i].pool;
            base.bank = snaps[i].bank;
            base.adapters = snaps[i].adapters;
            base.student = snaps[j].head;
            CrossCompositionCell& cell = xc.grid[i][j];
            double acc_sum = 0.0, f1_sum = 0.0;
            for (const StageData& sd : stream.stages) {
                std::vector<int> truth(sd.test.size());
                for (std::size_t s = 0; s < sd.test.size(); ++s) truth[s] = sd.test[s].label;
                std::vector<int> pred = predict(base, sd.test);
                cell.accuracy.push_back(accuracy(pred, truth));
                cell.f1.push_back(macro_f1(pred, truth, cfg.classes));
                acc_sum += cell.accuracy.back();
                f1_sum += cell.f1.back();
            }
            cell.mean_accuracy = acc_sum / static_cast<double>(stream.stages.size());
            cell.mean_f1 = f1_sum / static_cast<double>(stream.stages.size());
        }
    xc.finalize();
    return xc;
}

}  // namespace dilkit
