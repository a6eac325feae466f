#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dilkit/autodiff.hpp"
#include "dilkit/backbone.hpp"
#include "dilkit/class_stats.hpp"
#include "dilkit/config.hpp"
#include "dilkit/drift.hpp"
#include "dilkit/routing.hpp"
#include "dilkit/stream.hpp"
#include "dilkit/uncertainty.hpp"

namespace dilkit {

/// Trainable per-layer adapter weights: the query-enhancer MLP (w1, LN
/// affine, w2) plus the bottleneck projections shared by routing (w_down)
/// and injection (w_up).
struct LayerAdapters {
    std::vector<double> w1;    // 3D x d_a
    std::vector<double> ln_g;  // d_a
    std::vector<double> ln_b;  // d_a
    std::vector<double> w2;    // d_a x D
    std::vector<double> w_down;  // D x d_a
    std::vector<double> w_up;    // d_a x D
};

/// Everything a stage leaves behind for the cross-composition diagnostic:
/// the representation-side state (pool, bank, adapters) and the head.
struct StageSnapshot {
    PromptPool pool;
    MemoryBank bank;
    std::vector<LayerAdapters> adapters;
    ClassifierHead head;
};

/// Full persistent model and training state of one experiment.
struct ModelState {
    ExperimentConfig cfg;
    Backbone backbone;
    PromptPool pool;
    MemoryBank bank;
    std::vector<LayerAdapters> adapters;  // one per backbone layer
    ClassifierHead student;
    ClassifierHead teacher;
    bool has_teacher = false;
    ClassStats cumulative;
    bool has_stats = false;
    UncertaintyWeights uw;
    bool uw_active = false;
    std::vector<DriftMonitor> monitors;  // one per adapter layer
    std::vector<int> adapter_layer_ids;
    Rng train_rng{0};
    int stages_done = 0;
};

inline LayerAdapters make_adapters(const ExperimentConfig& cfg, Rng rng) {
    const int d = cfg.feature_dim, da = cfg.bottleneck_dim;
    LayerAdapters a;
    a.w1 = rng.child("w1").normal_vec(static_cast<std::size_t>(3 * d) * da, 0.0,
                                      1.0 / std::sqrt(3.0 * d));
    a.ln_g.assign(static_cast<std::size_t>(da), 1.0);
    a.ln_b.assign(static_cast<std::size_t>(da), 0.0);
    // w2 starts at zero so the enhancer opens as the identity map
    a.w2.assign(static_cast<std::size_t>(da) * d, 0.0);
    a.w_down = rng.child("w_down").normal_vec(static_cast<std::size_t>(d) * da, 0.0,
                                              1.0 / std::sqrt(static_cast<double>(d)));
    a.w_up = rng.child("w_up").normal_vec(static_cast<std::size_t>(da) * d, 0.0,
                                          1.0 / std::sqrt(static_cast<double>(da)));
    return a;
}

inline ModelState init_state(const ExperimentConfig& cfg) {
    validate(cfg);
    ModelState st;
    st.cfg = cfg;
    Rng root(cfg.seed);
    st.backbone = make_backbone(cfg, root.child("backbone"));
    Rng pool_rng = root.child("pool");
    st.pool = make_pool(cfg.pool_size, cfg.bottleneck_dim, pool_rng);
    Rng bank_rng = root.child("bank");
    st.bank = make_bank(cfg.memory_slots, cfg.feature_dim, cfg.ema_gamma, bank_rng);
    for (int l = 0; l < cfg.layers; ++l)
        st.adapters.push_back(make_adapters(cfg, root.child("adapter" + std::to_string(l))));
    st.student = ClassifierHead(cfg.classes, cfg.feature_dim);
    st.student.weight = root.child("head").normal_vec(
        static_cast<std::size_t>(cfg.classes) * cfg.feature_dim, 0.0,
        1.0 / std::sqrt(static_cast<double>(cfg.feature_dim)));
    st.adapter_layer_ids = cfg.adapter_layers();
    for (std::size_t i = 0; i < st.adapter_layer_ids.size(); ++i) {
        DriftMonitor mon;
        mon.window_cap = cfg.window;
        mon.tau_s = cfg.tau_s;
        mon.eps = cfg.drift_eps;
        mon.signal_alpha = cfg.drift_alpha;
        mon.signal_beta = cfg.drift_beta;
        mon.eta = cfg.eta;
        st.monitors.push_back(std::move(mon));
    }
    st.train_rng = root.child("train");
    return st;
}

/// Per-pass tape bindings; `bound` names every trainable leaf so the
/// trainer can route gradients back into its Param registry.
struct ForwardBindings {
    BackboneTensors backbone;
    Tensor bank_keys, bank_values;
    Tensor pk_active, pv_active;
    Tensor pk_frozen, pv_frozen;  // undefined when the pool is unpartitioned
    std::vector<EnhancerTensors> enh;  // indexed by backbone layer
    Tensor head_w, head_b;
    std::vector<std::pair<std::string, Tensor>> bound;
};

struct ForwardOptions {
    bool train = false;   // bind trainable leaves
    bool query_enhancer = true;
};

struct ForwardOutput {
    Tensor logits;    // B x C
    Tensor features;  // B x D
    std::vector<Tensor> active_weights;             // per adapter layer
    std::vector<std::vector<double>> full_weights;  // per adapter layer, B x N
    std::vector<double> q_raw0, q_enh0;             // first adapter layer queries
    ForwardBindings bind;
};

namespace detail {

inline std::vector<double> gather_rows_value(const std::vector<double>& buf,
                                             const std::vector<int>& rows, int cols) {
    std::vector<double> out(rows.size() * static_cast<std::size_t>(cols));
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(buf.data() + static_cast<std::size_t>(rows[i]) * cols, cols,
                    out.data() + i * cols);
    return out;
}

}  // namespace detail

inline ForwardBindings bind_model(Tape& tp, const ModelState& st, const ForwardOptions& opt) {
    const ExperimentConfig& cfg = st.cfg;
    const int d = cfg.feature_dim, da = cfg.bottleneck_dim;
    ForwardBindings b;
    b.backbone = bind_backbone(tp, st.backbone);
    b.bank_keys = tp.constant({st.bank.slots(), d}, st.bank.keys);
    b.bank_values = tp.constant({st.bank.slots(), d}, st.bank.values);

    const auto& pool = st.pool;
    b.pk_active = tp.leaf({static_cast<int>(pool.active.size()), da},
                          detail::gather_rows_value(pool.keys, pool.active, da), opt.train);
    b.pv_active = tp.leaf({static_cast<int>(pool.active.size()), da},
                          detail::gather_rows_value(pool.values, pool.active, da), opt.train);
    if (opt.train) {
        b.bound.emplace_back("pool.keys", b.pk_active);
        b.bound.emplace_back("pool.values", b.pv_active);
    }
    if (pool.partitioned()) {
        b.pk_frozen = tp.constant({static_cast<int>(pool.frozen.size()), da},
                                  detail::gather_rows_value(pool.keys, pool.frozen, da));
        b.pv_frozen = tp.constant({static_cast<int>(pool.frozen.size()), da},
                                  detail::gather_rows_value(pool.values, pool.frozen, da));
    }

    b.enh.resize(st.adapters.size());
    for (int l : st.adapter_layer_ids) {
        const LayerAdapters& a = st.adapters[static_cast<std::size_t>(l)];
        EnhancerTensors e;
        e.ln_eps = cfg.ln_eps;
        const std::string prefix = "adapter" + std::to_string(l) + ".";
        e.w_down = tp.leaf({d, da}, a.w_down, opt.train);
        e.w_up = tp.leaf({da, d}, a.w_up, opt.train);
        if (opt.train) {
            b.bound.emplace_back(prefix + "w_down", e.w_down);
            b.bound.emplace_back(prefix + "w_up", e.w_up);
        }
        if (opt.query_enhancer) {
            const bool rg = opt.train;
            e.w1 = tp.leaf({3 * d, da}, a.w1, rg);
            e.ln_gain = tp.leaf({da}, a.ln_g, rg);
            e.ln_bias = tp.leaf({da}, a.ln_b, rg);
            e.w2 = tp.leaf({da, d}, a.w2, rg);
            if (opt.train) {
                b.bound.emplace_back(prefix + "w1", e.w1);
                b.bound.emplace_back(prefix + "ln_g", e.ln_gain);
                b.bound.emplace_back(prefix + "ln_b", e.ln_bias);
                b.bound.emplace_back(prefix + "w2", e.w2);
            }
        }
        b.enh[static_cast<std::size_t>(l)] = e;
    }

    b.head_w = tp.leaf({cfg.classes, d}, st.student.weight, opt.train);
    b.head_b = tp.leaf({cfg.classes}, st.student.bias, opt.train);
    if (opt.train) {
        b.bound.emplace_back("head.w", b.head_w);
        b.bound.emplace_back("head.b", b.head_b);
    }
    return b;
}

/// Full routed forward pass. Tokens are embedded with the CLS prepended;
/// after each backbone block, adapter layers read the block's CLS output
/// as the routing query (reading post-block keeps every query sample
/// dependent), enhance it with the global context and memory readout,
/// route the pool (jointly at stage 1, split frozen/active afterwards)
/// and inject the routed prompt back into the CLS row. The classifier
/// feature is the CLS after the final block and injection.
inline ForwardOutput model_forward(Tape& tp, const ModelState& st, const Batch& batch,
                                   const ForwardOptions& opt) {
    const ExperimentConfig& cfg = st.cfg;
    ForwardOutput out;
    out.bind = bind_model(tp, st, opt);
    ForwardBindings& b = out.bind;

    Tensor toks = embed_tokens(tp, b.backbone, batch.tokens, batch.size, cfg.tokens,
                               cfg.input_dim);
    Tensor global_ctx = cls_of(toks);  // the embedded CLS, shared across layers

    const int pool_n = st.pool.size();
    bool first_adapter = true;
    for (int l = 0; l < cfg.layers; ++l) {
        toks = backbone_layer_forward(toks, b.backbone.layer[static_cast<std::size_t>(l)],
                                      cfg.heads, cfg.ln_eps);
        const bool is_adapter = std::find(st.adapter_layer_ids.begin(),
                                          st.adapter_layer_ids.end(),
                                          l) != st.adapter_layer_ids.end();
        if (is_adapter) {
            const EnhancerTensors& enh = b.enh[static_cast<std::size_t>(l)];
            Tensor q = cls_of(toks);
            Tensor q_t = q;
            if (opt.query_enhancer) {
                Tensor r = read_memory(q, b.bank_keys, b.bank_values, cfg.memory_heads);
                q_t = enhance_query(q, global_ctx, r, enh);
            }
            if (first_adapter) {
                out.q_raw0 = q.value();
                out.q_enh0 = q_t.value();
                first_adapter = false;
            }
            Tensor p_out;
            Tensor w_active;
            std::vector<double> full;
            if (st.pool.partitioned()) {
                RoutingResult rf =
                    route_subset(q_t, enh.w_down, b.pk_frozen, b.pv_frozen, cfg.alpha);
                RoutingResult ra =
                    route_subset(q_t, enh.w_down, b.pk_active, b.pv_active, cfg.alpha);
                p_out = combine_residual(rf.prompt, ra.prompt, cfg.lambda_r);
                w_active = ra.weights;
                full = scatter_weights(rf.weights.value(), st.pool.frozen, batch.size, pool_n);
                const auto& wa = ra.weights.value();
                const int na = static_cast<int>(st.pool.active.size());
                for (int bb = 0; bb < batch.size; ++bb)
                    for (int i = 0; i < na; ++i)
                        full[static_cast<std::size_t>(bb) * pool_n +
                             st.pool.active[static_cast<std::size_t>(i)]] =
                            wa[static_cast<std::size_t>(bb) * na + i];
            } else {
                RoutingResult r =
                    route_subset(q_t, enh.w_down, b.pk_active, b.pv_active, cfg.alpha);
                p_out = r.prompt;
                w_active = r.weights;
                full = scatter_weights(r.weights.value(), st.pool.active, batch.size, pool_n);
            }
            out.active_weights.push_back(w_active);
            out.full_weights.push_back(std::move(full));
            toks = inject_cls(toks, p_out, enh.w_up);
        }
    }
    out.features = cls_of(toks);
    out.logits = add_rowvec(matmul_nt(out.features, b.head_w), b.head_b);
    return out;
}

}  // namespace dilkit
