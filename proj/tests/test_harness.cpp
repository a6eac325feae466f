#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dilkit/checkpoint.hpp"
#include "dilkit/report.hpp"
#include "dilkit/trainer.hpp"
#include "oracles.hpp"

using namespace dilkit;

namespace {

ExperimentConfig mini_cfg(std::uint64_t seed = 21) {
    ExperimentConfig cfg;
    cfg.stages = 2;
    cfg.classes = 3;
    cfg.feature_dim = 32;
    cfg.bottleneck_dim = 16;
    cfg.pool_size = 12;
    cfg.memory_slots = 4;
    cfg.layers = 2;
    cfg.heads = 4;
    cfg.memory_heads = 4;
    cfg.mlp_ratio = 2;
    cfg.tokens = 6;
    cfg.input_dim = 12;
    cfg.batch_size = 32;
    cfg.epochs = 3;
    cfg.patience = 3;
    cfg.train_per_stage = 128;
    cfg.val_per_stage = 48;
    cfg.test_per_stage = 48;
    cfg.e_min = 2;
    cfg.e_max = 8;
    cfg.window = 10;
    cfg.seed = seed;
    return cfg;
}

Batch first_batch(const std::vector<Sample>& samples, int n) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    return make_batch(samples, idx);
}

int event_index(const RunLog& log, const std::string& needle) {
    for (std::size_t i = 0; i < log.events.size(); ++i)
        if (log.events[i].rfind(needle, 0) == 0) return static_cast<int>(i);
    return -1;
}

}  // namespace

TEST_CASE("zero adapters leave the backbone output bit-identical") {
    ExperimentConfig cfg = mini_cfg();
    SyntheticStream stream = generate_stream(cfg, cfg.seed);
    ModelState st = init_state(cfg);
    for (LayerAdapters& a : st.adapters) {
        std::fill(a.w2.begin(), a.w2.end(), 0.0);    // enhancer branch off
        std::fill(a.w_up.begin(), a.w_up.end(), 0.0);  // injection off
    }
    Batch batch = first_batch(stream.stages[0].train, 8);

    Tape tp;
    ForwardOutput out = model_forward(tp, st, batch, eval_options(cfg));

    // prompt-free reference: embedding plus backbone blocks only
    Tape tp2;
    BackboneTensors bt = bind_backbone(tp2, st.backbone);
    Tensor toks = embed_tokens(tp2, bt, batch.tokens, batch.size, cfg.tokens, cfg.input_dim);
    for (int l = 0; l < cfg.layers; ++l)
        toks = backbone_layer_forward(toks, bt.layer[static_cast<std::size_t>(l)], cfg.heads,
                                      cfg.ln_eps);
    CHECK(out.features.value() == cls_of(toks).value());
}

TEST_CASE("frozen rows, teacher and backbone are bitwise stable across stage training") {
    ExperimentConfig cfg = mini_cfg(31);
    SyntheticStream stream = generate_stream(cfg, cfg.seed);
    ModelState st = init_state(cfg);
    RunLog log;
    run_stage(st, stream.stages[0], 1, log);

    // force the stage-2 protocol by hand so the pre-training snapshot sits
    // after expansion
    DriftReport rep = measure_drift(st, stream.stages[1].train);
    Rng er = Rng(cfg.seed).child("expand-test");
    expand_pool(st.pool, 4, er);
    (void)rep;

    const std::vector<int> frozen = st.pool.frozen;
    std::vector<double> frozen_keys, frozen_values;
    for (int f : frozen) {
        frozen_keys.insert(frozen_keys.end(),
                           st.pool.keys.begin() + static_cast<std::ptrdiff_t>(f) * cfg.bottleneck_dim,
                           st.pool.keys.begin() + static_cast<std::ptrdiff_t>(f + 1) * cfg.bottleneck_dim);
        frozen_values.insert(frozen_values.end(),
                             st.pool.values.begin() + static_cast<std::ptrdiff_t>(f) * cfg.bottleneck_dim,
                             st.pool.values.begin() + static_cast<std::ptrdiff_t>(f + 1) * cfg.bottleneck_dim);
    }
    const ClassifierHead teacher_before = st.teacher;
    const std::vector<double> backbone_embed = st.backbone.embed;
    const std::vector<double> backbone_wq0 = st.backbone.layer[0].wq;

    StageLog slog;
    slog.stage = 2;
    train_stage(st, stream.stages[1], 2, log, slog);

    std::size_t o = 0;
    for (int f : frozen)
        for (int j = 0; j < cfg.bottleneck_dim; ++j, ++o) {
            CHECK(st.pool.keys[static_cast<std::size_t>(f) * cfg.bottleneck_dim + j] ==
                  frozen_keys[o]);
            CHECK(st.pool.values[static_cast<std::size_t>(f) * cfg.bottleneck_dim + j] ==
                  frozen_values[o]);
        }
    CHECK(st.teacher.weight == teacher_before.weight);
    CHECK(st.teacher.bias == teacher_before.bias);
    CHECK(st.backbone.embed == backbone_embed);
    CHECK(st.backbone.layer[0].wq == backbone_wq0);
}

TEST_CASE("stage protocol ordering is logged and correct") {
    ExperimentConfig cfg = mini_cfg(41);
    ExperimentResult res = run_experiment(cfg);
    const RunLog& log = res.log;
    const int t1_end = event_index(log, "stage1:train_end");
    const int t1_stats = event_index(log, "stage1:stats_merge");
    const int t1_teacher = event_index(log, "stage1:teacher_snapshot");
    const int t2_drift = event_index(log, "stage2:drift_measure");
    const int t2_begin = event_index(log, "stage2:train_begin");
    REQUIRE(t1_end >= 0);
    REQUIRE(t1_stats >= 0);
    REQUIRE(t1_teacher >= 0);
    REQUIRE(t2_begin >= 0);
    CHECK(t1_end < t1_stats);
    CHECK(t1_stats < t1_teacher);
    CHECK(t1_teacher < t2_begin);
    REQUIRE(t2_drift >= 0);
    CHECK(t2_drift < t2_begin);
    const int t2_expand = event_index(log, "stage2:expand");
    if (t2_expand >= 0) {
        CHECK(t2_drift < t2_expand);
        CHECK(t2_expand < t2_begin);
    }
}

TEST_CASE("stage >= 2 without assets is a state error") {
    ExperimentConfig cfg = mini_cfg();
    SyntheticStream stream = generate_stream(cfg, cfg.seed);
    ModelState st = init_state(cfg);
    RunLog log;
    StageLog slog;
    CHECK_THROWS_AS(train_stage(st, stream.stages[1], 2, log, slog), ContractError);
}

TEST_CASE("measure_drift rejects an empty loader") {
    ExperimentConfig cfg = mini_cfg();
    ModelState st = init_state(cfg);
    std::vector<Sample> tiny;  // smaller than one batch
    CHECK_THROWS_AS(measure_drift(st, tiny), ContractError);
}

TEST_CASE("identical config and seed reproduce the run bit-exactly") {
    ExperimentConfig cfg = mini_cfg(51);
    ExperimentResult a = run_experiment(cfg);
    ExperimentResult b = run_experiment(cfg);
    REQUIRE(a.r.rows.size() == b.r.rows.size());
    for (std::size_t i = 0; i < a.r.rows.size(); ++i) CHECK(a.r.rows[i] == b.r.rows[i]);
    CHECK(a.log.events == b.log.events);
    CHECK(summary_json(a).dump() == summary_json(b).dump());
}

TEST_CASE("loss set follows the stage and the drop toggles") {
    SECTION("stage 1 trains on ce + div only, unweighted") {
        ExperimentConfig cfg = mini_cfg(61);
        cfg.stages = 1;
        cfg.severity = {0.0};
        ExperimentResult res = run_experiment(cfg);
        for (const EpochRow& r : res.log.epochs) {
            CHECK(r.loss.count("ce") == 1);
            CHECK(r.loss.count("div") == 1);
            CHECK(r.loss.count("real") == 0);
            CHECK(r.loss.count("pseudo") == 0);
            CHECK(r.loss.count("norm") == 0);
            CHECK(r.weight.at("ce") == 1.0);
        }
        CHECK(event_index(res.log, "stage1:uw_init") == -1);
    }
    SECTION("stage 2 runs the full five-loss set under UW") {
        ExperimentConfig cfg = mini_cfg(62);
        ExperimentResult res = run_experiment(cfg);
        bool saw_stage2 = false;
        for (const EpochRow& r : res.log.epochs) {
            if (r.stage != 2) continue;
            saw_stage2 = true;
            for (const char* n : {"ce", "real", "pseudo", "div", "norm"})
                CHECK(r.loss.count(n) == 1);
        }
        CHECK(saw_stage2);
        CHECK(event_index(res.log, "stage2:uw_init") >= 0);
    }
    SECTION("drops remove exactly the targeted terms") {
        ExperimentConfig cfg = mini_cfg(63);
        cfg.drop = {"distill", "norm"};
        ExperimentResult res = run_experiment(cfg);
        for (const EpochRow& r : res.log.epochs) {
            CHECK(r.loss.count("real") == 0);
            CHECK(r.loss.count("norm") == 0);
            if (r.stage == 2) CHECK(r.loss.count("pseudo") == 1);
        }
    }
    SECTION("dropping uw falls back to the plain sum") {
        ExperimentConfig cfg = mini_cfg(64);
        cfg.drop = {"uw"};
        ExperimentResult res = run_experiment(cfg);
        for (const EpochRow& r : res.log.epochs)
            for (const auto& [name, w] : r.weight) CHECK(w == 1.0);
        CHECK(event_index(res.log, "stage2:uw_init") == -1);
    }
    SECTION("dropping pudd disables drift measurement and expansion") {
        ExperimentConfig cfg = mini_cfg(65);
        cfg.drop = {"pudd"};
        ExperimentResult res = run_experiment(cfg);
        CHECK(event_index(res.log, "stage2:drift_measure") == -1);
        CHECK(event_index(res.log, "stage2:expand") == -1);
        CHECK(res.log.stages[1].pool_size_after == cfg.pool_size);
    }
}

TEST_CASE("dropping div equals computing it times zero, gradient-wise") {
    ExperimentConfig cfg = mini_cfg(71);
    SyntheticStream stream = generate_stream(cfg, cfg.seed);
    ModelState base = init_state(cfg);
    RunLog log;
    run_stage(base, stream.stages[0], 1, log);
    Batch batch = first_batch(stream.stages[1].train, cfg.batch_size);

    auto grads_of = [&](bool with_div, bool zero_scaled) {
        ModelState st = base;  // value copy, including the pseudo rng
        Tape tp;
        ForwardOptions fo;
        fo.train = true;
        ForwardOutput out = model_forward(tp, st, batch, fo);
        LossToggles tg = stage_toggles(cfg, 2);
        tg.uw = false;
        tg.div = with_div;
        tg.div_zero_scale = zero_scaled;
        LossBundle lb = assemble_losses(tp, st, batch, out, tg);
        tp.backward(lb.total);
        return std::pair<std::vector<double>, std::vector<double>>(
            tp.grad(out.bind.pv_active), tp.grad(out.bind.pk_active));
    };

    auto dropped = grads_of(false, false);
    auto zeroed = grads_of(true, true);
    CHECK(dropped.first == zeroed.first);
    CHECK(dropped.second == zeroed.second);
}

TEST_CASE("kd losses reach the student head only in the full model") {
    ExperimentConfig cfg = mini_cfg(81);
    SyntheticStream stream = generate_stream(cfg, cfg.seed);
    ModelState st = init_state(cfg);
    RunLog log;
    run_stage(st, stream.stages[0], 1, log);
    Batch batch = first_batch(stream.stages[1].train, 16);

    Tape tp;
    ForwardOptions fo;
    fo.train = true;
    ForwardOutput out = model_forward(tp, st, batch, fo);
    Tensor real = real_kd_loss(tp, out.features.value(), batch.size, st.teacher,
                               out.bind.head_w, out.bind.head_b, cfg.kd_temperature);
    PseudoSample ps = sample_pseudo(st.cumulative, 16, st.train_rng, cfg.variance_floor);
    Tensor pseudo = pseudo_kd_loss(tp, ps.features, 16, st.teacher, out.bind.head_w,
                                   out.bind.head_b, cfg.kd_temperature);
    tp.backward(add(real, pseudo));

    auto all_zero = [](const std::vector<double>& g) {
        for (double x : g)
            if (x != 0.0) return false;
        return true;
    };
    CHECK(all_zero(tp.grad(out.bind.pv_active)));
    CHECK(all_zero(tp.grad(out.bind.pk_active)));
    for (int l : st.adapter_layer_ids) {
        CHECK(all_zero(tp.grad(out.bind.enh[static_cast<std::size_t>(l)].w_down)));
        CHECK(all_zero(tp.grad(out.bind.enh[static_cast<std::size_t>(l)].w_up)));
    }
    bool head_touched = false;
    for (double x : tp.grad(out.bind.head_w))
        if (x != 0.0) head_touched = true;
    CHECK(head_touched);
}

TEST_CASE("memory writes never disturb an existing forward") {
    ExperimentConfig cfg = mini_cfg(91);
    SyntheticStream stream = generate_stream(cfg, cfg.seed);
    ModelState st = init_state(cfg);
    Batch batch = first_batch(stream.stages[0].train, 8);

    Tape tp;
    ForwardOutput out = model_forward(tp, st, batch, eval_options(cfg));
    const std::vector<double> logits_before = out.logits.value();
    const MemoryBank bank_before = st.bank;

    write_memory_ema(st.bank, out.q_raw0, out.q_enh0, batch.size);
    CHECK(out.logits.value() == logits_before);  // tape untouched

    ModelState replay = st;
    replay.bank = bank_before;
    Tape tp2;
    ForwardOutput out2 = model_forward(tp2, replay, batch, eval_options(cfg));
    CHECK(out2.logits.value() == logits_before);
}

TEST_CASE("metric formulas") {
    SECTION("avg_acc hand case") {
        RMatrix r;
        r.rows = {{0.9}, {0.8, 0.85}};
        CHECK(std::fabs(avg_acc(r) - 0.8625) < 1e-15);
        CHECK(std::fabs(avg_f(r) - 0.1) < 1e-15);
    }
    SECTION("single stage") {
        RMatrix r;
        r.rows = {{0.77}};
        CHECK(avg_acc(r) == 0.77);
        CHECK_THROWS_AS(avg_f(r), ContractError);
    }
    SECTION("constant matrices") {
        RMatrix r;
        r.rows = {{0.6}, {0.6, 0.6}, {0.6, 0.6, 0.6}};
        CHECK(std::fabs(avg_acc(r) - 0.6) < 1e-15);
        CHECK(avg_f(r) == 0.0);
    }
    SECTION("monotone columns do not forget") {
        RMatrix r;
        r.rows = {{0.5}, {0.7, 0.6}, {0.8, 0.7, 0.9}};
        CHECK(avg_f(r) == 0.0);
    }
    SECTION("incomplete matrices are rejected") {
        RMatrix r;
        r.rows = {{0.9}, {0.8}};
        CHECK_THROWS_AS(avg_acc(r), ContractError);
    }
    SECTION("accuracy and macro f1 against hand counts") {
        std::vector<int> pred{0, 1, 2, 2, 1, 0};
        std::vector<int> truth{0, 1, 1, 2, 1, 2};
        CHECK(accuracy(pred, truth) == Catch::Approx(4.0 / 6.0).margin(1e-15));
        CHECK(accuracy({1, 1}, {1, 1}) == 1.0);
        const double f1 = macro_f1(pred, truth, 3);
        CHECK(f1 > 0.0);
        CHECK(f1 <= 1.0);
        CHECK(macro_f1({0, 1}, {0, 1}, 2) == 1.0);
    }
}

TEST_CASE("cross composition diagonal reproduces the stage evaluations") {
    ExperimentConfig cfg = mini_cfg(101);
    SyntheticStream stream = generate_stream(cfg, cfg.seed);
    ModelState final_state;
    ExperimentResult res = run_experiment(cfg, &stream, &final_state);
    CrossComposition xc = cross_composition(cfg, res.snapshots, stream);
    REQUIRE(xc.grid.size() == 2);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j <= i; ++j)
            CHECK(xc.grid[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)]
                      .accuracy[static_cast<std::size_t>(j)] == res.r.at(i, j));
}

TEST_CASE("checkpoints") {
    ExperimentConfig cfg = mini_cfg(111);
    cfg.stages = 2;
    SyntheticStream stream = generate_stream(cfg, cfg.seed);
    ModelState st = init_state(cfg);
    RunLog log;
    run_stage(st, stream.stages[0], 1, log);
    const std::string dir = "/tmp/dilkit_test_ckpt";
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/ckpt.json";
    save_checkpoint(st, path);

    SECTION("round trip is forward bit-identical") {
        ModelState loaded = load_checkpoint(path);
        Batch batch = first_batch(stream.stages[0].test, 8);
        Tape ta, tb;
        ForwardOutput oa = model_forward(ta, st, batch, eval_options(cfg));
        ForwardOutput ob = model_forward(tb, loaded, batch, eval_options(cfg));
        CHECK(oa.logits.value() == ob.logits.value());
        CHECK(oa.features.value() == ob.features.value());
        CHECK(loaded.has_teacher == st.has_teacher);
        CHECK(loaded.cumulative.mean == st.cumulative.mean);
        CHECK(loaded.monitors[0].entropies == st.monitors[0].entropies);
    }
    SECTION("wrong expected config is refused") {
        ExperimentConfig other = cfg;
        other.seed = 999;
        CHECK_THROWS_AS(load_checkpoint(path, other), CheckpointError);
        CHECK_NOTHROW(load_checkpoint(path, cfg));
    }
    SECTION("version tampering is refused") {
        std::ifstream in(path);
        nlohmann::json j;
        in >> j;
        j["version"] = 999;
        const std::string bad = dir + "/bad_version.json";
        std::ofstream out(bad);
        out << j.dump();
        out.close();
        CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);
    }
    SECTION("truncated files are a corrupt-file error") {
        std::ifstream in(path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        const std::string bad = dir + "/truncated.json";
        std::ofstream out(bad);
        out << text.substr(0, text.size() / 2);
        out.close();
        CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);
    }
    SECTION("base64 round trip") {
        Rng rng(5);
        auto v = rng.normal_vec(257);
        CHECK(detail::decode_doubles(detail::encode_doubles(v)) == v);
        CHECK_THROWS_AS(detail::decode_doubles("@@@@"), CheckpointError);
        CHECK_THROWS_AS(detail::decode_doubles("abc"), CheckpointError);
    }
}

TEST_CASE("checkpoints store statistics, never data: size is train-set independent") {
    auto buffer_census = [](const nlohmann::json& j) {
        // total decoded doubles across every base64 buffer
        std::size_t total = 0;
        std::function<void(const nlohmann::json&)> walk = [&](const nlohmann::json& node) {
            if (node.is_object() || node.is_array()) {
                for (const auto& child : node) walk(child);
            } else if (node.is_string()) {
                const std::string s = node.get<std::string>();
                if (!s.empty() && s.size() % 4 == 0 &&
                    s.find_first_not_of(
                        "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/=") ==
                        std::string::npos) {
                    try {
                        total += detail::decode_doubles(s).size();
                    } catch (const CheckpointError&) {
                    }
                }
            }
        };
        walk(j);
        return total;
    };

    ExperimentConfig small = mini_cfg(121);
    small.stages = 1;
    small.severity = {0.0};
    ExperimentConfig big = small;
    big.train_per_stage = small.train_per_stage * 2;

    auto run_and_census = [&](const ExperimentConfig& cfg) {
        SyntheticStream stream = generate_stream(cfg, cfg.seed);
        ModelState st = init_state(cfg);
        RunLog log;
        run_stage(st, stream.stages[0], 1, log);
        return buffer_census(checkpoint_to_json(st));
    };

    const std::size_t census_small = run_and_census(small);
    const std::size_t census_big = run_and_census(big);
    CHECK(census_small == census_big);

    // and the total is exactly the parameter + statistics budget
    const ExperimentConfig& c = small;
    const std::size_t pool = 2u * c.pool_size * c.bottleneck_dim;
    const std::size_t bank = 2u * c.memory_slots * c.feature_dim;
    const std::size_t adapters =
        static_cast<std::size_t>(c.layers) *
        (3u * c.feature_dim * c.bottleneck_dim + 2u * c.bottleneck_dim +
         c.bottleneck_dim * c.feature_dim + c.feature_dim * c.bottleneck_dim +
         c.bottleneck_dim * c.feature_dim);
    const std::size_t heads = 2u * (c.classes * c.feature_dim + c.classes);
    const std::size_t stats = 2u * c.classes * c.feature_dim;
    CHECK(census_small == pool + bank + adapters + heads + stats);
}

TEST_CASE("report artifacts are well formed") {
    ExperimentConfig cfg = mini_cfg(131);
    SyntheticStream stream = generate_stream(cfg, cfg.seed);
    ModelState final_state;
    ExperimentResult res = run_experiment(cfg, &stream, &final_state);

    SECTION("csv schema: one row per (stage, epoch)") {
        const std::string csv = metrics_csv(res.log);
        std::istringstream is(csv);
        std::string line;
        std::getline(is, line);
        CHECK(line ==
              "stage,epoch,lr,loss_total,loss_ce,loss_real,loss_pseudo,loss_div,loss_norm,"
              "w_ce,w_real,w_pseudo,w_div,w_norm,val_acc");
        int rows = 0;
        while (std::getline(is, line))
            if (!line.empty()) {
                ++rows;
                CHECK(std::count(line.begin(), line.end(), ',') == 14);
            }
        CHECK(rows == static_cast<int>(res.log.epochs.size()));
    }
    SECTION("summary carries drift, expansion and metric fields") {
        nlohmann::json j = summary_json(res);
        CHECK(j.contains("rmatrix"));
        CHECK(j.contains("avg_acc"));
        CHECK(j.at("stages").size() == 2);
        CHECK(j.at("stages")[1].contains("mean_drift"));
        CHECK(j.at("stages")[1].contains("drift_scores"));
        CHECK(j.at("config_hash").get<std::string>() == config_hash(cfg));
    }
    SECTION("run log round trips through json") {
        RunLog back = runlog_from_json(runlog_json(res.log));
        CHECK(back.events == res.log.events);
        REQUIRE(back.epochs.size() == res.log.epochs.size());
        for (std::size_t i = 0; i < back.epochs.size(); ++i) {
            CHECK(back.epochs[i].loss == res.log.epochs[i].loss);
            CHECK(back.epochs[i].val_acc == res.log.epochs[i].val_acc);
        }
        REQUIRE(back.stages.size() == res.log.stages.size());
        CHECK(back.stages[1].mean_drift == res.log.stages[1].mean_drift);
    }
    SECTION("svg plots are produced") {
        const std::string heat = selection_heatmap_svg(final_state, stream.stages.back().test);
        CHECK(heat.rfind("<svg", 0) == 0);
        CHECK(heat.find("</svg>") != std::string::npos);
        const std::string hist = usage_histogram_svg(final_state, stream.stages.back().test);
        CHECK(hist.find("<rect") != std::string::npos);
        const std::string uw = uw_weights_svg(res.log);
        CHECK(uw.find("polyline") != std::string::npos);
    }
}

TEST_CASE("exploding training aborts with the offending loss name") {
    ExperimentConfig cfg = mini_cfg(151);
    cfg.stages = 1;
    cfg.severity = {0.0};
    cfg.learning_rate = 1e18;  // guaranteed blow-up
    cfg.epochs = 4;
    CHECK_THROWS_AS(run_experiment(cfg), NumericalAbort);
}

TEST_CASE("uw state persists across stages unless reset is requested") {
    ExperimentConfig cfg = mini_cfg(141);
    cfg.stages = 3;
    cfg.severity = {0.0, 0.8, 0.8};
    ExperimentResult res = run_experiment(cfg);
    int inits = 0;
    for (const std::string& e : res.log.events)
        if (e.find("uw_init") != std::string::npos) ++inits;
    CHECK(inits == 1);

    cfg.uw_reset_per_stage = true;
    ExperimentResult res2 = run_experiment(cfg);
    inits = 0;
    for (const std::string& e : res2.log.events)
        if (e.find("uw_init") != std::string::npos) ++inits;
    CHECK(inits == 2);
}
