#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dilkit/backbone.hpp"
#include "dilkit/optimizer.hpp"
#include "dilkit/stream.hpp"
#include "oracles.hpp"

using namespace dilkit;

namespace {

ExperimentConfig tiny_cfg() {
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
    cfg.test_per_stage = 64;
    cfg.e_min = 2;
    cfg.e_max = 8;
    cfg.seed = 11;
    return cfg;
}

}  // namespace

TEST_CASE("config validation and hashing") {
    ExperimentConfig cfg = tiny_cfg();
    CHECK_NOTHROW(validate(cfg));
    const std::string h = config_hash(cfg);
    CHECK(h == config_hash(cfg));
    ExperimentConfig other = cfg;
    other.seed = 99;
    CHECK(h != config_hash(other));

    SECTION("bad values are rejected") {
        ExperimentConfig bad = cfg;
        bad.alpha = 1.0;
        CHECK_THROWS_AS(validate(bad), ConfigError);
        bad = cfg;
        bad.heads = 3;  // 32 % 3 != 0
        CHECK_THROWS_AS(validate(bad), ConfigError);
        bad = cfg;
        bad.severity = {0.0};  // wrong length
        CHECK_THROWS_AS(validate(bad), ConfigError);
        bad = cfg;
        bad.drop = {"nonsense"};
        CHECK_THROWS_AS(validate(bad), ConfigError);
        bad = cfg;
        bad.inject_layers = {5};
        CHECK_THROWS_AS(validate(bad), ConfigError);
    }
    SECTION("json round trip and unknown keys") {
        ExperimentConfig back = config_from_json(to_json(cfg));
        CHECK(config_hash(back) == h);
        nlohmann::json j = to_json(cfg);
        j["not_a_field"] = 1;
        CHECK_THROWS_AS(config_from_json(j), ConfigError);
    }
    SECTION("severity defaults and resolved pseudo count") {
        ExperimentConfig d = tiny_cfg();
        CHECK(d.severity_for(0) == 0.0);
        CHECK(d.severity_for(1) == 0.8);
        CHECK(d.resolved_pseudo_count() == d.batch_size);
        d.pseudo_count = 7;
        CHECK(d.resolved_pseudo_count() == 7);
    }
}

TEST_CASE("stream generation") {
    ExperimentConfig cfg = tiny_cfg();

    SECTION("same seed gives bit-identical datasets") {
        SyntheticStream a = generate_stream(cfg, 5);
        SyntheticStream b = generate_stream(cfg, 5);
        REQUIRE(a.stages.size() == b.stages.size());
        for (std::size_t k = 0; k < a.stages.size(); ++k) {
            REQUIRE(a.stages[k].train.size() == b.stages[k].train.size());
            for (std::size_t i = 0; i < a.stages[k].train.size(); ++i) {
                CHECK(a.stages[k].train[i].tokens == b.stages[k].train[i].tokens);
                CHECK(a.stages[k].train[i].label == b.stages[k].train[i].label);
            }
        }
        SyntheticStream c = generate_stream(cfg, 6);
        CHECK(a.stages[0].train[0].tokens != c.stages[0].train[0].tokens);
    }

    SECTION("splits are balanced and sized per config") {
        SyntheticStream s = generate_stream(cfg, 5);
        CHECK(static_cast<int>(s.stages[0].train.size()) == cfg.train_per_stage);
        CHECK(static_cast<int>(s.stages[0].val.size()) == cfg.val_per_stage);
        CHECK(static_cast<int>(s.stages[0].test.size()) == cfg.test_per_stage);
        std::vector<int> counts(static_cast<std::size_t>(cfg.classes), 0);
        for (const Sample& smp : s.stages[0].train) counts[static_cast<std::size_t>(smp.label)]++;
        for (int c : counts) CHECK(c >= cfg.train_per_stage / cfg.classes - 1);
    }

    SECTION("severity zero is the identity transform") {
        Rng rng(3);
        DomainTransform tf = make_transform(8, 0.0, 0.5, rng);
        std::vector<double> tokens = Rng(4).normal_vec(3 * 8);
        std::vector<double> copy = tokens;
        Rng noise(5);
        tf.apply(tokens, 3, 8, noise);
        CHECK(tokens == copy);
    }

    SECTION("transforms are orthogonal") {
        Rng rng(9);
        DomainTransform tf = make_transform(10, 0.8, 0.0, rng);
        // R R^T = I within solver tolerance
        for (int i = 0; i < 10; ++i)
            for (int j = 0; j < 10; ++j) {
                double dot = 0.0;
                for (int k = 0; k < 10; ++k)
                    dot += tf.rotation[i * 10 + k] * tf.rotation[j * 10 + k];
                CHECK(std::fabs(dot - (i == j ? 1.0 : 0.0)) < 1e-10);
            }
    }
}

TEST_CASE("severity-0.8 stages measurably shift backbone features") {
    // Train a linear probe on prompt-free backbone features of stage 1 and
    // compare its accuracy on held-out stage-1 data vs a severity-0.8
    // stage. Averaged over 5 seeds the drop must exceed 5 points.
    double drop_sum = 0.0;
    for (int seed = 1; seed <= 5; ++seed) {
        ExperimentConfig cfg = tiny_cfg();
        cfg.seed = static_cast<std::uint64_t>(seed * 311);
        cfg.train_per_stage = 240;
        cfg.test_per_stage = 120;
        cfg.severity = {0.0, 0.8};
        SyntheticStream stream = generate_stream(cfg, cfg.seed);
        Backbone bb = make_backbone(cfg, Rng(cfg.seed).child("backbone"));

        auto features_of = [&](const std::vector<Sample>& samples) {
            std::vector<std::vector<double>> feats;
            const int bs = 32;
            for (std::size_t start = 0; start < samples.size(); start += bs) {
                const std::size_t end = std::min(samples.size(), start + bs);
                std::vector<int> idx;
                for (std::size_t i = start; i < end; ++i) idx.push_back(static_cast<int>(i));
                Batch b = make_batch(samples, idx);
                Tape tp;
                BackboneTensors bt = bind_backbone(tp, bb);
                Tensor toks = embed_tokens(tp, bt, b.tokens, b.size, cfg.tokens, cfg.input_dim);
                for (int l = 0; l < cfg.layers; ++l)
                    toks = backbone_layer_forward(toks, bt.layer[static_cast<std::size_t>(l)],
                                                  cfg.heads, cfg.ln_eps);
                const auto& f = cls_of(toks).value();
                for (int i = 0; i < b.size; ++i)
                    feats.emplace_back(f.begin() + i * cfg.feature_dim,
                                       f.begin() + (i + 1) * cfg.feature_dim);
            }
            return feats;
        };

        auto train_feats = features_of(stream.stages[0].train);
        std::vector<int> train_labels;
        for (const Sample& s : stream.stages[0].train) train_labels.push_back(s.label);

        // logistic-regression probe
        std::vector<double> w(static_cast<std::size_t>(cfg.classes) * cfg.feature_dim, 0.0);
        std::vector<double> b(static_cast<std::size_t>(cfg.classes), 0.0);
        std::vector<Param> params;
        params.push_back(make_param("w", &w, cfg.classes, cfg.feature_dim));
        params.push_back(make_param("b", &b, 1, cfg.classes, false));
        AdamW opt;
        for (int epoch = 0; epoch < 40; ++epoch) {
            Tape tp;
            std::vector<double> flat;
            for (const auto& f : train_feats) flat.insert(flat.end(), f.begin(), f.end());
            Tensor x = tp.constant({static_cast<int>(train_feats.size()), cfg.feature_dim}, flat);
            Tensor wt = tp.leaf({cfg.classes, cfg.feature_dim}, w, true);
            Tensor bt2 = tp.leaf({cfg.classes}, b, true);
            Tensor loss = cross_entropy(add_rowvec(matmul_nt(x, wt), bt2), train_labels);
            tp.backward(loss);
            params[0].set_grad(tp.grad(wt));
            params[1].set_grad(tp.grad(bt2));
            opt.step(params, 0.05);
        }

        auto probe_acc = [&](const std::vector<Sample>& samples) {
            auto feats = features_of(samples);
            int hits = 0;
            for (std::size_t i = 0; i < feats.size(); ++i) {
                int best = 0;
                double best_z = -1e300;
                for (int c = 0; c < cfg.classes; ++c) {
                    double z = b[static_cast<std::size_t>(c)];
                    for (int d = 0; d < cfg.feature_dim; ++d)
                        z += w[static_cast<std::size_t>(c) * cfg.feature_dim + d] * feats[i][static_cast<std::size_t>(d)];
                    if (z > best_z) {
                        best_z = z;
                        best = c;
                    }
                }
                if (best == samples[i].label) ++hits;
            }
            return static_cast<double>(hits) / static_cast<double>(samples.size());
        };

        const double same = probe_acc(stream.stages[0].test);
        const double shifted = probe_acc(stream.stages[1].test);
        drop_sum += same - shifted;
    }
    CHECK(drop_sum / 5.0 > 0.05);
}
