#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dilkit/errors.hpp"

namespace dilkit {

/// Every knob of an experiment. Defaults are the reference values where
/// the method defines one (alpha, lambda_r, tau_s, window, drift weights,
/// eta, d_max, expansion bounds, theta, temperature, optimizer settings,
/// pool/memory sizes) and desk-scale sizes for the synthetic pipeline
/// (feature_dim 64 vs 768, bottleneck 32 vs 512, 4 layers, 3 classes).
/// Desk-scale overrides live in the config file, never silently in code.
struct ExperimentConfig {
    int stages = 3;        // T
    int classes = 3;       // C
    int feature_dim = 64;  // D (reference scale: 768)
    int bottleneck_dim = 32;  // d_a (reference scale: 512)
    int pool_size = 60;       // N
    int memory_slots = 9;     // M
    int layers = 4;           // L
    int heads = 4;            // backbone attention heads
    int memory_heads = 4;     // memory readout heads
    int mlp_ratio = 4;
    int tokens = 16;     // S
    int input_dim = 32;  // token channel count

    double alpha = 1.5;
    double lambda_r = 0.1;
    double tau_s = 0.01;
    int window = 100;
    double drift_alpha = 1.0;
    double drift_beta = 0.5;
    double eta = 0.1;
    double drift_eps = 1e-10;
    double d_max = 5.0;
    int e_min = 10;
    int e_max = 80;
    double theta = 0.7;
    double kd_temperature = 2.0;
    int pseudo_count = 0;  // 0 -> batch_size

    int batch_size = 64;
    int epochs = 100;
    int patience = 5;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    std::uint64_t seed = 1;
    double ema_gamma = 0.99;
    double variance_floor = 1e-8;
    double ln_eps = 1e-5;

    int train_per_stage = 2000;
    int val_per_stage = 256;
    int test_per_stage = 512;
    double sample_noise = 0.3;
    double domain_noise = 0.5;
    std::vector<double> severity;     // per stage; empty -> [0, 0.8, 0.8, ...]
    std::vector<int> inject_layers;   // empty -> all layers
    bool uw_reset_per_stage = false;
    std::vector<std::string> drop;    // disabled components

    double severity_for(int stage_idx) const {
        if (!severity.empty()) return severity[static_cast<std::size_t>(stage_idx)];
        return stage_idx == 0 ? 0.0 : 0.8;
    }

    std::vector<int> adapter_layers() const {
        if (!inject_layers.empty()) return inject_layers;
        std::vector<int> all(static_cast<std::size_t>(layers));
        for (int l = 0; l < layers; ++l) all[static_cast<std::size_t>(l)] = l;
        return all;
    }

    int resolved_pseudo_count() const { return pseudo_count > 0 ? pseudo_count : batch_size; }

    bool dropped(const std::string& component) const {
        for (const auto& d : drop)
            if (d == component) return true;
        return false;
    }
};

inline const std::set<std::string>& valid_drop_components() {
    static const std::set<std::string> kComponents{"pseudo", "distill",        "div", "norm",
                                                   "uw",     "query-enhancer", "pudd"};
    return kComponents;
}

inline void validate(const ExperimentConfig& c) {
    auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
    if (c.stages < 1) fail("stages must be >= 1");
    if (c.classes < 2) fail("classes must be >= 2");
    if (c.feature_dim < 1 || c.bottleneck_dim < 1 || c.pool_size < 1 || c.memory_slots < 1 ||
        c.layers < 1 || c.tokens < 1 || c.input_dim < 1)
        fail("dimensions must be positive");
    if (c.heads < 1 || c.feature_dim % c.heads != 0)
        fail("feature_dim must be divisible by heads");
    if (c.memory_heads < 1 || c.feature_dim % c.memory_heads != 0)
        fail("feature_dim must be divisible by memory_heads");
    if (!(c.alpha > 1.0 && c.alpha <= 2.0)) fail("alpha must lie in (1, 2]");
    if (c.window < 1) fail("window must be >= 1");
    if (c.e_min < 1 || c.e_max < c.e_min) fail("expansion bounds must satisfy 1 <= e_min <= e_max");
    if (c.d_max <= 0.0) fail("d_max must be positive");
    if (c.kd_temperature <= 0.0) fail("kd_temperature must be positive");
    if (c.batch_size < 1 || c.epochs < 1 || c.patience < 1) fail("training sizes must be positive");
    if (c.learning_rate <= 0.0) fail("learning_rate must be positive");
    if (!(c.ema_gamma >= 0.0 && c.ema_gamma <= 1.0)) fail("ema_gamma must lie in [0, 1]");
    if (c.train_per_stage < c.batch_size) fail("train_per_stage must cover at least one batch");
    if (c.val_per_stage < 1 || c.test_per_stage < 1) fail("eval split sizes must be positive");
    if (!c.severity.empty() && static_cast<int>(c.severity.size()) != c.stages)
        fail("severity list must have one entry per stage");
    for (double s : c.severity)
        if (s < 0.0 || s > 1.0) fail("severity entries must lie in [0, 1]");
    for (int l : c.inject_layers)
        if (l < 0 || l >= c.layers) fail("inject_layers entries must lie in [0, layers)");
    for (const auto& d : c.drop)
        if (!valid_drop_components().count(d)) fail("unknown drop component '" + d + "'");
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["stages"] = c.stages;
    j["classes"] = c.classes;
    j["feature_dim"] = c.feature_dim;
    j["bottleneck_dim"] = c.bottleneck_dim;
    j["pool_size"] = c.pool_size;
    j["memory_slots"] = c.memory_slots;
    j["layers"] = c.layers;
    j["heads"] = c.heads;
    j["memory_heads"] = c.memory_heads;
    j["mlp_ratio"] = c.mlp_ratio;
    j["tokens"] = c.tokens;
    j["input_dim"] = c.input_dim;
    j["alpha"] = c.alpha;
    j["lambda_r"] = c.lambda_r;
    j["tau_s"] = c.tau_s;
    j["window"] = c.window;
    j["drift_alpha"] = c.drift_alpha;
    j["drift_beta"] = c.drift_beta;
    j["eta"] = c.eta;
    j["drift_eps"] = c.drift_eps;
    j["d_max"] = c.d_max;
    j["e_min"] = c.e_min;
    j["e_max"] = c.e_max;
    j["theta"] = c.theta;
    j["kd_temperature"] = c.kd_temperature;
    j["pseudo_count"] = c.pseudo_count;
    j["batch_size"] = c.batch_size;
    j["epochs"] = c.epochs;
    j["patience"] = c.patience;
    j["learning_rate"] = c.learning_rate;
    j["weight_decay"] = c.weight_decay;
    j["seed"] = c.seed;
    j["ema_gamma"] = c.ema_gamma;
    j["variance_floor"] = c.variance_floor;
    j["ln_eps"] = c.ln_eps;
    j["train_per_stage"] = c.train_per_stage;
    j["val_per_stage"] = c.val_per_stage;
    j["test_per_stage"] = c.test_per_stage;
    j["sample_noise"] = c.sample_noise;
    j["domain_noise"] = c.domain_noise;
    j["severity"] = c.severity;
    j["inject_layers"] = c.inject_layers;
    j["uw_reset_per_stage"] = c.uw_reset_per_stage;
    j["drop"] = c.drop;
    return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    const nlohmann::json defaults = to_json(c);
    for (const auto& [key, value] : j.items()) {
        if (!defaults.contains(key))
            throw ConfigError("config: unknown key '" + key + "'");
        (void)value;
    }
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) {
            try {
                field = j.at(key).get<std::decay_t<decltype(field)>>();
            } catch (const nlohmann::json::exception& e) {
                throw ConfigError("config: bad value for '" + std::string(key) + "': " + e.what());
            }
        }
    };
    get("stages", c.stages);
    get("classes", c.classes);
    get("feature_dim", c.feature_dim);
    get("bottleneck_dim", c.bottleneck_dim);
    get("pool_size", c.pool_size);
    get("memory_slots", c.memory_slots);
    get("layers", c.layers);
    get("heads", c.heads);
    get("memory_heads", c.memory_heads);
    get("mlp_ratio", c.mlp_ratio);
    get("tokens", c.tokens);
    get("input_dim", c.input_dim);
    get("alpha", c.alpha);
    get("lambda_r", c.lambda_r);
    get("tau_s", c.tau_s);
    get("window", c.window);
    get("drift_alpha", c.drift_alpha);
    get("drift_beta", c.drift_beta);
    get("eta", c.eta);
    get("drift_eps", c.drift_eps);
    get("d_max", c.d_max);
    get("e_min", c.e_min);
    get("e_max", c.e_max);
    get("theta", c.theta);
    get("kd_temperature", c.kd_temperature);
    get("pseudo_count", c.pseudo_count);
    get("batch_size", c.batch_size);
    get("epochs", c.epochs);
    get("patience", c.patience);
    get("learning_rate", c.learning_rate);
    get("weight_decay", c.weight_decay);
    get("seed", c.seed);
    get("ema_gamma", c.ema_gamma);
    get("variance_floor", c.variance_floor);
    get("ln_eps", c.ln_eps);
    get("train_per_stage", c.train_per_stage);
    get("val_per_stage", c.val_per_stage);
    get("test_per_stage", c.test_per_stage);
    get("sample_noise", c.sample_noise);
    get("domain_noise", c.domain_noise);
    get("severity", c.severity);
    get("inject_layers", c.inject_layers);
    get("uw_reset_per_stage", c.uw_reset_per_stage);
    get("drop", c.drop);
    validate(c);
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: parse failure in '" + path + "': " + e.what());
    }
    return config_from_json(j);
}

/// FNV-1a over the canonical (sorted-key) JSON dump, hex encoded.
inline std::string config_hash(const ExperimentConfig& c) {
    const std::string dump = to_json(c).dump();
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char ch : dump) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

}  // namespace dilkit
