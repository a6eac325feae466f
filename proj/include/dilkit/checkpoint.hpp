#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dilkit/config.hpp"
#include "dilkit/model.hpp"

namespace dilkit {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline const char* b64_alphabet() {
    return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

/// Doubles as base64 over their little-endian byte stream.
inline std::string encode_doubles(const std::vector<double>& v) {
    std::vector<unsigned char> bytes;
    bytes.reserve(v.size() * 8);
    for (double d : v) {
        std::uint64_t u = 0;
        std::memcpy(&u, &d, 8);
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<unsigned char>((u >> (8 * i)) & 0xff));
    }
    const char* tbl = b64_alphabet();
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    for (std::size_t i = 0; i < bytes.size(); i += 3) {
        std::uint32_t chunk = static_cast<std::uint32_t>(bytes[i]) << 16;
        int have = 1;
        if (i + 1 < bytes.size()) {
            chunk |= static_cast<std::uint32_t>(bytes[i + 1]) << 8;
            have = 2;
        }
        if (i + 2 < bytes.size()) {
            chunk |= bytes[i + 2];
            have = 3;
        }
        out.push_back(tbl[(chunk >> 18) & 63]);
        out.push_back(tbl[(chunk >> 12) & 63]);
        out.push_back(have >= 2 ? tbl[(chunk >> 6) & 63] : '=');
        out.push_back(have >= 3 ? tbl[chunk & 63] : '=');
    }
    return out;
}

inline std::vector<double> decode_doubles(const std::string& s) {
    static int lut[256];
    static bool init = false;
    if (!init) {
        for (int i = 0; i < 256; ++i) lut[i] = -1;
        const char* tbl = b64_alphabet();
        for (int i = 0; i < 64; ++i) lut[static_cast<unsigned char>(tbl[i])] = i;
        init = true;
    }
    if (s.size() % 4 != 0) throw CheckpointError("corrupt checkpoint: bad base64 length");
    std::vector<unsigned char> bytes;
    bytes.reserve(s.size() / 4 * 3);
    for (std::size_t i = 0; i < s.size(); i += 4) {
        int vals[4];
        int pads = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = s[i + k];
            if (c == '=') {
                vals[k] = 0;
                ++pads;
            } else {
                vals[k] = lut[static_cast<unsigned char>(c)];
                if (vals[k] < 0) throw CheckpointError("corrupt checkpoint: bad base64 byte");
                if (pads) throw CheckpointError("corrupt checkpoint: base64 padding misplaced");
            }
        }
        const std::uint32_t chunk = (static_cast<std::uint32_t>(vals[0]) << 18) |
                                    (static_cast<std::uint32_t>(vals[1]) << 12) |
                                    (static_cast<std::uint32_t>(vals[2]) << 6) |
                                    static_cast<std::uint32_t>(vals[3]);
        bytes.push_back(static_cast<unsigned char>((chunk >> 16) & 0xff));
        if (pads < 2) bytes.push_back(static_cast<unsigned char>((chunk >> 8) & 0xff));
        if (pads < 1) bytes.push_back(static_cast<unsigned char>(chunk & 0xff));
    }
    if (bytes.size() % 8 != 0) throw CheckpointError("corrupt checkpoint: buffer not doubles");
    std::vector<double> out(bytes.size() / 8);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t u = 0;
        for (int k = 0; k < 8; ++k) u |= static_cast<std::uint64_t>(bytes[i * 8 + k]) << (8 * k);
        std::memcpy(&out[i], &u, 8);
    }
    return out;
}

inline nlohmann::json head_to_json(const ClassifierHead& h) {
    return nlohmann::json{{"classes", h.classes},
                          {"dim", h.dim},
                          {"weight", encode_doubles(h.weight)},
                          {"bias", encode_doubles(h.bias)},
                          {"frozen", h.frozen}};
}

inline ClassifierHead head_from_json(const nlohmann::json& j) {
    ClassifierHead h(j.at("classes").get<int>(), j.at("dim").get<int>());
    h.weight = decode_doubles(j.at("weight").get<std::string>());
    h.bias = decode_doubles(j.at("bias").get<std::string>());
    h.frozen = j.at("frozen").get<bool>();
    if (static_cast<int>(h.weight.size()) != h.classes * h.dim ||
        static_cast<int>(h.bias.size()) != h.classes)
        throw CheckpointError("corrupt checkpoint: head buffer sizes");
    return h;
}

}  // namespace detail

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_to_json(const ModelState& st) {
    nlohmann::json j;
    j["format"] = "dilkit-checkpoint";
    j["version"] = kCheckpointVersion;
    j["config"] = to_json(st.cfg);
    j["config_hash"] = config_hash(st.cfg);
    j["stage"] = st.stages_done;
    j["pool"] = {{"keys", detail::encode_doubles(st.pool.keys)},
                 {"values", detail::encode_doubles(st.pool.values)},
                 {"bottleneck", st.pool.bottleneck},
                 {"frozen", st.pool.frozen},
                 {"active", st.pool.active}};
    j["bank"] = {{"keys", detail::encode_doubles(st.bank.keys)},
                 {"values", detail::encode_doubles(st.bank.values)},
                 {"dim", st.bank.dim},
                 {"momentum", st.bank.momentum}};
    nlohmann::json adapters = nlohmann::json::array();
    for (const LayerAdapters& a : st.adapters)
        adapters.push_back({{"w1", detail::encode_doubles(a.w1)},
                            {"ln_g", detail::encode_doubles(a.ln_g)},
                            {"ln_b", detail::encode_doubles(a.ln_b)},
                            {"w2", detail::encode_doubles(a.w2)},
                            {"w_down", detail::encode_doubles(a.w_down)},
                            {"w_up", detail::encode_doubles(a.w_up)}});
    j["adapters"] = std::move(adapters);
    j["student"] = detail::head_to_json(st.student);
    j["teacher"] = st.has_teacher ? detail::head_to_json(st.teacher) : nlohmann::json();
    if (st.has_stats) {
        j["stats"] = {{"classes", st.cumulative.classes},
                      {"dim", st.cumulative.dim},
                      {"count", st.cumulative.count},
                      {"mean", detail::encode_doubles(st.cumulative.mean)},
                      {"sq_dev", detail::encode_doubles(st.cumulative.sq_dev)}};
    } else {
        j["stats"] = nlohmann::json();
    }
    j["uw"] = {{"active", st.uw_active}, {"s", st.uw.s}};
    nlohmann::json monitors = nlohmann::json::array();
    for (const DriftMonitor& m : st.monitors) {
        nlohmann::json jm;
        jm["entropies"] = std::vector<double>(m.entropies.begin(), m.entropies.end());
        nlohmann::json sets = nlohmann::json::array();
        for (const auto& s : m.usage_sets) sets.push_back(s);
        jm["usage_sets"] = std::move(sets);
        monitors.push_back(std::move(jm));
    }
    j["monitors"] = std::move(monitors);
    j["train_rng"] = st.train_rng.serialize();
    return j;
}

inline void save_checkpoint(const ModelState& st, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
    out << checkpoint_to_json(st).dump(1) << '\n';
}

/// Rebuilds a state from a checkpoint file. The backbone is regenerated
/// deterministically from the embedded config and seed; everything else is
/// restored bit-exactly from the stored buffers. Corrupt files and version
/// or hash mismatches are refused without touching any state.
inline ModelState load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CheckpointError("cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("corrupt checkpoint '" + path + "': " + e.what());
    }
    try {
        if (j.at("format").get<std::string>() != "dilkit-checkpoint")
            throw CheckpointError("not a checkpoint file: " + path);
        if (j.at("version").get<int>() != kCheckpointVersion)
            throw CheckpointError("checkpoint version mismatch: have " +
                                  std::to_string(j.at("version").get<int>()) + ", want " +
                                  std::to_string(kCheckpointVersion));
        const ExperimentConfig cfg = config_from_json(j.at("config"));
        if (config_hash(cfg) != j.at("config_hash").get<std::string>())
            throw CheckpointError("checkpoint config hash mismatch (refusing to load)");

        ModelState st = init_state(cfg);
        st.stages_done = j.at("stage").get<int>();

        const auto& jp = j.at("pool");
        st.pool.bottleneck = jp.at("bottleneck").get<int>();
        st.pool.keys = detail::decode_doubles(jp.at("keys").get<std::string>());
        st.pool.values = detail::decode_doubles(jp.at("values").get<std::string>());
        st.pool.frozen = jp.at("frozen").get<std::vector<int>>();
        st.pool.active = jp.at("active").get<std::vector<int>>();
        if (st.pool.keys.size() != st.pool.values.size() ||
            st.pool.keys.size() % static_cast<std::size_t>(st.pool.bottleneck) != 0)
            throw CheckpointError("corrupt checkpoint: pool buffer sizes");

        const auto& jb = j.at("bank");
        st.bank.dim = jb.at("dim").get<int>();
        st.bank.momentum = jb.at("momentum").get<double>();
        st.bank.keys = detail::decode_doubles(jb.at("keys").get<std::string>());
        st.bank.values = detail::decode_doubles(jb.at("values").get<std::string>());

        const auto& ja = j.at("adapters");
        if (ja.size() != st.adapters.size())
            throw CheckpointError("corrupt checkpoint: adapter count mismatch");
        for (std::size_t l = 0; l < ja.size(); ++l) {
            LayerAdapters& a = st.adapters[l];
            a.w1 = detail::decode_doubles(ja[l].at("w1").get<std::string>());
            a.ln_g = detail::decode_doubles(ja[l].at("ln_g").get<std::string>());
            a.ln_b = detail::decode_doubles(ja[l].at("ln_b").get<std::string>());
            a.w2 = detail::decode_doubles(ja[l].at("w2").get<std::string>());
            a.w_down = detail::decode_doubles(ja[l].at("w_down").get<std::string>());
            a.w_up = detail::decode_doubles(ja[l].at("w_up").get<std::string>());
        }

        st.student = detail::head_from_json(j.at("student"));
        if (!j.at("teacher").is_null()) {
            st.teacher = detail::head_from_json(j.at("teacher"));
            st.has_teacher = true;
        }
        if (!j.at("stats").is_null()) {
            const auto& js = j.at("stats");
            ClassStats stats(js.at("classes").get<int>(), js.at("dim").get<int>());
            stats.count = js.at("count").get<std::vector<std::int64_t>>();
            stats.mean = detail::decode_doubles(js.at("mean").get<std::string>());
            stats.sq_dev = detail::decode_doubles(js.at("sq_dev").get<std::string>());
            if (stats.mean.size() != static_cast<std::size_t>(stats.classes) * stats.dim)
                throw CheckpointError("corrupt checkpoint: stats buffer sizes");
            st.cumulative = std::move(stats);
            st.has_stats = true;
        }
        st.uw_active = j.at("uw").at("active").get<bool>();
        st.uw.s = j.at("uw").at("s").get<std::vector<double>>();
        const auto& jm = j.at("monitors");
        if (jm.size() != st.monitors.size())
            throw CheckpointError("corrupt checkpoint: monitor count mismatch");
        for (std::size_t i = 0; i < jm.size(); ++i) {
            auto ent = jm[i].at("entropies").get<std::vector<double>>();
            auto sets = jm[i].at("usage_sets");
            st.monitors[i].entropies.assign(ent.begin(), ent.end());
            st.monitors[i].usage_sets.clear();
            for (const auto& s : sets)
                st.monitors[i].usage_sets.push_back(s.get<std::vector<int>>());
        }
        st.train_rng = Rng::deserialize(j.at("train_rng").get<std::string>());
        return st;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("corrupt checkpoint '" + path + "': " + e.what());
    }
}

/// Load against an expected configuration; refuses on hash mismatch.
inline ModelState load_checkpoint(const std::string& path, const ExperimentConfig& expected) {
    std::ifstream in(path);
    if (!in) throw CheckpointError("cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("corrupt checkpoint '" + path + "': " + e.what());
    }
    std::string stored;
    try {
        stored = j.at("config_hash").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("corrupt checkpoint '" + path + "': " + e.what());
    }
    if (stored != config_hash(expected))
        throw CheckpointError("checkpoint was produced by a different config (hash " + stored +
                              " != " + config_hash(expected) + ")");
    return load_checkpoint(path);
}

}  // namespace dilkit
