#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dilkit/config.hpp"
#include "dilkit/errors.hpp"
#include "dilkit/rng.hpp"

namespace dilkit {

struct Sample {
    std::vector<double> tokens;  // tokens x input_dim, row-major
    int label = 0;
};

struct StageData {
    std::vector<Sample> train, val, test;
};

/// Synthetic domain-incremental stream. Class prototypes (fixed random
/// token grids) are shared by every stage; stage k applies its own domain
/// transform — an orthogonal rotation of the channel basis, a partial
/// channel permutation and additive noise, all scaled by the stage's
/// severity. Severity 0 is the identity transform, so two severity-0
/// stages are identically distributed.
struct SyntheticStream {
    std::vector<StageData> stages;
};

namespace detail {

// Gauss-Jordan inverse with partial pivoting; n is small (input_dim).
inline std::vector<double> invert(std::vector<double> a, int n) {
    std::vector<double> inv(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) inv[static_cast<std::size_t>(i) * n + i] = 1.0;
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        for (int r = col + 1; r < n; ++r)
            if (std::fabs(a[static_cast<std::size_t>(r) * n + col]) >
                std::fabs(a[static_cast<std::size_t>(pivot) * n + col]))
                pivot = r;
        if (pivot != col) {
            for (int j = 0; j < n; ++j) {
                std::swap(a[static_cast<std::size_t>(col) * n + j],
                          a[static_cast<std::size_t>(pivot) * n + j]);
                std::swap(inv[static_cast<std::size_t>(col) * n + j],
                          inv[static_cast<std::size_t>(pivot) * n + j]);
            }
        }
        const double p = a[static_cast<std::size_t>(col) * n + col];
        for (int j = 0; j < n; ++j) {
            a[static_cast<std::size_t>(col) * n + j] /= p;
            inv[static_cast<std::size_t>(col) * n + j] /= p;
        }
        for (int r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a[static_cast<std::size_t>(r) * n + col];
            if (f == 0.0) continue;
            for (int j = 0; j < n; ++j) {
                a[static_cast<std::size_t>(r) * n + j] -=
                    f * a[static_cast<std::size_t>(col) * n + j];
                inv[static_cast<std::size_t>(r) * n + j] -=
                    f * inv[static_cast<std::size_t>(col) * n + j];
            }
        }
    }
    return inv;
}

}  // namespace detail

/// Per-stage domain transform descriptor.
struct DomainTransform {
    double severity = 0.0;
    std::vector<double> rotation;   // input_dim x input_dim, orthogonal
    std::vector<int> permutation;   // channel permutation
    double noise_sd = 0.0;

    void apply(std::vector<double>& tokens, int token_count, int dim, Rng& noise_rng) const {
        std::vector<double> tmp(static_cast<std::size_t>(dim));
        for (int t = 0; t < token_count; ++t) {
            double* row = tokens.data() + static_cast<std::size_t>(t) * dim;
            for (int j = 0; j < dim; ++j)
                tmp[static_cast<std::size_t>(j)] = row[permutation[static_cast<std::size_t>(j)]];
            for (int i = 0; i < dim; ++i) {
                double acc = 0.0;
                const double* rrow = rotation.data() + static_cast<std::size_t>(i) * dim;
                for (int j = 0; j < dim; ++j) acc += rrow[j] * tmp[static_cast<std::size_t>(j)];
                row[i] = acc + (noise_sd > 0.0 ? noise_rng.normal(0.0, noise_sd) : 0.0);
            }
        }
    }
};

/// Cayley-parameterized rotation: R = (I - S/2)(I + S/2)^-1 with S a
/// random skew-symmetric matrix scaled by the severity, so R(0) = I and
/// the rotation strength grows smoothly with severity.
inline DomainTransform make_transform(int dim, double severity, double noise_scale, Rng rng) {
    DomainTransform tf;
    tf.severity = severity;
    tf.noise_sd = noise_scale * severity;
    const int n = dim;
    std::vector<double> skew(static_cast<std::size_t>(n) * n, 0.0);
    Rng skew_rng = rng.child("rotation");
    const double scale = severity * 1.2 / std::sqrt(static_cast<double>(n));
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double v = skew_rng.normal(0.0, scale);
            skew[static_cast<std::size_t>(i) * n + j] = v;
            skew[static_cast<std::size_t>(j) * n + i] = -v;
        }
    std::vector<double> plus(skew), minus(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const std::size_t o = static_cast<std::size_t>(i) * n + j;
            plus[o] = 0.5 * skew[o] + (i == j ? 1.0 : 0.0);
            minus[o] = -0.5 * skew[o] + (i == j ? 1.0 : 0.0);
        }
    std::vector<double> inv = detail::invert(plus, n);
    tf.rotation.assign(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            const double m = minus[static_cast<std::size_t>(i) * n + k];
            for (int j = 0; j < n; ++j)
                tf.rotation[static_cast<std::size_t>(i) * n + j] +=
                    m * inv[static_cast<std::size_t>(k) * n + j];
        }

    // permute floor(severity * dim) channels through one random cycle
    tf.permutation.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) tf.permutation[static_cast<std::size_t>(i)] = i;
    const int moved = static_cast<int>(std::floor(severity * n));
    if (moved >= 2) {
        Rng perm_rng = rng.child("permutation");
        std::vector<int> order = perm_rng.permutation(n);
        order.resize(static_cast<std::size_t>(moved));
        for (int i = 0; i < moved; ++i)
            tf.permutation[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] =
                order[static_cast<std::size_t>((i + 1) % moved)];
    }
    return tf;
}

namespace detail {

inline std::vector<Sample> make_split(const std::vector<double>& prototypes, int count,
                                      const ExperimentConfig& cfg, const DomainTransform& tf,
                                      Rng rng) {
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(count));
    const int grid = cfg.tokens * cfg.input_dim;
    for (int i = 0; i < count; ++i) {
        Sample s;
        s.label = i % cfg.classes;  // balanced by construction
        s.tokens.resize(static_cast<std::size_t>(grid));
        const double* proto = prototypes.data() + static_cast<std::size_t>(s.label) * grid;
        for (int j = 0; j < grid; ++j)
            s.tokens[static_cast<std::size_t>(j)] = proto[j] + rng.normal(0.0, cfg.sample_noise);
        tf.apply(s.tokens, cfg.tokens, cfg.input_dim, rng);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace detail

inline SyntheticStream generate_stream(const ExperimentConfig& cfg, std::uint64_t seed) {
    if (cfg.stages < 1) throw ConfigError("generate_stream: need at least one stage");
    Rng root = Rng(seed).child("stream");
    Rng proto_rng = root.child("prototypes");
    const int grid = cfg.tokens * cfg.input_dim;
    std::vector<double> prototypes =
        proto_rng.normal_vec(static_cast<std::size_t>(cfg.classes) * grid);

    SyntheticStream stream;
    stream.stages.resize(static_cast<std::size_t>(cfg.stages));
    for (int k = 0; k < cfg.stages; ++k) {
        const double sev = cfg.severity_for(k);
        Rng stage_rng = root.child("stage" + std::to_string(k));
        DomainTransform tf = make_transform(cfg.input_dim, sev, cfg.domain_noise, stage_rng);
        StageData& sd = stream.stages[static_cast<std::size_t>(k)];
        sd.train = detail::make_split(prototypes, cfg.train_per_stage, cfg, tf,
                                      stage_rng.child("train"));
        sd.val =
            detail::make_split(prototypes, cfg.val_per_stage, cfg, tf, stage_rng.child("val"));
        sd.test =
            detail::make_split(prototypes, cfg.test_per_stage, cfg, tf, stage_rng.child("test"));
    }
    return stream;
}

/// Flat (B, tokens, input_dim) buffer plus labels for a batch of samples.
struct Batch {
    std::vector<double> tokens;
    std::vector<int> labels;
    int size = 0;
};

inline Batch make_batch(const std::vector<Sample>& samples, const std::vector<int>& idx) {
    Batch b;
    b.size = static_cast<int>(idx.size());
    if (b.size == 0) return b;
    const int grid = static_cast<int>(samples[0].tokens.size());
    b.tokens.resize(static_cast<std::size_t>(b.size) * grid);
    b.labels.resize(static_cast<std::size_t>(b.size));
    for (int i = 0; i < b.size; ++i) {
        const Sample& s = samples[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
        std::copy(s.tokens.begin(), s.tokens.end(),
                  b.tokens.begin() + static_cast<std::size_t>(i) * grid);
        b.labels[static_cast<std::size_t>(i)] = s.label;
    }
    return b;
}

}  // namespace dilkit
