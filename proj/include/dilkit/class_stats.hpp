#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dilkit/autodiff.hpp"
#include "dilkit/errors.hpp"
#include "dilkit/rng.hpp"

namespace dilkit {

/// Streaming per-class feature statistics: count n_c, running mean mu_c
/// and sum of squared deviations Q_c, maintained by Welford updates.
/// The unbiased variance Q_c/(n_c - 1) is defined once n_c >= 2.
struct ClassStats {
    int classes = 0;
    int dim = 0;
    std::vector<std::int64_t> count;  // per class
    std::vector<double> mean;         // classes x dim
    std::vector<double> sq_dev;       // classes x dim

    ClassStats() = default;
    ClassStats(int classes_, int dim_)
        : classes(classes_),
          dim(dim_),
          count(static_cast<std::size_t>(classes_), 0),
          mean(static_cast<std::size_t>(classes_) * dim_, 0.0),
          sq_dev(static_cast<std::size_t>(classes_) * dim_, 0.0) {}

    bool eligible(int c) const { return count[static_cast<std::size_t>(c)] >= 2; }

    const double* mean_of(int c) const { return mean.data() + static_cast<std::size_t>(c) * dim; }

    /// Unbiased per-dimension variance; tiny negative rounding residue in
    /// Q_c is clamped to zero.
    std::vector<double> variance(int c) const {
        if (!eligible(c))
            throw ContractError("variance: class " + std::to_string(c) + " has fewer than 2 samples");
        std::vector<double> v(static_cast<std::size_t>(dim));
        const double n1 = static_cast<double>(count[static_cast<std::size_t>(c)] - 1);
        const double* q = sq_dev.data() + static_cast<std::size_t>(c) * dim;
        for (int j = 0; j < dim; ++j) v[static_cast<std::size_t>(j)] = std::max(q[j], 0.0) / n1;
        return v;
    }
};

/// One Welford step:  n += 1;  d = f - mu;  mu += d/n;  Q += d * (f - mu).
inline void welford_update(ClassStats& stats, const double* f, int c) {
    if (c < 0 || c >= stats.classes)
        throw std::out_of_range("welford_update: class " + std::to_string(c) + " out of range");
    auto& n = stats.count[static_cast<std::size_t>(c)];
    n += 1;
    double* mu = stats.mean.data() + static_cast<std::size_t>(c) * stats.dim;
    double* q = stats.sq_dev.data() + static_cast<std::size_t>(c) * stats.dim;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (int j = 0; j < stats.dim; ++j) {
        const double delta = f[j] - mu[j];
        mu[j] += delta * inv_n;
        q[j] += delta * (f[j] - mu[j]);
    }
}

inline void welford_update(ClassStats& stats, const std::vector<double>& f, int c) {
    if (static_cast<int>(f.size()) != stats.dim)
        throw DimensionError("welford_update: feature dim mismatch");
    welford_update(stats, f.data(), c);
}

/// Chan-style parallel combination of two statistic sets:
///   n = na + nb;  d = mu_b - mu_a;
///   mu = mu_a + d*nb/n;  Q = Qa + Qb + d^2 * na*nb/n.
inline ClassStats merge_stats(const ClassStats& a, const ClassStats& b) {
    if (a.classes != b.classes || a.dim != b.dim)
        throw DimensionError("merge_stats: incompatible shapes");
    ClassStats out(a.classes, a.dim);
    for (int c = 0; c < a.classes; ++c) {
        const std::size_t o = static_cast<std::size_t>(c) * a.dim;
        const auto na = a.count[static_cast<std::size_t>(c)];
        const auto nb = b.count[static_cast<std::size_t>(c)];
        out.count[static_cast<std::size_t>(c)] = na + nb;
        if (nb == 0) {
            std::copy_n(a.mean.data() + o, a.dim, out.mean.data() + o);
            std::copy_n(a.sq_dev.data() + o, a.dim, out.sq_dev.data() + o);
            continue;
        }
        if (na == 0) {
            std::copy_n(b.mean.data() + o, b.dim, out.mean.data() + o);
            std::copy_n(b.sq_dev.data() + o, b.dim, out.sq_dev.data() + o);
            continue;
        }
        const double n = static_cast<double>(na + nb);
        const double wb = static_cast<double>(nb) / n;
        const double cross = static_cast<double>(na) * static_cast<double>(nb) / n;
        for (int j = 0; j < a.dim; ++j) {
            const double d = b.mean[o + j] - a.mean[o + j];
            out.mean[o + j] = a.mean[o + j] + d * wb;
            out.sq_dev[o + j] = a.sq_dev[o + j] + b.sq_dev[o + j] + d * d * cross;
        }
    }
    return out;
}

/// Linear classifier head over features: logits = f W^T + b.
struct ClassifierHead {
    int classes = 0;
    int dim = 0;
    std::vector<double> weight;  // classes x dim
    std::vector<double> bias;    // classes
    bool frozen = false;

    ClassifierHead() = default;
    ClassifierHead(int classes_, int dim_)
        : classes(classes_),
          dim(dim_),
          weight(static_cast<std::size_t>(classes_) * dim_, 0.0),
          bias(static_cast<std::size_t>(classes_), 0.0) {}
};

/// Deep copy, frozen; subsequent student updates leave it bit-identical.
inline ClassifierHead snapshot_teacher(const ClassifierHead& student) {
    ClassifierHead t = student;
    t.frozen = true;
    return t;
}

/// Value-level head evaluation (no tape): logits (rows x classes).
inline std::vector<double> head_logits(const ClassifierHead& h, const double* f, int rows) {
    std::vector<double> z(static_cast<std::size_t>(rows) * h.classes, 0.0);
    detail::mm_nt_acc(f, h.weight.data(), z.data(), rows, h.dim, h.classes);
    for (int i = 0; i < rows; ++i)
        for (int c = 0; c < h.classes; ++c) z[static_cast<std::size_t>(i) * h.classes + c] += h.bias[static_cast<std::size_t>(c)];
    return z;
}

namespace detail {

// Temperature-scaled distillation on fixed features: both heads see the
// same rows, the teacher enters as constants, so gradient reaches the
// student head only.
inline Tensor kd_on_features(Tape& tp, const std::vector<double>& feats, int rows,
                             const ClassifierHead& teacher, const Tensor& student_w,
                             const Tensor& student_b, double temperature) {
    if (temperature <= 0.0)
        throw ConfigError("kd loss: temperature must be positive");
    if (!teacher.frozen) throw ContractError("kd loss: teacher head must be frozen");
    require(static_cast<int>(feats.size()) == rows * teacher.dim,
            "kd loss: feature buffer shape mismatch");
    Tensor f = tp.constant({rows, teacher.dim}, feats);
    Tensor tw = tp.constant({teacher.classes, teacher.dim}, teacher.weight);
    Tensor tb = tp.constant({teacher.classes}, teacher.bias);
    Tensor zt = add_rowvec(matmul_nt(f, tw), tb);
    Tensor zs = add_rowvec(matmul_nt(f, student_w), student_b);
    const double inv_t = 1.0 / temperature;
    Tensor kl = kl_divergence(softmax_rows(scale(zt, inv_t)), softmax_rows(scale(zs, inv_t)));
    return scale(kl, temperature * temperature);
}

}  // namespace detail

/// Real-feature distillation: the current batch's features pass through
/// the frozen teacher and the trainable student head; the KL between the
/// temperature-softened outputs (times T^2), averaged over the batch.
/// Features are taken as constants, so gradients flow to the student only.
inline Tensor real_kd_loss(Tape& tp, const std::vector<double>& real_feats, int batch,
                           const ClassifierHead& teacher, const Tensor& student_w,
                           const Tensor& student_b, double temperature) {
    return detail::kd_on_features(tp, real_feats, batch, teacher, student_w, student_b,
                                  temperature);
}

/// Pseudo-feature replay loss, same form on sampled features.
inline Tensor pseudo_kd_loss(Tape& tp, const std::vector<double>& pseudo_feats, int count,
                             const ClassifierHead& teacher, const Tensor& student_w,
                             const Tensor& student_b, double temperature) {
    return detail::kd_on_features(tp, pseudo_feats, count, teacher, student_w, student_b,
                                  temperature);
}

struct PseudoSample {
    std::vector<double> features;  // count x dim
    std::vector<int> classes;
};

/// Draw pseudo features from the stored per-class Gaussians via the
/// reparameterization f = mu + eps * sigma. Classes are sampled uniformly
/// over those with n_c >= 2; per-dimension variance is floored before
/// taking the square root. Outputs are plain buffers (constants for any
/// downstream tape).
inline PseudoSample sample_pseudo(const ClassStats& stats, int count, Rng& rng,
                                  double variance_floor = 1e-8) {
    std::vector<int> pool;
    for (int c = 0; c < stats.classes; ++c)
        if (stats.eligible(c)) pool.push_back(c);
    if (pool.empty())
        throw ContractError("sample_pseudo: no class has enough samples for a variance");
    PseudoSample out;
    out.features.resize(static_cast<std::size_t>(count) * stats.dim);
    out.classes.resize(static_cast<std::size_t>(count));
    std::vector<std::vector<double>> sigma(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
        sigma[i] = stats.variance(pool[i]);
        for (auto& v : sigma[i]) v = std::sqrt(std::max(v, variance_floor));
    }
    for (int k = 0; k < count; ++k) {
        const std::size_t pick = rng.below(pool.size());
        const int c = pool[pick];
        out.classes[static_cast<std::size_t>(k)] = c;
        const double* mu = stats.mean_of(c);
        double* f = out.features.data() + static_cast<std::size_t>(k) * stats.dim;
        for (int j = 0; j < stats.dim; ++j)
            f[j] = mu[j] + rng.normal() * sigma[pick][static_cast<std::size_t>(j)];
    }
    return out;
}

}  // namespace dilkit
