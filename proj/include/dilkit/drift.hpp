#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <vector>

#include "dilkit/errors.hpp"

namespace dilkit {

/// Column mean of a flat (batch x n) weight matrix.
inline std::vector<double> batch_mean_weights(const std::vector<double>& weights, int batch,
                                              int n) {
    if (batch < 1) throw ContractError("batch_mean_weights: empty batch");
    if (static_cast<int>(weights.size()) != batch * n)
        throw DimensionError("batch_mean_weights: buffer shape mismatch");
    std::vector<double> mean(static_cast<std::size_t>(n), 0.0);
    for (int b = 0; b < batch; ++b)
        for (int i = 0; i < n; ++i)
            mean[static_cast<std::size_t>(i)] += weights[static_cast<std::size_t>(b) * n + i];
    for (auto& x : mean) x /= batch;
    return mean;
}

/// Selection entropy H = -sum_i w_i log(w_i + eps); eps absorbs the exact
/// zeros that entmax produces.
inline double selection_entropy(const std::vector<double>& mean_weights, double eps = 1e-10) {
    double h = 0.0;
    for (double w : mean_weights) h -= w * std::log(w + eps);
    return h;
}

/// Usage set {i : w_i > tau_s} (strict), returned sorted.
inline std::vector<int> usage_set(const std::vector<double>& mean_weights, double tau_s) {
    std::vector<int> s;
    for (std::size_t i = 0; i < mean_weights.size(); ++i)
        if (mean_weights[i] > tau_s) s.push_back(static_cast<int>(i));
    return s;
}

/// |intersection| / |union| of two sorted index sets; both empty -> 1
/// (no change signal).
inline double usage_iou(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.empty() && b.empty()) return 1.0;
    std::size_t i = 0, j = 0, inter = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] == b[j]) {
            ++inter;
            ++i;
            ++j;
        } else if (a[i] < b[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    const std::size_t uni = a.size() + b.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Sliding window of selection entropies and usage sets for one adapter
/// layer. Scoring compares the incoming signal against the window
/// (entropy z-score + usage-set IoU) before the signal is pushed.
struct DriftMonitor {
    int window_cap = 100;        // W
    double tau_s = 0.01;         // usage threshold
    double eps = 1e-10;          // stabilizer in entropy and z-score
    double signal_alpha = 1.0;   // weight of the entropy term
    double signal_beta = 0.5;    // weight of the IoU term
    double eta = 0.1;            // IoU lower clip

    std::deque<double> entropies;
    std::deque<std::vector<int>> usage_sets;

    /// Union of the usage sets currently in the window, sorted.
    std::vector<int> reference_set() const {
        std::vector<int> ref;
        for (const auto& s : usage_sets) {
            std::vector<int> merged;
            merged.reserve(ref.size() + s.size());
            std::set_union(ref.begin(), ref.end(), s.begin(), s.end(),
                           std::back_inserter(merged));
            ref = std::move(merged);
        }
        return ref;
    }

    double entropy_mean() const {
        double m = 0.0;
        for (double h : entropies) m += h;
        return entropies.empty() ? 0.0 : m / static_cast<double>(entropies.size());
    }

    /// Population standard deviation over the window.
    double entropy_std() const {
        if (entropies.empty()) return 0.0;
        const double m = entropy_mean();
        double v = 0.0;
        for (double h : entropies) v += (h - m) * (h - m);
        return std::sqrt(v / static_cast<double>(entropies.size()));
    }

    std::size_t size() const { return entropies.size(); }
};

/// Drift score of an incoming batch against the window:
///   D = alpha * |H - Hbar| / (sigma_H + eps) + beta * (1/max(IoU, eta) - 1).
/// Windows with fewer than two entries score 0 (cold start never triggers
/// expansion).
inline double drift_score(double entropy, const DriftMonitor& mon, double iou) {
    if (mon.size() < 2) return 0.0;
    const double z = std::fabs(entropy - mon.entropy_mean()) / (mon.entropy_std() + mon.eps);
    const double shift = 1.0 / std::max(iou, mon.eta) - 1.0;
    return mon.signal_alpha * z + mon.signal_beta * shift;
}

/// FIFO append with eviction at the window capacity.
inline void push_window(DriftMonitor& mon, double entropy, std::vector<int> usage) {
    mon.entropies.push_back(entropy);
    mon.usage_sets.push_back(std::move(usage));
    while (static_cast<int>(mon.entropies.size()) > mon.window_cap) {
        mon.entropies.pop_front();
        mon.usage_sets.pop_front();
    }
}

/// One observation step: extract the two signals from batch-mean weights,
/// score against the current window, then push. Returns D_t.
inline double observe(DriftMonitor& mon, const std::vector<double>& mean_weights) {
    const double h = selection_entropy(mean_weights, mon.eps);
    std::vector<int> s = usage_set(mean_weights, mon.tau_s);
    const double iou = usage_iou(s, mon.reference_set());
    const double d = drift_score(h, mon, iou);
    push_window(mon, h, std::move(s));
    return d;
}

/// Per-layer, per-batch drift scores from an evaluation pass, plus their
/// grand mean.
struct DriftReport {
    std::vector<std::vector<double>> scores;  // layers x batches
    double mean_drift = 0.0;

    void finalize() {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& row : scores)
            for (double d : row) {
                sum += d;
                ++n;
            }
        mean_drift = n ? sum / static_cast<double>(n) : 0.0;
    }
};

/// Drift-proportional expansion size:
///   E = clamp(floor(active * mean_drift / d_max), e_min, e_max).
inline int expansion_size(int active_count, double mean_drift, double d_max = 5.0,
                          int e_min = 10, int e_max = 80) {
    if (active_count < 1) throw ContractError("expansion_size: no active prompts");
    const int raw = static_cast<int>(
        std::floor(static_cast<double>(active_count) * mean_drift / d_max));
    return std::min(std::max(raw, e_min), e_max);
}

/// Expansion decision, inclusive at the threshold.
inline bool should_expand(double mean_drift, double theta) { return mean_drift >= theta; }

}  // namespace dilkit
