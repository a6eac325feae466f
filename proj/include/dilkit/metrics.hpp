#pragma once

#include <algorithm>
#include <vector>

#include "dilkit/errors.hpp"

namespace dilkit {

/// Lower-triangular accuracy matrix: entry (i, j) is the accuracy on
/// stage j's test set measured after training stage i (both 0-based,
/// j <= i).
struct RMatrix {
    std::vector<std::vector<double>> rows;  // rows[i] has i+1 entries

    int stages() const { return static_cast<int>(rows.size()); }

    double at(int i, int j) const { return rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]; }

    void check_complete() const {
        if (rows.empty()) throw ContractError("r-matrix: empty");
        for (std::size_t i = 0; i < rows.size(); ++i)
            if (rows[i].size() != i + 1)
                throw ContractError("r-matrix: row " + std::to_string(i) + " incomplete");
    }
};

/// Trajectory-averaged accuracy:
///   AvgACC = (1/T) sum_i (1/i) sum_{j<=i} R[i][j].
inline double avg_acc(const RMatrix& r) {
    r.check_complete();
    const int t = r.stages();
    double total = 0.0;
    for (int i = 0; i < t; ++i) {
        double row = 0.0;
        for (int j = 0; j <= i; ++j) row += r.at(i, j);
        total += row / static_cast<double>(i + 1);
    }
    return total / static_cast<double>(t);
}

/// Peak-to-final forgetting:
///   AvgF = (1/(T-1)) sum_{j<T-1} (max_{i>=j} R[i][j] - R[T-1][j]).
inline double avg_f(const RMatrix& r) {
    r.check_complete();
    const int t = r.stages();
    if (t < 2) throw ContractError("avg_f: needs at least two stages");
    double total = 0.0;
    for (int j = 0; j + 1 < t; ++j) {
        double peak = 0.0;
        for (int i = j; i < t; ++i) peak = std::max(peak, r.at(i, j));
        total += peak - r.at(t - 1, j);
    }
    return total / static_cast<double>(t - 1);
}

/// Plain accuracy of predicted labels.
inline double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size() || pred.empty())
        throw DimensionError("accuracy: label count mismatch");
    int hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == truth[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

/// Macro-averaged F1 over `classes` labels; classes absent from both the
/// predictions and the truth contribute an F1 of 0 to the average only if
/// they appear in neither -- they are skipped entirely.
inline double macro_f1(const std::vector<int>& pred, const std::vector<int>& truth,
                       int classes) {
    if (pred.size() != truth.size() || pred.empty())
        throw DimensionError("macro_f1: label count mismatch");
    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < classes; ++c) {
        int tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const bool p = pred[i] == c, t = truth[i] == c;
            if (p && t) ++tp;
            if (p && !t) ++fp;
            if (!p && t) ++fn;
        }
        if (tp + fp + fn == 0) continue;
        sum += (2.0 * tp) / std::max(2.0 * tp + fp + fn, 1.0);
        ++counted;
    }
    return counted ? sum / static_cast<double>(counted) : 0.0;
}

/// Cross-composition grid: per (representation snapshot i, head j), the
/// per-test-set accuracies and macro-F1s plus their means.
struct CrossCompositionCell {
    std::vector<double> accuracy;  // per stage test set
    std::vector<double> f1;
    double mean_accuracy = 0.0;
    double mean_f1 = 0.0;
};

struct CrossComposition {
    std::vector<std::vector<CrossCompositionCell>> grid;  // T x T
    double head_swap_drop = 0.0;      // mean over i != j of acc(B_i,C_i) - acc(B_i,C_j)
    double backbone_swap_drop = 0.0;  // mean over i != j of acc(B_j,C_j) - acc(B_i,C_j)

    void finalize() {
        const std::size_t t = grid.size();
        double hs = 0.0, bs = 0.0;
        int n = 0;
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < t; ++j) {
                if (i == j) continue;
                hs += grid[i][i].mean_accuracy - grid[i][j].mean_accuracy;
                bs += grid[j][j].mean_accuracy - grid[i][j].mean_accuracy;
                ++n;
            }
        head_swap_drop = n ? hs / n : 0.0;
        backbone_swap_drop = n ? bs / n : 0.0;
    }
};

}  // namespace dilkit
