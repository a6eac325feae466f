#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dilkit/autodiff.hpp"
#include "dilkit/errors.hpp"

namespace dilkit {

/// Learnable log-variances s_i, one per loss term, realizing the
/// homoscedastic-uncertainty weighted objective
///     total = sum_i ( exp(-s_i) * L_i + s_i ).
/// s_i start at 0 (all weights 1) and are projected into [-3, 6] after
/// every optimizer step.
struct UncertaintyWeights {
    static constexpr double kClampLo = -3.0;
    static constexpr double kClampHi = 6.0;

    std::vector<std::string> names{"ce", "real", "pseudo", "div", "norm"};
    std::vector<double> s = std::vector<double>(5, 0.0);

    int index_of(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return static_cast<int>(i);
        throw ConfigError("uncertainty: unknown loss name '" + name + "'");
    }

    double weight(const std::string& name) const { return std::exp(-s[index_of(name)]); }

    void reset() { std::fill(s.begin(), s.end(), 0.0); }
};

inline double effective_weight(double s_i) { return std::exp(-s_i); }

/// Projection step applied after each optimizer update.
inline void clamp_log_variances(UncertaintyWeights& uw) {
    for (double& v : uw.s)
        v = std::min(std::max(v, UncertaintyWeights::kClampLo), UncertaintyWeights::kClampHi);
}

/// Weighted total of named scalar losses with a bound log-variance leaf
/// s (one entry per provided loss, in order). Differentiable in both the
/// losses and s:  d/ds_i = -exp(-s_i) L_i + 1,  d/dL_i = exp(-s_i).
/// Absent losses are simply not passed. A non-finite loss aborts training
/// with the loss name.
inline Tensor total_loss(const std::vector<std::pair<std::string, Tensor>>& losses,
                         const Tensor& s) {
    require(!losses.empty(), "total_loss: no losses provided");
    Tape* tp = losses[0].second.tape;
    require(s.tape == tp, "total_loss: s on a different tape");
    require(s.size() == static_cast<int>(losses.size()),
            "total_loss: need one log-variance per provided loss");
    double value = 0.0;
    const auto& sv = s.value();
    for (std::size_t i = 0; i < losses.size(); ++i) {
        const Tensor& L = losses[i].second;
        require(L.tape == tp, "total_loss: loss on a different tape");
        require(L.size() == 1, "total_loss: losses must be scalars");
        const double lv = L.value()[0];
        if (!std::isfinite(lv)) throw NumericalAbort(losses[i].first);
        value += std::exp(-sv[i]) * lv + sv[i];
    }
    bool rg = s.requires_grad();
    for (const auto& [name, L] : losses) rg = rg || L.requires_grad();
    Tensor r = tp->make({1}, {value}, rg);
    std::vector<int> loss_nodes;
    for (const auto& [name, L] : losses) loss_nodes.push_back(L.node);
    const int is = s.node, ir = r.node;
    tp->set_back(r, [loss_nodes, is, ir](Tape& t) {
        const double g = t.at(ir).grad[0];
        const auto& sv2 = t.at(is).val;
        for (std::size_t i = 0; i < loss_nodes.size(); ++i) {
            const double w = std::exp(-sv2[i]);
            if (t.at(loss_nodes[i]).requires_grad)
                t.at(loss_nodes[i]).grad[0] += g * w;
            if (t.at(is).requires_grad)
                t.at(is).grad[i] += g * (-w * t.at(loss_nodes[i]).val[0] + 1.0);
        }
    });
    return r;
}

/// Plain unweighted sum of named scalar losses (stage 1 and the no-UW
/// ablation). Applies the same non-finite abort policy.
inline Tensor plain_loss_sum(const std::vector<std::pair<std::string, Tensor>>& losses) {
    require(!losses.empty(), "plain_loss_sum: no losses provided");
    Tensor total;
    for (const auto& [name, L] : losses) {
        if (!std::isfinite(L.value()[0])) throw NumericalAbort(name);
        total = total.defined() ? add(total, L) : L;
    }
    return total;
}

}  // namespace dilkit
