#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dilkit/autodiff.hpp"
#include "dilkit/errors.hpp"

namespace dilkit {

/// Result of an alpha-entmax transformation: a sparse probability vector,
/// the indices of its strictly positive entries, and the threshold tau.
struct SparseWeights {
    std::vector<double> weights;  // sums to 1; exact zeros off support
    std::vector<int> support;     // indices with weights[i] > 0
    double tau = 0.0;
};

namespace detail {

inline void check_entmax_args(std::size_t n, double alpha) {
    if (n == 0) throw DimensionError("entmax: empty input");
    if (!(alpha > 1.0 && alpha <= 2.0))
        throw ConfigError("entmax: alpha must be in (1,2], got " + std::to_string(alpha) +
                          " (use softmax for alpha=1)");
}

// Sum of the transform at threshold tau:
//   sum_j [ (alpha-1)/alpha * (l_j - tau) ]_+ ^ (1/(alpha-1))
inline double entmax_mass(const double* l, std::size_t n, double alpha, double tau) {
    const double k = (alpha - 1.0) / alpha;
    const double m = 1.0 / (alpha - 1.0);
    double sum = 0.0;
    if (alpha == 1.5) {
        for (std::size_t j = 0; j < n; ++j) {
            const double x = k * (l[j] - tau);
            if (x > 0.0) sum += x * x;
        }
    } else {
        for (std::size_t j = 0; j < n; ++j) {
            const double x = k * (l[j] - tau);
            if (x > 0.0) sum += std::pow(x, m);
        }
    }
    return sum;
}

}  // namespace detail

/// Threshold solver by monotone bisection: the unique tau making the
/// weights sum to 1. The mass is strictly decreasing in tau, equals 0 at
/// tau = max(l) and is >= 1 at tau = max(l) - alpha/(alpha-1), which
/// brackets the root. This is the reference solver for any alpha in (1,2].
inline double solve_tau(const double* logits, std::size_t n, double alpha) {
    detail::check_entmax_args(n, alpha);
    const double mx = *std::max_element(logits, logits + n);
    double lo = mx - alpha / (alpha - 1.0);
    double hi = mx;
    for (int it = 0; it < 320; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;  // interval exhausted at double precision
        const double mass = detail::entmax_mass(logits, n, alpha, mid);
        if (std::fabs(mass - 1.0) < 1e-14) return mid;
        if (mass >= 1.0)
            lo = mid;
        else
            hi = mid;
    }
    return lo;
}

inline double solve_tau(const std::vector<double>& logits, double alpha) {
    return solve_tau(logits.data(), logits.size(), alpha);
}

/// Exact sort-based threshold for alpha = 1.5. Works on y = l/3 where the
/// transform reads [(y_j - tau/3)]_+^2, then scans support sizes for the
/// one whose closed-form threshold is consistent. Gated behind equivalence
/// tests against the bisection reference.
inline double solve_tau_exact15(const double* logits, std::size_t n) {
    detail::check_entmax_args(n, 1.5);
    std::vector<double> y(logits, logits + n);
    for (auto& v : y) v /= 3.0;
    std::sort(y.begin(), y.end(), std::greater<double>());
    double s1 = 0.0, s2 = 0.0;
    double tau_y = y[0] - 1.0;  // k = 1 fallback
    for (std::size_t k = 1; k <= n; ++k) {
        s1 += y[k - 1];
        s2 += y[k - 1] * y[k - 1];
        const double mean = s1 / static_cast<double>(k);
        const double ss = s2 - s1 * mean;  // sum of squared deviations
        const double delta = (1.0 - ss) / static_cast<double>(k);
        const double t = mean - std::sqrt(std::max(delta, 0.0));
        if (t <= y[k - 1])
            tau_y = t;
        else
            break;
    }
    return 3.0 * tau_y;
}

/// Eq-form alpha-entmax: w_j = [ (alpha-1)/alpha * (l_j - tau) ]_+^(1/(alpha-1))
/// with tau chosen so the weights sum to 1. alpha = 1.5 routes through the
/// exact solver, everything else through bisection. Entries with l_j <= tau
/// get exactly 0 (ties at tau included).
inline SparseWeights entmax(const double* logits, std::size_t n, double alpha) {
    detail::check_entmax_args(n, alpha);
    SparseWeights out;
    out.weights.assign(n, 0.0);
    if (n == 1) {
        // Normalization forces the single weight to 1.
        out.tau = logits[0] - alpha / (alpha - 1.0);
        out.weights[0] = 1.0;
        out.support = {0};
        return out;
    }
    out.tau = (alpha == 1.5) ? solve_tau_exact15(logits, n) : solve_tau(logits, n, alpha);
    const double k = (alpha - 1.0) / alpha;
    const double m = 1.0 / (alpha - 1.0);
    for (std::size_t j = 0; j < n; ++j) {
        const double x = k * (logits[j] - out.tau);
        if (x > 0.0) {
            out.weights[j] = (alpha == 1.5) ? x * x : std::pow(x, m);
            out.support.push_back(static_cast<int>(j));
        }
    }
    return out;
}

inline SparseWeights entmax(const std::vector<double>& logits, double alpha) {
    return entmax(logits.data(), logits.size(), alpha);
}

/// Vector-Jacobian product of the entmax map at a previously computed
/// output. On the support the Jacobian is
///   (1/alpha) * (diag(s) - s s^T / <s,1>),  s_i = w_i^(2-alpha),
/// and zero elsewhere; the 1/alpha constant comes from the (alpha-1)/alpha
/// inner scaling and is validated against finite differences in the tests.
inline std::vector<double> entmax_vjp(const SparseWeights& out,
                                      const std::vector<double>& upstream, double alpha) {
    if (upstream.size() != out.weights.size())
        throw DimensionError("entmax_vjp: upstream length mismatch");
    std::vector<double> grad(out.weights.size(), 0.0);
    if (out.support.empty()) return grad;
    const double expo = 2.0 - alpha;
    double s_sum = 0.0, su_sum = 0.0;
    std::vector<double> s(out.support.size());
    for (std::size_t i = 0; i < out.support.size(); ++i) {
        const int j = out.support[i];
        s[i] = (alpha == 1.5) ? std::sqrt(out.weights[j]) : std::pow(out.weights[j], expo);
        s_sum += s[i];
        su_sum += s[i] * upstream[j];
    }
    const double mixed = su_sum / s_sum;
    const double c = 1.0 / alpha;
    for (std::size_t i = 0; i < out.support.size(); ++i) {
        const int j = out.support[i];
        grad[j] = c * s[i] * (upstream[j] - mixed);
    }
    return grad;
}

/// Row-wise entmax as a tape operation: logits (B, N) -> weights (B, N).
inline Tensor entmax_rows(const Tensor& logits, double alpha) {
    Tape* tp = detail::tape_of({logits});
    const int R = logits.rows(), C = logits.cols();
    detail::check_entmax_args(static_cast<std::size_t>(C), alpha);
    const auto& lv = logits.value();
    std::vector<double> out(lv.size());
    auto supports = std::make_shared<std::vector<std::vector<int>>>(R);
    for (int i = 0; i < R; ++i) {
        SparseWeights w =
            entmax(lv.data() + static_cast<std::size_t>(i) * C, static_cast<std::size_t>(C),
                   alpha);
        std::copy(w.weights.begin(), w.weights.end(),
                  out.begin() + static_cast<std::size_t>(i) * C);
        (*supports)[i] = std::move(w.support);
    }
    Tensor r = tp->make(logits.shape(), std::move(out), logits.requires_grad());
    const int il = logits.node, ir = r.node;
    tp->set_back(r, [il, ir, R, C, alpha, supports](Tape& t) {
        const auto& g = t.at(ir).grad;
        const auto& w = t.at(ir).val;
        auto& gl = t.at(il).grad;
        const double expo = 2.0 - alpha;
        const double c = 1.0 / alpha;
        for (int i = 0; i < R; ++i) {
            const auto& sup = (*supports)[i];
            if (sup.empty()) continue;
            const std::size_t o = static_cast<std::size_t>(i) * C;
            double s_sum = 0.0, su_sum = 0.0;
            for (int j : sup) {
                const double s =
                    (alpha == 1.5) ? std::sqrt(w[o + j]) : std::pow(w[o + j], expo);
                s_sum += s;
                su_sum += s * g[o + j];
            }
            const double mixed = su_sum / s_sum;
            for (int j : sup) {
                const double s =
                    (alpha == 1.5) ? std::sqrt(w[o + j]) : std::pow(w[o + j], expo);
                gl[o + j] += c * s * (g[o + j] - mixed);
            }
        }
    });
    return r;
}

}  // namespace dilkit
