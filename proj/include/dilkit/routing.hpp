#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dilkit/autodiff.hpp"
#include "dilkit/entmax.hpp"
#include "dilkit/errors.hpp"
#include "dilkit/rng.hpp"

namespace dilkit {

/// Key/value prompt rows with a frozen/active index partition. At stage 1
/// the pool is unpartitioned (frozen empty, active = all); expansion moves
/// the active set into frozen and appends fresh active rows. Rows indexed
/// by `frozen` never receive gradients and are bitwise stable across
/// training.
struct PromptPool {
    int bottleneck = 0;        // d_a
    std::vector<double> keys;  // N x d_a
    std::vector<double> values;
    std::vector<int> frozen;  // sorted
    std::vector<int> active;  // sorted

    int size() const {
        return bottleneck ? static_cast<int>(keys.size()) / bottleneck : 0;
    }
    bool partitioned() const { return !frozen.empty(); }
};

namespace detail {

inline void append_prompt_rows(PromptPool& pool, int count, double value_sd, Rng& rng) {
    const double key_sd = 1.0 / std::sqrt(static_cast<double>(pool.bottleneck));
    for (int i = 0; i < count; ++i) {
        for (int j = 0; j < pool.bottleneck; ++j) pool.keys.push_back(rng.normal(0.0, key_sd));
        for (int j = 0; j < pool.bottleneck; ++j)
            pool.values.push_back(rng.normal(0.0, value_sd));
    }
}

}  // namespace detail

/// Stage-1 pool: routed directly (not as a residual), so values start at
/// the same scale as the keys.
inline PromptPool make_pool(int size, int bottleneck, Rng& rng) {
    PromptPool pool;
    pool.bottleneck = bottleneck;
    detail::append_prompt_rows(pool, size, 1.0 / std::sqrt(static_cast<double>(bottleneck)),
                               rng);
    pool.active.resize(static_cast<std::size_t>(size));
    for (int i = 0; i < size; ++i) pool.active[static_cast<std::size_t>(i)] = i;
    return pool;
}

/// Pool expansion: the current active set joins the frozen partition, and
/// `count` freshly initialized rows become the new active set. Fresh
/// values start near zero so the new prompts enter as small residuals.
inline void expand_pool(PromptPool& pool, int count, Rng& rng) {
    if (count < 1) throw ContractError("expand_pool: count must be >= 1");
    const int old_size = pool.size();
    std::vector<int> merged;
    merged.reserve(pool.frozen.size() + pool.active.size());
    std::merge(pool.frozen.begin(), pool.frozen.end(), pool.active.begin(), pool.active.end(),
               std::back_inserter(merged));
    pool.frozen = std::move(merged);
    detail::append_prompt_rows(pool, count, 1e-4, rng);
    pool.active.clear();
    for (int i = 0; i < count; ++i) pool.active.push_back(old_size + i);
}

/// Learnable key/value memory slots read by attention and written by a
/// gradient-free EMA. Bank parameters never join the autodiff tape as
/// tracked tensors.
struct MemoryBank {
    int dim = 0;  // D
    std::vector<double> keys;
    std::vector<double> values;
    double momentum = 0.99;  // gamma

    int slots() const { return dim ? static_cast<int>(keys.size()) / dim : 0; }
};

inline MemoryBank make_bank(int slots, int dim, double momentum, Rng& rng) {
    MemoryBank bank;
    bank.dim = dim;
    bank.momentum = momentum;
    const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
    bank.keys = rng.normal_vec(static_cast<std::size_t>(slots) * dim, 0.0, sd);
    bank.values = rng.normal_vec(static_cast<std::size_t>(slots) * dim, 0.0, sd);
    return bank;
}

/// Memory readout r = MHA(q, M_K, M_V) with identity output projection.
/// The bank tensors are bound by the caller; binding them as constants
/// keeps the read path differentiable with respect to the query only.
inline Tensor read_memory(const Tensor& q, const Tensor& bank_keys, const Tensor& bank_values,
                          int heads) {
    return multi_head_attention(q, bank_keys, bank_values, heads);
}

/// Bound per-layer adapter tensors for one forward pass.
struct EnhancerTensors {
    Tensor w1;       // 3D x d_a
    Tensor ln_gain;  // d_a
    Tensor ln_bias;  // d_a
    Tensor w2;       // d_a x D
    Tensor w_down;   // D x d_a
    Tensor w_up;     // d_a x D
    double ln_eps = 1e-5;
};

/// Enhanced query q~ = q + GELU(LN([q; g; r] W1)) W2. With zero adapter
/// weights the output equals q exactly.
inline Tensor enhance_query(const Tensor& q, const Tensor& g, const Tensor& r,
                            const EnhancerTensors& enh) {
    Tensor c = concat_cols({q, g, r});
    Tensor hidden = layer_norm(matmul(c, enh.w1), enh.ln_eps);
    hidden = add_rowvec(mul_rowvec(hidden, enh.ln_gain), enh.ln_bias);
    return add(q, matmul(gelu(hidden), enh.w2));
}

struct RoutingResult {
    Tensor weights;  // B x |subset|, row-wise entmax output
    Tensor prompt;   // B x d_a
};

/// Sparse routing over one pool subset: project the enhanced query into
/// the bottleneck, take cosine logits against the subset keys, entmax
/// row-wise, and mix the subset values.
inline RoutingResult route_subset(const Tensor& q_tilde, const Tensor& w_down,
                                  const Tensor& subset_keys, const Tensor& subset_values,
                                  double alpha) {
    if (subset_keys.rows() == 0)
        throw ContractError("route_subset: empty subset (caller must skip)");
    Tensor z = normalize_rows(matmul(q_tilde, w_down));
    Tensor logits = matmul_nt(z, normalize_rows(subset_keys));
    RoutingResult out;
    out.weights = entmax_rows(logits, alpha);
    out.prompt = matmul(out.weights, subset_values);
    return out;
}

/// Residual combination p_out = p_frozen + lambda_r * p_active.
inline Tensor combine_residual(const Tensor& p_frozen, const Tensor& p_active,
                               double lambda_r) {
    return add(p_frozen, scale(p_active, lambda_r));
}

/// Inject the routed prompt into the CLS token:
/// tokens[:,0,:] <- q + p_out W_up; every other token row is untouched.
inline Tensor inject_cls(const Tensor& tokens, const Tensor& p_out, const Tensor& w_up) {
    return with_cls(tokens, add(cls_of(tokens), matmul(p_out, w_up)));
}

/// Diversity loss over the application set S:
///   u_i = batch mean routing weight of prompt i
///   loss = sum_{i != j} u_i u_j |<Vhat_i, Vhat_j>| / sum_{i != j} u_i u_j.
/// Degenerate sets (|S| < 2 or no positive pair mass) contribute 0 with no
/// gradient, matching the vanishing denominator.
inline Tensor diversity_loss(const Tensor& weights, const Tensor& values) {
    Tape* tp = detail::tape_of({weights, values});
    const int subset = weights.cols();
    require(values.rows() == subset, "diversity_loss: weights/values subset mismatch");
    if (subset < 2) return tp->scalar(0.0);
    Tensor usage = mean_rows(weights);
    const auto& uv = usage.value();
    double total = 0.0, sq = 0.0;
    for (double u : uv) {
        total += u;
        sq += u * u;
    }
    if (total * total - sq <= 1e-12) return tp->scalar(0.0);
    Tensor gram = zero_diag(abs_op(matmul_nt(normalize_rows(values), normalize_rows(values))));
    Tensor u_row = reshape(usage, {1, subset});
    Tensor numer = reshape(matmul_nt(matmul(u_row, gram), u_row), {1});
    Tensor sum_u = sum_all(usage);
    Tensor denom = sub(mul(sum_u, sum_u), sum_all(mul(usage, usage)));
    return div(numer, denom);
}

/// Mean L2 norm of the active prompt values; keeps fresh prompts acting as
/// small residuals.
inline Tensor norm_loss(const Tensor& active_values) {
    if (active_values.rows() < 1) throw ContractError("norm_loss: empty active set");
    return mean_all(row_norms(active_values));
}

/// Gradient-free EMA write. Each query is assigned to its nearest key slot
/// by cosine similarity; an assigned slot k moves as
///   M_K[k] <- gamma M_K[k] + (1-gamma) mean(assigned raw queries)
/// and M_V likewise with the post-enhancement queries. Unassigned slots
/// are untouched. Runs on raw buffers, outside any tape.
inline void write_memory_ema(MemoryBank& bank, const std::vector<double>& q_raw,
                             const std::vector<double>& q_enh, int batch) {
    const int d = bank.dim;
    const int m = bank.slots();
    if (static_cast<int>(q_raw.size()) != batch * d ||
        static_cast<int>(q_enh.size()) != batch * d)
        throw DimensionError("write_memory_ema: query buffer mismatch");
    if (batch == 0 || bank.momentum >= 1.0) return;
    std::vector<double> key_norm(static_cast<std::size_t>(m));
    for (int k = 0; k < m; ++k) {
        double n = 0.0;
        for (int j = 0; j < d; ++j) {
            const double x = bank.keys[static_cast<std::size_t>(k) * d + j];
            n += x * x;
        }
        key_norm[static_cast<std::size_t>(k)] = std::sqrt(n) + 1e-12;
    }
    std::vector<double> sum_raw(static_cast<std::size_t>(m) * d, 0.0);
    std::vector<double> sum_enh(static_cast<std::size_t>(m) * d, 0.0);
    std::vector<int> hits(static_cast<std::size_t>(m), 0);
    for (int b = 0; b < batch; ++b) {
        const double* q = q_raw.data() + static_cast<std::size_t>(b) * d;
        double qn = 0.0;
        for (int j = 0; j < d; ++j) qn += q[j] * q[j];
        qn = std::sqrt(qn) + 1e-12;
        int best = 0;
        double best_sim = -2.0;
        for (int k = 0; k < m; ++k) {
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += q[j] * bank.keys[static_cast<std::size_t>(k) * d + j];
            const double sim = dot / (qn * key_norm[static_cast<std::size_t>(k)]);
            if (sim > best_sim) {
                best_sim = sim;
                best = k;
            }
        }
        hits[static_cast<std::size_t>(best)] += 1;
        for (int j = 0; j < d; ++j) {
            sum_raw[static_cast<std::size_t>(best) * d + j] += q[j];
            sum_enh[static_cast<std::size_t>(best) * d + j] +=
                q_enh[static_cast<std::size_t>(b) * d + j];
        }
    }
    const double g = bank.momentum;
    for (int k = 0; k < m; ++k) {
        if (!hits[static_cast<std::size_t>(k)]) continue;
        const double inv = 1.0 / hits[static_cast<std::size_t>(k)];
        for (int j = 0; j < d; ++j) {
            const std::size_t o = static_cast<std::size_t>(k) * d + j;
            bank.keys[o] = g * bank.keys[o] + (1.0 - g) * sum_raw[o] * inv;
            bank.values[o] = g * bank.values[o] + (1.0 - g) * sum_enh[o] * inv;
        }
    }
}

/// Scatter subset routing weights into full-pool coordinates (value level,
/// for the drift monitors).
inline std::vector<double> scatter_weights(const std::vector<double>& subset_weights,
                                           const std::vector<int>& subset, int batch,
                                           int pool_size) {
    std::vector<double> full(static_cast<std::size_t>(batch) * pool_size, 0.0);
    const int w = static_cast<int>(subset.size());
    for (int b = 0; b < batch; ++b)
        for (int i = 0; i < w; ++i)
            full[static_cast<std::size_t>(b) * pool_size + subset[static_cast<std::size_t>(i)]] =
                subset_weights[static_cast<std::size_t>(b) * w + i];
    return full;
}

}  // namespace dilkit
