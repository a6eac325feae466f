#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "dilkit/errors.hpp"

namespace dilkit {

using Shape = std::vector<int>;

inline int numel(const Shape& s) {
    int n = 1;
    for (int d : s) n *= d;
    return n;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

namespace detail {

// c(R,N) += a(R,K) * b(K,N)
inline void mm_acc(const double* a, const double* b, double* c, int R, int K, int N) {
    for (int i = 0; i < R; ++i) {
        const double* ar = a + static_cast<std::size_t>(i) * K;
        double* cr = c + static_cast<std::size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const double av = ar[k];
            const double* br = b + static_cast<std::size_t>(k) * N;
            for (int j = 0; j < N; ++j) cr[j] += av * br[j];
        }
    }
}

// c(R,M) += a(R,K) * b(M,K)^T
inline void mm_nt_acc(const double* a, const double* b, double* c, int R, int K, int M) {
    for (int i = 0; i < R; ++i) {
        const double* ar = a + static_cast<std::size_t>(i) * K;
        double* cr = c + static_cast<std::size_t>(i) * M;
        for (int j = 0; j < M; ++j) {
            const double* br = b + static_cast<std::size_t>(j) * K;
            double acc = 0.0;
            for (int k = 0; k < K; ++k) acc += ar[k] * br[k];
            cr[j] += acc;
        }
    }
}

// c(K,N) += a(R,K)^T * b(R,N)
inline void mm_tn_acc(const double* a, const double* b, double* c, int R, int K, int N) {
    for (int i = 0; i < R; ++i) {
        const double* ar = a + static_cast<std::size_t>(i) * K;
        const double* br = b + static_cast<std::size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const double av = ar[k];
            double* cr = c + static_cast<std::size_t>(k) * N;
            for (int j = 0; j < N; ++j) cr[j] += av * br[j];
        }
    }
}

inline double gauss_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gauss_pdf(double x) {
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace detail

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw DimensionError(msg);
}

class Tape;

/// Handle to a node on a Tape. Cheap to copy; the tape owns the data.
struct Tensor {
    Tape* tape = nullptr;
    int node = -1;

    bool defined() const { return tape != nullptr && node >= 0; }
    const Shape& shape() const;
    const std::vector<double>& value() const;
    bool requires_grad() const;
    double scalar() const;
    int size() const { return numel(shape()); }
    int rows() const;   // product of all but the last axis
    int cols() const;   // last axis
};

/// Ordered record of primitive applications. Nodes are appended in
/// execution order, which is a topological order by construction, so the
/// reverse sweep visits them in exact reverse topological order. One tape
/// per training iteration; tapes are neither copyable nor movable so the
/// indices captured by backward closures stay valid.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    struct Node {
        Shape shape;
        std::vector<double> val;
        std::vector<double> grad;
        bool requires_grad = false;
        std::function<void(Tape&)> back;  // empty for leaves
    };

    Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad) {
        require(numel(shape) == static_cast<int>(data.size()),
                "leaf: shape " + shape_str(shape) + " does not match data length " +
                    std::to_string(data.size()));
        nodes_.push_back(Node{std::move(shape), std::move(data), {}, requires_grad, {}});
        return Tensor{this, static_cast<int>(nodes_.size()) - 1};
    }

    Tensor constant(Shape shape, std::vector<double> data) {
        return leaf(std::move(shape), std::move(data), false);
    }

    Tensor scalar(double v) { return constant({1}, {v}); }

    Tensor make(Shape shape, std::vector<double> val, bool requires_grad) {
        nodes_.push_back(Node{std::move(shape), std::move(val), {}, requires_grad, {}});
        return Tensor{this, static_cast<int>(nodes_.size()) - 1};
    }

    void set_back(const Tensor& t, std::function<void(Tape&)> back) {
        if (at(t.node).requires_grad) at(t.node).back = std::move(back);
    }

    Node& at(int i) { return nodes_[static_cast<std::size_t>(i)]; }
    const Node& at(int i) const { return nodes_[static_cast<std::size_t>(i)]; }

    const std::vector<double>& val(const Tensor& t) const { return at(t.node).val; }

    /// Gradient of the last backward() loss with respect to t.
    const std::vector<double>& grad(const Tensor& t) const {
        const Node& n = at(t.node);
        if (!n.requires_grad)
            throw ContractError("grad: tensor does not participate in differentiation");
        return n.grad;
    }

    /// Reverse sweep from a scalar loss. Fills grad buffers of every
    /// tracked node; untracked tensors receive none.
    void backward(const Tensor& loss) {
        require(loss.tape == this, "backward: loss lives on another tape");
        if (numel(at(loss.node).shape) != 1)
            throw ContractError("backward: loss must be a scalar");
        if (!at(loss.node).requires_grad)
            throw ContractError("backward: loss does not depend on any tracked tensor");
        for (auto& n : nodes_)
            if (n.requires_grad) n.grad.assign(n.val.size(), 0.0);
        at(loss.node).grad[0] = 1.0;
        for (int i = loss.node; i >= 0; --i) {
            Node& n = at(i);
            if (n.requires_grad && n.back) n.back(*this);
        }
    }

    // Accumulate u into node i's grad if node i is tracked.
    void add_grad(int i, const double* u, std::size_t n) {
        Node& nd = at(i);
        if (!nd.requires_grad) return;
        for (std::size_t k = 0; k < n; ++k) nd.grad[k] += u[k];
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    std::deque<Node> nodes_;
};

inline const Shape& Tensor::shape() const { return tape->at(node).shape; }
inline const std::vector<double>& Tensor::value() const { return tape->at(node).val; }
inline bool Tensor::requires_grad() const { return tape->at(node).requires_grad; }
inline double Tensor::scalar() const {
    require(size() == 1, "scalar: tensor has " + std::to_string(size()) + " elements");
    return value()[0];
}
inline int Tensor::rows() const {
    const Shape& s = shape();
    require(!s.empty(), "rows: rank-0 tensor");
    int r = 1;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
    return r;
}
inline int Tensor::cols() const {
    const Shape& s = shape();
    require(!s.empty(), "cols: rank-0 tensor");
    return s.back();
}

namespace detail {

inline Tape* tape_of(std::initializer_list<Tensor> ts) {
    Tape* tp = nullptr;
    for (const Tensor& t : ts) {
        if (!t.defined()) continue;
        if (tp == nullptr) tp = t.tape;
        require(t.tape == tp, "operands live on different tapes");
    }
    require(tp != nullptr, "operation has no defined operands");
    return tp;
}

inline bool any_grad(std::initializer_list<Tensor> ts) {
    for (const Tensor& t : ts)
        if (t.defined() && t.requires_grad()) return true;
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    Tape* tp = detail::tape_of({a, b});
    require(same_shape(a.shape(), b.shape()),
            "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    Tensor r = tp->make(a.shape(), std::move(out), detail::any_grad({a, b}));
    const int ia = a.node, ib = b.node, ir = r.node;
    tp->set_back(r, [ia, ib, ir](Tape& t) {
        const auto& g = t.at(ir).grad;
        t.add_grad(ia, g.data(), g.size());
        t.add_grad(ib, g.data(), g.size());
    });
    return r;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    Tape* tp = detail::tape_of({a, b});
    require(same_shape(a.shape(), b.shape()),
            "sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    Tensor r = tp->make(a.shape(), std::move(out), detail::any_grad({a, b}));
    const int ia = a.node, ib = b.node, ir = r.node;
    tp->set_back(r, [ia, ib, ir](Tape& t) {
        const auto& g = t.at(ir).grad;
        t.add_grad(ia, g.data(), g.size());
        if (t.at(ib).requires_grad) {
            auto& gb = t.at(ib).grad;
            for (std::size_t k = 0; k < g.size(); ++k) gb[k] -= g[k];
        }
    });
    return r;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    Tape* tp = detail::tape_of({a, b});
    require(same_shape(a.shape(), b.shape()),
            "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    Tensor r = tp->make(a.shape(), std::move(out), detail::any_grad({a, b}));
    const int ia = a.node, ib = b.node, ir = r.node;
    tp->set_back(r, [ia, ib, ir](Tape& t) {
        const auto& g = t.at(ir).grad;
        const auto& av2 = t.at(ia).val;
        const auto& bv2 = t.at(ib).val;
        if (t.at(ia).requires_grad) {
            auto& ga = t.at(ia).grad;
            for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * bv2[k];
        }
        if (t.at(ib).requires_grad) {
            auto& gb = t.at(ib).grad;
            for (std::size_t k = 0; k < g.size(); ++k) gb[k] += g[k] * av2[k];
        }
    });
    return r;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    Tape* tp = detail::tape_of({a, b});
    require(same_shape(a.shape(), b.shape()),
            "div: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
    Tensor r = tp->make(a.shape(), std::move(out), detail::any_grad({a, b}));
    const int ia = a.node, ib = b.node, ir = r.node;
    tp->set_back(r, [ia, ib, ir](Tape& t) {
        const auto& g = t.at(ir).grad;
        const auto& av2 = t.at(ia).val;
        const auto& bv2 = t.at(ib).val;
        if (t.at(ia).requires_grad) {
            auto& ga = t.at(ia).grad;
            for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] / bv2[k];
        }
        if (t.at(ib).requires_grad) {
            auto& gb = t.at(ib).grad;
            for (std::size_t k = 0; k < g.size(); ++k)
                gb[k] -= g[k] * av2[k] / (bv2[k] * bv2[k]);
        }
    });
    return r;
}

inline Tensor scale(const Tensor& a, double c) {
    Tape* tp = detail::tape_of({a});
    std::vector<double> out(a.value());
    for (auto& x : out) x *= c;
    Tensor r = tp->make(a.shape(), std::move(out), a.requires_grad());
    const int ia = a.node, ir = r.node;
    tp->set_back(r, [ia, ir, c](Tape& t) {
        const auto& g = t.at(ir).grad;
        auto& ga = t.at(ia).grad;
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += c * g[k];
    });
    return r;
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor exp_op(const Tensor& a) {
    Tape* tp = detail::tape_of({a});
    std::vector<double> out(a.value());
    for (auto& x : out) x = std::exp(x);
    Tensor r = tp->make(a.shape(), std::move(out), a.requires_grad());
    const int ia = a.node, ir = r.node;
    tp->set_back(r, [ia, ir](Tape& t) {
        const auto& g = t.at(ir).grad;
        const auto& rv = t.at(ir).val;
        auto& ga = t.at(ia).grad;
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * rv[k];
    });
    return r;
}

/// Elementwise |x|; subgradient 0 at x = 0.
inline Tensor abs_op(const Tensor& a) {
    Tape* tp = detail::tape_of({a});
    std::vector<double> out(a.value());
    for (auto& x : out) x = std::fabs(x);
    Tensor r = tp->make(a.shape(), std::move(out), a.requires_grad());
    const int ia = a.node, ir = r.node;
    tp->set_back(r, [ia, ir](Tape& t) {
        const auto& g = t.at(ir).grad;
        const auto& av = t.at(ia).val;
        auto& ga = t.at(ia).grad;
        for (std::size_t k = 0; k < g.size(); ++k) {
            const double s = av[k] > 0.0 ? 1.0 : (av[k] < 0.0 ? -1.0 : 0.0);
            ga[k] += g[k] * s;
        }
    });
    return r;
}

/// Exact-erf GELU: x * Phi(x).
inline Tensor gelu(const Tensor& a) {
    Tape* tp = detail::tape_of({a});
    const auto& av = a.value();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * detail::gauss_cdf(av[i]);
    Tensor r = tp->make(a.shape(), std::move(out), a.requires_grad());
    const int ia = a.node, ir = r.node;
    tp->set_back(r, [ia, ir](Tape& t) {
        const auto& g = t.at(ir).grad;
        const auto& av2 = t.at(ia).val;
        auto& ga = t.at(ia).grad;
        for (std::size_t k = 0; k < g.size(); ++k) {
            const double x = av2[k];
            ga[k] += g[k] * (detail::gauss_cdf(x) + x * detail::gauss_pdf(x));
        }
    });
    return r;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

/// a(..., K) * b(K, N) -> (..., N). Leading axes of a are preserved.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    Tape* tp = detail::tape_of({a, b});
    require(b.shape().size() == 2, "matmul: rhs must be a matrix");
    const int K = a.cols(), R = a.rows();
    require(b.shape()[0] == K, "matmul: inner dimensions " + std::to_string(K) + " vs " +
                                   std::to_string(b.shape()[0]));
    const int N = b.shape()[1];
    Shape os = a.shape();
    os.back() = N;
    std::vector<double> out(static_cast<std::size_t>(R) * N, 0.0);
    detail::mm_acc(a.value().data(), b.value().data(), out.data(), R, K, N);
    Tensor r = tp->make(std::move(os), std::move(out), detail::any_grad({a, b}));
    const int ia = a.node, ib = b.node, ir = r.node;
    tp->set_back(r, [ia, ib, ir, R, K, N](Tape& t) {
        const auto& g = t.at(ir).grad;
        if (t.at(ia).requires_grad)
            detail::mm_nt_acc(g.data(), t.at(ib).val.data(), t.at(ia).grad.data(), R, N, K);
        if (t.at(ib).requires_grad)
            detail::mm_tn_acc(t.at(ia).val.data(), g.data(), t.at(ib).grad.data(), R, K, N);
    });
    return r;
}

/// a(..., K) * b(M, K)^T -> (..., M).
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    Tape* tp = detail::tape_of({a, b});
    require(b.shape().size() == 2, "matmul_nt: rhs must be a matrix");
    const int K = a.cols(), R = a.rows();
    require(b.shape()[1] == K, "matmul_nt: inner dimensions " + std::to_string(K) + " vs " +
                                   std::to_string(b.shape()[1]));
    const int M = b.shape()[0];
    Shape os = a.shape();
    os.back() = M;
    std::vector<double> out(static_cast<std::size_t>(R) * M, 0.0);
    detail::mm_nt_acc(a.value().data(), b.value().data(), out.data(), R, K, M);
    Tensor r = tp->make(std::move(os), std::move(out), detail::any_grad({a, b}));
    const int ia = a.node, ib = b.node, ir = r.node;
    tp->set_back(r, [ia, ib, ir, R, K, M](Tape& t) {
        const auto& g = t.at(ir).grad;
        if (t.at(ia).requires_grad)
            detail::mm_acc(g.data(), t.at(ib).val.data(), t.at(ia).grad.data(), R, M, K);
        if (t.at(ib).requires_grad)
            detail::mm_tn_acc(g.data(), t.at(ia).val.data(), t.at(ib).grad.data(), R, M, K);
    });
    return r;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    Tape* tp = detail::tape_of({a});
    require(numel(shape) == a.size(), "reshape: element count mismatch");
    Tensor r = tp->make(std::move(shape), a.value(), a.requires_grad());
    const int ia = a.node, ir = r.node;
    tp->set_back(r, [ia, ir](Tape& t) {
        const auto& g = t.at(ir).grad;
        t.add_grad(ia, g.data(), g.size());
    });
    return r;
}

/// Concatenate 2-D tensors along columns.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    Tape* tp = parts[0].tape;
    const int R = parts[0].rows();
    int C = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        require(p.tape == tp, "concat_cols: mixed tapes");
        require(p.shape().size() == 2 && p.rows() == R, "concat_cols: row mismatch");
        C += p.cols();
        rg = rg || p.requires_grad();
    }
    std::vector<double> out(static_cast<std::size_t>(R) * C);
    int off = 0;
    for (const Tensor& p : parts) {
        const int pc = p.cols();
        const auto& pv = p.value();
        for (int i = 0; i < R; ++i)
            std::copy_n(pv.data() + static_cast<std::size_t>(i) * pc, pc,
                        out.data() + static_cast<std::size_t>(i) * C + off);
        off += pc;
    }
    Tensor r = tp->make({R, C}, std::move(out), rg);
    std::vector<int> idx;
    std::vector<int> widths;
    for (const Tensor& p : parts) {
        idx.push_back(p.node);
        widths.push_back(p.cols());
    }
    const int ir = r.node;
    tp->set_back(r, [idx, widths, ir, R, C](Tape& t) {
        const auto& g = t.at(ir).grad;
        int off2 = 0;
        for (std::size_t p = 0; p < idx.size(); ++p) {
            const int pc = widths[p];
            if (t.at(idx[p]).requires_grad) {
                auto& gp = t.at(idx[p]).grad;
                for (int i = 0; i < R; ++i)
                    for (int j = 0; j < pc; ++j)
                        gp[static_cast<std::size_t>(i) * pc + j] +=
                            g[static_cast<std::size_t>(i) * C + off2 + j];
            }
            off2 += pc;
        }
    });
    return r;
}

/// Column slice [c0, c1) of a 2-D tensor.
inline Tensor cols(const Tensor& a, int c0, int c1) {
    Tape* tp = detail::tape_of({a});
    require(a.shape().size() == 2, "cols: need a matrix");
    const int R = a.rows(), C = a.cols();
    require(0 <= c0 && c0 < c1 && c1 <= C, "cols: bad range");
    const int W = c1 - c0;
    std::vector<double> out(static_cast<std::size_t>(R) * W);
    const auto& av = a.value();
    for (int i = 0; i < R; ++i)
        std::copy_n(av.data() + static_cast<std::size_t>(i) * C + c0, W,
                    out.data() + static_cast<std::size_t>(i) * W);
    Tensor r = tp->make({R, W}, std::move(out), a.requires_grad());
    const int ia = a.node, ir = r.node;
    tp->set_back(r, [ia, ir, R, C, c0, W](Tape& t) {
        const auto& g = t.at(ir).grad;
        auto& ga = t.at(ia).grad;
        for (int i = 0; i < R; ++i)
            for (int j = 0; j < W; ++j)
                ga[static_cast<std::size_t>(i) * C + c0 + j] +=
                    g[static_cast<std::size_t>(i) * W + j];
    });
    return r;
}

/// Select rows of a 2-D tensor by index; backward scatters into the source.
inline Tensor gather_rows(const Tensor& a, const std::vector<int>& rows) {
    Tape* tp = detail::tape_of({a});
    require(a.shape().size() == 2, "gather_rows: need a matrix");
    const int R = a.rows(), C = a.cols();
    std::vector<double> out(rows.size() * static_cast<std::size_t>(C));
    const auto& av = a.value();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i] >= 0 && rows[i] < R, "gather_rows: index out of range");
        std::copy_n(av.data() + static_cast<std::size_t>(rows[i]) * C, C,
                    out.data() + i * C);
    }
    Tensor r = tp->make({static_cast<int>(rows.size()), C}, std::move(out), a.requires_grad());
    const int ia = a.node, ir = r.node;
    tp->set_back(r, [ia, ir, rows, C](Tape& t) {
        const auto& g = t.at(ir).grad;
        auto& ga = t.at(ia).grad;
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (int j = 0; j < C; ++j)
                ga[static_cast<std::size_t>(rows[i]) * C + j] += g[i * C + j];
    });
    return r;
}

/// CLS row (token 0) of a (B, T, D) token tensor -> (B, D).
inline Tensor cls_of(const Tensor& tokens) {
    Tape* tp = detail::tape_of({tokens});
    require(tokens.shape().size() == 3, "cls_of: need (B,T,D)");
    const int B = tokens.shape()[0], T = tokens.shape()[1], D = tokens.shape()[2];
    std::vector<double> out(static_cast<std::size_t>(B) * D);
    const auto& tv = tokens.value();
    for (int b = 0; b < B; ++b)
        std::copy_n(tv.data() + static_cast<std::size_t>(b) * T * D, D,
                    out.data() + static_cast<std::size_t>(b) * D);
    Tensor r = tp->make({B, D}, std::move(out), tokens.requires_grad());
    const int ia = tokens.node, ir = r.node;
    tp->set_back(r, [ia, ir, B, T, D](Tape& t) {
        const auto& g = t.at(ir).grad;
        auto& ga = t.at(ia).grad;
        for (int b = 0; b < B; ++b)
            for (int j = 0; j < D; ++j)
                ga[static_cast<std::size_t>(b) * T * D + j] +=
                    g[static_cast<std::size_t>(b) * D + j];
    });
    return r;
}

/// Replace the CLS row of (B, T, D) tokens with cls (B, D); other rows pass
/// through unchanged.
inline Tensor with_cls(const Tensor& tokens, const Tensor& cls) {
    Tape* tp = detail::tape_of({tokens, cls});
    require(tokens.shape().size() == 3, "with_cls: need (B,T,D)");
    const int B = tokens.shape()[0], T = tokens.shape()[1], D = tokens.shape()[2];
    require(cls.shape() == Shape({B, D}), "with_cls: cls must be (B,D)");
    std::vector<double> out(tokens.value());
    const auto& cv = cls.value();
    for (int b = 0; b < B; ++b)
        std::copy_n(cv.data() + static_cast<std::size_t>(b) * D, D,
                    out.data() + static_cast<std::size_t>(b) * T * D);
    Tensor r = tp->make(tokens.shape(), std::move(out), detail::any_grad({tokens, cls}));
    const int it = tokens.node, ic = cls.node, ir = r.node;
    tp->set_back(r, [it, ic, ir, B, T, D](Tape& t) {
        const auto& g = t.at(ir).grad;
        if (t.at(it).requires_grad) {
            auto& gt = t.at(it).grad;
            for (int b = 0; b < B; ++b)
                for (int i = 1; i < T; ++i)
                    for (int j = 0; j < D; ++j) {
                        const std::size_t o =
                            (static_cast<std::size_t>(b) * T + i) * D + j;
                        gt[o] += g[o];
                    }
        }
        if (t.at(ic).requires_grad) {
            auto& gc = t.at(ic).grad;
            for (int b = 0; b < B; ++b)
                for (int j = 0; j < D; ++j)
                    gc[static_cast<std::size_t>(b) * D + j] +=
                        g[static_cast<std::size_t>(b) * T * D + j];
        }
    });
    return r;
}

/// Prepend a shared row c (length D) to every sample of x (B, S, D),
/// giving (B, 1+S, D).
inline Tensor prepend_row(const Tensor& x, const Tensor& c) {
    Tape* tp = detail::tape_of({x, c});
    require(x.shape().size() == 3, "prepend_row: need (B,S,D)");
    const int B = x.shape()[0], S = x.shape()[1], D = x.shape()[2];
    require(c.shape() == Shape({D}), "prepend_row: row must be (D)");
    std::vector<double> out(static_cast<std::size_t>(B) * (S + 1) * D);
    const auto& xv = x.value();
    const auto& cv = c.value();
    for (int b = 0; b < B; ++b) {
        std::copy_n(cv.data(), D, out.data() + static_cast<std::size_t>(b) * (S + 1) * D);
        std::copy_n(xv.data() + static_cast<std::size_t>(b) * S * D,
                    static_cast<std::size_t>(S) * D,
                    out.data() + static_cast<std::size_t>(b) * (S + 1) * D + D);
    }
    Tensor r = tp->make({B, S + 1, D}, std::move(out), detail::any_grad({x, c}));
    const int ix = x.node, ic = c.node, ir = r.node;
    tp->set_back(r, [ix, ic, ir, B, S, D](Tape& t) {
        const auto& g = t.at(ir).grad;
        if (t.at(ix).requires_grad) {
            auto& gx = t.at(ix).grad;
            for (int b = 0; b < B; ++b)
                for (std::size_t k = 0; k < static_cast<std::size_t>(S) * D; ++k)
                    gx[static_cast<std::size_t>(b) * S * D + k] +=
                        g[static_cast<std::size_t>(b) * (S + 1) * D + D + k];
        }
        if (t.at(ic).requires_grad) {
            auto& gc = t.at(ic).grad;
            for (int b = 0; b < B; ++b)
                for (int j = 0; j < D; ++j)
                    gc[j] += g[static_cast<std::size_t>(b) * (S + 1) * D + j];
        }
    });
    return r;
}

// ---------------------------------------------------------------------------
// row-wise ops (last axis)
// ---------------------------------------------------------------------------

inline Tensor softmax_rows(const Tensor& a) {
    Tape* tp = detail::tape_of({a});
    const int R = a.rows(), C = a.cols();
    std::vector<double> out(a.value());
    for (int i = 0; i < R; ++i) {
        double* row = out.data() + static_cast<std::size_t>(i) * C;
        const double mx = *std::max_element(row, row + C);
        double sum = 0.0;
        for (int j = 0; j < C; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int j = 0; j < C; ++j) row[j] /= sum;
    }
    Tensor r = tp->make(a.shape(), std::move(out), a.requires_grad());
    const int ia = a.node, ir = r.node;
    tp->set_back(r, [ia, ir, R, C](Tape& t) {
        const auto& g = t.at(ir).grad;
        const auto& p = t.at(ir).val;
        auto& ga = t.at(ia).grad;
        for (int i = 0; i < R; ++i) {
            const std::size_t o = static_cast<std::size_t>(i) * C;
            double dot = 0.0;
            for (int j = 0; j < C; ++j) dot += g[o + j] * p[o + j];
            for (int j = 0; j < C; ++j) ga[o + j] += p[o + j] * (g[o + j] - dot);
        }
    });
    return r;
}

/// Normalize each row to zero mean, unit biased variance over the last
/// axis: y = (x - mean) / sqrt(var + eps). Affine, where needed, is applied
/// separately via mul_rowvec/add_rowvec.
inline Tensor layer_norm(const Tensor& a, double eps) {
    Tape* tp = detail::tape_of({a});
    const int R = a.rows(), C = a.cols();
    require(C >= 1, "layer_norm: empty rows");
    const auto& av = a.value();
    std::vector<double> out(av.size());
    auto sigma = std::make_shared<std::vector<double>>(R);
    for (int i = 0; i < R; ++i) {
        const std::size_t o = static_cast<std::size_t>(i) * C;
        double mean = 0.0;
        for (int j = 0; j < C; ++j) mean += av[o + j];
        mean /= C;
        double var = 0.0;
        for (int j = 0; j < C; ++j) {
            const double d = av[o + j] - mean;
            var += d * d;
        }
        var /= C;
        const double sd = std::sqrt(var + eps);
        (*sigma)[i] = sd;
        for (int j = 0; j < C; ++j) out[o + j] = (av[o + j] - mean) / sd;
    }
    Tensor r = tp->make(a.shape(), std::move(out), a.requires_grad());
    const int ia = a.node, ir = r.node;
    tp->set_back(r, [ia, ir, R, C, sigma](Tape& t) {
        const auto& g = t.at(ir).grad;
        const auto& y = t.at(ir).val;
        auto& ga = t.at(ia).grad;
        for (int i = 0; i < R; ++i) {
            const std::size_t o = static_cast<std::size_t>(i) * C;
            double gm = 0.0, gym = 0.0;
            for (int j = 0; j < C; ++j) {
                gm += g[o + j];
                gym += g[o + j] * y[o + j];
            }
            gm /= C;
            gym /= C;
            const double inv = 1.0 / (*sigma)[i];
            for (int j = 0; j < C; ++j)
                ga[o + j] += inv * (g[o + j] - gm - y[o + j] * gym);
        }
    });
    return r;
}

/// Row-wise L2 normalization: y = x / (||x|| + eps).
inline Tensor normalize_rows(const Tensor& a, double eps = 1e-12) {
    Tape* tp = detail::tape_of({a});
    const int R = a.rows(), C = a.cols();
    const auto& av = a.value();
    std::vector<double> out(av.size());
    auto norms = std::make_shared<std::vector<double>>(R);
    for (int i = 0; i < R; ++i) {
        const std::size_t o = static_cast<std::size_t>(i) * C;
        double n2 = 0.0;
        for (int j = 0; j < C; ++j) n2 += av[o + j] * av[o + j];
        const double n = std::sqrt(n2);
        (*norms)[i] = n;
        const double inv = 1.0 / (n + eps);
        for (int j = 0; j < C; ++j) out[o + j] = av[o + j] * inv;
    }
    Tensor r = tp->make(a.shape(), std::move(out), a.requires_grad());
    const int ia = a.node, ir = r.node;
    tp->set_back(r, [ia, ir, R, C, norms, eps](Tape& t) {
        const auto& g = t.at(ir).grad;
        const auto& x = t.at(ia).val;
        auto& ga = t.at(ia).grad;
        for (int i = 0; i < R; ++i) {
            const std::size_t o = static_cast<std::size_t>(i) * C;
            const double n = (*norms)[i];
            const double inv = 1.0 / (n + eps);
            if (n < 1e-300) {
                for (int j = 0; j < C; ++j) ga[o + j] += g[o + j] * inv;
                continue;
            }
            double ux = 0.0;
            for (int j = 0; j < C; ++j) ux += g[o + j] * x[o + j];
            const double coef = ux / (n * (n + eps) * (n + eps));
            for (int j = 0; j < C; ++j) ga[o + j] += g[o + j] * inv - coef * x[o + j];
        }
    });
    return r;
}

/// Broadcast add of a length-C vector to every row of (..., C).
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    Tape* tp = detail::tape_of({a, v});
    const int R = a.rows(), C = a.cols();
    require(v.shape() == Shape({C}), "add_rowvec: vector length mismatch");
    std::vector<double> out(a.value());
    const auto& vv = v.value();
    for (int i = 0; i < R; ++i)
        for (int j = 0; j < C; ++j) out[static_cast<std::size_t>(i) * C + j] += vv[j];
    Tensor r = tp->make(a.shape(), std::move(out), detail::any_grad({a, v}));
    const int ia = a.node, iv = v.node, ir = r.node;
    tp->set_back(r, [ia, iv, ir, R, C](Tape& t) {
        const auto& g = t.at(ir).grad;
        t.add_grad(ia, g.data(), g.size());
        if (t.at(iv).requires_grad) {
            auto& gv = t.at(iv).grad;
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j) gv[j] += g[static_cast<std::size_t>(i) * C + j];
        }
    });
    return r;
}

/// Broadcast multiply of a length-C vector with every row of (..., C).
inline Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
    Tape* tp = detail::tape_of({a, v});
    const int R = a.rows(), C = a.cols();
    require(v.shape() == Shape({C}), "mul_rowvec: vector length mismatch");
    std::vector<double> out(a.value());
    const auto& vv = v.value();
    for (int i = 0; i < R; ++i)
        for (int j = 0; j < C; ++j) out[static_cast<std::size_t>(i) * C + j] *= vv[j];
    Tensor r = tp->make(a.shape(), std::move(out), detail::any_grad({a, v}));
    const int ia = a.node, iv = v.node, ir = r.node;
    tp->set_back(r, [ia, iv, ir, R, C](Tape& t) {
        const auto& g = t.at(ir).grad;
        const auto& av = t.at(ia).val;
        const auto& vv2 = t.at(iv).val;
        if (t.at(ia).requires_grad) {
            auto& ga = t.at(ia).grad;
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j) {
                    const std::size_t o = static_cast<std::size_t>(i) * C + j;
                    ga[o] += g[o] * vv2[j];
                }
        }
        if (t.at(iv).requires_grad) {
            auto& gv = t.at(iv).grad;
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j) {
                    const std::size_t o = static_cast<std::size_t>(i) * C + j;
                    gv[j] += g[o] * av[o];
                }
        }
    });
    return r;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    Tape* tp = detail::tape_of({a});
    double s = 0.0;
    for (double x : a.value()) s += x;
    Tensor r = tp->make({1}, {s}, a.requires_grad());
    const int ia = a.node, ir = r.node;
    tp->set_back(r, [ia, ir](Tape& t) {
        const double g = t.at(ir).grad[0];
        auto& ga = t.at(ia).grad;
        for (auto& x : ga) x += g;
    });
    return r;
}

inline Tensor mean_all(const Tensor& a) {
    return scale(sum_all(a), 1.0 / a.size());
}

/// Column mean of a 2-D tensor: (R, C) -> (C).
inline Tensor mean_rows(const Tensor& a) {
    Tape* tp = detail::tape_of({a});
    require(a.shape().size() == 2, "mean_rows: need a matrix");
    const int R = a.rows(), C = a.cols();
    const auto& av = a.value();
    std::vector<double> out(C, 0.0);
    for (int i = 0; i < R; ++i)
        for (int j = 0; j < C; ++j) out[j] += av[static_cast<std::size_t>(i) * C + j];
    for (auto& x : out) x /= R;
    Tensor r = tp->make({C}, std::move(out), a.requires_grad());
    const int ia = a.node, ir = r.node;
    tp->set_back(r, [ia, ir, R, C](Tape& t) {
        const auto& g = t.at(ir).grad;
        auto& ga = t.at(ia).grad;
        for (int i = 0; i < R; ++i)
            for (int j = 0; j < C; ++j) ga[static_cast<std::size_t>(i) * C + j] += g[j] / R;
    });
    return r;
}

/// Row L2 norms of a 2-D tensor: (R, C) -> (R). Zero rows get subgradient 0.
inline Tensor row_norms(const Tensor& a) {
    Tape* tp = detail::tape_of({a});
    require(a.shape().size() == 2, "row_norms: need a matrix");
    const int R = a.rows(), C = a.cols();
    const auto& av = a.value();
    std::vector<double> out(R, 0.0);
    for (int i = 0; i < R; ++i) {
        double n2 = 0.0;
        for (int j = 0; j < C; ++j) {
            const double x = av[static_cast<std::size_t>(i) * C + j];
            n2 += x * x;
        }
        out[i] = std::sqrt(n2);
    }
    Tensor r = tp->make({R}, std::move(out), a.requires_grad());
    const int ia = a.node, ir = r.node;
    tp->set_back(r, [ia, ir, R, C](Tape& t) {
        const auto& g = t.at(ir).grad;
        const auto& nv = t.at(ir).val;
        const auto& av2 = t.at(ia).val;
        auto& ga = t.at(ia).grad;
        for (int i = 0; i < R; ++i) {
            if (nv[i] <= 0.0) continue;
            const double c = g[i] / nv[i];
            for (int j = 0; j < C; ++j) {
                const std::size_t o = static_cast<std::size_t>(i) * C + j;
                ga[o] += c * av2[o];
            }
        }
    });
    return r;
}

/// Square matrix with the diagonal zeroed.
inline Tensor zero_diag(const Tensor& a) {
    Tape* tp = detail::tape_of({a});
    require(a.shape().size() == 2 && a.shape()[0] == a.shape()[1],
            "zero_diag: need a square matrix");
    const int N = a.shape()[0];
    std::vector<double> out(a.value());
    for (int i = 0; i < N; ++i) out[static_cast<std::size_t>(i) * N + i] = 0.0;
    Tensor r = tp->make(a.shape(), std::move(out), a.requires_grad());
    const int ia = a.node, ir = r.node;
    tp->set_back(r, [ia, ir, N](Tape& t) {
        const auto& g = t.at(ir).grad;
        auto& ga = t.at(ia).grad;
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < N; ++j)
                if (i != j) {
                    const std::size_t o = static_cast<std::size_t>(i) * N + j;
                    ga[o] += g[o];
                }
    });
    return r;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean cross-entropy of logits (B, C) against integer labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    Tape* tp = detail::tape_of({logits});
    require(logits.shape().size() == 2, "cross_entropy: need (B,C) logits");
    const int B = logits.rows(), C = logits.cols();
    require(static_cast<int>(labels.size()) == B, "cross_entropy: label count mismatch");
    const auto& zv = logits.value();
    auto probs = std::make_shared<std::vector<double>>(zv);
    double loss = 0.0;
    for (int b = 0; b < B; ++b) {
        require(labels[b] >= 0 && labels[b] < C, "cross_entropy: label out of range");
        double* row = probs->data() + static_cast<std::size_t>(b) * C;
        const double mx = *std::max_element(row, row + C);
        double sum = 0.0;
        for (int j = 0; j < C; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int j = 0; j < C; ++j) row[j] /= sum;
        loss -= std::log(row[labels[b]]);
    }
    loss /= B;
    Tensor r = tp->make({1}, {loss}, logits.requires_grad());
    const int iz = logits.node, ir = r.node;
    tp->set_back(r, [iz, ir, B, C, probs, labels](Tape& t) {
        const double g = t.at(ir).grad[0];
        auto& gz = t.at(iz).grad;
        for (int b = 0; b < B; ++b)
            for (int j = 0; j < C; ++j) {
                const std::size_t o = static_cast<std::size_t>(b) * C + j;
                const double tg = (j == labels[b]) ? 1.0 : 0.0;
                gz[o] += g * ((*probs)[o] - tg) / B;
            }
    });
    return r;
}

/// KL(p || q) per row, averaged over rows; p must be a distribution per
/// row. 1-D inputs are treated as a single row.
inline Tensor kl_divergence(const Tensor& p, const Tensor& q) {
    Tape* tp = detail::tape_of({p, q});
    require(same_shape(p.shape(), q.shape()),
            "kl_divergence: " + shape_str(p.shape()) + " vs " + shape_str(q.shape()));
    const int R = p.rows(), C = p.cols();
    const auto& pv = p.value();
    const auto& qv = q.value();
    double loss = 0.0;
    for (int i = 0; i < R; ++i) {
        const std::size_t o = static_cast<std::size_t>(i) * C;
        double mass = 0.0;
        for (int j = 0; j < C; ++j) mass += pv[o + j];
        if (std::fabs(mass - 1.0) > 1e-6)
            throw ContractError("kl_divergence: target row is not a distribution (sum=" +
                                std::to_string(mass) + ")");
        for (int j = 0; j < C; ++j) {
            if (pv[o + j] > 0.0)
                loss += pv[o + j] * (std::log(pv[o + j]) - std::log(qv[o + j]));
        }
    }
    loss /= R;
    Tensor r = tp->make({1}, {loss}, detail::any_grad({p, q}));
    const int ip = p.node, iq = q.node, ir = r.node;
    tp->set_back(r, [ip, iq, ir, R, C](Tape& t) {
        const double g = t.at(ir).grad[0];
        const auto& pv2 = t.at(ip).val;
        const auto& qv2 = t.at(iq).val;
        if (t.at(iq).requires_grad) {
            auto& gq = t.at(iq).grad;
            for (std::size_t k = 0; k < qv2.size(); ++k)
                if (pv2[k] > 0.0) gq[k] -= g * pv2[k] / (qv2[k] * R);
        }
        if (t.at(ip).requires_grad) {
            auto& gp = t.at(ip).grad;
            for (std::size_t k = 0; k < pv2.size(); ++k)
                if (pv2[k] > 0.0)
                    gp[k] += g * (std::log(pv2[k]) - std::log(qv2[k]) + 1.0) / R;
        }
    });
    return r;
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

/// Scaled dot-product attention of queries (B, D) over a fixed key/value
/// store (M, D), split into `heads` chunks of D/heads, head outputs
/// concatenated and then projected by out_proj (D, D) when given
/// (identity otherwise).
inline Tensor multi_head_attention(const Tensor& q, const Tensor& keys, const Tensor& values,
                                   int heads, const Tensor& out_proj = {}) {
    require(q.shape().size() == 2 && keys.shape().size() == 2 && values.shape().size() == 2,
            "multi_head_attention: q, keys, values must be matrices");
    const int D = q.cols();
    if (heads < 1 || D % heads != 0)
        throw ConfigError("multi_head_attention: dim " + std::to_string(D) +
                          " not divisible by heads " + std::to_string(heads));
    require(keys.cols() == D && values.cols() == D && keys.rows() == values.rows(),
            "multi_head_attention: key/value shape mismatch");
    const int dh = D / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = cols(q, h * dh, (h + 1) * dh);
        Tensor kh = cols(keys, h * dh, (h + 1) * dh);
        Tensor vh = cols(values, h * dh, (h + 1) * dh);
        Tensor attn = softmax_rows(scale(matmul_nt(qh, kh), inv));
        outs.push_back(matmul(attn, vh));
    }
    Tensor cat = heads == 1 ? outs[0] : concat_cols(outs);
    return out_proj.defined() ? matmul(cat, out_proj) : cat;
}

/// Batched token self-attention for the backbone: tokens (B, T, D) with
/// shared projections wq/wk/wv/wo (D, D). Fused forward/backward.
inline Tensor self_attention(const Tensor& tokens, const Tensor& wq, const Tensor& wk,
                             const Tensor& wv, const Tensor& wo, int heads) {
    Tape* tp = detail::tape_of({tokens, wq, wk, wv, wo});
    require(tokens.shape().size() == 3, "self_attention: need (B,T,D)");
    const int B = tokens.shape()[0], T = tokens.shape()[1], D = tokens.shape()[2];
    if (heads < 1 || D % heads != 0)
        throw ConfigError("self_attention: dim not divisible by heads");
    for (const Tensor* w : {&wq, &wk, &wv, &wo})
        require(w->shape() == Shape({D, D}), "self_attention: projections must be (D,D)");
    const int dh = D / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t RD = static_cast<std::size_t>(B) * T * D;
    const int R = B * T;

    struct Ctx {
        std::vector<double> Q, K, V, A, O;
    };
    auto ctx = std::make_shared<Ctx>();
    ctx->Q.assign(RD, 0.0);
    ctx->K.assign(RD, 0.0);
    ctx->V.assign(RD, 0.0);
    ctx->A.assign(static_cast<std::size_t>(B) * heads * T * T, 0.0);
    ctx->O.assign(RD, 0.0);

    const double* X = tokens.value().data();
    detail::mm_acc(X, wq.value().data(), ctx->Q.data(), R, D, D);
    detail::mm_acc(X, wk.value().data(), ctx->K.data(), R, D, D);
    detail::mm_acc(X, wv.value().data(), ctx->V.data(), R, D, D);

    for (int b = 0; b < B; ++b) {
        const std::size_t base = static_cast<std::size_t>(b) * T * D;
        for (int h = 0; h < heads; ++h) {
            const int ho = h * dh;
            double* A = ctx->A.data() +
                        ((static_cast<std::size_t>(b) * heads + h) * T) * T;
            for (int i = 0; i < T; ++i) {
                const double* qi = ctx->Q.data() + base + static_cast<std::size_t>(i) * D + ho;
                double* arow = A + static_cast<std::size_t>(i) * T;
                double mx = -1e300;
                for (int j = 0; j < T; ++j) {
                    const double* kj =
                        ctx->K.data() + base + static_cast<std::size_t>(j) * D + ho;
                    double s = 0.0;
                    for (int d = 0; d < dh; ++d) s += qi[d] * kj[d];
                    arow[j] = s * inv;
                    mx = std::max(mx, arow[j]);
                }
                double sum = 0.0;
                for (int j = 0; j < T; ++j) {
                    arow[j] = std::exp(arow[j] - mx);
                    sum += arow[j];
                }
                double* oi = ctx->O.data() + base + static_cast<std::size_t>(i) * D + ho;
                for (int j = 0; j < T; ++j) {
                    arow[j] /= sum;
                    const double* vj =
                        ctx->V.data() + base + static_cast<std::size_t>(j) * D + ho;
                    for (int d = 0; d < dh; ++d) oi[d] += arow[j] * vj[d];
                }
            }
        }
    }

    std::vector<double> out(RD, 0.0);
    detail::mm_acc(ctx->O.data(), wo.value().data(), out.data(), R, D, D);

    Tensor r = tp->make(tokens.shape(), std::move(out),
                        detail::any_grad({tokens, wq, wk, wv, wo}));
    const int ix = tokens.node, iq = wq.node, ik = wk.node, ivn = wv.node, io = wo.node,
              ir = r.node;
    tp->set_back(r, [=](Tape& t) {
        const auto& g = t.at(ir).grad;
        const std::size_t rd = RD;
        std::vector<double> dO(rd, 0.0), dQ(rd, 0.0), dK(rd, 0.0), dV(rd, 0.0);
        detail::mm_nt_acc(g.data(), t.at(io).val.data(), dO.data(), R, D, D);
        if (t.at(io).requires_grad)
            detail::mm_tn_acc(ctx->O.data(), g.data(), t.at(io).grad.data(), R, D, D);

        std::vector<double> dA(static_cast<std::size_t>(T) * T);
        std::vector<double> dS(static_cast<std::size_t>(T) * T);
        for (int b = 0; b < B; ++b) {
            const std::size_t base = static_cast<std::size_t>(b) * T * D;
            for (int h = 0; h < heads; ++h) {
                const int ho = h * dh;
                const double* A = ctx->A.data() +
                                  ((static_cast<std::size_t>(b) * heads + h) * T) * T;
                for (int i = 0; i < T; ++i) {
                    const double* doi = dO.data() + base + static_cast<std::size_t>(i) * D + ho;
                    for (int j = 0; j < T; ++j) {
                        const double* vj =
                            ctx->V.data() + base + static_cast<std::size_t>(j) * D + ho;
                        double s = 0.0;
                        for (int d = 0; d < dh; ++d) s += doi[d] * vj[d];
                        dA[static_cast<std::size_t>(i) * T + j] = s;
                    }
                }
                for (int j = 0; j < T; ++j) {
                    double* dvj = dV.data() + base + static_cast<std::size_t>(j) * D + ho;
                    for (int i = 0; i < T; ++i) {
                        const double a = A[static_cast<std::size_t>(i) * T + j];
                        const double* doi =
                            dO.data() + base + static_cast<std::size_t>(i) * D + ho;
                        for (int d = 0; d < dh; ++d) dvj[d] += a * doi[d];
                    }
                }
                for (int i = 0; i < T; ++i) {
                    const std::size_t o = static_cast<std::size_t>(i) * T;
                    double dot = 0.0;
                    for (int j = 0; j < T; ++j) dot += dA[o + j] * A[o + j];
                    for (int j = 0; j < T; ++j)
                        dS[o + j] = A[o + j] * (dA[o + j] - dot) * inv;
                }
                for (int i = 0; i < T; ++i) {
                    double* dqi = dQ.data() + base + static_cast<std::size_t>(i) * D + ho;
                    for (int j = 0; j < T; ++j) {
                        const double s = dS[static_cast<std::size_t>(i) * T + j];
                        const double* kj =
                            ctx->K.data() + base + static_cast<std::size_t>(j) * D + ho;
                        for (int d = 0; d < dh; ++d) dqi[d] += s * kj[d];
                    }
                }
                for (int j = 0; j < T; ++j) {
                    double* dkj = dK.data() + base + static_cast<std::size_t>(j) * D + ho;
                    for (int i = 0; i < T; ++i) {
                        const double s = dS[static_cast<std::size_t>(i) * T + j];
                        const double* qi =
                            ctx->Q.data() + base + static_cast<std::size_t>(i) * D + ho;
                        for (int d = 0; d < dh; ++d) dkj[d] += s * qi[d];
                    }
                }
            }
        }

        const double* Xv = t.at(ix).val.data();
        if (t.at(ix).requires_grad) {
            auto& gx = t.at(ix).grad;
            detail::mm_nt_acc(dQ.data(), t.at(iq).val.data(), gx.data(), R, D, D);
            detail::mm_nt_acc(dK.data(), t.at(ik).val.data(), gx.data(), R, D, D);
            detail::mm_nt_acc(dV.data(), t.at(ivn).val.data(), gx.data(), R, D, D);
        }
        if (t.at(iq).requires_grad)
            detail::mm_tn_acc(Xv, dQ.data(), t.at(iq).grad.data(), R, D, D);
        if (t.at(ik).requires_grad)
            detail::mm_tn_acc(Xv, dK.data(), t.at(ik).grad.data(), R, D, D);
        if (t.at(ivn).requires_grad)
            detail::mm_tn_acc(Xv, dV.data(), t.at(ivn).grad.data(), R, D, D);
    });
    return r;
}

// ---------------------------------------------------------------------------
// diagnostics
// ---------------------------------------------------------------------------

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace dilkit
