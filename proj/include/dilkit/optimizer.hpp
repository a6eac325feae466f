#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "dilkit/errors.hpp"

namespace dilkit {

/// A trainable view into persistent storage: `rows` lists the trainable
/// row indices of the (row-major) buffer, so a partially frozen matrix
/// (the prompt pool) exposes only its active rows to the optimizer and
/// frozen rows stay bitwise untouched.
struct Param {
    std::string name;
    std::vector<double>* buf = nullptr;
    int cols = 0;
    std::vector<int> rows;
    bool decay = true;  // weight decay applies (off for log-variances and biases)

    std::vector<double> grad, m, v;

    int count() const { return static_cast<int>(rows.size()) * cols; }

    void init_state() {
        grad.assign(static_cast<std::size_t>(count()), 0.0);
        m.assign(static_cast<std::size_t>(count()), 0.0);
        v.assign(static_cast<std::size_t>(count()), 0.0);
    }

    std::vector<double> gather() const {
        std::vector<double> out(static_cast<std::size_t>(count()));
        for (std::size_t r = 0; r < rows.size(); ++r)
            std::copy_n(buf->data() + static_cast<std::size_t>(rows[r]) * cols, cols,
                        out.data() + r * cols);
        return out;
    }

    void set_grad(const std::vector<double>& g) {
        if (static_cast<int>(g.size()) != count())
            throw DimensionError("param '" + name + "': gradient size mismatch");
        grad = g;
    }
};

inline Param make_param(std::string name, std::vector<double>* buf, int rows_total, int cols,
                        bool decay = true) {
    Param p;
    p.name = std::move(name);
    p.buf = buf;
    p.cols = cols;
    p.decay = decay;
    p.rows.resize(static_cast<std::size_t>(rows_total));
    for (int r = 0; r < rows_total; ++r) p.rows[static_cast<std::size_t>(r)] = r;
    p.init_state();
    return p;
}

inline Param make_param_rows(std::string name, std::vector<double>* buf, std::vector<int> rows,
                             int cols, bool decay = true) {
    Param p;
    p.name = std::move(name);
    p.buf = buf;
    p.cols = cols;
    p.decay = decay;
    p.rows = std::move(rows);
    p.init_state();
    return p;
}

/// Decoupled-weight-decay Adam. One instance per stage; the learning rate
/// is supplied per step so the scheduler stays outside.
struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    long steps = 0;

    void step(std::vector<Param>& params, double lr) {
        ++steps;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
        for (Param& p : params) {
            for (std::size_t r = 0; r < p.rows.size(); ++r) {
                double* row = p.buf->data() + static_cast<std::size_t>(p.rows[r]) * p.cols;
                for (int c = 0; c < p.cols; ++c) {
                    const std::size_t i = r * p.cols + c;
                    const double g = p.grad[i];
                    p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
                    p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
                    const double mh = p.m[i] / bc1;
                    const double vh = p.v[i] / bc2;
                    double update = mh / (std::sqrt(vh) + eps);
                    if (p.decay && weight_decay > 0.0) update += weight_decay * row[c];
                    row[c] -= lr * update;
                }
            }
        }
    }
};

/// Cosine schedule over a stage: full rate at epoch 0, decaying toward 0
/// by the configured epoch budget.
inline double cosine_lr(double base, int epoch, int total_epochs) {
    if (total_epochs <= 1) return base;
    const double t = static_cast<double>(epoch) / static_cast<double>(total_epochs);
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace dilkit
