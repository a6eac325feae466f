#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dilkit/autodiff.hpp"
#include "dilkit/config.hpp"
#include "dilkit/rng.hpp"

namespace dilkit {

/// Frozen transformer-lite standing in for a pretrained backbone: token
/// embedding, a learnable-but-frozen CLS vector, and pre-LN blocks of
/// self-attention + GELU MLP. All weights are fixed after seeded
/// initialization; activations stay differentiable so gradients reach the
/// prompts injected into the CLS row.
struct BackboneLayer {
    std::vector<double> wq, wk, wv, wo;      // D x D
    std::vector<double> ln1_g, ln1_b;        // D
    std::vector<double> ln2_g, ln2_b;        // D
    std::vector<double> w_in;                // D x (ratio*D)
    std::vector<double> w_out;               // (ratio*D) x D
};

struct Backbone {
    int input_dim = 0;
    int dim = 0;
    int layers = 0;
    int heads = 0;
    int mlp_ratio = 0;
    double ln_eps = 1e-5;
    std::vector<double> embed;  // input_dim x D
    std::vector<double> cls;    // D
    std::vector<BackboneLayer> layer;
};

inline Backbone make_backbone(const ExperimentConfig& cfg, Rng rng) {
    Backbone bb;
    bb.input_dim = cfg.input_dim;
    bb.dim = cfg.feature_dim;
    bb.layers = cfg.layers;
    bb.heads = cfg.heads;
    bb.mlp_ratio = cfg.mlp_ratio;
    bb.ln_eps = cfg.ln_eps;
    const int d = bb.dim;
    bb.embed = rng.child("embed").normal_vec(
        static_cast<std::size_t>(bb.input_dim) * d, 0.0, 1.0 / std::sqrt(bb.input_dim));
    bb.cls = rng.child("cls").normal_vec(static_cast<std::size_t>(d));
    const double wsd = 1.0 / std::sqrt(static_cast<double>(d));
    const double osd = 1.0 / std::sqrt(static_cast<double>(d * bb.mlp_ratio));
    for (int l = 0; l < bb.layers; ++l) {
        Rng lr = rng.child("layer" + std::to_string(l));
        BackboneLayer bl;
        bl.wq = lr.child("wq").normal_vec(static_cast<std::size_t>(d) * d, 0.0, wsd);
        bl.wk = lr.child("wk").normal_vec(static_cast<std::size_t>(d) * d, 0.0, wsd);
        bl.wv = lr.child("wv").normal_vec(static_cast<std::size_t>(d) * d, 0.0, wsd);
        bl.wo = lr.child("wo").normal_vec(static_cast<std::size_t>(d) * d, 0.0, wsd);
        bl.ln1_g.assign(static_cast<std::size_t>(d), 1.0);
        bl.ln1_b.assign(static_cast<std::size_t>(d), 0.0);
        bl.ln2_g.assign(static_cast<std::size_t>(d), 1.0);
        bl.ln2_b.assign(static_cast<std::size_t>(d), 0.0);
        bl.w_in = lr.child("w_in").normal_vec(
            static_cast<std::size_t>(d) * d * bb.mlp_ratio, 0.0, wsd);
        bl.w_out = lr.child("w_out").normal_vec(
            static_cast<std::size_t>(d) * d * bb.mlp_ratio, 0.0, osd);
        bb.layer.push_back(std::move(bl));
    }
    return bb;
}

/// Tape-bound constants for one forward pass.
struct BackboneLayerTensors {
    Tensor wq, wk, wv, wo;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor w_in, w_out;
};

struct BackboneTensors {
    Tensor embed, cls;
    std::vector<BackboneLayerTensors> layer;
};

inline BackboneTensors bind_backbone(Tape& tp, const Backbone& bb) {
    BackboneTensors t;
    const int d = bb.dim;
    t.embed = tp.constant({bb.input_dim, d}, bb.embed);
    t.cls = tp.constant({d}, bb.cls);
    for (const BackboneLayer& bl : bb.layer) {
        BackboneLayerTensors lt;
        lt.wq = tp.constant({d, d}, bl.wq);
        lt.wk = tp.constant({d, d}, bl.wk);
        lt.wv = tp.constant({d, d}, bl.wv);
        lt.wo = tp.constant({d, d}, bl.wo);
        lt.ln1_g = tp.constant({d}, bl.ln1_g);
        lt.ln1_b = tp.constant({d}, bl.ln1_b);
        lt.ln2_g = tp.constant({d}, bl.ln2_g);
        lt.ln2_b = tp.constant({d}, bl.ln2_b);
        lt.w_in = tp.constant({d, d * bb.mlp_ratio}, bl.w_in);
        lt.w_out = tp.constant({d * bb.mlp_ratio, d}, bl.w_out);
        t.layer.push_back(std::move(lt));
    }
    return t;
}

/// Embed a batch of token grids and prepend the CLS token:
/// (B, S, input_dim) -> (B, 1+S, D).
inline Tensor embed_tokens(Tape& tp, const BackboneTensors& bb, const std::vector<double>& grid,
                           int batch, int tokens, int input_dim) {
    Tensor raw = tp.constant({batch, tokens, input_dim}, grid);
    Tensor embedded = matmul(raw, bb.embed);
    return prepend_row(embedded, bb.cls);
}

inline Tensor apply_ln(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    return add_rowvec(mul_rowvec(layer_norm(x, eps), gain), bias);
}

/// Pre-LN block: x += Attn(LN1(x)); x += MLP(LN2(x)).
inline Tensor backbone_layer_forward(const Tensor& tokens, const BackboneLayerTensors& lt,
                                     int heads, double ln_eps) {
    Tensor h = add(tokens, self_attention(apply_ln(tokens, lt.ln1_g, lt.ln1_b, ln_eps), lt.wq,
                                          lt.wk, lt.wv, lt.wo, heads));
    Tensor mlp = matmul(gelu(matmul(apply_ln(h, lt.ln2_g, lt.ln2_b, ln_eps), lt.w_in)), lt.w_out);
    return add(h, mlp);
}

}  // namespace dilkit
