#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "fedmol/autodiff.hpp"
#include "fedmol/diffusion.hpp"
#include "fedmol/params.hpp"

namespace fedmol {

/// Graph transformer hyperparameters. The global stream width follows the
/// edge width.
struct ModelConfig {
    int layers = 2;
    int hidden_node = 64;
    int hidden_edge = 32;
    int heads = 4;
    int f_node = kNodeFeatureDim;
    int f_graph = kGraphFeatureDim;

    int hidden_global() const { return hidden_edge; }

    void validate() const {
        if (layers < 1 || hidden_node < 1 || hidden_edge < 1 || heads < 1 || f_node < 1 || f_graph < 1)
            fail(ErrorKind::ShapeMismatch, "model config fields must be positive");
        if (hidden_node % heads != 0) fail(ErrorKind::ShapeMismatch, "heads must divide hidden_node");
    }
};

enum class ModelHead { Denoiser, Regressor };

namespace detail {

inline std::string layer_prefix(int layer) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "l%02d.", layer);
    return buf;
}

/// Enumerates (name, rows, cols) for every tensor of a model; the single
/// source of truth shared by init, loading and the forward pass.
template <typename Fn>
void for_each_tensor(const ModelConfig& cfg, ModelHead head, Fn&& fn) {
    int d = cfg.hidden_node;
    int e = cfg.hidden_edge;
    int g = cfg.hidden_global();
    fn("enc.node.w", 4 + cfg.f_node, d);
    fn("enc.node.b", 1, d);
    fn("enc.edge.w", 4, e);
    fn("enc.edge.b", 1, e);
    fn("enc.glob.w", cfg.f_graph, g);
    fn("enc.glob.b", 1, g);
    for (int l = 0; l < cfg.layers; ++l) {
        std::string p = layer_prefix(l);
        fn(p + "attn.wq", d, d);
        fn(p + "attn.bq", 1, d);
        fn(p + "attn.wk", d, d);
        fn(p + "attn.bk", 1, d);
        fn(p + "attn.wv", d, d);
        fn(p + "attn.bv", 1, d);
        fn(p + "attn.web", e, cfg.heads);
        fn(p + "attn.wo", d, d);
        fn(p + "attn.bo", 1, d);
        fn(p + "edge.w1", 2 * d + e, e);
        fn(p + "edge.b1", 1, e);
        fn(p + "edge.w2", e, e);
        fn(p + "edge.b2", 1, e);
        fn(p + "glob.w1", d + e + g, g);
        fn(p + "glob.b1", 1, g);
        fn(p + "glob.w2", g, g);
        fn(p + "glob.b2", 1, g);
        fn(p + "film.node.gain", g, d);
        fn(p + "film.node.off", g, d);
        fn(p + "film.edge.gain", g, e);
        fn(p + "film.edge.off", g, e);
    }
    if (head == ModelHead::Denoiser) {
        fn("head.node.w", d, 4);
        fn("head.node.b", 1, 4);
        fn("head.edge.w", e, 4);
        fn("head.edge.b", 1, 4);
    } else {
        fn("head.out.w", d + g, 2);
        fn("head.out.b", 1, 2);
    }
}

} // namespace detail

/// Dense, typed view of a ParamStore for one model.
template <typename Real>
struct LoadedParams {
    std::map<std::string, Mat<Real>> tensors;

    static LoadedParams load(const ModelConfig& cfg, ModelHead head, const ParamStore& store) {
        cfg.validate();
        LoadedParams out;
        std::size_t expected = 0;
        detail::for_each_tensor(cfg, head, [&](const std::string& name, int rows, int cols) {
            ++expected;
            const ParamStore::Entry* entry = store.find(name);
            if (entry == nullptr) fail(ErrorKind::ShapeMismatch, "missing tensor '" + name + "'");
            if (entry->shape != std::vector<std::uint64_t>{static_cast<std::uint64_t>(rows),
                                                           static_cast<std::uint64_t>(cols)})
                fail(ErrorKind::ShapeMismatch, "tensor '" + name + "' has the wrong shape");
            Mat<Real> m(rows, cols);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c)
                    m(r, c) = static_cast<Real>(entry->values[static_cast<std::size_t>(r) * cols + c]);
            out.tensors.emplace(name, std::move(m));
        });
        if (expected != store.size()) fail(ErrorKind::ShapeMismatch, "parameter store has extra tensors");
        return out;
    }
};

template <typename Real>
using ParamVars = std::map<std::string, Var>;

template <typename Real>
ParamVars<Real> upload_params(Tape<Real>& tape, const LoadedParams<Real>& params) {
    ParamVars<Real> vars;
    for (const auto& [name, tensor] : params.tensors) vars.emplace(name, tape.input(tensor));
    return vars;
}

/// Forward pass outputs; logits/regression vars live on the tape.
struct ForwardVars {
    Var node_logits;     // n x 4 (denoiser)
    Var edge_logits;     // n*n x 4 (denoiser)
    Var regression;      // 1 x 2 (regressor)
    Var node_input;      // n x 4 one-hot leaf, for input gradients
    Var edge_input;      // n*n x 4 one-hot leaf
};

template <typename Real>
ForwardVars graphnet_forward(Tape<Real>& tape, const ModelConfig& cfg, const ParamVars<Real>& pv, ModelHead head,
                             const NoisyGraph& z, const FeatureBundle& feats) {
    int n = z.n();
    int d = cfg.hidden_node;
    int heads = cfg.heads;
    int dk = d / heads;
    auto P = [&](const std::string& name) {
        auto it = pv.find(name);
        if (it == pv.end()) fail(ErrorKind::ShapeMismatch, "missing tensor '" + name + "'");
        return it->second;
    };
    auto bias_rows = [&](Var x, Var b, int rows) { return tape.add(x, tape.row_broadcast(b, rows)); };

    Var node_onehot = tape.input(z.nodes_onehot().template cast<Real>());
    Var edge_onehot = tape.input(z.edges_onehot().template cast<Real>());
    Var node_feats = tape.input(feats.node_features.template cast<Real>());
    Var graph_feats = tape.input(Mat<Real>(feats.graph_features.transpose().template cast<Real>()));

    Var X = tape.relu(bias_rows(tape.matmul(tape.hcat({node_onehot, node_feats}), P("enc.node.w")), P("enc.node.b"), n));
    Var E = tape.relu(bias_rows(tape.matmul(edge_onehot, P("enc.edge.w")), P("enc.edge.b"), n * n));
    Var Y = tape.relu(tape.add(tape.matmul(graph_feats, P("enc.glob.w")), P("enc.glob.b")));

    std::vector<int> src(static_cast<std::size_t>(n) * n), dst(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            src[static_cast<std::size_t>(i) * n + j] = i;
            dst[static_cast<std::size_t>(i) * n + j] = j;
        }

    for (int l = 0; l < cfg.layers; ++l) {
        std::string p = detail::layer_prefix(l);

        Var Q = bias_rows(tape.matmul(X, P(p + "attn.wq")), P(p + "attn.bq"), n);
        Var K = bias_rows(tape.matmul(X, P(p + "attn.wk")), P(p + "attn.bk"), n);
        Var V = bias_rows(tape.matmul(X, P(p + "attn.wv")), P(p + "attn.bv"), n);
        Var EB = tape.matmul(E, P(p + "attn.web")); // n*n x heads
        std::vector<Var> head_outs;
        Real inv_sqrt_dk = Real(1) / std::sqrt(static_cast<Real>(dk));
        for (int h = 0; h < heads; ++h) {
            Var Qh = tape.cols(Q, h * dk, dk);
            Var Kh = tape.cols(K, h * dk, dk);
            Var Vh = tape.cols(V, h * dk, dk);
            Var scores = tape.scale(tape.matmul(Qh, tape.transpose(Kh)), inv_sqrt_dk);
            Var bias = tape.reshape(tape.cols(EB, h, 1), n, n);
            Var attn = tape.row_softmax(tape.add(scores, bias));
            head_outs.push_back(tape.matmul(attn, Vh));
        }
        Var attn_out = head_outs.size() == 1 ? head_outs[0] : tape.hcat(head_outs);
        X = tape.add(X, tape.relu(bias_rows(tape.matmul(attn_out, P(p + "attn.wo")), P(p + "attn.bo"), n)));

        Var Xi = tape.gather_rows(X, src);
        Var Xj = tape.gather_rows(X, dst);
        Var edge_in = tape.hcat({tape.add(Xi, Xj), tape.mul(Xi, Xj), E});
        Var edge_hidden = tape.relu(bias_rows(tape.matmul(edge_in, P(p + "edge.w1")), P(p + "edge.b1"), n * n));
        E = tape.add(E, bias_rows(tape.matmul(edge_hidden, P(p + "edge.w2")), P(p + "edge.b2"), n * n));

        Var pooled = tape.hcat({tape.mean_rows(X), tape.mean_rows(E), Y});
        Var glob_hidden = tape.relu(tape.add(tape.matmul(pooled, P(p + "glob.w1")), P(p + "glob.b1")));
        Y = tape.add(Y, tape.add(tape.matmul(glob_hidden, P(p + "glob.w2")), P(p + "glob.b2")));

        Var gain_x = tape.add_scalar(tape.matmul(Y, P(p + "film.node.gain")), Real(1));
        Var off_x = tape.matmul(Y, P(p + "film.node.off"));
        X = tape.add(tape.mul(X, tape.row_broadcast(gain_x, n)), tape.row_broadcast(off_x, n));
        Var gain_e = tape.add_scalar(tape.matmul(Y, P(p + "film.edge.gain")), Real(1));
        Var off_e = tape.matmul(Y, P(p + "film.edge.off"));
        E = tape.add(tape.mul(E, tape.row_broadcast(gain_e, n * n)), tape.row_broadcast(off_e, n * n));
    }

    ForwardVars out;
    out.node_input = node_onehot;
    out.edge_input = edge_onehot;
    if (head == ModelHead::Denoiser) {
        out.node_logits = bias_rows(tape.matmul(X, P("head.node.w")), P("head.node.b"), n);
        out.edge_logits = tape.sym_pair_average(bias_rows(tape.matmul(E, P("head.edge.w")), P("head.edge.b"), n * n), n);
    } else {
        Var pooled = tape.hcat({tape.mean_rows(X), Y});
        out.regression = tape.add(tape.matmul(pooled, P("head.out.w")), P("head.out.b"));
    }
    return out;
}

/// Denoiser loss on the tape: node CE + lambda_edge * upper-triangle edge CE.
template <typename Real>
Var denoiser_loss_var(Tape<Real>& tape, const ForwardVars& fwd, const MolGraph& clean, Real lambda_edge) {
    int n = clean.size();
    std::vector<int> node_targets(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) node_targets[static_cast<std::size_t>(i)] = static_cast<int>(clean.node(i));
    Var loss = tape.ce_with_logits(fwd.node_logits, std::move(node_targets));
    if (n > 1) {
        std::vector<int> rows;
        std::vector<int> edge_targets;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) {
                rows.push_back(i * n + j);
                edge_targets.push_back(static_cast<int>(clean.edge(i, j)));
            }
        Var edge_ce = tape.ce_with_logits(tape.gather_rows(fwd.edge_logits, std::move(rows)), std::move(edge_targets));
        loss = tape.add(loss, tape.scale(edge_ce, lambda_edge));
    }
    return loss;
}

} // namespace fedmol
