#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "opscope/common.hpp"
#include "opscope/semantics.hpp"

namespace opscope {

struct ModelConfig {
    int n_layers = 0;
    int d_model = 0;
    int n_heads = 0;
    int d_mlp = 0;
    int vocab_size = 0;
    int max_seq_len = 0;
    // When false the unembedding consumes the raw final residual, which makes
    // the logit decomposition an exact identity.
    bool final_norm = false;

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_mlp < 1 ||
            vocab_size < 1)
            throw ValidationError("model config: all counts must be >= 1");
        if (max_seq_len < 2)
            throw ValidationError("model config: max_seq_len must be >= 2");
        if (d_model % n_heads != 0)
            throw ValidationError("model config: d_model must be divisible by n_heads");
    }
};

enum class Component { resid_post, attn_out, mlp_out };

inline const char* to_string(Component c) {
    switch (c) {
        case Component::resid_post: return "resid_post";
        case Component::attn_out: return "attn_out";
        case Component::mlp_out: return "mlp_out";
    }
    throw ValidationError("invalid Component value");
}

inline Component component_from_string(std::string_view s) {
    if (s == "resid_post") return Component::resid_post;
    if (s == "attn_out") return Component::attn_out;
    if (s == "mlp_out") return Component::mlp_out;
    throw ValidationError("unknown component: \"" + std::string(s) + "\"");
}

inline std::array<Component, 3> all_components() {
    return {Component::resid_post, Component::attn_out, Component::mlp_out};
}

struct HookPoint {
    int layer = 0;
    Component component = Component::resid_post;

    friend bool operator==(const HookPoint& a, const HookPoint& b) {
        return a.layer == b.layer && a.component == b.component;
    }
    friend bool operator<(const HookPoint& a, const HookPoint& b) {
        return std::tie(a.layer, a.component) < std::tie(b.layer, b.component);
    }
};

struct LayerWeights {
    Eigen::VectorXf ln1_gain;            // [d_model]
    Eigen::MatrixXf attn_wq, attn_wk, attn_wv, attn_wo;  // [d_model, d_model]
    Eigen::VectorXf ln2_gain;            // [d_model]
    Eigen::MatrixXf mlp_win;             // [d_mlp, d_model]
    Eigen::VectorXf mlp_bin;             // [d_mlp]
    Eigen::MatrixXf mlp_wout;            // [d_model, d_mlp]
    Eigen::VectorXf mlp_bout;            // [d_model]
};

/// All model parameters, immutable after load. Weights are float32; analysis
/// code converts captured activations to float64.
struct WeightBundle {
    ModelConfig config;
    Eigen::MatrixXf tok_embed;  // [vocab_size, d_model]
    Eigen::MatrixXf pos_embed;  // [max_seq_len, d_model]
    std::vector<LayerWeights> layers;
    Eigen::MatrixXf unembed;    // [vocab_size, d_model]

    void validate() const;
};

/// Additive residual-stream edit applied during a forward pass.
struct Intervention {
    HookPoint hook;             // component must be resid_post
    Eigen::VectorXd vector;     // length d_model
    double alpha = 0.0;
    int token_position = -1;    // -1 selects the final token
};

struct ForwardTrace {
    Eigen::VectorXf logits;     // final-position logits over the vocabulary
    std::map<HookPoint, Eigen::VectorXd> captured;  // final-token activations
    int token_count = 0;
};

namespace detail {

constexpr float kRmsEps = 1e-6f;

inline void validate_matrix_shape(const Eigen::MatrixXf& m, long rows, long cols,
                                  const std::string& name) {
    if (m.rows() != rows || m.cols() != cols)
        throw LoadError("tensor \"" + name + "\": expected shape " +
                        std::to_string(rows) + "x" + std::to_string(cols) +
                        ", got " + std::to_string(m.rows()) + "x" +
                        std::to_string(m.cols()));
    if (!m.allFinite())
        throw LoadError("tensor \"" + name + "\": non-finite value");
}

inline void validate_vector_shape(const Eigen::VectorXf& v, long size,
                                  const std::string& name) {
    if (v.size() != size)
        throw LoadError("tensor \"" + name + "\": expected length " +
                        std::to_string(size) + ", got " + std::to_string(v.size()));
    if (!v.allFinite())
        throw LoadError("tensor \"" + name + "\": non-finite value");
}

// Gain-only RMS normalization over each row.
inline Eigen::MatrixXf rms_norm_rows(const Eigen::MatrixXf& x,
                                     const Eigen::VectorXf* gain) {
    Eigen::MatrixXf out(x.rows(), x.cols());
    const auto d = static_cast<float>(x.cols());
    for (long i = 0; i < x.rows(); ++i) {
        float ms = x.row(i).squaredNorm() / d;
        float inv = 1.0f / std::sqrt(ms + kRmsEps);
        if (gain)
            out.row(i) = (x.row(i) * inv).cwiseProduct(gain->transpose());
        else
            out.row(i) = x.row(i) * inv;
    }
    return out;
}

inline float gelu(float x) {
    return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752f));
}

}  // namespace detail

inline void WeightBundle::validate() const {
    config.validate();
    const long d = config.d_model;
    detail::validate_matrix_shape(tok_embed, config.vocab_size, d, "tok_embed");
    detail::validate_matrix_shape(pos_embed, config.max_seq_len, d, "pos_embed");
    if (static_cast<int>(layers.size()) != config.n_layers)
        throw LoadError("expected " + std::to_string(config.n_layers) +
                        " layers, got " + std::to_string(layers.size()));
    for (int l = 0; l < config.n_layers; ++l) {
        const auto& lw = layers[static_cast<std::size_t>(l)];
        const std::string p = "layers." + std::to_string(l) + ".";
        detail::validate_vector_shape(lw.ln1_gain, d, p + "ln1_gain");
        detail::validate_matrix_shape(lw.attn_wq, d, d, p + "attn_wq");
        detail::validate_matrix_shape(lw.attn_wk, d, d, p + "attn_wk");
        detail::validate_matrix_shape(lw.attn_wv, d, d, p + "attn_wv");
        detail::validate_matrix_shape(lw.attn_wo, d, d, p + "attn_wo");
        detail::validate_vector_shape(lw.ln2_gain, d, p + "ln2_gain");
        detail::validate_matrix_shape(lw.mlp_win, config.d_mlp, d, p + "mlp_win");
        detail::validate_vector_shape(lw.mlp_bin, config.d_mlp, p + "mlp_bin");
        detail::validate_matrix_shape(lw.mlp_wout, d, config.d_mlp, p + "mlp_wout");
        detail::validate_vector_shape(lw.mlp_bout, d, p + "mlp_bout");
    }
    detail::validate_matrix_shape(unembed, config.vocab_size, d, "unembed");
}

/// Causal decoder pass with pre-norm blocks. The residual stream is strictly
/// additive: resid_post(l) = resid_post(l-1) + attn_out(l) + mlp_out(l), with
/// the embedding output as resid_post(-1). Interventions add alpha*vector at
/// their resid_post hook before any downstream layer consumes the stream;
/// captured values reflect the stream as consumed.
inline ForwardTrace forward(const WeightBundle& w, const std::vector<int>& tokens,
                            const std::set<HookPoint>& capture = {},
                            const std::vector<Intervention>& interventions = {}) {
    const auto& cfg = w.config;
    const int n = static_cast<int>(tokens.size());
    if (n < 1) throw ValidationError("forward: empty token sequence");
    if (n > cfg.max_seq_len)
        throw ValidationError("forward: sequence length " + std::to_string(n) +
                              " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw ValidationError("forward: token id " + std::to_string(t) +
                                  " out of range [0, " +
                                  std::to_string(cfg.vocab_size) + ")");
    for (const auto& iv : interventions) {
        if (iv.hook.component != Component::resid_post)
            throw ValidationError("intervention hook must be resid_post");
        if (iv.hook.layer < 0 || iv.hook.layer >= cfg.n_layers)
            throw ValidationError("intervention layer out of range");
        if (iv.vector.size() != cfg.d_model)
            throw ValidationError("intervention vector has wrong dimension");
        if (iv.token_position >= n)
            throw ValidationError("intervention token position out of range");
    }

    ForwardTrace trace;
    trace.token_count = n;
    const int d = cfg.d_model;
    const int dh = d / cfg.n_heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    Eigen::MatrixXf resid(n, d);
    for (int i = 0; i < n; ++i)
        resid.row(i) = w.tok_embed.row(tokens[static_cast<std::size_t>(i)]) +
                       w.pos_embed.row(i);

    auto maybe_capture = [&](int layer, Component comp, const Eigen::MatrixXf& m) {
        HookPoint hp{layer, comp};
        if (capture.count(hp))
            trace.captured[hp] = m.row(n - 1).transpose().cast<double>();
    };

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = w.layers[static_cast<std::size_t>(l)];

        Eigen::MatrixXf x = detail::rms_norm_rows(resid, &lw.ln1_gain);
        Eigen::MatrixXf q = x * lw.attn_wq.transpose();
        Eigen::MatrixXf k = x * lw.attn_wk.transpose();
        Eigen::MatrixXf v = x * lw.attn_wv.transpose();

        Eigen::MatrixXf ctx(n, d);
        for (int h = 0; h < cfg.n_heads; ++h) {
            auto qh = q.middleCols(h * dh, dh);
            auto kh = k.middleCols(h * dh, dh);
            auto vh = v.middleCols(h * dh, dh);
            for (int i = 0; i < n; ++i) {
                // causal: position i attends to 0..i
                Eigen::VectorXf scores(i + 1);
                for (int j = 0; j <= i; ++j)
                    scores[j] = qh.row(i).dot(kh.row(j)) * scale;
                float mx = scores.maxCoeff();
                Eigen::VectorXf e = (scores.array() - mx).exp();
                e /= e.sum();
                Eigen::RowVectorXf acc = Eigen::RowVectorXf::Zero(dh);
                for (int j = 0; j <= i; ++j) acc += e[j] * vh.row(j);
                ctx.block(i, h * dh, 1, dh) = acc;
            }
        }
        Eigen::MatrixXf attn = ctx * lw.attn_wo.transpose();
        maybe_capture(l, Component::attn_out, attn);
        resid += attn;

        Eigen::MatrixXf x2 = detail::rms_norm_rows(resid, &lw.ln2_gain);
        Eigen::MatrixXf hidden = (x2 * lw.mlp_win.transpose()).rowwise() +
                                 lw.mlp_bin.transpose();
        hidden = hidden.unaryExpr([](float a) { return detail::gelu(a); });
        Eigen::MatrixXf mlp = (hidden * lw.mlp_wout.transpose()).rowwise() +
                              lw.mlp_bout.transpose();
        maybe_capture(l, Component::mlp_out, mlp);
        resid += mlp;

        for (const auto& iv : interventions) {
            if (iv.hook.layer != l || iv.alpha == 0.0) continue;
            int pos = iv.token_position < 0 ? n - 1 : iv.token_position;
            resid.row(pos) += (iv.alpha * iv.vector).cast<float>().transpose();
        }
        maybe_capture(l, Component::resid_post, resid);
    }

    Eigen::RowVectorXf final_row = resid.row(n - 1);
    if (cfg.final_norm) {
        Eigen::MatrixXf one = final_row;
        final_row = detail::rms_norm_rows(one, nullptr).row(0);
    }
    trace.logits = w.unembed * final_row.transpose();
    return trace;
}

struct LabelTokens {
    int entailment = -1;
    int contradiction = -1;
    int neutral = -1;

    int id(NliLabel l) const {
        switch (l) {
            case NliLabel::ENTAILMENT: return entailment;
            case NliLabel::CONTRADICTION: return contradiction;
            case NliLabel::NEUTRAL: return neutral;
        }
        throw ValidationError("invalid NliLabel value");
    }
};

struct NliScore {
    NliLabel predicted = NliLabel::ENTAILMENT;
    std::array<double, 3> probabilities{};  // indexed by NliLabel order
};

/// Softmax over the full vocabulary, then read the three label-token
/// probabilities. Ties break by fixed label order
/// (entailment < contradiction < neutral).
inline NliScore score_nli(const ForwardTrace& trace, const LabelTokens& labels) {
    const int ids[3] = {labels.entailment, labels.contradiction, labels.neutral};
    for (int i = 0; i < 3; ++i) {
        if (ids[i] < 0 || ids[i] >= trace.logits.size())
            throw ValidationError("score_nli: label token id out of range");
        for (int j = i + 1; j < 3; ++j)
            if (ids[i] == ids[j])
                throw ValidationError("score_nli: duplicate label token ids");
    }
    Eigen::VectorXd logits = trace.logits.cast<double>();
    double mx = logits.maxCoeff();
    Eigen::VectorXd e = (logits.array() - mx).exp();
    double z = e.sum();

    NliScore out;
    for (int i = 0; i < 3; ++i) out.probabilities[static_cast<std::size_t>(i)] = e[ids[i]] / z;
    int best = 0;
    for (int i = 1; i < 3; ++i)
        if (out.probabilities[static_cast<std::size_t>(i)] >
            out.probabilities[static_cast<std::size_t>(best)])
            best = i;
    out.predicted = static_cast<NliLabel>(best);
    return out;
}

/// W_u * v in float64. Matches forward logits when applied to the captured
/// final-layer resid_post and final_norm is off.
inline Eigen::VectorXd unembed(const WeightBundle& w, const Eigen::VectorXd& v) {
    if (v.size() != w.config.d_model)
        throw ValidationError("unembed: vector has dimension " +
                              std::to_string(v.size()) + ", expected " +
                              std::to_string(w.config.d_model));
    if (!v.allFinite()) throw ValidationError("unembed: non-finite input");
    return w.unembed.cast<double>() * v;
}

}  // namespace opscope
