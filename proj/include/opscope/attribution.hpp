#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "opscope/common.hpp"
#include "opscope/model.hpp"
#include "opscope/semantics.hpp"

namespace opscope {

/// Per-example logit attribution: layer-wise lens differences plus the exact
/// additive decomposition of the final logit difference. In exact mode
/// (final_norm=false) dla_embed + sum(dla_attn + dla_mlp) equals final_diff
/// up to float32 accumulation.
struct AttributionTrace {
    std::string example_id;
    std::vector<double> lens_diffs;  // per layer
    std::vector<double> dla_attn;    // per layer
    std::vector<double> dla_mlp;     // per layer
    double dla_embed = 0.0;
    double final_diff = 0.0;
    bool approximate = false;  // true when final_norm breaks the identity
};

/// diff(l) = (W_u resid_post(l))[target] - (W_u resid_post(l))[baseline].
inline std::vector<double> logit_lens(const WeightBundle& model,
                                      const std::vector<int>& tokens, int target_token,
                                      int baseline_token) {
    const auto& cfg = model.config;
    if (target_token < 0 || target_token >= cfg.vocab_size || baseline_token < 0 ||
        baseline_token >= cfg.vocab_size)
        throw ValidationError("logit_lens: token id out of range");

    std::set<HookPoint> capture;
    for (int l = 0; l < cfg.n_layers; ++l)
        capture.insert({l, Component::resid_post});
    ForwardTrace trace = forward(model, tokens, capture);

    Eigen::VectorXd row_diff = (model.unembed.row(target_token) -
                                model.unembed.row(baseline_token))
                                   .transpose()
                                   .cast<double>();
    std::vector<double> diffs;
    for (int l = 0; l < cfg.n_layers; ++l)
        diffs.push_back(row_diff.dot(trace.captured.at({l, Component::resid_post})));
    return diffs;
}

/// Smallest layer from which the difference stays above the threshold through
/// the final layer; nullopt if it never does.
inline std::optional<int> commitment_layer(const std::vector<double>& diffs,
                                           double threshold = 0.0) {
    if (diffs.empty()) throw ValidationError("commitment_layer: no layers");
    int commit = -1;
    for (int l = static_cast<int>(diffs.size()) - 1; l >= 0; --l) {
        if (diffs[static_cast<std::size_t>(l)] > threshold)
            commit = l;
        else
            break;
    }
    if (commit < 0) return std::nullopt;
    return commit;
}

/// Full attribution pass. The embedding term is recovered from the layer-0
/// captures (resid_post(0) - attn_out(0) - mlp_out(0)) so the decomposition
/// closes exactly; with final_norm on, only the approximate flag can be set
/// unless strict mode rejects it.
inline AttributionTrace dla(const WeightBundle& model, const std::vector<int>& tokens,
                            int target_token, int baseline_token, bool strict = false) {
    const auto& cfg = model.config;
    if (target_token < 0 || target_token >= cfg.vocab_size || baseline_token < 0 ||
        baseline_token >= cfg.vocab_size)
        throw ValidationError("dla: token id out of range");
    if (cfg.final_norm && strict)
        throw ValidationError("dla: model has final_norm; exact decomposition "
                              "unavailable in strict mode");

    std::set<HookPoint> capture;
    for (int l = 0; l < cfg.n_layers; ++l)
        for (Component c : all_components()) capture.insert({l, c});
    ForwardTrace trace = forward(model, tokens, capture);

    Eigen::VectorXd row_diff = (model.unembed.row(target_token) -
                                model.unembed.row(baseline_token))
                                   .transpose()
                                   .cast<double>();

    AttributionTrace out;
    out.approximate = cfg.final_norm;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& resid = trace.captured.at({l, Component::resid_post});
        const auto& attn = trace.captured.at({l, Component::attn_out});
        const auto& mlp = trace.captured.at({l, Component::mlp_out});
        out.lens_diffs.push_back(row_diff.dot(resid));
        out.dla_attn.push_back(row_diff.dot(attn));
        out.dla_mlp.push_back(row_diff.dot(mlp));
        if (l == 0) {
            Eigen::VectorXd embed = resid - attn - mlp;
            out.dla_embed = row_diff.dot(embed);
        }
    }
    out.final_diff = static_cast<double>(trace.logits[target_token]) -
                     static_cast<double>(trace.logits[baseline_token]);
    return out;
}

struct ComponentBalance {
    double attn_positive_sum = 0.0;
    double mlp_positive_sum = 0.0;
};

/// Summed positive contributions per component type, pooled over layers and
/// examples.
inline std::map<Operation, ComponentBalance> component_balance(
    const std::map<Operation, std::vector<AttributionTrace>>& traces_by_op) {
    if (traces_by_op.empty()) throw ValidationError("component_balance: no traces");
    std::map<Operation, ComponentBalance> out;
    for (const auto& [op, traces] : traces_by_op) {
        ComponentBalance b;
        for (const auto& t : traces) {
            for (double v : t.dla_attn) b.attn_positive_sum += std::max(v, 0.0);
            for (double v : t.dla_mlp) b.mlp_positive_sum += std::max(v, 0.0);
        }
        out[op] = b;
    }
    return out;
}

}  // namespace opscope
