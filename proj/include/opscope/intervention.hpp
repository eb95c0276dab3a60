#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "opscope/common.hpp"
#include "opscope/dataset.hpp"
#include "opscope/geometry.hpp"
#include "opscope/model.hpp"
#include "opscope/rng.hpp"
#include "opscope/stats.hpp"
#include "opscope/store.hpp"
#include "opscope/vocab.hpp"

namespace opscope {

enum class Regime { forward, inverse };

inline const char* to_string(Regime r) {
    return r == Regime::forward ? "forward" : "inverse";
}

/// Forward: +alpha on clean inputs, target = the operation's label.
/// Inverse: -alpha on corrupted inputs, target = entailment.
struct SteeringSpec {
    Direction direction;
    int layer = 0;
    double alpha = 0.0;  // magnitude; the regime fixes the sign
    Regime regime = Regime::forward;
    NliLabel target = NliLabel::CONTRADICTION;
};

struct SteeringResult {
    SteeringSpec spec;
    long n = 0;                       // eligible examples (unsteered != target)
    long n_already_at_target = 0;     // excluded from the flip denominators
    double flip_to_target = kNaN;
    double flip_to_other = kNaN;
    double baseline_flip_to_target = kNaN;
    double baseline_flip_to_other = kNaN;
    std::array<std::uint64_t, 3> baseline_seeds{};
};

struct ContaminationCell {
    Operation source = Operation::NEGATION;
    Operation target = Operation::NEGATION;
    double contamination = kNaN;        // excess flip-to-target over random baseline
    double contamination_other = kNaN;  // excess flip-to-other over random baseline
    double flip_to_target = kNaN;
    double flip_to_other = kNaN;
    double baseline_flip_to_target = kNaN;
    double baseline_flip_to_other = kNaN;
    long n = 0;
};

namespace detail {

struct FlipRates {
    double to_target = 0.0;
    double to_other = 0.0;
};

struct EligibleExample {
    std::vector<int> tokens;
    NliLabel before = NliLabel::ENTAILMENT;
};

}  // namespace detail

/// One steering cell: the structured direction plus three norm-matched random
/// unit directions (seeds base, base+1, base+2) whose mean flip rates form
/// the baseline. The unsteered pass does not depend on the direction, so it
/// runs once; flip rates are taken over the examples whose unsteered
/// prediction differs from the target label.
inline SteeringResult steer_eval(const WeightBundle& model, const Vocab& vocab,
                                 const std::vector<ContrastivePair>& pairs,
                                 const SteeringSpec& spec, const LabelTokens& labels,
                                 std::uint64_t baseline_seed) {
    if (spec.direction.vector.size() != model.config.d_model)
        throw ValidationError("steer_eval: direction dimension mismatch");
    if (spec.layer < 0 || spec.layer >= model.config.n_layers)
        throw ValidationError("steer_eval: layer out of range");
    if (spec.alpha < 0.0) throw ValidationError("steer_eval: alpha must be >= 0");

    const double signed_alpha = spec.regime == Regime::forward ? spec.alpha : -spec.alpha;
    const double norm = spec.direction.vector.norm();

    SteeringResult res;
    res.spec = spec;
    std::vector<detail::EligibleExample> eligible;
    for (const auto& p : pairs) {
        const std::string& hyp = spec.regime == Regime::forward ? p.clean : p.corrupted;
        std::vector<int> ids = tokenize(render_prompt(p.premise, hyp), vocab);
        NliLabel before = score_nli(forward(model, ids), labels).predicted;
        if (before == spec.target) {
            ++res.n_already_at_target;
            continue;
        }
        eligible.push_back({std::move(ids), before});
    }
    if (eligible.empty())
        throw EmptyEligibleError("steer_eval: no eligible examples (all already at target)");
    res.n = static_cast<long>(eligible.size());

    auto eval_steered = [&](const Eigen::VectorXd& vec) {
        long flips_target = 0, flips_other = 0;
        for (const auto& ex : eligible) {
            Intervention iv;
            iv.hook = {spec.layer, Component::resid_post};
            iv.vector = vec;
            iv.alpha = signed_alpha;
            NliLabel after = score_nli(forward(model, ex.tokens, {}, {iv}), labels).predicted;
            if (after == spec.target)
                ++flips_target;
            else if (after != ex.before)
                ++flips_other;
        }
        detail::FlipRates fr;
        fr.to_target = static_cast<double>(flips_target) / static_cast<double>(eligible.size());
        fr.to_other = static_cast<double>(flips_other) / static_cast<double>(eligible.size());
        return fr;
    };

    detail::FlipRates obs = eval_steered(spec.direction.vector);
    res.flip_to_target = obs.to_target;
    res.flip_to_other = obs.to_other;

    double bt = 0.0, bo = 0.0;
    for (int s = 0; s < 3; ++s) {
        std::uint64_t seed = baseline_seed + static_cast<std::uint64_t>(s);
        res.baseline_seeds[static_cast<std::size_t>(s)] = seed;
        Rng rng(seed);
        Eigen::VectorXd r = rng.unit_vector(model.config.d_model) * norm;
        detail::FlipRates base = eval_steered(r);
        bt += base.to_target;
        bo += base.to_other;
    }
    res.baseline_flip_to_target = bt / 3.0;
    res.baseline_flip_to_other = bo / 3.0;
    return res;
}

struct SweepResult {
    std::vector<SteeringResult> grid;            // layer-major, alpha-minor
    std::vector<double> best_alpha_per_layer;    // ties resolve to the smaller alpha
    std::vector<double> best_flip_per_layer;
    int best_layer = -1;                         // ties resolve to the earlier layer
    double best_alpha = kNaN;
    double best_flip = kNaN;
};

/// Full (layer, alpha) grid; each layer is steered with the direction derived
/// at that layer. Per-layer argmax over alpha and a global best layer.
inline SweepResult sweep(const WeightBundle& model, const Vocab& vocab,
                         const std::vector<ContrastivePair>& pairs,
                         const std::map<int, Direction>& direction_per_layer,
                         Regime regime, NliLabel target, const std::vector<int>& layers,
                         const std::vector<double>& alphas, const LabelTokens& labels,
                         std::uint64_t baseline_seed) {
    if (layers.empty() || alphas.empty())
        throw ValidationError("sweep: empty layer or alpha grid");
    SweepResult out;
    for (int layer : layers) {
        auto it = direction_per_layer.find(layer);
        if (it == direction_per_layer.end())
            throw ValidationError("sweep: no direction for layer " + std::to_string(layer));
        double best_alpha = alphas.front();
        double best_flip = -1.0;
        for (double alpha : alphas) {
            SteeringSpec spec{it->second, layer, alpha, regime, target};
            SteeringResult r = steer_eval(model, vocab, pairs, spec, labels, baseline_seed);
            if (r.flip_to_target > best_flip) {  // strict: ties keep the smaller alpha
                best_flip = r.flip_to_target;
                best_alpha = alpha;
            }
            out.grid.push_back(std::move(r));
        }
        out.best_alpha_per_layer.push_back(best_alpha);
        out.best_flip_per_layer.push_back(best_flip);
    }
    out.best_layer = layers[0];
    out.best_alpha = out.best_alpha_per_layer[0];
    out.best_flip = out.best_flip_per_layer[0];
    for (std::size_t i = 1; i < layers.size(); ++i) {
        if (out.best_flip_per_layer[i] > out.best_flip) {  // strict: earlier layer wins ties
            out.best_layer = layers[i];
            out.best_alpha = out.best_alpha_per_layer[i];
            out.best_flip = out.best_flip_per_layer[i];
        }
    }
    return out;
}

/// 6x6 cross-operation grid: the source operation's direction applied to the
/// target operation's inputs with the target's label, averaged over layers.
/// Cell value follows the excess-flip-to-target definition; the
/// flip-to-other variant is reported alongside.
inline std::map<std::pair<Operation, Operation>, ContaminationCell> contamination_matrix(
    const WeightBundle& model, const Vocab& vocab,
    const std::map<Operation, std::vector<ContrastivePair>>& pairs_by_op,
    const std::map<Operation, std::map<int, Direction>>& directions_by_op_layer,
    const std::vector<int>& layers, double alpha, Regime regime,
    const LabelTokens& labels, std::uint64_t baseline_seed) {
    for (Operation op : all_operations()) {
        if (!pairs_by_op.count(op))
            throw ValidationError(std::string("contamination_matrix: missing pairs for ") +
                                  to_string(op));
        if (!directions_by_op_layer.count(op))
            throw ValidationError(std::string("contamination_matrix: missing direction for ") +
                                  to_string(op));
    }

    std::map<std::pair<Operation, Operation>, ContaminationCell> cells;
    for (Operation src : all_operations()) {
        for (Operation tgt : all_operations()) {
            ContaminationCell cell;
            cell.source = src;
            cell.target = tgt;
            double ft = 0.0, fo = 0.0, bt = 0.0, bo = 0.0;
            long n = 0;
            int used_layers = 0;
            for (int layer : layers) {
                auto it = directions_by_op_layer.at(src).find(layer);
                if (it == directions_by_op_layer.at(src).end())
                    throw ValidationError(std::string("contamination_matrix: no direction for ") +
                                          to_string(src) + " at layer " +
                                          std::to_string(layer));
                NliLabel target = regime == Regime::forward ? target_label(tgt)
                                                            : NliLabel::ENTAILMENT;
                SteeringSpec spec{it->second, layer, alpha, regime, target};
                try {
                    SteeringResult r = steer_eval(model, vocab, pairs_by_op.at(tgt), spec,
                                                  labels, baseline_seed);
                    ft += r.flip_to_target;
                    fo += r.flip_to_other;
                    bt += r.baseline_flip_to_target;
                    bo += r.baseline_flip_to_other;
                    n += r.n;
                    ++used_layers;
                } catch (const EmptyEligibleError&) {
                    // layer contributes nothing; cell stays NaN if all layers are empty
                }
            }
            if (used_layers > 0) {
                cell.flip_to_target = ft / used_layers;
                cell.flip_to_other = fo / used_layers;
                cell.baseline_flip_to_target = bt / used_layers;
                cell.baseline_flip_to_other = bo / used_layers;
                cell.contamination = cell.flip_to_target - cell.baseline_flip_to_target;
                cell.contamination_other = cell.flip_to_other - cell.baseline_flip_to_other;
            }
            cell.n = n;
            cells[{src, tgt}] = cell;
        }
    }
    return cells;
}

enum class TieKind { none, tie_zero, tie_nonzero };

struct FlipPair {
    std::string tag;  // e.g. "model/regime/operation"
    double flip_caa = 0.0;
    double flip_svd = 0.0;
};

struct CaaSvdComparison {
    long n_pairs = 0;
    long wins_caa = 0;
    long ties_zero = 0;
    long ties_nonzero = 0;
    double win_rate = kNaN;           // wins / n
    double non_tied_win_rate = kNaN;  // wins / (n - ties)
    double mean_delta = kNaN;         // mean(flip_caa - flip_svd)
    double p_signflip = kNaN;
    std::vector<TieKind> tie_tags;
};

/// Paired CAA-vs-SVD comparison over (model, regime, operation) cells with a
/// one-sided sign-flip permutation test on the mean difference.
inline CaaSvdComparison compare_caa_svd(const std::vector<FlipPair>& pairs, int B = 10000,
                                        std::uint64_t seed = 0) {
    if (pairs.empty()) throw ValidationError("compare_caa_svd: no pairs");
    CaaSvdComparison out;
    out.n_pairs = static_cast<long>(pairs.size());
    std::vector<double> diffs;
    for (const auto& p : pairs) {
        double d = p.flip_caa - p.flip_svd;
        diffs.push_back(d);
        if (d > 0) ++out.wins_caa;
        if (d == 0.0) {
            if (p.flip_caa == 0.0 && p.flip_svd == 0.0) {
                ++out.ties_zero;
                out.tie_tags.push_back(TieKind::tie_zero);
            } else {
                ++out.ties_nonzero;
                out.tie_tags.push_back(TieKind::tie_nonzero);
            }
        } else {
            out.tie_tags.push_back(TieKind::none);
        }
    }
    double sum = 0.0;
    for (double d : diffs) sum += d;
    out.mean_delta = sum / static_cast<double>(diffs.size());
    out.win_rate = static_cast<double>(out.wins_caa) / static_cast<double>(out.n_pairs);
    long non_tied = out.n_pairs - out.ties_zero - out.ties_nonzero;
    out.non_tied_win_rate = non_tied > 0
                                ? static_cast<double>(out.wins_caa) /
                                      static_cast<double>(non_tied)
                                : kNaN;
    out.p_signflip = signflip_p(diffs, B, seed);
    return out;
}

}  // namespace opscope
