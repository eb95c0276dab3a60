#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include <Eigen/Dense>

#include "opscope/common.hpp"
#include "opscope/geometry.hpp"
#include "opscope/rng.hpp"
#include "opscope/semantics.hpp"
#include "opscope/store.hpp"

namespace opscope {

struct ClassifierReport {
    std::vector<double> fold_accuracies;
    double mean_accuracy = kNaN;
    double sd_accuracy = kNaN;
    Eigen::MatrixXi confusion;  // true x predicted, held-out predictions pooled
    double baseline_mean = kNaN;  // filled by callers that run random-subspace controls
};

namespace detail {

struct LogisticModel {
    Eigen::MatrixXd weights;  // K x m
    Eigen::VectorXd bias;     // K

    int predict(const Eigen::VectorXd& x) const {
        Eigen::VectorXd z = weights * x + bias;
        int best = 0;
        for (int c = 1; c < z.size(); ++c)
            if (z[c] > z[best]) best = c;  // ties keep the smaller class index
        return best;
    }
};

/// Multinomial logistic regression with balanced class weights and an L2
/// penalty of 1/(2C) * ||W||^2 on the sum-loss objective (bias unpenalized).
/// Full-batch Nesterov gradient descent with a fixed Lipschitz step; runs to
/// gradient-norm tolerance or the iteration cap, whichever first. Entirely
/// deterministic.
inline LogisticModel fit_multinomial_lr(const Eigen::MatrixXd& x,
                                        const std::vector<int>& y, int n_classes,
                                        double c_reg = 0.1, int max_iter = 1000,
                                        double grad_tol = 1e-6) {
    const long n = x.rows();
    const long m = x.cols();
    if (n != static_cast<long>(y.size()))
        throw ValidationError("fit_multinomial_lr: X/y size mismatch");
    if (n < 1) throw ValidationError("fit_multinomial_lr: empty training set");

    std::vector<long> class_count(static_cast<std::size_t>(n_classes), 0);
    for (int lab : y) {
        if (lab < 0 || lab >= n_classes)
            throw ValidationError("fit_multinomial_lr: label out of range");
        ++class_count[static_cast<std::size_t>(lab)];
    }
    // balanced: w_c = n / (K * n_c)
    std::vector<double> class_weight(static_cast<std::size_t>(n_classes), 0.0);
    for (int c = 0; c < n_classes; ++c) {
        if (class_count[static_cast<std::size_t>(c)] == 0)
            throw ValidationError("fit_multinomial_lr: class " + std::to_string(c) +
                                  " absent from training fold");
        class_weight[static_cast<std::size_t>(c)] =
            static_cast<double>(n) /
            (static_cast<double>(n_classes) *
             static_cast<double>(class_count[static_cast<std::size_t>(c)]));
    }
    Eigen::VectorXd sample_weight(n);
    for (long i = 0; i < n; ++i)
        sample_weight[i] = class_weight[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])];

    const double lambda = 1.0 / c_reg;
    // Softmax Hessian bound: 1/2 sum_i w_i (||x_i||^2 + 1), plus the ridge.
    double lips = lambda;
    for (long i = 0; i < n; ++i)
        lips += 0.5 * sample_weight[i] * (x.row(i).squaredNorm() + 1.0);
    const double step = 1.0 / lips;

    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n_classes, m);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(n_classes);
    Eigen::MatrixXd w_prev = w;
    Eigen::VectorXd b_prev = b;

    for (int iter = 0; iter < max_iter; ++iter) {
        double momentum = static_cast<double>(iter) / static_cast<double>(iter + 3);
        Eigen::MatrixXd wy = w + momentum * (w - w_prev);
        Eigen::VectorXd by = b + momentum * (b - b_prev);

        Eigen::MatrixXd z = x * wy.transpose();  // n x K
        z.rowwise() += by.transpose();
        Eigen::MatrixXd p(n, n_classes);
        for (long i = 0; i < n; ++i) {
            double mx = z.row(i).maxCoeff();
            Eigen::RowVectorXd e = (z.row(i).array() - mx).exp();
            p.row(i) = e / e.sum();
        }
        for (long i = 0; i < n; ++i)
            p(i, y[static_cast<std::size_t>(i)]) -= 1.0;  // residual p - onehot
        p.array().colwise() *= sample_weight.array();

        Eigen::MatrixXd grad_w = p.transpose() * x + lambda * wy;
        Eigen::VectorXd grad_b = p.colwise().sum().transpose();

        w_prev = w;
        b_prev = b;
        w = wy - step * grad_w;
        b = by - step * grad_b;

        double gnorm = std::sqrt(grad_w.squaredNorm() + grad_b.squaredNorm());
        if (gnorm <= grad_tol) break;
    }
    return {w, b};
}

/// Stratified fold ids: within each class, indices are shuffled with the
/// seeded generator and dealt round-robin.
inline std::vector<int> stratified_folds(const std::vector<int>& y, int n_classes,
                                         int folds, std::uint64_t seed) {
    std::vector<int> fold_of(y.size(), -1);
    Rng rng(seed);
    for (int c = 0; c < n_classes; ++c) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < y.size(); ++i)
            if (y[i] == c) idx.push_back(i);
        if (static_cast<int>(idx.size()) < folds)
            throw ValidationError("stratified_folds: class " + std::to_string(c) +
                                  " has " + std::to_string(idx.size()) +
                                  " examples, need at least " + std::to_string(folds));
        rng.shuffle(idx);
        for (std::size_t j = 0; j < idx.size(); ++j)
            fold_of[idx[j]] = static_cast<int>(j % static_cast<std::size_t>(folds));
    }
    return fold_of;
}

}  // namespace detail

/// Stratified K-fold cross-validated multinomial probe. Estimation and
/// evaluation splits are disjoint; per-fold held-out accuracies and a pooled
/// confusion matrix are reported.
inline ClassifierReport train_probe(const Eigen::MatrixXd& x, const std::vector<int>& y,
                                    int n_classes, int folds, std::uint64_t seed,
                                    double c_reg = 0.1) {
    if (folds < 2) throw ValidationError("train_probe: need at least 2 folds");
    if (x.rows() != static_cast<long>(y.size()))
        throw ValidationError("train_probe: X/y size mismatch");
    std::vector<int> fold_of = detail::stratified_folds(y, n_classes, folds, seed);

    ClassifierReport rep;
    rep.confusion = Eigen::MatrixXi::Zero(n_classes, n_classes);
    for (int f = 0; f < folds; ++f) {
        std::vector<long> train_idx, test_idx;
        for (std::size_t i = 0; i < y.size(); ++i)
            (fold_of[i] == f ? test_idx : train_idx).push_back(static_cast<long>(i));

        Eigen::MatrixXd xt(static_cast<long>(train_idx.size()), x.cols());
        std::vector<int> yt(train_idx.size());
        for (std::size_t i = 0; i < train_idx.size(); ++i) {
            xt.row(static_cast<long>(i)) = x.row(train_idx[i]);
            yt[i] = y[static_cast<std::size_t>(train_idx[i])];
        }
        detail::LogisticModel model =
            detail::fit_multinomial_lr(xt, yt, n_classes, c_reg);

        long correct = 0;
        for (long i : test_idx) {
            int pred = model.predict(x.row(i).transpose());
            int truth = y[static_cast<std::size_t>(i)];
            rep.confusion(truth, pred) += 1;
            if (pred == truth) ++correct;
        }
        rep.fold_accuracies.push_back(static_cast<double>(correct) /
                                      static_cast<double>(test_idx.size()));
    }

    double sum = 0.0;
    for (double a : rep.fold_accuracies) sum += a;
    rep.mean_accuracy = sum / static_cast<double>(folds);
    double ss = 0.0;
    for (double a : rep.fold_accuracies)
        ss += (a - rep.mean_accuracy) * (a - rep.mean_accuracy);
    rep.sd_accuracy = std::sqrt(ss / static_cast<double>(folds - 1));
    return rep;
}

/// Concatenated per-operation subspace coordinates; the feature map used by
/// every probe in the pipeline.
inline Eigen::MatrixXd projected_features(const Eigen::MatrixXd& deltas,
                                          const std::vector<const Subspace*>& subspaces) {
    long k_total = 0;
    for (const auto* s : subspaces) k_total += s->k();
    Eigen::MatrixXd out(deltas.rows(), k_total);
    long col = 0;
    for (const auto* s : subspaces) {
        out.middleCols(col, s->k()) = deltas * s->basis.transpose();
        col += s->k();
    }
    return out;
}

/// 3-way operation probe inside one label group (contradiction or neutral
/// operations only). Fits per-op subspaces on the group's deltas, projects,
/// and runs the standard probe protocol. Chance is 1/3.
inline ClassifierReport within_label_probe(const std::map<Operation, DeltaMatrix>& deltas,
                                           NliLabel group, int k, int folds,
                                           std::uint64_t seed) {
    if (group == NliLabel::ENTAILMENT)
        throw ValidationError("within_label_probe: group must be contradiction or neutral");
    std::vector<Operation> ops;
    for (Operation op : all_operations())
        if (target_label(op) == group && deltas.count(op)) ops.push_back(op);
    if (ops.size() != 3)
        throw ValidationError("within_label_probe: need exactly 3 operations in group, got " +
                              std::to_string(ops.size()));

    std::vector<Subspace> fitted;
    for (Operation op : ops) fitted.push_back(fit_subspace(deltas.at(op), k));
    std::vector<const Subspace*> refs;
    for (const auto& s : fitted) refs.push_back(&s);

    long total = 0;
    for (Operation op : ops) total += deltas.at(op).rows.rows();
    Eigen::MatrixXd x(total, static_cast<long>(ops.size()) * k);
    std::vector<int> y(static_cast<std::size_t>(total));
    long row = 0;
    for (std::size_t c = 0; c < ops.size(); ++c) {
        const auto& m = deltas.at(ops[c]).rows;
        x.middleRows(row, m.rows()) = projected_features(m, refs);
        for (long i = 0; i < m.rows(); ++i)
            y[static_cast<std::size_t>(row + i)] = static_cast<int>(c);
        row += m.rows();
    }
    return train_probe(x, y, static_cast<int>(ops.size()), folds, seed);
}

}  // namespace opscope
