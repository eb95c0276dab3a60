#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "opscope/common.hpp"
#include "opscope/geometry.hpp"
#include "opscope/rng.hpp"

namespace opscope {

/// Selectivity of one operation subspace: on-target mean projection energy
/// over the pooled off-target mean projection energy.
struct SelectivityReport {
    std::string operation;
    int layer = -1;
    Component component = Component::resid_post;
    double rho = kNaN;
    double mu_on = kNaN;
    double mu_off = kNaN;
    double cohens_d = kNaN;
    double p_random = kNaN;
    double p_shuffle = kNaN;
    long n_on = 0;
    long n_off = 0;
};

inline std::vector<double> projection_energies(const Eigen::MatrixXd& rows,
                                               const Subspace& s) {
    Eigen::MatrixXd coords = rows * s.basis.transpose();
    std::vector<double> out(static_cast<std::size_t>(rows.rows()));
    for (long i = 0; i < rows.rows(); ++i)
        out[static_cast<std::size_t>(i)] = coords.row(i).squaredNorm();
    return out;
}

namespace detail {

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double selectivity_ratio(const Eigen::MatrixXd& on,
                                const std::vector<const Eigen::MatrixXd*>& off,
                                const Subspace& s) {
    double on_sum = (on * s.basis.transpose()).squaredNorm();
    double mu_on = on_sum / static_cast<double>(on.rows());
    double off_sum = 0.0;
    long off_n = 0;
    for (const auto* m : off) {
        off_sum += (*m * s.basis.transpose()).squaredNorm();
        off_n += m->rows();
    }
    if (off_n == 0) throw ValidationError("selectivity: empty off-target pool");
    double mu_off = off_sum / static_cast<double>(off_n);
    if (mu_off == 0.0)
        throw ValidationError("selectivity: off-target projection energy is zero");
    return mu_on / mu_off;
}

}  // namespace detail

/// Off-target rows are pooled across operations (double-sum denominator),
/// not averaged per operation.
inline SelectivityReport selectivity(const DeltaMatrix& on,
                                     const std::vector<const DeltaMatrix*>& off,
                                     const Subspace& s) {
    if (off.empty()) throw ValidationError("selectivity: off-target pool must be non-empty");
    for (const auto* m : off)
        if (m->rows.cols() != on.rows.cols() || on.rows.cols() != s.basis.cols())
            throw ValidationError("selectivity: dimension mismatch");

    SelectivityReport rep;
    rep.operation = to_string(on.operation);
    rep.layer = on.hook.layer;
    rep.component = on.hook.component;
    rep.n_on = on.rows.rows();

    double on_sum = (on.rows * s.basis.transpose()).squaredNorm();
    rep.mu_on = on_sum / static_cast<double>(rep.n_on);
    double off_sum = 0.0;
    for (const auto* m : off) {
        off_sum += (m->rows * s.basis.transpose()).squaredNorm();
        rep.n_off += m->rows.rows();
    }
    if (rep.n_off == 0) throw ValidationError("selectivity: empty off-target pool");
    rep.mu_off = off_sum / static_cast<double>(rep.n_off);
    if (rep.mu_off == 0.0)
        throw ValidationError("selectivity: off-target projection energy is zero");
    rep.rho = rep.mu_on / rep.mu_off;
    return rep;
}

/// One-sided permutation p-value against rank-k random orthonormal subspaces:
/// p = (#{rho_b >= rho_obs} + 1) / (B + 1). Draw b uses seed + b.
inline double selectivity_null_random(const DeltaMatrix& on,
                                      const std::vector<const DeltaMatrix*>& off,
                                      const Subspace& observed, int B,
                                      std::uint64_t seed) {
    if (B < 1) throw ValidationError("selectivity_null_random: B must be >= 1");
    std::vector<const Eigen::MatrixXd*> off_rows;
    for (const auto* m : off) off_rows.push_back(&m->rows);
    double rho_obs = detail::selectivity_ratio(on.rows, off_rows, observed);
    const int d = static_cast<int>(on.rows.cols());
    int count = 0;
    for (int b = 0; b < B; ++b) {
        Subspace sb = random_subspace(d, observed.k(), seed + static_cast<std::uint64_t>(b));
        if (detail::selectivity_ratio(on.rows, off_rows, sb) >= rho_obs) ++count;
    }
    return static_cast<double>(count + 1) / static_cast<double>(B + 1);
}

/// Column-shuffle permutation test over a square selectivity matrix. The
/// observed statistic is the mean diagonal; each permutation scores the mean
/// pseudo-diagonal M[i][perm[i]].
inline double selectivity_null_shuffle(const Eigen::MatrixXd& matrix, int B,
                                       std::uint64_t seed) {
    if (matrix.rows() != matrix.cols() || matrix.rows() < 1)
        throw ValidationError("selectivity_null_shuffle: matrix must be square");
    if (B < 1) throw ValidationError("selectivity_null_shuffle: B must be >= 1");
    const int n = static_cast<int>(matrix.rows());
    double observed = matrix.diagonal().mean();
    Rng rng(seed);
    int count = 0;
    for (int b = 0; b < B; ++b) {
        std::vector<int> perm = rng.permutation(n);
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += matrix(i, perm[static_cast<std::size_t>(i)]);
        if (s / n >= observed) ++count;
    }
    return static_cast<double>(count + 1) / static_cast<double>(B + 1);
}

/// Pooled-SD Cohen's d between two samples.
inline double cohens_d(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2)
        throw ValidationError("cohens_d: each group needs at least 2 values");
    auto stats = [](const std::vector<double>& v) {
        double mean = detail::mean_of(v);
        double ss = 0.0;
        for (double x : v) ss += (x - mean) * (x - mean);
        return std::make_pair(mean, ss);
    };
    auto [ma, ssa] = stats(a);
    auto [mb, ssb] = stats(b);
    double n1 = static_cast<double>(a.size()), n2 = static_cast<double>(b.size());
    double pooled = std::sqrt((ssa + ssb) / (n1 + n2 - 2.0));
    if (pooled == 0.0) throw ValidationError("cohens_d: pooled standard deviation is zero");
    return (ma - mb) / pooled;
}

/// Mean silhouette with Euclidean distances. Declared degenerate rules:
/// singleton clusters score 0, and a(i)=b(i)=0 scores 0.
inline double silhouette(const Eigen::MatrixXd& points, const std::vector<int>& labels) {
    const long n = points.rows();
    if (n != static_cast<long>(labels.size()))
        throw ValidationError("silhouette: points/labels size mismatch");
    std::vector<int> uniq(labels);
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    if (uniq.size() < 2)
        throw ValidationError("silhouette: need at least 2 clusters");

    std::vector<long> cluster_size(uniq.size(), 0);
    auto cluster_of = [&](int lab) {
        return static_cast<std::size_t>(
            std::lower_bound(uniq.begin(), uniq.end(), lab) - uniq.begin());
    };
    for (int lab : labels) ++cluster_size[cluster_of(lab)];

    double total = 0.0;
    for (long i = 0; i < n; ++i) {
        std::size_t ci = cluster_of(labels[static_cast<std::size_t>(i)]);
        if (cluster_size[ci] == 1) continue;  // s(i) = 0

        std::vector<double> sum(uniq.size(), 0.0);
        for (long j = 0; j < n; ++j) {
            if (j == i) continue;
            double dist = (points.row(i) - points.row(j)).norm();
            sum[cluster_of(labels[static_cast<std::size_t>(j)])] += dist;
        }
        double a = sum[ci] / static_cast<double>(cluster_size[ci] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < uniq.size(); ++c) {
            if (c == ci || cluster_size[c] == 0) continue;
            b = std::min(b, sum[c] / static_cast<double>(cluster_size[c]));
        }
        double m = std::max(a, b);
        if (m > 0.0) total += (b - a) / m;
    }
    return total / static_cast<double>(n);
}

struct GroupCompareResult {
    double mean_a = kNaN;
    double mean_b = kNaN;
    double cohens_d = kNaN;
    double p_two_sided = kNaN;
};

/// Same-label vs cross-label contamination comparison: group-mean difference,
/// effect size, and a two-sided label-permutation p-value.
inline GroupCompareResult label_contamination_compare(const std::vector<double>& same_label,
                                                      const std::vector<double>& cross_label,
                                                      int B = 10000,
                                                      std::uint64_t seed = 0) {
    if (same_label.empty() || cross_label.empty())
        throw ValidationError("label_contamination_compare: a group is empty");
    if (B < 1) throw ValidationError("label_contamination_compare: B must be >= 1");

    GroupCompareResult res;
    res.mean_a = detail::mean_of(same_label);
    res.mean_b = detail::mean_of(cross_label);
    res.cohens_d = (same_label.size() >= 2 && cross_label.size() >= 2)
                       ? cohens_d(same_label, cross_label)
                       : kNaN;

    std::vector<double> pooled(same_label);
    pooled.insert(pooled.end(), cross_label.begin(), cross_label.end());
    const std::size_t n1 = same_label.size();
    double obs = std::abs(res.mean_a - res.mean_b);

    Rng rng(seed);
    int count = 0;
    for (int b = 0; b < B; ++b) {
        rng.shuffle(pooled);
        double sa = 0.0, sb = 0.0;
        for (std::size_t i = 0; i < pooled.size(); ++i)
            (i < n1 ? sa : sb) += pooled[i];
        double diff = sa / static_cast<double>(n1) -
                      sb / static_cast<double>(pooled.size() - n1);
        if (std::abs(diff) >= obs) ++count;
    }
    res.p_two_sided = static_cast<double>(count + 1) / static_cast<double>(B + 1);
    return res;
}

/// One-sided paired sign-flip permutation p-value for mean(diffs) > 0:
/// p = (#{mean_b >= mean_obs} + 1) / (B + 1).
inline double signflip_p(const std::vector<double>& diffs, int B, std::uint64_t seed) {
    if (diffs.empty()) throw ValidationError("signflip_p: no pairs");
    if (B < 1) throw ValidationError("signflip_p: B must be >= 1");
    double obs = detail::mean_of(diffs);
    Rng rng(seed);
    int count = 0;
    for (int b = 0; b < B; ++b) {
        double s = 0.0;
        for (double d : diffs) s += (rng.next_u64() & 1) ? d : -d;
        if (s / static_cast<double>(diffs.size()) >= obs) ++count;
    }
    return static_cast<double>(count + 1) / static_cast<double>(B + 1);
}

/// Kolmogorov-Smirnov distance of a sample to Uniform(0, 1].
inline double ks_to_uniform(std::vector<double> sample) {
    if (sample.empty()) throw ValidationError("ks_to_uniform: empty sample");
    std::sort(sample.begin(), sample.end());
    const double n = static_cast<double>(sample.size());
    double ks = 0.0;
    for (std::size_t i = 0; i < sample.size(); ++i) {
        double cdf = sample[i];  // uniform CDF
        ks = std::max(ks, std::abs(static_cast<double>(i + 1) / n - cdf));
        ks = std::max(ks, std::abs(static_cast<double>(i) / n - cdf));
    }
    return ks;
}

}  // namespace opscope
