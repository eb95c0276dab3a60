#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "opscope/act1.hpp"
#include "opscope/common.hpp"
#include "opscope/rng.hpp"
#include "opscope/store.hpp"

namespace opscope {

struct SubspaceSource {
    std::string tag;  // operation name, "label", or "random:<seed>"
    int layer = -1;
    Component component = Component::resid_post;
};

/// Rank-k orthonormal basis (rows) with the centering mean and retained
/// singular values of the fit.
struct Subspace {
    Eigen::MatrixXd basis;            // k x d, row-orthonormal
    Eigen::VectorXd mean;             // d
    Eigen::VectorXd singular_values;  // k, nonincreasing
    SubspaceSource source;

    int k() const { return static_cast<int>(basis.rows()); }
    int dim() const { return static_cast<int>(basis.cols()); }

    void validate() const {
        Eigen::MatrixXd g = basis * basis.transpose();
        g.diagonal().array() -= 1.0;
        if (g.cwiseAbs().maxCoeff() > 1e-8)
            throw ValidationError("subspace basis not orthonormal");
        for (long i = 0; i + 1 < singular_values.size(); ++i)
            if (singular_values[i] < singular_values[i + 1])
                throw ValidationError("singular values not nonincreasing");
    }
};

enum class DirectionKind { caa_mean_shift, svd_top };

inline const char* to_string(DirectionKind k) {
    return k == DirectionKind::caa_mean_shift ? "caa" : "svd";
}

struct Direction {
    Eigen::VectorXd vector;  // unit norm
    DirectionKind kind = DirectionKind::caa_mean_shift;
    SubspaceSource source;
};

/// Mean-center the rows, take the thin SVD, and keep the top-k right singular
/// vectors. Each basis row is sign-fixed so its largest-magnitude entry is
/// positive (first occurrence wins), making the fit deterministic. Fewer than
/// k numerically nonzero singular values is an error rather than a padded
/// basis.
inline Subspace fit_subspace(const DeltaMatrix& deltas, int k) {
    const auto& d = deltas.rows;
    const long n = d.rows();
    if (k < 1) throw ValidationError("fit_subspace: k must be >= 1");
    if (n < k)
        throw ValidationError("fit_subspace: need at least k rows, got " +
                              std::to_string(n));
    if (k > std::min(n, d.cols()))
        throw ValidationError("fit_subspace: k exceeds min(N, d)");

    Eigen::VectorXd mean = d.colwise().mean();
    Eigen::MatrixXd centered = d.rowwise() - mean.transpose();

    Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    if (sv[k - 1] <= 1e-10 * sv[0])
        throw ValidationError("fit_subspace: insufficient rank (fewer than k "
                              "nonzero singular values)");

    Subspace s;
    s.mean = mean;
    s.singular_values = sv.head(k);
    s.basis = svd.matrixV().leftCols(k).transpose();
    for (int i = 0; i < k; ++i) {
        long arg = 0;
        s.basis.row(i).cwiseAbs().maxCoeff(&arg);
        if (s.basis(i, arg) < 0) s.basis.row(i) = -s.basis.row(i);
    }
    s.source.tag = to_string(deltas.operation);
    s.source.layer = deltas.hook.layer;
    s.source.component = deltas.hook.component;
    return s;
}

/// Orthogonal projection basis^T * basis * v. Projects the raw vector; the
/// stored mean is used only when fitting.
inline Eigen::VectorXd project(const Subspace& s, const Eigen::VectorXd& v) {
    if (v.size() != s.basis.cols())
        throw ValidationError("project: dimension mismatch");
    return s.basis.transpose() * (s.basis * v);
}

/// Coordinates of v in the subspace basis (basis * v). The probe features.
inline Eigen::VectorXd coordinates(const Subspace& s, const Eigen::VectorXd& v) {
    if (v.size() != s.basis.cols())
        throw ValidationError("coordinates: dimension mismatch");
    return s.basis * v;
}

inline double projection_energy(const Subspace& s, const Eigen::VectorXd& v) {
    return coordinates(s, v).squaredNorm();
}

/// Haar-ish random rank-k subspace: Gaussian d x k matrix, QR, columns
/// sign-fixed by the R diagonal. Deterministic per seed; callers that sweep
/// layers use seed = base + 1000*layer + draw.
inline Subspace random_subspace(int d, int k, std::uint64_t seed) {
    if (k < 1 || k > d) throw ValidationError("random_subspace: need 1 <= k <= d");
    Rng rng(seed);
    Eigen::MatrixXd g = rng.normal_matrix(d, k);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, k);
    Eigen::VectorXd rdiag = qr.matrixQR().diagonal().head(k);
    for (int j = 0; j < k; ++j)
        if (rdiag[j] < 0) q.col(j) = -q.col(j);

    Subspace s;
    s.basis = q.transpose();
    s.mean = Eigen::VectorXd::Zero(d);
    s.singular_values = Eigen::VectorXd::Zero(k);  // no spectrum for random bases
    s.source.tag = "random:" + std::to_string(seed);
    return s;
}

/// Unit-normalized mean delta (the contrastive activation addition vector).
inline Direction caa_direction(const DeltaMatrix& deltas) {
    if (deltas.rows.rows() < 1) throw ValidationError("caa_direction: empty matrix");
    Eigen::VectorXd mean = deltas.rows.colwise().mean();
    double norm = mean.norm();
    double scale = deltas.rows.cwiseAbs().maxCoeff();
    if (norm == 0.0 || (scale > 0.0 && norm < 1e-12 * scale))
        throw ValidationError("caa_direction: mean delta is zero");
    Direction dir;
    dir.vector = mean / norm;
    dir.kind = DirectionKind::caa_mean_shift;
    dir.source.tag = to_string(deltas.operation);
    dir.source.layer = deltas.hook.layer;
    dir.source.component = deltas.hook.component;
    return dir;
}

/// Top singular direction of the fitted subspace.
inline Direction svd_direction(const Subspace& s) {
    if (s.k() < 1) throw ValidationError("svd_direction: empty subspace");
    Direction dir;
    dir.vector = s.basis.row(0).transpose();
    dir.kind = DirectionKind::svd_top;
    dir.source = s.source;
    return dir;
}

inline double cosine_alignment(const Direction& a, const Direction& b) {
    if (a.vector.size() != b.vector.size())
        throw ValidationError("cosine_alignment: dimension mismatch");
    double c = a.vector.dot(b.vector);
    return std::min(1.0, std::max(-1.0, c));
}

/// Remove each row's component inside the given subspace.
inline DeltaMatrix residualise(const DeltaMatrix& deltas, const Subspace& s) {
    if (deltas.rows.cols() != s.basis.cols())
        throw ValidationError("residualise: dimension mismatch");
    DeltaMatrix out = deltas;
    Eigen::MatrixXd coords = deltas.rows * s.basis.transpose();  // N x k
    out.rows = deltas.rows - coords * s.basis;
    return out;
}

/// Fraction of total squared row norm captured by the subspace.
inline double variance_explained(const DeltaMatrix& deltas, const Subspace& s) {
    if (deltas.rows.rows() < 1) throw ValidationError("variance_explained: empty matrix");
    if (deltas.rows.cols() != s.basis.cols())
        throw ValidationError("variance_explained: dimension mismatch");
    double total = deltas.rows.squaredNorm();
    if (total == 0.0)
        throw ValidationError("variance_explained: all-zero delta matrix");
    double captured = (deltas.rows * s.basis.transpose()).squaredNorm();
    return captured / total;
}

/// Mean squared cosine of principal alignment, (1/k_A) * ||A B^T||_F^2.
/// Directional: normalized by the first argument's rank.
inline double subspace_overlap(const Subspace& a, const Subspace& b) {
    if (a.dim() != b.dim())
        throw ValidationError("subspace_overlap: dimension mismatch");
    return (a.basis * b.basis.transpose()).squaredNorm() / a.k();
}

/// Label subspace for the residualisation control: each row is replaced by
/// its label group's mean delta, then the usual mean-centred fit runs on that
/// matrix. With two groups the centered matrix has rank 1, so k_label
/// defaults to 1.
inline Subspace label_subspace(const DeltaMatrix& contradiction_deltas,
                               const DeltaMatrix& neutral_deltas, int k_label = 1) {
    if (contradiction_deltas.rows.cols() != neutral_deltas.rows.cols())
        throw ValidationError("label_subspace: dimension mismatch");
    const long nc = contradiction_deltas.rows.rows();
    const long nn = neutral_deltas.rows.rows();
    if (nc < 1 || nn < 1) throw ValidationError("label_subspace: empty group");
    Eigen::VectorXd mc = contradiction_deltas.rows.colwise().mean();
    Eigen::VectorXd mn = neutral_deltas.rows.colwise().mean();
    DeltaMatrix stacked;
    stacked.hook = contradiction_deltas.hook;
    stacked.rows.resize(nc + nn, mc.size());
    for (long i = 0; i < nc; ++i) stacked.rows.row(i) = mc.transpose();
    for (long i = 0; i < nn; ++i) stacked.rows.row(nc + i) = mn.transpose();
    Subspace s = fit_subspace(stacked, k_label);
    s.source.tag = "label";
    s.source.layer = contradiction_deltas.hook.layer;
    s.source.component = contradiction_deltas.hook.component;
    return s;
}

// --- serialization ---------------------------------------------------------

inline void save_subspaces(const std::vector<Subspace>& subspaces,
                           const std::string& path,
                           const std::string& model_hash = "") {
    nlohmann::json manifest;
    manifest["kind"] = "subspaces";
    manifest["model_hash"] = model_hash;
    nlohmann::json meta = nlohmann::json::object();
    std::vector<act1::Block> blocks;
    for (std::size_t i = 0; i < subspaces.size(); ++i) {
        const auto& s = subspaces[i];
        std::string base = s.source.tag + "/" + std::to_string(s.source.layer) + "/" +
                           to_string(s.source.component);
        nlohmann::json mm;
        mm["tag"] = s.source.tag;
        mm["layer"] = s.source.layer;
        mm["component"] = to_string(s.source.component);
        meta[base] = mm;
        blocks.push_back({base + "/basis", s.basis});
        blocks.push_back({base + "/mean", s.mean.transpose()});
        blocks.push_back({base + "/singular_values", s.singular_values.transpose()});
    }
    manifest["meta"] = meta;
    act1::write(path, manifest, blocks);
}

inline std::vector<Subspace> load_subspaces(const std::string& path) {
    act1::File file = act1::read(path);
    if (file.manifest.value("kind", "") != "subspaces")
        throw LoadError("\"" + path + "\": manifest kind is not \"subspaces\"");
    if (file.blocks.size() % 3 != 0)
        throw LoadError("\"" + path + "\": expected basis/mean/singular_values triples");
    std::vector<Subspace> out;
    const auto& meta = file.manifest.at("meta");
    for (std::size_t i = 0; i < file.blocks.size(); i += 3) {
        const std::string& name = file.blocks[i].name;
        std::string base = name.substr(0, name.rfind('/'));
        const auto& mm = meta.at(base);
        Subspace s;
        s.basis = file.blocks[i].data;
        s.mean = file.blocks[i + 1].data.row(0).transpose();
        s.singular_values = file.blocks[i + 2].data.row(0).transpose();
        s.source.tag = mm.at("tag").get<std::string>();
        s.source.layer = mm.at("layer").get<int>();
        s.source.component = component_from_string(mm.at("component").get<std::string>());
        s.validate();
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace opscope
