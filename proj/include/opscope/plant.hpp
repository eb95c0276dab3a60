#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "opscope/common.hpp"
#include "opscope/csv.hpp"
#include "opscope/rng.hpp"
#include "opscope/semantics.hpp"

namespace opscope {

/// Synthetic delta generator: each row is a shared per-operation shift plus a
/// sample from the planted basis span (unit-variance coefficients) plus
/// isotropic noise. The ground truth doubles as the recovery oracle.
struct PlantSpec {
    int n_ops = kNumOperations;
    int per_op_n = 0;
    int dim = 0;
    std::vector<Eigen::MatrixXd> bases;   // per op: k_true x dim, row-orthonormal
    std::vector<Eigen::VectorXd> shifts;  // per op: dim
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_ops < 1 || per_op_n < 1 || dim < 1)
            throw ValidationError("plant spec: n_ops, per_op_n and dim must be >= 1");
        if (noise_sigma < 0.0)
            throw ValidationError("plant spec: noise_sigma must be nonnegative");
        if (static_cast<int>(bases.size()) != n_ops ||
            static_cast<int>(shifts.size()) != n_ops)
            throw ValidationError("plant spec: need one basis and one shift per op");
        for (int o = 0; o < n_ops; ++o) {
            const auto& b = bases[static_cast<std::size_t>(o)];
            if (b.rows() > dim)
                throw ValidationError("plant spec: basis rank exceeds dim for op " +
                                      std::to_string(o));
            if (b.cols() != dim || shifts[static_cast<std::size_t>(o)].size() != dim)
                throw ValidationError("plant spec: dimension mismatch for op " +
                                      std::to_string(o));
            if (b.rows() > 0) {
                Eigen::MatrixXd g = b * b.transpose();
                g.diagonal().array() -= 1.0;
                if (g.cwiseAbs().maxCoeff() > 1e-10)
                    throw ValidationError("plant spec: basis not orthonormal for op " +
                                          std::to_string(o));
            }
        }
    }
};

struct PlantResult {
    std::vector<Eigen::MatrixXd> deltas;  // per op: per_op_n x dim
    PlantSpec truth;
};

inline PlantResult plant_deltas(const PlantSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    PlantResult out;
    out.truth = spec;
    out.deltas.reserve(static_cast<std::size_t>(spec.n_ops));
    for (int o = 0; o < spec.n_ops; ++o) {
        const auto& basis = spec.bases[static_cast<std::size_t>(o)];
        const auto& shift = spec.shifts[static_cast<std::size_t>(o)];
        const long k = basis.rows();
        Eigen::MatrixXd rows(spec.per_op_n, spec.dim);
        for (int i = 0; i < spec.per_op_n; ++i) {
            Eigen::VectorXd row = shift;
            for (long j = 0; j < k; ++j) row += rng.normal() * basis.row(j).transpose();
            for (int j = 0; j < spec.dim; ++j) row[j] += spec.noise_sigma * rng.normal();
            rows.row(i) = row;
        }
        out.deltas.push_back(std::move(rows));
    }
    return out;
}

/// Mutually orthogonal planted subspaces: one QR pass over a Gaussian
/// d x (n_ops*k_true) matrix, sliced into per-op bases. Shifts, when
/// requested, are scaled copies of each op's first basis row so the mean
/// displacement lies inside the planted span.
inline PlantSpec make_orthogonal_plant(int n_ops, int per_op_n, int dim, int k_true,
                                       double shift_scale, double noise_sigma,
                                       std::uint64_t seed) {
    if (n_ops * k_true > dim)
        throw ValidationError("make_orthogonal_plant: n_ops*k_true exceeds dim");
    PlantSpec spec;
    spec.n_ops = n_ops;
    spec.per_op_n = per_op_n;
    spec.dim = dim;
    spec.noise_sigma = noise_sigma;
    spec.seed = seed;

    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);  // basis draw separate from row draws
    Eigen::MatrixXd g = rng.normal_matrix(dim, n_ops * k_true);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(dim, n_ops * k_true);
    Eigen::VectorXd rdiag = qr.matrixQR().diagonal();
    for (int j = 0; j < n_ops * k_true; ++j)
        if (rdiag[j] < 0) q.col(j) = -q.col(j);

    for (int o = 0; o < n_ops; ++o) {
        Eigen::MatrixXd basis(k_true, dim);
        for (int j = 0; j < k_true; ++j)
            basis.row(j) = q.col(o * k_true + j).transpose();
        spec.bases.push_back(basis);
        Eigen::VectorXd shift = Eigen::VectorXd::Zero(dim);
        if (shift_scale != 0.0 && k_true > 0)
            shift = shift_scale * basis.row(0).transpose();
        spec.shifts.push_back(shift);
    }
    spec.validate();
    return spec;
}

inline nlohmann::json plant_truth_to_json(const PlantSpec& spec) {
    nlohmann::json j;
    j["n_ops"] = spec.n_ops;
    j["per_op_n"] = spec.per_op_n;
    j["dim"] = spec.dim;
    j["noise_sigma"] = spec.noise_sigma;
    j["seed"] = spec.seed;
    nlohmann::json bases = nlohmann::json::array();
    nlohmann::json shifts = nlohmann::json::array();
    for (int o = 0; o < spec.n_ops; ++o) {
        const auto& b = spec.bases[static_cast<std::size_t>(o)];
        nlohmann::json rows = nlohmann::json::array();
        for (long i = 0; i < b.rows(); ++i) {
            nlohmann::json row = nlohmann::json::array();
            for (long c = 0; c < b.cols(); ++c) row.push_back(b(i, c));
            rows.push_back(row);
        }
        bases.push_back(rows);
        nlohmann::json sv = nlohmann::json::array();
        const auto& s = spec.shifts[static_cast<std::size_t>(o)];
        for (long c = 0; c < s.size(); ++c) sv.push_back(s[c]);
        shifts.push_back(sv);
    }
    j["bases"] = bases;
    j["shifts"] = shifts;
    return j;
}

}  // namespace opscope
