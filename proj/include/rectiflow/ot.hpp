#pragma once

#include "rectiflow/couplings.hpp"

namespace rectiflow {

/// Discrete Kantorovich plan: either a one-to-one assignment (equal counts)
/// or a dense plan with prescribed marginals. cost excludes any entropy term.
struct TransportPlan {
    std::vector<Index> assignment; // source row i -> target row assignment[i]
    MatrixXd dense_plan;
    double cost = 0.0;
    bool converged = true;
    Index iterations = 0;

    bool is_assignment() const { return !assignment.empty(); }
};

/// Monotone (sorted) pairing of two 1-D samples; optimal under squared cost.
/// cost is the mean squared difference of matched order statistics.
TransportPlan quantile_ot_1d(const ParticleSet& s0, const ParticleSet& s1);

/// Squared Gaussian transport distance:
/// |m0-m1|^2 + tr S0 + tr S1 - 2 tr((S0^{1/2} S1 S0^{1/2})^{1/2}).
double bures_wasserstein(const GaussianDist& g0, const GaussianDist& g1);

struct LinearMap {
    MatrixXd matrix;
    VectorXd offset;

    VectorXd operator()(const VectorXd& x) const { return matrix * x + offset; }
    MatrixXd apply_rows(const MatrixXd& pts) const {
        MatrixXd out = pts * matrix.transpose();
        out.rowwise() += offset.transpose();
        return out;
    }
};

/// The map T(x) = m1 + S0^{-1/2} (S0^{1/2} S1 S0^{1/2})^{1/2} S0^{-1/2} (x - m0)
/// pushing g0 onto g1 at optimal cost. Requires strictly PD S0.
LinearMap gaussian_ot_map(const GaussianDist& g0, const GaussianDist& g1);

/// Exact optimal assignment under squared Euclidean cost (shortest augmenting
/// path solver). Deterministic: cost ties resolve to the lowest index by the
/// ascending scan order. Guarded at max_n points (O(n^3) worst case).
TransportPlan discrete_ot_exact(const ParticleSet& s0, const ParticleSet& s1,
                                Index max_n = 20000);

/// Exact assignment for an arbitrary dense cost matrix; returns row -> col.
std::vector<Index> solve_assignment(const MatrixXd& cost);

struct SinkhornOptions {
    double eps;
    Index max_iter = 10000;
    double tol = 1e-9;
    VectorXd row_marginals; // defaults to uniform
    VectorXd col_marginals;
};

/// Log-domain Sinkhorn. Returns the dense plan and the linear transport cost
/// <plan, cost> (no entropy term); converged=false if max_iter was hit.
TransportPlan sinkhorn(const MatrixXd& cost_matrix, const SinkhornOptions& options);

} // namespace rectiflow
