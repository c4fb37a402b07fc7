#include "rectiflow/ot.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "rectiflow/parallel.hpp"

namespace rectiflow {

TransportPlan quantile_ot_1d(const ParticleSet& s0, const ParticleSet& s1) {
    if (s0.dim() != 1 || s1.dim() != 1)
        throw InvalidArgumentError("quantile_ot_1d: inputs must be one-dimensional");
    if (s0.size() != s1.size())
        throw InvalidArgumentError("quantile_ot_1d: sample counts differ");
    const Index n = s0.size();
    std::vector<Index> ord0(static_cast<std::size_t>(n)), ord1(static_cast<std::size_t>(n));
    std::iota(ord0.begin(), ord0.end(), Index{0});
    std::iota(ord1.begin(), ord1.end(), Index{0});
    const auto& a = s0.points();
    const auto& b = s1.points();
    std::sort(ord0.begin(), ord0.end(), [&](Index x, Index y) { return a(x, 0) < a(y, 0); });
    std::sort(ord1.begin(), ord1.end(), [&](Index x, Index y) { return b(x, 0) < b(y, 0); });
    TransportPlan plan;
    plan.assignment.assign(static_cast<std::size_t>(n), -1);
    double cost = 0.0;
    for (Index r = 0; r < n; ++r) {
        const Index i = ord0[static_cast<std::size_t>(r)];
        const Index j = ord1[static_cast<std::size_t>(r)];
        plan.assignment[static_cast<std::size_t>(i)] = j;
        const double d = a(i, 0) - b(j, 0);
        cost += d * d;
    }
    plan.cost = cost / static_cast<double>(n);
    return plan;
}

double bures_wasserstein(const GaussianDist& g0, const GaussianDist& g1) {
    if (g0.dim() != g1.dim())
        throw InvalidArgumentError("bures_wasserstein: dimension mismatch");
    const MatrixXd s0h = matrix_sqrt_psd(g0.cov());
    MatrixXd inner = s0h * g1.cov() * s0h;
    inner = 0.5 * (inner + inner.transpose());
    const PsdFactor f = psd_factor(inner, "bures_wasserstein inner");
    const double cross = f.values.cwiseSqrt().sum();
    return (g0.mean() - g1.mean()).squaredNorm() + g0.cov().trace() + g1.cov().trace() -
           2.0 * cross;
}

LinearMap gaussian_ot_map(const GaussianDist& g0, const GaussianDist& g1) {
    if (g0.dim() != g1.dim())
        throw InvalidArgumentError("gaussian_ot_map: dimension mismatch");
    const PsdFactor f0 = psd_factor(g0.cov(), "gaussian_ot_map source covariance");
    if (f0.values.minCoeff() <= 0.0)
        throw InvalidArgumentError("gaussian_ot_map: source covariance is singular");
    const MatrixXd s0h =
        f0.vectors * f0.values.cwiseSqrt().asDiagonal() * f0.vectors.transpose();
    const MatrixXd s0hinv =
        f0.vectors * f0.values.cwiseSqrt().cwiseInverse().asDiagonal() *
        f0.vectors.transpose();
    MatrixXd inner = s0h * g1.cov() * s0h;
    inner = 0.5 * (inner + inner.transpose());
    const MatrixXd inner_sqrt = matrix_sqrt_psd(inner);
    const MatrixXd m = s0hinv * inner_sqrt * s0hinv;
    return {m, g1.mean() - m * g0.mean()};
}

namespace {

// Jonker-Volgenant shortest augmenting path solver for the dense square
// assignment problem. Costs are supplied by a functor so geometric instances
// never materialize the n x n matrix.
template <typename CostFn>
std::vector<Index> lapjv(Index n, CostFn cost) {
    constexpr double kBig = std::numeric_limits<double>::max();
    std::vector<Index> rowsol(static_cast<std::size_t>(n), -1);
    std::vector<Index> colsol(static_cast<std::size_t>(n), -1);
    std::vector<double> v(static_cast<std::size_t>(n), 0.0);
    std::vector<Index> free_rows(static_cast<std::size_t>(n), 0);
    std::vector<Index> matches(static_cast<std::size_t>(n), 0);

    // Column reduction.
    for (Index j = n - 1; j >= 0; --j) {
        double min_cost = cost(0, j);
        Index imin = 0;
        for (Index i = 1; i < n; ++i) {
            const double c = cost(i, j);
            if (c < min_cost) {
                min_cost = c;
                imin = i;
            }
        }
        v[static_cast<std::size_t>(j)] = min_cost;
        if (++matches[static_cast<std::size_t>(imin)] == 1) {
            rowsol[static_cast<std::size_t>(imin)] = j;
            colsol[static_cast<std::size_t>(j)] = imin;
        }
    }

    // Reduction transfer.
    Index numfree = 0;
    for (Index i = 0; i < n; ++i) {
        if (matches[static_cast<std::size_t>(i)] == 0) {
            free_rows[static_cast<std::size_t>(numfree++)] = i;
        } else if (matches[static_cast<std::size_t>(i)] == 1) {
            const Index j1 = rowsol[static_cast<std::size_t>(i)];
            double min_slack = kBig;
            for (Index j = 0; j < n; ++j)
                if (j != j1)
                    min_slack = std::min(min_slack,
                                         cost(i, j) - v[static_cast<std::size_t>(j)]);
            v[static_cast<std::size_t>(j1)] -= min_slack;
        }
    }

    // Augmenting row reduction, two sweeps.
    for (int sweep = 0; sweep < 2; ++sweep) {
        Index k = 0;
        const Index prev_numfree = numfree;
        numfree = 0;
        while (k < prev_numfree) {
            const Index i = free_rows[static_cast<std::size_t>(k++)];
            double umin = cost(i, 0) - v[0];
            Index j1 = 0, j2 = -1;
            double usubmin = kBig;
            for (Index j = 1; j < n; ++j) {
                const double h = cost(i, j) - v[static_cast<std::size_t>(j)];
                if (h < usubmin) {
                    if (h >= umin) {
                        usubmin = h;
                        j2 = j;
                    } else {
                        usubmin = umin;
                        umin = h;
                        j2 = j1;
                        j1 = j;
                    }
                }
            }
            Index i0 = colsol[static_cast<std::size_t>(j1)];
            if (umin < usubmin) {
                v[static_cast<std::size_t>(j1)] -= usubmin - umin;
            } else if (i0 >= 0) {
                j1 = j2;
                i0 = colsol[static_cast<std::size_t>(j1)];
            }
            rowsol[static_cast<std::size_t>(i)] = j1;
            colsol[static_cast<std::size_t>(j1)] = i;
            if (i0 >= 0) {
                if (umin < usubmin)
                    free_rows[static_cast<std::size_t>(--k)] = i0;
                else
                    free_rows[static_cast<std::size_t>(numfree++)] = i0;
            }
        }
    }

    // Shortest augmenting paths for the remaining free rows.
    std::vector<double> d(static_cast<std::size_t>(n));
    std::vector<Index> pred(static_cast<std::size_t>(n));
    std::vector<Index> collist(static_cast<std::size_t>(n));
    for (Index f = 0; f < numfree; ++f) {
        const Index freerow = free_rows[static_cast<std::size_t>(f)];
        for (Index j = 0; j < n; ++j) {
            d[static_cast<std::size_t>(j)] = cost(freerow, j) - v[static_cast<std::size_t>(j)];
            pred[static_cast<std::size_t>(j)] = freerow;
            collist[static_cast<std::size_t>(j)] = j;
        }
        Index low = 0, up = 0, last = 0, endofpath = -1;
        double min_d = 0.0;
        bool found = false;
        do {
            if (up == low) {
                last = low - 1;
                min_d = d[static_cast<std::size_t>(collist[static_cast<std::size_t>(up++)])];
                for (Index k = up; k < n; ++k) {
                    const Index j = collist[static_cast<std::size_t>(k)];
                    const double h = d[static_cast<std::size_t>(j)];
                    if (h <= min_d) {
                        if (h < min_d) {
                            up = low;
                            min_d = h;
                        }
                        collist[static_cast<std::size_t>(k)] =
                            collist[static_cast<std::size_t>(up)];
                        collist[static_cast<std::size_t>(up++)] = j;
                    }
                }
                for (Index k = low; k < up; ++k) {
                    const Index j = collist[static_cast<std::size_t>(k)];
                    if (colsol[static_cast<std::size_t>(j)] < 0) {
                        endofpath = j;
                        found = true;
                        break;
                    }
                }
            }
            if (!found) {
                const Index j1 = collist[static_cast<std::size_t>(low++)];
                const Index i = colsol[static_cast<std::size_t>(j1)];
                const double h = cost(i, j1) - v[static_cast<std::size_t>(j1)] - min_d;
                for (Index k = up; k < n; ++k) {
                    const Index j = collist[static_cast<std::size_t>(k)];
                    const double v2 = cost(i, j) - v[static_cast<std::size_t>(j)] - h;
                    if (v2 < d[static_cast<std::size_t>(j)]) {
                        pred[static_cast<std::size_t>(j)] = i;
                        if (v2 == min_d) {
                            if (colsol[static_cast<std::size_t>(j)] < 0) {
                                endofpath = j;
                                found = true;
                                break;
                            }
                            collist[static_cast<std::size_t>(k)] =
                                collist[static_cast<std::size_t>(up)];
                            collist[static_cast<std::size_t>(up++)] = j;
                        }
                        d[static_cast<std::size_t>(j)] = v2;
                    }
                }
            }
        } while (!found);

        for (Index k = 0; k <= last; ++k) {
            const Index j1 = collist[static_cast<std::size_t>(k)];
            v[static_cast<std::size_t>(j1)] += d[static_cast<std::size_t>(j1)] - min_d;
        }
        Index j_cur = endofpath;
        Index i_cur;
        do {
            i_cur = pred[static_cast<std::size_t>(j_cur)];
            colsol[static_cast<std::size_t>(j_cur)] = i_cur;
            std::swap(rowsol[static_cast<std::size_t>(i_cur)], j_cur);
        } while (i_cur != freerow);
    }
    return rowsol;
}

} // namespace

std::vector<Index> solve_assignment(const MatrixXd& cost) {
    if (cost.rows() != cost.cols() || cost.rows() < 1)
        throw InvalidArgumentError("solve_assignment: cost matrix must be square");
    if (!cost.allFinite())
        throw InvalidArgumentError("solve_assignment: non-finite costs");
    return lapjv(cost.rows(), [&](Index i, Index j) { return cost(i, j); });
}

TransportPlan discrete_ot_exact(const ParticleSet& s0, const ParticleSet& s1,
                                Index max_n) {
    if (s0.dim() != s1.dim())
        throw InvalidArgumentError("discrete_ot_exact: dimension mismatch");
    if (s0.size() != s1.size())
        throw InvalidArgumentError("discrete_ot_exact: sample counts differ");
    const Index n = s0.size();
    if (n > max_n)
        throw ResourceError("discrete_ot_exact: " + std::to_string(n) +
                            " points exceed the guard of " + std::to_string(max_n) +
                            "; subsample the inputs or raise max_n");
    const MatrixXd& a = s0.points();
    const MatrixXd& b = s1.points();
    TransportPlan plan;
    plan.assignment = lapjv(
        n, [&](Index i, Index j) { return (a.row(i) - b.row(j)).squaredNorm(); });
    plan.cost = parallel_sum(n, [&](Index i) {
                    return (a.row(i) - b.row(plan.assignment[static_cast<std::size_t>(i)]))
                        .squaredNorm();
                }) /
                static_cast<double>(n);
    return plan;
}

TransportPlan sinkhorn(const MatrixXd& cost_matrix, const SinkhornOptions& options) {
    const Index n = cost_matrix.rows();
    const Index m = cost_matrix.cols();
    if (n < 1 || m < 1)
        throw InvalidArgumentError("sinkhorn: empty cost matrix");
    if (!cost_matrix.allFinite())
        throw InvalidArgumentError("sinkhorn: non-finite costs");
    if (!(options.eps > 0.0))
        throw InvalidArgumentError("sinkhorn: eps must be > 0");
    VectorXd a = options.row_marginals.size()
                     ? options.row_marginals
                     : VectorXd::Constant(n, 1.0 / static_cast<double>(n));
    VectorXd b = options.col_marginals.size()
                     ? options.col_marginals
                     : VectorXd::Constant(m, 1.0 / static_cast<double>(m));
    if (a.size() != n || b.size() != m)
        throw InvalidArgumentError("sinkhorn: marginal size mismatch");

    const double eps = options.eps;
    const VectorXd log_a = a.array().log();
    const VectorXd log_b = b.array().log();
    VectorXd f = VectorXd::Zero(n), g = VectorXd::Zero(m);

    const auto lse_rows = [&](VectorXd& out) {
        // out_i = LSE_j ((g_j - C_ij)/eps)
        out.resize(n);
        parallel_for(n, [&](Index i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (Index j = 0; j < m; ++j)
                mx = std::max(mx, (g[j] - cost_matrix(i, j)) / eps);
            double s = 0.0;
            for (Index j = 0; j < m; ++j)
                s += std::exp((g[j] - cost_matrix(i, j)) / eps - mx);
            out[i] = mx + std::log(s);
        });
    };
    const auto lse_cols = [&](VectorXd& out) {
        out.resize(m);
        parallel_for(m, [&](Index j) {
            double mx = -std::numeric_limits<double>::infinity();
            for (Index i = 0; i < n; ++i)
                mx = std::max(mx, (f[i] - cost_matrix(i, j)) / eps);
            double s = 0.0;
            for (Index i = 0; i < n; ++i)
                s += std::exp((f[i] - cost_matrix(i, j)) / eps - mx);
            out[j] = mx + std::log(s);
        });
    };

    TransportPlan plan;
    plan.converged = false;
    VectorXd lse(n);
    for (Index it = 0; it < options.max_iter; ++it) {
        lse_rows(lse);
        f = eps * (log_a - lse);
        lse_cols(lse);
        g = eps * (log_b - lse);
        plan.iterations = it + 1;
        if ((it + 1) % 5 != 0 && it + 1 != options.max_iter) continue;
        // Row sums after the column update measure the marginal violation.
        double violation = 0.0;
        lse_rows(lse);
        for (Index i = 0; i < n; ++i)
            violation += std::abs(std::exp(f[i] / eps + lse[i]) - a[i]);
        if (violation < options.tol) {
            plan.converged = true;
            break;
        }
    }

    plan.dense_plan.resize(n, m);
    parallel_for(n, [&](Index i) {
        for (Index j = 0; j < m; ++j)
            plan.dense_plan(i, j) =
                std::exp((f[i] + g[j] - cost_matrix(i, j)) / eps);
    });
    plan.cost = plan.dense_plan.cwiseProduct(cost_matrix).sum();
    return plan;
}

} // namespace rectiflow
