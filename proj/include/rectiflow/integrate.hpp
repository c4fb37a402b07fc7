#pragma once

#include <optional>

#include "rectiflow/velocity.hpp"

namespace rectiflow {

enum class Scheme { euler, rk4 };

/// Fixed-step integration on [0, t_end_clip], then one linear extrapolation
/// step to t = 1 using the last evaluated velocity. Fixed grids keep runs
/// reproducible; there is no adaptive control.
struct IntegratorConfig {
    Scheme scheme = Scheme::rk4;
    Index steps = 200;
    double t_end_clip = 1.0 - 1e-4;
    Seed seed = 0; // SDE only

    void validate() const;
};

struct Trajectory {
    VectorXd times;
    MatrixXd states; // one row per time
};

/// Solves dz/dt = v(t, z), z(0) = x0, up to t = 1 (clip-and-extrapolate).
/// The whole closed interval [0, t_end_clip] must be inside the field's time
/// domain and free of singular times.
Trajectory integrate_ode(const VelocityField& field, const VectorXd& x0,
                         const IntegratorConfig& config);

/// Fixed-step integration of a segment [0, t_end] without the final
/// extrapolation; used for partial-time queries and collapse scans.
Trajectory integrate_to(const VelocityField& field, const VectorXd& x0, double t_end,
                        Scheme scheme, Index steps);

/// Euler-Maruyama for dY = v(Y) dt + sqrt(eps) dW on the same grid as the
/// euler ODE path; eps = 0 reproduces integrate_ode with the euler scheme
/// bitwise. Deterministic given config.seed.
Trajectory integrate_sde(const VelocityField& field, double eps, const VectorXd& x0,
                         const IntegratorConfig& config);

/// Pushes every row of `starts` to t = 1; row-parallel, bitwise reproducible
/// for any thread count (SDE paths draw from per-row streams).
struct EnsembleOptions {
    IntegratorConfig config;
    double sde_eps = 0.0;
    /// When > 0, the run aborts with NonRectifiableError if the spread of a
    /// <= 64-point monitor sample drops below collapse_tol_rel times its
    /// initial value at a grid time in (0, 0.95].
    double collapse_tol_rel = 0.0;
};

struct EnsembleResult {
    MatrixXd states;     // final states at t = 1
    double min_spread;   // monitored spread minimum (initial spread if unmonitored)
    double t_at_min;
};

EnsembleResult integrate_ensemble(const VelocityField& field, const MatrixXd& starts,
                                  const EnsembleOptions& options);

/// Maximum pairwise distance over at most `cap` evenly-strided rows.
double cloud_spread(const MatrixXd& states, Index cap = 64);

struct CollapseReport {
    bool collapsed;
    std::optional<double> t_star;
    double min_spread;
};

/// Integrates all starts along t_grid and reports the minimum spread of the
/// state cloud over the grid times. collapsed = (min_spread < radius_tol).
CollapseReport detect_collapse(const VelocityField& field, const ParticleSet& starts,
                               const VectorXd& t_grid, double radius_tol);

} // namespace rectiflow
