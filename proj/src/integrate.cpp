#include "rectiflow/integrate.hpp"

#include <cmath>

#include "rectiflow/parallel.hpp"
#include "rectiflow/rng.hpp"

namespace rectiflow {

void IntegratorConfig::validate() const {
    if (steps < 1) throw ConfigError("integrator: steps must be >= 1");
    if (!(t_end_clip > 0.5) || t_end_clip > 1.0)
        throw ConfigError("integrator: t_end_clip must lie in (0.5, 1]");
}

namespace {

constexpr double kCollapseWindowEnd = 0.95;

void require_interval(const VelocityField& field, double t_end) {
    if (field.t_min() > 0.0)
        throw SingularTimeError("field not defined at t=0", 0.0);
    if (t_end > field.t_max() ||
        (!field.t_max_inclusive() && t_end >= field.t_max()))
        throw SingularTimeError("field not defined up to t=" + std::to_string(t_end),
                                t_end);
    for (double s : field.singular_times())
        if (s >= 0.0 && s <= t_end)
            throw SingularTimeError(
                "field has an interior singular time t=" + std::to_string(s), s);
}

// One fixed step of the chosen scheme for a single state.
void step_single(const VelocityField& field, Scheme scheme, double t, double dt,
                 VectorXd& z) {
    if (scheme == Scheme::euler) {
        z += dt * field(t, z);
        return;
    }
    const VectorXd k1 = field(t, z);
    const VectorXd k2 = field(t + 0.5 * dt, VectorXd(z + 0.5 * dt * k1));
    const VectorXd k3 = field(t + 0.5 * dt, VectorXd(z + 0.5 * dt * k2));
    const VectorXd k4 = field(t + dt, VectorXd(z + dt * k3));
    z += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

void check_finite(const VectorXd& z, double t) {
    if (!z.allFinite())
        throw DivergenceError("integration diverged: non-finite state at t=" +
                              std::to_string(t));
}

Trajectory integrate_single(const VelocityField& field, const VectorXd& x0,
                            double t_end, Scheme scheme, Index steps, bool extrapolate,
                            double sde_eps, Seed seed) {
    const Index extra = extrapolate ? 1 : 0;
    Trajectory traj;
    traj.times.resize(steps + 1 + extra);
    traj.states.resize(steps + 1 + extra, x0.size());
    VectorXd z = x0;
    traj.times[0] = 0.0;
    traj.states.row(0) = z.transpose();
    Philox noise(seed, 0);
    const double dt = t_end / static_cast<double>(steps);
    for (Index k = 0; k < steps; ++k) {
        const double t = t_end * static_cast<double>(k) / static_cast<double>(steps);
        step_single(field, scheme, t, dt, z);
        if (sde_eps > 0.0) {
            const double sd = std::sqrt(sde_eps * dt);
            for (Index j = 0; j < z.size(); ++j) z[j] += sd * noise.normal();
        }
        const double t_next =
            t_end * static_cast<double>(k + 1) / static_cast<double>(steps);
        check_finite(z, t_next);
        traj.times[k + 1] = t_next;
        traj.states.row(k + 1) = z.transpose();
    }
    if (extrapolate) {
        const double delta = 1.0 - t_end;
        z += delta * field(t_end, z);
        if (sde_eps > 0.0 && delta > 0.0) {
            const double sd = std::sqrt(sde_eps * delta);
            for (Index j = 0; j < z.size(); ++j) z[j] += sd * noise.normal();
        }
        check_finite(z, 1.0);
        traj.times[steps + 1] = 1.0;
        traj.states.row(steps + 1) = z.transpose();
    }
    return traj;
}

} // namespace

Trajectory integrate_ode(const VelocityField& field, const VectorXd& x0,
                         const IntegratorConfig& config) {
    config.validate();
    require_interval(field, config.t_end_clip);
    return integrate_single(field, x0, config.t_end_clip, config.scheme, config.steps,
                            config.t_end_clip < 1.0, 0.0, 0);
}

Trajectory integrate_to(const VelocityField& field, const VectorXd& x0, double t_end,
                        Scheme scheme, Index steps) {
    if (steps < 1) throw ConfigError("integrate_to: steps must be >= 1");
    require_interval(field, t_end);
    return integrate_single(field, x0, t_end, scheme, steps, false, 0.0, 0);
}

Trajectory integrate_sde(const VelocityField& field, double eps, const VectorXd& x0,
                         const IntegratorConfig& config) {
    config.validate();
    if (eps < 0.0) throw InvalidArgumentError("integrate_sde: eps must be >= 0");
    require_interval(field, config.t_end_clip);
    return integrate_single(field, x0, config.t_end_clip, Scheme::euler, config.steps,
                            config.t_end_clip < 1.0, eps, config.seed);
}

double cloud_spread(const MatrixXd& states, Index cap) {
    const Index n = states.rows();
    const Index m = std::min(n, cap);
    const Index stride = std::max<Index>(1, n / m);
    double best = 0.0;
    for (Index a = 0; a < m; ++a) {
        for (Index b = a + 1; b < m; ++b) {
            const double d =
                (states.row(a * stride) - states.row(b * stride)).norm();
            best = std::max(best, d);
        }
    }
    return best;
}

namespace {

// One lockstep step of all rows; stages use batch evaluation.
void step_batch(const VelocityField& field, Scheme scheme, double t, double dt,
                MatrixXd& z, MatrixXd& k1, MatrixXd& k2, MatrixXd& k3, MatrixXd& k4,
                MatrixXd& tmp) {
    if (scheme == Scheme::euler) {
        field.eval_batch(t, z, k1);
        z += dt * k1;
        return;
    }
    field.eval_batch(t, z, k1);
    tmp = z + 0.5 * dt * k1;
    field.eval_batch(t + 0.5 * dt, tmp, k2);
    tmp = z + 0.5 * dt * k2;
    field.eval_batch(t + 0.5 * dt, tmp, k3);
    tmp = z + dt * k3;
    field.eval_batch(t + dt, tmp, k4);
    z += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

void add_noise(MatrixXd& z, double sd, Seed seed, Index step_tag) {
    // Row i draws from its own stream; the step index salts the position so
    // every step consumes fresh, reproducible increments.
    const Index n = z.rows();
    const Index d = z.cols();
    parallel_for(chunk_count(n), [&](Index c) {
        const Index lo = c * kChunkRows;
        const Index hi = std::min(n, lo + kChunkRows);
        for (Index i = lo; i < hi; ++i) {
            Philox gen(derive_seed(seed, static_cast<std::uint64_t>(step_tag)),
                       static_cast<std::uint64_t>(i));
            for (Index j = 0; j < d; ++j) z(i, j) += sd * gen.normal();
        }
    });
}

} // namespace

EnsembleResult integrate_ensemble(const VelocityField& field, const MatrixXd& starts,
                                  const EnsembleOptions& options) {
    const IntegratorConfig& cfg = options.config;
    cfg.validate();
    if (options.sde_eps < 0.0)
        throw InvalidArgumentError("integrate_ensemble: sde_eps must be >= 0");

    // An interior singular time is tolerated only while watching for
    // collapse: march up to it and require the trajectories to merge first.
    double t_end = cfg.t_end_clip;
    std::optional<double> barrier;
    for (double s : field.singular_times()) {
        if (s > 0.0 && s <= cfg.t_end_clip) {
            if (options.collapse_tol_rel <= 0.0)
                throw SingularTimeError(
                    "field has an interior singular time t=" + std::to_string(s), s);
            barrier = s;
            break;
        }
    }

    const Scheme scheme = options.sde_eps > 0.0 ? Scheme::euler : cfg.scheme;
    const double dt = t_end / static_cast<double>(cfg.steps);
    Index last_step = cfg.steps;
    if (barrier) {
        // Stop so that every stage evaluation stays strictly below the barrier.
        last_step = static_cast<Index>(std::floor((*barrier - 1e-9) / dt)) - 1;
        if (last_step < 1)
            throw SingularTimeError("singular time too close to t=0", *barrier);
    }

    MatrixXd z = starts;
    MatrixXd k1, k2, k3, k4, tmp;
    const double initial_spread = cloud_spread(z);
    double min_spread = initial_spread;
    double t_at_min = 0.0;

    for (Index k = 0; k < last_step; ++k) {
        const double t = t_end * static_cast<double>(k) / static_cast<double>(cfg.steps);
        step_batch(field, scheme, t, dt, z, k1, k2, k3, k4, tmp);
        if (options.sde_eps > 0.0)
            add_noise(z, std::sqrt(options.sde_eps * dt), cfg.seed, k);
        const double t_next =
            t_end * static_cast<double>(k + 1) / static_cast<double>(cfg.steps);
        if (!z.allFinite())
            throw DivergenceError("ensemble integration diverged at t=" +
                                  std::to_string(t_next));
        if (options.collapse_tol_rel > 0.0 && t_next <= kCollapseWindowEnd) {
            const double spread = cloud_spread(z);
            if (spread < min_spread) {
                min_spread = spread;
                t_at_min = t_next;
            }
            if (spread < options.collapse_tol_rel * initial_spread)
                throw NonRectifiableError(
                    "trajectories collapsed at t=" + std::to_string(t_next) +
                        " (spread " + std::to_string(spread) + ")",
                    t_next, spread);
        }
    }

    if (barrier)
        throw SingularTimeError(
            "field singular at t=" + std::to_string(*barrier) +
                " and trajectories did not collapse before it",
            *barrier);

    if (t_end < 1.0) {
        field.eval_batch(t_end, z, k1);
        z += (1.0 - t_end) * k1;
        if (options.sde_eps > 0.0)
            add_noise(z, std::sqrt(options.sde_eps * (1.0 - t_end)), cfg.seed,
                      cfg.steps);
        if (!z.allFinite())
            throw DivergenceError("ensemble integration diverged at t=1");
    }
    return {std::move(z), min_spread, t_at_min};
}

CollapseReport detect_collapse(const VelocityField& field, const ParticleSet& starts,
                               const VectorXd& t_grid, double radius_tol) {
    if (t_grid.size() < 1)
        throw InvalidArgumentError("detect_collapse: empty time grid");
    for (Index i = 0; i < t_grid.size(); ++i) {
        if (i > 0 && t_grid[i] <= t_grid[i - 1])
            throw InvalidArgumentError("detect_collapse: grid not increasing");
        if (!field.time_valid(t_grid[i]))
            throw SingularTimeError("detect_collapse: grid time outside field domain",
                                    t_grid[i]);
    }

    MatrixXd z = starts.points();
    MatrixXd k1, k2, k3, k4, tmp;
    double min_spread = std::numeric_limits<double>::infinity();
    double t_star = 0.0;
    double t = 0.0;
    constexpr double kResolution = 2e-3;
    for (Index g = 0; g < t_grid.size(); ++g) {
        const double target = t_grid[g];
        const double span = target - t;
        if (span > 0.0) {
            const auto sub = std::max<Index>(
                1, static_cast<Index>(std::ceil(span / kResolution)));
            const double dt = span / static_cast<double>(sub);
            for (Index k = 0; k < sub; ++k) {
                step_batch(field, Scheme::rk4, t + dt * static_cast<double>(k), dt, z,
                           k1, k2, k3, k4, tmp);
            }
            t = target;
            if (!z.allFinite())
                throw DivergenceError("detect_collapse: diverged at t=" +
                                      std::to_string(t));
        }
        const double spread = cloud_spread(z);
        if (spread < min_spread) {
            min_spread = spread;
            t_star = target;
        }
    }
    const bool collapsed = min_spread < radius_tol;
    return {collapsed, collapsed ? std::optional<double>(t_star) : std::nullopt,
            min_spread};
}

} // namespace rectiflow
