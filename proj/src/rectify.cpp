#include "rectiflow/rectify.hpp"

#include <cmath>
#include <iostream>

#include "rectiflow/metrics.hpp"
#include "rectiflow/parallel.hpp"
#include "rectiflow/rng.hpp"

namespace rectiflow {

NoiseSchedule::NoiseSchedule(Kind kind, double c0, std::vector<double> values)
    : kind_(kind), c0_(c0), values_(std::move(values)) {
    const auto check = [](double c) {
        if (c < 0.0 || c >= 1.0)
            throw ConfigError("noise schedule: levels must lie in [0, 1)");
    };
    check(c0_);
    for (double c : values_) check(c);
}

NoiseSchedule NoiseSchedule::constant(double c) { return {Kind::constant, c, {}}; }

NoiseSchedule NoiseSchedule::harmonic(double c0) { return {Kind::harmonic, c0, {}}; }

NoiseSchedule NoiseSchedule::explicit_list(std::vector<double> values) {
    if (values.empty())
        throw ConfigError("noise schedule: explicit list must be non-empty");
    return {Kind::explicit_list, 0.0, std::move(values)};
}

double NoiseSchedule::value(Index i) const {
    if (i < 0) throw InvalidArgumentError("noise schedule: negative step");
    switch (kind_) {
        case Kind::constant:
            return c0_;
        case Kind::harmonic:
            return c0_ / static_cast<double>(i + 1);
        case Kind::explicit_list:
            if (static_cast<std::size_t>(i) >= values_.size())
                throw InvalidArgumentError("noise schedule: step beyond explicit list");
            return values_[static_cast<std::size_t>(i)];
    }
    return 0.0;
}

std::string NoiseSchedule::describe() const {
    switch (kind_) {
        case Kind::constant:
            return "constant(" + std::to_string(c0_) + ")";
        case Kind::harmonic:
            return "harmonic(" + std::to_string(c0_) + ")";
        case Kind::explicit_list:
            return "explicit[" + std::to_string(values_.size()) + "]";
    }
    return {};
}

namespace {

// Residual accumulation shared by loss_eval and field_l2_eval. Each pass
// visits every particle row once under a seeded permutation; evaluation k
// draws t from stratum k mod T. target_disp toggles |v - disp|^2 vs |v|^2.
LossStats accumulate_time_integral(const VelocityField& field,
                                   const ParticleCoupling& coupling,
                                   Index time_samples, Seed seed, bool target_disp) {
    const Index n = coupling.size();
    const Index strata = std::max<Index>(1, time_samples);
    const Index total = std::max(n, strata);
    if (n < 1) throw InvalidArgumentError("loss_eval: empty coupling");
    const auto perm = random_permutation(n, derive_seed(seed, 1), 0);

    const Index nc = chunk_count(total);
    std::vector<double> partial(static_cast<std::size_t>(nc), 0.0);
    std::vector<Index> oos(static_cast<std::size_t>(nc), 0);
    parallel_for(nc, [&](Index c) {
        const Index lo = c * kChunkRows;
        const Index hi = std::min(total, lo + kChunkRows);
        Philox gen(derive_seed(seed, 2), static_cast<std::uint64_t>(c));
        VectorXd v(field.dim());
        double acc = 0.0;
        Index miss = 0;
        for (Index k = lo; k < hi; ++k) {
            const Index row = perm[static_cast<std::size_t>(k % n)];
            const double stratum = static_cast<double>(k % strata);
            const double t = (stratum + gen.uniform()) / static_cast<double>(strata);
            const VectorXd xt = ((1.0 - t) * coupling.x0().row(row) +
                                 t * coupling.x1().row(row))
                                    .transpose();
            bool ok;
            try {
                ok = field.try_eval(t, xt, v);
            } catch (const OutOfSupportError&) {
                ok = false;
            }
            if (!ok) {
                ++miss;
                continue;
            }
            if (target_disp) {
                acc += (v - (coupling.x1().row(row) - coupling.x0().row(row)).transpose())
                           .squaredNorm();
            } else {
                acc += v.squaredNorm();
            }
        }
        partial[static_cast<std::size_t>(c)] = acc;
        oos[static_cast<std::size_t>(c)] = miss;
    });

    LossStats stats;
    stats.evaluations = total;
    for (Index m : oos) stats.out_of_support += m;
    if (stats.out_of_support * 100 > total)
        throw Error("loss_eval: " + std::to_string(stats.out_of_support) + " of " +
                    std::to_string(total) + " evaluations were out of support");
    double sum = 0.0;
    for (double p : partial) sum += p;
    stats.value = sum / static_cast<double>(total - stats.out_of_support);
    return stats;
}

} // namespace

LossStats loss_eval_stats(const VelocityField& field, const ParticleCoupling& coupling,
                          Index time_samples, Seed seed) {
    return accumulate_time_integral(field, coupling, time_samples, seed, true);
}

double loss_eval(const VelocityField& field, const ParticleCoupling& coupling,
                 Index time_samples, Seed seed) {
    return loss_eval_stats(field, coupling, time_samples, seed).value;
}

double field_l2_eval(const VelocityField& field, const ParticleCoupling& coupling,
                     Index time_samples, Seed seed) {
    return accumulate_time_integral(field, coupling, time_samples, seed, false).value;
}

FieldPtr resolve_field(const FieldSource& source, const ParticleCoupling& coupling) {
    if (const auto* ptr = std::get_if<FieldPtr>(&source)) {
        if (!*ptr) throw InvalidArgumentError("rectify: null closed-form field");
        return *ptr;
    }
    const auto& k = std::get<KernelSource>(source);
    const double h = k.bandwidth > 0.0 ? k.bandwidth : scott_bandwidth(coupling);
    return std::make_shared<KernelVelocityField>(coupling, h, k.cutoff_in_h,
                                                 k.noise_eps, k.noise_seed);
}

std::pair<ParticleCoupling, RectifyDiagnostics> rectify(const ParticleCoupling& coupling,
                                                        const FieldSource& source,
                                                        const RectifyOptions& options) {
    const FieldPtr field = resolve_field(source, coupling);
    RectifyDiagnostics diag;
    diag.pre_cost = transport_cost(coupling);
    if (options.compute_loss) {
        const LossStats ls = loss_eval_stats(*field, coupling, options.loss_time_samples,
                                             options.loss_seed);
        diag.field_loss = ls.value;
        diag.loss_out_of_support = ls.out_of_support;
    }

    EnsembleOptions opts;
    opts.config = options.config;
    opts.collapse_tol_rel = options.collapse_tol_rel;
    EnsembleResult result = integrate_ensemble(*field, coupling.x0(), opts);
    diag.min_spread = result.min_spread;
    diag.t_at_min = result.t_at_min;

    ParticleCoupling rectified(coupling.x0(), std::move(result.states));
    diag.post_cost = transport_cost(rectified);
    return {std::move(rectified), diag};
}

IterationReport smoothed_rectify_iterate(const ParticleCoupling& initial,
                                         const NoiseSchedule& schedule, Index k_steps,
                                         const FieldSource& source,
                                         const IntegratorConfig& config, Seed seed,
                                         const IterateOptions& extra) {
    if (k_steps < 1) throw InvalidArgumentError("smoothed_rectify_iterate: K must be >= 1");
    const Index n = initial.size();
    const Index d = initial.dim();

    IterationReport report;
    report.initial_cost = transport_cost(initial);
    report.v1_estimate =
        parallel_sum(n, [&](Index i) { return initial.x1().row(i).squaredNorm(); }) /
        static_cast<double>(n);

    // Reference samples for marginal checks: a fresh standard normal cloud
    // for mu0 (the smoothing construction assumes it) and the initial x1
    // rows for mu1.
    const ParticleSet ref0 = gaussian_sample(GaussianDist::standard(d),
                                             std::max<Index>(n, 2), derive_seed(seed, 90));
    const ParticleSet ref1{initial.x1()};

    bool any_noise = false;
    for (Index i = 0; i < k_steps; ++i)
        if (schedule.value(i) > 0.0) any_noise = true;
    if (any_noise && extra.energy_metrics) {
        const auto check = energy_two_sample_check(ParticleSet{initial.x0()}, ref0,
                                                   derive_seed(seed, 91),
                                                   extra.metrics_cap, extra.n_perms);
        report.mu0_precondition_ok = check.below_null;
        if (!check.below_null)
            std::cerr << "warning: initial x0 marginal deviates from N(0, I) "
                         "(energy distance "
                      << check.distance << " > null " << check.threshold
                      << "); noise injection assumes a standard normal source\n";
    }

    ParticleCoupling current = initial;
    double cbar_sum = 0.0;
    double min_loss = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < k_steps; ++i) {
        const double c_i = schedule.value(i);
        const Seed step_seed = derive_seed(seed, 1000 + static_cast<std::uint64_t>(i));
        ParticleCoupling smoothed =
            smooth_coupling(current, c_i, SmoothVariant::variance_preserving, step_seed);

        // Closed forms only describe the original coupling; any smoothing or
        // earlier rectification invalidates them, so fall back to the
        // kernel estimate built from the current particles.
        FieldSource step_source = source;
        if (std::holds_alternative<FieldPtr>(source) && (i > 0 || c_i > 0.0))
            step_source = KernelSource{};
        if (extra.sde_eps > 0.0) {
            if (auto* ks = std::get_if<KernelSource>(&step_source)) {
                ks->noise_eps = extra.sde_eps;
                ks->noise_seed = derive_seed(step_seed, 9);
            }
        }

        RectifyOptions ropts;
        ropts.config = config;
        ropts.config.seed = derive_seed(step_seed, 7);
        ropts.collapse_tol_rel = extra.collapse_tol_rel;
        ropts.compute_loss = true;
        ropts.loss_time_samples = extra.loss_time_samples;
        ropts.loss_seed = derive_seed(step_seed, 8);

        StepRecord rec;
        rec.step = i;
        rec.c_i = c_i;
        rec.seed = step_seed;
        try {
            if (extra.sde_eps > 0.0) {
                // Noisy rectification: drift estimated for the noisy
                // interpolation, transported by Euler-Maruyama.
                FieldPtr drift = resolve_field(step_source, smoothed);
                rec.loss = loss_eval(*drift, smoothed, extra.loss_time_samples,
                                     ropts.loss_seed);
                EnsembleOptions eopts;
                eopts.config = ropts.config;
                eopts.sde_eps = extra.sde_eps;
                eopts.collapse_tol_rel = extra.collapse_tol_rel;
                EnsembleResult res = integrate_ensemble(*drift, smoothed.x0(), eopts);
                current = ParticleCoupling(smoothed.x0(), std::move(res.states));
            } else {
                auto [next, diag] = rectify(smoothed, step_source, ropts);
                rec.loss = diag.field_loss;
                current = std::move(next);
            }
        } catch (const NonRectifiableError& e) {
            report.aborted_at = e.t_star;
            report.abort_reason = e.what();
            return report;
        }

        rec.transport_cost = transport_cost(current);
        rec.transport_distance = std::sqrt(rec.transport_cost);
        if (extra.energy_metrics) {
            const auto c0 = energy_two_sample_check(ParticleSet{current.x0()}, ref0,
                                                    derive_seed(step_seed, 21),
                                                    extra.metrics_cap, extra.n_perms);
            const auto c1 = energy_two_sample_check(ParticleSet{current.x1()}, ref1,
                                                    derive_seed(step_seed, 22),
                                                    extra.metrics_cap, extra.n_perms);
            rec.energy_mu0 = c0.distance;
            rec.energy_threshold_mu0 = c0.threshold;
            rec.energy_mu1 = c1.distance;
            rec.energy_threshold_mu1 = c1.threshold;
        }
        report.steps.push_back(rec);

        min_loss = std::min(min_loss, rec.loss);
        report.min_loss_curve.push_back(min_loss);
        cbar_sum += c_i;
        const double k = static_cast<double>(i + 1);
        report.bound_curve.push_back(report.initial_cost / k +
                                     (2.0 + report.v1_estimate) * (cbar_sum / k));
    }
    return report;
}

double optimality_gap(const ParticleCoupling& coupling, GapBaseline baseline,
                      Index max_n) {
    const double cost = transport_cost(coupling);
    double optimum = 0.0;
    switch (baseline) {
        case GapBaseline::discrete_exact:
            optimum = discrete_ot_exact(ParticleSet{coupling.x0()},
                                        ParticleSet{coupling.x1()}, max_n)
                          .cost;
            break;
        case GapBaseline::gaussian_closed_form: {
            const ParticleSet s0{coupling.x0()};
            const ParticleSet s1{coupling.x1()};
            optimum = bures_wasserstein(GaussianDist(s0.mean(), s0.sample_cov()),
                                        GaussianDist(s1.mean(), s1.sample_cov()));
            break;
        }
        case GapBaseline::quantile_1d:
            if (coupling.dim() != 1)
                throw InvalidArgumentError(
                    "optimality_gap: quantile_1d baseline needs d = 1");
            optimum = quantile_ot_1d(ParticleSet{coupling.x0()},
                                     ParticleSet{coupling.x1()})
                          .cost;
            break;
    }
    return cost - optimum;
}

} // namespace rectiflow
