#pragma once

#include <optional>
#include <string>
#include <variant>

#include "rectiflow/integrate.hpp"
#include "rectiflow/ot.hpp"

namespace rectiflow {

/// Per-step noise levels c_i in [0, 1) for smoothed iteration.
class NoiseSchedule {
public:
    enum class Kind { constant, harmonic, explicit_list };

    static NoiseSchedule constant(double c);
    static NoiseSchedule harmonic(double c0); // c_i = c0 / (i + 1)
    static NoiseSchedule explicit_list(std::vector<double> values);

    double value(Index i) const;
    Kind kind() const { return kind_; }
    double c0() const { return c0_; }
    const std::vector<double>& values() const { return values_; }
    std::string describe() const;

private:
    NoiseSchedule(Kind kind, double c0, std::vector<double> values);
    Kind kind_;
    double c0_;
    std::vector<double> values_;
};

struct StepRecord {
    Index step = 0;
    double c_i = 0.0;
    double loss = 0.0;
    double transport_cost = 0.0;
    double transport_distance = 0.0;
    double energy_mu0 = 0.0;
    double energy_mu1 = 0.0;
    double energy_threshold_mu0 = 0.0;
    double energy_threshold_mu1 = 0.0;
    Seed seed = 0;
};

struct IterationReport {
    std::vector<StepRecord> steps;
    std::vector<double> min_loss_curve; // min over L^0..L^i
    std::vector<double> bound_curve;    // C/K + (2 + V1) cbar_K at K = i+1
    double initial_cost = 0.0;
    double v1_estimate = 0.0; // mean |x1|^2 of the initial coupling
    bool mu0_precondition_ok = true;
    std::optional<double> aborted_at; // t* of a non-rectifiable abort
    std::string abort_reason;
};

struct LossStats {
    double value = 0.0;
    Index evaluations = 0;
    Index out_of_support = 0;
};

/// Monte-Carlo estimate of the matching loss
/// int_0^1 E |v_t(X_t) - (X_1 - X_0)|^2 dt over stratified uniform times,
/// each particle row visited once per pass (row/time pairing is a seeded
/// permutation). Out-of-support evaluations are skipped and counted; more
/// than 1% of them is an error.
LossStats loss_eval_stats(const VelocityField& field, const ParticleCoupling& coupling,
                          Index time_samples, Seed seed);
double loss_eval(const VelocityField& field, const ParticleCoupling& coupling,
                 Index time_samples, Seed seed);

/// Same sampling scheme for int_0^1 E |v_t(X_t)|^2 dt.
double field_l2_eval(const VelocityField& field, const ParticleCoupling& coupling,
                     Index time_samples, Seed seed);

/// How the velocity field for a rectification step is obtained: an exact
/// closed-form field supplied by the caller, or a kernel-regression estimate
/// built from the coupling being rectified (bandwidth 0 = Scott default).
struct KernelSource {
    double bandwidth = 0.0;
    double cutoff_in_h = 5.0;
    double noise_eps = 0.0; // regress on the noisy interpolation (SDE drift)
    Seed noise_seed = 0;
};
using FieldSource = std::variant<FieldPtr, KernelSource>;

FieldPtr resolve_field(const FieldSource& source, const ParticleCoupling& coupling);

struct RectifyOptions {
    IntegratorConfig config;
    /// Abort with NonRectifiableError when the monitored spread falls below
    /// this fraction of its initial value at an interior time.
    double collapse_tol_rel = 1e-2;
    bool compute_loss = true;
    Index loss_time_samples = 256;
    Seed loss_seed = 0x5EC7;
};

struct RectifyDiagnostics {
    double pre_cost = 0.0;
    double post_cost = 0.0;
    double field_loss = 0.0; // loss of the used field on the input coupling
    Index loss_out_of_support = 0;
    double min_spread = 0.0;
    double t_at_min = 0.0;
};

/// One rectification: x0 rows are kept, x1 rows are replaced by the time-1
/// ODE solution of the field started at x0.
std::pair<ParticleCoupling, RectifyDiagnostics> rectify(
    const ParticleCoupling& coupling, const FieldSource& source,
    const RectifyOptions& options);

struct IterateOptions {
    Index loss_time_samples = 256;
    bool energy_metrics = true;
    Index metrics_cap = 4096;
    Index n_perms = 200;
    double collapse_tol_rel = 1e-2;
    /// SDE noise level; > 0 switches the inner transport to Euler-Maruyama
    /// with a noise-matched drift.
    double sde_eps = 0.0;
};

/// K smoothed rectification steps: each draws X0 = sqrt(1-c_i) Z0 +
/// sqrt(c_i) W with fresh W, keeps X1 = Z1, and rectifies. A closed-form
/// FieldPtr source is honored only for a first step with c_0 = 0; every
/// other step estimates the field by kernel regression on the current
/// particles. A non-rectifiable abort returns the partial report.
IterationReport smoothed_rectify_iterate(const ParticleCoupling& initial,
                                         const NoiseSchedule& schedule, Index k_steps,
                                         const FieldSource& source,
                                         const IntegratorConfig& config, Seed seed,
                                         const IterateOptions& extra = {});

enum class GapBaseline { discrete_exact, gaussian_closed_form, quantile_1d };

/// Transport cost of the coupling minus the baseline optimum on the same
/// samples.
double optimality_gap(const ParticleCoupling& coupling, GapBaseline baseline,
                      Index max_n = 20000);

} // namespace rectiflow
