#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "rectiflow/couplings.hpp"

namespace rectiflow {

struct BatchEvalStats {
    Index out_of_support = 0;
};

/// Evaluator contract for a velocity field (t, x) -> v. Fields are immutable
/// after construction and safe to evaluate from many threads. The time
/// domain is [t_min, t_max] (t_max exclusive for conditional-expectation
/// fields with a 1/(1-t) factor), minus a finite set of singular times.
class VelocityField {
public:
    virtual ~VelocityField() = default;

    Index dim() const { return dim_; }
    double t_min() const { return t_min_; }
    double t_max() const { return t_max_; }
    bool t_max_inclusive() const { return t_max_inclusive_; }
    const std::vector<double>& singular_times() const { return singular_times_; }

    bool time_valid(double t, double tol = 1e-12) const;
    void check_time(double t) const;

    /// Evaluates the field; out-of-support queries yield a zero vector for
    /// estimator fields and throw OutOfSupportError for scenario fields.
    VectorXd operator()(double t, const VectorXd& x) const;

    /// Returns false (and zeroes out) when the query is out of support.
    bool try_eval(double t, const VectorXd& x, VectorXd& out) const;

    /// Row-parallel evaluation at a fixed time. stats, if given, counts
    /// out-of-support rows.
    virtual void eval_batch(double t, const MatrixXd& points, MatrixXd& out,
                            BatchEvalStats* stats = nullptr) const;

protected:
    VelocityField(Index dim, double t_min, double t_max, bool t_max_inclusive,
                  std::vector<double> singular_times = {});

    virtual bool eval_impl(double t, const VectorXd& x, VectorXd& out) const = 0;

    std::vector<double> singular_times_;

private:
    Index dim_;
    double t_min_, t_max_;
    bool t_max_inclusive_;
};

using FieldPtr = std::shared_ptr<const VelocityField>;

/// Exact field for a jointly Gaussian coupling:
///   v_t(x) = 1/(1-t) (((1-t) S01 + t S1) S_t^{-1} - Id)(x - m_t) + m1 - m0,
/// with S_t = Cov(X_t). noise_eps > 0 gives the drift of the noisy
/// interpolation (S_t gains eps t (1-t) Id), used by the SDE sampler.
class GaussianVelocityField : public VelocityField {
public:
    explicit GaussianVelocityField(GaussianJointBlocks blocks, double noise_eps = 0.0,
                                   double cond_limit = 1e12);
    GaussianVelocityField(const GaussianJointCoupling& coupling, double noise_eps = 0.0,
                          double cond_limit = 1e12);

    void eval_batch(double t, const MatrixXd& points, MatrixXd& out,
                    BatchEvalStats* stats = nullptr) const override;

    /// Velocity as an affine map at fixed t: v(x) = matrix (x - center) + offset.
    struct AffineForm {
        MatrixXd matrix;
        VectorXd center;
        VectorXd offset;
    };
    AffineForm affine_form(double t) const;

protected:
    bool eval_impl(double t, const VectorXd& x, VectorXd& out) const override;

private:
    GaussianJointBlocks blocks_;
    double noise_eps_;
    double cond_limit_;
    double scale_;
};

/// Exact field for a mixture of jointly Gaussian components: the softmax
/// (in log space) of component likelihoods under the law of X_t weights the
/// recentered component fields. Degenerate components are handled through
/// the d x d law of X_t, never a 2d x 2d inverse.
class GmmVelocityField : public VelocityField {
public:
    explicit GmmVelocityField(std::vector<GmmJointComponent> components,
                              double noise_eps = 0.0, double cond_limit = 1e12);
    GmmVelocityField(const GmmJointCoupling& coupling, double noise_eps = 0.0,
                     double cond_limit = 1e12);

    /// Mixture weights alpha_k(x) at (t, x); sums to one.
    VectorXd weights(double t, const VectorXd& x) const;

protected:
    bool eval_impl(double t, const VectorXd& x, VectorXd& out) const override;

private:
    std::vector<GmmJointComponent> components_;
    double noise_eps_;
    double cond_limit_;
    double scale_;
};

/// Nadaraya-Watson estimate of E[X1 - X0 | X_t = x] from particle pairs,
/// with a Gaussian kernel and log-space weight normalization. Queries whose
/// largest raw kernel weight underflows report out-of-support (zero vector,
/// no throw). An optional cutoff (in bandwidth units) enables grid-bucketed
/// batch evaluation; anchors beyond the cutoff are ignored.
class KernelVelocityField : public VelocityField {
public:
    /// noise_eps > 0 anchors the regression on the noisy interpolation
    /// (1-t) x0 + t x1 + sqrt(eps t (1-t)) z with one fixed z row per pair,
    /// giving the drift of the noisy transport.
    KernelVelocityField(ParticleCoupling coupling, double bandwidth,
                        double cutoff_in_h = 0.0 /* 0 = none */,
                        double noise_eps = 0.0, Seed noise_seed = 0);

    double bandwidth() const { return bandwidth_; }

    void eval_batch(double t, const MatrixXd& points, MatrixXd& out,
                    BatchEvalStats* stats = nullptr) const override;

protected:
    bool eval_impl(double t, const VectorXd& x, VectorXd& out) const override;

private:
    MatrixXd anchors_at(double t) const;

    ParticleCoupling coupling_;
    MatrixXd disp_;
    MatrixXd noise_;
    double bandwidth_;
    double cutoff_;
    double noise_eps_;
};

/// Scott-style default bandwidth: mean per-coordinate standard deviation of
/// the pooled endpoints times n^(-1/(d+4)).
double scott_bandwidth(const ParticleCoupling& coupling);

/// The piecewise-constant fields of the registered scenarios. Queries in the
/// gap between branches throw OutOfSupportError.
enum class ScenarioField {
    disconnected_opt,    // (0,-2) for x1 < -1, (0, 2) for x1 > 1
    disconnected_nonopt, // (-4,0) for x2 < -0.5, (4, 0) for x2 > 0.5
    gauss_latent_fp,     // (-2,2) for x1 < -t, (2,-2) for x1 > t
    antipodal,           // -2 x / (1 - 2t), singular at t = 1/2
};

class ScenarioVelocityField : public VelocityField {
public:
    explicit ScenarioVelocityField(ScenarioField which, Index dim = 2);

protected:
    bool eval_impl(double t, const VectorXd& x, VectorXd& out) const override;

private:
    ScenarioField which_;
};

/// Velocity of the transformed coupling in terms of the original field:
///   both:   v'(t,x) = A v(t, A^{-1}(x - b))
///   shift1: v'(t,x) = v(t, x - t b) + b
///   scale1: v'(t,x) = c/(1-t+tc) v(r, x/(1-t+tc)) + (c-1)/(1-t+tc) x,
///           r = t c / (1-t+tc); the time domain is pulled back through r.
FieldPtr affine_wrap(FieldPtr field, const AffineMode& mode);

/// Ad-hoc field from a callable; used for custom drifts and tests.
class FunctionField : public VelocityField {
public:
    using Fn = std::function<VectorXd(double, const VectorXd&)>;
    FunctionField(Index dim, Fn fn, double t_min = 0.0, double t_max = 1.0,
                  bool t_max_inclusive = true, std::vector<double> singular = {});

protected:
    bool eval_impl(double t, const VectorXd& x, VectorXd& out) const override;

private:
    Fn fn_;
};

struct JacobianSymmetryReport {
    bool is_gradient_like;
    double max_asymmetry;
};

/// Central-difference Jacobian at each point; reports the largest absolute
/// entry of J - J^T over all points. A symmetric Jacobian is the marker of a
/// gradient field.
JacobianSymmetryReport jacobian_symmetry_check(const VelocityField& field, double t,
                                               const ParticleSet& points, double h,
                                               double tol);

// Spec-level conveniences (one-shot evaluations).
VectorXd gaussian_velocity(const GaussianJointCoupling& coupling, double t,
                           const VectorXd& x);
VectorXd gmm_velocity(const GmmJointCoupling& coupling, double t, const VectorXd& x);
VectorXd kernel_velocity(const ParticleCoupling& coupling, double bandwidth, double t,
                         const VectorXd& x);
VectorXd scenario_velocity(ScenarioField which, double t, const VectorXd& x);

} // namespace rectiflow
