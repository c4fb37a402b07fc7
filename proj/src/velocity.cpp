#include "rectiflow/velocity.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>

#include "rectiflow/parallel.hpp"

namespace rectiflow {

VelocityField::VelocityField(Index dim, double t_min, double t_max,
                             bool t_max_inclusive, std::vector<double> singular_times)
    : singular_times_(std::move(singular_times)),
      dim_(dim),
      t_min_(t_min),
      t_max_(t_max),
      t_max_inclusive_(t_max_inclusive) {
    std::sort(singular_times_.begin(), singular_times_.end());
}

bool VelocityField::time_valid(double t, double tol) const {
    if (t < t_min_ || t > t_max_) return false;
    if (!t_max_inclusive_ && t >= t_max_) return false;
    for (double s : singular_times_)
        if (std::abs(t - s) <= tol) return false;
    return true;
}

void VelocityField::check_time(double t) const {
    if (!time_valid(t))
        throw SingularTimeError("velocity field undefined at t=" + std::to_string(t), t);
}

VectorXd VelocityField::operator()(double t, const VectorXd& x) const {
    check_time(t);
    VectorXd out(dim_);
    eval_impl(t, x, out);
    return out;
}

bool VelocityField::try_eval(double t, const VectorXd& x, VectorXd& out) const {
    check_time(t);
    out.resize(dim_);
    return eval_impl(t, x, out);
}

void VelocityField::eval_batch(double t, const MatrixXd& points, MatrixXd& out,
                               BatchEvalStats* stats) const {
    check_time(t);
    out.resize(points.rows(), dim_);
    std::vector<Index> misses(static_cast<std::size_t>(chunk_count(points.rows())), 0);
    parallel_for(chunk_count(points.rows()), [&](Index c) {
        const Index lo = c * kChunkRows;
        const Index hi = std::min(points.rows(), lo + kChunkRows);
        VectorXd v(dim_);
        Index miss = 0;
        for (Index i = lo; i < hi; ++i) {
            if (!eval_impl(t, points.row(i).transpose(), v)) ++miss;
            out.row(i) = v.transpose();
        }
        misses[static_cast<std::size_t>(c)] = miss;
    });
    if (stats)
        for (Index m : misses) stats->out_of_support += m;
}

namespace {

struct LawEig {
    GaussianLaw law;
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig;
};

// S_t eigensystem with the degeneracy guard: the smallest eigenvalue must
// clear max(lambda_max, scale * 1e-8) / cond_limit.
LawEig law_at(const GaussianJointBlocks& blocks, double t, double noise_eps,
              double scale, double cond_limit) {
    LawEig r{interp_cov(blocks, t, noise_eps), {}};
    r.eig.compute(r.law.cov);
    if (r.eig.info() != Eigen::Success)
        throw SingularCovarianceError("interpolant covariance: eigendecomposition failed",
                                      t);
    const double lmax = r.eig.eigenvalues().maxCoeff();
    const double lmin = r.eig.eigenvalues().minCoeff();
    if (lmin < std::max(lmax, scale * 1e-8) / cond_limit)
        throw SingularCovarianceError(
            "interpolant covariance numerically singular at t=" + std::to_string(t), t);
    return r;
}

MatrixXd field_matrix(const GaussianJointBlocks& blocks, double t, const LawEig& le) {
    const Index d = blocks.dim();
    const MatrixXd num = (1.0 - t) * blocks.sigma01 + t * blocks.sigma1;
    const MatrixXd inv = le.eig.eigenvectors() *
                         le.eig.eigenvalues().cwiseInverse().asDiagonal() *
                         le.eig.eigenvectors().transpose();
    return (num * inv - MatrixXd::Identity(d, d)) / (1.0 - t);
}

double block_scale(const GaussianJointBlocks& b) {
    return std::max({1.0, b.sigma0.cwiseAbs().maxCoeff(), b.sigma1.cwiseAbs().maxCoeff(),
                     b.sigma01.cwiseAbs().maxCoeff()});
}

// Locates interior times where the interpolant covariance degenerates, by a
// grid scan of the smallest eigenvalue followed by ternary refinement.
std::vector<double> scan_singular_times(
    const std::function<double(double)>& min_eig, double threshold, double t_hi) {
    constexpr int kGrid = 2048;
    std::vector<double> found;
    double prev_t = 0.0;
    double prev_v = min_eig(0.0);
    for (int i = 1; i <= kGrid; ++i) {
        const double t = t_hi * static_cast<double>(i) / kGrid;
        const double v = min_eig(t);
        // Refine any interval that dips toward zero.
        if (std::min(v, prev_v) < std::max(1e4 * threshold, 1e-6)) {
            double a = prev_t, b = t;
            for (int it = 0; it < 200; ++it) {
                const double m1 = a + (b - a) / 3.0;
                const double m2 = b - (b - a) / 3.0;
                if (min_eig(m1) < min_eig(m2))
                    b = m2;
                else
                    a = m1;
            }
            const double tm = 0.5 * (a + b);
            if (min_eig(tm) < threshold &&
                (found.empty() || std::abs(found.back() - tm) > 1e-9))
                found.push_back(tm);
        }
        prev_t = t;
        prev_v = v;
    }
    return found;
}

std::vector<double> gaussian_singular_times(const GaussianJointBlocks& blocks,
                                            double noise_eps, double scale,
                                            double cond_limit) {
    // Matches the evaluation guard: singular when lmin < max(lmax, s*1e-8)/limit.
    const auto guarded = [&](double t) {
        Eigen::SelfAdjointEigenSolver<MatrixXd> eig(interp_cov(blocks, t, noise_eps).cov);
        const double lmax = eig.eigenvalues().maxCoeff();
        return eig.eigenvalues().minCoeff() - std::max(lmax, scale * 1e-8) / cond_limit;
    };
    return scan_singular_times(guarded, 0.0, 1.0 - 1e-9);
}

} // namespace

GaussianVelocityField::GaussianVelocityField(GaussianJointBlocks blocks,
                                             double noise_eps, double cond_limit)
    : VelocityField(blocks.dim(), 0.0, 1.0, false, {}),
      blocks_(std::move(blocks)),
      noise_eps_(noise_eps),
      cond_limit_(cond_limit),
      scale_(block_scale(blocks_)) {
    singular_times_ = gaussian_singular_times(blocks_, noise_eps_, scale_, cond_limit_);
}

GaussianVelocityField::GaussianVelocityField(const GaussianJointCoupling& coupling,
                                             double noise_eps, double cond_limit)
    : GaussianVelocityField(coupling.blocks(), noise_eps, cond_limit) {}

GaussianVelocityField::AffineForm GaussianVelocityField::affine_form(double t) const {
    const LawEig le = law_at(blocks_, t, noise_eps_, scale_, cond_limit_);
    return {field_matrix(blocks_, t, le), le.law.mean, blocks_.mean1 - blocks_.mean0};
}

bool GaussianVelocityField::eval_impl(double t, const VectorXd& x, VectorXd& out) const {
    const AffineForm f = affine_form(t);
    out = f.matrix * (x - f.center) + f.offset;
    return true;
}

void GaussianVelocityField::eval_batch(double t, const MatrixXd& points, MatrixXd& out,
                                       BatchEvalStats* stats) const {
    check_time(t);
    const AffineForm f = affine_form(t);
    out = (points.rowwise() - f.center.transpose()) * f.matrix.transpose();
    out.rowwise() += f.offset.transpose();
    (void)stats;
}

GmmVelocityField::GmmVelocityField(std::vector<GmmJointComponent> components,
                                   double noise_eps, double cond_limit)
    : VelocityField(components.front().blocks.dim(), 0.0, 1.0, false, {}),
      components_(std::move(components)),
      noise_eps_(noise_eps),
      cond_limit_(cond_limit) {
    scale_ = 1.0;
    for (const auto& c : components_) scale_ = std::max(scale_, block_scale(c.blocks));
    for (const auto& c : components_) {
        auto ts = gaussian_singular_times(c.blocks, noise_eps_, scale_, cond_limit_);
        singular_times_.insert(singular_times_.end(), ts.begin(), ts.end());
    }
    std::sort(singular_times_.begin(), singular_times_.end());
}

GmmVelocityField::GmmVelocityField(const GmmJointCoupling& coupling, double noise_eps,
                                   double cond_limit)
    : GmmVelocityField(coupling.components(), noise_eps, cond_limit) {}

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double log_density_from_eig(const LawEig& le, const VectorXd& x) {
    const VectorXd w = le.eig.eigenvectors().transpose() * (x - le.law.mean);
    double quad = 0.0, log_det = 0.0;
    for (Index i = 0; i < w.size(); ++i) {
        quad += w[i] * w[i] / le.eig.eigenvalues()[i];
        log_det += std::log(le.eig.eigenvalues()[i]);
    }
    return -0.5 * (quad + log_det + kLog2Pi * static_cast<double>(x.size()));
}

} // namespace

VectorXd GmmVelocityField::weights(double t, const VectorXd& x) const {
    const Index k = static_cast<Index>(components_.size());
    VectorXd logs(k);
    for (Index j = 0; j < k; ++j) {
        const auto& c = components_[static_cast<std::size_t>(j)];
        const LawEig le = law_at(c.blocks, t, noise_eps_, scale_, cond_limit_);
        logs[j] = std::log(c.weight) + log_density_from_eig(le, x);
    }
    const double m = logs.maxCoeff();
    if (!std::isfinite(m))
        throw OutOfSupportError("gmm velocity: all component likelihoods vanished at t=" +
                                    std::to_string(t),
                                t, x);
    VectorXd w = (logs.array() - m).exp();
    return w / w.sum();
}

bool GmmVelocityField::eval_impl(double t, const VectorXd& x, VectorXd& out) const {
    const Index k = static_cast<Index>(components_.size());
    VectorXd logs(k);
    MatrixXd fields(dim(), k);
    for (Index j = 0; j < k; ++j) {
        const auto& c = components_[static_cast<std::size_t>(j)];
        const LawEig le = law_at(c.blocks, t, noise_eps_, scale_, cond_limit_);
        logs[j] = std::log(c.weight) + log_density_from_eig(le, x);
        const MatrixXd m = field_matrix(c.blocks, t, le);
        fields.col(j) =
            m * (x - le.law.mean) + (c.blocks.mean1 - c.blocks.mean0);
    }
    const double mx = logs.maxCoeff();
    if (!std::isfinite(mx))
        throw OutOfSupportError("gmm velocity: all component likelihoods vanished at t=" +
                                    std::to_string(t),
                                t, x);
    const VectorXd w = (logs.array() - mx).exp();
    out = (fields * w) / w.sum();
    return true;
}

ScenarioVelocityField::ScenarioVelocityField(ScenarioField which, Index dim)
    : VelocityField(dim, 0.0, 1.0, true,
                    which == ScenarioField::antipodal ? std::vector<double>{0.5}
                                                      : std::vector<double>{}),
      which_(which) {
    if (which != ScenarioField::antipodal && dim != 2)
        throw InvalidArgumentError("scenario field: this scenario is two-dimensional");
}

bool ScenarioVelocityField::eval_impl(double t, const VectorXd& x, VectorXd& out) const {
    switch (which_) {
        case ScenarioField::disconnected_opt:
            if (x[0] < -1.0)
                out << 0.0, -2.0;
            else if (x[0] > 1.0)
                out << 0.0, 2.0;
            else
                throw OutOfSupportError("disconnected-opt field: query in the gap", t, x);
            return true;
        case ScenarioField::disconnected_nonopt:
            if (x[1] < -0.5)
                out << -4.0, 0.0;
            else if (x[1] > 0.5)
                out << 4.0, 0.0;
            else
                throw OutOfSupportError("disconnected-nonopt field: query in the gap", t,
                                        x);
            return true;
        case ScenarioField::gauss_latent_fp:
            if (x[0] < -t)
                out << -2.0, 2.0;
            else if (x[0] > t)
                out << 2.0, -2.0;
            else
                throw OutOfSupportError("gauss-latent-fp field: query in the gap", t, x);
            return true;
        case ScenarioField::antipodal:
            out = (-2.0 / (1.0 - 2.0 * t)) * x;
            return true;
    }
    return false;
}

namespace {

class AffineWrappedField : public VelocityField {
public:
    AffineWrappedField(FieldPtr inner, AffineMode mode)
        : VelocityField(inner->dim(), inner->t_min(), inner->t_max(),
                        inner->t_max_inclusive(), {}),
          inner_(std::move(inner)),
          mode_(std::move(mode)) {
        if (const auto* m = std::get_if<AffineBoth>(&mode_)) {
            Eigen::FullPivLU<MatrixXd> lu(m->a);
            if (!lu.isInvertible())
                throw InvalidArgumentError("affine_wrap both: matrix A is singular");
            a_inv_ = lu.inverse();
            singular_times_ = inner_->singular_times();
        } else if (std::holds_alternative<AffineShift1>(mode_)) {
            singular_times_ = inner_->singular_times();
        } else {
            const double c = std::get<AffineScale1>(mode_).c;
            if (c <= 0.0)
                throw InvalidArgumentError("affine_wrap scale1: c must be > 0");
            // r = tc/(1-t+tc) maps [0,1] monotonically onto [0,1]; pull the
            // inner singular set back through its inverse.
            for (double s : inner_->singular_times())
                singular_times_.push_back(s / (c + s * (1.0 - c)));
            std::sort(singular_times_.begin(), singular_times_.end());
        }
    }

protected:
    bool eval_impl(double t, const VectorXd& x, VectorXd& out) const override {
        if (const auto* m = std::get_if<AffineBoth>(&mode_)) {
            VectorXd inner_out(dim());
            const bool ok = inner_->try_eval(t, a_inv_ * (x - m->b), inner_out);
            out = m->a * inner_out;
            return ok;
        }
        if (const auto* m = std::get_if<AffineShift1>(&mode_)) {
            VectorXd inner_out(dim());
            const bool ok = inner_->try_eval(t, x - t * m->b, inner_out);
            out = inner_out + m->b;
            return ok;
        }
        const double c = std::get<AffineScale1>(mode_).c;
        const double den = 1.0 - t + t * c;
        const double r = t * c / den;
        VectorXd inner_out(dim());
        const bool ok = inner_->try_eval(r, x / den, inner_out);
        out = (c / den) * inner_out + ((c - 1.0) / den) * x;
        return ok;
    }

private:
    FieldPtr inner_;
    AffineMode mode_;
    MatrixXd a_inv_;
};

} // namespace

FieldPtr affine_wrap(FieldPtr field, const AffineMode& mode) {
    return std::make_shared<AffineWrappedField>(std::move(field), mode);
}

FunctionField::FunctionField(Index dim, Fn fn, double t_min, double t_max,
                             bool t_max_inclusive, std::vector<double> singular)
    : VelocityField(dim, t_min, t_max, t_max_inclusive, std::move(singular)),
      fn_(std::move(fn)) {}

bool FunctionField::eval_impl(double t, const VectorXd& x, VectorXd& out) const {
    out = fn_(t, x);
    return true;
}

JacobianSymmetryReport jacobian_symmetry_check(const VelocityField& field, double t,
                                               const ParticleSet& points, double h,
                                               double tol) {
    const Index d = field.dim();
    const Index n = points.size();
    std::vector<double> worst(static_cast<std::size_t>(chunk_count(n)), 0.0);
    parallel_for(chunk_count(n), [&](Index c) {
        const Index lo = c * kChunkRows;
        const Index hi = std::min(n, lo + kChunkRows);
        MatrixXd jac(d, d);
        double w = 0.0;
        for (Index i = lo; i < hi; ++i) {
            const VectorXd x = points.points().row(i).transpose();
            try {
                for (Index j = 0; j < d; ++j) {
                    VectorXd xp = x, xm = x;
                    xp[j] += h;
                    xm[j] -= h;
                    jac.col(j) = (field(t, xp) - field(t, xm)) / (2.0 * h);
                }
            } catch (const Error& e) {
                throw InvalidArgumentError("jacobian_symmetry_check: evaluation failed at point " +
                                           std::to_string(i) + ": " + e.what());
            }
            w = std::max(w, (jac - jac.transpose()).cwiseAbs().maxCoeff());
        }
        worst[static_cast<std::size_t>(c)] = w;
    });
    double max_asym = 0.0;
    for (double w : worst) max_asym = std::max(max_asym, w);
    return {max_asym <= tol, max_asym};
}

VectorXd gaussian_velocity(const GaussianJointCoupling& coupling, double t,
                           const VectorXd& x) {
    return GaussianVelocityField(coupling)(t, x);
}

VectorXd gmm_velocity(const GmmJointCoupling& coupling, double t, const VectorXd& x) {
    return GmmVelocityField(coupling)(t, x);
}

VectorXd kernel_velocity(const ParticleCoupling& coupling, double bandwidth, double t,
                         const VectorXd& x) {
    return KernelVelocityField(coupling, bandwidth)(t, x);
}

VectorXd scenario_velocity(ScenarioField which, double t, const VectorXd& x) {
    return ScenarioVelocityField(which, x.size())(t, x);
}

} // namespace rectiflow
