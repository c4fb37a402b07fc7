#pragma once

#include <vector>

#include "rectiflow/common.hpp"

namespace rectiflow {

/// Multivariate Gaussian with a (possibly degenerate) PSD covariance.
class GaussianDist {
public:
    GaussianDist(VectorXd mean, MatrixXd cov);

    static GaussianDist standard(Index d);
    static GaussianDist isotropic(Index d, double variance);

    const VectorXd& mean() const { return mean_; }
    const MatrixXd& cov() const { return cov_; }
    Index dim() const { return mean_.size(); }

    /// log N(x; mean, cov). Requires strictly positive definite covariance.
    double log_density(const VectorXd& x) const;

private:
    VectorXd mean_;
    MatrixXd cov_;
};

struct GmmComponent {
    double weight;
    GaussianDist dist;
};

/// Finite Gaussian mixture. Weights sum to one; components share a dimension.
class GmmDist {
public:
    explicit GmmDist(std::vector<GmmComponent> components);

    const std::vector<GmmComponent>& components() const { return components_; }
    Index dim() const { return components_.front().dist.dim(); }
    Index size() const { return static_cast<Index>(components_.size()); }

private:
    std::vector<GmmComponent> components_;
};

/// n points in R^d, one per row. The Monte-Carlo carrier used everywhere.
class ParticleSet {
public:
    ParticleSet() = default;
    explicit ParticleSet(MatrixXd points);

    const MatrixXd& points() const { return points_; }
    MatrixXd& points() { return points_; }
    Index size() const { return points_.rows(); }
    Index dim() const { return points_.cols(); }

    VectorXd mean() const;
    MatrixXd sample_cov() const;

private:
    MatrixXd points_;
};

/// Symmetric PSD square root via eigendecomposition. Eigenvalues in
/// [-1e-10 * scale, 0) are clamped to zero; anything lower is an error.
MatrixXd matrix_sqrt_psd(const MatrixXd& m);

/// Throws InvalidMatrixError unless m is symmetric PSD up to the stated
/// tolerances. Returns the clamped eigenvalues and eigenvectors.
struct PsdFactor {
    MatrixXd vectors;
    VectorXd values; // clamped, non-negative
};
PsdFactor psd_factor(const MatrixXd& m, const char* what);

/// n i.i.d. draws; bitwise-deterministic given (dist, n, seed) regardless of
/// the thread count (rows are generated in fixed 1024-row stream chunks).
ParticleSet gaussian_sample(const GaussianDist& dist, Index n, Seed seed);

/// log sum_k pi_k N(x; m_k, S_k), accumulated with max-subtraction.
double gmm_log_density(const GmmDist& dist, const VectorXd& x);

/// Gradient of gmm_log_density in x (analytic, softmax-weighted).
VectorXd gmm_log_density_grad(const GmmDist& dist, const VectorXd& x);

namespace serial {
/// Reference sampler: same chunked streams, no worker pool.
ParticleSet gaussian_sample(const GaussianDist& dist, Index n, Seed seed);
} // namespace serial

} // namespace rectiflow
