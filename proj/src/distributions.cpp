#include "rectiflow/distributions.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <cmath>

#include "rectiflow/parallel.hpp"
#include "rectiflow/rng.hpp"

namespace rectiflow {

namespace {

constexpr double kSymTol = 1e-12;
constexpr double kEigTol = 1e-10;
constexpr double kLog2Pi = 1.8378770664093454835606594728112;

void check_symmetric(const MatrixXd& m, const char* what) {
    if (m.rows() != m.cols())
        throw InvalidMatrixError(std::string(what) + ": matrix is not square");
    const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > kSymTol * scale)
        throw InvalidMatrixError(std::string(what) + ": matrix is not symmetric");
}

} // namespace

PsdFactor psd_factor(const MatrixXd& m, const char* what) {
    check_symmetric(m, what);
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(m);
    if (eig.info() != Eigen::Success)
        throw InvalidMatrixError(std::string(what) + ": eigendecomposition failed");
    VectorXd values = eig.eigenvalues();
    const double scale = std::max(1.0, values.cwiseAbs().maxCoeff());
    for (Index i = 0; i < values.size(); ++i) {
        if (values[i] < -kEigTol * scale)
            throw InvalidMatrixError(std::string(what) +
                                     ": matrix has a negative eigenvalue " +
                                     std::to_string(values[i]));
        if (values[i] < 0.0) values[i] = 0.0;
    }
    return {eig.eigenvectors(), std::move(values)};
}

MatrixXd matrix_sqrt_psd(const MatrixXd& m) {
    const PsdFactor f = psd_factor(m, "matrix_sqrt_psd");
    MatrixXd s = f.vectors * f.values.cwiseSqrt().asDiagonal() * f.vectors.transpose();
    return 0.5 * (s + s.transpose());
}

GaussianDist::GaussianDist(VectorXd mean, MatrixXd cov)
    : mean_(std::move(mean)), cov_(std::move(cov)) {
    if (cov_.rows() != mean_.size() || cov_.cols() != mean_.size())
        throw InvalidDistributionError("GaussianDist: mean/covariance size mismatch");
    psd_factor(cov_, "GaussianDist covariance");
}

GaussianDist GaussianDist::standard(Index d) {
    return GaussianDist(VectorXd::Zero(d), MatrixXd::Identity(d, d));
}

GaussianDist GaussianDist::isotropic(Index d, double variance) {
    return GaussianDist(VectorXd::Zero(d), variance * MatrixXd::Identity(d, d));
}

double GaussianDist::log_density(const VectorXd& x) const {
    Eigen::LLT<MatrixXd> llt(cov_);
    if (llt.info() != Eigen::Success)
        throw InvalidDistributionError("GaussianDist: singular covariance in log_density");
    const VectorXd r = x - mean_;
    const VectorXd w = llt.matrixL().solve(r);
    double log_det = 0.0;
    for (Index i = 0; i < cov_.rows(); ++i)
        log_det += 2.0 * std::log(llt.matrixL()(i, i));
    return -0.5 * (w.squaredNorm() + log_det + kLog2Pi * static_cast<double>(dim()));
}

GmmDist::GmmDist(std::vector<GmmComponent> components)
    : components_(std::move(components)) {
    if (components_.empty())
        throw InvalidDistributionError("GmmDist: no components");
    const Index d = components_.front().dist.dim();
    double total = 0.0;
    for (const auto& c : components_) {
        if (c.weight <= 0.0 || c.weight > 1.0)
            throw InvalidDistributionError("GmmDist: weight outside (0, 1]");
        if (c.dist.dim() != d)
            throw InvalidDistributionError("GmmDist: components disagree on dimension");
        total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-12)
        throw InvalidDistributionError("GmmDist: weights sum to " + std::to_string(total));
}

ParticleSet::ParticleSet(MatrixXd points) : points_(std::move(points)) {
    if (!points_.allFinite())
        throw InvalidArgumentError("ParticleSet: non-finite entries");
}

VectorXd ParticleSet::mean() const { return points_.colwise().mean(); }

MatrixXd ParticleSet::sample_cov() const {
    const Index n = size();
    if (n < 2) return MatrixXd::Zero(dim(), dim());
    const MatrixXd centered = points_.rowwise() - points_.colwise().mean();
    return centered.transpose() * centered / static_cast<double>(n - 1);
}

namespace {

// One stream per kChunkRows rows; row i consumes d normals from stream
// i / kChunkRows in order. Shared by the serial and parallel samplers.
void sample_chunk(const VectorXd& mean, const MatrixXd& factor, Index lo, Index hi,
                  Seed seed, MatrixXd& out) {
    const Index d = mean.size();
    Philox gen(seed, static_cast<std::uint64_t>(lo / kChunkRows));
    VectorXd z(d);
    for (Index i = lo; i < hi; ++i) {
        for (Index j = 0; j < d; ++j) z[j] = gen.normal();
        out.row(i) = (mean + factor * z).transpose();
    }
}

MatrixXd sampling_factor(const GaussianDist& dist) {
    const PsdFactor f = psd_factor(dist.cov(), "gaussian_sample covariance");
    return f.vectors * f.values.cwiseSqrt().asDiagonal() * f.vectors.transpose();
}

} // namespace

ParticleSet gaussian_sample(const GaussianDist& dist, Index n, Seed seed) {
    if (n < 1) throw InvalidArgumentError("gaussian_sample: n must be >= 1");
    const MatrixXd factor = sampling_factor(dist);
    MatrixXd out(n, dist.dim());
    parallel_for(chunk_count(n), [&](Index c) {
        const Index lo = c * kChunkRows;
        sample_chunk(dist.mean(), factor, lo, std::min(n, lo + kChunkRows), seed, out);
    });
    return ParticleSet(std::move(out));
}

namespace serial {

ParticleSet gaussian_sample(const GaussianDist& dist, Index n, Seed seed) {
    if (n < 1) throw InvalidArgumentError("gaussian_sample: n must be >= 1");
    const MatrixXd factor = sampling_factor(dist);
    MatrixXd out(n, dist.dim());
    for (Index c = 0; c < chunk_count(n); ++c) {
        const Index lo = c * kChunkRows;
        sample_chunk(dist.mean(), factor, lo, std::min(n, lo + kChunkRows), seed, out);
    }
    return ParticleSet(std::move(out));
}

} // namespace serial

double gmm_log_density(const GmmDist& dist, const VectorXd& x) {
    const auto& comps = dist.components();
    VectorXd logs(dist.size());
    for (Index k = 0; k < dist.size(); ++k) {
        const auto& c = comps[static_cast<std::size_t>(k)];
        logs[k] = std::log(c.weight) + c.dist.log_density(x);
    }
    const double m = logs.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((logs.array() - m).exp().sum());
}

VectorXd gmm_log_density_grad(const GmmDist& dist, const VectorXd& x) {
    const auto& comps = dist.components();
    VectorXd logs(dist.size());
    MatrixXd grads(x.size(), dist.size());
    for (Index k = 0; k < dist.size(); ++k) {
        const auto& c = comps[static_cast<std::size_t>(k)];
        logs[k] = std::log(c.weight) + c.dist.log_density(x);
        // grad log N = -Sigma^{-1} (x - m)
        Eigen::LLT<MatrixXd> llt(c.dist.cov());
        if (llt.info() != Eigen::Success)
            throw InvalidDistributionError("gmm_log_density_grad: singular component");
        grads.col(k) = -llt.solve(x - c.dist.mean());
    }
    const double m = logs.maxCoeff();
    const VectorXd w = (logs.array() - m).exp();
    return (grads * w) / w.sum();
}

} // namespace rectiflow
