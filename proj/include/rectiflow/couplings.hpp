#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "rectiflow/distributions.hpp"

namespace rectiflow {

/// Paired samples (row i of x0 goes with row i of x1). Pair order is
/// positional and never reordered implicitly.
class ParticleCoupling {
public:
    ParticleCoupling() = default;
    ParticleCoupling(MatrixXd x0, MatrixXd x1);

    const MatrixXd& x0() const { return x0_; }
    const MatrixXd& x1() const { return x1_; }
    Index size() const { return x0_.rows(); }
    Index dim() const { return x0_.cols(); }

private:
    MatrixXd x0_, x1_;
};

/// Block mean/covariance description of a jointly Gaussian pair (X0, X1).
/// sigma01 = Cov(X1, X0); the joint covariance is [[S0, S01^T], [S01, S1]].
struct GaussianJointBlocks {
    VectorXd mean0, mean1;
    MatrixXd sigma0, sigma1, sigma01;

    Index dim() const { return mean0.size(); }
    MatrixXd joint() const;
};

class GaussianJointCoupling {
public:
    GaussianJointCoupling(VectorXd mean0, VectorXd mean1, MatrixXd sigma0,
                          MatrixXd sigma1, MatrixXd sigma01);

    static GaussianJointCoupling independent(const GaussianDist& g0,
                                             const GaussianDist& g1);

    const GaussianJointBlocks& blocks() const { return blocks_; }
    const VectorXd& mean0() const { return blocks_.mean0; }
    const VectorXd& mean1() const { return blocks_.mean1; }
    const MatrixXd& sigma0() const { return blocks_.sigma0; }
    const MatrixXd& sigma1() const { return blocks_.sigma1; }
    const MatrixXd& sigma01() const { return blocks_.sigma01; }
    Index dim() const { return blocks_.dim(); }

    GaussianDist marginal0() const { return {blocks_.mean0, blocks_.sigma0}; }
    GaussianDist marginal1() const { return {blocks_.mean1, blocks_.sigma1}; }

    ParticleCoupling to_particles(Index n, Seed seed) const;

private:
    GaussianJointBlocks blocks_;
};

/// Mixture of jointly Gaussian components. Component marginal blocks may be
/// degenerate (PSD only), e.g. point-mass targets.
struct GmmJointComponent {
    double weight;
    GaussianJointBlocks blocks;
};

class GmmJointCoupling {
public:
    explicit GmmJointCoupling(std::vector<GmmJointComponent> components);

    /// Independent coupling mu0 (x) mu1 for a Gaussian mu0 and GMM mu1.
    static GmmJointCoupling independent(const GaussianDist& g0, const GmmDist& g1);

    const std::vector<GmmJointComponent>& components() const { return components_; }
    Index dim() const { return components_.front().blocks.dim(); }
    Index size() const { return static_cast<Index>(components_.size()); }

    ParticleCoupling to_particles(Index n, Seed seed) const;

private:
    std::vector<GmmJointComponent> components_;
};

/// Coupling given as X1 = T(X0) for a deterministic map T and a sampler for
/// the source marginal.
struct MapCoupling {
    std::function<ParticleSet(Index, Seed)> source;
    std::function<VectorXd(const VectorXd&)> map;

    ParticleCoupling to_particles(Index n, Seed seed) const;
};

/// Linear interpolation X_t = (1-t) X0 + t X1, optionally with the noisy
/// variant X_t + sqrt(eps t (1-t)) Z.
ParticleSet interpolate(const ParticleCoupling& coupling, double t,
                        double noise_eps = 0.0, Seed seed = 0);

/// Exact law of X_t for a jointly Gaussian coupling:
/// cov_t = (1-t)^2 S0 + t(1-t)(S01 + S01^T) + t^2 S1.
struct GaussianLaw {
    VectorXd mean;
    MatrixXd cov;
};
GaussianLaw interp_cov(const GaussianJointCoupling& coupling, double t);
GaussianLaw interp_cov(const GaussianJointBlocks& blocks, double t,
                       double noise_eps = 0.0);

/// Affine modes: (A X0 + b, A X1 + b), (X0, X1 + b), (X0, c X1).
struct AffineBoth {
    MatrixXd a;
    VectorXd b;
};
struct AffineShift1 {
    VectorXd b;
};
struct AffineScale1 {
    double c;
};
using AffineMode = std::variant<AffineBoth, AffineShift1, AffineScale1>;

ParticleCoupling affine_transform(const ParticleCoupling& coupling,
                                  const AffineMode& mode);
GaussianJointCoupling affine_transform(const GaussianJointCoupling& coupling,
                                       const AffineMode& mode);

enum class SmoothVariant {
    additive,            // x0 + c W
    variance_preserving, // sqrt(1-c) x0 + sqrt(c) W
};

/// Perturbs the x0 rows with fresh standard normal noise; x1 is untouched.
ParticleCoupling smooth_coupling(const ParticleCoupling& coupling, double c,
                                 SmoothVariant variant, Seed seed);

/// Text format: header "rectiflow-particles v1 n=<n> d=<d>", then n CSV rows
/// of x0 followed by n CSV rows of x1, full precision.
void save_particle_coupling(std::ostream& out, const ParticleCoupling& coupling);
void save_particle_coupling(const std::string& path, const ParticleCoupling& coupling);
ParticleCoupling load_particle_coupling(std::istream& in);
ParticleCoupling load_particle_coupling(const std::string& path);

} // namespace rectiflow
