#include "rectiflow/couplings.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <fstream>
#include <sstream>

#include "rectiflow/parallel.hpp"
#include "rectiflow/rng.hpp"

namespace rectiflow {

namespace {

void check_strict_pd(const MatrixXd& m, const char* what) {
    Eigen::LLT<MatrixXd> llt(m);
    if (llt.info() != Eigen::Success)
        throw InvalidDistributionError(std::string(what) + ": matrix is not positive definite");
}

void check_joint_psd(const GaussianJointBlocks& b, const char* what) {
    if (b.mean1.size() != b.dim() || b.sigma0.rows() != b.dim() ||
        b.sigma1.rows() != b.dim() || b.sigma01.rows() != b.dim() ||
        b.sigma0.cols() != b.dim() || b.sigma1.cols() != b.dim() ||
        b.sigma01.cols() != b.dim())
        throw InvalidDistributionError(std::string(what) + ": block size mismatch");
    psd_factor(b.joint(), what);
}

} // namespace

ParticleCoupling::ParticleCoupling(MatrixXd x0, MatrixXd x1)
    : x0_(std::move(x0)), x1_(std::move(x1)) {
    if (x0_.rows() != x1_.rows() || x0_.cols() != x1_.cols())
        throw InvalidArgumentError("ParticleCoupling: x0/x1 shape mismatch");
    if (!x0_.allFinite() || !x1_.allFinite())
        throw InvalidArgumentError("ParticleCoupling: non-finite entries");
}

MatrixXd GaussianJointBlocks::joint() const {
    const Index d = dim();
    MatrixXd j(2 * d, 2 * d);
    j.topLeftCorner(d, d) = sigma0;
    j.topRightCorner(d, d) = sigma01.transpose();
    j.bottomLeftCorner(d, d) = sigma01;
    j.bottomRightCorner(d, d) = sigma1;
    return j;
}

GaussianJointCoupling::GaussianJointCoupling(VectorXd mean0, VectorXd mean1,
                                             MatrixXd sigma0, MatrixXd sigma1,
                                             MatrixXd sigma01)
    : blocks_{std::move(mean0), std::move(mean1), std::move(sigma0),
              std::move(sigma1), std::move(sigma01)} {
    check_joint_psd(blocks_, "GaussianJointCoupling");
    check_strict_pd(blocks_.sigma0, "GaussianJointCoupling sigma0");
    check_strict_pd(blocks_.sigma1, "GaussianJointCoupling sigma1");
}

GaussianJointCoupling GaussianJointCoupling::independent(const GaussianDist& g0,
                                                         const GaussianDist& g1) {
    if (g0.dim() != g1.dim())
        throw InvalidArgumentError("independent coupling: dimension mismatch");
    return {g0.mean(), g1.mean(), g0.cov(), g1.cov(),
            MatrixXd::Zero(g0.dim(), g0.dim())};
}

namespace {

MatrixXd joint_factor(const GaussianJointBlocks& blocks, const char* what) {
    const PsdFactor f = psd_factor(blocks.joint(), what);
    return f.vectors * f.values.cwiseSqrt().asDiagonal() * f.vectors.transpose();
}

// Draws rows [lo, hi) of a jointly Gaussian coupling from stream lo/kChunkRows.
void joint_chunk(const GaussianJointBlocks& blocks, const MatrixXd& factor, Index lo,
                 Index hi, Seed seed, MatrixXd& x0, MatrixXd& x1) {
    const Index d = blocks.dim();
    Philox gen(seed, static_cast<std::uint64_t>(lo / kChunkRows));
    VectorXd z(2 * d);
    for (Index i = lo; i < hi; ++i) {
        for (Index j = 0; j < 2 * d; ++j) z[j] = gen.normal();
        const VectorXd xy = factor * z;
        x0.row(i) = (blocks.mean0 + xy.head(d)).transpose();
        x1.row(i) = (blocks.mean1 + xy.tail(d)).transpose();
    }
}

} // namespace

ParticleCoupling GaussianJointCoupling::to_particles(Index n, Seed seed) const {
    if (n < 1) throw InvalidArgumentError("to_particles: n must be >= 1");
    const MatrixXd factor = joint_factor(blocks_, "GaussianJointCoupling joint");
    MatrixXd x0(n, dim()), x1(n, dim());
    parallel_for(chunk_count(n), [&](Index c) {
        const Index lo = c * kChunkRows;
        joint_chunk(blocks_, factor, lo, std::min(n, lo + kChunkRows), seed, x0, x1);
    });
    return {std::move(x0), std::move(x1)};
}

GmmJointCoupling::GmmJointCoupling(std::vector<GmmJointComponent> components)
    : components_(std::move(components)) {
    if (components_.empty())
        throw InvalidDistributionError("GmmJointCoupling: no components");
    const Index d = components_.front().blocks.dim();
    double total = 0.0;
    for (const auto& c : components_) {
        if (c.weight <= 0.0 || c.weight > 1.0)
            throw InvalidDistributionError("GmmJointCoupling: weight outside (0, 1]");
        if (c.blocks.dim() != d)
            throw InvalidDistributionError("GmmJointCoupling: dimension mismatch");
        check_joint_psd(c.blocks, "GmmJointCoupling component");
        total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-12)
        throw InvalidDistributionError("GmmJointCoupling: weights sum to " +
                                       std::to_string(total));
}

GmmJointCoupling GmmJointCoupling::independent(const GaussianDist& g0,
                                               const GmmDist& g1) {
    if (g0.dim() != g1.dim())
        throw InvalidArgumentError("independent coupling: dimension mismatch");
    const Index d = g0.dim();
    std::vector<GmmJointComponent> comps;
    comps.reserve(static_cast<std::size_t>(g1.size()));
    for (const auto& c : g1.components())
        comps.push_back({c.weight,
                         {g0.mean(), c.dist.mean(), g0.cov(), c.dist.cov(),
                          MatrixXd::Zero(d, d)}});
    return GmmJointCoupling(std::move(comps));
}

ParticleCoupling GmmJointCoupling::to_particles(Index n, Seed seed) const {
    if (n < 1) throw InvalidArgumentError("to_particles: n must be >= 1");
    const Index d = dim();
    std::vector<MatrixXd> factors;
    factors.reserve(components_.size());
    for (const auto& c : components_)
        factors.push_back(joint_factor(c.blocks, "GmmJointCoupling component joint"));
    std::vector<double> cum;
    double acc = 0.0;
    for (const auto& c : components_) cum.push_back(acc += c.weight);

    MatrixXd x0(n, d), x1(n, d);
    parallel_for(chunk_count(n), [&](Index chunk) {
        const Index lo = chunk * kChunkRows;
        const Index hi = std::min(n, lo + kChunkRows);
        Philox gen(seed, static_cast<std::uint64_t>(chunk));
        VectorXd z(2 * d);
        for (Index i = lo; i < hi; ++i) {
            const double u = gen.uniform();
            std::size_t k = 0;
            while (k + 1 < cum.size() && u > cum[k]) ++k;
            for (Index j = 0; j < 2 * d; ++j) z[j] = gen.normal();
            const VectorXd xy = factors[k] * z;
            const auto& b = components_[k].blocks;
            x0.row(i) = (b.mean0 + xy.head(d)).transpose();
            x1.row(i) = (b.mean1 + xy.tail(d)).transpose();
        }
    });
    return {std::move(x0), std::move(x1)};
}

ParticleCoupling MapCoupling::to_particles(Index n, Seed seed) const {
    const ParticleSet s0 = source(n, seed);
    MatrixXd x1(s0.size(), s0.dim());
    parallel_for(s0.size(), [&](Index i) {
        x1.row(i) = map(s0.points().row(i).transpose()).transpose();
    });
    return {s0.points(), std::move(x1)};
}

ParticleSet interpolate(const ParticleCoupling& coupling, double t, double noise_eps,
                        Seed seed) {
    if (t < 0.0 || t > 1.0)
        throw DomainError("interpolate: t outside [0, 1]");
    if (noise_eps < 0.0)
        throw DomainError("interpolate: noise_eps must be >= 0");
    MatrixXd xt = (1.0 - t) * coupling.x0() + t * coupling.x1();
    if (noise_eps > 0.0 && t > 0.0 && t < 1.0) {
        const double sd = std::sqrt(noise_eps * t * (1.0 - t));
        const Index n = xt.rows();
        const Index d = xt.cols();
        parallel_for(chunk_count(n), [&](Index c) {
            const Index lo = c * kChunkRows;
            const Index hi = std::min(n, lo + kChunkRows);
            Philox gen(seed, static_cast<std::uint64_t>(c));
            for (Index i = lo; i < hi; ++i)
                for (Index j = 0; j < d; ++j) xt(i, j) += sd * gen.normal();
        });
    }
    return ParticleSet(std::move(xt));
}

GaussianLaw interp_cov(const GaussianJointBlocks& blocks, double t, double noise_eps) {
    const double s = 1.0 - t;
    MatrixXd cov = s * s * blocks.sigma0 +
                   s * t * (blocks.sigma01 + blocks.sigma01.transpose()) +
                   t * t * blocks.sigma1;
    if (noise_eps > 0.0)
        cov += noise_eps * t * s * MatrixXd::Identity(blocks.dim(), blocks.dim());
    return {s * blocks.mean0 + t * blocks.mean1, std::move(cov)};
}

GaussianLaw interp_cov(const GaussianJointCoupling& coupling, double t) {
    return interp_cov(coupling.blocks(), t);
}

namespace {

const MatrixXd& require_invertible(const MatrixXd& a) {
    Eigen::FullPivLU<MatrixXd> lu(a);
    if (!lu.isInvertible())
        throw InvalidArgumentError("affine mode both: matrix A is singular");
    return a;
}

} // namespace

ParticleCoupling affine_transform(const ParticleCoupling& coupling,
                                  const AffineMode& mode) {
    if (const auto* m = std::get_if<AffineBoth>(&mode)) {
        require_invertible(m->a);
        MatrixXd x0 = coupling.x0() * m->a.transpose();
        MatrixXd x1 = coupling.x1() * m->a.transpose();
        x0.rowwise() += m->b.transpose();
        x1.rowwise() += m->b.transpose();
        return {std::move(x0), std::move(x1)};
    }
    if (const auto* m = std::get_if<AffineShift1>(&mode)) {
        MatrixXd x1 = coupling.x1();
        x1.rowwise() += m->b.transpose();
        return {coupling.x0(), std::move(x1)};
    }
    const auto& m = std::get<AffineScale1>(mode);
    if (m.c <= 0.0) throw InvalidArgumentError("affine mode scale1: c must be > 0");
    return {coupling.x0(), m.c * coupling.x1()};
}

GaussianJointCoupling affine_transform(const GaussianJointCoupling& coupling,
                                       const AffineMode& mode) {
    const auto& b = coupling.blocks();
    if (const auto* m = std::get_if<AffineBoth>(&mode)) {
        require_invertible(m->a);
        return {m->a * b.mean0 + m->b, m->a * b.mean1 + m->b,
                m->a * b.sigma0 * m->a.transpose(), m->a * b.sigma1 * m->a.transpose(),
                m->a * b.sigma01 * m->a.transpose()};
    }
    if (const auto* m = std::get_if<AffineShift1>(&mode)) {
        return {b.mean0, b.mean1 + m->b, b.sigma0, b.sigma1, b.sigma01};
    }
    const auto& m = std::get<AffineScale1>(mode);
    if (m.c <= 0.0) throw InvalidArgumentError("affine mode scale1: c must be > 0");
    return {b.mean0, m.c * b.mean1, b.sigma0, m.c * m.c * b.sigma1, m.c * b.sigma01};
}

ParticleCoupling smooth_coupling(const ParticleCoupling& coupling, double c,
                                 SmoothVariant variant, Seed seed) {
    if (variant == SmoothVariant::additive) {
        if (c < 0.0) throw DomainError("smooth_coupling: additive c must be >= 0");
    } else if (c < 0.0 || c >= 1.0) {
        throw DomainError("smooth_coupling: variance_preserving c must be in [0, 1)");
    }
    if (c == 0.0) return coupling;

    const Index n = coupling.size();
    const Index d = coupling.dim();
    const double keep =
        variant == SmoothVariant::additive ? 1.0 : std::sqrt(1.0 - c);
    const double inject = variant == SmoothVariant::additive ? c : std::sqrt(c);
    MatrixXd x0 = keep * coupling.x0();
    parallel_for(chunk_count(n), [&](Index chunk) {
        const Index lo = chunk * kChunkRows;
        const Index hi = std::min(n, lo + kChunkRows);
        Philox gen(seed, static_cast<std::uint64_t>(chunk));
        for (Index i = lo; i < hi; ++i)
            for (Index j = 0; j < d; ++j) x0(i, j) += inject * gen.normal();
    });
    return {std::move(x0), coupling.x1()};
}

void save_particle_coupling(std::ostream& out, const ParticleCoupling& coupling) {
    out << "rectiflow-particles v1 n=" << coupling.size() << " d=" << coupling.dim()
        << "\n";
    out.precision(17);
    const auto write_rows = [&](const MatrixXd& m) {
        for (Index i = 0; i < m.rows(); ++i) {
            for (Index j = 0; j < m.cols(); ++j) {
                if (j) out << ',';
                out << m(i, j);
            }
            out << '\n';
        }
    };
    write_rows(coupling.x0());
    write_rows(coupling.x1());
    if (!out) throw IoError("save_particle_coupling: write failed");
}

void save_particle_coupling(const std::string& path, const ParticleCoupling& coupling) {
    std::ofstream out(path);
    if (!out) throw IoError("save_particle_coupling: cannot open " + path);
    save_particle_coupling(out, coupling);
}

ParticleCoupling load_particle_coupling(std::istream& in) {
    std::string header;
    if (!std::getline(in, header))
        throw IoError("load_particle_coupling: empty input");
    Index n = -1, d = -1;
    {
        std::istringstream hs(header);
        std::string magic, version, field;
        hs >> magic >> version;
        if (magic != "rectiflow-particles" || version != "v1")
            throw IoError("load_particle_coupling: bad header '" + header + "'");
        while (hs >> field) {
            if (field.rfind("n=", 0) == 0) n = std::stoll(field.substr(2));
            if (field.rfind("d=", 0) == 0) d = std::stoll(field.substr(2));
        }
    }
    if (n < 1 || d < 1)
        throw IoError("load_particle_coupling: missing n/d in header");
    const auto read_rows = [&](MatrixXd& m) {
        std::string line;
        for (Index i = 0; i < m.rows(); ++i) {
            if (!std::getline(in, line))
                throw IoError("load_particle_coupling: truncated file");
            std::istringstream ls(line);
            std::string cell;
            for (Index j = 0; j < m.cols(); ++j) {
                if (!std::getline(ls, cell, ','))
                    throw IoError("load_particle_coupling: short row");
                m(i, j) = std::stod(cell);
            }
        }
    };
    MatrixXd x0(n, d), x1(n, d);
    read_rows(x0);
    read_rows(x1);
    return {std::move(x0), std::move(x1)};
}

ParticleCoupling load_particle_coupling(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_particle_coupling: cannot open " + path);
    return load_particle_coupling(in);
}

} // namespace rectiflow
