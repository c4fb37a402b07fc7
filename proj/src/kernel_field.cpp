#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <unordered_map>
#include <vector>

#include "rectiflow/parallel.hpp"
#include "rectiflow/rng.hpp"
#include "rectiflow/velocity.hpp"

namespace rectiflow {

namespace {

// log(DBL_MIN): below this even the closest anchor's raw weight underflows
// and the query counts as out of support.
constexpr double kLogUnderflow = -708.0;

} // namespace

KernelVelocityField::KernelVelocityField(ParticleCoupling coupling, double bandwidth,
                                         double cutoff_in_h, double noise_eps,
                                         Seed noise_seed)
    : VelocityField(coupling.dim(), 0.0, 1.0, true, {}),
      coupling_(std::move(coupling)),
      bandwidth_(bandwidth),
      cutoff_(cutoff_in_h),
      noise_eps_(noise_eps) {
    if (coupling_.size() < 1)
        throw InvalidArgumentError("kernel velocity: empty coupling");
    if (!(bandwidth_ > 0.0))
        throw InvalidArgumentError("kernel velocity: bandwidth must be > 0");
    if (noise_eps_ < 0.0)
        throw InvalidArgumentError("kernel velocity: noise_eps must be >= 0");
    disp_ = coupling_.x1() - coupling_.x0();
    if (noise_eps_ > 0.0) {
        const Index n = coupling_.size();
        const Index d = coupling_.dim();
        noise_.resize(n, d);
        parallel_for(chunk_count(n), [&](Index c) {
            const Index lo = c * kChunkRows;
            const Index hi = std::min(n, lo + kChunkRows);
            Philox gen(noise_seed, static_cast<std::uint64_t>(c));
            for (Index i = lo; i < hi; ++i)
                for (Index j = 0; j < d; ++j) noise_(i, j) = gen.normal();
        });
    }
}

MatrixXd KernelVelocityField::anchors_at(double t) const {
    MatrixXd anchors = (1.0 - t) * coupling_.x0() + t * coupling_.x1();
    if (noise_eps_ > 0.0)
        anchors += std::sqrt(noise_eps_ * t * (1.0 - t)) * noise_;
    return anchors;
}

double scott_bandwidth(const ParticleCoupling& coupling) {
    const Index n = coupling.size();
    const Index d = coupling.dim();
    MatrixXd pooled(2 * n, d);
    pooled << coupling.x0(), coupling.x1();
    const Eigen::RowVectorXd mean = pooled.colwise().mean();
    const Eigen::RowVectorXd var =
        (pooled.rowwise() - mean).array().square().colwise().sum() /
        static_cast<double>(2 * n - 1);
    const double sd = var.array().sqrt().mean();
    const double rate = std::pow(static_cast<double>(n), -1.0 / (static_cast<double>(d) + 4.0));
    return std::max(sd * rate, 1e-12);
}

bool KernelVelocityField::eval_impl(double t, const VectorXd& x, VectorXd& out) const {
    const Index n = coupling_.size();
    const double inv2h2 = 0.5 / (bandwidth_ * bandwidth_);
    const MatrixXd anchors = anchors_at(t);
    // Pass 1: the max log-weight, for stable normalization.
    double m = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < n; ++i)
        m = std::max(m, -(x - anchors.row(i).transpose()).squaredNorm() * inv2h2);
    if (m < kLogUnderflow) {
        out.setZero();
        return false;
    }
    double den = 0.0;
    VectorXd num = VectorXd::Zero(dim());
    for (Index i = 0; i < n; ++i) {
        const double w =
            std::exp(-(x - anchors.row(i).transpose()).squaredNorm() * inv2h2 - m);
        den += w;
        num += w * disp_.row(i).transpose();
    }
    out = num / den;
    return true;
}

namespace {

// Uniform grid over anchor positions with cell size = cutoff radius, so a
// query only visits its 3^d neighborhood. d <= 3 only; callers fall back to
// the exact path otherwise.
class AnchorGrid {
public:
    AnchorGrid(const MatrixXd& anchors, double cell) : cell_(cell), d_(anchors.cols()) {
        origin_ = anchors.colwise().minCoeff();
        buckets_.reserve(static_cast<std::size_t>(anchors.rows()));
        for (Index i = 0; i < anchors.rows(); ++i)
            buckets_[key(anchors.row(i).transpose())].push_back(i);
    }

    template <typename Fn>
    void for_neighbors(const VectorXd& x, Fn&& fn) const {
        std::array<std::int64_t, 3> base{0, 0, 0};
        for (Index j = 0; j < d_; ++j)
            base[static_cast<std::size_t>(j)] = cell_index(x[j] - origin_[j]);
        std::array<std::int64_t, 3> idx = base;
        visit(0, base, idx, fn);
    }

private:
    std::int64_t cell_index(double v) const {
        return static_cast<std::int64_t>(std::floor(v / cell_));
    }

    std::int64_t key(const VectorXd& p) const {
        std::int64_t k = 0;
        for (Index j = 0; j < d_; ++j)
            k = k * 0x40000 + (cell_index(p[j] - origin_[j]) & 0x3FFFF);
        return k;
    }

    std::int64_t key_of(const std::array<std::int64_t, 3>& idx) const {
        std::int64_t k = 0;
        for (Index j = 0; j < d_; ++j)
            k = k * 0x40000 + (idx[static_cast<std::size_t>(j)] & 0x3FFFF);
        return k;
    }

    template <typename Fn>
    void visit(Index depth, const std::array<std::int64_t, 3>& base,
               std::array<std::int64_t, 3>& idx, Fn&& fn) const {
        if (depth == d_) {
            const auto it = buckets_.find(key_of(idx));
            if (it != buckets_.end())
                for (Index i : it->second) fn(i);
            return;
        }
        for (std::int64_t s = -1; s <= 1; ++s) {
            idx[static_cast<std::size_t>(depth)] = base[static_cast<std::size_t>(depth)] + s;
            visit(depth + 1, base, idx, fn);
        }
    }

    double cell_;
    Index d_;
    VectorXd origin_;
    std::unordered_map<std::int64_t, std::vector<Index>> buckets_;
};

} // namespace

void KernelVelocityField::eval_batch(double t, const MatrixXd& points, MatrixXd& out,
                                     BatchEvalStats* stats) const {
    check_time(t);
    const Index nq = points.rows();
    out.resize(nq, dim());
    if (cutoff_ <= 0.0 || dim() > 3) {
        VelocityField::eval_batch(t, points, out, stats);
        return;
    }

    const MatrixXd anchors = anchors_at(t);
    const double radius = cutoff_ * bandwidth_;
    const AnchorGrid grid(anchors, radius);
    const double r2 = radius * radius;
    const double inv2h2 = 0.5 / (bandwidth_ * bandwidth_);

    std::vector<Index> misses(static_cast<std::size_t>(chunk_count(nq)), 0);
    parallel_for(chunk_count(nq), [&](Index c) {
        const Index lo = c * kChunkRows;
        const Index hi = std::min(nq, lo + kChunkRows);
        std::vector<Index> hits;
        Index miss = 0;
        for (Index q = lo; q < hi; ++q) {
            const VectorXd x = points.row(q).transpose();
            hits.clear();
            double m = -std::numeric_limits<double>::infinity();
            grid.for_neighbors(x, [&](Index i) {
                const double d2 = (x - anchors.row(i).transpose()).squaredNorm();
                if (d2 <= r2) {
                    hits.push_back(i);
                    m = std::max(m, -d2 * inv2h2);
                }
            });
            if (hits.empty() || m < kLogUnderflow) {
                out.row(q).setZero();
                ++miss;
                continue;
            }
            double den = 0.0;
            VectorXd num = VectorXd::Zero(dim());
            for (Index i : hits) {
                const double w = std::exp(
                    -(x - anchors.row(i).transpose()).squaredNorm() * inv2h2 - m);
                den += w;
                num += w * disp_.row(i).transpose();
            }
            out.row(q) = (num / den).transpose();
        }
        misses[static_cast<std::size_t>(c)] = miss;
    });
    if (stats)
        for (Index m : misses) stats->out_of_support += m;
}

} // namespace rectiflow
