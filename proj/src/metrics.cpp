#include "rectiflow/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "rectiflow/parallel.hpp"
#include "rectiflow/rng.hpp"

namespace rectiflow {

double transport_cost(const ParticleCoupling& coupling) {
    const Index n = coupling.size();
    if (n < 1) throw InvalidArgumentError("transport_cost: empty coupling");
    return parallel_sum(n, [&](Index i) {
               return (coupling.x1().row(i) - coupling.x0().row(i)).squaredNorm();
           }) /
           static_cast<double>(n);
}

namespace {

MatrixXd strided_subsample(const MatrixXd& m, Index cap) {
    const Index n = m.rows();
    if (n <= cap) return m;
    MatrixXd out(cap, m.cols());
    const double step = static_cast<double>(n) / static_cast<double>(cap);
    for (Index i = 0; i < cap; ++i)
        out.row(i) = m.row(static_cast<Index>(static_cast<double>(i) * step));
    return out;
}

// Sum of pairwise distances between the rows of a and b (all ordered pairs).
double cross_sum(const MatrixXd& a, const MatrixXd& b) {
    return parallel_sum(a.rows(), [&](Index i) {
        double s = 0.0;
        for (Index j = 0; j < b.rows(); ++j) s += (a.row(i) - b.row(j)).norm();
        return s;
    });
}

double energy_from_sums(double cross, double within_a, double within_b, Index na,
                        Index nb) {
    const double e = 2.0 * cross / (static_cast<double>(na) * static_cast<double>(nb)) -
                     within_a / (static_cast<double>(na) * static_cast<double>(na)) -
                     within_b / (static_cast<double>(nb) * static_cast<double>(nb));
    return std::sqrt(std::max(0.0, e));
}

} // namespace

double energy_distance(const ParticleSet& a, const ParticleSet& b, Index cap) {
    if (a.size() < 1 || b.size() < 1)
        throw InvalidArgumentError("energy_distance: empty sample");
    if (a.dim() != b.dim())
        throw InvalidArgumentError("energy_distance: dimension mismatch");
    const MatrixXd sa = strided_subsample(a.points(), cap);
    const MatrixXd sb = strided_subsample(b.points(), cap);
    const double cross = cross_sum(sa, sb);
    const double wa = cross_sum(sa, sa);
    const double wb = cross_sum(sb, sb);
    return energy_from_sums(cross, wa, wb, sa.rows(), sb.rows());
}

namespace serial {

double energy_distance(const ParticleSet& a, const ParticleSet& b, Index cap) {
    if (a.size() < 1 || b.size() < 1)
        throw InvalidArgumentError("energy_distance: empty sample");
    if (a.dim() != b.dim())
        throw InvalidArgumentError("energy_distance: dimension mismatch");
    const MatrixXd sa = strided_subsample(a.points(), cap);
    const MatrixXd sb = strided_subsample(b.points(), cap);
    const auto pair_sum = [](const MatrixXd& x, const MatrixXd& y) {
        return serial::chunked_sum(x.rows(), [&](Index i) {
            double s = 0.0;
            for (Index j = 0; j < y.rows(); ++j) s += (x.row(i) - y.row(j)).norm();
            return s;
        });
    };
    const double cross = pair_sum(sa, sb);
    return energy_from_sums(cross, pair_sum(sa, sa), pair_sum(sb, sb), sa.rows(),
                            sb.rows());
}

} // namespace serial

double energy_null_threshold(const ParticleSet& a, const ParticleSet& b, Seed seed,
                             Index n_perms, double quantile, Index cap) {
    const MatrixXd sa = strided_subsample(a.points(), cap);
    const MatrixXd sb = strided_subsample(b.points(), cap);
    const Index na = sa.rows();
    const Index nb = sb.rows();
    const Index n = na + nb;
    MatrixXd pooled(n, sa.cols());
    pooled << sa, sb;

    // The pooled all-pairs sum is permutation-invariant; each permutation
    // then only needs its two within-group sums.
    const double total = cross_sum(pooled, pooled);
    std::vector<double> stats(static_cast<std::size_t>(n_perms));
    parallel_for(n_perms, [&](Index p) {
        const auto perm = random_permutation(n, seed, static_cast<std::uint64_t>(p));
        std::vector<Index> ia, ib;
        ia.reserve(static_cast<std::size_t>(na));
        ib.reserve(static_cast<std::size_t>(nb));
        for (Index i = 0; i < n; ++i) {
            if (perm[static_cast<std::size_t>(i)] < na)
                ia.push_back(i);
            else
                ib.push_back(i);
        }
        const auto within = [&](const std::vector<Index>& idx) {
            double s = 0.0;
            for (std::size_t u = 0; u < idx.size(); ++u)
                for (std::size_t w = u + 1; w < idx.size(); ++w)
                    s += (pooled.row(idx[u]) - pooled.row(idx[w])).norm();
            return 2.0 * s;
        };
        const double wa = within(ia);
        const double wb = within(ib);
        const double cross = 0.5 * (total - wa - wb);
        stats[static_cast<std::size_t>(p)] = energy_from_sums(cross, wa, wb, na, nb);
    });
    std::sort(stats.begin(), stats.end());
    const auto rank = std::min<std::size_t>(
        stats.size() - 1,
        static_cast<std::size_t>(std::ceil(quantile * static_cast<double>(stats.size()))) );
    return stats[rank];
}

TwoSampleCheck energy_two_sample_check(const ParticleSet& a, const ParticleSet& b,
                                       Seed seed, Index cap, Index n_perms,
                                       double quantile) {
    const double dist = energy_distance(a, b, cap);
    const double thr = energy_null_threshold(a, b, seed, n_perms, quantile, cap);
    return {dist, thr, dist < thr};
}

} // namespace rectiflow
