#pragma once

#include "rectiflow/couplings.hpp"

namespace rectiflow {

/// Mean over rows of |x1_i - x0_i|^2.
double transport_cost(const ParticleCoupling& coupling);

/// Energy distance between two samples (biased V-statistic, all-pairs means):
/// sqrt(max(0, 2 mean|a_i - b_j| - mean|a_i - a_i'| - mean|b_j - b_j'|)).
/// Inputs larger than `cap` rows are subsampled with an even stride.
double energy_distance(const ParticleSet& a, const ParticleSet& b, Index cap = 10000);

/// 95% (by default) quantile of the energy distance under the permutation
/// null that a and b share a distribution: the pooled rows are re-split
/// n_perms times with seeded shuffles. Both inputs are subsampled to `cap`.
double energy_null_threshold(const ParticleSet& a, const ParticleSet& b, Seed seed,
                             Index n_perms = 200, double quantile = 0.95,
                             Index cap = 10000);

/// Energy-distance check at matched subsample size m = min(|a|, |b|, cap):
/// value, threshold, and the verdict value < threshold.
struct TwoSampleCheck {
    double distance;
    double threshold;
    bool below_null;
};
TwoSampleCheck energy_two_sample_check(const ParticleSet& a, const ParticleSet& b,
                                       Seed seed, Index cap = 4096, Index n_perms = 200,
                                       double quantile = 0.95);

namespace serial {
/// Reference energy distance: plain loops over the same chunk layout.
double energy_distance(const ParticleSet& a, const ParticleSet& b, Index cap = 10000);
} // namespace serial

} // namespace rectiflow
