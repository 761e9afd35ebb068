#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "forge/types.hpp"

namespace forge::stats {

/// Statistic recomputed under a row permutation: perm[i] is the row whose label
/// row i receives.
using PermutedStatistic = std::function<double(const IndexList& perm)>;

/// Permutation p-value with labels shuffled only within blocks:
/// p = (1 + #{perm stat >= observed}) / (1 + n_perm). Replicate r draws from a
/// generator seeded by (seed, r), so results do not depend on `workers`.
double blocked_permutation_p(double observed, const PermutedStatistic& recompute, const std::vector<int>& blocks,
                             int n_perm, std::uint64_t seed, int workers = 1);

/// A single within-block shuffle (exposed for callers that need the raw permutation).
IndexList block_permutation(const std::vector<int>& blocks, std::uint64_t seed);

struct WilcoxonResult {
  double w_plus = 0.0;
  double w_minus = 0.0;
  int n = 0;  // after dropping zeros
  double p_value = 1.0;
  bool exact = true;
};

/// Two-sided signed-rank test. Zero differences are dropped; |d| gets midranks.
/// Exact null distribution for n <= 25, normal approximation with tie and
/// continuity correction beyond.
WilcoxonResult wilcoxon_signed_rank(const Vector& diffs);

/// Benjamini-Hochberg step-up adjusted q-values in input order.
Vector bh_fdr(const Vector& pvals);

struct BootstrapCi {
  double estimate = 0.0;  // statistic on the original sample
  double mean = 0.0;      // mean of the bootstrap replicates
  double lo = 0.0;
  double hi = 0.0;
};

using IndexStatistic = std::function<double(const IndexList& rows)>;

/// Percentile bootstrap over row indices. Resample r draws n indices from a
/// generator keyed on (seed, n, n_boot, r) only.
BootstrapCi bootstrap_ci(int n, const IndexStatistic& statistic, int n_boot, double level, std::uint64_t seed);

/// Values are sorted before resampling, so a symmetric statistic gives the same
/// interval for any input order.
BootstrapCi bootstrap_ci(const Vector& values, const std::function<double(const Vector&)>& statistic, int n_boot,
                         double level, std::uint64_t seed);

struct MoransI {
  double statistic = 0.0;
  double expected = 0.0;  // -1/(n-1)
  double p_value = 1.0;
};

/// Moran's I with row-standardised kNN weights over `coords`; one-sided
/// permutation p (larger I is more extreme).
MoransI morans_i(const Vector& values, const Matrix& coords, int n_neighbors, int n_perm, std::uint64_t seed);

double normal_sf(double z);
double quantile(std::vector<double> values, double q);

}  // namespace forge::stats
