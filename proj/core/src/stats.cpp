#include "forge/stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "forge/error.hpp"
#include "forge/metrics.hpp"
#include "forge/parallel.hpp"
#include "forge/rng.hpp"

namespace forge::stats {

IndexList block_permutation(const std::vector<int>& blocks, std::uint64_t seed) {
  std::map<int, IndexList> members;
  for (std::size_t i = 0; i < blocks.size(); ++i) members[blocks[i]].push_back(static_cast<int>(i));
  Rng rng(seed);
  IndexList perm(blocks.size());
  for (auto& [block, rows] : members) {
    IndexList shuffled = rows;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    for (std::size_t t = 0; t < rows.size(); ++t) perm[static_cast<std::size_t>(rows[t])] = shuffled[t];
  }
  return perm;
}

double blocked_permutation_p(double observed, const PermutedStatistic& recompute, const std::vector<int>& blocks,
                             int n_perm, std::uint64_t seed, int workers) {
  if (n_perm < 1) throw InvalidArgument("n_perm must be >= 1");
  if (!std::isfinite(observed)) throw NumericalError("observed permutation statistic is not finite");
  std::map<int, int> sizes;
  for (int b : blocks) ++sizes[b];
  if (std::none_of(sizes.begin(), sizes.end(), [](const auto& kv) { return kv.second >= 2; }))
    throw InvalidArgument("blocked permutation needs a block with at least two rows");
  std::vector<char> exceed(static_cast<std::size_t>(n_perm), 0);
  parallel_for(static_cast<std::size_t>(n_perm), workers, [&](std::size_t r) {
    const double s = recompute(block_permutation(blocks, derive_seed(seed, 0x9e37, r)));
    if (!std::isfinite(s)) throw NumericalError("permuted statistic is not finite", static_cast<long>(r));
    exceed[r] = s >= observed ? 1 : 0;
  });
  const auto count = std::count(exceed.begin(), exceed.end(), 1);
  return (1.0 + static_cast<double>(count)) / (1.0 + n_perm);
}

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

WilcoxonResult wilcoxon_signed_rank(const Vector& diffs) {
  std::vector<double> nz;
  for (Eigen::Index i = 0; i < diffs.size(); ++i) {
    if (!std::isfinite(diffs(i))) throw InvalidArgument("wilcoxon differences must be finite");
    if (diffs(i) != 0.0) nz.push_back(diffs(i));
  }
  if (nz.empty()) throw UndefinedTest("all paired differences are zero");
  const int n = static_cast<int>(nz.size());
  if (n < 5) throw InsufficientData("wilcoxon needs >= 5 non-zero differences, got " + std::to_string(n));
  Vector abs_d(n);
  for (int i = 0; i < n; ++i) abs_d(i) = std::abs(nz[static_cast<std::size_t>(i)]);
  const Vector ranks = metrics::midranks(abs_d);

  WilcoxonResult res;
  res.n = n;
  for (int i = 0; i < n; ++i) (nz[static_cast<std::size_t>(i)] > 0 ? res.w_plus : res.w_minus) += ranks(i);

  if (n <= 25) {
    // Midranks are multiples of 1/2, so doubled ranks are integers and the
    // null distribution of 2*W+ over all 2^n sign patterns is a subset-sum count.
    std::vector<int> twice(static_cast<std::size_t>(n));
    int total = 0;
    for (int i = 0; i < n; ++i) {
      twice[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(2.0 * ranks(i)));
      total += twice[static_cast<std::size_t>(i)];
    }
    std::vector<double> count(static_cast<std::size_t>(total) + 1, 0.0);
    count[0] = 1.0;
    int reach = 0;
    for (int r : twice) {
      for (int s = reach; s >= 0; --s)
        if (count[static_cast<std::size_t>(s)] != 0.0) count[static_cast<std::size_t>(s + r)] += count[static_cast<std::size_t>(s)];
      reach += r;
    }
    const int observed = static_cast<int>(std::lround(2.0 * res.w_plus));
    double le = 0.0, ge = 0.0;
    for (int s = 0; s <= total; ++s) {
      if (s <= observed) le += count[static_cast<std::size_t>(s)];
      if (s >= observed) ge += count[static_cast<std::size_t>(s)];
    }
    const double all = std::ldexp(1.0, n);
    res.p_value = std::min(1.0, 2.0 * std::min(le, ge) / all);
    res.exact = true;
    return res;
  }

  const double mean = n * (n + 1.0) / 4.0;
  double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
  std::vector<double> sorted(abs_d.data(), abs_d.data() + n);
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i + 1);
    var -= (t * t * t - t) / 48.0;
    i = j + 1;
  }
  const double dev = std::max(0.0, std::abs(res.w_plus - mean) - 0.5);
  res.p_value = var > 0 ? std::min(1.0, 2.0 * normal_sf(dev / std::sqrt(var))) : 1.0;
  res.exact = false;
  return res;
}

Vector bh_fdr(const Vector& pvals) {
  const auto m = pvals.size();
  Vector q(m);
  if (m == 0) return q;
  for (Eigen::Index i = 0; i < m; ++i)
    if (!(pvals(i) >= 0.0 && pvals(i) <= 1.0)) throw InvalidArgument("p-values must lie in [0, 1]");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return pvals(a) < pvals(b); });
  double running = 1.0;
  for (Eigen::Index r = m - 1; r >= 0; --r) {
    const auto idx = order[static_cast<std::size_t>(r)];
    running = std::min(running, pvals(idx) * static_cast<double>(m) / static_cast<double>(r + 1));
    q(idx) = std::min(running, 1.0);
  }
  return q;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw InvalidArgument("quantile of empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

BootstrapCi bootstrap_ci(int n, const IndexStatistic& statistic, int n_boot, double level, std::uint64_t seed) {
  if (n < 2) throw InvalidArgument("bootstrap needs n >= 2");
  if (n_boot < 1) throw InvalidArgument("bootstrap needs n_boot >= 1");
  if (!(level > 0.0 && level < 1.0)) throw InvalidArgument("confidence level must be in (0, 1)");
  IndexList all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  BootstrapCi ci;
  ci.estimate = statistic(all);
  std::vector<double> reps(static_cast<std::size_t>(n_boot));
  const std::uint64_t key = derive_seed(seed, static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(n_boot));
  IndexList rows(static_cast<std::size_t>(n));
  for (int r = 0; r < n_boot; ++r) {
    Rng rng(derive_seed(key, static_cast<std::uint64_t>(r)));
    std::uniform_int_distribution<int> pick(0, n - 1);
    for (auto& row : rows) row = pick(rng);
    reps[static_cast<std::size_t>(r)] = statistic(rows);
  }
  ci.mean = std::accumulate(reps.begin(), reps.end(), 0.0) / n_boot;
  ci.lo = quantile(reps, (1.0 - level) / 2.0);
  ci.hi = quantile(reps, (1.0 + level) / 2.0);
  return ci;
}

BootstrapCi bootstrap_ci(const Vector& values, const std::function<double(const Vector&)>& statistic, int n_boot,
                         double level, std::uint64_t seed) {
  Vector sorted = values;
  std::sort(sorted.data(), sorted.data() + sorted.size());
  const auto n = static_cast<int>(sorted.size());
  Vector buf(n);
  return bootstrap_ci(
      n,
      [&](const IndexList& rows) {
        for (int i = 0; i < n; ++i) buf(i) = sorted(rows[static_cast<std::size_t>(i)]);
        return statistic(buf);
      },
      n_boot, level, seed);
}

MoransI morans_i(const Vector& values, const Matrix& coords, int n_neighbors, int n_perm, std::uint64_t seed) {
  const auto n = static_cast<int>(values.size());
  if (coords.rows() != n) throw ShapeError("Moran's I: values and coords differ in length");
  if (n < 10) throw InsufficientData("Moran's I needs n >= 10");
  if (n_neighbors < 1 || n_neighbors >= n) throw InvalidArgument("Moran's I n_neighbors out of range");
  const Vector centered = values.array() - values.mean();
  const double denom = centered.squaredNorm();
  if (!(denom > 1e-300)) throw UndefinedMetric("Moran's I undefined for constant values");

  const Matrix d = metrics::pairwise_distances(coords);
  std::vector<IndexList> nbrs(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) nbrs[static_cast<std::size_t>(i)] = metrics::nearest(d.row(i).transpose(), i, n_neighbors);

  // Row-standardised weights: each row sums to 1, so sum(W) = n and I = num/denom.
  auto statistic = [&](const Vector& c) {
    double num = 0.0;
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j : nbrs[static_cast<std::size_t>(i)]) s += c(j);
      num += c(i) * s / n_neighbors;
    }
    return num / c.squaredNorm();
  };

  MoransI out;
  out.statistic = statistic(centered);
  out.expected = -1.0 / (n - 1.0);
  if (n_perm > 0) {
    const std::vector<int> one_block(static_cast<std::size_t>(n), 0);
    Vector buf(n);
    out.p_value = blocked_permutation_p(
        out.statistic,
        [&](const IndexList& perm) {
          for (int i = 0; i < n; ++i) buf(i) = centered(perm[static_cast<std::size_t>(i)]);
          return statistic(buf);
        },
        one_block, n_perm, seed);
  }
  return out;
}

}  // namespace forge::stats
