#include "forge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "forge/error.hpp"

namespace forge::metrics {

Matrix pairwise_distances(const Matrix& X) {
  const Vector sq = X.rowwise().squaredNorm();
  Matrix d = (-2.0 * X * X.transpose()).colwise() + sq;
  d.rowwise() += sq.transpose();
  d = d.cwiseMax(0.0).cwiseSqrt();
  d.diagonal().setZero();
  return d;
}

IndexList nearest(const Eigen::Ref<const Vector>& dist_row, int self, int k) {
  IndexList idx;
  idx.reserve(static_cast<std::size_t>(dist_row.size()));
  for (int j = 0; j < dist_row.size(); ++j)
    if (j != self) idx.push_back(j);
  const auto cmp = [&](int a, int b) {
    return dist_row(a) < dist_row(b) || (dist_row(a) == dist_row(b) && a < b);
  };
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(kk), idx.end(), cmp);
  idx.resize(kk);
  return idx;
}

double trustworthiness(const Matrix& X_high, const Matrix& X_low, int K) {
  const auto n = static_cast<int>(X_high.rows());
  if (X_low.rows() != n) throw ShapeError("trustworthiness inputs have different row counts");
  if (K < 1 || K > n - 2 || 3 * K >= 2 * n - 1)
    throw InvalidArgument("n_neighbors=" + std::to_string(K) + " invalid for n=" + std::to_string(n));
  // Exact distances via explicit differences; the Gram-matrix shortcut can
  // reorder near-ties, and trustworthiness is tie-sensitive.
  auto exact = [](const Matrix& X) {
    const auto m = X.rows();
    Matrix d(m, m);
    for (Eigen::Index i = 0; i < m; ++i) {
      d(i, i) = 0.0;
      for (Eigen::Index j = i + 1; j < m; ++j) d(i, j) = d(j, i) = (X.row(i) - X.row(j)).squaredNorm();
    }
    return d;
  };
  const Matrix dh = exact(X_high);
  const Matrix dl = exact(X_low);
  double penalty = 0.0;
  std::vector<int> rank_high(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const IndexList order = nearest(dh.row(i).transpose(), i, n - 1);
    for (int r = 0; r < n - 1; ++r) rank_high[static_cast<std::size_t>(order[r])] = r + 1;
    const IndexList low = nearest(dl.row(i).transpose(), i, K);
    for (int j : low) {
      const int r = rank_high[static_cast<std::size_t>(j)];
      if (r > K) penalty += r - K;
    }
  }
  const double norm = 2.0 / (static_cast<double>(n) * K * (2.0 * n - 3.0 * K - 1.0));
  return 1.0 - norm * penalty;
}

Vector midranks(const Vector& values) {
  const auto n = values.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values(a) < values(b); });
  Vector ranks(n);
  Eigen::Index i = 0;
  while (i < n) {
    Eigen::Index j = i;
    while (j + 1 < n && values(order[j + 1]) == values(order[i])) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (Eigen::Index t = i; t <= j; ++t) ranks(order[t]) = avg;
    i = j + 1;
  }
  return ranks;
}

double pearson(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ShapeError("correlation inputs differ in length");
  const Vector ac = a.array() - a.mean();
  const Vector bc = b.array() - b.mean();
  const double va = ac.squaredNorm();
  const double vb = bc.squaredNorm();
  if (!(va > 0.0) || !(vb > 0.0)) throw UndefinedCorrelation("zero variance input");
  return std::clamp(ac.dot(bc) / std::sqrt(va * vb), -1.0, 1.0);
}

double spearman(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ShapeError("spearman inputs differ in length");
  if (a.size() < 3) throw InsufficientData("spearman needs n >= 3");
  if (!a.allFinite() || !b.allFinite()) throw InvalidArgument("spearman inputs must be finite");
  return pearson(midranks(a), midranks(b));
}

double residualized_correlation(const Vector& pred, const Vector& target, const Matrix& confounds) {
  const auto n = pred.size();
  if (target.size() != n || confounds.rows() != n) throw ShapeError("residualized correlation shape mismatch");
  if (n < 3) throw InsufficientData("residualized correlation needs >= 3 pairs");
  Matrix design(n, confounds.cols() + 1);
  design.col(0).setOnes();
  design.rightCols(confounds.cols()) = confounds;
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(design);
  auto residual = [&](const Vector& y) -> Vector {
    const Vector beta = cod.solve(y);
    return y - design * beta;
  };
  const Vector rp = residual(pred);
  const Vector rt = residual(target);
  auto check = [](const Vector& r, const Vector& y, const char* name) {
    const double scale = (y.array() - y.mean()).matrix().norm();
    if (!(r.norm() > 1e-10 * std::max(scale, 1e-300)))
      throw UndefinedCorrelation(std::string(name) + " is fully explained by the confounds");
  };
  check(rp, pred, "prediction");
  check(rt, target, "target");
  return spearman(rp, rt);
}

double auroc(const Vector& scores, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(scores.size()) != labels.size()) throw ShapeError("auroc shape mismatch");
  double n_pos = 0, n_neg = 0;
  for (int l : labels) (l ? n_pos : n_neg) += 1.0;
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetric("auroc needs both classes");
  const Vector r = midranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) rank_sum += r(static_cast<Eigen::Index>(i));
  const double u = rank_sum - n_pos * (n_pos + 1.0) / 2.0;
  return u / (n_pos * n_neg);
}

double auroc_abs(const Vector& scores, const std::vector<int>& labels) {
  const double a = auroc(scores, labels);
  return std::max(a, 1.0 - a);
}

double balanced_accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.size() != truth.size()) throw ShapeError("balanced accuracy shape mismatch");
  if (truth.empty()) throw InvalidArgument("balanced accuracy needs at least one row");
  std::map<int, std::pair<double, double>> per;  // class -> (hits, total)
  for (std::size_t i = 0; i < truth.size(); ++i) {
    auto& [hit, tot] = per[truth[i]];
    tot += 1.0;
    if (pred[i] == truth[i]) hit += 1.0;
  }
  double sum = 0.0;
  for (const auto& [cls, ht] : per) sum += ht.first / ht.second;
  return sum / static_cast<double>(per.size());
}

double macro_f1(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.size() != truth.size()) throw ShapeError("macro-F1 shape mismatch");
  if (truth.empty()) throw InvalidArgument("macro-F1 needs at least one row");
  std::set<int> classes(truth.begin(), truth.end());
  classes.insert(pred.begin(), pred.end());
  double sum = 0.0;
  for (int c : classes) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (pred[i] == c && truth[i] == c) tp += 1;
      else if (pred[i] == c) fp += 1;
      else if (truth[i] == c) fn += 1;
    }
    const double denom = 2 * tp + fp + fn;
    sum += denom > 0 ? 2 * tp / denom : 0.0;
  }
  return sum / static_cast<double>(classes.size());
}

double silhouette_mean(const Matrix& Z, const std::vector<int>& labels) {
  const auto n = static_cast<int>(Z.rows());
  if (static_cast<std::size_t>(n) != labels.size()) throw ShapeError("silhouette shape mismatch");
  std::map<int, int> sizes;
  for (int l : labels) ++sizes[l];
  if (sizes.size() < 2) throw UndefinedMetric("silhouette needs at least two clusters");
  const Matrix d = pairwise_distances(Z);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const int own = labels[static_cast<std::size_t>(i)];
    if (sizes[own] < 2) continue;  // singleton contributes 0
    std::map<int, double> sums;
    for (int j = 0; j < n; ++j)
      if (j != i) sums[labels[static_cast<std::size_t>(j)]] += d(i, j);
    const double a = sums[own] / (sizes[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [cls, s] : sums)
      if (cls != own) b = std::min(b, s / sizes[cls]);
    const double m = std::max(a, b);
    total += m > 0 ? (b - a) / m : 0.0;
  }
  return total / n;
}

double eta_squared(const Vector& values, const std::vector<int>& groups) {
  if (static_cast<std::size_t>(values.size()) != groups.size()) throw ShapeError("eta squared shape mismatch");
  std::map<int, std::pair<double, double>> acc;  // group -> (sum, count)
  for (std::size_t i = 0; i < groups.size(); ++i) {
    auto& [s, c] = acc[groups[i]];
    s += values(static_cast<Eigen::Index>(i));
    c += 1.0;
  }
  if (acc.size() < 2) throw InvalidArgument("eta squared needs >= 2 groups");
  const double mean = values.mean();
  const double ss_total = (values.array() - mean).square().sum();
  if (!(ss_total > 0.0)) throw UndefinedMetric("eta squared undefined for zero total variance");
  double ss_between = 0.0;
  for (const auto& [g, sc] : acc) {
    const double gm = sc.first / sc.second;
    ss_between += sc.second * (gm - mean) * (gm - mean);
  }
  return std::clamp(ss_between / ss_total, 0.0, 1.0);
}

Orientation orientation_summary(const Vector& rhos) {
  if (rhos.size() == 0) throw InvalidArgument("orientation summary needs at least one value");
  Orientation o;
  o.mean_signed = rhos.mean();
  o.mean_abs = rhos.cwiseAbs().mean();
  o.positive_share = static_cast<double>((rhos.array() > 0.0).count()) / static_cast<double>(rhos.size());
  return o;
}

}  // namespace forge::metrics
