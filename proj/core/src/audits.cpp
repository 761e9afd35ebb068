#include "forge/audits.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "forge/error.hpp"
#include "forge/linalg.hpp"
#include "forge/metrics.hpp"
#include "forge/rng.hpp"
#include "forge/stats.hpp"

namespace forge::audits {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

int valid_k(int n, int requested) { return std::max(1, std::min({requested, n - 2, (2 * n - 2) / 3})); }

struct SinusoidBasis {
  Matrix basis;  // n x 2M, orthonormal pairs, columns centred
  std::vector<std::pair<double, double>> grid;  // (direction deg, cycles)
  std::vector<Vector> coordinate;  // normalised projection per direction
  std::vector<int> direction_of;
};

SinusoidBasis make_basis(const Matrix& plane, const SinusoidGrid& g) {
  const auto n = plane.rows();
  SinusoidBasis b;
  std::vector<Vector> cols;
  for (int d = 0; d < g.n_directions; ++d) {
    const double deg = 180.0 * d / g.n_directions;
    const double rad = deg * std::numbers::pi / 180.0;
    Vector s = plane.col(0) * std::cos(rad) + plane.col(1) * std::sin(rad);
    const double lo = s.minCoeff(), span = s.maxCoeff() - lo;
    if (!(span > 0.0)) continue;
    s = (s.array() - lo) / span;
    b.coordinate.push_back(s);
    for (int f = 0; f < g.n_frequencies; ++f) {
      const double cycles = g.n_frequencies == 1
                                ? g.min_cycles
                                : g.min_cycles * std::pow(g.max_cycles / g.min_cycles, static_cast<double>(f) / (g.n_frequencies - 1));
      Matrix sc(n, 2);
      sc.col(0) = (2.0 * std::numbers::pi * cycles * s).array().sin();
      sc.col(1) = (2.0 * std::numbers::pi * cycles * s).array().cos();
      sc = sc.rowwise() - sc.colwise().mean();
      Eigen::HouseholderQR<Matrix> qr(sc);
      const Matrix r = qr.matrixQR().topRows(2).triangularView<Eigen::Upper>();
      const double scale = std::max(std::abs(r(0, 0)), 1e-300);
      Matrix q = qr.householderQ() * Matrix::Identity(n, 2);
      if (std::abs(r(1, 1)) < 1e-8 * scale) q.col(1).setZero();
      cols.push_back(q.col(0));
      cols.push_back(q.col(1));
      b.grid.emplace_back(deg, cycles);
      b.direction_of.push_back(static_cast<int>(b.coordinate.size()) - 1);
    }
  }
  if (b.grid.empty()) throw DegenerateGeometry("plane coordinates have zero extent");
  b.basis.resize(n, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) b.basis.col(static_cast<Eigen::Index>(c)) = cols[c];
  return b;
}

// Best grid index and its R^2 for centred y.
std::pair<int, double> best_fit(const SinusoidBasis& b, const Vector& yc) {
  const double tot = yc.squaredNorm();
  if (!(tot > 0.0)) return {0, 0.0};
  const Vector proj = b.basis.transpose() * yc;
  int best = 0;
  double best_r2 = -1.0;
  for (std::size_t m = 0; m < b.grid.size(); ++m) {
    const double r2 = (proj(2 * m) * proj(2 * m) + proj(2 * m + 1) * proj(2 * m + 1)) / tot;
    if (r2 > best_r2) {
      best_r2 = r2;
      best = static_cast<int>(m);
    }
  }
  return {best, best_r2};
}

Vector lda_direction(const Matrix& X, const std::vector<int>& y, double lambda) {
  const auto d = X.cols();
  RowVector mu[2] = {RowVector::Zero(d), RowVector::Zero(d)};
  int count[2] = {0, 0};
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    mu[y[static_cast<std::size_t>(i)]] += X.row(i);
    ++count[y[static_cast<std::size_t>(i)]];
  }
  mu[0] /= count[0];
  mu[1] /= count[1];
  Matrix Sw = Matrix::Zero(d, d);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const RowVector c = X.row(i) - mu[y[static_cast<std::size_t>(i)]];
    Sw += c.transpose() * c;
  }
  Sw /= std::max<double>(1.0, static_cast<double>(X.rows()) - 2.0);
  Sw.diagonal().array() += lambda;
  return Sw.completeOrthogonalDecomposition().solve((mu[1] - mu[0]).transpose());
}

std::vector<int> binary_labels(const std::vector<int>& labels) {
  bool has[2] = {false, false};
  for (int v : labels) {
    if (v != 0 && v != 1) throw InvalidArgument("lens labels must be 0/1");
    has[v] = true;
  }
  if (!has[0] || !has[1]) throw UndefinedTask("lens needs both classes present");
  return labels;
}

double discriminant_auroc(const Matrix& X, const std::vector<int>& y) {
  const double ridge = 1e-9 * std::max(1.0, (X.rowwise() - X.colwise().mean()).squaredNorm() / X.rows());
  const Vector w = lda_direction(X, y, ridge);
  return metrics::auroc(X * w, y);
}

}  // namespace

Vector quadratic_detrend(const Matrix& plane, const Vector& y, const Vector& weights) {
  const auto n = plane.rows();
  if (y.size() != n || plane.cols() != 2) throw ShapeError("detrend needs n x 2 plane coordinates and n values");
  Matrix A(n, 6);
  A.col(0).setOnes();
  A.col(1) = plane.col(0);
  A.col(2) = plane.col(1);
  A.col(3) = plane.col(0).cwiseAbs2();
  A.col(4) = plane.col(0).cwiseProduct(plane.col(1));
  A.col(5) = plane.col(1).cwiseAbs2();
  const Vector sw = weights.size() ? Vector(weights.cwiseSqrt()) : Vector::Ones(n);
  const Vector beta = linalg::least_squares(sw.asDiagonal() * A, sw.cwiseProduct(y));
  return y - A * beta;
}

SinusoidFit sinusoid_scan(const Matrix& plane, const Vector& y, const SinusoidGrid& grid, int n_perm, std::uint64_t seed) {
  if (plane.rows() != y.size() || plane.cols() != 2) throw ShapeError("sinusoid scan needs n x 2 coordinates and n values");
  if (plane.rows() < 5) throw InsufficientData("sinusoid scan needs at least 5 points");
  if (grid.n_directions < 1 || grid.n_frequencies < 1 || !(grid.min_cycles > 0.0) || grid.max_cycles < grid.min_cycles)
    throw InvalidArgument("invalid sinusoid grid");
  const SinusoidBasis b = make_basis(plane, grid);
  const Vector yc = y.array() - y.mean();
  const auto [best, r2] = best_fit(b, yc);
  SinusoidFit fit;
  fit.r2 = r2;
  fit.direction_deg = b.grid[static_cast<std::size_t>(best)].first;
  fit.cycles = b.grid[static_cast<std::size_t>(best)].second;
  const Vector& s = b.coordinate[static_cast<std::size_t>(b.direction_of[static_cast<std::size_t>(best)])];
  Matrix A(y.size(), 3);
  A.col(0) = (2.0 * std::numbers::pi * fit.cycles * s).array().sin();
  A.col(1) = (2.0 * std::numbers::pi * fit.cycles * s).array().cos();
  A.col(2).setOnes();
  const Vector coef = linalg::least_squares(A, y);
  fit.amplitude = std::hypot(coef(0), coef(1));
  fit.phase = std::atan2(coef(1), coef(0));
  if (!(yc.squaredNorm() > 0.0)) {
    fit.p_value = 1.0;
    return fit;
  }
  const std::vector<int> blocks(static_cast<std::size_t>(y.size()), 0);
  Vector yp(y.size());
  auto recompute = [&](const IndexList& perm) {
    for (Eigen::Index i = 0; i < yc.size(); ++i) yp(i) = yc(perm[static_cast<std::size_t>(i)]);
    return best_fit(b, yp).second;
  };
  fit.p_value = stats::blocked_permutation_p(r2, recompute, blocks, n_perm, seed);
  return fit;
}

FlatnessReport flatness_ripple_3d(const Matrix& coords, const Vector& weights, int n_perm, std::uint64_t seed,
                                  const SinusoidGrid& grid, int moran_neighbors) {
  if (coords.cols() != 3) throw ShapeError("flatness audit needs n x 3 coordinates");
  if (coords.rows() < 30) throw InvalidArgument("flatness audit needs at least 30 points");
  const linalg::Projection pca = linalg::fit_projection(coords, 3, true, weights);
  if (!(pca.variance(0) > 0.0) || pca.variance(1) <= 1e-12 * pca.variance(0))
    throw DegenerateGeometry("coordinates do not span a plane");
  FlatnessReport r;
  r.plane_var_fraction = (pca.variance(0) + pca.variance(1)) / pca.variance.sum();
  const Matrix scores = pca.transform(coords);
  const Matrix plane = scores.leftCols(2);
  r.residual = quadratic_detrend(plane, scores.col(2), weights);
  try {
    const auto m = stats::morans_i(r.residual, plane, moran_neighbors, n_perm, derive_seed(seed, 1));
    r.morans_i = m.statistic;
    r.morans_p = m.p_value;
  } catch (const UndefinedMetric&) {
    r.morans_i = kNaN;
    r.morans_p = 1.0;
  }
  r.sinusoid = sinusoid_scan(plane, r.residual, grid, n_perm, derive_seed(seed, 2));
  return r;
}

std::vector<RippleAxis> latent_ripple_scan(const Matrix& Z, const RippleRule& rule, int n_perm, std::uint64_t seed,
                                           const SinusoidGrid& grid) {
  const int k = static_cast<int>(Z.cols());
  if (k < 3) return {};
  const int comps = std::min<int>(k, static_cast<int>(Z.rows()));
  const linalg::Projection pca = linalg::fit_projection(Z, comps, true);
  const Matrix scores = pca.transform(Z);
  const Matrix plane = scores.leftCols(2);
  std::vector<RippleAxis> axes;
  for (int j = 2; j < comps; ++j) {
    RippleAxis a;
    a.axis = j;
    a.fit = sinusoid_scan(plane, quadratic_detrend(plane, scores.col(j)), grid, n_perm, derive_seed(seed, static_cast<std::uint64_t>(j)));
    axes.push_back(a);
  }
  if (axes.empty()) return axes;
  Vector p(static_cast<Eigen::Index>(axes.size()));
  for (std::size_t i = 0; i < axes.size(); ++i) p(static_cast<Eigen::Index>(i)) = axes[i].fit.p_value;
  const Vector q = stats::bh_fdr(p);
  for (std::size_t i = 0; i < axes.size(); ++i) {
    axes[i].q_value = q(static_cast<Eigen::Index>(i));
    axes[i].significant = axes[i].q_value <= rule.q_max && axes[i].fit.r2 >= rule.r2_min && axes[i].fit.cycles >= rule.cycles_min;
  }
  return axes;
}

std::string ripple_csv(const std::vector<RippleAxis>& axes) {
  std::ostringstream os;
  os << "axis,r2,cycles,direction_deg,amplitude,p_value,q_value,significant\n";
  for (const auto& a : axes)
    os << "PC" << a.axis + 1 << ',' << format_double(a.fit.r2) << ',' << format_double(a.fit.cycles) << ','
       << format_double(a.fit.direction_deg) << ',' << format_double(a.fit.amplitude) << ',' << format_double(a.fit.p_value)
       << ',' << format_double(a.q_value) << ',' << (a.significant ? 1 : 0) << '\n';
  return os.str();
}

LensResult separation_lens(const Matrix& Z, const Matrix& display3d, const std::vector<int>& labels, double lambda,
                           int n_neighbors) {
  if (display3d.cols() != 3 || display3d.rows() != Z.rows() || static_cast<Eigen::Index>(labels.size()) != Z.rows())
    throw ShapeError("lens needs matching rows and a 3-column display");
  if (lambda < 0.0) throw InvalidArgument("lens lambda must be >= 0");
  const auto y = binary_labels(labels);
  LensResult r;
  r.axis = lda_direction(Z, y, lambda);
  if (!(r.axis.norm() >= 1e-10)) throw DegenerateAxis("discriminative axis norm below 1e-10");
  const Vector s = Z * r.axis;
  const double ms = s.mean();
  const double sd_s = std::sqrt((s.array() - ms).square().mean());
  if (!(sd_s > 0.0)) throw DegenerateAxis("discriminative scores are constant");
  const Vector old = display3d.col(2);
  const double mo = old.mean();
  double sd_o = std::sqrt((old.array() - mo).square().mean());
  if (!(sd_o > 0.0)) sd_o = 1.0;
  r.coords = display3d;
  r.coords.col(2) = ((s.array() - ms) / sd_s * sd_o + mo).matrix();
  r.auroc_before = discriminant_auroc(display3d, y);
  r.auroc_after = discriminant_auroc(r.coords, y);
  const int k = valid_k(static_cast<int>(Z.rows()), n_neighbors);
  r.trustworthiness_before = metrics::trustworthiness(Z, display3d, k);
  r.trustworthiness_after = metrics::trustworthiness(Z, r.coords, k);
  r.trustworthiness_delta = r.trustworthiness_after - r.trustworthiness_before;
  return r;
}

InterventionResult latent_intervention(const LetHead& head, const AnchorPanel& panel, const Categorical& groups,
                                       const std::string& from, const std::string& to, int n_steps, int n_perm,
                                       std::uint64_t seed) {
  if (static_cast<int>(groups.size()) != panel.rows()) throw ShapeError("group column length must equal panel rows");
  if (n_steps < 2) throw InvalidArgument("intervention needs n_steps >= 2");
  const int g_from = groups.code_of(from), g_to = groups.code_of(to);
  if (g_from < 0 || g_to < 0) throw InvalidArgument("unknown intervention group");
  const Matrix Z = head.encode(panel.features);
  const int G = groups.n_levels();
  Matrix mu = Matrix::Zero(G, Z.cols());
  std::vector<int> count(static_cast<std::size_t>(G), 0);
  IndexList source;
  for (int i = 0; i < panel.rows(); ++i) {
    const int g = groups.codes[static_cast<std::size_t>(i)];
    mu.row(g) += Z.row(i);
    ++count[static_cast<std::size_t>(g)];
    if (g == g_from) source.push_back(i);
  }
  if (!count[static_cast<std::size_t>(g_from)] || !count[static_cast<std::size_t>(g_to)])
    throw InvalidArgument("intervention groups must be non-empty");
  for (int g = 0; g < G; ++g)
    if (count[static_cast<std::size_t>(g)]) mu.row(g) /= count[static_cast<std::size_t>(g)];

  Eigen::JacobiSVD<Matrix> svd(head.w_enc());
  const Vector sv = svd.singularValues();
  if (!(sv(sv.size() - 1) > let::kPinvCutoff * sv(0))) throw NumericalError("decode map W_enc is rank deficient", 0);
  const Matrix pinv_t = let::pseudo_inverse(head.w_enc()).transpose();  // k x D
  auto decode = [&](const Matrix& z) -> Matrix { return (z * pinv_t).rowwise() + head.bias().transpose(); };

  IndexList present;
  for (int g = 0; g < G; ++g)
    if (count[static_cast<std::size_t>(g)]) present.push_back(g);
  Matrix centroid_rows(static_cast<Eigen::Index>(present.size()), Z.cols());
  for (std::size_t p = 0; p < present.size(); ++p) centroid_rows.row(static_cast<Eigen::Index>(p)) = mu.row(present[p]);
  const Matrix centroids = decode(centroid_rows);

  Matrix zsrc(static_cast<Eigen::Index>(source.size()), Z.cols());
  for (std::size_t r = 0; r < source.size(); ++r) zsrc.row(static_cast<Eigen::Index>(r)) = Z.row(source[r]);
  const RowVector dir = mu.row(g_to) - mu.row(g_from);

  InterventionResult out;
  out.t.resize(n_steps);
  out.target_fraction.resize(n_steps);
  for (int s = 0; s < n_steps; ++s) {
    const double t = static_cast<double>(s) / (n_steps - 1);
    out.t(s) = t;
    const Matrix x = decode(zsrc.rowwise() + t * dir);
    int hits = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
        const double d = (x.row(i) - centroids.row(c)).squaredNorm();
        if (d < bd) {
          bd = d;
          best = static_cast<int>(c);
        }
      }
      if (present[static_cast<std::size_t>(best)] == g_to) ++hits;
    }
    out.target_fraction(s) = static_cast<double>(hits) / static_cast<double>(x.rows());
  }
  try {
    out.rho = metrics::spearman(out.t, out.target_fraction);
  } catch (const UndefinedCorrelation&) {
    out.rho = kNaN;
    out.rho_defined = false;
    out.p_value = 1.0;
    return out;
  }
  const std::vector<int> blocks(static_cast<std::size_t>(n_steps), 0);
  Vector perm_frac(n_steps);
  auto recompute = [&](const IndexList& perm) {
    for (int s = 0; s < n_steps; ++s) perm_frac(s) = out.target_fraction(perm[static_cast<std::size_t>(s)]);
    return metrics::spearman(out.t, perm_frac);
  };
  out.p_value = stats::blocked_permutation_p(out.rho, recompute, blocks, n_perm, seed);
  return out;
}

TopologyReport branch_topology(const Matrix& Z, const Categorical& stage, const std::string& root,
                               const std::map<std::string, std::string>& branch_of, int k_nn,
                               const std::vector<std::string>& terminals) {
  if (static_cast<Eigen::Index>(stage.size()) != Z.rows()) throw ShapeError("stage column length must equal Z rows");
  if (k_nn < 1) throw InvalidArgument("k_nn must be >= 1");
  std::map<int, std::pair<RowVector, int>> acc;
  for (Eigen::Index i = 0; i < Z.rows(); ++i) {
    auto& [sum, count] = acc.try_emplace(stage.codes[static_cast<std::size_t>(i)], RowVector::Zero(Z.cols()), 0).first->second;
    sum += Z.row(i);
    ++count;
  }
  TopologyReport rep;
  const int m = static_cast<int>(acc.size());
  if (m < 3) throw InvalidArgument("topology needs at least 3 stages");
  Matrix C(m, Z.cols());
  int idx = 0;
  for (const auto& [code, sc] : acc) {
    rep.stages.push_back(stage.levels[static_cast<std::size_t>(code)]);
    C.row(idx++) = sc.first / sc.second;
  }
  const auto root_it = std::find(rep.stages.begin(), rep.stages.end(), root);
  if (root_it == rep.stages.end()) throw InvalidArgument("stem stage '" + root + "' not present");
  const int r = static_cast<int>(root_it - rep.stages.begin());
  const Matrix D = metrics::pairwise_distances(C);
  const int k = std::min(k_nn, m - 1);
  std::vector<IndexList> nn(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) nn[static_cast<std::size_t>(i)] = metrics::nearest(D.row(i).transpose(), i, k);
  std::vector<std::vector<bool>> mutual(static_cast<std::size_t>(m), std::vector<bool>(static_cast<std::size_t>(m), false));
  for (int i = 0; i < m; ++i)
    for (int j : nn[static_cast<std::size_t>(i)]) {
      const auto& back = nn[static_cast<std::size_t>(j)];
      if (std::find(back.begin(), back.end(), i) != back.end()) mutual[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = mutual[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = true;
    }
  auto reachable = [&](const std::vector<std::vector<bool>>& adj) {
    std::vector<bool> seen(static_cast<std::size_t>(m), false);
    std::deque<int> q{r};
    seen[static_cast<std::size_t>(r)] = true;
    while (!q.empty()) {
      const int u = q.front();
      q.pop_front();
      for (int v = 0; v < m; ++v)
        if (adj[static_cast<std::size_t>(u)][static_cast<std::size_t>(v)] && !seen[static_cast<std::size_t>(v)]) {
          seen[static_cast<std::size_t>(v)] = true;
          q.push_back(v);
        }
    }
    return seen;
  };
  const auto seen_knn = reachable(mutual);
  rep.fallback_complete = std::count(seen_knn.begin(), seen_knn.end(), true) < m;

  // Kruskal over candidate edges, ties by (i, j).
  std::vector<std::tuple<double, int, int>> edges;
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j)
      if (rep.fallback_complete || mutual[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) edges.emplace_back(D(i, j), i, j);
  std::sort(edges.begin(), edges.end());
  std::vector<int> parent(static_cast<std::size_t>(m));
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int x) { return parent[static_cast<std::size_t>(x)] == x ? x : parent[static_cast<std::size_t>(x)] = find(parent[static_cast<std::size_t>(x)]); };
  std::vector<int> degree(static_cast<std::size_t>(m), 0);
  std::vector<std::vector<bool>> tree(static_cast<std::size_t>(m), std::vector<bool>(static_cast<std::size_t>(m), false));
  for (const auto& [w, i, j] : edges) {
    const int a = find(i), b = find(j);
    if (a == b) continue;
    parent[static_cast<std::size_t>(a)] = b;
    rep.mst_edges.emplace_back(i, j);
    ++degree[static_cast<std::size_t>(i)];
    ++degree[static_cast<std::size_t>(j)];
    tree[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = tree[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = true;
  }
  rep.root_degree = degree[static_cast<std::size_t>(r)];
  rep.branchpoints = static_cast<int>(std::count_if(degree.begin(), degree.end(), [](int d) { return d >= 3; }));

  IndexList term;
  if (terminals.empty()) {
    for (int i = 0; i < m; ++i)
      if (i != r && degree[static_cast<std::size_t>(i)] == 1) term.push_back(i);
  } else {
    for (const auto& t : terminals) {
      const auto it = std::find(rep.stages.begin(), rep.stages.end(), t);
      if (it == rep.stages.end()) throw InvalidArgument("terminal stage '" + t + "' not present");
      term.push_back(static_cast<int>(it - rep.stages.begin()));
    }
  }
  const auto seen_mst = reachable(tree);
  int hit_knn = 0, hit_mst = 0;
  for (int t : term) {
    hit_knn += seen_knn[static_cast<std::size_t>(t)];
    hit_mst += seen_mst[static_cast<std::size_t>(t)];
  }
  rep.reachability_knn = term.empty() ? 1.0 : static_cast<double>(hit_knn) / static_cast<double>(term.size());
  rep.reachability_mst = term.empty() ? 1.0 : static_cast<double>(hit_mst) / static_cast<double>(term.size());
  std::set<std::string> first_hop;
  for (int v = 0; v < m; ++v) {
    if (!tree[static_cast<std::size_t>(r)][static_cast<std::size_t>(v)]) continue;
    const auto it = branch_of.find(rep.stages[static_cast<std::size_t>(v)]);
    first_hop.insert(it == branch_of.end() ? rep.stages[static_cast<std::size_t>(v)] : it->second);
  }
  rep.first_hop_diversity = static_cast<int>(first_hop.size());
  return rep;
}

std::string DimensionAudit::csv() const {
  std::ostringstream os;
  os << "dim,eta2_stage,eta2_branch,abs_rho_depth";
  std::vector<std::string> names;
  if (!rows.empty())
    for (const auto& [name, v] : rows.front().auroc) names.push_back(name);
  for (const auto& n : names) os << ",auroc_" << n;
  os << '\n';
  for (const auto& r : rows) {
    os << r.dim << ',' << format_double(r.eta2_stage) << ',' << format_double(r.eta2_branch) << ','
       << format_double(r.abs_rho_depth);
    for (const auto& n : names) os << ',' << format_double(r.auroc.at(n));
    os << '\n';
  }
  os << "# mean_abs_offdiag_corr," << format_double(mean_abs_offdiag_corr) << '\n';
  return os.str();
}

DimensionAudit dimension_audit(const Matrix& Z, const Categorical& stage, const Categorical& branch,
                               const std::map<std::string, Categorical>& binary_labels, const std::vector<int>& depth) {
  const auto n = Z.rows(), k = Z.cols();
  if (k < 2) throw InvalidArgument("dimension audit needs k >= 2");
  if (static_cast<Eigen::Index>(stage.size()) != n || static_cast<Eigen::Index>(branch.size()) != n ||
      static_cast<Eigen::Index>(depth.size()) != n)
    throw ShapeError("dimension audit columns must have one entry per row");
  auto guard = [](auto&& f) {
    try {
      return f();
    } catch (const Error&) {
      return kNaN;
    }
  };
  Vector dep(n);
  for (Eigen::Index i = 0; i < n; ++i) dep(i) = depth[static_cast<std::size_t>(i)];
  DimensionAudit a;
  for (Eigen::Index j = 0; j < k; ++j) {
    DimensionRow r;
    r.dim = static_cast<int>(j);
    const Vector col = Z.col(j);
    r.eta2_stage = guard([&] { return metrics::eta_squared(col, stage.codes); });
    r.eta2_branch = guard([&] { return metrics::eta_squared(col, branch.codes); });
    r.abs_rho_depth = guard([&] { return std::abs(metrics::spearman(col, dep)); });
    for (const auto& [name, lab] : binary_labels)
      r.auroc[name] = guard([&] { return metrics::auroc_abs(col, lab.codes); });
    a.rows.push_back(std::move(r));
  }
  double sum = 0.0;
  int pairs = 0;
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = i + 1; j < k; ++j) {
      const double c = guard([&] { return std::abs(metrics::pearson(Z.col(i), Z.col(j))); });
      if (std::isnan(c)) continue;
      sum += c;
      ++pairs;
    }
  a.mean_abs_offdiag_corr = pairs ? sum / pairs : kNaN;
  return a;
}

CompositeAxis composite_axis(const Matrix& Z, const Matrix& targets, const Vector& depth, const std::vector<int>& blocks,
                             double lambda, int n_perm, std::uint64_t seed) {
  const auto n = Z.rows();
  if (targets.rows() != n || depth.size() != n || static_cast<Eigen::Index>(blocks.size()) != n)
    throw ShapeError("composite axis inputs must share the row count");
  if (targets.cols() < 1) throw InvalidArgument("composite axis needs at least one target component");
  for (Eigen::Index j = 0; j < targets.cols(); ++j) {
    const double m = targets.col(j).mean();
    const double ss = (targets.col(j).array() - m).square().sum();
    const double sd_pop = std::sqrt(ss / n), sd_smp = std::sqrt(ss / (n - 1));
    if (std::abs(m) > 1e-6 || (std::abs(sd_pop - 1.0) > 1e-6 && std::abs(sd_smp - 1.0) > 1e-6))
      throw InvalidArgument("target component " + std::to_string(j) + " is not standardised");
  }
  const Vector composite = targets.rowwise().mean();
  const linalg::RidgeFit fit = linalg::ridge(Z, composite, lambda);
  CompositeAxis out;
  out.weights = fit.weights;
  out.intercept = fit.intercept;
  const Vector axis = fit.predict(Z);
  try {
    out.rho_composite = metrics::spearman(axis, composite);
  } catch (const UndefinedCorrelation&) {
    out.rho_composite = kNaN;
  }
  try {
    out.rho_depth = metrics::spearman(axis, depth);
  } catch (const UndefinedCorrelation&) {
    out.rho_depth = kNaN;
    out.p_value = 1.0;
    return out;
  }
  Vector dp(n);
  auto recompute = [&](const IndexList& perm) {
    for (Eigen::Index i = 0; i < n; ++i) dp(i) = depth(perm[static_cast<std::size_t>(i)]);
    try {
      return metrics::spearman(axis, dp);
    } catch (const UndefinedCorrelation&) {
      return 0.0;
    }
  };
  out.p_value = stats::blocked_permutation_p(out.rho_depth, recompute, blocks, n_perm, seed);
  return out;
}

}  // namespace forge::audits
