#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <forge/error.hpp>
#include <forge/metrics.hpp>
#include <forge/stats.hpp>

#include "helpers.hpp"

using namespace forge;
using testing::gaussian;
using testing::gaussian_vector;

namespace {

double wilcoxon_oracle(const Vector& d) {
  std::vector<double> nz;
  for (Eigen::Index i = 0; i < d.size(); ++i)
    if (d(i) != 0.0) nz.push_back(d(i));
  const int n = static_cast<int>(nz.size());
  Vector a(n);
  for (int i = 0; i < n; ++i) a(i) = std::abs(nz[static_cast<std::size_t>(i)]);
  const Vector r = metrics::midranks(a);
  double obs = 0.0;
  for (int i = 0; i < n; ++i)
    if (nz[static_cast<std::size_t>(i)] > 0) obs += r(i);
  long le = 0, ge = 0;
  for (long mask = 0; mask < (1L << n); ++mask) {
    double w = 0.0;
    for (int i = 0; i < n; ++i)
      if (mask & (1L << i)) w += r(i);
    if (w <= obs + 1e-9) ++le;
    if (w >= obs - 1e-9) ++ge;
  }
  return std::min(1.0, 2.0 * static_cast<double>(std::min(le, ge)) / static_cast<double>(1L << n));
}

Vector bh_oracle(const Vector& p) {
  const auto m = p.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p(a) < p(b); });
  Vector q(m);
  double running = 1.0;
  for (Eigen::Index k = m - 1; k >= 0; --k) {
    const auto i = order[static_cast<std::size_t>(k)];
    running = std::min(running, p(i) * static_cast<double>(m) / static_cast<double>(k + 1));
    q(i) = running;
  }
  return q;
}

}  // namespace

TEST_SUITE("stats") {
  TEST_CASE("permutation p floor") {
    const std::vector<int> blocks(30, 0);
    const double p = stats::blocked_permutation_p(10.0, [](const IndexList&) { return 0.0; }, blocks, 1999, 1);
    CHECK(p == 1.0 / 2000.0);
    CHECK(p == 0.0005);
  }

  TEST_CASE("permutation p bounds and worker independence") {
    const Vector x = gaussian_vector(25, 1), y = gaussian_vector(25, 2);
    std::vector<int> blocks;
    for (int i = 0; i < 25; ++i) blocks.push_back(i % 4);
    auto stat = [&](const IndexList& perm) {
      Vector py(25);
      for (int i = 0; i < 25; ++i) py(i) = y(perm[static_cast<std::size_t>(i)]);
      return metrics::pearson(x, py);
    };
    const double obs = metrics::pearson(x, y);
    const double p1 = stats::blocked_permutation_p(obs, stat, blocks, 499, 3, 1);
    const double p4 = stats::blocked_permutation_p(obs, stat, blocks, 499, 3, 4);
    CHECK(p1 == p4);
    CHECK(p1 >= 1.0 / 500.0);
    CHECK(p1 <= 1.0);
  }

  TEST_CASE("block permutations stay inside blocks") {
    std::vector<int> blocks{0, 1, 0, 2, 1, 0, 2, 2};
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto perm = stats::block_permutation(blocks, s);
      auto sorted = perm;
      std::sort(sorted.begin(), sorted.end());
      CHECK(sorted == IndexList{0, 1, 2, 3, 4, 5, 6, 7});
      for (std::size_t i = 0; i < perm.size(); ++i) CHECK(blocks[static_cast<std::size_t>(perm[i])] == blocks[i]);
    }
  }

  TEST_CASE("labels-independent statistic gives uniform p") {
    double mean = 0.0;
    for (std::uint64_t s = 0; s < 100; ++s) {
      const Vector x = gaussian_vector(20, 1000 + s), y = gaussian_vector(20, 2000 + s);
      const std::vector<int> blocks(20, 0);
      auto stat = [&](const IndexList& perm) {
        Vector py(20);
        for (int i = 0; i < 20; ++i) py(i) = y(perm[static_cast<std::size_t>(i)]);
        return metrics::pearson(x, py);
      };
      mean += stats::blocked_permutation_p(metrics::pearson(x, y), stat, blocks, 199, s) / 100.0;
    }
    CHECK(mean >= 0.4);
    CHECK(mean <= 0.6);
  }

  TEST_CASE("non-finite permuted statistic") {
    const std::vector<int> blocks(5, 0);
    CHECK_THROWS_AS(stats::blocked_permutation_p(1.0, [](const IndexList&) { return std::nan(""); }, blocks, 9, 1), NumericalError);
  }

  TEST_CASE("wilcoxon extreme and symmetric cases") {
    const auto r = stats::wilcoxon_signed_rank(-Vector::LinSpaced(10, 1, 10));
    CHECK(r.exact);
    CHECK(r.p_value == doctest::Approx(2.0 / 1024.0).epsilon(1e-14));
    Vector sym(8);
    sym << 1, -1, 2, -2, 3, -3, 4, -4;
    CHECK(stats::wilcoxon_signed_rank(sym).p_value == 1.0);
    CHECK_THROWS_AS(stats::wilcoxon_signed_rank(Vector::Zero(6)), UndefinedTest);
  }

  TEST_CASE("wilcoxon exact p matches sign enumeration") {
    for (std::uint64_t s = 0; s < 40; ++s) {
      const int n = 5 + static_cast<int>(s % 8);
      Vector d = gaussian_vector(n, 3000 + s) + Vector::Constant(n, 0.3);
      if (s % 3 == 0) d = (d * 2.0).array().round() / 2.0;  // ties and zeros
      if ((d.array() != 0.0).count() < 5) continue;
      CHECK(std::abs(stats::wilcoxon_signed_rank(d).p_value - wilcoxon_oracle(d)) <= 1e-12);
    }
  }

  TEST_CASE("wilcoxon is scale invariant") {
    for (std::uint64_t s = 0; s < 10; ++s) {
      const int n = 8 + static_cast<int>(s) * 3;
      const Vector d = gaussian_vector(n, 4000 + s);
      const double p = stats::wilcoxon_signed_rank(d).p_value;
      CHECK(stats::wilcoxon_signed_rank(d * 17.5).p_value == p);
      CHECK(stats::wilcoxon_signed_rank(d * 1e-3).p_value == p);
    }
  }

  TEST_CASE("wilcoxon normal approximation") {
    const Vector d = gaussian_vector(60, 5) + Vector::Constant(60, 0.5);
    const auto r = stats::wilcoxon_signed_rank(d);
    CHECK_FALSE(r.exact);
    CHECK(r.p_value < 0.01);
    CHECK(r.w_plus + r.w_minus == doctest::Approx(60.0 * 61.0 / 2.0));
  }

  TEST_CASE("bh examples") {
    Vector p(4);
    p << 0.01, 0.04, 0.03, 0.005;
    const Vector q = stats::bh_fdr(p);
    Vector want(4);
    want << 0.02, 0.04, 0.04, 0.02;
    CHECK((q - want).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(stats::bh_fdr(Vector::Constant(1, 0.3))(0) == 0.3);
    CHECK(stats::bh_fdr(Vector::Constant(5, 0.2)) == Vector::Constant(5, 0.2));
  }

  TEST_CASE("bh matches a hand step-up on 100 vectors") {
    Rng rng(77);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int v = 0; v < 100; ++v) {
      const int m = 1 + v % 30;
      Vector p(m);
      for (int i = 0; i < m; ++i) p(i) = v % 4 == 0 ? std::pow(u(rng), 4) : u(rng);
      if (m > 2) p(1) = p(0);
      const Vector q = stats::bh_fdr(p);
      CHECK((q - bh_oracle(p)).cwiseAbs().maxCoeff() <= 1e-15);
      for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b)
          if (p(a) <= p(b)) CHECK(q(a) <= q(b));
      CHECK((q.array() >= p.array() * (1.0 - 1e-15)).all());
      CHECK(q.maxCoeff() <= 1.0);
    }
  }

  TEST_CASE("bootstrap") {
    SUBCASE("constant vector") {
      const auto ci = stats::bootstrap_ci(Vector::Constant(30, 2.5), [](const Vector& v) { return v.mean(); }, 500, 0.95, 1);
      CHECK(ci.lo == 2.5);
      CHECK(ci.hi == 2.5);
      CHECK(ci.mean == doctest::Approx(2.5));
    }
    SUBCASE("width of the mean interval") {
      Rng rng(5);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      Vector v(200);
      for (int i = 0; i < 200; ++i) v(i) = u(rng);
      const auto ci = stats::bootstrap_ci(v, [](const Vector& x) { return x.mean(); }, 2000, 0.95, 2);
      const double analytic = 2.0 * 1.96 * std::sqrt(1.0 / 12.0) / std::sqrt(200.0);
      CHECK(std::abs((ci.hi - ci.lo) - analytic) <= 0.2 * analytic);
      CHECK(ci.lo <= v.mean());
      CHECK(v.mean() <= ci.hi);
    }
    SUBCASE("input order does not matter") {
      Vector v = gaussian_vector(50, 6);
      auto stat = [](const Vector& x) { return x.mean(); };
      const auto a = stats::bootstrap_ci(v, stat, 400, 0.9, 3);
      std::reverse(v.begin(), v.end());
      const auto b = stats::bootstrap_ci(v, stat, 400, 0.9, 3);
      CHECK(a.lo == b.lo);
      CHECK(a.hi == b.hi);
    }
    SUBCASE("index form is seed-deterministic") {
      const Vector v = gaussian_vector(40, 7);
      auto stat = [&](const IndexList& rows) {
        double s = 0;
        for (int r : rows) s += v(r);
        return s / static_cast<double>(rows.size());
      };
      const auto a = stats::bootstrap_ci(40, stat, 300, 0.95, 9);
      const auto b = stats::bootstrap_ci(40, stat, 300, 0.95, 9);
      CHECK(a.lo == b.lo);
      CHECK(a.hi == b.hi);
      CHECK(a.estimate == doctest::Approx(v.mean()));
    }
  }

  TEST_CASE("morans I") {
    const Matrix coords = gaussian(120, 2, 11);
    SUBCASE("smooth gradient") {
      const Vector v = coords.col(0) + 0.5 * coords.col(1);
      const auto m = stats::morans_i(v, coords, 6, 199, 1);
      CHECK(m.statistic > 0.0);
      CHECK(m.p_value <= 0.01);
      CHECK(m.expected == doctest::Approx(-1.0 / 119.0));
    }
    SUBCASE("noise has the null mean") {
      double mean = 0.0;
      for (std::uint64_t s = 0; s < 200; ++s) mean += stats::morans_i(gaussian_vector(120, 100 + s), coords, 6, 1, s).statistic / 200.0;
      CHECK(std::abs(mean + 1.0 / 119.0) < 0.01);
    }
    CHECK_THROWS_AS(stats::morans_i(Vector::Ones(120), coords, 6, 9, 1), UndefinedMetric);
  }

  TEST_CASE("quantile and normal tail") {
    CHECK(stats::normal_sf(0.0) == doctest::Approx(0.5));
    CHECK(stats::normal_sf(1.959963984540054) == doctest::Approx(0.025).epsilon(1e-9));
    CHECK(stats::quantile({3, 1, 2}, 0.5) == 2.0);
  }
}
