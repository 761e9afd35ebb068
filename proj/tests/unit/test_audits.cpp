#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include <forge/audits.hpp>
#include <forge/error.hpp>
#include <forge/linalg.hpp>
#include <forge/metrics.hpp>
#include <forge/synth.hpp>

#include "helpers.hpp"

using namespace forge;
using namespace forge::audits;
using testing::gaussian;
using testing::gaussian_vector;

namespace {

// 30 x 10 lattice in the (x, y) plane, height `w(x)`.
Matrix lattice(const std::function<double(double)>& w) {
  Matrix c(300, 3);
  for (int i = 0; i < 30; ++i)
    for (int j = 0; j < 10; ++j) c.row(i * 10 + j) << i, j, w(i);
  return c;
}

Matrix rotate(const Matrix& Z, std::uint64_t seed) {
  Eigen::HouseholderQR<Matrix> qr(gaussian(Z.cols(), Z.cols(), seed));
  Matrix out = Z * Matrix(qr.householderQ());
  out.rowwise() += gaussian(1, Z.cols(), seed + 1).row(0);
  return out;
}

Categorical labels_of(const std::vector<std::string>& v) { return Categorical::from_strings(v); }

// Cells scattered around stage centroids.
Matrix cells_at(const Matrix& centroids, int per_stage, std::vector<std::string>& stage, const std::vector<std::string>& names,
                std::uint64_t seed) {
  Matrix Z(centroids.rows() * per_stage, centroids.cols());
  const Matrix jitter = gaussian(static_cast<int>(Z.rows()), static_cast<int>(Z.cols()), seed, 0.02);
  for (Eigen::Index s = 0; s < centroids.rows(); ++s)
    for (int c = 0; c < per_stage; ++c) {
      Z.row(s * per_stage + c) = centroids.row(s) + jitter.row(s * per_stage + c);
      stage.push_back(names[static_cast<std::size_t>(s)]);
    }
  return Z;
}

}  // namespace

TEST_SUITE("audits") {
  TEST_CASE("planted ripple on a flat sheet") {
    const auto c = lattice([](double x) { return std::sin(2 * std::numbers::pi * 3.0 * x / 29.0); });
    const auto r = flatness_ripple_3d(c, Vector(), 199, 1);
    CHECK(r.plane_var_fraction >= 0.99);
    CHECK(r.sinusoid.r2 >= 0.9);
    CHECK(r.sinusoid.p_value <= 0.005);
    CHECK(r.sinusoid.cycles == doctest::Approx(3.0).epsilon(0.1));
  }

  TEST_CASE("coplanar points") {
    const auto r = flatness_ripple_3d(lattice([](double) { return 0.0; }), Vector(), 19, 1);
    CHECK(r.plane_var_fraction == 1.0);
  }

  TEST_CASE("degenerate geometry") {
    Matrix line(40, 3);
    for (int i = 0; i < 40; ++i) line.row(i) << i, 2.0 * i, -i;
    CHECK_THROWS_AS(flatness_ripple_3d(line, Vector(), 9, 1), DegenerateGeometry);
    CHECK_THROWS_AS(flatness_ripple_3d(gaussian(10, 3, 1), Vector(), 9, 1), InvalidArgument);
  }

  TEST_CASE("gaussian clouds show no ripple") {
    int quiet = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
      const auto r = flatness_ripple_3d(gaussian(100, 3, 50 + s), Vector(), 199, s);
      quiet += r.sinusoid.p_value > 0.05 ? 1 : 0;
    }
    CHECK(quiet >= 9);
  }

  TEST_CASE("quadratic detrending removes quadratics exactly") {
    const Matrix plane = gaussian(50, 2, 3);
    Vector y(50);
    for (int i = 0; i < 50; ++i) {
      const double u = plane(i, 0), v = plane(i, 1);
      y(i) = 1 + 2 * u - v + 0.5 * u * u - 3 * u * v + v * v;
    }
    CHECK(quadratic_detrend(plane, y).norm() < 1e-9 * y.norm());
  }

  TEST_CASE("latent ripple scan") {
    const int n = 400;
    Rng rng(5);
    std::uniform_real_distribution<double> u(0, 1);
    Matrix Z(n, 5);
    const Matrix noise = gaussian(n, 2, 6, 0.3);
    for (int i = 0; i < n; ++i) {
      const double a = u(rng), b = u(rng);
      Z.row(i) << 30 * a, 12 * b, 2.0 * std::sin(2 * std::numbers::pi * 3.0 * a) + 0.1 * noise(i, 0), noise(i, 0), noise(i, 1);
    }
    const auto axes = latent_ripple_scan(rotate(Z, 7), {}, 199, 3);
    REQUIRE(axes.size() == 3);
    CHECK(axes[0].axis == 2);
    CHECK(axes[0].significant);
    CHECK_FALSE(axes[1].significant);
    CHECK_FALSE(axes[2].significant);
    CHECK(latent_ripple_scan(Z.leftCols(2), {}, 9, 1).empty());
    CHECK(ripple_csv(axes).rfind("axis,r2,cycles,direction_deg,amplitude,p_value,q_value,significant\nPC3,", 0) == 0);
  }

  TEST_CASE("separation lens") {
    const int n = 300;
    Matrix Z = gaussian(n, 6, 8);
    Z.leftCols(3) *= 10.0;
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      y[static_cast<std::size_t>(i)] = i % 2;
      Z(i, 3) += i % 2 ? 1.5 : -1.5;
    }
    const auto proj = linalg::fit_projection(Z, 3, true);
    const Matrix display = proj.transform(Z);
    const Matrix Z_copy = Z;
    const auto r = separation_lens(Z, display, y, 1e-3);
    CHECK(r.auroc_after > r.auroc_before);
    CHECK(r.coords.leftCols(2) == display.leftCols(2));
    CHECK(Z == Z_copy);
    CHECK(r.trustworthiness_delta == doctest::Approx(r.trustworthiness_after - r.trustworthiness_before));
    const Vector z = r.coords.col(2);
    const Vector old = display.col(2);
    CHECK(z.mean() == doctest::Approx(old.mean()).scale(1.0));
    CHECK(std::sqrt((z.array() - z.mean()).square().mean()) ==
          doctest::Approx(std::sqrt((old.array() - old.mean()).square().mean())).epsilon(1e-9));

    CHECK_THROWS_AS(separation_lens(Z, display, y, 1e30), DegenerateAxis);
    CHECK_THROWS_AS(separation_lens(Z, display, std::vector<int>(static_cast<std::size_t>(n), 1), 1e-3), UndefinedTask);

    double mean_after = 0.0;
    for (std::uint64_t s = 0; s < 5; ++s) {
      Rng rng(100 + s);
      std::bernoulli_distribution coin(0.5);
      std::vector<int> yr(static_cast<std::size_t>(n));
      for (auto& v : yr) v = coin(rng);
      const Matrix Zn = gaussian(n, 6, 200 + s);
      mean_after += separation_lens(Zn, linalg::fit_projection(Zn, 3, true).transform(Zn), yr, 1e-3).auroc_after / 5.0;
    }
    CHECK(std::abs(mean_after - 0.5) <= 0.1);
  }

  TEST_CASE("latent intervention") {
    AnchorPanel p;
    const int per = 20;
    Matrix centres(3, 3);
    centres << -5, 0, 0, 5, 0, 0, 0, 6, 0;
    p.features = Matrix(3 * per, 3);
    const Matrix jit = gaussian(3 * per, 3, 9, 0.5);
    std::vector<std::string> g;
    for (int s = 0; s < 3; ++s)
      for (int i = 0; i < per; ++i) {
        p.features.row(s * per + i) = centres.row(s) + jit.row(s * per + i);
        g.push_back(std::string(1, static_cast<char>('A' + s)));
      }
    const auto groups = labels_of(g);
    const LetHead head(HeadVariant::anchor, Matrix::Identity(3, 3), Vector::Zero(3), 1.0, Json::object(), 1);

    const auto r = latent_intervention(head, p, groups, "A", "B", 11, 999, 3);
    CHECK(r.t(0) == 0.0);
    CHECK(r.t(10) == 1.0);
    CHECK(r.rho_defined);
    CHECK(r.rho >= 0.9);
    CHECK(r.p_value <= 0.01);

    // baseline: nearest group mean of the untouched A rows
    auto baseline = [&](int target) {
      Matrix mu(3, 3);
      for (int s = 0; s < 3; ++s) mu.row(s) = p.features.middleRows(s * per, per).colwise().mean();
      double hits = 0;
      for (int i = 0; i < per; ++i) {
        int best = 0;
        for (int s = 1; s < 3; ++s)
          if ((p.features.row(i) - mu.row(s)).norm() < (p.features.row(i) - mu.row(best)).norm()) best = s;
        hits += best == target;
      }
      return hits / per;
    };
    CHECK(r.target_fraction(0) == doctest::Approx(baseline(1)));
    CHECK(latent_intervention(head, p, groups, "A", "C", 11, 99, 3).target_fraction(0) == doctest::Approx(baseline(2)));

    SUBCASE("zero direction") {
      AnchorPanel q = p;
      q.features.middleRows(per, per) = q.features.topRows(per);
      const auto flat = latent_intervention(head, q, groups, "A", "B", 6, 99, 3);
      CHECK_FALSE(flat.rho_defined);
      CHECK(flat.p_value == 1.0);
      CHECK((flat.target_fraction.array() == flat.target_fraction(0)).all());
    }
    SUBCASE("decode failure") {
      Matrix w(2, 3);
      w << 1, 0, 0, 1, 0, 0;
      const LetHead bad(HeadVariant::anchor, w, Vector::Zero(3), 1.0, Json::object(), 1);
      CHECK_THROWS_AS(latent_intervention(bad, p, groups, "A", "B", 5, 9, 1), NumericalError);
    }
    CHECK_THROWS_AS(latent_intervention(head, p, groups, "A", "Z", 5, 9, 1), InvalidArgument);
  }

  TEST_CASE("star topology") {
    const std::vector<std::string> names{"root", "a1", "a2", "b1", "b2", "c1", "c2", "d1", "d2"};
    Matrix cent(9, 2);
    cent << 0, 0, 1, 0, 2, 0, 0, 1, 0, 2, -1, 0, -2, 0, 0, -1, 0, -2;
    std::vector<std::string> st;
    const Matrix Z = cells_at(cent, 5, st, names, 1);
    std::map<std::string, std::string> br{{"a1", "a"}, {"a2", "a"}, {"b1", "b"}, {"b2", "b"},
                                          {"c1", "c"}, {"c2", "c"}, {"d1", "d"}, {"d2", "d"}};
    const auto rep = branch_topology(Z, labels_of(st), "root", br, 4);
    CHECK(rep.root_degree == 4);
    CHECK(rep.branchpoints == 1);
    CHECK(rep.reachability_mst == 1.0);
    CHECK(rep.reachability_knn == 1.0);
    CHECK(rep.first_hop_diversity == 4);

    const auto moved = branch_topology(rotate(Z, 3), labels_of(st), "root", br, 4);
    CHECK(moved.root_degree == rep.root_degree);
    CHECK(moved.branchpoints == rep.branchpoints);
    CHECK(moved.mst_edges == rep.mst_edges);
    CHECK(moved.reachability_knn == rep.reachability_knn);

    CHECK_THROWS_AS(branch_topology(Z, labels_of(st), "nowhere", br, 4), InvalidArgument);
  }

  TEST_CASE("path topology") {
    const std::vector<std::string> names{"s0", "s1", "s2", "s3", "s4"};
    Matrix cent(5, 2);
    cent << 0, 0, 1, 0, 2, 0, 3, 0, 4, 0;
    std::vector<std::string> st;
    const Matrix Z = cells_at(cent, 4, st, names, 2);
    const auto rep = branch_topology(Z, labels_of(st), "s0", {}, 2);
    CHECK(rep.branchpoints == 0);
    CHECK(rep.root_degree == 1);
  }

  TEST_CASE("planted tree topology") {
    synth::SynthConfig cfg;
    cfg.n_donors = 3;
    cfg.n_external_donors = 1;
    cfg.n_tissues = 2;
    cfg.cells_per_stage = 4;
    cfg.G = 32;
    const auto data = synth::generate(cfg);
    const Matrix Z = data.internal_cells.features * data.truth.signal_basis;
    std::map<std::string, std::string> br;
    for (int s = 0; s < data.truth.tree.size(); ++s) br[data.truth.tree.names[static_cast<std::size_t>(s)]] = data.truth.tree.branch[static_cast<std::size_t>(s)];
    const auto rep = branch_topology(Z, data.internal_cells.stage, "root", br, 3);
    CHECK(std::abs(rep.branchpoints - 1) <= 1);
  }

  TEST_CASE("dimension audit") {
    const int n = 200;
    std::vector<int> depth;
    std::vector<std::string> stage, branch, sub;
    Matrix Z = gaussian(n, 5, 11);
    for (int i = 0; i < n; ++i) {
      depth.push_back(i % 5);
      stage.push_back("s" + std::to_string(i % 5));
      branch.push_back(i % 5 < 2 ? "a" : "b");
      sub.push_back(i % 2 ? "1" : "0");
      Z(i, 0) = i % 5;
      Z(i, 3) += i % 2 ? 2.0 : -2.0;
    }
    const auto a = dimension_audit(Z, labels_of(stage), labels_of(branch), {{"subtype", labels_of(sub)}}, depth);
    REQUIRE(a.rows.size() == 5);
    CHECK(a.rows[0].abs_rho_depth == doctest::Approx(1.0));
    CHECK(a.rows[0].eta2_stage == doctest::Approx(1.0));
    int best = 0;
    for (int d = 1; d < 5; ++d)
      if (a.rows[static_cast<std::size_t>(d)].auroc.at("subtype") > a.rows[static_cast<std::size_t>(best)].auroc.at("subtype")) best = d;
    CHECK(best == 3);
    CHECK(a.csv().rfind("dim,eta2_stage,eta2_branch,abs_rho_depth,auroc_subtype\n", 0) == 0);

    Eigen::HouseholderQR<Matrix> qr((gaussian(n, 4, 12).rowwise() - gaussian(n, 4, 12).colwise().mean()).eval());
    const Matrix Q = Matrix(qr.householderQ()).leftCols(4);
    const auto o = dimension_audit(Q, labels_of(stage), labels_of(branch), {}, depth);
    CHECK(o.mean_abs_offdiag_corr < 1e-8);
  }

  TEST_CASE("composite axis") {
    const int n = 240;
    const Matrix Z = gaussian(n, 4, 13);
    std::vector<int> blocks;
    for (int i = 0; i < n; ++i) blocks.push_back(i % 6);
    auto standardize = [](Vector v) {
      v.array() -= v.mean();
      v /= std::sqrt(v.squaredNorm() / static_cast<double>(v.size()));
      return v;
    };
    SUBCASE("linear target") {
      Vector w(4);
      w << 1, -2, 0.5, 0;
      const Vector target = standardize(Z * w);
      const auto r = composite_axis(Z, target, target, blocks, 1e-9, 99, 1);
      CHECK(r.rho_composite == doctest::Approx(1.0));
      CHECK(r.rho_depth == doctest::Approx(1.0));
      CHECK(r.p_value == doctest::Approx(0.01));
    }
    SUBCASE("huge penalty") {
      const Vector target = standardize(Z.col(0));
      const auto r = composite_axis(Z, target, target, blocks, 1e15, 9, 1);
      CHECK(r.weights.norm() < 1e-9);
    }
    SUBCASE("distributed depth code") {
      Vector depth(n);
      std::vector<int> dint;
      std::vector<std::string> stage, branch;
      Matrix Zd = gaussian(n, 4, 14);
      for (int i = 0; i < n; ++i) {
        depth(i) = i % 6;
        dint.push_back(i % 6);
        stage.push_back("s" + std::to_string(i % 6));
        branch.push_back("b");
        for (int a = 0; a < 3; ++a) Zd(i, a) += 0.4 * depth(i);
      }
      const auto r = composite_axis(Zd, standardize(depth), depth, blocks, 1e-3, 99, 2);
      const auto audit = dimension_audit(Zd, labels_of(stage), labels_of(branch), {}, dint);
      double best = 0;
      for (const auto& row : audit.rows) best = std::max(best, row.abs_rho_depth);
      CHECK(r.rho_depth > best);
    }
    CHECK_THROWS_AS(composite_axis(Z, Z.col(0) * 5.0, Z.col(0), blocks, 1.0, 9, 1), InvalidArgument);
  }
}
