#include <doctest.h>

#include <numeric>
#include <random>
#include <set>

#include <forge/error.hpp>
#include <forge/harness.hpp>
#include <forge/metrics.hpp>
#include <forge/synth.hpp>

#include "helpers.hpp"

using namespace forge;
using testing::gaussian;

namespace {

synth::SynthData small_synth(std::uint64_t seed, double progression = 0.0) {
  synth::SynthConfig cfg;
  cfg.n_donors = 6;
  cfg.n_external_donors = 1;
  cfg.n_tissues = 2;
  cfg.cells_per_stage = 3;
  cfg.G = 32;
  cfg.progression = progression;
  cfg.seed = seed;
  return synth::generate(cfg);
}

double accuracy(const std::vector<int>& a, const std::vector<int>& b) {
  double hit = 0;
  for (std::size_t i = 0; i < a.size(); ++i) hit += a[i] == b[i];
  return hit / static_cast<double>(a.size());
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("split plans") {
    const auto data = small_synth(1);
    const auto& cells = data.internal_cells;
    SUBCASE("one training donor left") {
      for (const auto& s : harness::make_splits(cells, 6, 4, 100000, 3)) {
        CHECK(s.train_donors.size() == 1);
        CHECK(s.test_donors.size() == 4);
        std::set<std::string> all(s.train_donors.begin(), s.train_donors.end());
        all.insert(s.test_donors.begin(), s.test_donors.end());
        CHECK(all.size() == 5);
      }
    }
    SUBCASE("determinism") {
      const auto a = harness::make_splits(cells, 5, 2, 50, 8);
      const auto b = harness::make_splits(cells, 5, 2, 50, 8);
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].to_json() == b[i].to_json());
    }
    SUBCASE("rows respect donors and the cap") {
      for (const auto& s : harness::make_splits(cells, 4, 2, 60, 9)) {
        CHECK(s.train_rows.size() == 60);
        CHECK(std::is_sorted(s.train_rows.begin(), s.train_rows.end()));
        const std::set<std::string> test(s.test_donors.begin(), s.test_donors.end());
        for (int r : s.train_rows) CHECK_FALSE(test.count(cells.donor.label(static_cast<std::size_t>(r))));
        int expected_test = 0;
        for (int r = 0; r < cells.rows(); ++r) expected_test += test.count(cells.donor.label(static_cast<std::size_t>(r))) ? 1 : 0;
        CHECK(static_cast<int>(s.test_rows.size()) == expected_test);
      }
    }
    CHECK_THROWS_AS(harness::make_splits(cells, 3, 5, 100, 1), InvalidArgument);
  }

  TEST_CASE("probes") {
    SUBCASE("separable data is fit exactly") {
      Matrix Z = gaussian(60, 3, 1);
      std::vector<int> y;
      for (int i = 0; i < 60; ++i) {
        y.push_back(i % 2);
        Z(i, 0) += y.back() ? 4.0 : -4.0;
      }
      const auto p = fit_probe(Z, y, 2, ProbeKind::linear, 1);
      CHECK(accuracy(p.predict(Z), y) == 1.0);
    }
    SUBCASE("null labels give chance balanced accuracy") {
      double mean = 0.0;
      for (std::uint64_t s = 0; s < 5; ++s) {
        const Matrix Z = gaussian(400, 4, 10 + s);
        Rng rng(20 + s);
        std::uniform_int_distribution<int> u(0, 2);
        std::vector<int> y(400);
        for (auto& v : y) v = u(rng);
        const auto p = fit_probe(Z.topRows(200), {y.begin(), y.begin() + 200}, 3, ProbeKind::linear, s);
        mean += metrics::balanced_accuracy(p.predict(Z.bottomRows(200)), {y.begin() + 200, y.end()}) / 5.0;
      }
      CHECK(std::abs(mean - 1.0 / 3.0) <= 0.1);
    }
    SUBCASE("xor needs the nonlinear probe") {
      Matrix Z = gaussian(600, 2, 30, 0.15);
      std::vector<int> y(600);
      for (int i = 0; i < 600; ++i) {
        const int a = i % 2, b = (i / 2) % 2;
        Z(i, 0) += a ? 1.0 : -1.0;
        Z(i, 1) += b ? 1.0 : -1.0;
        y[static_cast<std::size_t>(i)] = a ^ b;
      }
      const Matrix train = Z.topRows(400), test = Z.bottomRows(200);
      const std::vector<int> ytr(y.begin(), y.begin() + 400), yte(y.begin() + 400, y.end());
      ProbeConfig cfg;
      cfg.learning_rate = 1e-2;
      const auto mlp = fit_probe(train, ytr, 2, ProbeKind::mlp2, 4, cfg);
      const auto lin = fit_probe(train, ytr, 2, ProbeKind::linear, 4, cfg);
      CHECK(accuracy(mlp.predict(test), yte) > 0.9);
      CHECK(accuracy(lin.predict(test), yte) <= 0.6);
    }
    CHECK_THROWS_AS(fit_probe(gaussian(10, 2, 1), std::vector<int>(10, 1), 2, ProbeKind::linear, 1), UndefinedTask);
  }

  TEST_CASE("pseudotime on a line") {
    Matrix Z(12, 2);
    for (int i = 0; i < 12; ++i) Z.row(i) << i * 0.5, 0.01 * (i % 3);
    Vector root(2);
    root << -1, 0;
    const auto pt = harness::donor_local_pseudotime(Z, root, 2);
    CHECK(pt.root == 0);
    CHECK_FALSE(pt.partial);
    CHECK(metrics::spearman(pt.pseudotime, Vector::LinSpaced(12, 0, 11)) == doctest::Approx(1.0));
  }

  TEST_CASE("pseudotime root ties go to the lowest index") {
    Matrix Z(8, 2);
    Z << 1, 0, 1.1, 0, 1.2, 0, 1.3, 0, -1, 0, -1.1, 0, -1.2, 0, -1.3, 0;
    const auto a = harness::donor_local_pseudotime(Z, Vector::Zero(2), 3);
    CHECK(a.root == 0);
    Matrix swapped = Z;
    swapped.topRows(4).swap(swapped.bottomRows(4));
    CHECK(harness::donor_local_pseudotime(swapped, Vector::Zero(2), 3).root == 0);
  }

  TEST_CASE("pseudotime on a split graph") {
    Matrix Z(6, 1);
    Z << 0, 0.1, 0.2, 100, 100.1, 100.2;
    const auto pt = harness::donor_local_pseudotime(Z, Vector::Zero(1), 1);
    CHECK(pt.partial);
    CHECK(pt.pseudotime(3) > pt.pseudotime(2));
    CHECK(pt.pseudotime(3) == pt.pseudotime(5));
    CHECK_THROWS_AS(harness::donor_local_pseudotime(Z, Vector::Zero(1), 5), InsufficientData);
  }

  TEST_CASE("planted pseudotime follows depth") {
    const auto data = small_synth(3, 1.0);
    const Matrix latent = data.internal_cells.features * data.truth.signal_basis.leftCols(data.truth.signal_basis.cols() - 1);
    const int root_stage = data.internal_cells.stage.code_of("root");
    for (const auto& d : data.internal_cells.donor.levels) {
      const auto rows = data.internal_cells.rows_where(data.internal_cells.donor, d);
      if (rows.empty()) continue;
      Matrix Z(static_cast<Eigen::Index>(rows.size()), latent.cols());
      Vector depth(Z.rows());
      Vector hint = Vector::Zero(latent.cols());
      int n_root = 0;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        Z.row(static_cast<Eigen::Index>(i)) = latent.row(rows[i]);
        depth(static_cast<Eigen::Index>(i)) = data.internal_cells.stage_depth[static_cast<std::size_t>(rows[i])];
        if (data.internal_cells.stage.codes[static_cast<std::size_t>(rows[i])] == root_stage) {
          hint += latent.row(rows[i]).transpose();
          ++n_root;
        }
      }
      const auto pt = harness::donor_local_pseudotime(Z, hint / n_root, 10);
      CHECK(std::abs(metrics::spearman(pt.pseudotime, depth)) >= 0.8);
    }
  }

  TEST_CASE("campaign") {
    const auto data = small_synth(4, 1.0);
    const auto& cells = data.internal_cells;
    const auto splits = harness::make_splits(cells, 5, 2, 200, 6);
    std::vector<harness::MethodUnderTest> methods(3);
    methods[0].name = "pca5";
    methods[0].kind = harness::RepresentationKind::pca;
    methods[0].dim = 5;
    methods[1] = methods[0];
    methods[1].name = "pca5_again";
    methods[2].name = "svd5";
    methods[2].kind = harness::RepresentationKind::svd;
    methods[2].dim = 5;
    harness::CampaignConfig cc;
    cc.reference = "pca5";
    cc.endpoints = {"pseudotime", "stage", "label:subtype"};
    cc.seed = 2;
    const auto rep = harness::run_campaign(cells, methods, splits, cc);

    SUBCASE("a method against itself") {
      for (const auto& p : rep.paired)
        if (p.method == "pca5_again") {
          CHECK(p.mean_delta == 0.0);
          CHECK(p.q_value == 1.0);
        }
    }
    SUBCASE("orientation columns") {
      for (const auto& m : {"pca5", "svd5"})
        CHECK(rep.find(m, "pseudotime_abs_rho")->mean >= std::abs(rep.find(m, "pseudotime_rho")->mean) - 1e-12);
    }
    SUBCASE("coverage bookkeeping") {
      for (const auto& s : rep.summary) CHECK(s.n_obs + s.n_invalid == 5);
      for (const auto& p : rep.paired) {
        const auto* a = rep.find(p.method, p.metric);
        const auto* b = rep.find(p.reference, p.metric);
        CHECK(p.n <= std::min(a->n_obs, b->n_obs));
      }
    }
    SUBCASE("determinism") {
      const auto again = harness::run_campaign(cells, methods, splits, cc);
      CHECK(again.values_csv() == rep.values_csv());
      CHECK(again.paired_csv() == rep.paired_csv());
      CHECK(again.summary_csv() == rep.summary_csv());
      CHECK(again.summary_text() == rep.summary_text());
    }
    SUBCASE("bad configuration") {
      auto bad = cc;
      bad.reference = "nope";
      CHECK_THROWS_AS(harness::run_campaign(cells, methods, splits, bad), InvalidArgument);
      bad = cc;
      bad.endpoints = {"label:missing"};
      CHECK_THROWS_AS(harness::run_campaign(cells, methods, splits, bad), InvalidArgument);
    }
  }

  TEST_CASE("fitting ignores test rows") {
    const auto data = small_synth(5);
    const auto& cells = data.internal_cells;
    const auto split = harness::make_splits(cells, 1, 2, 150, 1)[0];
    IndexList own(split.train_rows.size());
    std::iota(own.begin(), own.end(), 0);
    const auto only_train = cells.subset(split.train_rows);
    for (auto kind : {harness::RepresentationKind::pca, harness::RepresentationKind::svd}) {
      harness::MethodUnderTest m;
      m.name = "m";
      m.kind = kind;
      m.dim = 6;
      const auto a = harness::fit_representation(m, cells, split.train_rows);
      const auto b = harness::fit_representation(m, only_train, own);
      CHECK_FALSE(a.fingerprint().empty());
      CHECK(a.fingerprint() == b.fingerprint());
    }
    const Matrix Z = cells.features.leftCols(4);
    std::vector<int> y;
    for (int r : split.train_rows) y.push_back(cells.stage.codes[static_cast<std::size_t>(r)]);
    Matrix Ztr(static_cast<Eigen::Index>(split.train_rows.size()), 4);
    for (std::size_t i = 0; i < split.train_rows.size(); ++i) Ztr.row(static_cast<Eigen::Index>(i)) = Z.row(split.train_rows[i]);
    const auto p1 = fit_probe(Ztr, y, cells.stage.n_levels(), ProbeKind::linear, 3);
    const auto p2 = fit_probe(only_train.features.leftCols(4), y, cells.stage.n_levels(), ProbeKind::linear, 3);
    CHECK(p1.to_bytes() == p2.to_bytes());
  }
}
