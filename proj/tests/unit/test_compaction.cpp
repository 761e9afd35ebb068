#include <doctest.h>

#include <set>

#include <forge/compaction.hpp>
#include <forge/error.hpp>
#include <forge/synth.hpp>

#include "helpers.hpp"

using namespace forge;
using namespace forge::compaction;
using testing::gaussian;

namespace {

constexpr int kG = 12;

// Factor f reads and writes coordinate f.
FeatureOperator coordinate_operator(const Vector& sigma) {
  const auto r = sigma.size();
  const Matrix E = Matrix::Identity(kG, r);
  return low_rank_operator(E * sigma.asDiagonal(), E, sigma);
}

LetHead coordinate_head(int k) {
  return LetHead(HeadVariant::anchor, Matrix::Identity(k, kG), Vector::Zero(kG), 1.0, Json::object(), 1);
}

// Rows whose listed coordinates are pushed away from zero, so signs are separable.
EvalSet eval_set(const std::string& name, int n, std::uint64_t seed, const std::map<std::string, std::vector<int>>& uses) {
  EvalSet e;
  e.name = name;
  e.X = gaussian(n, kG, seed);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 4; ++c) e.X(i, c) += e.X(i, c) > 0 ? 0.5 : -0.5;
  for (const auto& [label, coords] : uses) {
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      double s = 0;
      for (int c : coords) s += e.X(i, c);
      y[static_cast<std::size_t>(i)] = s > 0 ? 1 : 0;
    }
    e.labels[label] = y;
  }
  return e;
}

synth::SynthConfig small_cfg(std::uint64_t seed) {
  synth::SynthConfig cfg;
  cfg.n_donors = 4;
  cfg.n_external_donors = 2;
  cfg.n_tissues = 2;
  cfg.cells_per_stage = 2;
  cfg.G = 32;
  cfg.n_layers = 2;
  cfg.n_heads = 3;
  cfg.planted_heads = {{1, 2}};
  cfg.seed = seed;
  return cfg;
}

ScanConfig quick_scan() {
  ScanConfig sc;
  sc.k = 4;
  sc.opt.steps = 300;
  return sc;
}

}  // namespace

TEST_SUITE("compaction") {
  TEST_CASE("leave-one-out ablation") {
    Vector sigma(4);
    sigma << 2.0, 1.5, 0.0, 1.0;
    const auto op = coordinate_operator(sigma);
    const auto train = eval_set("train", 300, 1, {{"a", {0}}});
    const auto test = eval_set("test", 300, 2, {{"a", {0}}});
    const auto assets = train_frozen_assets(op, coordinate_head(4), train, {{"a", 2}}, ProbeKind::linear, 3);
    const std::string before = assets.fingerprint();
    const auto t = ablate_factors_loo(op, assets, test);
    CHECK(assets.fingerprint() == before);

    CHECK(t.impact(2, 0) == 0.0);
    CHECK(t.total_clipped(2) == 0.0);
    CHECK(t.total_clipped(0) >= 0.95 * t.total_clipped.sum());
    CHECK(t.order[0] == 0);
    for (Eigen::Index j = 1; j < t.concentration.size(); ++j) CHECK(t.concentration(j) >= t.concentration(j - 1));
    CHECK(t.concentration(t.concentration.size() - 1) == 1.0);
    for (Eigen::Index f = 0; f < t.total_clipped.size(); ++f) CHECK(t.total_clipped.sum() >= t.total_clipped(f));
    CHECK(t.csv().find("factor") != std::string::npos);
  }

  TEST_CASE("subset sweep") {
    const auto op = coordinate_operator(Vector::Ones(4));
    const std::map<std::string, std::vector<int>> uses{{"a", {0}}, {"b", {1}}};
    const auto assets =
        train_frozen_assets(op, coordinate_head(4), eval_set("train", 400, 5, uses), {{"a", 2}, {"b", 2}}, ProbeKind::linear, 6);
    const auto eval = eval_set("test", 400, 7, uses);
    const std::string before = assets.fingerprint();
    const auto sw = subset_sweep(op, assets, {0, 1, 2, 3}, eval);
    CHECK(assets.fingerprint() == before);
    CHECK(sw.rows.size() == 15);
    const auto full = std::find_if(sw.rows.begin(), sw.rows.end(), [](const SubsetRow& r) { return r.subset.size() == 4; });
    REQUIRE(full != sw.rows.end());
    CHECK(full->values == sw.intact);
    CHECK(sw.rows[static_cast<std::size_t>(sw.best[0])].subset == IndexList{0});
    CHECK(sw.rows[static_cast<std::size_t>(sw.best[1])].subset == IndexList{1});
    CHECK_THROWS_AS(subset_sweep(op, assets, {0, 1, 2, 3, 4, 5, 6, 7, 8}, eval), InvalidArgument);
  }

  TEST_CASE("keep-only everything is intact") {
    const auto op = coordinate_operator(Vector::LinSpaced(4, 1.0, 2.0));
    const Matrix X = gaussian(10, kG, 8);
    IndexList all{0, 1, 2, 3};
    CHECK(op.keep_only(all).apply(X) == op.apply(X));
    for (int f = 0; f < 4; ++f) {
      IndexList rest;
      for (int g = 0; g < 4; ++g)
        if (g != f) rest.push_back(g);
      CHECK(op.zero_factor(f).apply(X) == op.keep_only(rest).apply(X));
    }
  }

  TEST_CASE("core sufficiency") {
    const auto op = coordinate_operator(Vector::Ones(4));
    const std::map<std::string, std::vector<int>> uses{{"sum", {0, 1, 2}}};
    const auto assets = train_frozen_assets(op, coordinate_head(4), eval_set("train", 600, 9, uses), {{"sum", 2}}, ProbeKind::linear, 10);
    std::vector<EvalSet> evals;
    for (int i = 0; i < 6; ++i) evals.push_back(eval_set("e" + std::to_string(i), 200, 20 + static_cast<std::uint64_t>(i), uses));
    const std::string before = assets.fingerprint();
    const auto cs = core_sufficiency(op, assets, {0, 1, 2, 3}, evals);
    CHECK(assets.fingerprint() == before);
    REQUIRE(cs.rows.size() == 4);
    CHECK(cs.rows.back().mean_delta.cwiseAbs().maxCoeff() == 0.0);
    for (Eigen::Index s = 0; s < cs.rows[2].values.rows(); ++s) CHECK(cs.rows[2].values(s, 0) > cs.rows[0].values(s, 0));
    CHECK_THROWS_AS(core_sufficiency(op, assets, {}, evals), InvalidArgument);
  }

  TEST_CASE("factor loadings") {
    const auto op = coordinate_operator(Vector::Ones(3));
    const std::string csv = factor_loadings_csv(op, 2);
    CHECK(csv.rfind("factor,side,rank,index,loading", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 3 * 2 * 2);
    CHECK_THROWS_AS(factor_loadings_csv(dense_operator(Matrix::Identity(3, 3)), 2), InvalidArgument);
  }

  TEST_CASE("head scan") {
    const auto data = synth::generate(small_cfg(3));
    const auto rows = scan_heads(data.tensor, data.internal, data.external, quick_scan());
    CHECK(rows.size() == 6);
    CHECK(rows[0].unit == UnitId{1, 2});
    for (std::size_t i = 0; i < rows.size(); ++i) CHECK(rows[i].rank == static_cast<int>(i) + 1);
    CHECK(scan_csv(rows).find("layer") != std::string::npos);
  }

  TEST_CASE("duplicated heads tie in unit order") {
    const auto data = synth::generate(small_cfg(4));
    std::vector<Matrix> w;
    for (int l = 0; l < 2; ++l)
      for (int h = 0; h < 3; ++h) w.push_back(data.tensor.at(l, h));
    w[4] = w[1];
    const WeightTensor t(2, 3, data.tensor.dim(), w);
    const auto rows = scan_heads(t, data.internal, data.external, quick_scan());
    std::size_t a = 0, b = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].unit == UnitId{0, 1}) a = i;
      if (rows[i].unit == UnitId{1, 1}) b = i;
    }
    CHECK(b == a + 1);
    CHECK(rows[a].score == rows[b].score);
  }

  TEST_CASE("full scan shape") {
    auto cfg = small_cfg(5);
    cfg.n_layers = 12;
    cfg.n_heads = 8;
    cfg.planted_heads = {{7, 3}};
    const auto data = synth::generate(cfg);
    auto sc = quick_scan();
    sc.opt.steps = 20;
    CHECK(scan_heads(data.tensor, data.internal, data.external, sc).size() == 96);
  }

  TEST_CASE("compact weight fitting") {
    auto cfg = small_cfg(6);
    SUBCASE("one unit is the single head") {
      const auto data = synth::generate(cfg);
      const auto fit = fit_compact_weights(data.tensor, {{1, 2}}, data.internal, quick_scan());
      CHECK(fit.alphas == std::vector<double>{1.0});
      const Matrix X = gaussian(5, cfg.G, 1);
      CHECK(fit.op.apply(X) == single_head_operator(data.tensor, {1, 2}).apply(X));
    }
    SUBCASE("split structure gets balanced weights") {
      cfg.planted_heads = {{0, 1}, {1, 2}};
      cfg.planted_split = true;
      const auto data = synth::generate(cfg);
      const auto fit = fit_compact_weights(data.tensor, {{0, 1}, {1, 2}}, data.internal, quick_scan());
      const double ratio = fit.alphas[1] / fit.alphas[0];
      CHECK(ratio >= 0.5);
      CHECK(ratio <= 2.0);
    }
    SUBCASE("a noise head does not hurt") {
      const auto data = synth::generate(cfg);
      const auto one = fit_compact_weights(data.tensor, {{1, 2}}, data.internal, quick_scan());
      const auto two = fit_compact_weights(data.tensor, {{1, 2}, {0, 0}}, data.internal, quick_scan());
      CHECK(two.loss <= one.loss * 1.05 + 1e-9);
    }
    CHECK_THROWS_AS(fit_compact_weights(synth::generate(cfg).tensor, {}, synth::generate(cfg).internal, quick_scan()), InvalidArgument);
  }
}
