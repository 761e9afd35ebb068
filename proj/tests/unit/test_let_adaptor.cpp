#include <doctest.h>

#include <cmath>
#include <functional>
#include <numbers>

#include <forge/error.hpp>
#include <forge/let_adaptor.hpp>
#include <forge/let_objective.hpp>

#include "helpers.hpp"

using namespace forge;
using testing::gaussian;

namespace {

// Unit-norm latent points, embedded isometrically in D dims; each row is its
// own stage with target = beta * angle.
struct Planted {
  AnchorPanel panel;
  Matrix embed;  // k x D with orthonormal rows
  Matrix Z;
};

Planted planted_panel(int n, int k, int D, double beta, std::uint64_t seed) {
  Planted out;
  out.Z = gaussian(n, k, seed).rowwise().normalized();
  Eigen::HouseholderQR<Matrix> qr(gaussian(D, k, seed + 1));
  out.embed = Matrix(qr.householderQ()).leftCols(k).transpose();
  auto& p = out.panel;
  p.features = out.Z * out.embed;
  std::vector<std::string> donor, tissue, branch, stage;
  for (int i = 0; i < n; ++i) {
    p.row_ids.push_back("r" + std::to_string(100 + i));
    donor.push_back("d" + std::to_string(i % 6));
    tissue.push_back("t" + std::to_string((i / 6) % 2));
    branch.push_back("b" + std::to_string(i % 3));
    stage.push_back("s" + std::to_string(i));
    p.stage_depth.push_back(i % 4);
  }
  p.donor = Categorical::from_strings(donor);
  p.tissue = Categorical::from_strings(tissue);
  p.branch = Categorical::from_strings(branch);
  p.stage = Categorical::from_strings(stage);
  p.stage_distance.resize(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      p.stage_distance(i, j) = i == j ? 0.0 : beta * std::acos(std::clamp(out.Z.row(i).dot(out.Z.row(j)), -1.0, 1.0));
  return out;
}

using LossFn = std::function<let::Terms(const let::Params&, let::Params*)>;

double gradient_rel_error(const let::Params& p, const LossFn& f) {
  let::Params g = p.zeros_like();
  f(p, &g);
  const Vector analytic = g.pack();
  const Vector x0 = p.pack();
  Vector numeric(x0.size());
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    const double h = 1e-5 * std::max(1.0, std::abs(x0(i)));
    let::Params q = p;
    Vector x = x0;
    x(i) = x0(i) + h;
    q.unpack(x);
    const double up = f(q, nullptr).total;
    x(i) = x0(i) - h;
    q.unpack(x);
    const double down = f(q, nullptr).total;
    numeric(i) = (up - down) / (2.0 * h);
  }
  return (analytic - numeric).norm() / std::max(1e-12, numeric.norm());
}

let::Params random_params(int k, int D, int classes, std::uint64_t seed) {
  let::Params p;
  p.w = gaussian(k, D, seed, 0.5);
  p.b = testing::gaussian_vector(D, seed + 1, 0.1);
  p.log_beta = 0.3;
  if (classes > 0) {
    p.cls_w = gaussian(classes, k, seed + 2, 0.3);
    p.cls_b = testing::gaussian_vector(classes, seed + 3, 0.1);
  }
  return p;
}

let::CellBatch random_batch(int m, int D, int S, std::uint64_t seed) {
  let::CellBatch b;
  b.X = gaussian(m, D, seed);
  for (int i = 0; i < m; ++i) b.stage.push_back(i % S);
  b.stage_distance.resize(S, S);
  for (int s = 0; s < S; ++s)
    for (int t = 0; t < S; ++t) b.stage_distance(s, t) = std::abs(s - t);
  b.feature_knn = let::batch_knn(b.X, 3);
  b.ref_distance = 0.8 * b.stage_distance;
  b.ref_distance(0, S - 1) = b.ref_distance(S - 1, 0) = std::numeric_limits<double>::quiet_NaN();
  return b;
}

}  // namespace

TEST_SUITE("let_adaptor") {
  TEST_CASE("latent distance examples") {
    Vector a(2), b(2), e1(2), e2(2);
    a << 1, 1;
    b << 1, 0;
    e1 << 1, 0;
    e2 << 0, 1;
    CHECK(latent_distance(a, a, 1.0) == doctest::Approx(0.0));
    CHECK(latent_distance(e1, e2, 2.0) == doctest::Approx(std::numbers::pi));
    CHECK(latent_distance(a, b, 1.0) == doctest::Approx(std::numbers::pi / 4));
    CHECK_THROWS_AS(latent_distance(Vector::Zero(2), a, 1.0), DegenerateLatent);
  }

  TEST_CASE("latent distance is scale invariant and bounded") {
    for (std::uint64_t s = 0; s < 20; ++s) {
      const Vector z1 = testing::gaussian_vector(5, 10 + s), z2 = testing::gaussian_vector(5, 50 + s);
      const double d = latent_distance(z1, z2, 1.7);
      CHECK(d >= 0.0);
      CHECK(d <= 1.7 * std::numbers::pi);
      for (double c : {1e-3, 0.5, 42.0}) CHECK(latent_distance(c * z1, c * z2, 1.7) == doctest::Approx(d).epsilon(1e-10));
    }
  }

  TEST_CASE("selection score") {
    CHECK(hybrid_selection_score(1, 1, 1, 1, 0) == doctest::Approx(1.90).epsilon(1e-12));
    CHECK(hybrid_selection_score(0, 0, 0, 0, 0) == 0.0);
    CHECK(hybrid_selection_score(0.632, 0.911, 0.851, 0.037, 0.318) == doctest::Approx(1.0237).epsilon(1e-12));
  }

  TEST_CASE("anchor gradient matches finite differences") {
    for (std::uint64_t s = 0; s < 3; ++s) {
      const Matrix X = gaussian(10, 6, 100 + s);
      Matrix T = gaussian(10, 10, 200 + s).cwiseAbs();
      T = (T + T.transpose()).eval();
      T.diagonal().setZero();
      const auto p = random_params(3, 6, 0, 300 + s);
      const double err = gradient_rel_error(p, [&](const let::Params& q, let::Params* g) { return let::anchor_loss(q, X, T, 0.7, g); });
      CHECK(err < 1e-5);
    }
  }

  TEST_CASE("cell and hybrid gradients match finite differences") {
    const auto batch = random_batch(10, 6, 4, 400);
    const let::CellWeights w{1.0, 0.1, 0.08, 0.4};
    const auto p = random_params(3, 6, 4, 401);
    SUBCASE("cell") {
      CHECK(gradient_rel_error(p, [&](const let::Params& q, let::Params* g) { return let::cell_loss(q, batch, w, {}, g); }) < 1e-5);
    }
    SUBCASE("hybrid") {
      const let::HybridWeights h{0.5, 0.2};
      CHECK(gradient_rel_error(p, [&](const let::Params& q, let::Params* g) { return let::cell_loss(q, batch, w, h, g); }) < 1e-5);
    }
  }

  TEST_CASE("cell loss with only the stage term is the anchor loss on centroids") {
    const auto batch = random_batch(12, 5, 3, 500);
    const auto p = random_params(3, 5, 3, 501);
    Matrix C = Matrix::Zero(3, 5);
    Vector count = Vector::Zero(3);
    for (int i = 0; i < 12; ++i) {
      C.row(batch.stage[static_cast<std::size_t>(i)]) += batch.X.row(i);
      count(batch.stage[static_cast<std::size_t>(i)]) += 1;
    }
    C.array().colwise() /= count.array();
    const auto cell = let::cell_loss(p, batch, {1.0, 0.0, 0.0, 0.0}, {}, nullptr);
    const auto anchor = let::anchor_loss(p, C, batch.stage_distance, 0.0, nullptr);
    CHECK(cell.total == doctest::Approx(anchor.total).epsilon(1e-10));
  }

  TEST_CASE("compactness vanishes when cells sit on their centroid") {
    auto batch = random_batch(9, 4, 3, 510);
    for (int i = 0; i < 9; ++i) batch.X.row(i) = batch.X.row(batch.stage[static_cast<std::size_t>(i)]);
    const auto p = random_params(2, 4, 3, 511);
    CHECK(let::cell_loss(p, batch, {0, 0, 0, 0}, {0.0, 1.0}, nullptr).compact == doctest::Approx(0.0).scale(1.0));
  }

  TEST_CASE("planted configuration is recovered") {
    const auto pl = planted_panel(24, 3, 8, 2.0, 600);
    TrainTrace trace;
    const auto head = train_anchor_head(pl.panel, 3, 0.0, 1, {}, &trace);
    const double target_norm2 = pl.panel.target_matrix().squaredNorm();
    CHECK(trace.final_terms.distance <= 1e-3 * target_norm2);
    CHECK(trace.final_terms.total <= trace.initial.total);
  }

  TEST_CASE("best-so-far loss never increases") {
    const auto pl = planted_panel(14, 3, 6, 1.0, 610);
    TrainTrace trace;
    OptimizerConfig opt;
    opt.steps = 300;
    train_anchor_head(pl.panel, 3, 1e-3, 2, opt, &trace);
    REQUIRE(trace.best_loss.size() == 301);
    for (std::size_t i = 1; i < trace.best_loss.size(); ++i) CHECK(trace.best_loss[i] <= trace.best_loss[i - 1]);
  }

  TEST_CASE("zero alpha never forms the pseudo-inverse") {
    const auto pl = planted_panel(12, 3, 6, 1.0, 620);
    OptimizerConfig opt;
    opt.steps = 50;
    const auto before = let::pinv_evaluations();
    train_anchor_head(pl.panel, 3, 0.0, 3, opt);
    CHECK(let::pinv_evaluations() == before);
    train_anchor_head(pl.panel, 3, 0.1, 3, opt);
    CHECK(let::pinv_evaluations() > before);
  }

  TEST_CASE("same seed gives identical trajectories") {
    const auto pl = planted_panel(12, 3, 6, 1.0, 630);
    OptimizerConfig opt;
    opt.steps = 100;
    TrainTrace a, b;
    a.record_weights = b.record_weights = true;
    const auto h1 = train_anchor_head(pl.panel, 3, 1e-3, 9, opt, &a);
    const auto h2 = train_anchor_head(pl.panel, 3, 1e-3, 9, opt, &b);
    REQUIRE(a.w_history.size() == b.w_history.size());
    for (std::size_t i = 0; i < a.w_history.size(); ++i) CHECK(a.w_history[i] == b.w_history[i]);
    CHECK(h1.to_bytes() == h2.to_bytes());
  }

  TEST_CASE("anchor training preconditions") {
    const auto pl = planted_panel(6, 3, 6, 1.0, 640);
    CHECK_THROWS_AS(train_anchor_head(pl.panel, 5, 0.0, 1), InvalidArgument);
  }

  TEST_CASE("stage-capped sampler") {
    auto cells = testing::chain_panel(gaussian(2, 3, 1), 2, 1);
    IndexList rows;
    for (int i = 0; i < 700; ++i) rows.push_back(0);
    for (int i = 0; i < 40; ++i) rows.push_back(1);
    cells = cells.subset(rows);
    for (int i = 0; i < cells.rows(); ++i) cells.row_ids[static_cast<std::size_t>(i)] = "c" + std::to_string(i);
    const auto a = stage_capped_sample(cells, 500, 5);
    CHECK(a.size() == 540);
    CHECK(std::is_sorted(a.begin(), a.end()));
    CHECK(std::count_if(a.begin(), a.end(), [](int r) { return r < 700; }) == 500);
    CHECK(stage_capped_sample(cells, 500, 5) == a);
  }

  TEST_CASE("cell and hybrid training") {
    const int n_stages = 4;
    Matrix F(n_stages * 10, 6);
    const Matrix centres = 3.0 * gaussian(n_stages, 6, 700);
    const Matrix jitter = gaussian(n_stages * 10, 6, 701, 0.2);
    for (int r = 0; r < F.rows(); ++r) F.row(r) = centres.row(r % n_stages) + jitter.row(r);
    auto cells = testing::chain_panel(F.topRows(n_stages), n_stages, 1);
    IndexList rows;
    for (int r = 0; r < F.rows(); ++r) rows.push_back(r % n_stages);
    cells = cells.subset(rows).with_features(F);
    for (int i = 0; i < cells.rows(); ++i) cells.row_ids[static_cast<std::size_t>(i)] = "c" + std::to_string(i);

    CellTrainConfig cfg;
    cfg.dim = 3;
    cfg.epochs = 3;
    cfg.batch = 16;
    cfg.n_neighbors = 3;
    const auto cell = train_cell_head(cells, cfg, 11);
    CHECK(cell.variant() == HeadVariant::cell);
    CHECK(cell.dim() == 3);

    const auto ref_panel = testing::chain_panel(centres, n_stages, 1);
    GateConfig gc;
    gc.n_perm = 9;
    gc.n_neighbors = 1;
    GateReport rep;
    const auto ref = cell.frozen_with(rep);

    HybridTrainConfig hc;
    hc.cell = cfg;
    hc.lambda_topo = 0.0;
    hc.lambda_compact = 0.0;
    const auto hyb = train_hybrid_head(cells, ref, ref_panel, hc, 11);
    CHECK(hyb.w_enc() == cell.w_enc());
    CHECK(hyb.bias() == cell.bias());

    CHECK_THROWS_AS(train_hybrid_head(cells, cell, ref_panel, hc, 11), InvalidArgument);
    auto other = ref_panel;
    for (auto& l : other.stage.levels) l = "x" + l;
    CHECK_THROWS_AS(train_hybrid_head(cells, ref, other, hc, 11), InvalidArgument);

    cfg.batch = 1000;
    CHECK_THROWS_AS(train_cell_head(cells, cfg, 11), InvalidArgument);
  }

  TEST_CASE("gate on an exact planted head") {
    const auto pl = planted_panel(60, 3, 8, 1.0, 800);
    const LetHead head(HeadVariant::anchor, pl.embed, Vector::Zero(8), 1.0, Json::object(), 1);
    GateConfig gc;
    const auto r = gate(head, pl.panel, gc, 5);
    CHECK(r.trustworthiness >= 0.99);
    CHECK(r.corr_random >= 0.95);
    CHECK(r.corr_donor >= 0.95);
    CHECK(r.corr_clade >= 0.95);
    CHECK(r.blocked_p == doctest::Approx(1.0 / 2000.0).epsilon(1e-12));
    CHECK(r.passed);

    SUBCASE("determinism and row-order invariance") {
      CHECK(gate(head, pl.panel, gc, 5).to_json() == r.to_json());
      IndexList rev(60);
      for (int i = 0; i < 60; ++i) rev[static_cast<std::size_t>(i)] = 59 - i;
      CHECK(gate(head, pl.panel.subset(rev), gc, 5).to_json() == r.to_json());
    }

    SUBCASE("pass rule follows the thresholds") {
      GateConfig strict = gc;
      strict.thresholds.trustworthiness = 1.01;
      CHECK_FALSE(gate(head, pl.panel, strict, 5).passed);
    }

    SUBCASE("transfer is pure and keeps the head bytes") {
      const auto frozen = head.frozen_with(r);
      const std::string bytes = frozen.to_bytes();
      for (int i = 0; i < 3; ++i) {
        const auto [Z, rep] = transfer(frozen, pl.panel, gc, 5);
        CHECK(Z == frozen.encode(pl.panel.features));
        CHECK(rep.to_json() == r.to_json());
      }
      CHECK(frozen.to_bytes() == bytes);
      CHECK_THROWS_AS(transfer(frozen, pl.panel.with_features(gaussian(60, 7, 1)), gc, 5), ShapeError);
      CHECK_THROWS_AS(transfer(head, pl.panel, gc, 5), InvalidArgument);
    }
  }

  TEST_CASE("donor holdout selection") {
    const auto pl = planted_panel(24, 3, 6, 1.0, 640);
    const auto held = draw_donors(pl.panel, 2, 5);
    CHECK(held.size() == 2);
    CHECK(std::is_sorted(held.begin(), held.end()));
    CHECK(held == draw_donors(pl.panel, 2, 5));
    const auto test = select_donors(pl.panel, held, true);
    const auto train = select_donors(pl.panel, held, false);
    CHECK(test.rows() + train.rows() == pl.panel.rows());
    CHECK(test.rows() == 8);
    for (int i = 0; i < train.rows(); ++i)
      CHECK(std::find(held.begin(), held.end(), train.donor.label(static_cast<std::size_t>(i))) == held.end());
    CHECK_THROWS_AS(draw_donors(pl.panel, 6, 1), InvalidArgument);
  }

  TEST_CASE("gate on too few rows") {
    const auto pl = planted_panel(4, 2, 4, 1.0, 810);
    const LetHead head(HeadVariant::anchor, pl.embed, Vector::Zero(4), 1.0, Json::object(), 1);
    CHECK_THROWS_AS(gate(head, pl.panel.subset({0, 1}), GateConfig{}, 1), InsufficientData);
  }

  TEST_CASE("head container round trip") {
    const auto pl = planted_panel(10, 3, 5, 1.0, 820);
    Json hyper{{"alpha", 0.001}};
    const LetHead head(HeadVariant::hybrid, gaussian(3, 5, 1), testing::gaussian_vector(5, 2), 1.37, hyper, 77);
    GateReport rep;
    rep.trustworthiness = 0.9;
    rep.passed = true;
    const auto frozen = head.frozen_with(rep);
    const auto back = LetHead::from_container(Container::from_bytes(frozen.to_bytes()));
    CHECK(back.to_bytes() == frozen.to_bytes());
    CHECK(back.variant() == HeadVariant::hybrid);
    CHECK(back.frozen());
    CHECK(back.seed() == 77);
    CHECK(back.encode(pl.panel.features) == frozen.encode(pl.panel.features));
  }
}
