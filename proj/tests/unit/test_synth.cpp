#include <doctest.h>

#include <algorithm>
#include <array>
#include <set>

#include <forge/compaction.hpp>
#include <forge/error.hpp>
#include <forge/let_adaptor.hpp>
#include <forge/synth.hpp>

#include "helpers.hpp"

using namespace forge;
using namespace forge::synth;

namespace {

SynthConfig small() {
  SynthConfig cfg;
  cfg.n_donors = 4;
  cfg.n_external_donors = 2;
  cfg.n_tissues = 2;
  cfg.cells_per_stage = 2;
  cfg.G = 32;
  return cfg;
}

std::set<std::string> levels_present(const Categorical& c) {
  std::set<std::string> out;
  for (std::size_t i = 0; i < c.size(); ++i) out.insert(c.label(i));
  return out;
}

}  // namespace

TEST_SUITE("synth") {
  TEST_CASE("stage tree distances") {
    const auto tree = make_tree(3, 3);
    CHECK(tree.size() == 10);
    CHECK(oracle_stage_distance("b0_d2", "b0_d2", tree) == 0);
    CHECK(oracle_stage_distance("b0_d1", "b0_d2", tree) == 1);
    CHECK(oracle_stage_distance("root", "b2_d1", tree) == 1);
    CHECK(oracle_stage_distance("b0_d1", "b1_d1", tree) == 2);
    CHECK(oracle_stage_distance("b0_d3", "b2_d2", tree) == 5);
    CHECK_THROWS_AS(oracle_stage_distance("root", "nope", tree), InvalidArgument);
  }

  TEST_CASE("tree metric satisfies the four-point condition") {
    const auto tree = make_tree(3, 3);
    const Matrix D = hop_matrix(tree);
    const int n = tree.size();
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        for (int c = 0; c < n; ++c)
          for (int d = 0; d < n; ++d) {
            std::array<double, 3> s{D(a, b) + D(c, d), D(a, c) + D(b, d), D(a, d) + D(b, c)};
            std::sort(s.begin(), s.end());
            CHECK(s[1] == s[2]);
          }
  }

  TEST_CASE("generated panels") {
    const auto data = generate(small());
    CHECK(data.tensor.n_layers() == 4);
    CHECK(data.tensor.n_heads() == 4);
    CHECK(data.internal.stage_distance == hop_matrix(data.truth.tree));
    for (int i = 0; i < data.internal.rows(); ++i)
      for (int j = 0; j < data.internal.rows(); ++j)
        if (data.internal.stage.codes[static_cast<std::size_t>(i)] == data.internal.stage.codes[static_cast<std::size_t>(j)])
          CHECK(data.internal.target(i, j) == 0.0);

    const auto in_donors = levels_present(data.internal.donor);
    const auto ex_donors = levels_present(data.external.donor);
    CHECK(in_donors.size() == 2);
    CHECK(ex_donors.size() == 2);
    for (const auto& d : ex_donors) CHECK_FALSE(in_donors.count(d));
    const auto in_tissues = levels_present(data.internal.tissue);
    bool unseen_tissue = false;
    for (const auto& t : levels_present(data.external.tissue)) unseen_tissue |= !in_tissues.count(t);
    CHECK(unseen_tissue);
    CHECK(data.internal_cells.rows() + data.external_cells.rows() == data.cells.rows());
    CHECK(data.internal.labels.count("subtype"));
    data.internal.validate();
    data.external.validate();
  }

  TEST_CASE("same seed regenerates identical bytes") {
    const auto a = generate(small());
    const auto b = generate(small());
    CHECK(a.tensor.to_container().to_bytes() == b.tensor.to_container().to_bytes());
    CHECK(a.cells.to_container().to_bytes() == b.cells.to_container().to_bytes());
    auto other = small();
    other.seed = 8;
    CHECK(generate(other).cells.to_container().to_bytes() != a.cells.to_container().to_bytes());
  }

  TEST_CASE("progression zero leaves the default stream untouched") {
    auto cfg = small();
    const auto base = generate(cfg);
    cfg.progression = 0.5;
    const auto moved = generate(cfg);
    CHECK(moved.tensor.to_container().to_bytes() == base.tensor.to_container().to_bytes());
    CHECK_FALSE(moved.cells.features.isApprox(base.cells.features));
  }

  TEST_CASE("infeasible configurations") {
    auto cfg = small();
    cfg.n_donors = 1;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
    cfg = small();
    cfg.noise_sigma = -1;
    CHECK_THROWS_AS(generate(cfg), InvalidArgument);
    cfg = small();
    cfg.planted_heads = {{9, 0}};
    CHECK_THROWS_AS(generate(cfg), InvalidArgument);
    cfg = small();
    cfg.progression = 2.0;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  }

  TEST_CASE("noise-free planted head ranks first") {
    auto cfg = small();
    cfg.noise_sigma = 0.0;
    cfg.n_layers = 2;
    cfg.n_heads = 3;
    cfg.planted_heads = {{0, 2}};
    const auto data = generate(cfg);
    compaction::ScanConfig sc;
    sc.k = 4;
    sc.opt.steps = 300;
    const auto rows = compaction::scan_heads(data.tensor, data.internal, data.external, sc);
    CHECK(rows[0].unit == UnitId{0, 2});
  }

  TEST_CASE("noise-free chain is fit by the planted head") {
    auto cfg = small();
    cfg.noise_sigma = 0.0;
    cfg.n_branches = 1;
    cfg.depth_per_branch = 4;
    const auto data = generate(cfg);
    const auto op = single_head_operator(data.tensor, cfg.planted_heads[0]);
    const auto panel = data.internal.with_features(op.apply(data.internal.features));
    TrainTrace trace;
    train_anchor_head(panel, 4, 0.0, 1, {}, &trace);
    CHECK(trace.final_terms.distance <= 1e-3 * panel.target_matrix().squaredNorm());
  }
}
