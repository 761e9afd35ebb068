#include "forge/synth.hpp"

#include <cmath>
#include <cstdio>
#include <deque>
#include <random>
#include <set>

#include "forge/error.hpp"
#include "forge/rng.hpp"

namespace forge::synth {
namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = nd(rng);
  return m;
}

Matrix random_orthogonal(int n, Rng& rng) {
  Eigen::HouseholderQR<Matrix> qr(gaussian(n, n, rng));
  Matrix q = qr.householderQ() * Matrix::Identity(n, n);
  // Sign fix so the draw is a deterministic function of the Gaussian sample.
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < n; ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  return q;
}

Matrix low_rank_noise(int G, int rank, double frob, Rng& rng) {
  Matrix m = gaussian(G, rank, rng) * gaussian(rank, G, rng);
  return m * (frob / m.norm());
}

std::string padded(const char* prefix, int i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*d", prefix, width, i);
  return buf;
}

}  // namespace

int StageTree::index_of(const std::string& stage) const {
  for (int i = 0; i < size(); ++i)
    if (names[static_cast<std::size_t>(i)] == stage) return i;
  throw InvalidArgument("unknown stage '" + stage + "'");
}

IndexList StageTree::children(int stage) const {
  IndexList out;
  for (int i = 0; i < size(); ++i)
    if (parent[static_cast<std::size_t>(i)] == stage) out.push_back(i);
  return out;
}

StageTree make_tree(int n_branches, int depth_per_branch) {
  if (n_branches < 1 || depth_per_branch < 1) throw InvalidArgument("tree needs >= 1 branch of depth >= 1");
  StageTree t;
  t.names.push_back("root");
  t.parent.push_back(-1);
  t.depth.push_back(0);
  t.branch.push_back("trunk");
  for (int b = 0; b < n_branches; ++b) {
    for (int d = 1; d <= depth_per_branch; ++d) {
      t.names.push_back("b" + std::to_string(b) + "_d" + std::to_string(d));
      t.parent.push_back(d == 1 ? 0 : t.size() - 2);
      t.depth.push_back(d);
      t.branch.push_back("b" + std::to_string(b));
    }
  }
  return t;
}

int oracle_stage_distance(const std::string& a, const std::string& b, const StageTree& tree) {
  const int src = tree.index_of(a), dst = tree.index_of(b);
  std::vector<int> dist(static_cast<std::size_t>(tree.size()), -1);
  std::deque<int> queue{src};
  dist[static_cast<std::size_t>(src)] = 0;
  while (!queue.empty()) {
    const int u = queue.front();
    queue.pop_front();
    if (u == dst) return dist[static_cast<std::size_t>(u)];
    IndexList nbrs = tree.children(u);
    if (tree.parent[static_cast<std::size_t>(u)] >= 0) nbrs.push_back(tree.parent[static_cast<std::size_t>(u)]);
    for (int v : nbrs) {
      if (dist[static_cast<std::size_t>(v)] >= 0) continue;
      dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
      queue.push_back(v);
    }
  }
  throw InvalidArgument("stages are not connected");
}

Matrix hop_matrix(const StageTree& tree) {
  const int S = tree.size();
  Matrix h(S, S);
  for (int i = 0; i < S; ++i)
    for (int j = 0; j < S; ++j)
      h(i, j) = oracle_stage_distance(tree.names[static_cast<std::size_t>(i)], tree.names[static_cast<std::size_t>(j)], tree);
  return h;
}

void SynthConfig::validate() const {
  auto need = [](bool ok, const std::string& field, const std::string& rule) {
    if (!ok) throw InvalidArgument("synth." + field + ": " + rule);
  };
  need(n_branches >= 1, "n_branches", "must be >= 1");
  need(depth_per_branch >= 1, "depth_per_branch", "must be >= 1");
  need(n_donors >= 2, "n_donors", "must be >= 2");
  need(n_external_donors >= 1 && n_external_donors < n_donors, "n_external_donors", "must be in [1, n_donors)");
  need(n_tissues >= 2, "n_tissues", "must be >= 2");
  need(cells_per_stage >= 1, "cells_per_stage", "must be >= 1");
  need(G >= 16, "G", "must be >= 16");
  need(noise_sigma >= 0.0, "noise_sigma", "must be >= 0");
  need(n_layers >= 1 && n_heads >= 1, "n_layers", "tensor needs >= 1 layer and head");
  need(!planted_heads.empty(), "planted_heads", "must be non-empty");
  std::set<UnitId> seen;
  for (const auto& u : planted_heads) {
    need(u.layer >= 0 && u.layer < n_layers && u.head >= 0 && u.head < n_heads, "planted_heads", "unit out of range");
    need(seen.insert(u).second, "planted_heads", "duplicate unit");
  }
  need(!planted_split || planted_heads.size() == 2, "planted_split", "needs exactly two planted heads");
  need(nuisance_rank >= 0, "nuisance_rank", "must be >= 0");
  need(progression >= 0.0 && progression <= 1.0, "progression", "must be in [0, 1]");
  need(distractor_rank >= 1 && distractor_rank <= G, "distractor_rank", "must be in [1, G]");
  need(edge_length > 0.0, "edge_length", "must be > 0");
  const int s = 1 + n_branches * depth_per_branch;
  need(G >= s + 2 + nuisance_rank, "G", "must be >= code axes + subtype + nuisance + 1 (" +
                                            std::to_string(s + 2 + nuisance_rank) + ")");
  need(distractor_scale >= 0.0 && nuisance_cell_scale >= 0.0 && nuisance_group_scale >= 0.0 && donor_effect >= 0.0 &&
           tissue_effect >= 0.0,
       "scales", "must be >= 0");
}

SynthData generate(const SynthConfig& cfg) {
  cfg.validate();
  SynthData out;
  Truth& truth = out.truth;
  truth.tree = make_tree(cfg.n_branches, cfg.depth_per_branch);
  const StageTree& tree = truth.tree;
  const int S = tree.size();
  const int G = cfg.G;
  const int s_axes = S;  // root axis + one axis per edge
  Rng basis_rng = make_rng(cfg.seed, 1);
  const Matrix Q = random_orthogonal(G, basis_rng);
  truth.signal_basis = Q.leftCols(s_axes + 1);
  truth.nuisance_basis = Q.middleCols(s_axes + 1, cfg.nuisance_rank);
  const Matrix complement = Q.rightCols(G - s_axes - 1 - cfg.nuisance_rank);
  const Vector subtype_axis = Q.col(s_axes);

  // code(stage) = e_0 + sum of edge axes on the root path; squared code distance = hops.
  Matrix code = Matrix::Zero(S, s_axes);
  for (int t = 0; t < S; ++t) {
    code(t, 0) = 1.0;
    for (int u = t; u > 0; u = tree.parent[static_cast<std::size_t>(u)]) code(t, u) = 1.0;
  }
  const Matrix prototypes = cfg.edge_length * code * truth.signal_basis.leftCols(s_axes).transpose();  // S x G

  // Planted map reads the signal subspace (code axes + subtype axis).
  truth.planted_rank = s_axes + 1;
  Rng head_rng = make_rng(cfg.seed, 2);
  const Matrix write = random_orthogonal(G, head_rng).leftCols(truth.planted_rank).transpose();  // (s+1) x G
  truth.planted_head = truth.signal_basis * write;
  truth.planted_heads = cfg.planted_heads;
  const double frob = truth.planted_head.norm();

  std::vector<Matrix> weights;
  std::set<UnitId> planted(cfg.planted_heads.begin(), cfg.planted_heads.end());
  // Split heads share the planted write space but also read non-signal directions; only their sum is clean.
  const Matrix raw_split = low_rank_noise(G, truth.planted_rank, frob, head_rng);
  Matrix split_noise = (Matrix::Identity(G, G) - truth.signal_basis * truth.signal_basis.transpose()) * raw_split *
                       (write.transpose() * write);
  split_noise *= 20.0 * frob / split_noise.norm();
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) {
      const UnitId u{l, h};
      Matrix distractor = low_rank_noise(G, cfg.distractor_rank, cfg.distractor_scale * frob, head_rng);
      if (!planted.count(u)) {
        weights.push_back(std::move(distractor));
      } else if (cfg.planted_split) {
        weights.push_back(truth.planted_head + (u == cfg.planted_heads[0] ? 1.0 : -1.0) * split_noise);
      } else {
        weights.push_back(truth.planted_head);
      }
    }
  }
  out.tensor = WeightTensor(cfg.n_layers, cfg.n_heads, G, std::move(weights));

  Rng effect_rng = make_rng(cfg.seed, 3);
  auto offset = [&](double norm) {
    Vector v = complement * gaussian(complement.cols(), 1, effect_rng);
    return Vector(v * (norm / v.norm()));
  };
  std::vector<Vector> donor_off, tissue_off;
  for (int d = 0; d < cfg.n_donors; ++d) donor_off.push_back(offset(cfg.donor_effect));
  for (int t = 0; t < cfg.n_tissues; ++t) tissue_off.push_back(offset(cfg.tissue_effect));

  const int n_internal = cfg.n_donors - cfg.n_external_donors;
  std::vector<Vector> rows;
  std::vector<std::string> ids, donor, tissue, branch, stage, subtype;
  std::vector<int> depth;
  Rng cell_rng = make_rng(cfg.seed, 4);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  for (int d = 0; d < cfg.n_donors; ++d) {
    const bool external = d >= n_internal;
    const int tissues = external ? cfg.n_tissues : cfg.n_tissues - 1;
    for (int t = 0; t < tissues; ++t) {
      for (int st = 0; st < S; ++st) {
        Vector group(cfg.nuisance_rank);
        for (int r = 0; r < cfg.nuisance_rank; ++r) group(r) = cfg.nuisance_group_scale * nd(cell_rng);
        for (int c = 0; c < cfg.cells_per_stage; ++c) {
          Vector x = prototypes.row(st).transpose() + donor_off[static_cast<std::size_t>(d)] +
                     tissue_off[static_cast<std::size_t>(t)];
          Vector coef = group;
          for (int r = 0; r < cfg.nuisance_rank; ++r) coef(r) += cfg.nuisance_cell_scale * nd(cell_rng);
          x += truth.nuisance_basis * coef;
          if (cfg.progression > 0.0 && st > 0)
            x -= cfg.progression * std::uniform_real_distribution<double>(0.0, 1.0)(cell_rng) * cfg.edge_length *
                 truth.signal_basis.col(st);
          const bool sub = coin(cell_rng);
          if (sub) x += cfg.subtype_shift * subtype_axis;
          for (int g = 0; g < G; ++g) x(g) += cfg.noise_sigma * nd(cell_rng);
          ids.push_back(padded("c", static_cast<int>(rows.size()), 6));
          rows.push_back(std::move(x));
          donor.push_back("d" + std::to_string(d));
          tissue.push_back("t" + std::to_string(t));
          branch.push_back(tree.branch[static_cast<std::size_t>(st)]);
          stage.push_back(tree.names[static_cast<std::size_t>(st)]);
          subtype.push_back(sub ? "1" : "0");
          depth.push_back(tree.depth[static_cast<std::size_t>(st)]);
        }
      }
    }
  }

  AnchorPanel& cells = out.cells;
  cells.features.resize(static_cast<Eigen::Index>(rows.size()), G);
  for (std::size_t i = 0; i < rows.size(); ++i) cells.features.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  cells.row_ids = ids;
  cells.donor = Categorical::from_strings(donor);
  cells.tissue = Categorical::from_strings(tissue);
  cells.branch = Categorical::from_strings(branch);
  cells.stage.levels = tree.names;
  for (const auto& name : stage) cells.stage.codes.push_back(tree.index_of(name));
  cells.stage_depth = depth;
  cells.stage_distance = hop_matrix(tree);
  Categorical sub;
  sub.levels = {"0", "1"};
  for (const auto& v : subtype) sub.codes.push_back(v == "1" ? 1 : 0);
  cells.labels["subtype"] = sub;
  cells.validate();

  IndexList internal_rows, external_rows;
  for (int i = 0; i < cells.rows(); ++i) {
    const int d = std::stoi(cells.donor.label(static_cast<std::size_t>(i)).substr(1));
    (d < n_internal ? internal_rows : external_rows).push_back(i);
  }
  out.internal_cells = cells.subset(internal_rows);
  out.external_cells = cells.subset(external_rows);
  out.internal = aggregate_anchors(out.internal_cells);
  out.external = aggregate_anchors(out.external_cells);
  return out;
}

}  // namespace forge::synth
