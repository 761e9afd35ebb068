#include "forge/let_adaptor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "forge/error.hpp"
#include "forge/metrics.hpp"
#include "forge/rng.hpp"
#include "forge/stats.hpp"

namespace forge {
namespace {

class Adam {
 public:
  Adam(Eigen::Index n, const OptimizerConfig& c) : m_(Vector::Zero(n)), v_(Vector::Zero(n)), c_(c) {}

  void step(Vector& x, const Vector& g) {
    ++t_;
    m_ = c_.beta1 * m_ + (1.0 - c_.beta1) * g;
    v_ = c_.beta2 * v_ + (1.0 - c_.beta2) * g.cwiseAbs2();
    const double bc1 = 1.0 - std::pow(c_.beta1, t_);
    const double bc2 = 1.0 - std::pow(c_.beta2, t_);
    x.array() -= c_.learning_rate * (m_.array() / bc1) / ((v_.array() / bc2).sqrt() + c_.eps);
  }

 private:
  Vector m_, v_;
  OptimizerConfig c_;
  int t_ = 0;
};

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double sd, Rng& rng) {
  std::normal_distribution<double> nd(0.0, sd);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = nd(rng);
  return m;
}

let::Params init_params(const Matrix& X, int k, int n_classes, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0);
  let::Params p;
  p.w = gaussian(k, X.cols(), 1.0 / std::sqrt(static_cast<double>(X.cols())), rng);
  p.b = X.colwise().mean().transpose();
  p.log_beta = 0.0;
  if (n_classes > 0) {
    p.cls_w = gaussian(n_classes, k, 0.01, rng);
    p.cls_b = Vector::Zero(n_classes);
  } else {
    p.cls_w.resize(0, k);
    p.cls_b.resize(0);
  }
  return p;
}

bool all_finite(const let::Params& g) {
  return g.w.allFinite() && g.b.allFinite() && std::isfinite(g.log_beta) && g.cls_w.allFinite() &&
         g.cls_b.allFinite();
}

Json cell_hyper(const CellTrainConfig& cfg) {
  return Json{{"w_stage", cfg.weights.stage},       {"w_local", cfg.weights.local},
              {"w_recon", cfg.weights.recon},       {"w_cls", cfg.weights.cls},
              {"cap_per_stage", cfg.cap_per_stage}, {"epochs", cfg.epochs},
              {"batch", cfg.batch},                 {"n_neighbors", cfg.n_neighbors},
              {"learning_rate", cfg.opt.learning_rate}};
}

let::Params fit_cells(const AnchorPanel& cells, const CellTrainConfig& cfg, const let::HybridWeights& hw,
                      const Matrix& ref_distance, std::uint64_t seed, TrainTrace* trace) {
  if (cfg.dim < 2) throw InvalidArgument("latent dim must be >= 2");
  for (int s = 0; s < cells.stage.n_levels(); ++s)
    if (cells.rows_where(cells.stage, cells.stage.levels[static_cast<std::size_t>(s)]).empty())
      throw InvalidArgument("stage '" + cells.stage.levels[static_cast<std::size_t>(s)] + "' has no cells");
  const IndexList sample = stage_capped_sample(cells, cfg.cap_per_stage, derive_seed(seed, 1));
  const int n = static_cast<int>(sample.size());
  if (cfg.batch > n)
    throw InvalidArgument("batch " + std::to_string(cfg.batch) + " larger than sampled set " + std::to_string(n));
  if (cfg.batch < 3) throw InvalidArgument("batch must be >= 3");
  if (cfg.epochs < 1) throw InvalidArgument("epochs must be >= 1");

  Matrix X(n, cells.dim());
  std::vector<int> stage(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    X.row(i) = cells.features.row(sample[static_cast<std::size_t>(i)]);
    stage[static_cast<std::size_t>(i)] = cells.stage.codes[static_cast<std::size_t>(sample[static_cast<std::size_t>(i)])];
  }
  const int n_classes = cfg.weights.cls != 0.0 ? cells.stage.n_levels() : 0;
  let::Params p = init_params(X, cfg.dim, n_classes, seed);
  Vector flat = p.pack();
  Adam adam(flat.size(), cfg.opt);
  Rng order_rng = make_rng(seed, 2);
  IndexList order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const int n_batches = n / cfg.batch;
  const int knn = std::min(cfg.n_neighbors, cfg.batch - 1);

  auto make_batch = [&](int start) {
    let::CellBatch batch;
    batch.X.resize(cfg.batch, X.cols());
    batch.stage.resize(static_cast<std::size_t>(cfg.batch));
    for (int r = 0; r < cfg.batch; ++r) {
      const int row = order[static_cast<std::size_t>(start + r)];
      batch.X.row(r) = X.row(row);
      batch.stage[static_cast<std::size_t>(r)] = stage[static_cast<std::size_t>(row)];
    }
    batch.stage_distance = cells.stage_distance;
    batch.ref_distance = ref_distance;
    if (cfg.weights.local != 0.0) batch.feature_knn = let::batch_knn(batch.X, knn);
    return batch;
  };

  int step = 0;
  double best = std::numeric_limits<double>::infinity();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double sum = 0.0;
    for (int bi = 0; bi < n_batches; ++bi, ++step) {
      const let::CellBatch batch = make_batch(bi * cfg.batch);
      p.unpack(flat);
      let::Params g;
      const let::Terms t = let::cell_loss(p, batch, cfg.weights, hw, &g);
      if (!std::isfinite(t.total) || !all_finite(g))
        throw DivergenceError("non-finite cell loss", step);
      if (trace && epoch == 0 && bi == 0) trace->initial = t;
      sum += t.total;
      adam.step(flat, g.pack());
    }
    const double mean = sum / n_batches;
    if (trace) {
      best = std::min(best, mean);
      trace->loss.push_back(mean);
      trace->best_loss.push_back(best);
      if (trace->record_weights) {
        let::Params q = p;
        q.unpack(flat);
        trace->w_history.push_back(q.w);
      }
    }
  }
  p.unpack(flat);
  if (trace) {
    std::shuffle(order.begin(), order.end(), order_rng);
    trace->final_terms = let::cell_loss(p, make_batch(0), cfg.weights, hw, nullptr);
  }
  return p;
}

std::vector<std::pair<int, int>> pairs_touching(int n, const std::vector<bool>& held) {
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (held[static_cast<std::size_t>(i)] || held[static_cast<std::size_t>(j)]) out.emplace_back(i, j);
  return out;
}

int rows_touched(int n, const std::vector<std::pair<int, int>>& pairs) {
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  for (auto [i, j] : pairs) seen[static_cast<std::size_t>(i)] = seen[static_cast<std::size_t>(j)] = true;
  return static_cast<int>(std::count(seen.begin(), seen.end(), true));
}

double split_corr(const Matrix& pred, const Matrix& target, const std::vector<std::pair<int, int>>& pairs,
                  const std::string& name, int n) {
  if (rows_touched(n, pairs) < 3 || pairs.size() < 3)
    throw InsufficientData(name + " split holds out fewer than 3 rows");
  Vector a(static_cast<Eigen::Index>(pairs.size())), b(a.size());
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    a(static_cast<Eigen::Index>(p)) = pred(pairs[p].first, pairs[p].second);
    b(static_cast<Eigen::Index>(p)) = target(pairs[p].first, pairs[p].second);
  }
  return metrics::spearman(a, b);
}

// Levels present in `col`, sorted by name, shuffled by seed; the first `count` are held out.
std::vector<bool> hold_out_levels(const Categorical& col, const std::vector<std::string>& eligible, int count,
                                  std::uint64_t seed) {
  std::vector<std::string> names = eligible;
  std::sort(names.begin(), names.end());
  Rng rng(seed);
  std::shuffle(names.begin(), names.end(), rng);
  const std::set<std::string> held(names.begin(), names.begin() + std::min<std::size_t>(names.size(), count));
  std::vector<bool> out(col.size());
  for (std::size_t i = 0; i < col.size(); ++i) out[i] = held.count(col.label(i)) > 0;
  return out;
}

}  // namespace

std::string to_string(HeadVariant v) {
  switch (v) {
    case HeadVariant::anchor: return "anchor";
    case HeadVariant::cell: return "cell";
    case HeadVariant::hybrid: return "hybrid";
  }
  return "anchor";
}

HeadVariant head_variant_from_string(const std::string& s) {
  if (s == "anchor") return HeadVariant::anchor;
  if (s == "cell") return HeadVariant::cell;
  if (s == "hybrid") return HeadVariant::hybrid;
  throw InvalidArgument("unknown head variant '" + s + "' (expected anchor|cell|hybrid)");
}

double latent_distance(const Vector& z_i, const Vector& z_j, double beta) {
  if (z_i.size() != z_j.size()) throw ShapeError("latent vectors differ in length");
  const double ni = z_i.norm(), nj = z_j.norm();
  if (!(ni >= 1e-12) || !(nj >= 1e-12)) throw DegenerateLatent("latent vector norm below 1e-12");
  const double c = std::clamp(z_i.dot(z_j) / (ni * nj), -1.0 + let::kCosClamp, 1.0 - let::kCosClamp);
  return beta * std::acos(c);
}

Json GateReport::to_json() const {
  return Json{{"trustworthiness", trustworthiness}, {"corr_random", corr_random}, {"corr_donor", corr_donor},
              {"corr_clade", corr_clade},           {"blocked_p", blocked_p},     {"passed", passed},
              {"corr_all", corr_all},               {"corr_resid", corr_resid},   {"n_rows", n_rows},
              {"n_neighbors", n_neighbors}};
}

GateReport GateReport::from_json(const Json& j) {
  GateReport r;
  auto num = [&](const char* key) {
    const auto& v = j.at(key);
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  };
  r.trustworthiness = num("trustworthiness");
  r.corr_random = num("corr_random");
  r.corr_donor = num("corr_donor");
  r.corr_clade = num("corr_clade");
  r.blocked_p = num("blocked_p");
  r.passed = j.at("passed").get<bool>();
  r.corr_all = num("corr_all");
  r.corr_resid = num("corr_resid");
  r.n_rows = j.at("n_rows").get<int>();
  r.n_neighbors = j.at("n_neighbors").get<int>();
  return r;
}

LetHead::LetHead(HeadVariant variant, Matrix w_enc, Vector b, double beta, Json hyper, std::uint64_t seed)
    : variant_(variant), w_(std::move(w_enc)), b_(std::move(b)), beta_(beta), hyper_(std::move(hyper)), seed_(seed) {
  if (w_.rows() < 2) throw InvalidArgument("latent dim must be >= 2");
  if (b_.size() != w_.cols()) throw ShapeError("bias length must equal the adaptor input dim");
  if (!(beta_ > 0.0) || !std::isfinite(beta_)) throw InvalidArgument("beta must be positive and finite");
  if (!w_.allFinite() || !b_.allFinite()) throw InvalidArgument("adaptor parameters must be finite");
}

LetHead LetHead::frozen_with(const GateReport& report) const {
  LetHead h = *this;
  h.gate_ = report;
  return h;
}

Matrix LetHead::encode(const Matrix& X) const {
  if (!X.allFinite()) throw InvalidArgument("adaptor input contains non-finite values");
  return let::encode(w_, b_, X);
}

Matrix LetHead::latent_distances(const Matrix& Z) const { return beta_ * let::angle_matrix(Z); }

Container LetHead::to_container() const {
  Json meta{{"kind", "let_head"},   {"variant", to_string(variant_)}, {"k", dim()}, {"D", input_dim()},
            {"hyper", hyper_},      {"seed", seed_},                  {"beta", beta_}};
  meta["gate"] = gate_ ? gate_->to_json() : Json(nullptr);
  Container c(std::move(meta));
  c.add("W_enc", w_);
  c.add("b", b_.transpose());
  Matrix beta(1, 1);
  beta(0, 0) = beta_;
  c.add("beta", beta);
  return c;
}

LetHead LetHead::from_container(const Container& c) {
  const Json& m = c.meta();
  if (m.value("kind", "") != "let_head") throw FormatError("container is not a LET head");
  LetHead h(head_variant_from_string(m.at("variant").get<std::string>()), c.block("W_enc"),
            c.block("b").row(0).transpose(), c.block("beta")(0, 0), m.at("hyper"), m.at("seed").get<std::uint64_t>());
  if (h.dim() != m.at("k").get<int>() || h.input_dim() != m.at("D").get<int>())
    throw FormatError("LET head header shape disagrees with payload");
  if (!m.at("gate").is_null()) h.gate_ = GateReport::from_json(m.at("gate"));
  return h;
}

LetHead train_anchor_head(const AnchorPanel& panel, int k, double alpha, std::uint64_t seed,
                          const OptimizerConfig& opt, TrainTrace* trace) {
  panel.validate();
  if (k < 2) throw InvalidArgument("latent dim must be >= 2");
  if (panel.rows() < k + 2)
    throw InvalidArgument("anchor head needs n >= k+2 rows (n=" + std::to_string(panel.rows()) + ", k=" +
                          std::to_string(k) + ")");
  if (alpha < 0.0) throw InvalidArgument("alpha must be >= 0");
  const Matrix target = panel.target_matrix();
  let::Params p = init_params(panel.features, k, 0, seed);
  let::Params best_p = p;
  Vector flat = p.pack();
  Adam adam(flat.size(), opt);
  double best = std::numeric_limits<double>::infinity();
  for (int step = 0; step <= opt.steps; ++step) {
    p.unpack(flat);
    let::Params g;
    const let::Terms t = let::anchor_loss(p, panel.features, target, alpha, step < opt.steps ? &g : nullptr);
    if (!std::isfinite(t.total)) throw DivergenceError("non-finite anchor loss", step);
    if (step == 0 && trace) trace->initial = t;
    if (t.total < best) {
      best = t.total;
      best_p = p;
      if (trace) trace->final_terms = t;
    }
    if (trace) {
      trace->loss.push_back(t.total);
      trace->best_loss.push_back(best);
      if (trace->record_weights) trace->w_history.push_back(p.w);
    }
    if (step == opt.steps) break;
    if (!all_finite(g)) throw DivergenceError("non-finite anchor gradient", step);
    adam.step(flat, g.pack());
  }
  Json hyper{{"alpha", alpha}, {"steps", opt.steps}, {"learning_rate", opt.learning_rate}};
  return LetHead(HeadVariant::anchor, best_p.w, best_p.b, std::exp(best_p.log_beta), std::move(hyper), seed);
}

IndexList stage_capped_sample(const AnchorPanel& cells, int cap, std::uint64_t seed) {
  if (cap < 1) throw InvalidArgument("cap_per_stage must be >= 1");
  std::vector<IndexList> by_stage(static_cast<std::size_t>(cells.stage.n_levels()));
  for (int i = 0; i < cells.rows(); ++i) by_stage[static_cast<std::size_t>(cells.stage.codes[static_cast<std::size_t>(i)])].push_back(i);
  IndexList out;
  for (std::size_t s = 0; s < by_stage.size(); ++s) {
    IndexList rows = by_stage[s];
    if (static_cast<int>(rows.size()) > cap) {
      Rng rng = make_rng(seed, s);
      std::shuffle(rows.begin(), rows.end(), rng);
      rows.resize(static_cast<std::size_t>(cap));
    }
    out.insert(out.end(), rows.begin(), rows.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

LetHead train_cell_head(const AnchorPanel& cells, const CellTrainConfig& cfg, std::uint64_t seed, TrainTrace* trace) {
  cells.validate();
  const let::Params p = fit_cells(cells, cfg, {}, Matrix(), seed, trace);
  return LetHead(HeadVariant::cell, p.w, p.b, std::exp(p.log_beta), cell_hyper(cfg), seed);
}

Matrix stage_centroid_distances(const LetHead& head, const AnchorPanel& panel) {
  const Matrix Z = head.encode(panel.features);
  const int S = panel.stage.n_levels();
  Matrix mu = Matrix::Zero(S, Z.cols());
  std::vector<int> count(static_cast<std::size_t>(S), 0);
  for (int i = 0; i < panel.rows(); ++i) {
    const int s = panel.stage.codes[static_cast<std::size_t>(i)];
    mu.row(s) += Z.row(i);
    ++count[static_cast<std::size_t>(s)];
  }
  Matrix out = Matrix::Constant(S, S, std::numeric_limits<double>::quiet_NaN());
  for (int s = 0; s < S; ++s) {
    if (!count[static_cast<std::size_t>(s)]) continue;
    for (int t = 0; t < S; ++t) {
      if (!count[static_cast<std::size_t>(t)]) continue;
      out(s, t) = s == t ? 0.0 : latent_distance(mu.row(s).transpose(), mu.row(t).transpose(), head.beta());
    }
  }
  return out;
}

LetHead train_hybrid_head(const AnchorPanel& cells, const LetHead& ref_head, const AnchorPanel& ref_panel,
                          const HybridTrainConfig& cfg, std::uint64_t seed, TrainTrace* trace) {
  cells.validate();
  if (!ref_head.frozen()) throw InvalidArgument("hybrid training needs a gated reference head");
  if (cfg.lambda_topo < 0.0 || cfg.lambda_compact < 0.0) throw InvalidArgument("hybrid weights must be >= 0");
  const Matrix ref = stage_centroid_distances(ref_head, ref_panel);
  const int S = cells.stage.n_levels();
  Matrix mapped = Matrix::Constant(S, S, std::numeric_limits<double>::quiet_NaN());
  int shared = 0;
  std::vector<int> to_ref(static_cast<std::size_t>(S), -1);
  for (int s = 0; s < S; ++s) {
    const int r = ref_panel.stage.code_of(cells.stage.levels[static_cast<std::size_t>(s)]);
    if (r >= 0 && !std::isnan(ref(r, r))) {
      to_ref[static_cast<std::size_t>(s)] = r;
      ++shared;
    }
  }
  if (shared == 0) throw InvalidArgument("cells and reference panel share no stages");
  for (int s = 0; s < S; ++s)
    for (int t = 0; t < S; ++t)
      if (to_ref[static_cast<std::size_t>(s)] >= 0 && to_ref[static_cast<std::size_t>(t)] >= 0)
        mapped(s, t) = ref(to_ref[static_cast<std::size_t>(s)], to_ref[static_cast<std::size_t>(t)]);
  const let::HybridWeights hw{cfg.lambda_topo, cfg.lambda_compact};
  const let::Params p = fit_cells(cells, cfg.cell, hw, mapped, seed, trace);
  Json hyper = cell_hyper(cfg.cell);
  hyper["lambda_topo"] = cfg.lambda_topo;
  hyper["lambda_compact"] = cfg.lambda_compact;
  return LetHead(HeadVariant::hybrid, p.w, p.b, std::exp(p.log_beta), std::move(hyper), seed);
}

double hybrid_selection_score(double rho_resid, double auc1, double auc2, double silhouette, double spread) {
  return rho_resid + 0.25 * auc1 + 0.25 * auc2 + 0.40 * silhouette - 0.20 * spread;
}

GateReport gate(const LetHead& head, const AnchorPanel& input, const GateConfig& cfg, std::uint64_t seed) {
  input.validate();
  if (cfg.n_perm < 1) throw InvalidArgument("n_perm must be >= 1");
  IndexList canon(static_cast<std::size_t>(input.rows()));
  std::iota(canon.begin(), canon.end(), 0);
  std::stable_sort(canon.begin(), canon.end(), [&](int a, int b) {
    return input.row_ids[static_cast<std::size_t>(a)] < input.row_ids[static_cast<std::size_t>(b)];
  });
  const AnchorPanel panel = input.subset(canon);
  const int n = panel.rows();
  if (n < 3) throw InsufficientData("gate needs at least 3 rows");

  const Matrix Z = head.encode(panel.features);
  const Matrix pred = head.latent_distances(Z);
  const Matrix target = panel.target_matrix();

  GateReport r;
  r.n_rows = n;
  const int k_max = std::min(n - 2, (2 * n - 2) / 3);
  r.n_neighbors = std::min(cfg.n_neighbors, k_max);
  if (r.n_neighbors < 1) throw InsufficientData("too few rows for trustworthiness");
  // Neighbour ranks under the angular latent distance equal those under chord
  // distance between unit-normalised latents.
  const Matrix Zn = Z.rowwise().normalized();
  r.trustworthiness = metrics::trustworthiness(panel.features, Zn, r.n_neighbors);

  auto pairs = all_pairs(n);
  {
    auto shuffled = pairs;
    Rng rng = make_rng(seed, 1);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto take = static_cast<std::size_t>(std::ceil(cfg.random_pair_fraction * static_cast<double>(pairs.size())));
    shuffled.resize(std::min(shuffled.size(), take));
    r.corr_random = split_corr(pred, target, shuffled, "random", n);
  }
  {
    std::vector<std::string> donors;
    for (int d = 0; d < panel.donor.n_levels(); ++d)
      if (!panel.rows_where(panel.donor, panel.donor.levels[static_cast<std::size_t>(d)]).empty())
        donors.push_back(panel.donor.levels[static_cast<std::size_t>(d)]);
    const int count = std::max(1, static_cast<int>(std::lround(cfg.donor_fraction * static_cast<double>(donors.size()))));
    const auto held = hold_out_levels(panel.donor, donors, count, derive_seed(seed, 2));
    r.corr_donor = split_corr(pred, target, pairs_touching(n, held), "donor", n);
  }
  {
    std::vector<std::string> branches;
    for (int b = 0; b < panel.branch.n_levels(); ++b)
      if (panel.rows_where(panel.branch, panel.branch.levels[static_cast<std::size_t>(b)]).size() >= 3)
        branches.push_back(panel.branch.levels[static_cast<std::size_t>(b)]);
    if (branches.empty()) throw InsufficientData("clade split: no branch with at least 3 rows");
    const auto held = hold_out_levels(panel.branch, branches, 1, derive_seed(seed, 3));
    r.corr_clade = split_corr(pred, target, pairs_touching(n, held), "clade", n);
  }

  Vector pv(static_cast<Eigen::Index>(pairs.size())), tv(pv.size());
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    pv(static_cast<Eigen::Index>(p)) = pred(pairs[p].first, pairs[p].second);
    tv(static_cast<Eigen::Index>(p)) = target(pairs[p].first, pairs[p].second);
  }
  r.corr_all = metrics::spearman(pv, tv);
  try {
    r.corr_resid = metrics::residualized_correlation(pv, tv, pair_confounds(panel, pairs));
  } catch (const Error&) {
    r.corr_resid = std::numeric_limits<double>::quiet_NaN();
  }

  std::map<std::pair<int, int>, int> block_ids;
  std::vector<int> blocks(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto key = std::make_pair(panel.donor.codes[static_cast<std::size_t>(i)], panel.tissue.codes[static_cast<std::size_t>(i)]);
    auto it = block_ids.try_emplace(key, static_cast<int>(block_ids.size())).first;
    blocks[static_cast<std::size_t>(i)] = it->second;
  }
  const Vector pred_rank = metrics::midranks(pv);
  auto recompute = [&](const IndexList& perm) {
    Vector t(pv.size());
    for (std::size_t p = 0; p < pairs.size(); ++p)
      t(static_cast<Eigen::Index>(p)) = target(perm[static_cast<std::size_t>(pairs[p].first)], perm[static_cast<std::size_t>(pairs[p].second)]);
    const Vector tr = metrics::midranks(t);
    const double sd = std::sqrt((tr.array() - tr.mean()).square().sum());
    if (sd == 0.0) return 0.0;
    return metrics::pearson(pred_rank, tr);
  };
  r.blocked_p = stats::blocked_permutation_p(r.corr_all, recompute, blocks, cfg.n_perm, derive_seed(seed, 4), cfg.workers);

  const auto& th = cfg.thresholds;
  r.passed = r.trustworthiness >= th.trustworthiness &&
             std::min({r.corr_random, r.corr_donor, r.corr_clade}) >= th.corr && r.blocked_p <= th.blocked_p;
  return r;
}

std::pair<Matrix, GateReport> transfer(const LetHead& head, const AnchorPanel& external, const GateConfig& cfg,
                                       std::uint64_t seed) {
  if (!head.frozen()) throw InvalidArgument("transfer needs a gated (frozen) head");
  Matrix Z = head.encode(external.features);
  GateReport report = gate(head, external, cfg, seed);
  return {std::move(Z), report};
}

}  // namespace forge
