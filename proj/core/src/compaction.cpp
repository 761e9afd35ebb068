#include "forge/compaction.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "forge/error.hpp"
#include "forge/metrics.hpp"
#include "forge/parallel.hpp"
#include "forge/rng.hpp"
#include "forge/stats.hpp"

namespace forge::compaction {
namespace {

int valid_k(int n, int requested) { return std::max(1, std::min({requested, n - 2, (2 * n - 2) / 3})); }

double best_axis_auroc(const Matrix& Z, const std::vector<int>& y) {
  double best = 0.5;
  for (Eigen::Index j = 0; j < Z.cols(); ++j) best = std::max(best, metrics::auroc_abs(Z.col(j), y));
  return best;
}

// Mean distance of rows to their stage centroid over mean pairwise distance.
double normalized_spread(const Matrix& Zn, const Categorical& stage) {
  const Matrix D = metrics::pairwise_distances(Zn);
  const double n = static_cast<double>(Zn.rows());
  const double mean_pair = D.sum() / (n * (n - 1.0));
  if (!(mean_pair > 0.0)) return 0.0;
  std::map<int, std::pair<RowVector, int>> cent;
  for (Eigen::Index i = 0; i < Zn.rows(); ++i) {
    auto& [sum, count] = cent.try_emplace(stage.codes[static_cast<std::size_t>(i)], RowVector::Zero(Zn.cols()), 0).first->second;
    sum += Zn.row(i);
    ++count;
  }
  double spread = 0.0;
  for (Eigen::Index i = 0; i < Zn.rows(); ++i) {
    const auto& [sum, count] = cent.at(stage.codes[static_cast<std::size_t>(i)]);
    spread += (Zn.row(i) - sum / count).norm();
  }
  return spread / n / mean_pair;
}

ScanRow evaluate_unit(const WeightTensor& tensor, UnitId unit, const AnchorPanel& internal, const AnchorPanel& external,
                      const ScanConfig& cfg) {
  ScanRow row;
  row.unit = unit;
  const FeatureOperator op = single_head_operator(tensor, unit);
  const AnchorPanel in = internal.with_features(op.apply(internal.features));
  const AnchorPanel ex = external.with_features(op.apply(external.features));
  const LetHead head = train_anchor_head(in, cfg.k, cfg.alpha, cfg.seed, cfg.opt);
  const Matrix Z = head.encode(ex.features);
  const Matrix pred = head.latent_distances(Z);
  const auto pairs = all_pairs(ex.rows());
  Vector pv(static_cast<Eigen::Index>(pairs.size())), tv(pv.size());
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    pv(static_cast<Eigen::Index>(p)) = pred(pairs[p].first, pairs[p].second);
    tv(static_cast<Eigen::Index>(p)) = ex.target(pairs[p].first, pairs[p].second);
  }
  row.corr = metrics::spearman(pv, tv);
  row.corr_resid = metrics::residualized_correlation(pv, tv, pair_confounds(ex, pairs));
  const Matrix Zn = Z.rowwise().normalized();
  row.trustworthiness = metrics::trustworthiness(ex.features, Zn, valid_k(ex.rows(), cfg.n_neighbors));
  if (cfg.score == ScreenScore::corr_resid) {
    row.score = row.corr_resid;
  } else {
    double auc[2] = {0.0, 0.0};
    int used = 0;
    for (const auto& [name, col] : ex.labels) {
      if (col.n_levels() != 2 || used == 2) continue;
      try {
        auc[used] = best_axis_auroc(Z, col.codes);
      } catch (const Error&) {
        auc[used] = 0.0;
      }
      ++used;
    }
    double sil = 0.0;
    try {
      sil = metrics::silhouette_mean(Zn, ex.branch.codes);
    } catch (const Error&) {
    }
    row.score = hybrid_selection_score(row.corr_resid, auc[0], auc[1], sil, normalized_spread(Zn, ex.stage));
  }
  return row;
}

double metric_for(const Probe& probe, const Matrix& Z, const std::vector<int>& y, int n_classes) {
  if (n_classes == 2) {
    const Matrix p = probe.proba(Z);
    try {
      return metrics::auroc(p.col(1), y);
    } catch (const UndefinedMetric&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  }
  return metrics::balanced_accuracy(probe.predict(Z), y);
}

std::string subset_name(const IndexList& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "+" : "") + std::to_string(s[i]);
  return out;
}

}  // namespace

ScreenScore screen_score_from_string(const std::string& s) {
  if (s == "corr_resid") return ScreenScore::corr_resid;
  if (s == "composite") return ScreenScore::composite;
  throw InvalidArgument("unknown screen score '" + s + "' (expected corr_resid|composite)");
}

std::vector<ScanRow> scan_heads(const WeightTensor& tensor, const AnchorPanel& internal, const AnchorPanel& external,
                                const ScanConfig& cfg) {
  if (internal.dim() != tensor.dim() || external.dim() != tensor.dim())
    throw ShapeError("scan panels must have the tensor's feature dimension " + std::to_string(tensor.dim()));
  std::vector<UnitId> units;
  for (int l = 0; l < tensor.n_layers(); ++l)
    for (int h = 0; h < tensor.n_heads(); ++h) units.push_back({l, h});
  std::vector<ScanRow> rows(units.size());
  parallel_for(units.size(), cfg.workers, [&](std::size_t i) {
    try {
      rows[i] = evaluate_unit(tensor, units[i], internal, external, cfg);
    } catch (const Error& e) {
      rows[i] = ScanRow{};
      rows[i].unit = units[i];
      rows[i].ok = false;
      rows[i].error = e.what();
    }
  });
  std::stable_sort(rows.begin(), rows.end(), [](const ScanRow& a, const ScanRow& b) {
    if (a.ok != b.ok) return a.ok;
    if (!a.ok) return false;
    return a.score > b.score;
  });
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].rank = static_cast<int>(i) + 1;
  return rows;
}

std::string scan_csv(const std::vector<ScanRow>& rows) {
  std::ostringstream os;
  os << "rank,layer,head,ok,corr,corr_resid,trustworthiness,score,error\n";
  for (const auto& r : rows) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    os << r.rank << ',' << r.unit.layer << ',' << r.unit.head << ',' << (r.ok ? 1 : 0) << ',' << format_double(r.corr)
       << ',' << format_double(r.corr_resid) << ',' << format_double(r.trustworthiness) << ','
       << format_double(r.score) << ',' << err << '\n';
  }
  return os.str();
}

CompactFit fit_compact_weights(const WeightTensor& tensor, const std::vector<UnitId>& units, const AnchorPanel& internal,
                               const ScanConfig& cfg) {
  if (units.empty()) throw InvalidArgument("compact fit needs at least one unit");
  CompactFit fit;
  fit.alphas.assign(units.size(), 0.0);
  fit.alphas[0] = 1.0;
  auto loss_of = [&](const std::vector<double>& alphas) {
    const FeatureOperator op = compose_compact(tensor, units, alphas);
    TrainTrace trace;
    train_anchor_head(internal.with_features(op.apply(internal.features)), cfg.k, cfg.alpha, cfg.seed, cfg.opt, &trace);
    ++fit.evaluations;
    return trace.final_terms.distance;
  };
  if (units.size() == 1) {
    fit.loss = loss_of(fit.alphas);
    fit.op = compose_compact(tensor, units, fit.alphas);
    return fit;
  }
  std::map<std::vector<double>, double> cache;
  auto cached = [&](const std::vector<double>& a) {
    auto it = cache.find(a);
    if (it != cache.end()) return it->second;
    return cache[a] = loss_of(a);
  };
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < units.size(); ++i) {
    for (double g : {-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0}) {
      auto a = fit.alphas;
      a[i] = g;
      const double l = cached(a);
      if (l < best) {
        best = l;
        fit.alphas = a;
      }
    }
    for (double step = 0.25; step >= 1.0 / 32.0; step /= 2.0) {
      for (double dir : {-1.0, 1.0}) {
        auto a = fit.alphas;
        a[i] += dir * step;
        const double l = cached(a);
        if (l < best) {
          best = l;
          fit.alphas = a;
        }
      }
    }
  }
  fit.loss = best;
  fit.op = compose_compact(tensor, units, fit.alphas);
  return fit;
}

std::string FrozenAssets::fingerprint() const {
  std::string bytes = head.to_bytes();
  for (const auto& [name, p] : probes) bytes += name + p.to_bytes();
  return hex64(fnv1a64(bytes));
}

FrozenAssets train_frozen_assets(const FeatureOperator& op, const LetHead& head, const EvalSet& train,
                                 const std::vector<EndpointSpec>& endpoints, ProbeKind probe, std::uint64_t seed) {
  FrozenAssets a;
  a.head = head;
  a.endpoints = endpoints;
  const Matrix Z = head.encode(op.apply(train.X));
  for (const auto& ep : endpoints) {
    auto it = train.labels.find(ep.name);
    if (it == train.labels.end()) throw InvalidArgument("training set lacks labels for endpoint '" + ep.name + "'");
    a.probes.emplace(ep.name, fit_probe(Z, it->second, ep.n_classes, probe, derive_seed(seed, fnv1a64(ep.name))));
  }
  return a;
}

Vector evaluate_endpoints(const FeatureOperator& op, const FrozenAssets& assets, const EvalSet& eval) {
  const Matrix Z = assets.head.encode(op.apply(eval.X));
  Vector out(static_cast<Eigen::Index>(assets.endpoints.size()));
  for (std::size_t e = 0; e < assets.endpoints.size(); ++e) {
    const auto& ep = assets.endpoints[e];
    auto it = eval.labels.find(ep.name);
    if (it == eval.labels.end()) throw InvalidArgument("evaluation set lacks labels for endpoint '" + ep.name + "'");
    out(static_cast<Eigen::Index>(e)) = metric_for(assets.probes.at(ep.name), Z, it->second, ep.n_classes);
  }
  return out;
}

AblationTable ablate_factors_loo(const FeatureOperator& op, const FrozenAssets& assets, const EvalSet& eval) {
  AblationTable t;
  for (const auto& ep : assets.endpoints) t.endpoints.push_back(ep.name);
  t.intact = evaluate_endpoints(op, assets, eval);
  const int F = op.rank();
  const auto E = static_cast<Eigen::Index>(t.endpoints.size());
  t.impact.resize(F, E);
  t.total_clipped = Vector::Zero(F);
  t.total_signed = Vector::Zero(F);
  for (int f = 0; f < F; ++f) {
    const Vector ablated = evaluate_endpoints(op.zero_factor(f), assets, eval);
    t.impact.row(f) = (t.intact - ablated).transpose();
    for (Eigen::Index e = 0; e < E; ++e) {
      const double v = t.impact(f, e);
      if (std::isnan(v)) continue;
      t.total_signed(f) += v;
      t.total_clipped(f) += std::max(v, 0.0);
    }
  }
  t.order.resize(static_cast<std::size_t>(F));
  std::iota(t.order.begin(), t.order.end(), 0);
  std::stable_sort(t.order.begin(), t.order.end(), [&](int a, int b) { return t.total_clipped(a) > t.total_clipped(b); });
  t.concentration = Vector::Zero(F);
  const double total = t.total_clipped.sum();
  double acc = 0.0;
  for (int j = 0; j < F; ++j) {
    acc += t.total_clipped(t.order[static_cast<std::size_t>(j)]);
    t.concentration(j) = total > 0.0 ? acc / total : 0.0;
  }
  if (total > 0.0 && F > 0) t.concentration(F - 1) = 1.0;
  return t;
}

std::string AblationTable::csv() const {
  std::ostringstream os;
  os << "factor";
  for (const auto& e : endpoints) os << ",impact_" << e;
  os << ",total_clipped,total_signed,concentration_rank,cumulative_share\n";
  std::vector<int> pos(order.size());
  for (std::size_t j = 0; j < order.size(); ++j) pos[static_cast<std::size_t>(order[j])] = static_cast<int>(j);
  for (Eigen::Index f = 0; f < impact.rows(); ++f) {
    os << f;
    for (Eigen::Index e = 0; e < impact.cols(); ++e) os << ',' << format_double(impact(f, e));
    const int p = pos[static_cast<std::size_t>(f)];
    os << ',' << format_double(total_clipped(f)) << ',' << format_double(total_signed(f)) << ',' << p + 1 << ','
       << format_double(concentration(p)) << '\n';
  }
  return os.str();
}

SubsetSweep subset_sweep(const FeatureOperator& op, const FrozenAssets& assets, const IndexList& core,
                         const EvalSet& eval) {
  const int c = static_cast<int>(core.size());
  if (c < 1 || c > 8) throw InvalidArgument("subset sweep needs 1..8 core factors, got " + std::to_string(c));
  SubsetSweep s;
  for (const auto& ep : assets.endpoints) s.endpoints.push_back(ep.name);
  s.intact = evaluate_endpoints(op, assets, eval);
  for (int mask = 1; mask < (1 << c); ++mask) {
    SubsetRow row;
    for (int b = 0; b < c; ++b)
      if (mask & (1 << b)) row.subset.push_back(core[static_cast<std::size_t>(b)]);
    std::sort(row.subset.begin(), row.subset.end());
    row.values = evaluate_endpoints(op.keep_only(row.subset), assets, eval);
    s.rows.push_back(std::move(row));
  }
  const auto E = static_cast<Eigen::Index>(s.endpoints.size());
  s.best.assign(static_cast<std::size_t>(E), 0);
  s.best_ratio.resize(E);
  for (Eigen::Index e = 0; e < E; ++e) {
    int best = 0;
    for (int r = 1; r < static_cast<int>(s.rows.size()); ++r) {
      const auto& a = s.rows[static_cast<std::size_t>(r)];
      const auto& b = s.rows[static_cast<std::size_t>(best)];
      const double va = a.values(e), vb = b.values(e);
      if (std::isnan(va)) continue;
      if (std::isnan(vb) || va > vb || (va == vb && (a.subset.size() < b.subset.size() ||
                                                     (a.subset.size() == b.subset.size() && a.subset < b.subset))))
        best = r;
    }
    s.best[static_cast<std::size_t>(e)] = best;
    s.best_ratio(e) = s.rows[static_cast<std::size_t>(best)].values(e) / s.intact(e);
  }
  return s;
}

std::string SubsetSweep::csv() const {
  std::ostringstream os;
  os << "subset,size";
  for (const auto& e : endpoints) os << ',' << e;
  os << '\n';
  os << "intact,";
  for (Eigen::Index e = 0; e < intact.size(); ++e) os << ',' << format_double(intact(e));
  os << '\n';
  for (const auto& r : rows) {
    os << subset_name(r.subset) << ',' << r.subset.size();
    for (Eigen::Index e = 0; e < r.values.size(); ++e) os << ',' << format_double(r.values(e));
    os << '\n';
  }
  return os.str();
}

CoreSufficiency core_sufficiency(const FeatureOperator& op, const FrozenAssets& assets, const IndexList& ordered_core,
                                 const std::vector<EvalSet>& evals) {
  if (ordered_core.empty()) throw InvalidArgument("core sufficiency needs a non-empty factor order");
  if (evals.empty()) throw InvalidArgument("core sufficiency needs at least one evaluation set");
  CoreSufficiency cs;
  for (const auto& ep : assets.endpoints) cs.endpoints.push_back(ep.name);
  const auto E = static_cast<Eigen::Index>(cs.endpoints.size());
  const auto S = static_cast<Eigen::Index>(evals.size());
  cs.intact.resize(S, E);
  for (Eigen::Index s = 0; s < S; ++s) cs.intact.row(s) = evaluate_endpoints(op, assets, evals[static_cast<std::size_t>(s)]).transpose();
  IndexList prefix;
  for (int f : ordered_core) {
    prefix.push_back(f);
    PrefixRow row;
    row.prefix = prefix;
    std::sort(row.prefix.begin(), row.prefix.end());
    const FeatureOperator kept = op.keep_only(row.prefix);
    row.prefix = prefix;
    row.values.resize(S, E);
    for (Eigen::Index s = 0; s < S; ++s) row.values.row(s) = evaluate_endpoints(kept, assets, evals[static_cast<std::size_t>(s)]).transpose();
    const Matrix delta = row.values - cs.intact;
    row.mean_delta = delta.colwise().mean().transpose();
    row.p_value = Vector::Ones(E);
    for (Eigen::Index e = 0; e < E; ++e) {
      try {
        row.p_value(e) = stats::wilcoxon_signed_rank(delta.col(e)).p_value;
      } catch (const Error&) {
        row.p_value(e) = 1.0;
      }
    }
    cs.rows.push_back(std::move(row));
  }
  for (Eigen::Index e = 0; e < E; ++e) {
    Vector p(static_cast<Eigen::Index>(cs.rows.size()));
    for (std::size_t r = 0; r < cs.rows.size(); ++r) p(static_cast<Eigen::Index>(r)) = cs.rows[r].p_value(e);
    const Vector q = stats::bh_fdr(p);
    for (std::size_t r = 0; r < cs.rows.size(); ++r) {
      if (cs.rows[r].q_value.size() == 0) cs.rows[r].q_value = Vector::Ones(E);
      cs.rows[r].q_value(e) = q(static_cast<Eigen::Index>(r));
    }
  }
  return cs;
}

std::string CoreSufficiency::csv() const {
  std::ostringstream os;
  os << "prefix,endpoint,mean_value,mean_intact,mean_delta,p_value,q_value\n";
  for (const auto& r : rows) {
    for (Eigen::Index e = 0; e < static_cast<Eigen::Index>(endpoints.size()); ++e) {
      os << subset_name(r.prefix) << ',' << endpoints[static_cast<std::size_t>(e)] << ','
         << format_double(r.values.col(e).mean()) << ',' << format_double(intact.col(e).mean()) << ','
         << format_double(r.mean_delta(e)) << ',' << format_double(r.p_value(e)) << ',' << format_double(r.q_value(e))
         << '\n';
    }
  }
  return os.str();
}

std::string factor_loadings_csv(const FeatureOperator& op, int top_k) {
  if (op.kind() != OperatorKind::low_rank && op.kind() != OperatorKind::sparse)
    throw InvalidArgument("factor loadings need a low_rank or sparse operator");
  if (top_k < 1) throw InvalidArgument("top_k must be >= 1");
  std::ostringstream os;
  os << "factor,side,rank,index,loading\n";
  for (int f = 0; f < op.rank(); ++f) {
    for (const auto& [side, mat] : {std::pair<const char*, const Matrix*>{"read", &op.u()}, {"write", &op.v()}}) {
      const Vector col = mat->col(f);
      const IndexList top = top_k_abs(col, std::min<int>(top_k, static_cast<int>(col.size())));
      IndexList by_mag = top;
      std::stable_sort(by_mag.begin(), by_mag.end(), [&](int a, int b) { return std::abs(col(a)) > std::abs(col(b)); });
      for (std::size_t r = 0; r < by_mag.size(); ++r)
        os << f << ',' << side << ',' << r + 1 << ',' << by_mag[r] << ',' << format_double(col(by_mag[r])) << '\n';
    }
  }
  return os.str();
}

}  // namespace forge::compaction
