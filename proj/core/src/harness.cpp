#include "forge/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>

#include "forge/error.hpp"
#include "forge/metrics.hpp"
#include "forge/parallel.hpp"
#include "forge/rng.hpp"
#include "forge/stats.hpp"

namespace forge::harness {
namespace {

std::vector<std::string> present_levels(const Categorical& col) {
  std::set<std::string> s;
  for (std::size_t i = 0; i < col.size(); ++i) s.insert(col.label(i));
  return {s.begin(), s.end()};
}

Matrix take_rows(const Matrix& X, const IndexList& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), X.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = X.row(rows[r]);
  return out;
}

std::string csv_safe(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

struct Endpoint {
  std::string name;   // metric prefix
  bool pseudotime = false;
  const Categorical* column = nullptr;
};

std::vector<Endpoint> parse_endpoints(const AnchorPanel& cells, const std::vector<std::string>& specs) {
  std::vector<Endpoint> out;
  for (const auto& s : specs) {
    if (s == "pseudotime") {
      out.push_back({"pseudotime", true, nullptr});
    } else if (s == "stage") {
      out.push_back({"stage", false, &cells.stage});
    } else if (s.rfind("label:", 0) == 0) {
      const auto name = s.substr(6);
      auto it = cells.labels.find(name);
      if (it == cells.labels.end()) throw InvalidArgument("endpoint '" + s + "': panel has no label column '" + name + "'");
      out.push_back({name, false, &it->second});
    } else {
      throw InvalidArgument("unknown endpoint '" + s + "' (expected pseudotime|stage|label:NAME)");
    }
  }
  return out;
}

std::vector<std::string> metric_names(const std::vector<Endpoint>& eps) {
  std::vector<std::string> out;
  for (const auto& e : eps) {
    if (e.pseudotime) {
      out.insert(out.end(), {"pseudotime_rho", "pseudotime_abs_rho", "pseudotime_sign_share"});
    } else {
      out.push_back(e.name + "_bal_acc");
      out.push_back(e.name + "_macro_f1");
    }
  }
  return out;
}

}  // namespace

Json SplitPlan::to_json() const {
  return Json{{"split_id", split_id}, {"train_donors", train_donors}, {"test_donors", test_donors},
              {"train_cap", train_cap}, {"seed", seed}, {"n_train", train_rows.size()}, {"n_test", test_rows.size()}};
}

std::vector<SplitPlan> make_splits(const AnchorPanel& cells, int n_splits, int n_test_donors, int train_cap,
                                   std::uint64_t seed) {
  if (n_splits < 1) throw InvalidArgument("n_splits must be >= 1");
  if (n_test_donors < 1) throw InvalidArgument("n_test_donors must be >= 1");
  if (train_cap < 1) throw InvalidArgument("train_cap must be >= 1");
  const auto donors = present_levels(cells.donor);
  if (static_cast<int>(donors.size()) < n_test_donors + 1)
    throw InvalidArgument("need at least n_test_donors + 1 = " + std::to_string(n_test_donors + 1) + " donors, panel has " +
                          std::to_string(donors.size()));
  std::vector<SplitPlan> plans;
  for (int s = 0; s < n_splits; ++s) {
    SplitPlan p;
    p.split_id = s;
    p.train_cap = train_cap;
    p.seed = derive_seed(seed, static_cast<std::uint64_t>(s));
    auto order = donors;
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(s));
    std::shuffle(order.begin(), order.end(), rng);
    p.test_donors.assign(order.begin(), order.begin() + n_test_donors);
    p.train_donors.assign(order.begin() + n_test_donors, order.end());
    std::sort(p.test_donors.begin(), p.test_donors.end());
    std::sort(p.train_donors.begin(), p.train_donors.end());
    const std::set<std::string> test(p.test_donors.begin(), p.test_donors.end());
    std::map<int, IndexList> by_stage;
    int n_train = 0;
    for (int i = 0; i < cells.rows(); ++i) {
      if (test.count(cells.donor.label(static_cast<std::size_t>(i)))) {
        p.test_rows.push_back(i);
      } else {
        by_stage[cells.stage.codes[static_cast<std::size_t>(i)]].push_back(i);
        ++n_train;
      }
    }
    if (n_train <= train_cap) {
      for (const auto& [st, rows] : by_stage) p.train_rows.insert(p.train_rows.end(), rows.begin(), rows.end());
    } else {
      // Proportional quotas, leftover slots to the largest remainders (ties: lower stage code).
      std::vector<std::pair<int, IndexList>> groups(by_stage.begin(), by_stage.end());
      std::vector<int> quota(groups.size());
      std::vector<std::pair<double, std::size_t>> remainders;
      int used = 0;
      for (std::size_t g = 0; g < groups.size(); ++g) {
        const double exact = static_cast<double>(train_cap) * static_cast<double>(groups[g].second.size()) / n_train;
        quota[g] = static_cast<int>(std::floor(exact));
        used += quota[g];
        remainders.emplace_back(exact - quota[g], g);
      }
      std::stable_sort(remainders.begin(), remainders.end(),
                       [](const auto& a, const auto& b) { return a.first > b.first; });
      for (int r = 0; r < train_cap - used; ++r) ++quota[remainders[static_cast<std::size_t>(r)].second];
      for (std::size_t g = 0; g < groups.size(); ++g) {
        IndexList rows = groups[g].second;
        Rng srng = make_rng(p.seed, static_cast<std::uint64_t>(groups[g].first) + 1);
        std::shuffle(rows.begin(), rows.end(), srng);
        p.train_rows.insert(p.train_rows.end(), rows.begin(), rows.begin() + quota[g]);
      }
    }
    std::sort(p.train_rows.begin(), p.train_rows.end());
    plans.push_back(std::move(p));
  }
  return plans;
}

std::string to_string(RepresentationKind kind) {
  switch (kind) {
    case RepresentationKind::raw: return "raw";
    case RepresentationKind::pca: return "pca";
    case RepresentationKind::svd: return "svd";
    case RepresentationKind::feature_operator: return "feature_operator";
    case RepresentationKind::let_head: return "let_head";
    case RepresentationKind::external: return "external";
  }
  return "raw";
}

Matrix Representation::transform(const AnchorPanel& cells, const IndexList& rows) const {
  const Matrix X = take_rows(cells.features, rows);
  switch (kind) {
    case RepresentationKind::raw: return X;
    case RepresentationKind::pca:
    case RepresentationKind::svd: return projection.transform(X);
    case RepresentationKind::feature_operator: return method->op->apply(X);
    case RepresentationKind::let_head: return method->head->encode(method->op ? method->op->apply(X) : X);
    case RepresentationKind::external: return take_rows(*method->external, rows);
  }
  return X;
}

std::string Representation::fingerprint() const {
  if (kind != RepresentationKind::pca && kind != RepresentationKind::svd) return "";
  Container c;
  c.add("mean", projection.mean.transpose());
  c.add("components", projection.components);
  return hex64(fnv1a64(c.to_bytes()));
}

Representation fit_representation(const MethodUnderTest& method, const AnchorPanel& cells, const IndexList& train_rows) {
  Representation r;
  r.kind = method.kind;
  r.method = &method;
  switch (method.kind) {
    case RepresentationKind::pca:
    case RepresentationKind::svd:
      r.projection = linalg::fit_projection(take_rows(cells.features, train_rows), method.dim,
                                            method.kind == RepresentationKind::pca);
      break;
    case RepresentationKind::feature_operator:
      if (!method.op) throw InvalidArgument("method '" + method.name + "' needs a feature operator");
      break;
    case RepresentationKind::let_head:
      if (!method.head) throw InvalidArgument("method '" + method.name + "' needs a LET head");
      break;
    case RepresentationKind::external:
      if (!method.external || method.external->rows() != cells.rows())
        throw InvalidArgument("method '" + method.name + "' needs an external matrix with one row per panel row");
      break;
    case RepresentationKind::raw: break;
  }
  return r;
}

PseudotimeResult donor_local_pseudotime(const Matrix& Z, const Vector& root_hint, int k_nn) {
  const int n = static_cast<int>(Z.rows());
  if (k_nn < 1) throw InvalidArgument("k_nn must be >= 1");
  if (n < k_nn + 2) throw InsufficientData("donor has " + std::to_string(n) + " cells, needs >= k_nn + 2");
  if (root_hint.size() != Z.cols()) throw ShapeError("root hint dimension mismatch");
  const Matrix D = metrics::pairwise_distances(Z);
  std::vector<std::vector<std::pair<int, double>>> adj(static_cast<std::size_t>(n));
  std::set<std::pair<int, int>> edges;
  for (int i = 0; i < n; ++i)
    for (int j : metrics::nearest(D.row(i).transpose(), i, k_nn)) edges.insert({std::min(i, j), std::max(i, j)});
  for (auto [i, j] : edges) {
    adj[static_cast<std::size_t>(i)].emplace_back(j, D(i, j));
    adj[static_cast<std::size_t>(j)].emplace_back(i, D(i, j));
  }
  PseudotimeResult out;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    const double d = (Z.row(i).transpose() - root_hint).norm();
    if (d < best) {
      best = d;
      out.root = i;
    }
  }
  constexpr double inf = std::numeric_limits<double>::infinity();
  Vector dist = Vector::Constant(n, inf);
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  dist(out.root) = 0.0;
  pq.push({0.0, out.root});
  while (!pq.empty()) {
    const auto [d, u] = pq.top();
    pq.pop();
    if (d > dist(u)) continue;
    for (const auto& [v, w] : adj[static_cast<std::size_t>(u)]) {
      if (d + w < dist(v)) {
        dist(v) = d + w;
        pq.push({dist(v), v});
      }
    }
  }
  double max_finite = 0.0;
  int reached = 0;
  for (int i = 0; i < n; ++i)
    if (std::isfinite(dist(i))) {
      max_finite = std::max(max_finite, dist(i));
      ++reached;
    }
  if (reached <= 1) throw InvalidRun("kNN graph is disconnected from the root");
  if (reached < n) {
    out.partial = true;
    const double eps = 1e-6 * (1.0 + max_finite);
    for (int i = 0; i < n; ++i)
      if (!std::isfinite(dist(i))) dist(i) = max_finite + eps;
  }
  out.pseudotime = dist;
  return out;
}

const MetricSummary* CampaignReport::find(const std::string& method, const std::string& metric) const {
  for (const auto& s : summary)
    if (s.method == method && s.metric == metric) return &s;
  return nullptr;
}

const PairedComparison* CampaignReport::find_paired(const std::string& method, const std::string& metric) const {
  for (const auto& p : paired)
    if (p.method == method && p.metric == metric) return &p;
  return nullptr;
}

std::string CampaignReport::values_csv() const {
  std::ostringstream os;
  os << "split,method,metric,value,valid,note\n";
  for (const auto& v : values)
    os << v.split << ',' << v.method << ',' << v.metric << ',' << (v.valid ? format_double(v.value) : "") << ','
       << (v.valid ? 1 : 0) << ',' << csv_safe(v.note) << '\n';
  return os.str();
}

std::string CampaignReport::paired_csv() const {
  std::ostringstream os;
  os << "metric,method,reference,n,mean_delta,w_plus,w_minus,p_value,q_value,note\n";
  for (const auto& p : paired)
    os << p.metric << ',' << p.method << ',' << p.reference << ',' << p.n << ',' << format_double(p.mean_delta) << ','
       << format_double(p.w_plus) << ',' << format_double(p.w_minus) << ',' << format_double(p.p_value) << ','
       << format_double(p.q_value) << ',' << csv_safe(p.note) << '\n';
  return os.str();
}

std::string CampaignReport::summary_csv() const {
  std::ostringstream os;
  os << "method,metric,n_obs,n_invalid,mean,sd\n";
  for (const auto& s : summary)
    os << s.method << ',' << s.metric << ',' << s.n_obs << ',' << s.n_invalid << ',' << format_double(s.mean) << ','
       << format_double(s.sd) << '\n';
  return os.str();
}

std::string CampaignReport::summary_text() const {
  std::ostringstream os;
  char buf[256];
  os << "[pooled]\n";
  for (const auto& s : summary) {
    std::snprintf(buf, sizeof buf, "%-16s %-24s mean=%.4f sd=%.4f n=%d invalid=%d\n", s.method.c_str(), s.metric.c_str(),
                  s.mean, s.sd, s.n_obs, s.n_invalid);
    os << buf;
  }
  os << "\n[paired]\n";
  for (const auto& p : paired) {
    std::snprintf(buf, sizeof buf, "%-24s %-16s vs %-16s n=%d delta=%+.4f p=%.3g q=%.3g%s%s\n", p.metric.c_str(),
                  p.method.c_str(), p.reference.c_str(), p.n, p.mean_delta, p.p_value, p.q_value,
                  p.note.empty() ? "" : " ", p.note.c_str());
    os << buf;
  }
  os << "\n[orientation]\n";
  std::vector<std::string> methods;
  for (const auto& s : summary)
    if (std::find(methods.begin(), methods.end(), s.method) == methods.end()) methods.push_back(s.method);
  for (const auto& m : methods) {
    const auto* signed_rho = find(m, "pseudotime_rho");
    const auto* abs_rho = find(m, "pseudotime_abs_rho");
    const auto* share = find(m, "pseudotime_sign_share");
    if (!signed_rho || !abs_rho || !share) continue;
    std::snprintf(buf, sizeof buf, "%-16s mean_signed=%+.4f mean_abs=%.4f sign_share=%.4f\n", m.c_str(),
                  signed_rho->mean, abs_rho->mean, share->mean);
    os << buf;
  }
  return os.str();
}

CampaignReport run_campaign(const AnchorPanel& cells, const std::vector<MethodUnderTest>& methods,
                            const std::vector<SplitPlan>& splits, const CampaignConfig& cfg) {
  cells.validate();
  std::set<std::string> names;
  for (const auto& m : methods)
    if (!names.insert(m.name).second) throw InvalidArgument("duplicate method name '" + m.name + "'");
  if (!names.count(cfg.reference)) throw InvalidArgument("reference method '" + cfg.reference + "' is not in the method list");
  const auto endpoints = parse_endpoints(cells, cfg.endpoints);
  const auto metrics_list = metric_names(endpoints);

  const auto t_start = std::chrono::steady_clock::now();
  std::vector<std::vector<CampaignValue>> per_split(splits.size());
  std::vector<double> split_seconds(splits.size(), 0.0);

  parallel_for(splits.size(), cfg.workers, [&](std::size_t si) {
    const auto t0 = std::chrono::steady_clock::now();
    const SplitPlan& plan = splits[si];
    auto& out = per_split[si];
    std::map<std::string, IndexList> donor_rows;  // test rows by donor, positions into test_rows
    for (std::size_t r = 0; r < plan.test_rows.size(); ++r)
      donor_rows[cells.donor.label(static_cast<std::size_t>(plan.test_rows[r]))].push_back(static_cast<int>(r));

    for (const auto& method : methods) {
      auto push = [&](const std::string& metric, double value, bool valid, std::string note) {
        out.push_back({plan.split_id, method.name, metric, value, valid, std::move(note)});
      };
      auto invalid_all = [&](const std::string& why) {
        for (const auto& m : metrics_list) push(m, 0.0, false, why);
      };
      Matrix z_train, z_test;
      try {
        const Representation rep = fit_representation(method, cells, plan.train_rows);
        z_train = rep.transform(cells, plan.train_rows);
        z_test = rep.transform(cells, plan.test_rows);
      } catch (const Error& e) {
        invalid_all(std::string("representation: ") + e.what());
        continue;
      }
      const std::uint64_t mseed = derive_seed(plan.seed, fnv1a64(method.name));

      for (const auto& ep : endpoints) {
        if (ep.pseudotime) {
          try {
            int min_depth = std::numeric_limits<int>::max();
            for (int r : plan.train_rows) min_depth = std::min(min_depth, cells.stage_depth[static_cast<std::size_t>(r)]);
            Vector hint = Vector::Zero(z_train.cols());
            int count = 0;
            for (std::size_t r = 0; r < plan.train_rows.size(); ++r)
              if (cells.stage_depth[static_cast<std::size_t>(plan.train_rows[r])] == min_depth) {
                hint += z_train.row(static_cast<Eigen::Index>(r)).transpose();
                ++count;
              }
            hint /= count;
            std::vector<double> rhos;
            std::string note;
            for (const auto& [donor, pos] : donor_rows) {
              try {
                Matrix zd(static_cast<Eigen::Index>(pos.size()), z_test.cols());
                Vector depth(static_cast<Eigen::Index>(pos.size()));
                for (std::size_t r = 0; r < pos.size(); ++r) {
                  zd.row(static_cast<Eigen::Index>(r)) = z_test.row(pos[r]);
                  depth(static_cast<Eigen::Index>(r)) =
                      cells.stage_depth[static_cast<std::size_t>(plan.test_rows[static_cast<std::size_t>(pos[r])])];
                }
                const auto pt = donor_local_pseudotime(zd, hint, cfg.k_nn);
                if (pt.partial) note += "partial:" + donor + ";";
                rhos.push_back(metrics::spearman(pt.pseudotime, depth));
              } catch (const Error& e) {
                note += "invalid:" + donor + ";";
              }
            }
            if (rhos.empty()) throw InvalidRun("no valid test donor");
            const auto o = metrics::orientation_summary(Eigen::Map<const Vector>(rhos.data(), static_cast<Eigen::Index>(rhos.size())));
            push("pseudotime_rho", o.mean_signed, true, note);
            push("pseudotime_abs_rho", o.mean_abs, true, note);
            push("pseudotime_sign_share", o.positive_share, true, note);
          } catch (const Error& e) {
            for (const char* m : {"pseudotime_rho", "pseudotime_abs_rho", "pseudotime_sign_share"}) push(m, 0.0, false, e.what());
          }
          continue;
        }
        try {
          std::vector<int> y_train;
          for (int r : plan.train_rows) y_train.push_back(ep.column->codes[static_cast<std::size_t>(r)]);
          const Probe probe = fit_probe(z_train, y_train, ep.column->n_levels(), method.probe,
                                        derive_seed(mseed, fnv1a64(ep.name)), cfg.probe);
          const auto pred = probe.predict(z_test);
          double bal = 0.0, f1 = 0.0;
          int n_donors = 0;
          for (const auto& [donor, pos] : donor_rows) {
            std::vector<int> p, t;
            for (int r : pos) {
              p.push_back(pred[static_cast<std::size_t>(r)]);
              t.push_back(ep.column->codes[static_cast<std::size_t>(plan.test_rows[static_cast<std::size_t>(r)])]);
            }
            bal += metrics::balanced_accuracy(p, t);
            f1 += metrics::macro_f1(p, t);
            ++n_donors;
          }
          push(ep.name + "_bal_acc", bal / n_donors, true, "");
          push(ep.name + "_macro_f1", f1 / n_donors, true, "");
        } catch (const Error& e) {
          push(ep.name + "_bal_acc", 0.0, false, e.what());
          push(ep.name + "_macro_f1", 0.0, false, e.what());
        }
      }
    }
    split_seconds[si] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  });

  CampaignReport report;
  for (auto& v : per_split) report.values.insert(report.values.end(), v.begin(), v.end());

  // value[method][metric][split] for valid runs
  std::map<std::string, std::map<std::string, std::map<int, double>>> valid;
  for (const auto& v : report.values)
    if (v.valid) valid[v.method][v.metric][v.split] = v.value;

  for (const auto& m : methods) {
    for (const auto& metric : metrics_list) {
      MetricSummary s;
      s.method = m.name;
      s.metric = metric;
      const auto& vals = valid[m.name][metric];
      s.n_obs = static_cast<int>(vals.size());
      s.n_invalid = static_cast<int>(splits.size()) - s.n_obs;
      if (s.n_obs > 0) {
        double sum = 0.0;
        for (const auto& [sp, x] : vals) sum += x;
        s.mean = sum / s.n_obs;
        double ss = 0.0;
        for (const auto& [sp, x] : vals) ss += (x - s.mean) * (x - s.mean);
        s.sd = s.n_obs > 1 ? std::sqrt(ss / (s.n_obs - 1)) : 0.0;
      } else {
        s.mean = s.sd = std::numeric_limits<double>::quiet_NaN();
      }
      report.summary.push_back(s);
    }
  }

  for (const auto& metric : metrics_list) {
    std::vector<PairedComparison> family;
    for (const auto& m : methods) {
      if (m.name == cfg.reference) continue;
      PairedComparison pc;
      pc.method = m.name;
      pc.reference = cfg.reference;
      pc.metric = metric;
      const auto& a = valid[m.name][metric];
      const auto& b = valid[cfg.reference][metric];
      std::vector<double> diffs;
      for (const auto& [sp, x] : a) {
        auto it = b.find(sp);
        if (it != b.end()) diffs.push_back(x - it->second);
      }
      pc.n = static_cast<int>(diffs.size());
      if (pc.n > 0) pc.mean_delta = std::accumulate(diffs.begin(), diffs.end(), 0.0) / pc.n;
      try {
        const auto w = stats::wilcoxon_signed_rank(Eigen::Map<const Vector>(diffs.data(), static_cast<Eigen::Index>(diffs.size())));
        pc.w_plus = w.w_plus;
        pc.w_minus = w.w_minus;
        pc.p_value = w.p_value;
      } catch (const UndefinedTest&) {
        pc.p_value = 1.0;
        pc.note = "all differences zero";
      } catch (const InsufficientData&) {
        pc.p_value = 1.0;
        pc.note = "fewer than 5 non-zero paired differences";
      }
      family.push_back(pc);
    }
    if (!family.empty()) {
      Vector p(static_cast<Eigen::Index>(family.size()));
      for (std::size_t i = 0; i < family.size(); ++i) p(static_cast<Eigen::Index>(i)) = family[i].p_value;
      const Vector q = stats::bh_fdr(p);
      for (std::size_t i = 0; i < family.size(); ++i) family[i].q_value = q(static_cast<Eigen::Index>(i));
    }
    report.paired.insert(report.paired.end(), family.begin(), family.end());
  }

  report.timings["total_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  report.timings["split_seconds"] = split_seconds;
  return report;
}

}  // namespace forge::harness
