#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include <forge/audits.hpp>
#include <forge/compaction.hpp>
#include <forge/error.hpp>
#include <forge/harness.hpp>
#include <forge/let_adaptor.hpp>
#include <forge/linalg.hpp>
#include <forge/operator_store.hpp>
#include <forge/panel.hpp>
#include <forge/probe.hpp>
#include <forge/rng.hpp>
#include <forge/synth.hpp>

#include "cli.hpp"

namespace fs = std::filesystem;

namespace forge::cli {
namespace {

std::string join(const std::vector<std::string>& v, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + v[i];
  return out;
}

UnitId parse_unit(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw InvalidArgument("unit '" + s + "' must look like LAYER:HEAD");
  try {
    std::size_t a = 0, b = 0;
    const int layer = std::stoi(s.substr(0, colon), &a);
    const int head = std::stoi(s.substr(colon + 1), &b);
    if (a != colon || b != s.size() - colon - 1) throw std::invalid_argument(s);
    return {layer, head};
  } catch (const std::logic_error&) {
    throw InvalidArgument("unit '" + s + "' must look like LAYER:HEAD");
  }
}

std::string unit_string(UnitId u) { return std::to_string(u.layer) + ":" + std::to_string(u.head); }

struct Context {
  Invocation inv;
  std::vector<std::string> problems;
  Json effective = Json::object();
  std::vector<fs::path> inputs;
  std::vector<std::string> outputs;
  int workers = 1;

  Section section(const std::string& name) {
    if (inv.env_seed) inv.config.set(name, "seed", {*inv.env_seed});
    return Section(inv.config, name, problems, effective);
  }

  /// Seed for the command's own section: FORGE_SEED, then --seed, then config.
  std::uint64_t own_seed(Section& s, std::uint64_t fallback) {
    if (inv.seed && !inv.env_seed) inv.config.set(s.name(), "seed", {std::to_string(*inv.seed)});
    return s.seed("seed", fallback);
  }

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : fs::absolute(inv.out / path).lexically_normal();
  }

  /// Input path; "none" (when allowed) yields an empty path.
  fs::path input(Section& s, const std::string& key, const std::string& fallback, bool allow_none = false) {
    const std::string v = s.text(key, fallback);
    if (allow_none && (v == "none" || v.empty())) {
      s.override_value(key, "none");
      return {};
    }
    const fs::path abs = resolve(v);
    s.override_value(key, abs.string());
    inputs.push_back(abs);
    return abs;
  }

  void check() {
    if (!problems.empty()) throw ConfigError(problems);
  }

  void write(const std::string& name, const std::string& bytes) {
    write_file(inv.out / name, bytes);
    outputs.push_back(name);
  }

  void write_panel(const std::string& name, const AnchorPanel& panel) {
    const fs::path p = inv.out / name;
    save_panel_csv(panel, p);
    outputs.push_back(name);
    outputs.push_back(p.stem().string() + ".stages.csv");
  }

  void write_manifest(const std::string& name) {
    Json m = Json::object();
    m["tool"] = "forge";
    m["version"] = FORGE_VERSION;
    m["command"] = inv.command;
    m["out"] = fs::absolute(inv.out).lexically_normal().string();
    m["config"] = effective;
    Json ins = Json::array();
    std::set<std::string> seen;
    for (const auto& p : inputs) {
      if (!seen.insert(p.string()).second) continue;
      ins.push_back({{"path", p.string()}, {"checksum", fs::exists(p) ? checksum_file(p) : std::string("missing")}});
    }
    m["inputs"] = ins;
    Json outs = Json::array();
    for (const auto& o : outputs) outs.push_back({{"path", o}, {"checksum", checksum_file(inv.out / o)}});
    m["outputs"] = outs;
    write_file(inv.out / (name + ".manifest.json"), m.dump(2) + "\n");
  }
};

std::shared_ptr<const FeatureOperator> load_operator(const fs::path& p) {
  if (p.empty()) return nullptr;
  return std::make_shared<const FeatureOperator>(FeatureOperator::load(p));
}

Matrix apply_operator(const std::shared_ptr<const FeatureOperator>& op, const Matrix& X) {
  return op ? op->apply(X) : X;
}

std::string operator_tag(const fs::path& p) { return p.empty() ? std::string("none") : checksum_file(p); }

void check_operator_matches(const LetHead& head, const fs::path& op_path) {
  if (!head.hyper().contains("operator")) return;
  const std::string want = head.hyper()["operator"].get<std::string>();
  const std::string have = operator_tag(op_path);
  if (want != have)
    throw InvalidArgument("head was trained on operator " + want + " but " + (op_path.empty() ? "none" : op_path.string()) +
                          " has checksum " + have);
}

LetHead with_operator_tag(const LetHead& h, const fs::path& op_path, const std::vector<std::string>& gate_donors = {}) {
  Json hyper = h.hyper();
  hyper["operator"] = operator_tag(op_path);
  if (!gate_donors.empty()) hyper["gate_donors"] = gate_donors;
  LetHead out(h.variant(), h.w_enc(), h.bias(), h.beta(), hyper, h.seed());
  return h.gate_report() ? out.frozen_with(*h.gate_report()) : out;
}

std::string matrix_csv(const Matrix& Z, const std::vector<std::string>& row_ids, const std::string& prefix) {
  std::ostringstream os;
  os << "row_id";
  for (Eigen::Index j = 0; j < Z.cols(); ++j) os << ',' << prefix << j;
  os << '\n';
  for (Eigen::Index i = 0; i < Z.rows(); ++i) {
    os << row_ids[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < Z.cols(); ++j) os << ',' << format_double(Z(i, j));
    os << '\n';
  }
  return os.str();
}

/// Endpoint column: "stage", "branch", "donor", "tissue" or "label:NAME".
const Categorical& endpoint_column(const AnchorPanel& p, const std::string& name) {
  if (name == "stage") return p.stage;
  if (name == "branch") return p.branch;
  if (name == "donor") return p.donor;
  if (name == "tissue") return p.tissue;
  if (name.rfind("label:", 0) == 0) {
    const auto it = p.labels.find(name.substr(6));
    if (it != p.labels.end()) return it->second;
  }
  throw InvalidArgument("panel has no column '" + name + "'");
}

std::string endpoint_name(const std::string& spec) { return spec.rfind("label:", 0) == 0 ? spec.substr(6) : spec; }

// ---------------------------------------------------------------------------

void cmd_synth(Context& c) {
  auto s = c.section("synth");
  synth::SynthConfig cfg;
  cfg.n_branches = s.integer("n_branches", cfg.n_branches);
  cfg.depth_per_branch = s.integer("depth_per_branch", cfg.depth_per_branch);
  cfg.n_donors = s.integer("n_donors", cfg.n_donors);
  cfg.n_external_donors = s.integer("n_external_donors", cfg.n_external_donors);
  cfg.n_tissues = s.integer("n_tissues", cfg.n_tissues);
  cfg.cells_per_stage = s.integer("cells_per_stage", cfg.cells_per_stage);
  cfg.G = s.integer("G", cfg.G);
  cfg.noise_sigma = s.real("noise_sigma", cfg.noise_sigma);
  cfg.n_layers = s.integer("n_layers", cfg.n_layers);
  cfg.n_heads = s.integer("n_heads", cfg.n_heads);
  std::vector<std::string> planted;
  for (const auto& u : cfg.planted_heads) planted.push_back(unit_string(u));
  planted = s.list("planted_heads", planted);
  cfg.planted_heads.clear();
  for (const auto& u : planted) {
    try {
      cfg.planted_heads.push_back(parse_unit(u));
    } catch (const InvalidArgument& e) {
      c.problems.push_back("synth.planted_heads: " + std::string(e.what()));
    }
  }
  cfg.planted_split = s.boolean("planted_split", cfg.planted_split);
  cfg.distractor_scale = s.real("distractor_scale", cfg.distractor_scale);
  cfg.distractor_rank = s.integer("distractor_rank", cfg.distractor_rank);
  cfg.edge_length = s.real("edge_length", cfg.edge_length);
  cfg.nuisance_rank = s.integer("nuisance_rank", cfg.nuisance_rank);
  cfg.nuisance_cell_scale = s.real("nuisance_cell_scale", cfg.nuisance_cell_scale);
  cfg.nuisance_group_scale = s.real("nuisance_group_scale", cfg.nuisance_group_scale);
  cfg.donor_effect = s.real("donor_effect", cfg.donor_effect);
  cfg.tissue_effect = s.real("tissue_effect", cfg.tissue_effect);
  cfg.subtype_shift = s.real("subtype_shift", cfg.subtype_shift);
  cfg.progression = s.real("progression", cfg.progression);
  cfg.seed = c.own_seed(s, cfg.seed);
  if (c.problems.empty()) {
    try {
      cfg.validate();
    } catch (const InvalidArgument& e) {
      std::istringstream lines(e.what());
      for (std::string line; std::getline(lines, line);)
        if (!line.empty()) c.problems.push_back(line);
    }
  }
  c.check();

  const auto data = synth::generate(cfg);
  c.write("tensor.fgc", data.tensor.to_container().to_bytes());
  c.write_panel("cells.csv", data.cells);
  c.write_panel("internal_cells.csv", data.internal_cells);
  c.write_panel("external_cells.csv", data.external_cells);
  c.write_panel("internal.csv", data.internal);
  c.write_panel("external.csv", data.external);
  Json truth = Json::object();
  const auto& tree = data.truth.tree;
  Json stages = Json::array();
  for (int i = 0; i < static_cast<int>(tree.names.size()); ++i)
    stages.push_back({{"name", tree.names[static_cast<std::size_t>(i)]},
                      {"parent", tree.parent[static_cast<std::size_t>(i)] < 0
                                     ? Json(nullptr)
                                     : Json(tree.names[static_cast<std::size_t>(tree.parent[static_cast<std::size_t>(i)])])},
                      {"depth", tree.depth[static_cast<std::size_t>(i)]},
                      {"branch", tree.branch[static_cast<std::size_t>(i)]}});
  truth["stages"] = stages;
  Json heads = Json::array();
  for (const auto& u : data.truth.planted_heads) heads.push_back(unit_string(u));
  truth["planted_heads"] = heads;
  truth["planted_rank"] = data.truth.planted_rank;
  truth["external_donors"] = donors_present(data.external_cells);
  c.write("truth.json", truth.dump(2) + "\n");
  c.write_manifest("synth");
  std::cout << "synth: " << data.cells.rows() << " cells, " << data.internal.rows() << " internal anchors, "
            << data.external.rows() << " external anchors -> " << c.inv.out.string() << "\n";
}

LayerRange parse_range(Section& s, Context& c, const std::string& key, LayerRange fallback) {
  const auto v = s.int_list(key, {fallback.begin, fallback.end});
  if (v.size() != 2) {
    c.problems.push_back("op." + key + ": expected [begin, end]");
    return fallback;
  }
  return {v[0], v[1]};
}

void cmd_op(Context& c, const std::string& action) {
  auto s = c.section("op");
  if (action == "build-drift") {
    const auto tensor_path = c.input(s, "tensor", "tensor.fgc");
    const std::string output = s.text("output", "op_drift.fgc");
    const bool custom = c.inv.config.has("op", "early") || c.inv.config.has("op", "mid") || c.inv.config.has("op", "late");
    c.check();
    const auto tensor = WeightTensor::load(tensor_path);
    auto blocks = default_layer_blocks(tensor.n_layers());
    if (custom) {
      blocks[0] = parse_range(s, c, "early", blocks[0]);
      blocks[1] = parse_range(s, c, "mid", blocks[1]);
      blocks[2] = parse_range(s, c, "late", blocks[2]);
      c.check();
    }
    const auto op = build_drift_operator(tensor, blocks[0], blocks[1], blocks[2]);
    c.write(output, op.to_container().to_bytes());
    c.write_manifest("op_build-drift");
    std::cout << "drift operator: " << op.dim() << " -> " << op.out_dim() << " features -> " << output << "\n";
  } else if (action == "compose") {
    const auto tensor_path = c.input(s, "tensor", "tensor.fgc");
    const auto units = s.required_list("units");
    std::vector<double> weights = s.real_list("weights", std::vector<double>(units.size(), 1.0));
    const std::string output = s.text("output", "op_compact.fgc");
    if (weights.size() != units.size()) c.problems.push_back("op.weights: must have one weight per unit");
    std::vector<UnitId> ids;
    for (const auto& u : units) {
      try {
        ids.push_back(parse_unit(u));
      } catch (const InvalidArgument& e) {
        c.problems.push_back("op.units: " + std::string(e.what()));
      }
    }
    c.check();
    const auto op = compose_compact(WeightTensor::load(tensor_path), ids, weights);
    c.write(output, op.to_container().to_bytes());
    c.write_manifest("op_compose");
    std::cout << "compact operator over " << ids.size() << " unit(s) -> " << output << "\n";
  } else if (action == "svd") {
    const auto in = c.input(s, "input", "op_compact.fgc");
    const int rank = s.integer("rank", 0, 1);
    if (!c.inv.config.has("op", "rank")) c.problems.push_back("op.rank: required key is missing");
    const std::string output = s.text("output", "op_svd.fgc");
    c.check();
    const auto op = truncate_svd(FeatureOperator::load(in), rank);
    c.write(output, op.to_container().to_bytes());
    c.write_manifest("op_svd");
    std::cout << "rank-" << op.rank() << " surrogate -> " << output << "\n";
  } else if (action == "prune") {
    const auto in = c.input(s, "input", "op_svd.fgc");
    const auto keep = s.int_list("keep", {}, true);
    const int k_read = s.integer("k_read", 0, 1);
    const int k_write = s.integer("k_write", 0, 1);
    if (!c.inv.config.has("op", "k_read")) c.problems.push_back("op.k_read: required key is missing");
    if (!c.inv.config.has("op", "k_write")) c.problems.push_back("op.k_write: required key is missing");
    const std::string output = s.text("output", "op_sparse.fgc");
    c.check();
    const auto op = prune_sparse(FeatureOperator::load(in), keep, k_read, k_write);
    c.write(output, op.to_container().to_bytes());
    c.write_manifest("op_prune");
    std::cout << "sparse surrogate: " << op.sparse_factors().size() << " factors, " << op.active_loading_count()
              << " active loadings -> " << output << "\n";
  }
}

std::string trace_csv(const TrainTrace& t) {
  std::ostringstream os;
  os << "step,loss,best_loss\n";
  for (std::size_t i = 0; i < t.loss.size(); ++i)
    os << i << ',' << format_double(t.loss[i]) << ',' << format_double(t.best_loss[i]) << '\n';
  return os.str();
}

void cmd_head_train(Context& c) {
  auto s = c.section("head");
  const std::string variant_s = s.choice("variant", "anchor", {"anchor", "cell", "hybrid"});
  const int dim = s.integer("dim", 10, 1);
  const double alpha = s.real("alpha", 1e-3, 0.0);
  const auto op_path = c.input(s, "operator", "op_drift.fgc", true);
  const bool anchor = variant_s == "anchor";
  const auto panel_path = c.input(s, "panel", anchor ? "internal.csv" : "internal_cells.csv");
  OptimizerConfig opt;
  opt.steps = s.integer("steps", opt.steps, 0);
  opt.learning_rate = s.real("learning_rate", opt.learning_rate, 0.0);
  CellTrainConfig cell;
  cell.dim = dim;
  cell.opt.learning_rate = opt.learning_rate;
  fs::path ref_path, ref_panel_path;
  HybridTrainConfig hybrid;
  if (!anchor) {
    cell.epochs = s.integer("epochs", cell.epochs, 1);
    cell.batch = s.integer("batch", cell.batch, 2);
    cell.cap_per_stage = s.integer("cap_per_stage", cell.cap_per_stage, 1);
    cell.n_neighbors = s.integer("n_neighbors", cell.n_neighbors, 1);
    cell.weights.stage = s.real("w_stage", cell.weights.stage, 0.0);
    cell.weights.local = s.real("w_local", cell.weights.local, 0.0);
    cell.weights.recon = s.real("w_recon", cell.weights.recon, 0.0);
    cell.weights.cls = s.real("w_cls", cell.weights.cls, 0.0);
  }
  if (variant_s == "hybrid") {
    ref_path = c.input(s, "reference", "head_anchor.gated.fgc");
    ref_panel_path = c.input(s, "reference_panel", "internal.csv");
    hybrid.lambda_topo = s.real("lambda_topo", hybrid.lambda_topo, 0.0);
    hybrid.lambda_compact = s.real("lambda_compact", hybrid.lambda_compact, 0.0);
  }
  const int holdout = s.integer("holdout_donors", 2, 0);
  const std::uint64_t seed = c.own_seed(s, 1);
  const std::string output = s.text("output", "head_" + variant_s + ".fgc");
  c.check();

  const auto op = load_operator(op_path);
  const AnchorPanel panel = load_panel(panel_path);
  const auto gate_donors = draw_donors(panel, holdout, derive_seed(seed, 9));
  const AnchorPanel input = select_donors(panel.with_features(apply_operator(op, panel.features)), gate_donors, false);
  TrainTrace trace;
  LetHead head;
  if (anchor) {
    head = train_anchor_head(input, dim, alpha, seed, opt, &trace);
  } else if (variant_s == "cell") {
    head = train_cell_head(input, cell, seed, &trace);
  } else {
    hybrid.cell = cell;
    const LetHead ref = LetHead::load(ref_path);
    check_operator_matches(ref, op_path);
    const AnchorPanel ref_panel = load_panel(ref_panel_path);
    head = train_hybrid_head(input, ref,
                             select_donors(ref_panel.with_features(apply_operator(op, ref_panel.features)), gate_donors, false),
                             hybrid, seed, &trace);
  }
  head = with_operator_tag(head, op_path, gate_donors);
  c.write(output, head.to_bytes());
  const std::string trace_name = fs::path(output).stem().string() + ".trace.csv";
  c.write(trace_name, trace_csv(trace));
  c.write_manifest("head_train_" + variant_s);
  std::cout << variant_s << " head: k=" << head.dim() << " D=" << head.input_dim() << " beta=" << format_double(head.beta())
            << " final distance loss=" << format_double(trace.final_terms.distance) << " -> " << output << "\n";
}

GateConfig gate_config(Section& s) {
  GateConfig g;
  g.n_perm = s.integer("n_perm", g.n_perm, 1);
  g.n_neighbors = s.integer("n_neighbors", g.n_neighbors, 1);
  if (s.name() == "gate") {
    g.thresholds.trustworthiness = s.real("min_trustworthiness", g.thresholds.trustworthiness, 0.0, 1.0);
    g.thresholds.corr = s.real("min_corr", g.thresholds.corr, -1.0, 1.0);
    g.thresholds.blocked_p = s.real("max_blocked_p", g.thresholds.blocked_p, 0.0, 1.0);
    g.random_pair_fraction = s.real("random_pair_fraction", g.random_pair_fraction, 0.0, 1.0);
    g.donor_fraction = s.real("donor_fraction", g.donor_fraction, 0.0, 1.0);
  }
  return g;
}

void cmd_head_gate(Context& c) {
  auto s = c.section("gate");
  const auto head_path = c.input(s, "head", "head_anchor.fgc");
  const auto op_path = c.input(s, "operator", "op_drift.fgc", true);
  const auto panel_path = c.input(s, "panel", "internal.csv");
  GateConfig g = gate_config(s);
  g.workers = c.workers;
  const std::uint64_t seed = c.own_seed(s, 0);
  const std::string output = s.text("output", head_path.stem().string() + ".gated.fgc");
  const std::string report = s.text("report", "gate.json");
  const bool holdout_rows = s.choice("rows", "holdout", {"holdout", "all"}) == "holdout";
  c.check();
  const LetHead head = LetHead::load(head_path);
  check_operator_matches(head, op_path);
  const auto op = load_operator(op_path);
  AnchorPanel panel = load_panel(panel_path);
  if (holdout_rows && head.hyper().contains("gate_donors"))
    panel = select_donors(panel, head.hyper()["gate_donors"].get<std::vector<std::string>>(), true);
  const GateReport r = gate(head, panel.with_features(apply_operator(op, panel.features)), g, seed);
  c.write(report, r.to_json().dump(2) + "\n");
  c.write(output, head.frozen_with(r).to_bytes());
  c.write_manifest("head_gate");
  std::cout << "gate " << (r.passed ? "PASSED" : "FAILED") << ": trust=" << format_double(r.trustworthiness)
            << " corr_random=" << format_double(r.corr_random) << " corr_donor=" << format_double(r.corr_donor)
            << " corr_clade=" << format_double(r.corr_clade) << " blocked_p=" << format_double(r.blocked_p) << "\n";
}

void cmd_head_transfer(Context& c) {
  auto s = c.section("transfer");
  const auto head_path = c.input(s, "head", "head_anchor.gated.fgc");
  const auto op_path = c.input(s, "operator", "op_drift.fgc", true);
  const auto panel_path = c.input(s, "panel", "external.csv");
  GateConfig g = gate_config(s);
  g.workers = c.workers;
  const std::uint64_t seed = c.own_seed(s, 0);
  const std::string report = s.text("report", "transfer.json");
  const std::string latent = s.text("latent", "transfer_latent.csv");
  c.check();
  const LetHead head = LetHead::load(head_path);
  check_operator_matches(head, op_path);
  const auto op = load_operator(op_path);
  const AnchorPanel panel = load_panel(panel_path);
  const auto [Z, r] = transfer(head, panel.with_features(apply_operator(op, panel.features)), g, seed);
  c.write(report, r.to_json().dump(2) + "\n");
  c.write(latent, matrix_csv(Z, panel.row_ids, "z"));
  c.write_manifest("head_transfer");
  std::cout << "transfer " << (r.passed ? "PASSED" : "FAILED") << ": trust=" << format_double(r.trustworthiness)
            << " corr_resid=" << format_double(r.corr_resid) << " blocked_p=" << format_double(r.blocked_p) << "\n";
}

compaction::ScanConfig scan_config(Section& s, Context& c) {
  compaction::ScanConfig sc;
  sc.k = s.integer("k", sc.k, 1);
  sc.alpha = s.real("alpha", sc.alpha, 0.0);
  sc.opt.steps = s.integer("steps", sc.opt.steps, 0);
  sc.n_neighbors = s.integer("n_neighbors", sc.n_neighbors, 1);
  sc.workers = c.workers;
  return sc;
}

void cmd_scan(Context& c) {
  auto s = c.section("scan");
  const auto tensor_path = c.input(s, "tensor", "tensor.fgc");
  const auto internal = c.input(s, "internal", "internal.csv");
  const auto external = c.input(s, "external", "external.csv");
  auto sc = scan_config(s, c);
  sc.score = compaction::screen_score_from_string(s.choice("score", "corr_resid", {"corr_resid", "composite"}));
  sc.seed = c.own_seed(s, 0);
  const std::string output = s.text("output", "scan.csv");
  c.check();
  const auto rows = compaction::scan_heads(WeightTensor::load(tensor_path), load_panel(internal), load_panel(external), sc);
  c.write(output, compaction::scan_csv(rows));
  c.write_manifest("scan");
  for (std::size_t i = 0; i < std::min<std::size_t>(rows.size(), 5); ++i)
    std::cout << "#" << rows[i].rank << " " << unit_string(rows[i].unit) << " score=" << format_double(rows[i].score)
              << (rows[i].ok ? "" : " (failed: " + rows[i].error + ")") << "\n";
}

std::vector<UnitId> units_from_scan(const fs::path& p, int top) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read scan table '" + p.string() + "'");
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  {
    std::istringstream h(line);
    for (std::string f; std::getline(h, f, ',');) header.push_back(f);
  }
  const auto col = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw FormatError("scan table lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_layer = col("layer"), c_head = col("head"), c_ok = col("ok");
  std::vector<UnitId> out;
  while (static_cast<int>(out.size()) < top && std::getline(in, line)) {
    std::vector<std::string> f;
    std::istringstream r(line);
    for (std::string x; std::getline(r, x, ',');) f.push_back(x);
    if (f.size() <= std::max({c_layer, c_head, c_ok}) || f[c_ok] != "1") continue;
    out.push_back({std::stoi(f[c_layer]), std::stoi(f[c_head])});
  }
  if (out.empty()) throw InvalidArgument("scan table has no successful rows");
  return out;
}

void cmd_compress(Context& c) {
  auto s = c.section("compress");
  const auto tensor_path = c.input(s, "tensor", "tensor.fgc");
  const auto internal = c.input(s, "internal", "internal.csv");
  const bool explicit_units = c.inv.config.has("compress", "units");
  fs::path scan_path;
  int top = 1;
  std::vector<std::string> units;
  if (explicit_units) {
    units = s.list("units", {});
  } else {
    scan_path = c.input(s, "scan", "scan.csv");
    top = s.integer("top", 1, 1);
  }
  const auto ranks = s.int_list("ranks", {});
  for (int r : ranks)
    if (r < 1) c.problems.push_back("compress.ranks: every rank must be >= 1");
  auto sc = scan_config(s, c);
  sc.seed = c.own_seed(s, 0);
  const std::string output = s.text("output", "op_compact.fgc");
  std::vector<UnitId> ids;
  for (const auto& u : units) {
    try {
      ids.push_back(parse_unit(u));
    } catch (const InvalidArgument& e) {
      c.problems.push_back("compress.units: " + std::string(e.what()));
    }
  }
  c.check();
  if (!explicit_units) ids = units_from_scan(scan_path, top);
  const auto tensor = WeightTensor::load(tensor_path);
  const auto fit = compaction::fit_compact_weights(tensor, ids, load_panel(internal), sc);
  c.write(output, fit.op.to_container().to_bytes());
  Json report = Json::object();
  Json u = Json::array();
  for (const auto& id : ids) u.push_back(unit_string(id));
  report["units"] = u;
  report["alphas"] = fit.alphas;
  report["loss"] = fit.loss;
  report["evaluations"] = fit.evaluations;
  const Matrix dense = fit.op.dense();
  Json surrogates = Json::array();
  const std::string stem = fs::path(output).stem().string();
  for (int r : ranks) {
    const auto low = truncate_svd(fit.op, r);
    const std::string name = stem + "_svd_r" + std::to_string(r) + ".fgc";
    c.write(name, low.to_container().to_bytes());
    surrogates.push_back({{"rank", low.rank()},
                          {"file", name},
                          {"relative_frobenius_error", (low.dense() - dense).norm() / std::max(dense.norm(), 1e-300)},
                          {"bytes", low.serialized_size()}});
  }
  report["svd"] = surrogates;
  report["bytes"] = fit.op.serialized_size();
  c.write("compress.json", report.dump(2) + "\n");
  c.write_manifest("compress");
  std::cout << "compact operator over " << ids.size() << " unit(s), loss=" << format_double(fit.loss) << " -> " << output
            << "\n";
}

compaction::EvalSet eval_set(const std::string& name, const AnchorPanel& p, const std::vector<std::string>& endpoints) {
  compaction::EvalSet e;
  e.name = name;
  e.X = p.features;
  for (const auto& ep : endpoints) e.labels[endpoint_name(ep)] = endpoint_column(p, ep).codes;
  return e;
}

void cmd_ablate(Context& c, const std::string& mode) {
  auto s = c.section("ablate");
  const auto op_path = c.input(s, "operator", "op_compact_svd_r8.fgc");
  const std::string head_s = s.text("head", "none");
  fs::path head_path;
  if (head_s != "none" && !head_s.empty()) head_path = c.input(s, "head", head_s);
  const auto train_path = c.input(s, "train_panel", "internal_cells.csv");
  const auto eval_path = c.input(s, "eval_panel", "external_cells.csv");
  const auto endpoints = s.list("endpoints", {"stage", "label:subtype"});
  const auto probe = probe_kind_from_string(s.choice("probe", "linear", {"linear", "mlp2", "mlp3"}));
  const int dim = s.integer("dim", 10, 1);
  OptimizerConfig opt;
  opt.steps = s.integer("steps", opt.steps, 0);
  std::vector<int> core;
  if (mode != "loo") core = s.int_list("core", {}, true);
  const std::string eval_by = mode == "core" ? s.choice("eval_by", "donor", {"donor", "tissue"}) : "";
  const std::uint64_t seed = c.own_seed(s, 0);
  const std::string output = s.text("output", "ablate_" + mode + ".csv");
  if (mode == "subset" && (core.empty() || core.size() > 8)) c.problems.push_back("ablate.core: needs 1 to 8 factors");
  c.check();

  const auto op = FeatureOperator::load(op_path);
  const AnchorPanel train = load_panel(train_path);
  const AnchorPanel evalp = load_panel(eval_path);
  LetHead head;
  if (!head_path.empty()) {
    head = LetHead::load(head_path);
    check_operator_matches(head, op_path);
  } else {
    const AnchorPanel anchors = aggregate_anchors(train);
    head = train_anchor_head(anchors.with_features(op.apply(anchors.features)), dim, 1e-3, derive_seed(seed, 1), opt);
  }
  std::vector<compaction::EndpointSpec> specs;
  for (const auto& ep : endpoints) specs.push_back({endpoint_name(ep), endpoint_column(train, ep).n_levels()});
  const auto assets =
      compaction::train_frozen_assets(op, head, eval_set("train", train, endpoints), specs, probe, derive_seed(seed, 2));
  if (mode == "loo") {
    const auto table = compaction::ablate_factors_loo(op, assets, eval_set("eval", evalp, endpoints));
    c.write(output, table.csv());
    c.write("factor_loadings.csv", compaction::factor_loadings_csv(op, 10));
    std::cout << "leave-one-out over " << table.order.size() << " factors; top factor " << table.order.front()
              << " carries " << format_double(table.concentration(0)) << " of clipped impact\n";
  } else if (mode == "subset") {
    const auto sweep = compaction::subset_sweep(op, assets, core, eval_set("eval", evalp, endpoints));
    c.write(output, sweep.csv());
    for (std::size_t e = 0; e < sweep.endpoints.size(); ++e) {
      std::vector<std::string> f;
      for (int x : sweep.rows[static_cast<std::size_t>(sweep.best[e])].subset) f.push_back(std::to_string(x));
      std::cout << sweep.endpoints[e] << ": best subset {" << join(f, ",") << "} ratio "
                << format_double(sweep.best_ratio(static_cast<Eigen::Index>(e))) << "\n";
    }
  } else {
    const Categorical& by = endpoint_column(evalp, eval_by);
    std::vector<compaction::EvalSet> evals;
    for (const auto& level : by.levels) {
      const IndexList rows = evalp.rows_where(by, level);
      if (!rows.empty()) evals.push_back(eval_set(level, evalp.subset(rows), endpoints));
    }
    const auto cs = compaction::core_sufficiency(op, assets, core, evals);
    c.write(output, cs.csv());
    std::cout << "core sufficiency over " << cs.rows.size() << " prefixes and " << evals.size() << " eval sets\n";
  }
  c.write("ablate_assets.txt", "head " + hex64(fnv1a64(head.to_bytes())) + "\nassets " + assets.fingerprint() + "\n");
  c.write_manifest("ablate_" + mode);
}

void cmd_bench(Context& c) {
  auto s = c.section("bench");
  const auto panel_path = c.input(s, "panel", "cells.csv");
  const auto methods_s = s.list("methods", {"head", "pca", "svd", "raw"});
  const bool wants_head = std::find(methods_s.begin(), methods_s.end(), "head") != methods_s.end();
  const bool wants_op = wants_head || std::find(methods_s.begin(), methods_s.end(), "operator") != methods_s.end();
  fs::path head_path, op_path;
  if (wants_head) head_path = c.input(s, "head", "head_anchor.gated.fgc");
  if (wants_op) op_path = c.input(s, "operator", "op_drift.fgc", true);
  const int dim = s.integer("dim", 10, 1);
  const int n_splits = s.integer("n_splits", 12, 1);
  const int n_test = s.integer("n_test_donors", 2, 1);
  const int cap = s.integer("train_cap", 100000, 1);
  harness::CampaignConfig cc;
  cc.endpoints = s.list("endpoints", {"pseudotime", "stage"});
  cc.reference = s.text("reference", wants_head ? "head" : methods_s.empty() ? "" : methods_s.front());
  cc.k_nn = s.integer("k_nn", cc.k_nn, 1);
  const auto probe = probe_kind_from_string(s.choice("probe", "linear", {"linear", "mlp2", "mlp3"}));
  cc.seed = c.own_seed(s, 0);
  cc.workers = c.workers;
  const std::string prefix = s.text("output", "bench");
  std::vector<harness::MethodUnderTest> methods;
  std::set<std::string> names;
  for (const auto& m : methods_s) {
    harness::MethodUnderTest mt;
    mt.probe = probe;
    mt.dim = dim;
    if (m == "head") {
      mt.name = "head";
      mt.kind = harness::RepresentationKind::let_head;
    } else if (m == "operator") {
      mt.name = "operator";
      mt.kind = harness::RepresentationKind::feature_operator;
    } else if (m == "pca") {
      mt.name = "pca" + std::to_string(dim);
      mt.kind = harness::RepresentationKind::pca;
    } else if (m == "svd") {
      mt.name = "svd" + std::to_string(dim);
      mt.kind = harness::RepresentationKind::svd;
    } else if (m == "raw") {
      mt.name = "raw";
      mt.kind = harness::RepresentationKind::raw;
    } else {
      c.problems.push_back("bench.methods: unknown method '" + m + "' (expected head|operator|pca|svd|raw)");
      continue;
    }
    if (!names.insert(mt.name).second) c.problems.push_back("bench.methods: duplicate method '" + m + "'");
    methods.push_back(mt);
  }
  if (cc.reference == "pca") cc.reference = "pca" + std::to_string(dim);
  if (cc.reference == "svd") cc.reference = "svd" + std::to_string(dim);
  if (!names.count(cc.reference)) c.problems.push_back("bench.reference: '" + cc.reference + "' is not among the methods");
  c.check();

  const AnchorPanel cells = load_panel(panel_path);
  auto op = load_operator(op_path);
  std::shared_ptr<const LetHead> head;
  if (wants_head) {
    head = std::make_shared<const LetHead>(LetHead::load(head_path));
    check_operator_matches(*head, op_path);
  }
  for (auto& m : methods) {
    if (m.kind == harness::RepresentationKind::let_head) {
      m.head = head;
      m.op = op;
    }
    if (m.kind == harness::RepresentationKind::feature_operator) {
      if (!op) throw InvalidArgument("method 'operator' needs bench.operator");
      m.op = op;
    }
  }
  const auto splits = harness::make_splits(cells, n_splits, n_test, cap, cc.seed);
  const auto rep = harness::run_campaign(cells, methods, splits, cc);
  Json sj = Json::array();
  for (const auto& sp : splits) sj.push_back(sp.to_json());
  c.write(prefix + "_splits.json", sj.dump(2) + "\n");
  c.write(prefix + "_values.csv", rep.values_csv());
  c.write(prefix + "_paired.csv", rep.paired_csv());
  c.write(prefix + "_summary.csv", rep.summary_csv());
  c.write(prefix + "_summary.txt", rep.summary_text());
  c.write_manifest("bench_run");
  std::cout << rep.summary_text();
}

struct AuditInputs {
  AnchorPanel panel;
  Matrix Z;
  LetHead head;
  std::shared_ptr<const FeatureOperator> op;
};

AuditInputs audit_inputs(Context& c, Section& s) {
  const auto head_path = c.input(s, "head", "head_anchor.gated.fgc");
  const auto op_path = c.input(s, "operator", "op_drift.fgc", true);
  const auto panel_path = c.input(s, "panel", "internal_cells.csv");
  c.check();
  AuditInputs a;
  a.head = LetHead::load(head_path);
  check_operator_matches(a.head, op_path);
  a.op = load_operator(op_path);
  a.panel = load_panel(panel_path);
  a.panel = a.panel.with_features(apply_operator(a.op, a.panel.features));
  a.Z = a.head.encode(a.panel.features);
  return a;
}

std::vector<int> binary_codes(const Categorical& col, const std::string& name) {
  if (col.n_levels() != 2) throw UndefinedTask("column '" + name + "' must have exactly two levels");
  return col.codes;
}

void cmd_audit(Context& c, const std::string& mode) {
  auto s = c.section("audit");
  const int n_perm = s.integer("n_perm", 499, 1);
  const std::uint64_t seed = c.own_seed(s, 0);
  if (mode == "ripple") {
    audits::RippleRule rule;
    rule.q_max = s.real("q_max", rule.q_max, 0.0, 1.0);
    rule.r2_min = s.real("r2_min", rule.r2_min, 0.0, 1.0);
    rule.cycles_min = s.real("cycles_min", rule.cycles_min, 0.0);
    const std::string output = s.text("output", "audit_ripple.csv");
    const auto a = audit_inputs(c, s);
    const auto axes = audits::latent_ripple_scan(a.Z, rule, n_perm, seed);
    c.write(output, audits::ripple_csv(axes));
    const auto sig = std::count_if(axes.begin(), axes.end(), [](const auto& x) { return x.significant; });
    std::cout << "ripple: " << sig << " significant residual axes of " << axes.size() << "\n";
  } else if (mode == "lens") {
    const std::string label = s.required_text("label");
    const double lambda = s.real("lambda", 1e-3, 0.0);
    const int nn = s.integer("n_neighbors", 10, 1);
    const std::string output = s.text("output", "audit_lens.json");
    const auto a = audit_inputs(c, s);
    const auto y = binary_codes(endpoint_column(a.panel, label), label);
    const auto pca = linalg::fit_projection(a.Z, 3, true);
    const auto r = audits::separation_lens(a.Z, pca.transform(a.Z), y, lambda, nn);
    Json j = {{"label", label},
              {"auroc_before", r.auroc_before},
              {"auroc_after", r.auroc_after},
              {"trustworthiness_before", r.trustworthiness_before},
              {"trustworthiness_after", r.trustworthiness_after},
              {"trustworthiness_delta", r.trustworthiness_delta}};
    c.write(output, j.dump(2) + "\n");
    c.write(fs::path(output).stem().string() + "_coords.csv", matrix_csv(r.coords, a.panel.row_ids, "d"));
    std::cout << "lens: AUROC " << format_double(r.auroc_before) << " -> " << format_double(r.auroc_after)
              << ", trust delta " << format_double(r.trustworthiness_delta) << "\n";
  } else if (mode == "intervene") {
    const std::string groups = s.text("groups", "stage");
    const std::string from = s.required_text("from");
    const std::string to = s.required_text("to");
    const int n_steps = s.integer("n_steps", 11, 2);
    const std::string output = s.text("output", "audit_intervene.json");
    const auto a = audit_inputs(c, s);
    const auto r =
        audits::latent_intervention(a.head, a.panel, endpoint_column(a.panel, groups), from, to, n_steps, n_perm, seed);
    Json j = {{"groups", groups}, {"from", from}, {"to", to}, {"rho_defined", r.rho_defined}, {"p_value", r.p_value}};
    j["rho"] = r.rho_defined ? Json(r.rho) : Json(nullptr);
    j["t"] = std::vector<double>(r.t.data(), r.t.data() + r.t.size());
    j["target_fraction"] = std::vector<double>(r.target_fraction.data(), r.target_fraction.data() + r.target_fraction.size());
    c.write(output, j.dump(2) + "\n");
    std::cout << "intervention " << from << " -> " << to << ": final target fraction "
              << format_double(r.target_fraction(r.target_fraction.size() - 1)) << ", p=" << format_double(r.p_value)
              << "\n";
  } else if (mode == "topology") {
    const std::string root_key = s.text("root", "");
    const int k_nn = s.integer("k_nn", 3, 1);
    const std::string output = s.text("output", "audit_topology.json");
    const auto a = audit_inputs(c, s);
    std::string root = root_key;
    std::map<std::string, std::string> branch_of;
    int best_depth = std::numeric_limits<int>::max();
    for (int i = 0; i < a.panel.rows(); ++i) {
      const auto& st = a.panel.stage.label(static_cast<std::size_t>(i));
      branch_of[st] = a.panel.branch.label(static_cast<std::size_t>(i));
      if (root_key.empty() && a.panel.stage_depth[static_cast<std::size_t>(i)] < best_depth) {
        best_depth = a.panel.stage_depth[static_cast<std::size_t>(i)];
        root = st;
      }
    }
    const auto r = audits::branch_topology(a.Z, a.panel.stage, root, branch_of, k_nn);
    Json edges = Json::array();
    for (const auto& [i, j] : r.mst_edges)
      edges.push_back({r.stages[static_cast<std::size_t>(i)], r.stages[static_cast<std::size_t>(j)]});
    Json j = {{"root", root},
              {"root_degree", r.root_degree},
              {"branchpoints", r.branchpoints},
              {"reachability_knn", r.reachability_knn},
              {"reachability_mst", r.reachability_mst},
              {"first_hop_diversity", r.first_hop_diversity},
              {"fallback_complete", r.fallback_complete},
              {"mst_edges", edges}};
    c.write(output, j.dump(2) + "\n");
    std::cout << "topology: root degree " << r.root_degree << ", " << r.branchpoints << " branchpoint(s)\n";
  } else if (mode == "dims") {
    const std::string output = s.text("output", "audit_dims.csv");
    const auto a = audit_inputs(c, s);
    std::map<std::string, Categorical> binary;
    for (const auto& [name, col] : a.panel.labels)
      if (col.n_levels() == 2) binary[name] = col;
    const auto d = audits::dimension_audit(a.Z, a.panel.stage, a.panel.branch, binary, a.panel.stage_depth);
    c.write(output, d.csv());
    std::cout << "dimension audit over " << d.rows.size() << " dims, mean |offdiag corr| "
              << format_double(d.mean_abs_offdiag_corr) << "\n";
  } else if (mode == "axis") {
    const auto targets = s.list("targets", {"depth"});
    const std::string blocks_col = s.choice("blocks", "donor", {"donor", "tissue", "none"});
    const double lambda = s.real("lambda", 1e-3, 0.0);
    const std::string output = s.text("output", "audit_axis.json");
    const auto a = audit_inputs(c, s);
    const auto n = a.panel.rows();
    Matrix T(n, static_cast<Eigen::Index>(targets.size()));
    Vector depth(n);
    for (int i = 0; i < n; ++i) depth(i) = a.panel.stage_depth[static_cast<std::size_t>(i)];
    for (std::size_t t = 0; t < targets.size(); ++t) {
      Vector col(n);
      if (targets[t] == "depth") {
        col = depth;
      } else {
        const auto& cat = endpoint_column(a.panel, targets[t]);
        for (int i = 0; i < n; ++i) col(i) = cat.codes[static_cast<std::size_t>(i)];
      }
      const double m = col.mean();
      const double sd = std::sqrt((col.array() - m).square().mean());
      if (!(sd > 0.0)) throw DegenerateAxis("target '" + targets[t] + "' is constant");
      T.col(static_cast<Eigen::Index>(t)) = (col.array() - m) / sd;
    }
    std::vector<int> blocks(static_cast<std::size_t>(n), 0);
    if (blocks_col != "none") blocks = endpoint_column(a.panel, blocks_col).codes;
    const auto r = audits::composite_axis(a.Z, T, depth, blocks, lambda, n_perm, seed);
    Json j = {{"targets", targets}, {"blocks", blocks_col}, {"p_value", r.p_value}, {"intercept", r.intercept}};
    j["rho_composite"] = std::isnan(r.rho_composite) ? Json(nullptr) : Json(r.rho_composite);
    j["rho_depth"] = std::isnan(r.rho_depth) ? Json(nullptr) : Json(r.rho_depth);
    j["weights"] = std::vector<double>(r.weights.data(), r.weights.data() + r.weights.size());
    c.write(output, j.dump(2) + "\n");
    std::cout << "composite axis: rho_depth " << format_double(r.rho_depth) << ", p=" << format_double(r.p_value) << "\n";
  }
  c.write_manifest("audit_" + mode);
}

void cmd_report(Context& c) {
  std::vector<fs::path> manifests;
  if (fs::exists(c.inv.out))
    for (const auto& e : fs::directory_iterator(c.inv.out)) {
      const std::string name = e.path().filename().string();
      if (name.size() > 14 && name.ends_with(".manifest.json") && name != "report.manifest.json")
        manifests.push_back(e.path());
    }
  std::sort(manifests.begin(), manifests.end());
  if (manifests.empty()) throw InvalidArgument("no manifests found in '" + c.inv.out.string() + "'");
  std::ostringstream os;
  os << "forge report\n============\n\n";
  for (const auto& m : manifests) {
    c.inputs.push_back(fs::absolute(m).lexically_normal());
    const Json j = Json::parse(read_file(m));
    os << "## " << m.filename().string().substr(0, m.filename().string().size() - 14) << ": "
       << join(j["command"].get<std::vector<std::string>>(), " ") << "\n";
    for (const auto& [section, keys] : j["config"].items())
      if (keys.contains("seed")) os << "seed[" << section << "] = " << keys["seed"].get<std::string>() << "\n";
    for (const auto& o : j["outputs"]) {
      const std::string path = o["path"].get<std::string>();
      os << "- " << path << "  " << o["checksum"].get<std::string>() << "\n";
      const fs::path p = c.inv.out / path;
      if (!fs::exists(p)) continue;
      if (path.ends_with(".json") && fs::file_size(p) < 4096) {
        os << "  " << Json::parse(read_file(p)).dump() << "\n";
      } else if (path.ends_with("_summary.txt")) {
        os << read_file(p);
      }
    }
    os << "\n";
  }
  c.write("report.txt", os.str());
  c.write_manifest("report");
  std::cout << os.str();
}

}  // namespace

void execute(Invocation inv) {
  Context c;
  c.inv = std::move(inv);
  if (const char* env = std::getenv("FORGE_SEED"); env && !c.inv.env_seed && !c.inv.verify) c.inv.env_seed = env;
  {
    auto problems = c.inv.config.schema_problems();
    if (c.inv.env_seed) {
      const std::string& e = *c.inv.env_seed;
      if (e.empty() || e.find_first_not_of("0123456789") != std::string::npos)
        problems.push_back("FORGE_SEED: expected a non-negative integer, got '" + e + "'");
    }
    if (!problems.empty()) throw ConfigError(problems);
  }
  auto run = c.section("run");
  c.workers = c.inv.workers ? *c.inv.workers : run.integer("workers", 1, 1);
  c.effective.erase("run");
  c.check();
  fs::create_directories(c.inv.out);

  const auto& cmd = c.inv.command;
  const std::string top = cmd.empty() ? "" : cmd[0];
  const std::string sub = cmd.size() > 1 ? cmd[1] : "";
  if (top == "synth") {
    cmd_synth(c);
  } else if (top == "op") {
    cmd_op(c, sub);
  } else if (top == "head" && sub == "train") {
    cmd_head_train(c);
  } else if (top == "head" && sub == "gate") {
    cmd_head_gate(c);
  } else if (top == "head" && sub == "transfer") {
    cmd_head_transfer(c);
  } else if (top == "scan") {
    cmd_scan(c);
  } else if (top == "compress") {
    cmd_compress(c);
  } else if (top == "ablate") {
    cmd_ablate(c, sub);
  } else if (top == "bench") {
    cmd_bench(c);
  } else if (top == "audit") {
    cmd_audit(c, sub);
  } else if (top == "report") {
    cmd_report(c);
  } else {
    throw InvalidArgument("unknown command '" + join(cmd, " ") + "'");
  }

  if (c.inv.verify) {
    int bad = 0;
    for (const auto& o : c.inv.expected_outputs) {
      const std::string path = o["path"].get<std::string>();
      const fs::path p = c.inv.out / path;
      const std::string have = fs::exists(p) ? checksum_file(p) : std::string("missing");
      const bool same = have == o["checksum"].get<std::string>();
      bad += !same;
      std::cout << (same ? "identical " : "DIFFERENT ") << path << "\n";
    }
    if (bad) throw InvalidRun(std::to_string(bad) + " output(s) differ from the manifest");
  }
}

Invocation from_manifest(const fs::path& manifest, const std::optional<fs::path>& out) {
  const Json m = Json::parse(read_file(manifest));
  if (!m.contains("command") || !m.contains("config") || !m.contains("outputs"))
    throw FormatError("'" + manifest.string() + "' is not a forge manifest");
  Invocation inv;
  inv.command = m["command"].get<std::vector<std::string>>();
  inv.config = Config::from_json(m["config"]);
  inv.out = out ? *out : fs::path(m["out"].get<std::string>());
  inv.verify = true;
  inv.expected_outputs = m["outputs"];
  return inv;
}

}  // namespace forge::cli
