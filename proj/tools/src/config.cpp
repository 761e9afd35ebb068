#include "config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <forge/panel.hpp>

namespace forge::cli {
namespace {

const std::map<std::string, std::set<std::string>>& schema() {
  static const std::map<std::string, std::set<std::string>> s = {
      {"run", {"workers", "seed"}},
      {"synth",
       {"n_branches", "depth_per_branch", "n_donors", "n_external_donors", "n_tissues", "cells_per_stage", "G",
        "noise_sigma", "n_layers", "n_heads", "planted_heads", "planted_split", "distractor_scale", "distractor_rank",
        "edge_length", "nuisance_rank", "nuisance_cell_scale", "nuisance_group_scale", "donor_effect", "tissue_effect",
        "subtype_shift", "progression", "seed"}},
      {"op",
       {"tensor", "early", "mid", "late", "units", "weights", "input", "rank", "keep", "k_read", "k_write", "output"}},
      {"head",
       {"variant", "dim", "alpha", "steps", "learning_rate", "operator", "panel", "epochs", "batch", "cap_per_stage",
        "n_neighbors", "w_stage", "w_local", "w_recon", "w_cls", "reference", "reference_panel", "lambda_topo",
        "lambda_compact", "holdout_donors", "seed", "output"}},
      {"gate",
       {"head", "operator", "panel", "n_perm", "n_neighbors", "min_trustworthiness", "min_corr", "max_blocked_p",
        "random_pair_fraction", "donor_fraction", "rows", "seed", "output", "report"}},
      {"transfer", {"head", "operator", "panel", "n_perm", "n_neighbors", "seed", "report", "latent"}},
      {"scan",
       {"tensor", "internal", "external", "k", "alpha", "steps", "score", "n_neighbors", "seed", "output"}},
      {"compress",
       {"tensor", "internal", "scan", "top", "units", "ranks", "k", "alpha", "steps", "n_neighbors", "seed", "output"}},
      {"ablate",
       {"operator", "head", "train_panel", "eval_panel", "endpoints", "probe", "core", "dim", "steps", "eval_by",
        "seed", "output"}},
      {"bench",
       {"panel", "methods", "head", "operator", "dim", "n_splits", "n_test_donors", "train_cap", "endpoints",
        "reference", "k_nn", "probe", "seed", "output"}},
      {"audit",
       {"head", "operator", "panel", "n_perm", "seed", "q_max", "r2_min", "cycles_min", "label", "lambda",
        "n_neighbors", "groups", "from", "to", "n_steps", "root", "k_nn", "targets", "blocks", "output"}},
  };
  return s;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + v[i];
  return out;
}

Config from_items(const std::vector<CLI::ConfigItem>& items) {
  Config cfg;
  for (const auto& it : items) {
    if (it.name == "++" || it.name == "--") continue;
    std::string section = "run";
    if (!it.parents.empty()) {
      section = it.parents.front();
      for (std::size_t i = 1; i < it.parents.size(); ++i) section += "." + it.parents[i];
    }
    cfg.set(section, it.name, it.inputs);
  }
  return cfg;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> diagnostics)
    : std::runtime_error(diagnostics.empty() ? "invalid config" : diagnostics.front()),
      diagnostics_(std::move(diagnostics)) {}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"config: cannot read '" + path.string() + "'"});
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

Config Config::parse(const std::string& text) {
  std::istringstream in(text);
  try {
    return from_items(CLI::ConfigTOML().from_config(in));
  } catch (const CLI::Error& e) {
    throw ConfigError({std::string("config: ") + e.what()});
  }
}

Config Config::from_json(const Json& j) {
  Config cfg;
  for (const auto& [section, keys] : j.items())
    for (const auto& [key, value] : keys.items()) {
      std::vector<std::string> vals;
      if (value.is_array())
        for (const auto& v : value) vals.push_back(v.get<std::string>());
      else
        vals.push_back(value.get<std::string>());
      cfg.set(section, key, vals);
    }
  return cfg;
}

bool Config::has(const std::string& section, const std::string& key) const { return find(section, key) != nullptr; }

const std::vector<std::string>* Config::find(const std::string& section, const std::string& key) const {
  const auto s = values_.find(section);
  if (s == values_.end()) return nullptr;
  const auto k = s->second.find(key);
  return k == s->second.end() ? nullptr : &k->second;
}

void Config::set(const std::string& section, const std::string& key, std::vector<std::string> values) {
  values_[section][key] = std::move(values);
}

std::vector<std::string> Config::schema_problems() const {
  std::vector<std::string> out;
  for (const auto& [section, keys] : values_) {
    const auto s = schema().find(section);
    if (s == schema().end()) {
      out.push_back(section + ": unknown section");
      continue;
    }
    for (const auto& [key, v] : keys)
      if (!s->second.count(key)) out.push_back(section + "." + key + ": unknown key");
  }
  return out;
}

Section::Section(const Config& cfg, std::string name, std::vector<std::string>& problems, Json& effective)
    : cfg_(cfg), name_(std::move(name)), problems_(problems), effective_(effective) {}

const std::vector<std::string>* Section::raw(const std::string& key) const { return cfg_.find(name_, key); }

void Section::problem(const std::string& key, const std::string& what) { problems_.push_back(name_ + "." + key + ": " + what); }

void Section::override_value(const std::string& key, const std::string& value) {
  overrides_[key] = value;
  effective_[name_][key] = value;
}

namespace {

template <typename T>
std::optional<T> parse_number(const std::string& s) {
  T v{};
  const char* b = s.data();
  const char* e = s.data() + s.size();
  const auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc() || r.ptr != e) return std::nullopt;
  return v;
}

}  // namespace

int Section::integer(const std::string& key, int fallback, std::optional<int> min, std::optional<int> max) {
  int v = fallback;
  if (const auto* r = raw(key)) {
    const auto p = r->size() == 1 ? parse_number<int>(r->front()) : std::nullopt;
    if (!p) {
      problem(key, "expected an integer, got '" + join(*r) + "'");
      return fallback;
    }
    v = *p;
  }
  if (min && v < *min) problem(key, "must be >= " + std::to_string(*min) + ", got " + std::to_string(v));
  if (max && v > *max) problem(key, "must be <= " + std::to_string(*max) + ", got " + std::to_string(v));
  effective_[name_][key] = std::to_string(v);
  return v;
}

double Section::real(const std::string& key, double fallback, std::optional<double> min, std::optional<double> max) {
  double v = fallback;
  if (const auto* r = raw(key)) {
    const auto p = r->size() == 1 ? parse_number<double>(r->front()) : std::nullopt;
    if (!p) {
      problem(key, "expected a number, got '" + join(*r) + "'");
      return fallback;
    }
    v = *p;
  }
  if (min && v < *min) problem(key, "must be >= " + format_double(*min) + ", got " + format_double(v));
  if (max && v > *max) problem(key, "must be <= " + format_double(*max) + ", got " + format_double(v));
  effective_[name_][key] = format_double(v);
  return v;
}

bool Section::boolean(const std::string& key, bool fallback) {
  bool v = fallback;
  if (const auto* r = raw(key)) {
    const std::string s = r->size() == 1 ? r->front() : "";
    if (s == "true" || s == "1") {
      v = true;
    } else if (s == "false" || s == "0") {
      v = false;
    } else {
      problem(key, "expected true or false, got '" + join(*r) + "'");
      return fallback;
    }
  }
  effective_[name_][key] = v ? "true" : "false";
  return v;
}

std::uint64_t Section::seed(const std::string& key, std::uint64_t fallback) {
  std::uint64_t v = fallback;
  if (const auto o = overrides_.find(key); o != overrides_.end()) {
    v = *parse_number<std::uint64_t>(o->second);
  } else if (const auto* r = raw(key)) {
    const auto p = r->size() == 1 ? parse_number<std::uint64_t>(r->front()) : std::nullopt;
    if (!p) {
      problem(key, "expected a non-negative integer seed, got '" + join(*r) + "'");
      return fallback;
    }
    v = *p;
  }
  effective_[name_][key] = std::to_string(v);
  return v;
}

std::string Section::text(const std::string& key, const std::string& fallback) {
  std::string v = fallback;
  if (const auto o = overrides_.find(key); o != overrides_.end()) {
    v = o->second;
  } else if (const auto* r = raw(key)) {
    if (r->size() != 1) {
      problem(key, "expected a single value, got a list");
      return fallback;
    }
    v = r->front();
  }
  effective_[name_][key] = v;
  return v;
}

std::string Section::choice(const std::string& key, const std::string& fallback, const std::vector<std::string>& allowed) {
  const std::string v = text(key, fallback);
  if (std::find(allowed.begin(), allowed.end(), v) == allowed.end())
    problem(key, "must be one of {" + join(allowed) + "}, got '" + v + "'");
  return v;
}

std::string Section::required_text(const std::string& key) {
  if (!overrides_.count(key) && !raw(key)) {
    problem(key, "required key is missing");
    return {};
  }
  return text(key, {});
}

std::vector<std::string> Section::list(const std::string& key, const std::vector<std::string>& fallback) {
  std::vector<std::string> v = fallback;
  if (const auto* r = raw(key)) v = *r;
  effective_[name_][key] = v;
  return v;
}

std::vector<std::string> Section::required_list(const std::string& key) {
  if (!raw(key)) {
    problem(key, "required key is missing");
    return {};
  }
  return list(key, {});
}

std::vector<int> Section::int_list(const std::string& key, const std::vector<int>& fallback, bool required) {
  if (required && !raw(key)) {
    problem(key, "required key is missing");
    return {};
  }
  std::vector<int> v = fallback;
  if (const auto* r = raw(key)) {
    v.clear();
    for (const auto& s : *r) {
      const auto p = parse_number<int>(s);
      if (!p) {
        problem(key, "expected a list of integers, got '" + s + "'");
        return fallback;
      }
      v.push_back(*p);
    }
  }
  Json arr = Json::array();
  for (int x : v) arr.push_back(std::to_string(x));
  effective_[name_][key] = arr;
  return v;
}

std::vector<double> Section::real_list(const std::string& key, const std::vector<double>& fallback, bool required) {
  if (required && !raw(key)) {
    problem(key, "required key is missing");
    return {};
  }
  std::vector<double> v = fallback;
  if (const auto* r = raw(key)) {
    v.clear();
    for (const auto& s : *r) {
      const auto p = parse_number<double>(s);
      if (!p) {
        problem(key, "expected a list of numbers, got '" + s + "'");
        return fallback;
      }
      v.push_back(*p);
    }
  }
  Json arr = Json::array();
  for (double x : v) arr.push_back(format_double(x));
  effective_[name_][key] = arr;
  return v;
}

}  // namespace forge::cli
