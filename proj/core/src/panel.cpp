#include "forge/panel.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "forge/error.hpp"
#include "forge/rng.hpp"

namespace forge {
namespace {

void check_column(const Categorical& c, int n, const std::string& name) {
  if (static_cast<int>(c.codes.size()) != n)
    throw InvalidArgument("column '" + name + "' has " + std::to_string(c.codes.size()) + " rows, expected " +
                          std::to_string(n));
  for (int code : c.codes)
    if (code < 0 || code >= c.n_levels()) throw InvalidArgument("column '" + name + "' has an out-of-range code");
  for (const auto& l : c.levels)
    if (l.empty()) throw InvalidArgument("column '" + name + "' has a missing (empty) label");
}

Json categorical_json(const Categorical& c) { return {{"levels", c.levels}, {"codes", c.codes}}; }

Categorical categorical_from_json(const Json& j) {
  Categorical c;
  c.levels = j.at("levels").get<std::vector<std::string>>();
  c.codes = j.at("codes").get<std::vector<int>>();
  return c;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("cannot parse number '" + s + "' in " + where);
  }
}

std::filesystem::path stages_path(const std::filesystem::path& csv_path) {
  auto p = csv_path;
  p.replace_extension(".stages.csv");
  return p;
}

void check_plain(const std::string& s) {
  if (s.find(',') != std::string::npos || s.find('\n') != std::string::npos)
    throw FormatError("label '" + s + "' contains a comma or newline");
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Matrix AnchorPanel::target_matrix() const {
  const int n = rows();
  Matrix d(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) d(i, j) = target(i, j);
  return d;
}

void AnchorPanel::validate() const {
  const int n = rows();
  if (!features.allFinite()) throw InvalidArgument("panel features contain non-finite values");
  check_column(donor, n, "donor");
  check_column(tissue, n, "tissue");
  check_column(branch, n, "branch");
  check_column(stage, n, "stage");
  for (const auto& [name, col] : labels) check_column(col, n, name);
  if (!row_ids.empty() && static_cast<int>(row_ids.size()) != n) throw InvalidArgument("row_ids length mismatch");
  if (static_cast<int>(stage_depth.size()) != n) throw InvalidArgument("stage_depth length mismatch");
  for (int d : stage_depth)
    if (d < 0) throw InvalidArgument("stage_depth must be >= 0");
  const auto s = static_cast<Eigen::Index>(stage.n_levels());
  if (stage_distance.rows() != s || stage_distance.cols() != s)
    throw InvalidArgument("stage distance table must be " + std::to_string(s) + "x" + std::to_string(s));
  if (!stage_distance.allFinite()) throw InvalidArgument("stage distances must be finite");
  for (Eigen::Index i = 0; i < s; ++i) {
    if (stage_distance(i, i) != 0.0) throw InvalidArgument("stage distance diagonal must be zero");
    for (Eigen::Index j = 0; j < s; ++j) {
      if (stage_distance(i, j) < 0.0) throw InvalidArgument("stage distances must be non-negative");
      if (stage_distance(i, j) != stage_distance(j, i)) throw InvalidArgument("stage distances must be symmetric");
    }
  }
}

AnchorPanel AnchorPanel::subset(const IndexList& idx) const {
  AnchorPanel p;
  p.features.resize(static_cast<Eigen::Index>(idx.size()), features.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) p.features.row(static_cast<Eigen::Index>(r)) = features.row(idx[r]);
  if (!row_ids.empty())
    for (int r : idx) p.row_ids.push_back(row_ids[static_cast<std::size_t>(r)]);
  p.donor = donor.subset(idx);
  p.tissue = tissue.subset(idx);
  p.branch = branch.subset(idx);
  p.stage = stage.subset(idx);
  for (int r : idx) p.stage_depth.push_back(stage_depth[static_cast<std::size_t>(r)]);
  p.stage_distance = stage_distance;
  for (const auto& [name, col] : labels) p.labels[name] = col.subset(idx);
  return p;
}

AnchorPanel AnchorPanel::with_features(Matrix f) const {
  if (f.rows() != features.rows()) throw ShapeError("replacement features have a different row count");
  AnchorPanel p = *this;
  p.features = std::move(f);
  return p;
}

IndexList AnchorPanel::rows_where(const Categorical& column, const std::string& level) const {
  IndexList out;
  const int code = column.code_of(level);
  if (code < 0) return out;
  for (std::size_t i = 0; i < column.codes.size(); ++i)
    if (column.codes[i] == code) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<std::string> donors_present(const AnchorPanel& panel) {
  std::set<std::string> out;
  for (std::size_t i = 0; i < panel.donor.size(); ++i) out.insert(panel.donor.label(i));
  return {out.begin(), out.end()};
}

std::vector<std::string> draw_donors(const AnchorPanel& panel, int count, std::uint64_t seed) {
  auto names = donors_present(panel);
  if (count < 0 || count >= static_cast<int>(names.size()))
    throw InvalidArgument("cannot draw " + std::to_string(count) + " of " + std::to_string(names.size()) +
                          " donors and keep one for training");
  Rng rng(seed);
  std::shuffle(names.begin(), names.end(), rng);
  names.resize(static_cast<std::size_t>(count));
  std::sort(names.begin(), names.end());
  return names;
}

AnchorPanel select_donors(const AnchorPanel& panel, const std::vector<std::string>& donors, bool keep) {
  const std::set<std::string> set(donors.begin(), donors.end());
  IndexList rows;
  for (int i = 0; i < panel.rows(); ++i)
    if ((set.count(panel.donor.label(static_cast<std::size_t>(i))) > 0) == keep) rows.push_back(i);
  return panel.subset(rows);
}

Container AnchorPanel::to_container() const {
  Json labels_json = Json::object();
  for (const auto& [name, col] : labels) labels_json[name] = categorical_json(col);
  Container c(Json{{"kind", "panel"},
                   {"row_ids", row_ids},
                   {"donor", categorical_json(donor)},
                   {"tissue", categorical_json(tissue)},
                   {"branch", categorical_json(branch)},
                   {"stage", categorical_json(stage)},
                   {"stage_depth", stage_depth},
                   {"labels", labels_json}});
  c.add("features", features);
  c.add("stage_distance", stage_distance);
  return c;
}

AnchorPanel AnchorPanel::from_container(const Container& c) {
  const auto& m = c.meta();
  if (m.value("kind", "") != "panel") throw FormatError("container is not a panel");
  AnchorPanel p;
  p.features = c.block("features");
  p.stage_distance = c.block("stage_distance");
  p.row_ids = m.at("row_ids").get<std::vector<std::string>>();
  p.donor = categorical_from_json(m.at("donor"));
  p.tissue = categorical_from_json(m.at("tissue"));
  p.branch = categorical_from_json(m.at("branch"));
  p.stage = categorical_from_json(m.at("stage"));
  p.stage_depth = m.at("stage_depth").get<std::vector<int>>();
  for (const auto& [name, col] : m.at("labels").items()) p.labels[name] = categorical_from_json(col);
  p.validate();
  return p;
}

AnchorPanel aggregate_anchors(const AnchorPanel& cells) {
  std::map<std::tuple<int, int, int>, IndexList> groups;
  std::vector<std::tuple<int, int, int>> order;
  for (int i = 0; i < cells.rows(); ++i) {
    const auto key = std::make_tuple(cells.donor.codes[static_cast<std::size_t>(i)],
                                     cells.tissue.codes[static_cast<std::size_t>(i)],
                                     cells.stage.codes[static_cast<std::size_t>(i)]);
    auto [it, inserted] = groups.try_emplace(key);
    if (inserted) order.push_back(key);
    it->second.push_back(i);
  }
  IndexList firsts;
  for (const auto& key : order) firsts.push_back(groups[key].front());
  AnchorPanel out = cells.subset(firsts);
  out.row_ids.clear();
  for (std::size_t g = 0; g < order.size(); ++g) {
    const auto& rows = groups[order[g]];
    Vector mean = Vector::Zero(cells.dim());
    for (int r : rows) mean += cells.features.row(r).transpose();
    out.features.row(static_cast<Eigen::Index>(g)) = (mean / static_cast<double>(rows.size())).transpose();
    const auto [d, t, s] = order[g];
    out.row_ids.push_back(cells.donor.levels[static_cast<std::size_t>(d)] + "|" +
                          cells.tissue.levels[static_cast<std::size_t>(t)] + "|" +
                          cells.stage.levels[static_cast<std::size_t>(s)]);
    for (auto& [name, col] : out.labels) {
      std::map<int, int> votes;
      for (int r : rows) ++votes[cells.labels.at(name).codes[static_cast<std::size_t>(r)]];
      int best = -1, best_count = -1;
      for (const auto& [code, count] : votes)
        if (count > best_count) best = code, best_count = count;
      col.codes[g] = best;
    }
  }
  return out;
}

AnchorPanel concat_panels(const AnchorPanel& a, const AnchorPanel& b) {
  if (a.dim() != b.dim()) throw ShapeError("cannot concatenate panels with different feature dimensions");
  auto merge = [](const Categorical& x, const Categorical& y) {
    std::vector<std::string> values;
    for (std::size_t i = 0; i < x.size(); ++i) values.push_back(x.label(i));
    for (std::size_t i = 0; i < y.size(); ++i) values.push_back(y.label(i));
    Categorical c = Categorical::from_strings(values);
    return c;
  };
  AnchorPanel p;
  p.features.resize(a.rows() + b.rows(), a.dim());
  p.features << a.features, b.features;
  p.row_ids = a.row_ids;
  p.row_ids.insert(p.row_ids.end(), b.row_ids.begin(), b.row_ids.end());
  p.donor = merge(a.donor, b.donor);
  p.tissue = merge(a.tissue, b.tissue);
  p.branch = merge(a.branch, b.branch);
  // Stage levels keep a's ordering so a's distance table can be re-indexed.
  std::vector<std::string> levels = a.stage.levels;
  for (const auto& l : b.stage.levels)
    if (a.stage.code_of(l) < 0) levels.push_back(l);
  p.stage.levels = levels;
  p.stage_distance = Matrix::Zero(static_cast<Eigen::Index>(levels.size()), static_cast<Eigen::Index>(levels.size()));
  auto lookup = [&](const std::string& s, const std::string& t) {
    const int ia = a.stage.code_of(s), ja = a.stage.code_of(t);
    if (ia >= 0 && ja >= 0) return a.stage_distance(ia, ja);
    const int ib = b.stage.code_of(s), jb = b.stage.code_of(t);
    if (ib >= 0 && jb >= 0) return b.stage_distance(ib, jb);
    throw InvalidArgument("stage pair (" + s + ", " + t + ") has no distance in either panel");
  };
  for (std::size_t i = 0; i < levels.size(); ++i)
    for (std::size_t j = 0; j < levels.size(); ++j)
      p.stage_distance(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = lookup(levels[i], levels[j]);
  for (std::size_t i = 0; i < a.stage.size(); ++i) p.stage.codes.push_back(p.stage.code_of(a.stage.label(i)));
  for (std::size_t i = 0; i < b.stage.size(); ++i) p.stage.codes.push_back(p.stage.code_of(b.stage.label(i)));
  p.stage_depth = a.stage_depth;
  p.stage_depth.insert(p.stage_depth.end(), b.stage_depth.begin(), b.stage_depth.end());
  for (const auto& [name, col] : a.labels) {
    if (!b.labels.contains(name)) continue;
    p.labels[name] = merge(col, b.labels.at(name));
  }
  return p;
}

void save_panel_csv(const AnchorPanel& panel, const std::filesystem::path& csv_path) {
  panel.validate();
  std::ostringstream out;
  out << "row_id,donor,tissue,branch,stage,stage_depth";
  for (const auto& [name, col] : panel.labels) {
    check_plain(name);
    out << ",label:" << name;
  }
  for (int f = 0; f < panel.dim(); ++f) out << ",f" << f;
  out << '\n';
  for (int i = 0; i < panel.rows(); ++i) {
    const auto r = static_cast<std::size_t>(i);
    const std::string id = panel.row_ids.empty() ? std::to_string(i) : panel.row_ids[r];
    for (const auto* s : {&id, &panel.donor.label(r), &panel.tissue.label(r), &panel.branch.label(r), &panel.stage.label(r)})
      check_plain(*s);
    out << id << ',' << panel.donor.label(r) << ',' << panel.tissue.label(r) << ',' << panel.branch.label(r) << ','
        << panel.stage.label(r) << ',' << panel.stage_depth[r];
    for (const auto& [name, col] : panel.labels) out << ',' << col.label(r);
    for (int f = 0; f < panel.dim(); ++f) out << ',' << format_double(panel.features(i, f));
    out << '\n';
  }
  write_file(csv_path, out.str());

  std::ostringstream st;
  st << "stage";
  for (const auto& l : panel.stage.levels) st << ',' << l;
  st << '\n';
  for (int i = 0; i < panel.stage.n_levels(); ++i) {
    st << panel.stage.levels[static_cast<std::size_t>(i)];
    for (int j = 0; j < panel.stage.n_levels(); ++j) st << ',' << format_double(panel.stage_distance(i, j));
    st << '\n';
  }
  write_file(stages_path(csv_path), st.str());
}

AnchorPanel load_panel_csv(const std::filesystem::path& csv_path, bool log1p_counts) {
  std::istringstream in(read_file(csv_path));
  std::string line;
  if (!std::getline(in, line)) throw FormatError("panel CSV '" + csv_path.string() + "' is empty");
  const auto header = split_csv(line);
  const std::vector<std::string> fixed = {"row_id", "donor", "tissue", "branch", "stage", "stage_depth"};
  for (std::size_t i = 0; i < fixed.size(); ++i)
    if (i >= header.size() || header[i] != fixed[i])
      throw FormatError("panel CSV column " + std::to_string(i) + " must be '" + fixed[i] + "'");
  std::vector<std::string> label_names;
  std::size_t col = fixed.size();
  while (col < header.size() && header[col].rfind("label:", 0) == 0) label_names.push_back(header[col++].substr(6));
  const std::size_t first_feature = col;
  for (; col < header.size(); ++col)
    if (header[col] != "f" + std::to_string(col - first_feature))
      throw FormatError("unexpected panel CSV column '" + header[col] + "'");
  const auto dim = static_cast<Eigen::Index>(header.size() - first_feature);

  std::vector<std::string> ids, donors, tissues, branches, stages;
  std::vector<std::vector<std::string>> extra(label_names.size());
  std::vector<int> depth;
  std::vector<double> values;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size())
      throw FormatError("panel CSV line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                        " fields, expected " + std::to_string(header.size()));
    ids.push_back(cells[0]);
    donors.push_back(cells[1]);
    tissues.push_back(cells[2]);
    branches.push_back(cells[3]);
    stages.push_back(cells[4]);
    depth.push_back(static_cast<int>(parse_double(cells[5], "stage_depth")));
    for (std::size_t l = 0; l < label_names.size(); ++l) extra[l].push_back(cells[fixed.size() + l]);
    for (std::size_t f = first_feature; f < cells.size(); ++f) {
      double v = parse_double(cells[f], "line " + std::to_string(line_no));
      if (log1p_counts) {
        if (v < 0) throw FormatError("negative count on line " + std::to_string(line_no));
        v = std::log1p(v);
      }
      values.push_back(v);
    }
  }
  AnchorPanel p;
  const auto n = static_cast<Eigen::Index>(ids.size());
  p.features.resize(n, dim);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index f = 0; f < dim; ++f) p.features(i, f) = values[static_cast<std::size_t>(i * dim + f)];
  p.row_ids = ids;
  p.donor = Categorical::from_strings(donors);
  p.tissue = Categorical::from_strings(tissues);
  p.branch = Categorical::from_strings(branches);
  p.stage_depth = depth;
  for (std::size_t l = 0; l < label_names.size(); ++l) p.labels[label_names[l]] = Categorical::from_strings(extra[l]);

  std::istringstream st(read_file(stages_path(csv_path)));
  if (!std::getline(st, line)) throw FormatError("stage distance CSV is empty");
  auto sh = split_csv(line);
  if (sh.empty() || sh[0] != "stage") throw FormatError("stage distance CSV must start with 'stage'");
  std::vector<std::string> levels(sh.begin() + 1, sh.end());
  p.stage.levels = levels;
  p.stage_distance.resize(static_cast<Eigen::Index>(levels.size()), static_cast<Eigen::Index>(levels.size()));
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (!std::getline(st, line)) throw FormatError("stage distance CSV truncated");
    const auto cells = split_csv(line);
    if (cells.size() != levels.size() + 1 || cells[0] != levels[i]) throw FormatError("stage distance CSV malformed");
    for (std::size_t j = 0; j < levels.size(); ++j)
      p.stage_distance(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = parse_double(cells[j + 1], "stage table");
  }
  for (const auto& s : stages) {
    const int code = p.stage.code_of(s);
    if (code < 0) throw FormatError("stage '" + s + "' missing from stage distance table");
    p.stage.codes.push_back(code);
  }
  p.validate();
  return p;
}

AnchorPanel load_panel(const std::filesystem::path& path, bool log1p_counts) {
  if (path.extension() == ".csv") return load_panel_csv(path, log1p_counts);
  AnchorPanel p = AnchorPanel::from_container(Container::load(path));
  if (log1p_counts) p.features = p.features.array().log1p().matrix();
  return p;
}

void save_panel(const AnchorPanel& panel, const std::filesystem::path& path) {
  if (path.extension() == ".csv") {
    save_panel_csv(panel, path);
  } else {
    panel.validate();
    panel.to_container().save(path);
  }
}

std::vector<std::pair<int, int>> all_pairs(int n) {
  std::vector<std::pair<int, int>> out;
  out.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) out.emplace_back(i, j);
  return out;
}

Matrix pair_confounds(const AnchorPanel& panel, const std::vector<std::pair<int, int>>& pairs) {
  Matrix m(static_cast<Eigen::Index>(pairs.size()), 2);
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto [i, j] = pairs[p];
    m(static_cast<Eigen::Index>(p), 0) = panel.donor.codes[static_cast<std::size_t>(i)] == panel.donor.codes[static_cast<std::size_t>(j)];
    m(static_cast<Eigen::Index>(p), 1) = panel.tissue.codes[static_cast<std::size_t>(i)] == panel.tissue.codes[static_cast<std::size_t>(j)];
  }
  return m;
}

}  // namespace forge
