#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "forge/container.hpp"
#include "forge/types.hpp"

namespace forge {

/// Rows (anchors or single cells) with features, categorical metadata and a
/// stage-ontology distance table. The pairwise target distance between rows i
/// and j is stage_distance(stage[i], stage[j]); rows of the same stage are at
/// distance 0.
struct AnchorPanel {
  Matrix features;  // n x D
  std::vector<std::string> row_ids;
  Categorical donor;
  Categorical tissue;
  Categorical branch;
  Categorical stage;
  std::vector<int> stage_depth;
  Matrix stage_distance;  // stage.levels x stage.levels
  std::map<std::string, Categorical> labels;  // extra endpoints, e.g. binary subtypes

  int rows() const { return static_cast<int>(features.rows()); }
  int dim() const { return static_cast<int>(features.cols()); }
  double target(int i, int j) const {
    return stage_distance(stage.codes[static_cast<std::size_t>(i)], stage.codes[static_cast<std::size_t>(j)]);
  }
  Matrix target_matrix() const;

  /// Throws InvalidArgument describing the first violated invariant.
  void validate() const;

  AnchorPanel subset(const IndexList& rows) const;
  AnchorPanel with_features(Matrix f) const;
  IndexList rows_where(const Categorical& column, const std::string& level) const;

  Container to_container() const;
  static AnchorPanel from_container(const Container& c);
};

/// Donors that own at least one row, sorted by name.
std::vector<std::string> donors_present(const AnchorPanel& panel);

/// `count` of the present donors, drawn by `seed`.
std::vector<std::string> draw_donors(const AnchorPanel& panel, int count, std::uint64_t seed);

/// Rows whose donor is in `donors` (keep) or not in it (!keep), in panel order.
AnchorPanel select_donors(const AnchorPanel& panel, const std::vector<std::string>& donors, bool keep);

/// Mean feature vector per (donor, tissue, stage) group; metadata is inherited
/// from the group's first row, extra labels by majority vote.
AnchorPanel aggregate_anchors(const AnchorPanel& cells);

/// Concatenate panels that share the stage ontology (levels are merged by name).
AnchorPanel concat_panels(const AnchorPanel& a, const AnchorPanel& b);

/// CSV layout: header `row_id,donor,tissue,branch,stage,stage_depth[,label:NAME...],f0..f{D-1}`
/// plus a sibling `<stem>.stages.csv` holding the stage distance table.
/// When `log1p_counts` is set, feature columns are raw counts and get log(1+x) at load.
void save_panel_csv(const AnchorPanel& panel, const std::filesystem::path& csv_path);
AnchorPanel load_panel_csv(const std::filesystem::path& csv_path, bool log1p_counts = false);

/// Loads either format: `.csv` or a binary container.
AnchorPanel load_panel(const std::filesystem::path& path, bool log1p_counts = false);
void save_panel(const AnchorPanel& panel, const std::filesystem::path& path);

/// Per-pair design for residualized correlation: columns (same_donor, same_tissue).
Matrix pair_confounds(const AnchorPanel& panel, const std::vector<std::pair<int, int>>& pairs);
std::vector<std::pair<int, int>> all_pairs(int n);

std::string format_double(double v);

}  // namespace forge
