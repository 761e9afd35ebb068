#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace forge {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using IndexList = std::vector<int>;

/// A fully populated categorical column: one integer code per row into `levels`.
struct Categorical {
  std::vector<std::string> levels;
  std::vector<int> codes;

  static Categorical from_strings(const std::vector<std::string>& values);

  std::size_t size() const { return codes.size(); }
  int n_levels() const { return static_cast<int>(levels.size()); }
  const std::string& label(std::size_t row) const { return levels[codes[row]]; }
  int code_of(const std::string& level) const;  // -1 when absent

  Categorical subset(const IndexList& rows) const;
  /// Drop levels that no longer occur, renumbering codes in first-seen level order.
  Categorical compacted() const;
};

/// A (layer, head) address in a weight tensor.
struct UnitId {
  int layer = 0;
  int head = 0;
  friend bool operator==(const UnitId&, const UnitId&) = default;
  friend auto operator<=>(const UnitId&, const UnitId&) = default;
};

/// Half-open layer interval [begin, end).
struct LayerRange {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
};

}  // namespace forge
