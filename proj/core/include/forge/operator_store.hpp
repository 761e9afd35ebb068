#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "forge/container.hpp"
#include "forge/types.hpp"

namespace forge {

/// Frozen per-(layer, head) operators A[l,h], each dim x dim.
class WeightTensor {
 public:
  WeightTensor() = default;
  /// `weights` is layer-major: index = layer * n_heads + head.
  WeightTensor(int n_layers, int n_heads, int dim, std::vector<Matrix> weights);
  /// Up-converts single-precision row-major data (layer, head, row, col order).
  static WeightTensor from_float32(int n_layers, int n_heads, int dim, const std::vector<float>& data);

  int n_layers() const { return n_layers_; }
  int n_heads() const { return n_heads_; }
  int dim() const { return dim_; }
  int n_units() const { return n_layers_ * n_heads_; }
  const Matrix& at(int layer, int head) const;
  const Matrix& at(UnitId unit) const { return at(unit.layer, unit.head); }

  Container to_container() const;
  static WeightTensor from_container(const Container& c);
  void save(const std::filesystem::path& path) const { to_container().save(path); }
  static WeightTensor load(const std::filesystem::path& path) { return from_container(Container::load(path)); }

 private:
  int n_layers_ = 0;
  int n_heads_ = 0;
  int dim_ = 0;
  std::vector<Matrix> weights_;
};

enum class OperatorKind { drift, single_head, compact, low_rank, sparse };
std::string to_string(OperatorKind kind);
OperatorKind operator_kind_from_string(const std::string& s);

struct CompactTerm {
  UnitId unit;
  double alpha = 1.0;
};

/// One retained rank-1 factor of a sparse surrogate. Indices are ascending.
struct SparseFactor {
  int parent_factor = 0;
  IndexList read_indices;
  Vector read_values;
  IndexList write_indices;
  Vector write_values;
};

/// A fixed feature map x -> f(x). Immutable after construction; apply() is pure.
///
/// Low-rank operators keep singular values folded into U (U_r = U * Sigma_r), so
/// x -> x U_r V_r^T reproduces the truncated operator and V_r has orthonormal
/// columns.
class FeatureOperator {
 public:
  OperatorKind kind() const { return kind_; }
  int dim() const { return dim_; }
  int out_dim() const { return kind_ == OperatorKind::drift ? 2 * dim_ : dim_; }

  Matrix apply(const Matrix& X) const;

  /// Dense effective G x G matrix (not defined for drift).
  Matrix dense() const;

  // drift
  const Matrix& early() const { return a_early_; }
  const Matrix& mid() const { return a_mid_; }
  const Matrix& late() const { return a_late_; }
  const std::vector<LayerRange>& layer_ranges() const { return ranges_; }

  // single_head / compact
  const std::vector<CompactTerm>& terms() const { return terms_; }

  // low_rank / sparse
  int rank() const;
  const Matrix& u() const { return u_; }
  const Matrix& v() const { return v_; }
  const Vector& singular_values() const { return sigma_; }
  const std::vector<SparseFactor>& sparse_factors() const { return factors_; }
  int parent_rank() const { return parent_rank_; }
  /// Sum over retained factors of (k_read + k_write).
  long active_loading_count() const;
  /// Sum over retained factors of k_read * k_write (non-zeros of the effective matrix bound).
  long active_product_count() const;

  /// Low-rank only: copy with every factor outside `keep` set to exactly zero.
  FeatureOperator keep_only(const IndexList& keep) const;
  /// Low-rank only: copy with factor `factor` zeroed.
  FeatureOperator zero_factor(int factor) const;

  Container to_container() const;
  static FeatureOperator from_container(const Container& c);
  std::size_t serialized_size() const { return to_container().to_bytes().size(); }
  void save(const std::filesystem::path& path) const { to_container().save(path); }
  static FeatureOperator load(const std::filesystem::path& path) { return from_container(Container::load(path)); }

  friend FeatureOperator build_drift_operator(const WeightTensor&, LayerRange, LayerRange, LayerRange);
  friend FeatureOperator single_head_operator(const WeightTensor&, UnitId);
  friend FeatureOperator compose_compact(const WeightTensor&, const std::vector<UnitId>&, const std::vector<double>&);
  friend FeatureOperator dense_operator(const Matrix&, std::vector<CompactTerm>);
  friend FeatureOperator low_rank_operator(Matrix, Matrix, Vector);
  friend FeatureOperator prune_sparse(const FeatureOperator&, const IndexList&, int, int);

 private:
  void materialize_sparse();

  OperatorKind kind_ = OperatorKind::single_head;
  int dim_ = 0;
  Matrix a_early_, a_mid_, a_late_;
  Matrix drift_first_, drift_second_;
  std::vector<LayerRange> ranges_;
  Matrix dense_;
  std::vector<CompactTerm> terms_;
  Matrix u_, v_;
  Vector sigma_;
  std::vector<SparseFactor> factors_;
  int parent_rank_ = 0;
};

/// Thirds of [0, n_layers): the default early/mid/late blocks.
std::vector<LayerRange> default_layer_blocks(int n_layers);

FeatureOperator build_drift_operator(const WeightTensor& tensor, LayerRange early, LayerRange mid, LayerRange late);
FeatureOperator single_head_operator(const WeightTensor& tensor, UnitId unit);
FeatureOperator compose_compact(const WeightTensor& tensor, const std::vector<UnitId>& units,
                                const std::vector<double>& weights);
/// Wraps an explicit dense matrix as a compact operator (terms may be empty).
FeatureOperator dense_operator(const Matrix& a, std::vector<CompactTerm> terms = {});
/// U: G x r (singular values folded in), V: G x r, sigma: r.
FeatureOperator low_rank_operator(Matrix u, Matrix v, Vector sigma);

FeatureOperator truncate_svd(const FeatureOperator& op, int rank);
FeatureOperator prune_sparse(const FeatureOperator& op, const IndexList& keep_factors, int k_read, int k_write);

/// Indices of the k largest |values|, ties broken by lowest index; returned ascending.
IndexList top_k_abs(const Vector& values, int k);

}  // namespace forge
