#include "forge/operator_store.hpp"

#include <algorithm>
#include <numeric>

#include "forge/error.hpp"

namespace forge {

WeightTensor::WeightTensor(int n_layers, int n_heads, int dim, std::vector<Matrix> weights)
    : n_layers_(n_layers), n_heads_(n_heads), dim_(dim), weights_(std::move(weights)) {
  if (n_layers < 1 || n_heads < 1 || dim < 1)
    throw InvalidArgument("weight tensor needs positive layer, head and dim counts");
  if (weights_.size() != static_cast<std::size_t>(n_layers) * n_heads)
    throw ShapeError("expected " + std::to_string(n_layers * n_heads) + " head matrices, got " +
                     std::to_string(weights_.size()));
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    const auto& w = weights_[i];
    if (w.rows() != dim || w.cols() != dim)
      throw ShapeError("head matrix " + std::to_string(i) + " is not " + std::to_string(dim) + "x" +
                       std::to_string(dim));
    if (!w.allFinite()) throw InvalidArgument("head matrix " + std::to_string(i) + " has non-finite entries");
  }
}

WeightTensor WeightTensor::from_float32(int n_layers, int n_heads, int dim, const std::vector<float>& data) {
  const std::size_t per = static_cast<std::size_t>(dim) * dim;
  if (data.size() != per * n_layers * n_heads) throw ShapeError("float32 tensor payload has wrong length");
  std::vector<Matrix> weights;
  weights.reserve(static_cast<std::size_t>(n_layers) * n_heads);
  for (int u = 0; u < n_layers * n_heads; ++u) {
    Matrix m(dim, dim);
    for (int r = 0; r < dim; ++r)
      for (int c = 0; c < dim; ++c) m(r, c) = static_cast<double>(data[u * per + r * dim + c]);
    weights.push_back(std::move(m));
  }
  return WeightTensor(n_layers, n_heads, dim, std::move(weights));
}

const Matrix& WeightTensor::at(int layer, int head) const {
  if (layer < 0 || layer >= n_layers_ || head < 0 || head >= n_heads_)
    throw InvalidRange("unit (" + std::to_string(layer) + ", " + std::to_string(head) + ") outside " +
                       std::to_string(n_layers_) + "x" + std::to_string(n_heads_) + " tensor");
  return weights_[static_cast<std::size_t>(layer) * n_heads_ + head];
}

Container WeightTensor::to_container() const {
  Container c(Json{{"kind", "weight_tensor"}, {"n_layers", n_layers_}, {"n_heads", n_heads_}, {"dim", dim_}});
  for (int l = 0; l < n_layers_; ++l)
    for (int h = 0; h < n_heads_; ++h)
      c.add("A_" + std::to_string(l) + "_" + std::to_string(h), at(l, h));
  return c;
}

WeightTensor WeightTensor::from_container(const Container& c) {
  const auto& m = c.meta();
  if (m.value("kind", "") != "weight_tensor") throw FormatError("container is not a weight_tensor");
  const int nl = m.at("n_layers"), nh = m.at("n_heads"), dim = m.at("dim");
  std::vector<Matrix> weights;
  for (int l = 0; l < nl; ++l)
    for (int h = 0; h < nh; ++h) weights.push_back(c.block("A_" + std::to_string(l) + "_" + std::to_string(h)));
  return WeightTensor(nl, nh, dim, std::move(weights));
}

std::string to_string(OperatorKind kind) {
  switch (kind) {
    case OperatorKind::drift: return "drift";
    case OperatorKind::single_head: return "single_head";
    case OperatorKind::compact: return "compact";
    case OperatorKind::low_rank: return "low_rank";
    case OperatorKind::sparse: return "sparse";
  }
  return "unknown";
}

OperatorKind operator_kind_from_string(const std::string& s) {
  for (auto k : {OperatorKind::drift, OperatorKind::single_head, OperatorKind::compact, OperatorKind::low_rank,
                 OperatorKind::sparse})
    if (to_string(k) == s) return k;
  throw FormatError("unknown operator kind '" + s + "'");
}

std::vector<LayerRange> default_layer_blocks(int n_layers) {
  if (n_layers < 1) throw InvalidRange("need at least one layer");
  if (n_layers < 3) {
    // Too few layers for disjoint thirds; blocks overlap on the available layers.
    return {{0, 1}, {n_layers / 2, n_layers / 2 + 1}, {n_layers - 1, n_layers}};
  }
  const int a = n_layers / 3;
  const int b = (2 * n_layers) / 3;
  return {{0, a}, {a, b}, {b, n_layers}};
}

namespace {

Matrix block_mean(const WeightTensor& t, LayerRange range, const char* name) {
  if (range.size() <= 0) throw InvalidRange(std::string(name) + " layer block is empty");
  if (range.begin < 0 || range.end > t.n_layers())
    throw InvalidRange(std::string(name) + " layer block [" + std::to_string(range.begin) + ", " +
                       std::to_string(range.end) + ") outside [0, " + std::to_string(t.n_layers()) + ")");
  Matrix sum = Matrix::Zero(t.dim(), t.dim());
  for (int l = range.begin; l < range.end; ++l)
    for (int h = 0; h < t.n_heads(); ++h) sum += t.at(l, h);
  return sum / static_cast<double>(range.size() * t.n_heads());
}

void require_low_rank(const FeatureOperator& op, const char* what) {
  if (op.kind() != OperatorKind::low_rank)
    throw InvalidArgument(std::string(what) + " requires a low_rank operator, got " + to_string(op.kind()));
}

Json ranges_json(const std::vector<LayerRange>& ranges) {
  Json a = Json::array();
  for (const auto& r : ranges) a.push_back({r.begin, r.end});
  return a;
}

}  // namespace

FeatureOperator build_drift_operator(const WeightTensor& tensor, LayerRange early, LayerRange mid, LayerRange late) {
  FeatureOperator op;
  op.kind_ = OperatorKind::drift;
  op.dim_ = tensor.dim();
  op.a_early_ = block_mean(tensor, early, "early");
  op.a_mid_ = block_mean(tensor, mid, "mid");
  op.a_late_ = block_mean(tensor, late, "late");
  op.ranges_ = {early, mid, late};
  op.drift_first_ = op.a_early_ - op.a_mid_;
  op.drift_second_ = op.a_mid_ - op.a_late_;
  return op;
}

FeatureOperator single_head_operator(const WeightTensor& tensor, UnitId unit) {
  FeatureOperator op;
  op.kind_ = OperatorKind::single_head;
  op.dim_ = tensor.dim();
  op.dense_ = tensor.at(unit);
  op.terms_ = {{unit, 1.0}};
  return op;
}

FeatureOperator compose_compact(const WeightTensor& tensor, const std::vector<UnitId>& units,
                                const std::vector<double>& weights) {
  if (units.empty()) throw InvalidArgument("compact operator needs at least one unit");
  if (units.size() != weights.size())
    throw InvalidArgument("compact operator: " + std::to_string(units.size()) + " units but " +
                          std::to_string(weights.size()) + " weights");
  FeatureOperator op;
  op.kind_ = OperatorKind::compact;
  op.dim_ = tensor.dim();
  op.dense_ = Matrix::Zero(tensor.dim(), tensor.dim());
  for (std::size_t i = 0; i < units.size(); ++i) {
    op.dense_ += weights[i] * tensor.at(units[i]);
    op.terms_.push_back({units[i], weights[i]});
  }
  return op;
}

FeatureOperator dense_operator(const Matrix& a, std::vector<CompactTerm> terms) {
  if (a.rows() != a.cols()) throw ShapeError("dense operator must be square");
  if (!a.allFinite()) throw InvalidArgument("dense operator has non-finite entries");
  FeatureOperator op;
  op.kind_ = OperatorKind::compact;
  op.dim_ = static_cast<int>(a.rows());
  op.dense_ = a;
  op.terms_ = std::move(terms);
  return op;
}

FeatureOperator low_rank_operator(Matrix u, Matrix v, Vector sigma) {
  if (u.rows() != v.rows() || u.cols() != v.cols() || sigma.size() != u.cols())
    throw ShapeError("low-rank factors disagree in shape");
  if (u.cols() < 1) throw InvalidArgument("low-rank operator needs rank >= 1");
  FeatureOperator op;
  op.kind_ = OperatorKind::low_rank;
  op.dim_ = static_cast<int>(u.rows());
  op.u_ = std::move(u);
  op.v_ = std::move(v);
  op.sigma_ = std::move(sigma);
  op.parent_rank_ = static_cast<int>(op.u_.cols());
  return op;
}

int FeatureOperator::rank() const {
  switch (kind_) {
    case OperatorKind::low_rank: return static_cast<int>(u_.cols());
    case OperatorKind::sparse: return static_cast<int>(factors_.size());
    default: return dim_;
  }
}

Matrix FeatureOperator::apply(const Matrix& X) const {
  if (X.cols() != dim_)
    throw ShapeError("operator expects " + std::to_string(dim_) + " columns, input has " + std::to_string(X.cols()));
  if (!X.allFinite()) throw InvalidArgument("operator input has non-finite entries");
  switch (kind_) {
    case OperatorKind::drift: {
      Matrix out(X.rows(), 2 * dim_);
      out.leftCols(dim_).noalias() = X * drift_first_;
      out.rightCols(dim_).noalias() = X * drift_second_;
      return out;
    }
    case OperatorKind::single_head:
    case OperatorKind::compact: return X * dense_;
    case OperatorKind::low_rank:
    case OperatorKind::sparse: {
      const Matrix t = X * u_;
      return t * v_.transpose();
    }
  }
  return {};
}

Matrix FeatureOperator::dense() const {
  switch (kind_) {
    case OperatorKind::drift: throw InvalidArgument("drift operator has no single dense matrix");
    case OperatorKind::single_head:
    case OperatorKind::compact: return dense_;
    case OperatorKind::low_rank:
    case OperatorKind::sparse: return u_ * v_.transpose();
  }
  return {};
}

long FeatureOperator::active_loading_count() const {
  long n = 0;
  for (const auto& f : factors_) n += static_cast<long>(f.read_indices.size() + f.write_indices.size());
  return n;
}

long FeatureOperator::active_product_count() const {
  long n = 0;
  for (const auto& f : factors_) n += static_cast<long>(f.read_indices.size() * f.write_indices.size());
  return n;
}

FeatureOperator FeatureOperator::keep_only(const IndexList& keep) const {
  require_low_rank(*this, "keep_only");
  std::vector<bool> kept(static_cast<std::size_t>(rank()), false);
  for (int f : keep) {
    if (f < 0 || f >= rank()) throw InvalidArgument("factor index " + std::to_string(f) + " out of range");
    kept[static_cast<std::size_t>(f)] = true;
  }
  FeatureOperator out = *this;
  for (int f = 0; f < rank(); ++f) {
    if (kept[static_cast<std::size_t>(f)]) continue;
    out.u_.col(f).setZero();
    out.v_.col(f).setZero();
    out.sigma_(f) = 0.0;
  }
  return out;
}

FeatureOperator FeatureOperator::zero_factor(int factor) const {
  require_low_rank(*this, "zero_factor");
  if (factor < 0 || factor >= rank()) throw InvalidArgument("factor index " + std::to_string(factor) + " out of range");
  IndexList keep;
  for (int f = 0; f < rank(); ++f)
    if (f != factor) keep.push_back(f);
  return keep_only(keep);
}

FeatureOperator truncate_svd(const FeatureOperator& op, int rank) {
  if (op.kind() != OperatorKind::compact && op.kind() != OperatorKind::single_head)
    throw InvalidArgument("truncate_svd needs a compact or single_head operator, got " + to_string(op.kind()));
  if (rank < 1 || rank > op.dim())
    throw InvalidArgument("rank " + std::to_string(rank) + " outside [1, " + std::to_string(op.dim()) + "]");
  Eigen::BDCSVD<Matrix> svd(op.dense(), Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success)
    throw NumericalError("SVD of " + std::to_string(op.dim()) + "x" + std::to_string(op.dim()) +
                         " operator did not converge", static_cast<long>(op.dim()));
  const Vector sigma = svd.singularValues().head(rank);
  Matrix u = svd.matrixU().leftCols(rank) * sigma.asDiagonal();
  Matrix v = svd.matrixV().leftCols(rank);
  return low_rank_operator(std::move(u), std::move(v), sigma);
}

IndexList top_k_abs(const Vector& values, int k) {
  IndexList idx(static_cast<std::size_t>(values.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return std::abs(values(a)) > std::abs(values(b)); });
  idx.resize(static_cast<std::size_t>(std::min<Eigen::Index>(k, values.size())));
  std::sort(idx.begin(), idx.end());
  return idx;
}

FeatureOperator prune_sparse(const FeatureOperator& op, const IndexList& keep_factors, int k_read, int k_write) {
  require_low_rank(op, "prune_sparse");
  if (k_read < 1 || k_write < 1) throw InvalidArgument("k_read and k_write must be >= 1");
  if (k_read > op.dim() || k_write > op.dim())
    throw InvalidArgument("k_read/k_write exceed operator dimension " + std::to_string(op.dim()));
  if (keep_factors.empty()) throw InvalidArgument("prune_sparse needs at least one retained factor");
  FeatureOperator out;
  out.kind_ = OperatorKind::sparse;
  out.dim_ = op.dim();
  out.parent_rank_ = op.rank();
  for (int f : keep_factors) {
    if (f < 0 || f >= op.rank())
      throw InvalidArgument("factor index " + std::to_string(f) + " outside parent rank " + std::to_string(op.rank()));
    SparseFactor sf;
    sf.parent_factor = f;
    const Vector read = op.u().col(f);
    const Vector write = op.v().col(f);
    sf.read_indices = top_k_abs(read, k_read);
    sf.write_indices = top_k_abs(write, k_write);
    sf.read_values.resize(k_read);
    sf.write_values.resize(k_write);
    for (int i = 0; i < k_read; ++i) sf.read_values(i) = read(sf.read_indices[i]);
    for (int i = 0; i < k_write; ++i) sf.write_values(i) = write(sf.write_indices[i]);
    out.factors_.push_back(std::move(sf));
  }
  out.materialize_sparse();
  return out;
}

void FeatureOperator::materialize_sparse() {
  const auto f_count = static_cast<Eigen::Index>(factors_.size());
  u_ = Matrix::Zero(dim_, f_count);
  v_ = Matrix::Zero(dim_, f_count);
  sigma_ = Vector::Zero(f_count);
  for (Eigen::Index f = 0; f < f_count; ++f) {
    const auto& sf = factors_[static_cast<std::size_t>(f)];
    for (std::size_t i = 0; i < sf.read_indices.size(); ++i) u_(sf.read_indices[i], f) = sf.read_values(i);
    for (std::size_t i = 0; i < sf.write_indices.size(); ++i) v_(sf.write_indices[i], f) = sf.write_values(i);
  }
}

Container FeatureOperator::to_container() const {
  Container c(Json{{"kind", "feature_operator"}, {"operator", to_string(kind_)}, {"dim", dim_}, {"out_dim", out_dim()},
                   {"factor_scaling", "singular values folded into U"}});
  auto& m = c.meta();
  switch (kind_) {
    case OperatorKind::drift:
      m["layer_ranges"] = ranges_json(ranges_);
      c.add("A_early", a_early_);
      c.add("A_mid", a_mid_);
      c.add("A_late", a_late_);
      break;
    case OperatorKind::single_head:
    case OperatorKind::compact: {
      Json terms = Json::array();
      for (const auto& t : terms_) terms.push_back({{"layer", t.unit.layer}, {"head", t.unit.head}, {"alpha", t.alpha}});
      m["terms"] = terms;
      c.add("A", dense_);
      break;
    }
    case OperatorKind::low_rank:
      m["rank"] = rank();
      c.add("U", u_);
      c.add("V", v_);
      c.add("sigma", sigma_);
      break;
    case OperatorKind::sparse: {
      m["parent_rank"] = parent_rank_;
      Json factors = Json::array();
      for (const auto& f : factors_)
        factors.push_back({{"parent_factor", f.parent_factor}, {"read", f.read_indices}, {"write", f.write_indices}});
      m["factors"] = factors;
      m["active_loadings"] = active_loading_count();
      m["active_products"] = active_product_count();
      long nread = 0, nwrite = 0;
      for (const auto& f : factors_) {
        nread += static_cast<long>(f.read_values.size());
        nwrite += static_cast<long>(f.write_values.size());
      }
      Matrix rv(1, nread), wv(1, nwrite);
      long ri = 0, wi = 0;
      for (const auto& f : factors_) {
        for (Eigen::Index i = 0; i < f.read_values.size(); ++i) rv(0, ri++) = f.read_values(i);
        for (Eigen::Index i = 0; i < f.write_values.size(); ++i) wv(0, wi++) = f.write_values(i);
      }
      c.add("read_values", std::move(rv));
      c.add("write_values", std::move(wv));
      break;
    }
  }
  return c;
}

FeatureOperator FeatureOperator::from_container(const Container& c) {
  const auto& m = c.meta();
  if (m.value("kind", "") != "feature_operator") throw FormatError("container is not a feature_operator");
  FeatureOperator op;
  op.kind_ = operator_kind_from_string(m.at("operator"));
  op.dim_ = m.at("dim");
  switch (op.kind_) {
    case OperatorKind::drift:
      for (const auto& r : m.at("layer_ranges")) op.ranges_.push_back({r.at(0).get<int>(), r.at(1).get<int>()});
      op.a_early_ = c.block("A_early");
      op.a_mid_ = c.block("A_mid");
      op.a_late_ = c.block("A_late");
      op.drift_first_ = op.a_early_ - op.a_mid_;
      op.drift_second_ = op.a_mid_ - op.a_late_;
      break;
    case OperatorKind::single_head:
    case OperatorKind::compact:
      for (const auto& t : m.at("terms"))
        op.terms_.push_back({{t.at("layer").get<int>(), t.at("head").get<int>()}, t.at("alpha").get<double>()});
      op.dense_ = c.block("A");
      break;
    case OperatorKind::low_rank:
      op.u_ = c.block("U");
      op.v_ = c.block("V");
      op.sigma_ = c.block("sigma");
      op.parent_rank_ = static_cast<int>(op.u_.cols());
      break;
    case OperatorKind::sparse: {
      op.parent_rank_ = m.at("parent_rank");
      const Matrix& rv = c.block("read_values");
      const Matrix& wv = c.block("write_values");
      long ri = 0, wi = 0;
      for (const auto& f : m.at("factors")) {
        SparseFactor sf;
        sf.parent_factor = f.at("parent_factor");
        sf.read_indices = f.at("read").get<IndexList>();
        sf.write_indices = f.at("write").get<IndexList>();
        for (int idx : sf.read_indices)
          if (idx < 0 || idx >= op.dim_) throw FormatError("sparse read index out of range");
        for (int idx : sf.write_indices)
          if (idx < 0 || idx >= op.dim_) throw FormatError("sparse write index out of range");
        const auto nr = static_cast<Eigen::Index>(sf.read_indices.size());
        const auto nw = static_cast<Eigen::Index>(sf.write_indices.size());
        if (ri + nr > rv.cols() || wi + nw > wv.cols()) throw FormatError("sparse loading payload too short");
        sf.read_values = rv.row(0).segment(ri, nr).transpose();
        sf.write_values = wv.row(0).segment(wi, nw).transpose();
        ri += nr;
        wi += nw;
        op.factors_.push_back(std::move(sf));
      }
      op.materialize_sparse();
      break;
    }
  }
  return op;
}

}  // namespace forge
