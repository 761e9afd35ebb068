#include <doctest.h>

#include <filesystem>
#include <limits>
#include <numeric>

#include <forge/error.hpp>
#include <forge/operator_store.hpp>

#include "helpers.hpp"

using namespace forge;
using testing::gaussian;
using testing::rel_err;

namespace {

WeightTensor random_tensor(int layers, int heads, int g, std::uint64_t seed) {
  std::vector<Matrix> w;
  for (int i = 0; i < layers * heads; ++i) w.push_back(gaussian(g, g, seed + static_cast<std::uint64_t>(i)));
  return WeightTensor(layers, heads, g, w);
}

// Row-vector times matrix by explicit loops.
Matrix naive_apply(const Matrix& X, const Matrix& A) {
  Matrix out = Matrix::Zero(X.rows(), A.cols());
  for (Eigen::Index r = 0; r < X.rows(); ++r)
    for (Eigen::Index j = 0; j < A.cols(); ++j)
      for (Eigen::Index i = 0; i < A.rows(); ++i) out(r, j) += X(r, i) * A(i, j);
  return out;
}

Matrix mean_over(const WeightTensor& t, LayerRange r) {
  Matrix m = Matrix::Zero(t.dim(), t.dim());
  int n = 0;
  for (int l = r.begin; l < r.end; ++l)
    for (int h = 0; h < t.n_heads(); ++h, ++n) m += t.at(l, h);
  return m / n;
}

}  // namespace

TEST_SUITE("operator_store") {
  TEST_CASE("drift features on a hand-evaluable tensor") {
    const Matrix I = Matrix::Identity(3, 3);
    WeightTensor t(3, 1, 3, {I, Matrix::Zero(3, 3), Matrix(-I)});
    const auto op = build_drift_operator(t, {0, 1}, {1, 2}, {2, 3});
    CHECK(op.out_dim() == 6);
    Matrix x(1, 3);
    x << 1, 2, 3;
    Matrix want(1, 6);
    want << 1, 2, 3, 1, 2, 3;
    CHECK(op.apply(x) == want);
  }

  TEST_CASE("identical heads cancel in the drift operator") {
    const Matrix A = gaussian(5, 5, 3);
    WeightTensor t(3, 2, 5, std::vector<Matrix>(6, A));
    const auto op = build_drift_operator(t, {0, 1}, {1, 2}, {2, 3});
    CHECK(op.apply(gaussian(7, 5, 4)).isZero(0.0));
  }

  TEST_CASE("drift matches a loop oracle") {
    const auto t = random_tensor(2, 2, 6, 11);
    const LayerRange e{0, 1}, m{0, 2}, l{1, 2};
    const auto op = build_drift_operator(t, e, m, l);
    const Matrix X = gaussian(4, 6, 12);
    Matrix want(4, 12);
    want << naive_apply(X, mean_over(t, e)) - naive_apply(X, mean_over(t, m)),
        naive_apply(X, mean_over(t, m)) - naive_apply(X, mean_over(t, l));
    CHECK(rel_err(op.apply(X), want) < 1e-10);
  }

  TEST_CASE("empty or out-of-range layer block") {
    const auto t = random_tensor(3, 1, 4, 1);
    CHECK_THROWS_AS(build_drift_operator(t, {1, 1}, {1, 2}, {2, 3}), InvalidRange);
    CHECK_THROWS_AS(build_drift_operator(t, {0, 1}, {1, 2}, {2, 4}), InvalidRange);
  }

  TEST_CASE("default blocks are thirds") {
    const auto b = default_layer_blocks(12);
    CHECK(b[0].begin == 0);
    CHECK(b[0].end == 4);
    CHECK(b[1].end == 8);
    CHECK(b[2].end == 12);
  }

  TEST_CASE("single head identity and shape errors") {
    WeightTensor t(1, 1, 4, {Matrix::Identity(4, 4)});
    const auto op = single_head_operator(t, {0, 0});
    const Matrix X = gaussian(3, 4, 2);
    CHECK(op.apply(X) == X);
    CHECK_THROWS_AS(op.apply(gaussian(3, 5, 2)), ShapeError);
    CHECK_THROWS_AS(t.at(1, 0), InvalidRange);
  }

  TEST_CASE("compact operator") {
    const auto t = random_tensor(2, 2, 5, 21);
    const Matrix X = gaussian(6, 5, 22);
    SUBCASE("k=1 equals the single head") {
      CHECK(compose_compact(t, {{1, 0}}, {1.0}).apply(X) == single_head_operator(t, {1, 0}).apply(X));
    }
    SUBCASE("opposite weights on identical heads cancel") {
      WeightTensor same(1, 2, 5, {t.at(0, 0), t.at(0, 0)});
      CHECK(compose_compact(same, {{0, 0}, {0, 1}}, {1.0, -1.0}).apply(X).isZero(0.0));
    }
    SUBCASE("three weighted heads") {
      const std::vector<double> a{0.7, -1.3, 2.1};
      const std::vector<UnitId> u{{0, 0}, {0, 1}, {1, 1}};
      Matrix want = Matrix::Zero(6, 5);
      for (int i = 0; i < 3; ++i) want += a[static_cast<std::size_t>(i)] * naive_apply(X, t.at(u[static_cast<std::size_t>(i)]));
      CHECK(rel_err(compose_compact(t, u, a).apply(X), want) < 1e-10);
    }
    CHECK_THROWS_AS(compose_compact(t, {{0, 0}, {0, 1}}, {1.0}), InvalidArgument);
  }

  TEST_CASE("truncated SVD") {
    SUBCASE("diagonal example") {
      Vector d(4);
      d << 3, 2, 1, 0;
      const auto low = truncate_svd(dense_operator(d.asDiagonal().toDenseMatrix()), 2);
      Matrix keep = Matrix::Zero(4, 4);
      keep(0, 0) = 3;
      keep(1, 1) = 2;
      CHECK((low.dense() - keep).norm() < 1e-12);
      CHECK((low.dense() - Matrix(d.asDiagonal())).norm() == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("best rank-r error against a full SVD") {
      const Matrix A = gaussian(8, 8, 5);
      Eigen::JacobiSVD<Matrix> svd(A);
      const Vector s = svd.singularValues();
      const auto low = truncate_svd(dense_operator(A), 3);
      CHECK((A - low.dense()).norm() == doctest::Approx(s.tail(5).norm()).epsilon(1e-9));
      CHECK(low.rank() == 3);
      for (int i = 1; i < 3; ++i) CHECK(low.singular_values()(i) <= low.singular_values()(i - 1));
    }
    SUBCASE("full rank reconstructs") {
      const Matrix A = gaussian(6, 6, 8);
      CHECK((truncate_svd(dense_operator(A), 6).dense() - A).norm() <= 1e-8 * A.norm());
    }
    SUBCASE("low true rank is recovered exactly") {
      const Matrix A = gaussian(10, 3, 1) * gaussian(3, 10, 2);
      const Matrix X = gaussian(5, 10, 3);
      CHECK(rel_err(truncate_svd(dense_operator(A), 4).apply(X), X * A) < 1e-8);
    }
    SUBCASE("error is non-increasing in rank") {
      const Matrix A = gaussian(12, 12, 9);
      double prev = std::numeric_limits<double>::infinity();
      for (int r = 1; r <= 12; ++r) {
        const double e = (A - truncate_svd(dense_operator(A), r).dense()).norm();
        CHECK(e <= prev + 1e-12);
        prev = e;
      }
    }
    CHECK_THROWS_AS(truncate_svd(dense_operator(Matrix::Identity(3, 3)), 0), InvalidArgument);
    CHECK_THROWS_AS(truncate_svd(dense_operator(Matrix::Identity(3, 3)), 4), InvalidArgument);
  }

  TEST_CASE("sparse pruning") {
    const Matrix A = gaussian(64, 64, 31);
    const auto low = truncate_svd(dense_operator(A), 16);
    SUBCASE("no pruning equals the parent") {
      IndexList all(16);
      std::iota(all.begin(), all.end(), 0);
      const auto sp = prune_sparse(low, all, 64, 64);
      const Matrix X = gaussian(5, 64, 32);
      CHECK(rel_err(sp.apply(X), low.apply(X)) < 1e-12);
    }
    SUBCASE("active loading count") {
      IndexList all(16);
      std::iota(all.begin(), all.end(), 0);
      const auto sp = prune_sparse(low, all, 60, 60);
      CHECK(sp.active_loading_count() == 1920);
      CHECK(sp.active_product_count() == 16L * 60 * 60);
      for (const auto& f : sp.sparse_factors()) {
        CHECK(f.read_indices.size() == 60);
        CHECK(f.write_indices.size() == 60);
      }
    }
    SUBCASE("dominant coordinate is retained") {
      Matrix u = Matrix::Zero(6, 1), v = Matrix::Zero(6, 1);
      u.col(0) << 0.1, 0.2, 5.0, 0.1, 0.0, 0.3;
      v.col(0) << 0.0, 0.0, 0.1, 0.0, 0.9, 0.1;
      const auto sp = prune_sparse(low_rank_operator(u, v, Vector::Ones(1)), {0}, 1, 1);
      CHECK(sp.sparse_factors()[0].read_indices == IndexList{2});
      CHECK(sp.sparse_factors()[0].write_indices == IndexList{4});
    }
    CHECK_THROWS_AS(prune_sparse(low, {16}, 4, 4), InvalidArgument);
    CHECK_THROWS_AS(prune_sparse(low, {0}, 0, 4), InvalidArgument);
  }

  TEST_CASE("top-k ties go to the lowest index") {
    Vector v(5);
    v << 1, -3, 3, 0, 3;
    CHECK(top_k_abs(v, 2) == IndexList{1, 2});
  }

  TEST_CASE("keep-only and zero-out agree") {
    const auto low = truncate_svd(dense_operator(gaussian(10, 10, 41)), 5);
    const Matrix X = gaussian(4, 10, 42);
    CHECK(low.keep_only({0, 1, 2, 3, 4}).apply(X) == low.apply(X));
    CHECK(rel_err(low.zero_factor(2).apply(X), low.keep_only({0, 1, 3, 4}).apply(X)) < 1e-14);
  }

  TEST_CASE("linearity for every operator kind") {
    const auto t = random_tensor(3, 2, 8, 51);
    const auto compact = compose_compact(t, {{0, 1}, {2, 0}}, {1.0, 0.5});
    const auto low = truncate_svd(compact, 4);
    const std::vector<FeatureOperator> ops{build_drift_operator(t, {0, 1}, {1, 2}, {2, 3}), single_head_operator(t, {1, 1}),
                                           compact, low, prune_sparse(low, {0, 2}, 3, 5)};
    const Matrix X = gaussian(5, 8, 52), Y = gaussian(5, 8, 53);
    const double a = 1.7, b = -0.4;
    for (const auto& op : ops) {
      const Matrix lhs = op.apply(a * X + b * Y);
      const Matrix rhs = a * op.apply(X) + b * op.apply(Y);
      CHECK((lhs - rhs).norm() <= 1e-8 * std::max(1.0, rhs.norm()));
    }
  }

  TEST_CASE("serialized size shrinks along the compression chain") {
    const int G = 256;
    const auto dense = dense_operator(gaussian(G, G, 61));
    const auto low = truncate_svd(dense, 64);
    IndexList keep(16);
    std::iota(keep.begin(), keep.end(), 0);
    const auto sparse = prune_sparse(low, keep, 60, 60);
    CHECK(dense.serialized_size() > low.serialized_size());
    CHECK(low.serialized_size() > sparse.serialized_size());
  }

  TEST_CASE("containers round-trip bitwise") {
    const auto t = random_tensor(2, 3, 6, 71);
    const auto t2 = WeightTensor::from_container(Container::from_bytes(t.to_container().to_bytes()));
    for (int l = 0; l < 2; ++l)
      for (int h = 0; h < 3; ++h) CHECK(t2.at(l, h) == t.at(l, h));
    const auto low = truncate_svd(compose_compact(t, {{0, 0}, {1, 2}}, {1.0, -0.25}), 3);
    const std::vector<FeatureOperator> ops{build_drift_operator(t, {0, 1}, {0, 2}, {1, 2}), single_head_operator(t, {1, 1}),
                                           low, prune_sparse(low, {0, 2}, 2, 3)};
    for (const auto& op : ops) {
      const std::string bytes = op.to_container().to_bytes();
      const auto back = FeatureOperator::from_container(Container::from_bytes(bytes));
      CHECK(back.to_container().to_bytes() == bytes);
      CHECK(back.kind() == op.kind());
      const Matrix X = gaussian(3, 6, 72);
      CHECK(back.apply(X) == op.apply(X));
    }
  }

  TEST_CASE("float32 ingestion is up-converted") {
    std::vector<float> data(2 * 2 * 2);
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = 0.5f * static_cast<float>(i);
    const auto t = WeightTensor::from_float32(2, 1, 2, data);
    CHECK(t.at(1, 0)(1, 0) == 3.0);
    CHECK(t.at(0, 0)(0, 1) == 0.5);
  }

  TEST_CASE("corrupted container is rejected") {
    const auto t = random_tensor(1, 1, 3, 81);
    std::string bytes = t.to_container().to_bytes();
    bytes[bytes.size() - 3] ^= 0x5a;
    CHECK_THROWS_AS(Container::from_bytes(bytes), FormatError);
  }
}
