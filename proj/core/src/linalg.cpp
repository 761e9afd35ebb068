#include "forge/linalg.hpp"

#include <cmath>

#include "forge/error.hpp"

namespace forge::linalg {

Matrix Projection::transform(const Matrix& X) const {
  if (X.cols() != components.rows()) throw ShapeError("projection expects " + std::to_string(components.rows()) + " columns");
  return (X.rowwise() - mean.transpose()) * components;
}

Projection fit_projection(const Matrix& X, int k, bool center, const Vector& weights) {
  const auto n = X.rows(), D = X.cols();
  if (k < 1 || k > std::min(n, D)) throw InvalidArgument("projection rank must be in [1, min(n, D)]");
  Vector w = weights.size() ? weights : Vector::Ones(n);
  if (w.size() != n) throw ShapeError("weights length must equal row count");
  if ((w.array() < 0.0).any() || !(w.sum() > 0.0)) throw InvalidArgument("weights must be non-negative with positive sum");
  w /= w.sum();
  Projection p;
  p.mean = center ? Vector(X.transpose() * w) : Vector::Zero(D);
  const Matrix Y = w.cwiseSqrt().asDiagonal() * (X.rowwise() - p.mean.transpose());
  Eigen::BDCSVD<Matrix> svd(Y, Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw NumericalError("SVD failed in projection fit", 0);
  p.components = svd.matrixV().leftCols(k);
  for (int j = 0; j < k; ++j) {
    Eigen::Index idx;
    p.components.col(j).cwiseAbs().maxCoeff(&idx);
    if (p.components(idx, j) < 0.0) p.components.col(j) *= -1.0;
  }
  p.variance = svd.singularValues().head(k).cwiseAbs2();
  p.total_variance = svd.singularValues().squaredNorm();
  return p;
}

Vector least_squares(const Matrix& A, const Vector& b) {
  if (A.rows() != b.size()) throw ShapeError("least squares: row mismatch");
  return Eigen::CompleteOrthogonalDecomposition<Matrix>(A).solve(b);
}

RidgeFit ridge(const Matrix& X, const Vector& y, double lambda) {
  if (X.rows() != y.size()) throw ShapeError("ridge: row mismatch");
  if (lambda < 0.0) throw InvalidArgument("ridge lambda must be >= 0");
  const RowVector mx = X.colwise().mean();
  const double my = y.mean();
  const Matrix Xc = X.rowwise() - mx;
  const Vector yc = y.array() - my;
  Matrix gram = Xc.transpose() * Xc;
  gram.diagonal().array() += lambda;
  RidgeFit fit;
  fit.weights = lambda > 0.0 ? Vector(gram.ldlt().solve(Xc.transpose() * yc)) : least_squares(Xc, yc);
  fit.intercept = my - mx.dot(fit.weights);
  return fit;
}

}  // namespace forge::linalg
