#pragma once

#include "forge/types.hpp"

namespace forge::linalg {

/// Linear projection onto the top-k right singular directions of the (optionally
/// centred, optionally row-weighted) training matrix. Component signs are fixed
/// so the largest-magnitude loading of each component is positive.
struct Projection {
  Vector mean;        // zero when not centred
  Matrix components;  // D x k
  Vector variance;    // per component: weighted variance (centred) or mean square (uncentred)
  double total_variance = 0.0;

  Matrix transform(const Matrix& X) const;
  int dim() const { return static_cast<int>(components.cols()); }
};

/// PCA when `center`, truncated SVD otherwise.
Projection fit_projection(const Matrix& X, int k, bool center, const Vector& weights = Vector());

/// Minimum-norm least squares solution via complete orthogonal decomposition.
Vector least_squares(const Matrix& A, const Vector& b);

struct RidgeFit {
  Vector weights;
  double intercept = 0.0;
  Vector predict(const Matrix& X) const { return (X * weights).array() + intercept; }
};

/// argmin ||y - X w - c||^2 + lambda ||w||^2 (intercept unpenalised).
RidgeFit ridge(const Matrix& X, const Vector& y, double lambda);

}  // namespace forge::linalg
