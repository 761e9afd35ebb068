#pragma once

// Loss functions and analytic gradients of the latent-embedding-transfer
// objectives. The adaptor is z = W (x - b); latent distances are
// beta * arccos(cos(z_i, z_j)) with beta = exp(log_beta).

#include <cstdint>
#include <vector>

#include "forge/types.hpp"

namespace forge::let {

/// Cosine arguments are clamped to [-1 + kCosClamp, 1 - kCosClamp]; the clamp has
/// zero derivative outside that interval.
inline constexpr double kCosClamp = 1e-12;
/// Singular values below kPinvCutoff * sigma_max are dropped in W^+.
inline constexpr double kPinvCutoff = 1e-10;

struct Params {
  Matrix w;         // k x D
  Vector b;         // D
  double log_beta = 0.0;
  Matrix cls_w;     // C x k (cell/hybrid only; empty otherwise)
  Vector cls_b;     // C

  Vector pack() const;
  void unpack(const Vector& flat);
  Params zeros_like() const;
};

struct Terms {
  double total = 0.0;
  double distance = 0.0;  // anchor pairwise fit
  double recon = 0.0;
  double stage = 0.0;     // centroid distance fit
  double local = 0.0;
  double cls = 0.0;
  double topo = 0.0;
  double compact = 0.0;
};

/// Anchor objective: sum_{i<j} (dhat_ij - target_ij)^2 + alpha * ||W^+ z + b - x||^2.
/// When `grad` is non-null it receives dL/dparams (cls fields untouched).
Terms anchor_loss(const Params& p, const Matrix& X, const Matrix& target, double alpha, Params* grad);

struct CellWeights {
  double stage = 1.0;
  double local = 0.1;
  double recon = 0.08;
  double cls = 0.4;
};

struct HybridWeights {
  double topo = 0.0;
  double compact = 0.0;
};

/// One mini-batch of cell rows.
struct CellBatch {
  Matrix X;                           // m x D
  std::vector<int> stage;             // stage code per row, into stage_distance
  Matrix stage_distance;              // S x S
  std::vector<IndexList> feature_knn; // fixed feature-space neighbours per row (batch-local indices)
  Matrix ref_distance;                // S x S reference centroid distances, NaN = not shared (hybrid)
};

/// Softmax temperature (radians) of the local-neighbourhood term.
inline constexpr double kLocalTemperature = 0.1;

/// Cell objective:
///   w.stage   * sum_{s<t} (beta*theta(mu_s, mu_t) - D_st)^2   over stages present in the batch
/// + w.local   * (1 - mean_i sum_{j in kNN_feat(i)} softmax_j(-theta_ij / tau))
/// + w.recon   * mean_i ||W^+ z_i + b - x_i||^2
/// + w.cls     * mean cross-entropy of a linear stage classifier on z
/// plus, for the hybrid variant,
///   h.topo    * sum_{s<t shared} (beta*theta(mu_s, mu_t) - Dref_st)^2
/// + h.compact * sum_s mean_{i in s} ||z_i - mu_s||^2
Terms cell_loss(const Params& p, const CellBatch& batch, const CellWeights& w, const HybridWeights& h, Params* grad);

/// Row-wise z = W (x - b).
Matrix encode(const Matrix& w, const Vector& b, const Matrix& X);

/// Angles between all row pairs of V (m x k), with clamping.
Matrix angle_matrix(const Matrix& V);

/// Moore-Penrose pseudo-inverse (D x k) of W with the kPinvCutoff rule.
Matrix pseudo_inverse(const Matrix& w);

/// Number of pseudo-inverse evaluations since process start (diagnostics).
std::uint64_t pinv_evaluations();

/// Feature-space kNN within a batch, distance ties broken by lowest index.
std::vector<IndexList> batch_knn(const Matrix& X, int k);

}  // namespace forge::let
