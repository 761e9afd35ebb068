#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "forge/let_adaptor.hpp"
#include "forge/panel.hpp"
#include "forge/types.hpp"

namespace forge::audits {

struct SinusoidGrid {
  int n_directions = 18;  // 0, 10, ..., 170 degrees
  int n_frequencies = 32; // log-spaced cycles per span
  double min_cycles = 0.5;
  double max_cycles = 8.0;
};

struct SinusoidFit {
  double r2 = 0.0;
  double cycles = 0.0;        // cycles per span of the projected coordinate
  double direction_deg = 0.0;
  double amplitude = 0.0;
  double phase = 0.0;         // radians
  double p_value = 1.0;       // max-R^2 permutation p
};

/// Best least-squares sinusoid y ~ a sin(2 pi f s) + b cos(2 pi f s) + c over
/// in-plane directions and frequencies, where s is the projection of the 2D
/// coordinates normalised to [0, 1]; p from permuting y over points.
SinusoidFit sinusoid_scan(const Matrix& plane, const Vector& y, const SinusoidGrid& grid, int n_perm, std::uint64_t seed);

/// Residual of y after weighted least squares on the full bivariate quadratic in (u, v).
Vector quadratic_detrend(const Matrix& plane, const Vector& y, const Vector& weights = Vector());

struct FlatnessReport {
  double plane_var_fraction = 0.0;
  double morans_i = 0.0;
  double morans_p = 1.0;
  SinusoidFit sinusoid;
  Vector residual;  // detrended plane offsets
};

FlatnessReport flatness_ripple_3d(const Matrix& coords, const Vector& weights = Vector(), int n_perm = 499,
                                  std::uint64_t seed = 0, const SinusoidGrid& grid = {}, int moran_neighbors = 8);

struct RippleRule {
  double q_max = 0.05;
  double r2_min = 0.10;
  double cycles_min = 1.5;
};

struct RippleAxis {
  int axis = 0;  // principal component index, 0-based (2 = PC3)
  SinusoidFit fit;
  double q_value = 1.0;
  bool significant = false;
};

/// PCA on Z; PC1/PC2 form the substrate plane; each remaining PC is detrended
/// on the plane and scanned. BH across residual axes.
std::vector<RippleAxis> latent_ripple_scan(const Matrix& Z, const RippleRule& rule = {}, int n_perm = 499,
                                           std::uint64_t seed = 0, const SinusoidGrid& grid = {});
std::string ripple_csv(const std::vector<RippleAxis>& axes);

struct LensResult {
  Matrix coords;  // x/y copied from the display, z replaced
  Vector axis;    // discriminative direction in Z
  double auroc_before = 0.0;
  double auroc_after = 0.0;
  double trustworthiness_before = 0.0;
  double trustworthiness_after = 0.0;
  double trustworthiness_delta = 0.0;
};

/// Ridge-regularised discriminant w = (S_w + lambda I)^-1 (mu_1 - mu_0) on Z; the
/// display's third coordinate is replaced by Z w rescaled to its mean and variance.
LensResult separation_lens(const Matrix& Z, const Matrix& display3d, const std::vector<int>& labels, double lambda,
                           int n_neighbors = 10);

struct InterventionResult {
  Vector t;
  Vector target_fraction;
  double rho = 0.0;
  bool rho_defined = true;
  double p_value = 1.0;
};

/// Moves the `from` rows of `panel` (head-input features) along mu_to - mu_from in
/// latent space, decodes with W^+ z + b and assigns each decoded point to the
/// nearest decoded group centroid of `groups`.
InterventionResult latent_intervention(const LetHead& head, const AnchorPanel& panel, const Categorical& groups,
                                       const std::string& from, const std::string& to, int n_steps, int n_perm,
                                       std::uint64_t seed);

struct TopologyReport {
  int root_degree = 0;
  int branchpoints = 0;
  double reachability_knn = 0.0;
  double reachability_mst = 0.0;
  int first_hop_diversity = 0;
  bool fallback_complete = false;
  std::vector<std::string> stages;
  std::vector<std::pair<int, int>> mst_edges;
};

/// Stage centroids, mutual-kNN graph (complete graph when disconnected), MST.
/// `branch_of` maps stage name to branch; `terminals` empty means MST leaves.
TopologyReport branch_topology(const Matrix& Z, const Categorical& stage, const std::string& root,
                               const std::map<std::string, std::string>& branch_of, int k_nn,
                               const std::vector<std::string>& terminals = {});

struct DimensionRow {
  int dim = 0;
  double eta2_stage = 0.0;
  double eta2_branch = 0.0;
  std::map<std::string, double> auroc;  // per binary label, orientation-free
  double abs_rho_depth = 0.0;
};

struct DimensionAudit {
  std::vector<DimensionRow> rows;
  double mean_abs_offdiag_corr = 0.0;
  std::string csv() const;
};

DimensionAudit dimension_audit(const Matrix& Z, const Categorical& stage, const Categorical& branch,
                               const std::map<std::string, Categorical>& binary_labels, const std::vector<int>& depth);

struct CompositeAxis {
  Vector weights;
  double intercept = 0.0;
  double rho_composite = 0.0;
  double rho_depth = 0.0;
  double p_value = 1.0;
};

/// Ridge fit of the mean of standardised targets on Z; p from permuting depth
/// within blocks (one-sided, larger rho_depth is more extreme).
CompositeAxis composite_axis(const Matrix& Z, const Matrix& targets, const Vector& depth, const std::vector<int>& blocks,
                             double lambda, int n_perm, std::uint64_t seed);

}  // namespace forge::audits
