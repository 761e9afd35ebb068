#pragma once

#include <vector>

#include "forge/types.hpp"

namespace forge::metrics {

/// Squared-free Euclidean distance matrix between the rows of X.
Matrix pairwise_distances(const Matrix& X);

/// Indices of the k nearest rows of `dist_row` (excluding `self`), nearest first,
/// distance ties broken by lowest index.
IndexList nearest(const Eigen::Ref<const Vector>& dist_row, int self, int k);

/// Venna-Kaski trustworthiness of the embedding X_low of X_high with K neighbors.
/// Valid K: 1 <= K <= n-2 and 3K < 2n-1 (the normaliser must stay positive).
double trustworthiness(const Matrix& X_high, const Matrix& X_low, int n_neighbors);

/// Average ranks (1-based), midranks for ties.
Vector midranks(const Vector& values);
double pearson(const Vector& a, const Vector& b);
double spearman(const Vector& a, const Vector& b);

/// Spearman correlation of pred and target after OLS-regressing both on an
/// intercept plus the confound columns (one row per pair). The fit uses a
/// pseudo-inverse, so rank-deficient designs are accepted.
double residualized_correlation(const Vector& pred, const Vector& target, const Matrix& confounds);

double auroc(const Vector& scores, const std::vector<int>& labels);
double auroc_abs(const Vector& scores, const std::vector<int>& labels);

double balanced_accuracy(const std::vector<int>& pred, const std::vector<int>& truth);
double macro_f1(const std::vector<int>& pred, const std::vector<int>& truth);

double silhouette_mean(const Matrix& Z, const std::vector<int>& labels);
double eta_squared(const Vector& values, const std::vector<int>& groups);

struct Orientation {
  double mean_signed = 0.0;
  double mean_abs = 0.0;
  double positive_share = 0.0;
};
Orientation orientation_summary(const Vector& rhos);

}  // namespace forge::metrics
