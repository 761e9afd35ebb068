#pragma once

#include <random>

#include <forge/panel.hpp>
#include <forge/rng.hpp>
#include <forge/types.hpp>

namespace testing {

inline forge::Matrix gaussian(int rows, int cols, std::uint64_t seed, double sd = 1.0) {
  forge::Rng rng(seed);
  std::normal_distribution<double> nd(0.0, sd);
  forge::Matrix m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = nd(rng);
  return m;
}

inline forge::Vector gaussian_vector(int n, std::uint64_t seed, double sd = 1.0) {
  return gaussian(n, 1, seed, sd).col(0);
}

inline double rel_err(const forge::Matrix& a, const forge::Matrix& b) {
  return (a - b).norm() / std::max(1e-300, b.norm());
}

/// Panel whose stage ontology is a chain s0 - s1 - ... ; one row per
/// (donor, stage) with the given features.
inline forge::AnchorPanel chain_panel(const forge::Matrix& features, int n_stages, int n_donors) {
  forge::AnchorPanel p;
  p.features = features;
  std::vector<std::string> donor, tissue, branch, stage;
  for (int d = 0; d < n_donors; ++d)
    for (int s = 0; s < n_stages; ++s) {
      p.row_ids.push_back("r" + std::to_string(d * n_stages + s));
      donor.push_back("d" + std::to_string(d));
      tissue.push_back("t" + std::to_string(d % 2));
      branch.push_back(s < n_stages / 2 ? "a" : "b");
      stage.push_back("s" + std::to_string(s));
      p.stage_depth.push_back(s);
    }
  p.donor = forge::Categorical::from_strings(donor);
  p.tissue = forge::Categorical::from_strings(tissue);
  p.branch = forge::Categorical::from_strings(branch);
  p.stage = forge::Categorical::from_strings(stage);
  p.stage_distance.resize(n_stages, n_stages);
  for (int a = 0; a < n_stages; ++a)
    for (int b = 0; b < n_stages; ++b) p.stage_distance(a, b) = std::abs(a - b);
  return p;
}

}  // namespace testing
