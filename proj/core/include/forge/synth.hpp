#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "forge/operator_store.hpp"
#include "forge/panel.hpp"
#include "forge/types.hpp"

namespace forge::synth {

/// Rooted stage tree: stage 0 is the root ("root"), then n_branches chains of
/// depth_per_branch stages named "b{i}_d{j}" (j = 1..depth).
struct StageTree {
  std::vector<std::string> names;
  std::vector<int> parent;  // -1 for the root
  std::vector<int> depth;
  std::vector<std::string> branch;  // "trunk" for the root, "b{i}" otherwise

  int size() const { return static_cast<int>(names.size()); }
  int index_of(const std::string& stage) const;  // InvalidArgument when unknown
  IndexList children(int stage) const;
};

StageTree make_tree(int n_branches, int depth_per_branch);

/// Unweighted path length between two stages (breadth-first search).
int oracle_stage_distance(const std::string& a, const std::string& b, const StageTree& tree);

/// All-pairs hop distances.
Matrix hop_matrix(const StageTree& tree);

struct SynthConfig {
  int n_branches = 3;
  int depth_per_branch = 3;
  int n_donors = 8;
  int n_external_donors = 2;
  int n_tissues = 3;
  int cells_per_stage = 12;  // per (donor, tissue, stage)
  int G = 64;
  double noise_sigma = 0.1;
  int n_layers = 4;
  int n_heads = 4;
  std::vector<UnitId> planted_heads{{3, 1}};
  /// When two heads are planted, give them the signal plus and minus a shared
  /// low-rank noise term, so only their equal-weight sum is clean.
  bool planted_split = false;
  double distractor_scale = 1.0;
  int distractor_rank = 4;            // below the signal rank, so distractors lose information
  double edge_length = 3.0;           // feature-space length of one tree edge
  int nuisance_rank = 4;
  double nuisance_cell_scale = 2.0;   // per-cell nuisance coefficient sd
  double nuisance_group_scale = 0.3;  // per (donor, tissue, stage) nuisance sd
  double donor_effect = 0.3;          // offset norm relative to one tree edge
  double tissue_effect = 0.3;
  double subtype_shift = 0.5;
  double progression = 0.0;           // cells spread back along their incoming edge by U(0, progression)
  std::uint64_t seed = 7;

  void validate() const;  // InvalidArgument naming the field
};

struct Truth {
  StageTree tree;
  std::vector<UnitId> planted_heads;
  Matrix signal_basis;    // G x (s+1): code axes then the subtype axis
  Matrix nuisance_basis;  // G x nuisance_rank
  Matrix planted_head;    // G x G, the clean planted map
  int planted_rank = 0;
};

struct SynthData {
  WeightTensor tensor;
  AnchorPanel cells;           // every cell, internal and external
  AnchorPanel internal_cells;
  AnchorPanel external_cells;
  AnchorPanel internal;        // anchors
  AnchorPanel external;        // anchors
  Truth truth;
};

SynthData generate(const SynthConfig& cfg);

}  // namespace forge::synth
