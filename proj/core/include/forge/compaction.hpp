#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "forge/let_adaptor.hpp"
#include "forge/operator_store.hpp"
#include "forge/panel.hpp"
#include "forge/probe.hpp"

namespace forge::compaction {

enum class ScreenScore { corr_resid, composite };
ScreenScore screen_score_from_string(const std::string& s);

struct ScanConfig {
  int k = 10;
  double alpha = 1e-3;
  OptimizerConfig opt;
  int n_neighbors = 10;
  ScreenScore score = ScreenScore::corr_resid;
  int workers = 1;
  std::uint64_t seed = 0;
};

struct ScanRow {
  UnitId unit;
  int rank = 0;  // 1-based
  bool ok = true;
  std::string error;
  double corr = 0.0;        // zero-shot Spearman on the external panel
  double corr_resid = 0.0;
  double trustworthiness = 0.0;
  double score = 0.0;
};

/// Train one LET head per single-head operator on `internal`, evaluate it
/// zero-shot on `external`, rank by screen score (ties and failures by unit order,
/// failures last).
std::vector<ScanRow> scan_heads(const WeightTensor& tensor, const AnchorPanel& internal, const AnchorPanel& external,
                                const ScanConfig& cfg);
std::string scan_csv(const std::vector<ScanRow>& rows);

struct CompactFit {
  FeatureOperator op;
  std::vector<double> alphas;
  double loss = 0.0;  // distance term of the adaptor trained on the fitted operator
  int evaluations = 0;
};

/// Coordinate search over alpha_2..alpha_k (alpha_1 = 1): grid {-2,-1,-0.5,0,0.5,1,2}
/// then step-halving refinement, retraining the adaptor for every candidate.
CompactFit fit_compact_weights(const WeightTensor& tensor, const std::vector<UnitId>& units,
                               const AnchorPanel& internal, const ScanConfig& cfg);

struct EndpointSpec {
  std::string name;
  int n_classes = 2;
};

struct EvalSet {
  std::string name;
  Matrix X;                                     // operator inputs
  std::map<std::string, std::vector<int>> labels;  // per endpoint
};

/// Head and probes trained on the intact operator, never modified afterwards.
struct FrozenAssets {
  LetHead head;
  std::map<std::string, Probe> probes;
  std::vector<EndpointSpec> endpoints;

  std::string fingerprint() const;
};

FrozenAssets train_frozen_assets(const FeatureOperator& op, const LetHead& head, const EvalSet& train,
                                 const std::vector<EndpointSpec>& endpoints, ProbeKind probe, std::uint64_t seed);

/// Endpoint metric under `op` with frozen head and probes: AUROC of the
/// positive-class probability for binary endpoints, balanced accuracy otherwise.
Vector evaluate_endpoints(const FeatureOperator& op, const FrozenAssets& assets, const EvalSet& eval);

struct AblationTable {
  std::vector<std::string> endpoints;
  Vector intact;          // per endpoint
  Matrix impact;          // factor x endpoint, intact - ablated (signed)
  Vector total_clipped;   // sum over endpoints of max(impact, 0)
  Vector total_signed;
  IndexList order;        // factors by total_clipped, descending (ties: lower index)
  Vector concentration;   // cumulative share of total_clipped along `order`

  std::string csv() const;
};

AblationTable ablate_factors_loo(const FeatureOperator& op, const FrozenAssets& assets, const EvalSet& eval);

struct SubsetRow {
  IndexList subset;
  Vector values;  // per endpoint
};

struct SubsetSweep {
  std::vector<std::string> endpoints;
  Vector intact;
  std::vector<SubsetRow> rows;   // all 2^c - 1 non-empty subsets
  std::vector<int> best;         // per endpoint: index into rows
  Vector best_ratio;             // best / intact

  std::string csv() const;
};

/// Keep-only evaluation of every non-empty subset of `core` (c <= 8). Best per
/// endpoint: highest value, then fewer factors, then lexicographically smaller.
SubsetSweep subset_sweep(const FeatureOperator& op, const FrozenAssets& assets, const IndexList& core,
                         const EvalSet& eval);

struct PrefixRow {
  IndexList prefix;
  Matrix values;       // eval set x endpoint
  Vector mean_delta;   // per endpoint, mean over eval sets of (prefix - intact)
  Vector p_value;      // Wilcoxon across eval sets (1 when undefined)
  Vector q_value;      // BH across prefixes, per endpoint
};

struct CoreSufficiency {
  std::vector<std::string> endpoints;
  Matrix intact;  // eval set x endpoint
  std::vector<PrefixRow> rows;

  std::string csv() const;
};

CoreSufficiency core_sufficiency(const FeatureOperator& op, const FrozenAssets& assets, const IndexList& ordered_core,
                                 const std::vector<EvalSet>& evals);

/// Top-k read and write loadings per factor: factor,side,rank,index,loading.
std::string factor_loadings_csv(const FeatureOperator& op, int top_k);

}  // namespace forge::compaction
