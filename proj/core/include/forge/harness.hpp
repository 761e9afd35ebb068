#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "forge/container.hpp"
#include "forge/let_adaptor.hpp"
#include "forge/linalg.hpp"
#include "forge/operator_store.hpp"
#include "forge/panel.hpp"
#include "forge/probe.hpp"

namespace forge::harness {

struct SplitPlan {
  int split_id = 0;
  std::vector<std::string> train_donors;  // sorted
  std::vector<std::string> test_donors;   // sorted
  int train_cap = 0;
  std::uint64_t seed = 0;
  IndexList train_rows;  // ascending
  IndexList test_rows;   // ascending, every row of the test donors

  Json to_json() const;
};

/// Each split draws n_test_donors distinct donors; the rest train. Training rows
/// are capped at train_cap with stage-proportional allocation (largest remainder),
/// uniform within stage.
std::vector<SplitPlan> make_splits(const AnchorPanel& cells, int n_splits, int n_test_donors, int train_cap,
                                   std::uint64_t seed);

enum class RepresentationKind { raw, pca, svd, feature_operator, let_head, external };
std::string to_string(RepresentationKind kind);

struct MethodUnderTest {
  std::string name;
  RepresentationKind kind = RepresentationKind::raw;
  int dim = 10;                                  // pca / svd
  std::shared_ptr<const FeatureOperator> op;     // feature_operator; optional input map for let_head
  std::shared_ptr<const LetHead> head;           // let_head
  std::shared_ptr<const Matrix> external;        // external: rows aligned with the campaign panel
  ProbeKind probe = ProbeKind::linear;
};

/// A representation fitted on training rows only.
struct Representation {
  RepresentationKind kind = RepresentationKind::raw;
  linalg::Projection projection;  // pca / svd
  const MethodUnderTest* method = nullptr;

  /// Maps panel rows to latent coordinates.
  Matrix transform(const AnchorPanel& cells, const IndexList& rows) const;
  /// Checksum of every fitted parameter (empty for parameter-free maps).
  std::string fingerprint() const;
};

Representation fit_representation(const MethodUnderTest& method, const AnchorPanel& cells, const IndexList& train_rows);

struct PseudotimeResult {
  Vector pseudotime;
  int root = 0;
  bool partial = false;  // some cells unreachable from the root
};

/// Shortest-path distance from the cell nearest `root_hint` over the symmetric
/// kNN graph (Euclidean edge weights). Ties: lowest index.
PseudotimeResult donor_local_pseudotime(const Matrix& Z, const Vector& root_hint, int k_nn);

struct CampaignConfig {
  /// "pseudotime", "stage", or "label:NAME" for a panel label column.
  std::vector<std::string> endpoints{"pseudotime", "stage"};
  std::string reference;
  int k_nn = 10;
  int workers = 1;
  std::uint64_t seed = 0;
  ProbeConfig probe;
};

struct CampaignValue {
  int split = 0;
  std::string method;
  std::string metric;
  double value = 0.0;
  bool valid = true;
  std::string note;
};

struct PairedComparison {
  std::string method;
  std::string reference;
  std::string metric;
  int n = 0;               // splits where both are valid
  double mean_delta = 0.0; // method - reference
  double w_plus = 0.0;
  double w_minus = 0.0;
  double p_value = 1.0;
  double q_value = 1.0;
  std::string note;
};

struct MetricSummary {
  std::string method;
  std::string metric;
  int n_obs = 0;
  int n_invalid = 0;
  double mean = 0.0;
  double sd = 0.0;
};

struct CampaignReport {
  std::vector<CampaignValue> values;
  std::vector<PairedComparison> paired;
  std::vector<MetricSummary> summary;
  Json timings = Json::object();  // wall clock per phase; kept out of the report files

  const MetricSummary* find(const std::string& method, const std::string& metric) const;
  const PairedComparison* find_paired(const std::string& method, const std::string& metric) const;

  std::string values_csv() const;
  std::string paired_csv() const;
  std::string summary_csv() const;
  std::string summary_text() const;
};

CampaignReport run_campaign(const AnchorPanel& cells, const std::vector<MethodUnderTest>& methods,
                            const std::vector<SplitPlan>& splits, const CampaignConfig& cfg);

}  // namespace forge::harness
