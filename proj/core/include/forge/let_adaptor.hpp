#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "forge/container.hpp"
#include "forge/let_objective.hpp"
#include "forge/panel.hpp"
#include "forge/types.hpp"

namespace forge {

enum class HeadVariant { anchor, cell, hybrid };
std::string to_string(HeadVariant v);
HeadVariant head_variant_from_string(const std::string& s);

/// beta * arccos(cos angle(z_i, z_j)), clamped. DegenerateLatent for near-zero vectors.
double latent_distance(const Vector& z_i, const Vector& z_j, double beta);

struct GateThresholds {
  double trustworthiness = 0.80;
  double corr = 0.20;
  double blocked_p = 0.001;
};

struct GateReport {
  double trustworthiness = 0.0;
  double corr_random = 0.0;
  double corr_donor = 0.0;
  double corr_clade = 0.0;
  double blocked_p = 1.0;
  bool passed = false;
  // Extra diagnostics, not part of the pass rule.
  double corr_all = 0.0;
  double corr_resid = 0.0;
  int n_rows = 0;
  int n_neighbors = 0;

  Json to_json() const;
  static GateReport from_json(const Json& j);
};

struct GateConfig {
  GateThresholds thresholds;
  double random_pair_fraction = 0.2;
  double donor_fraction = 0.2;
  int n_perm = 1999;
  int n_neighbors = 10;
  int workers = 1;
};

/// Linear adaptor z = W_enc (x - b) with learned angular scale beta.
class LetHead {
 public:
  LetHead() = default;
  LetHead(HeadVariant variant, Matrix w_enc, Vector b, double beta, Json hyper, std::uint64_t seed);

  HeadVariant variant() const { return variant_; }
  int dim() const { return static_cast<int>(w_.rows()); }
  int input_dim() const { return static_cast<int>(w_.cols()); }
  const Matrix& w_enc() const { return w_; }
  const Vector& bias() const { return b_; }
  double beta() const { return beta_; }
  const Json& hyper() const { return hyper_; }
  std::uint64_t seed() const { return seed_; }
  bool frozen() const { return gate_.has_value(); }
  const std::optional<GateReport>& gate_report() const { return gate_; }

  /// Copy carrying the gate report; a gated head is frozen.
  LetHead frozen_with(const GateReport& report) const;

  Matrix encode(const Matrix& X) const;
  /// n x n latent distance matrix of the rows of Z.
  Matrix latent_distances(const Matrix& Z) const;

  Container to_container() const;
  static LetHead from_container(const Container& c);
  std::string to_bytes() const { return to_container().to_bytes(); }
  void save(const std::filesystem::path& path) const { to_container().save(path); }
  static LetHead load(const std::filesystem::path& path) { return from_container(Container::load(path)); }

 private:
  HeadVariant variant_ = HeadVariant::anchor;
  Matrix w_;
  Vector b_;
  double beta_ = 1.0;
  Json hyper_ = Json::object();
  std::uint64_t seed_ = 0;
  std::optional<GateReport> gate_;
};

struct OptimizerConfig {
  int steps = 2000;  // anchor heads
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainTrace {
  std::vector<double> loss;       // loss per step (anchor) or mean batch loss per epoch (cell)
  std::vector<double> best_loss;  // running minimum of `loss`
  let::Terms initial;
  let::Terms final_terms;         // terms at the returned parameters
  std::vector<Matrix> w_history;  // only filled when record_weights is set
  bool record_weights = false;
};

LetHead train_anchor_head(const AnchorPanel& panel, int k, double alpha, std::uint64_t seed,
                          const OptimizerConfig& opt = {}, TrainTrace* trace = nullptr);

struct CellTrainConfig {
  int dim = 10;
  let::CellWeights weights;
  int cap_per_stage = 500;
  int epochs = 30;
  int batch = 256;
  int n_neighbors = 10;
  OptimizerConfig opt;
};

/// Rows kept by the stage-balanced sampler: at most `cap` rows per stage, drawn
/// without replacement, returned in ascending order.
IndexList stage_capped_sample(const AnchorPanel& cells, int cap, std::uint64_t seed);

LetHead train_cell_head(const AnchorPanel& cells, const CellTrainConfig& cfg, std::uint64_t seed,
                        TrainTrace* trace = nullptr);

struct HybridTrainConfig {
  CellTrainConfig cell;
  double lambda_topo = 0.01;
  double lambda_compact = 0.0;
};

/// Stage-centroid latent distances of `head` on `panel`, indexed by the panel's
/// stage codes; NaN for stages without rows.
Matrix stage_centroid_distances(const LetHead& head, const AnchorPanel& panel);

/// Cell objective plus a topology prior matching stage-centroid distances to
/// those of `ref_head` on `ref_panel` (stages matched by name) and a compactness term.
LetHead train_hybrid_head(const AnchorPanel& cells, const LetHead& ref_head, const AnchorPanel& ref_panel,
                          const HybridTrainConfig& cfg, std::uint64_t seed, TrainTrace* trace = nullptr);

/// rho_resid + 0.25 auc1 + 0.25 auc2 + 0.40 silhouette - 0.20 spread.
double hybrid_selection_score(double rho_resid, double auc1, double auc2, double silhouette, double spread);

/// Evaluate a head on a panel. Rows are put in row_id order first, so the report
/// does not depend on the panel's row order.
GateReport gate(const LetHead& head, const AnchorPanel& panel, const GateConfig& cfg, std::uint64_t seed);

/// Frozen application of a gated head to another panel.
std::pair<Matrix, GateReport> transfer(const LetHead& head, const AnchorPanel& external, const GateConfig& cfg,
                                       std::uint64_t seed);

}  // namespace forge
