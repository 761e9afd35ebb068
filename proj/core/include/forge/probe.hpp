#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "forge/container.hpp"
#include "forge/types.hpp"

namespace forge {

enum class ProbeKind { linear, mlp2, mlp3 };
std::string to_string(ProbeKind kind);
ProbeKind probe_kind_from_string(const std::string& s);

struct ProbeConfig {
  double l2 = 1e-3;      // linear probe penalty (lambda/2 * ||W||^2 on the mean loss)
  double tol = 1e-6;     // linear probe gradient tolerance (max-abs)
  int max_iter = 1000;   // linear probe L-BFGS iterations
  int epochs = 200;      // MLP probes
  int batch = 64;
  double learning_rate = 1e-3;
  double dropout = 0.1;
};

/// Classifier on top of a latent. Inputs are standardised with training-set
/// statistics stored in the probe.
class Probe {
 public:
  ProbeKind kind() const { return kind_; }
  int n_classes() const { return n_classes_; }
  int input_dim() const { return static_cast<int>(mean_.size()); }

  Matrix logits(const Matrix& Z) const;
  Matrix proba(const Matrix& Z) const;
  std::vector<int> predict(const Matrix& Z) const;

  Container to_container() const;
  static Probe from_container(const Container& c);
  std::string to_bytes() const { return to_container().to_bytes(); }

  friend Probe fit_probe(const Matrix&, const std::vector<int>&, int, ProbeKind, std::uint64_t, const ProbeConfig&);

 private:
  ProbeKind kind_ = ProbeKind::linear;
  int n_classes_ = 0;
  Vector mean_, scale_;
  std::vector<Matrix> w_;  // layer l: out x in
  std::vector<Vector> b_;
};

/// Labels must lie in [0, n_classes). Fewer than two distinct labels -> UndefinedTask.
Probe fit_probe(const Matrix& Z, const std::vector<int>& y, int n_classes, ProbeKind kind, std::uint64_t seed,
                const ProbeConfig& cfg = {});

}  // namespace forge
