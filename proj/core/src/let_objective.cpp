#include "forge/let_objective.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <map>

#include "forge/error.hpp"
#include "forge/metrics.hpp"

namespace forge::let {
namespace {

std::atomic<std::uint64_t> g_pinv_count{0};

struct Angles {
  Matrix unit;   // m x k
  Vector norm;   // m
  Matrix cos;    // m x m (clamped)
  Matrix theta;  // m x m
  Matrix dtheta; // d theta / d cos, 0 where clamped
};

Angles angles(const Matrix& V) {
  Angles a;
  a.norm = V.rowwise().norm();
  for (Eigen::Index i = 0; i < V.rows(); ++i)
    if (!(a.norm(i) >= 1e-12))
      throw DegenerateLatent("latent row " + std::to_string(i) + " has norm below 1e-12");
  a.unit = a.norm.cwiseInverse().asDiagonal() * V;
  const Matrix raw = a.unit * a.unit.transpose();
  const auto m = V.rows();
  a.cos.resize(m, m);
  a.theta.resize(m, m);
  a.dtheta.resize(m, m);
  constexpr double lo = -1.0 + kCosClamp, hi = 1.0 - kCosClamp;
  for (Eigen::Index j = 0; j < m; ++j) {
    for (Eigen::Index i = 0; i < m; ++i) {
      const double c = raw(i, j);
      const double cc = std::min(hi, std::max(lo, c));
      a.cos(i, j) = cc;
      a.theta(i, j) = std::acos(cc);
      a.dtheta(i, j) = (c > lo && c < hi) ? -1.0 / std::sqrt(1.0 - cc * cc) : 0.0;
    }
    a.theta(j, j) = 0.0;
    a.dtheta(j, j) = 0.0;
  }
  return a;
}

// Given symmetric G = dL/dtheta (per unordered pair, zero diagonal), return dL/dV.
Matrix backprop_angles(const Angles& a, const Matrix& g_theta) {
  const Matrix h = g_theta.cwiseProduct(a.dtheta);
  const Vector hc = h.cwiseProduct(a.cos).rowwise().sum();
  Matrix g = h * a.unit - hc.asDiagonal() * a.unit;
  return a.norm.cwiseInverse().asDiagonal() * g;
}

struct Recon {
  double value = 0.0;
  Matrix grad_w;
  Vector grad_b;
};

// ||W^+ W y_i - y_i||^2 summed over rows of Y (y_i = x_i - b).
Recon reconstruction(const Matrix& w, const Matrix& Y, bool want_grad) {
  g_pinv_count.fetch_add(1, std::memory_order_relaxed);
  Eigen::JacobiSVD<Matrix> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  const double cutoff = kPinvCutoff * (s.size() > 0 ? s(0) : 0.0);
  Eigen::Index r = 0;
  while (r < s.size() && s(r) > cutoff) ++r;
  const Matrix vr = svd.matrixV().leftCols(r);
  const Matrix E = Y - (Y * vr) * vr.transpose();
  Recon out;
  out.value = E.squaredNorm();
  if (want_grad) {
    // d/dW ||(I - W^+ W) Y^T||^2 = -2 (W^+)^T Y^T E, with (W^+)^T = U S^-1 V^T.
    const Matrix pinv_t = svd.matrixU().leftCols(r) * s.head(r).cwiseInverse().asDiagonal() * vr.transpose();
    out.grad_w = -2.0 * pinv_t * (Y.transpose() * E);
    out.grad_b = -2.0 * E.colwise().sum().transpose();
  }
  return out;
}

// Accumulate dL/dZ into W and b gradients.
void chain_latent(const Params& p, const Matrix& Y, const Matrix& g_z, Params& grad) {
  grad.w += g_z.transpose() * Y;
  grad.b -= p.w.transpose() * g_z.colwise().sum().transpose();
}

}  // namespace

Vector Params::pack() const {
  const auto nw = w.size(), nb = b.size(), nc = cls_w.size(), ncb = cls_b.size();
  Vector flat(nw + nb + 1 + nc + ncb);
  flat.segment(0, nw) = Eigen::Map<const Vector>(w.data(), nw);
  flat.segment(nw, nb) = b;
  flat(nw + nb) = log_beta;
  flat.segment(nw + nb + 1, nc) = Eigen::Map<const Vector>(cls_w.data(), nc);
  flat.segment(nw + nb + 1 + nc, ncb) = cls_b;
  return flat;
}

void Params::unpack(const Vector& flat) {
  const auto nw = w.size(), nb = b.size(), nc = cls_w.size(), ncb = cls_b.size();
  if (flat.size() != nw + nb + 1 + nc + ncb) throw ShapeError("parameter vector length mismatch");
  Eigen::Map<Vector>(w.data(), nw) = flat.segment(0, nw);
  b = flat.segment(nw, nb);
  log_beta = flat(nw + nb);
  Eigen::Map<Vector>(cls_w.data(), nc) = flat.segment(nw + nb + 1, nc);
  cls_b = flat.segment(nw + nb + 1 + nc, ncb);
}

Params Params::zeros_like() const {
  Params z;
  z.w = Matrix::Zero(w.rows(), w.cols());
  z.b = Vector::Zero(b.size());
  z.log_beta = 0.0;
  z.cls_w = Matrix::Zero(cls_w.rows(), cls_w.cols());
  z.cls_b = Vector::Zero(cls_b.size());
  return z;
}

Matrix encode(const Matrix& w, const Vector& b, const Matrix& X) {
  if (X.cols() != w.cols())
    throw ShapeError("adaptor expects " + std::to_string(w.cols()) + " features, got " + std::to_string(X.cols()));
  return (X.rowwise() - b.transpose()) * w.transpose();
}

Matrix angle_matrix(const Matrix& V) { return angles(V).theta; }

Matrix pseudo_inverse(const Matrix& w) {
  g_pinv_count.fetch_add(1, std::memory_order_relaxed);
  Eigen::JacobiSVD<Matrix> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  const double cutoff = kPinvCutoff * (s.size() > 0 ? s(0) : 0.0);
  Vector inv = Vector::Zero(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > cutoff) inv(i) = 1.0 / s(i);
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

std::uint64_t pinv_evaluations() { return g_pinv_count.load(); }

std::vector<IndexList> batch_knn(const Matrix& X, int k) {
  const Matrix d = metrics::pairwise_distances(X);
  std::vector<IndexList> out(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    out[static_cast<std::size_t>(i)] = metrics::nearest(d.row(i).transpose(), static_cast<int>(i), k);
  return out;
}

Terms anchor_loss(const Params& p, const Matrix& X, const Matrix& target, double alpha, Params* grad) {
  const auto n = X.rows();
  if (target.rows() != n || target.cols() != n) throw ShapeError("target distance matrix must be n x n");
  const Matrix Y = X.rowwise() - p.b.transpose();
  const Matrix Z = Y * p.w.transpose();
  const Angles a = angles(Z);
  const double beta = std::exp(p.log_beta);
  const Matrix resid = beta * a.theta - target;  // diagonal is 0 - 0

  Terms t;
  t.distance = 0.5 * resid.squaredNorm();  // each unordered pair once
  Recon rec;
  if (alpha != 0.0) {
    rec = reconstruction(p.w, Y, grad != nullptr);
    t.recon = alpha * rec.value;
  }
  t.total = t.distance + t.recon;
  if (!grad) return t;

  *grad = p.zeros_like();
  Matrix g_theta = 2.0 * beta * resid;
  g_theta.diagonal().setZero();
  const Matrix g_z = backprop_angles(a, g_theta);
  chain_latent(p, Y, g_z, *grad);
  grad->log_beta = 0.5 * (2.0 * resid.cwiseProduct(beta * a.theta)).sum();
  if (alpha != 0.0) {
    grad->w += alpha * rec.grad_w;
    grad->b += alpha * rec.grad_b;
  }
  return t;
}

Terms cell_loss(const Params& p, const CellBatch& batch, const CellWeights& cw, const HybridWeights& hw, Params* grad) {
  const auto m = batch.X.rows();
  if (static_cast<Eigen::Index>(batch.stage.size()) != m) throw ShapeError("cell batch stage labels length mismatch");
  const Matrix Y = batch.X.rowwise() - p.b.transpose();
  const Matrix Z = Y * p.w.transpose();
  const auto k = Z.cols();
  const double beta = std::exp(p.log_beta);
  Terms t;
  Matrix g_z = Matrix::Zero(m, k);
  double g_log_beta = 0.0;
  if (grad) *grad = p.zeros_like();

  // Stage centroids of the stages present in this batch.
  std::map<int, IndexList> members;
  for (Eigen::Index i = 0; i < m; ++i) members[batch.stage[static_cast<std::size_t>(i)]].push_back(static_cast<int>(i));
  std::vector<int> present;
  for (const auto& [s, rows] : members) present.push_back(s);
  const auto ns = static_cast<Eigen::Index>(present.size());
  Matrix mu(ns, k);
  for (Eigen::Index s = 0; s < ns; ++s) {
    const auto& rows = members[present[static_cast<std::size_t>(s)]];
    RowVector acc = RowVector::Zero(k);
    for (int r : rows) acc += Z.row(r);
    mu.row(s) = acc / static_cast<double>(rows.size());
  }

  const bool need_centroid_angles = (cw.stage != 0.0 || hw.topo != 0.0) && ns >= 2;
  if (need_centroid_angles) {
    const Angles a = angles(mu);
    Matrix g_theta = Matrix::Zero(ns, ns);
    for (Eigen::Index s = 0; s < ns; ++s) {
      for (Eigen::Index u = s + 1; u < ns; ++u) {
        const double dhat = beta * a.theta(s, u);
        const int cs = present[static_cast<std::size_t>(s)], cu = present[static_cast<std::size_t>(u)];
        if (cw.stage != 0.0) {
          const double r = dhat - batch.stage_distance(cs, cu);
          t.stage += cw.stage * r * r;
          const double g = cw.stage * 2.0 * r;
          g_theta(s, u) += g * beta;
          g_log_beta += g * dhat;
        }
        if (hw.topo != 0.0 && batch.ref_distance.size() > 0) {
          const double ref = batch.ref_distance(cs, cu);
          if (std::isnan(ref)) continue;
          const double r = dhat - ref;
          t.topo += hw.topo * r * r;
          const double g = hw.topo * 2.0 * r;
          g_theta(s, u) += g * beta;
          g_log_beta += g * dhat;
        }
      }
    }
    if (grad) {
      g_theta = (g_theta + g_theta.transpose()).eval();
      const Matrix g_mu = backprop_angles(a, g_theta);
      for (Eigen::Index s = 0; s < ns; ++s) {
        const auto& rows = members[present[static_cast<std::size_t>(s)]];
        const double inv = 1.0 / static_cast<double>(rows.size());
        for (int r : rows) g_z.row(r) += inv * g_mu.row(s);
      }
    }
  }

  if (cw.local != 0.0) {
    if (static_cast<Eigen::Index>(batch.feature_knn.size()) != m) throw ShapeError("cell batch kNN lists missing");
    const Angles a = angles(Z);
    Matrix prob(m, m);
    Vector q = Vector::Zero(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      double mn = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < m; ++j)
        if (j != i) mn = std::min(mn, a.theta(i, j));
      double sum = 0.0;
      for (Eigen::Index j = 0; j < m; ++j) {
        prob(i, j) = j == i ? 0.0 : std::exp(-(a.theta(i, j) - mn) / kLocalTemperature);
        sum += prob(i, j);
      }
      prob.row(i) /= sum;
      for (int j : batch.feature_knn[static_cast<std::size_t>(i)]) q(i) += prob(i, j);
    }
    t.local = cw.local * (1.0 - q.mean());
    if (grad) {
      // d/dtheta_ij of -(1/m) q_i = (1/(m tau)) p_ij (1[j in N_i] - q_i)
      Matrix A(m, m);
      for (Eigen::Index i = 0; i < m; ++i) {
        for (Eigen::Index j = 0; j < m; ++j) A(i, j) = -q(i) * prob(i, j);
        for (int j : batch.feature_knn[static_cast<std::size_t>(i)]) A(i, j) += prob(i, j);
      }
      A *= cw.local / (static_cast<double>(m) * kLocalTemperature);
      Matrix g_theta = A + A.transpose();
      g_theta.diagonal().setZero();
      g_z += backprop_angles(a, g_theta);
    }
  }

  Recon rec;
  if (cw.recon != 0.0) {
    rec = reconstruction(p.w, Y, grad != nullptr);
    t.recon = cw.recon * rec.value / static_cast<double>(m);
  }

  if (cw.cls != 0.0) {
    const auto c = p.cls_w.rows();
    if (c == 0) throw InvalidArgument("cell loss with a classification term needs classifier parameters");
    Matrix logits = (Z * p.cls_w.transpose()).rowwise() + p.cls_b.transpose();
    Matrix soft(m, c);
    double ce = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      const double mx = logits.row(i).maxCoeff();
      const RowVector e = (logits.row(i).array() - mx).exp().matrix();
      const double s = e.sum();
      soft.row(i) = e / s;
      ce -= logits(i, batch.stage[static_cast<std::size_t>(i)]) - mx - std::log(s);
    }
    t.cls = cw.cls * ce / static_cast<double>(m);
    if (grad) {
      Matrix diff = soft;
      for (Eigen::Index i = 0; i < m; ++i) diff(i, batch.stage[static_cast<std::size_t>(i)]) -= 1.0;
      diff *= cw.cls / static_cast<double>(m);
      g_z += diff * p.cls_w;
      grad->cls_w += diff.transpose() * Z;
      grad->cls_b += diff.colwise().sum().transpose();
    }
  }

  if (hw.compact != 0.0) {
    for (Eigen::Index s = 0; s < ns; ++s) {
      const auto& rows = members[present[static_cast<std::size_t>(s)]];
      const double inv = 1.0 / static_cast<double>(rows.size());
      for (int r : rows) {
        const RowVector dev = Z.row(r) - mu.row(s);
        t.compact += hw.compact * inv * dev.squaredNorm();
        if (grad) g_z.row(r) += hw.compact * 2.0 * inv * dev;
      }
    }
  }

  t.total = t.stage + t.local + t.recon + t.cls + t.topo + t.compact;
  if (grad) {
    chain_latent(p, Y, g_z, *grad);
    grad->log_beta = g_log_beta;
    if (cw.recon != 0.0) {
      grad->w += (cw.recon / static_cast<double>(m)) * rec.grad_w;
      grad->b += (cw.recon / static_cast<double>(m)) * rec.grad_b;
    }
  }
  return t;
}

}  // namespace forge::let
