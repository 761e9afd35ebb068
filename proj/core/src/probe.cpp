#include "forge/probe.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <random>
#include <set>

#include "forge/error.hpp"
#include "forge/rng.hpp"

namespace forge {
namespace {

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const RowVector e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp().matrix();
    p.row(i) = e / e.sum();
  }
  return p;
}

// Mean cross-entropy of softmax(logits) against y.
double cross_entropy(const Matrix& logits, const std::vector<int>& y, Matrix* dlogits) {
  const auto n = logits.rows();
  double loss = 0.0;
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mx = logits.row(i).maxCoeff();
    const RowVector e = (logits.row(i).array() - mx).exp().matrix();
    const double s = e.sum();
    p.row(i) = e / s;
    loss -= logits(i, y[static_cast<std::size_t>(i)]) - mx - std::log(s);
  }
  if (dlogits) {
    for (Eigen::Index i = 0; i < n; ++i) p(i, y[static_cast<std::size_t>(i)]) -= 1.0;
    *dlogits = p / static_cast<double>(n);
  }
  return loss / static_cast<double>(n);
}

// Limited-memory BFGS with Armijo backtracking. f returns value and fills grad.
template <class F>
Vector lbfgs(F&& f, Vector x, double tol, int max_iter) {
  constexpr int m = 10;
  std::deque<Vector> s_hist, y_hist;
  Vector g(x.size());
  double fx = f(x, g);
  for (int it = 0; it < max_iter && g.cwiseAbs().maxCoeff() > tol; ++it) {
    Vector q = g;
    std::vector<double> alpha(s_hist.size());
    for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
      const double rho = 1.0 / y_hist[static_cast<std::size_t>(i)].dot(s_hist[static_cast<std::size_t>(i)]);
      alpha[static_cast<std::size_t>(i)] = rho * s_hist[static_cast<std::size_t>(i)].dot(q);
      q -= alpha[static_cast<std::size_t>(i)] * y_hist[static_cast<std::size_t>(i)];
    }
    if (!s_hist.empty()) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    for (std::size_t i = 0; i < s_hist.size(); ++i) {
      const double rho = 1.0 / y_hist[i].dot(s_hist[i]);
      const double beta = rho * y_hist[i].dot(q);
      q += (alpha[i] - beta) * s_hist[i];
    }
    Vector dir = -q;
    if (dir.dot(g) >= 0.0) {
      dir = -g;
      s_hist.clear();
      y_hist.clear();
    }
    double step = 1.0;
    Vector x_new(x.size()), g_new(x.size());
    double f_new = 0.0;
    bool accepted = false;
    for (int ls = 0; ls < 50; ++ls) {
      x_new = x + step * dir;
      f_new = f(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= fx + 1e-4 * step * g.dot(dir)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    const Vector s = x_new - x, yv = g_new - g;
    if (s.dot(yv) > 1e-12) {
      s_hist.push_back(s);
      y_hist.push_back(yv);
      if (static_cast<int>(s_hist.size()) > m) {
        s_hist.pop_front();
        y_hist.pop_front();
      }
    }
    x = std::move(x_new);
    g = std::move(g_new);
    fx = f_new;
  }
  return x;
}

}  // namespace

std::string to_string(ProbeKind kind) {
  switch (kind) {
    case ProbeKind::linear: return "linear";
    case ProbeKind::mlp2: return "mlp2";
    case ProbeKind::mlp3: return "mlp3";
  }
  return "linear";
}

ProbeKind probe_kind_from_string(const std::string& s) {
  if (s == "linear") return ProbeKind::linear;
  if (s == "mlp2") return ProbeKind::mlp2;
  if (s == "mlp3") return ProbeKind::mlp3;
  throw InvalidArgument("unknown probe '" + s + "' (expected linear|mlp2|mlp3)");
}

Matrix Probe::logits(const Matrix& Z) const {
  if (Z.cols() != mean_.size()) throw ShapeError("probe expects " + std::to_string(mean_.size()) + " inputs");
  Matrix h = (Z.rowwise() - mean_.transpose()).array().rowwise() / scale_.transpose().array();
  for (std::size_t l = 0; l < w_.size(); ++l) {
    h = (h * w_[l].transpose()).rowwise() + b_[l].transpose();
    if (l + 1 < w_.size()) h = h.cwiseMax(0.0);
  }
  return h;
}

Matrix Probe::proba(const Matrix& Z) const { return softmax_rows(logits(Z)); }

std::vector<int> Probe::predict(const Matrix& Z) const {
  const Matrix l = logits(Z);
  std::vector<int> out(static_cast<std::size_t>(l.rows()));
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    Eigen::Index arg;
    l.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

Container Probe::to_container() const {
  Container c(Json{{"kind", "probe"}, {"probe", to_string(kind_)}, {"n_classes", n_classes_}, {"layers", w_.size()}});
  c.add("mean", mean_.transpose());
  c.add("scale", scale_.transpose());
  for (std::size_t l = 0; l < w_.size(); ++l) {
    c.add("W_" + std::to_string(l), w_[l]);
    c.add("b_" + std::to_string(l), b_[l].transpose());
  }
  return c;
}

Probe Probe::from_container(const Container& c) {
  if (c.meta().value("kind", "") != "probe") throw FormatError("container is not a probe");
  Probe p;
  p.kind_ = probe_kind_from_string(c.meta().at("probe").get<std::string>());
  p.n_classes_ = c.meta().at("n_classes").get<int>();
  p.mean_ = c.block("mean").row(0).transpose();
  p.scale_ = c.block("scale").row(0).transpose();
  const auto layers = c.meta().at("layers").get<std::size_t>();
  for (std::size_t l = 0; l < layers; ++l) {
    p.w_.push_back(c.block("W_" + std::to_string(l)));
    p.b_.push_back(c.block("b_" + std::to_string(l)).row(0).transpose());
  }
  return p;
}

Probe fit_probe(const Matrix& Z, const std::vector<int>& y, int n_classes, ProbeKind kind, std::uint64_t seed,
                const ProbeConfig& cfg) {
  const auto n = Z.rows(), k = Z.cols();
  if (static_cast<Eigen::Index>(y.size()) != n) throw ShapeError("probe labels length mismatch");
  if (!Z.allFinite()) throw InvalidArgument("probe inputs contain non-finite values");
  std::set<int> distinct;
  for (int v : y) {
    if (v < 0 || v >= n_classes) throw InvalidArgument("probe label out of range");
    distinct.insert(v);
  }
  if (distinct.size() < 2) throw UndefinedTask("probe training data has fewer than two classes");

  Probe p;
  p.kind_ = kind;
  p.n_classes_ = n_classes;
  p.mean_ = Z.colwise().mean().transpose();
  p.scale_ = ((Z.rowwise() - p.mean_.transpose()).cwiseAbs2().colwise().mean()).cwiseSqrt().transpose();
  for (Eigen::Index j = 0; j < k; ++j)
    if (!(p.scale_(j) > 1e-12)) p.scale_(j) = 1.0;
  const Matrix X = (Z.rowwise() - p.mean_.transpose()).array().rowwise() / p.scale_.transpose().array();

  if (kind == ProbeKind::linear) {
    const auto C = n_classes;
    auto f = [&](const Vector& theta, Vector& grad) {
      const Eigen::Map<const Matrix> W(theta.data(), C, k);
      const Eigen::Map<const Vector> b(theta.data() + C * k, C);
      Matrix dlogits;
      const double ce = cross_entropy((X * W.transpose()).rowwise() + b.transpose(), y, &dlogits);
      Eigen::Map<Matrix> gW(grad.data(), C, k);
      gW = dlogits.transpose() * X + cfg.l2 * W;
      grad.segment(C * k, C) = dlogits.colwise().sum().transpose();
      return ce + 0.5 * cfg.l2 * W.squaredNorm();
    };
    const Vector theta = lbfgs(f, Vector::Zero(C * k + C), cfg.tol, cfg.max_iter);
    p.w_.push_back(Eigen::Map<const Matrix>(theta.data(), C, k));
    p.b_.push_back(theta.segment(C * k, C));
    return p;
  }

  std::vector<int> sizes{static_cast<int>(k)};
  if (kind == ProbeKind::mlp2) sizes.push_back(64);
  else sizes.insert(sizes.end(), {128, 64});
  sizes.push_back(n_classes);
  Rng rng = make_rng(seed, 0);
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / sizes[l]));
    Matrix w(sizes[l + 1], sizes[l]);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = nd(rng);
    p.w_.push_back(std::move(w));
    p.b_.push_back(Vector::Zero(sizes[l + 1]));
  }
  const std::size_t L = p.w_.size();
  std::vector<Matrix> mw(L), vw(L);
  std::vector<Vector> mb(L), vb(L);
  for (std::size_t l = 0; l < L; ++l) {
    mw[l] = vw[l] = Matrix::Zero(p.w_[l].rows(), p.w_[l].cols());
    mb[l] = vb[l] = Vector::Zero(p.b_[l].size());
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  IndexList order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double keep = 1.0 - cfg.dropout;
  int t = 0;
  const int batch = std::max(1, std::min<int>(cfg.batch, static_cast<int>(n)));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int start = 0; start < n; start += batch) {
      const int m = std::min<int>(batch, static_cast<int>(n) - start);
      Matrix h(m, k);
      std::vector<int> yb(static_cast<std::size_t>(m));
      for (int r = 0; r < m; ++r) {
        h.row(r) = X.row(order[static_cast<std::size_t>(start + r)]);
        yb[static_cast<std::size_t>(r)] = y[static_cast<std::size_t>(order[static_cast<std::size_t>(start + r)])];
      }
      std::vector<Matrix> acts{h}, masks;
      for (std::size_t l = 0; l < L; ++l) {
        Matrix a = (acts.back() * p.w_[l].transpose()).rowwise() + p.b_[l].transpose();
        if (l + 1 < L) {
          Matrix mask(a.rows(), a.cols());
          for (Eigen::Index j = 0; j < mask.cols(); ++j)
            for (Eigen::Index i = 0; i < mask.rows(); ++i) mask(i, j) = a(i, j) > 0.0 && unif(rng) < keep ? 1.0 / keep : 0.0;
          a = a.cwiseProduct(mask);
          masks.push_back(std::move(mask));
        }
        acts.push_back(std::move(a));
      }
      Matrix delta;
      cross_entropy(acts.back(), yb, &delta);
      ++t;
      const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
      for (std::size_t l = L; l-- > 0;) {
        const Matrix gw = delta.transpose() * acts[l];
        const Vector gb = delta.colwise().sum().transpose();
        if (l > 0) delta = (delta * p.w_[l]).cwiseProduct(masks[l - 1]);
        mw[l] = b1 * mw[l] + (1 - b1) * gw;
        vw[l] = b2 * vw[l] + (1 - b2) * gw.cwiseAbs2();
        mb[l] = b1 * mb[l] + (1 - b1) * gb;
        vb[l] = b2 * vb[l] + (1 - b2) * gb.cwiseAbs2();
        p.w_[l].array() -= cfg.learning_rate * (mw[l].array() / c1) / ((vw[l].array() / c2).sqrt() + eps);
        p.b_[l].array() -= cfg.learning_rate * (mb[l].array() / c1) / ((vb[l].array() / c2).sqrt() + eps);
      }
    }
  }
  return p;
}

}  // namespace forge
