#pragma once

// Training losses over matched partlets with analytic input gradients, the
// weighted objective, and a direct-optimization toy driver.

#include <cmath>
#include <functional>
#include <vector>

#include "alignparts/matching.hpp"
#include "alignparts/numerics.hpp"

namespace alignparts {

template <class G>
struct Loss {
  double value = 0.0;
  G grad;
};

struct LossWeights {
  double mask = 1.0;
  double part = 0.5;
  double text = 1.0;
  double cov = 0.5;
  double overlap = 0.1;
  double global = 1.0;

  void validate() const {
    require(mask >= 0 && part >= 0 && text >= 0 && cov >= 0 && overlap >= 0 && global >= 0,
            "LossWeights: weights must be nonnegative");
  }
};

struct LossTerms {
  double mask = 0.0;
  double part = 0.0;
  double text = 0.0;
  double cov = 0.0;
  double overlap = 0.0;
  double global = 0.0;
};

inline double total_loss(const LossTerms& t, const LossWeights& w = {}) {
  return w.mask * t.mask + w.part * t.part + w.text * t.text + w.cov * t.cov + w.overlap * t.overlap +
         w.global * t.global;
}

inline std::vector<Eigen::Index> matched_set(const Assignment& pi) {
  std::vector<Eigen::Index> m;
  for (std::size_t k = 0; k < pi.size(); ++k)
    if (pi[k] != kNull) m.push_back(static_cast<Eigen::Index>(k));
  return m;
}

namespace detail {

inline Matrix sigmoid(const Matrix& m) {
  return m.unaryExpr([](double x) { return alignparts::sigmoid(x); });
}

// Pulls a gradient taken w.r.t. unit rows back through row normalization.
inline Matrix normalize_backward(const Matrix& raw, const Matrix& grad_unit) {
  Matrix g(raw.rows(), raw.cols());
  for (Eigen::Index r = 0; r < raw.rows(); ++r) {
    const double n = raw.row(r).norm();
    const RowVector u = raw.row(r) / n;
    g.row(r) = (grad_unit.row(r) - grad_unit.row(r).dot(u) * u) / n;
  }
  return g;
}

// Per-row -log softmax(logits)[target] and its gradient w.r.t. logits.
inline double cross_entropy_row(const RowVector& logits, Eigen::Index target, RowVector& grad) {
  const double mx = logits.maxCoeff();
  const RowVector e = (logits.array() - mx).exp().matrix();
  const double s = e.sum();
  grad = e / s;
  grad(target) -= 1.0;
  return -(logits(target) - mx - std::log(s));
}

inline void check_assignment(const Assignment& pi, Eigen::Index partlets, Eigen::Index parts) {
  require(static_cast<Eigen::Index>(pi.size()) == partlets, "loss: assignment size must equal partlet count");
  require(is_injective(pi, parts), "loss: assignment must be injective and in range");
}

}  // namespace detail

// Gradient is w.r.t. the raw (pre-normalization) partlet embeddings z.
inline Loss<Matrix> text_infonce(const Matrix& z, const Matrix& t_hat, const Assignment& pi,
                                 double tau = kTemperature) {
  require(tau > 0, "text_infonce: tau must be positive");
  require(z.cols() == t_hat.cols(), "text_infonce: embedding dimension mismatch");
  detail::check_assignment(pi, z.rows(), t_hat.rows());
  Loss<Matrix> out{0.0, Matrix::Zero(z.rows(), z.cols())};
  const auto m = matched_set(pi);
  if (m.empty()) return out;
  const Matrix z_hat = normalize_rows(z);
  const double inv = 1.0 / static_cast<double>(m.size());
  Matrix grad_unit = Matrix::Zero(z.rows(), z.cols());
  RowVector g;
  for (Eigen::Index k : m) {
    const RowVector logits = (t_hat * z_hat.row(k).transpose()).transpose() / tau;
    out.value += inv * detail::cross_entropy_row(logits, pi[static_cast<std::size_t>(k)], g);
    grad_unit.row(k) = inv / tau * (g * t_hat);
  }
  out.grad = detail::normalize_backward(z, grad_unit);
  return out;
}

// Mean over matched partlets of BCE (mean over points) plus 1 - soft Dice.
inline Loss<Matrix> mask_loss(const Matrix& logits, const Matrix& gt, const Assignment& pi,
                              double smoothing = kDiceSmoothing) {
  require(logits.cols() == gt.cols(), "mask_loss: point counts differ");
  detail::check_assignment(pi, logits.rows(), gt.rows());
  Loss<Matrix> out{0.0, Matrix::Zero(logits.rows(), logits.cols())};
  const auto m = matched_set(pi);
  if (m.empty()) return out;
  const double n = static_cast<double>(logits.cols());
  const double inv = 1.0 / static_cast<double>(m.size());
  for (Eigen::Index k : m) {
    const auto y = gt.row(pi[static_cast<std::size_t>(k)]);
    double bce = 0.0, inter = 0.0, psum = 0.0;
    RowVector p(logits.cols());
    for (Eigen::Index i = 0; i < logits.cols(); ++i) {
      const double x = logits(k, i);
      bce += softplus(x) - y(i) * x;
      p(i) = sigmoid(x);
      inter += p(i) * y(i);
      psum += p(i);
    }
    const double denom = psum + y.sum() + smoothing;
    const double dice = (2.0 * inter + smoothing) / denom;
    out.value += inv * (bce / n + 1.0 - dice);
    for (Eigen::Index i = 0; i < logits.cols(); ++i) {
      const double ddice_dp = (2.0 * y(i) * denom - (2.0 * inter + smoothing)) / (denom * denom);
      out.grad(k, i) = inv * ((p(i) - y(i)) / n - ddice_dp * p(i) * (1.0 - p(i)));
    }
  }
  return out;
}

// Mean over all partlets of BCE(partness, matched indicator).
inline Loss<Vector> partness_loss(const Vector& logits, const Assignment& pi) {
  require(static_cast<Eigen::Index>(pi.size()) == logits.size(), "partness_loss: size mismatch");
  require(logits.size() > 0, "partness_loss: no partlets");
  Loss<Vector> out{0.0, Vector(logits.size())};
  const double inv = 1.0 / static_cast<double>(logits.size());
  for (Eigen::Index k = 0; k < logits.size(); ++k) {
    const double y = pi[static_cast<std::size_t>(k)] != kNull ? 1.0 : 0.0;
    out.value += inv * (softplus(logits(k)) - y * logits(k));
    out.grad(k) = inv * (sigmoid(logits(k)) - y);
  }
  return out;
}

// Mean over matched partlets of |sum sigma(m_k) - sum gt| / N; sign(0) = 0.
inline Loss<Matrix> coverage_loss(const Matrix& logits, const Matrix& gt, const Assignment& pi) {
  require(logits.cols() == gt.cols(), "coverage_loss: point counts differ");
  detail::check_assignment(pi, logits.rows(), gt.rows());
  Loss<Matrix> out{0.0, Matrix::Zero(logits.rows(), logits.cols())};
  const auto m = matched_set(pi);
  if (m.empty() || logits.cols() == 0) return out;
  const double n = static_cast<double>(logits.cols());
  const double inv = 1.0 / static_cast<double>(m.size());
  for (Eigen::Index k : m) {
    const RowVector p = detail::sigmoid(logits.row(k));
    const double diff = p.sum() - gt.row(pi[static_cast<std::size_t>(k)]).sum();
    out.value += inv * std::abs(diff) / n;
    const double sign = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
    out.grad.row(k) = (inv * sign / n) * p.cwiseProduct((1.0 - p.array()).matrix());
  }
  return out;
}

// Mean over points of (sum_k sigma(m_ki) - 1)^2.
inline Loss<Matrix> overlap_loss(const Matrix& logits) {
  Loss<Matrix> out{0.0, Matrix::Zero(logits.rows(), logits.cols())};
  if (logits.cols() == 0) return out;
  const double n = static_cast<double>(logits.cols());
  const Matrix p = detail::sigmoid(logits);
  const RowVector excess = p.colwise().sum().array() - 1.0;
  out.value = excess.squaredNorm() / n;
  for (Eigen::Index k = 0; k < logits.rows(); ++k)
    for (Eigen::Index i = 0; i < logits.cols(); ++i)
      out.grad(k, i) = 2.0 * excess(i) * p(k, i) * (1.0 - p(k, i)) / n;
  return out;
}

// Symmetric InfoNCE between paired rows; gradient w.r.t. raw z rows.
inline Loss<Matrix> global_infonce(const Matrix& z, const Matrix& t_class, double tau = kTemperature) {
  require(tau > 0, "global_infonce: tau must be positive");
  require(z.rows() >= 1 && z.rows() == t_class.rows() && z.cols() == t_class.cols(),
          "global_infonce: batches must be paired and nonempty");
  const Eigen::Index b = z.rows();
  const Matrix z_hat = normalize_rows(z);
  const Matrix t_hat = normalize_rows(t_class);
  const Matrix s = z_hat * t_hat.transpose() / tau;
  Matrix gs = Matrix::Zero(b, b);
  double value = 0.0;
  RowVector g;
  const double half_inv = 0.5 / static_cast<double>(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    value += half_inv * detail::cross_entropy_row(s.row(i), i, g);
    gs.row(i) += half_inv * g;
    value += half_inv * detail::cross_entropy_row(s.col(i).transpose(), i, g);
    gs.col(i) += half_inv * g.transpose();
  }
  return {value, detail::normalize_backward(z, gs * t_hat / tau)};
}

// Free parameters optimized directly by descend_toy.
struct ToyParams {
  Matrix mask_logits;  // K x N
  Matrix z;            // K x d_t
  Vector partness;     // K
};

struct ToyConfig {
  LossWeights weights;
  int steps = 2000;
  double lr = 1.0;
  int rematch_every = 10;
  SinkhornConfig sinkhorn{0.01, 1000, 1e-6, kNullCost};
  double tau = kTemperature;
};

struct ToyTrajectory {
  std::vector<double> loss;
  std::vector<LossTerms> terms;
  Assignment final_assignment;
  ToyParams params;
  bool diverged = false;
  int rematches = 0;
};

// Matches with sinkhorn + harden on the current predictions.
inline Assignment toy_match(const ToyParams& p, const Matrix& gt, const Matrix& t_hat, const SinkhornConfig& cfg) {
  const CostMatrix c = training_cost(detail::sigmoid(p.mask_logits), gt, normalize_rows(p.z), t_hat);
  return harden(sinkhorn(c, cfg));
}

// Plain gradient descent on the weighted objective over free mask logits,
// embeddings and partness logits. The global term has no free parameters
// here and stays 0. Stops early and flags divergence on a non-finite loss.
inline ToyTrajectory descend_toy(ToyParams params, const Matrix& gt, const Matrix& t_hat, const ToyConfig& cfg,
                                 const std::function<void(int, double)>& on_step = {}) {
  cfg.weights.validate();
  require(cfg.rematch_every >= 1 && cfg.steps >= 0 && cfg.lr > 0, "descend_toy: invalid config");
  require(params.mask_logits.rows() == params.z.rows() && params.z.rows() == params.partness.size(),
          "descend_toy: parameter partlet counts differ");
  ToyTrajectory out;
  Assignment pi;
  for (int step = 0; step < cfg.steps; ++step) {
    if (step % cfg.rematch_every == 0) {
      pi = toy_match(params, gt, t_hat, cfg.sinkhorn);
      ++out.rematches;
    }
    const auto text = text_infonce(params.z, t_hat, pi, cfg.tau);
    const auto mask = mask_loss(params.mask_logits, gt, pi);
    const auto part = partness_loss(params.partness, pi);
    const auto cov = coverage_loss(params.mask_logits, gt, pi);
    const auto ov = overlap_loss(params.mask_logits);
    const LossTerms terms{mask.value, part.value, text.value, cov.value, ov.value, 0.0};
    const double l = total_loss(terms, cfg.weights);
    if (!std::isfinite(l)) {
      out.diverged = true;
      break;
    }
    out.loss.push_back(l);
    out.terms.push_back(terms);
    if (on_step) on_step(step, l);
    const LossWeights& w = cfg.weights;
    params.mask_logits -= cfg.lr * (w.mask * mask.grad + w.cov * cov.grad + w.overlap * ov.grad);
    params.z -= cfg.lr * w.text * text.grad;
    params.partness -= cfg.lr * w.part * part.grad;
  }
  out.final_assignment = toy_match(params, gt, t_hat, cfg.sinkhorn);
  out.params = std::move(params);
  return out;
}

}  // namespace alignparts
