#pragma once

// Partlet-to-part matching: cost construction, log-domain Sinkhorn transport,
// thresholded hardening, exact shortest-augmenting-path assignment and an
// exhaustive oracle.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "alignparts/numerics.hpp"

namespace alignparts {

inline constexpr double kNullCost = 1.5;
inline constexpr double kDiceSmoothing = 1e-6;
inline constexpr int kNull = -1;

enum class CostKind { training, inference };

struct CostMatrix {
  Matrix c;  // K x A
  CostKind kind = CostKind::inference;

  Eigen::Index partlets() const { return c.rows(); }
  Eigen::Index parts() const { return c.cols(); }
};

// pi[k] is a part index or kNull. Non-null values are distinct.
using Assignment = std::vector<int>;

struct TransportPlan {
  Matrix p;                // K x K; columns >= real_columns are null columns
  Eigen::Index real_columns = 0;
  bool converged = false;
  int iterations = 0;
  double max_violation = 0.0;
};

struct SinkhornConfig {
  double epsilon = 0.05;
  int max_iters = 200;
  double tol = 1e-6;
  double null_cost = kNullCost;
};

inline double soft_dice(const RowVector& probs, const RowVector& target, double smoothing = kDiceSmoothing) {
  const double inter = probs.cwiseProduct(target).sum();
  return (2.0 * inter + smoothing) / (probs.sum() + target.sum() + smoothing);
}

// C_ka = (1 - Dice(p_k, g_a)) + (1 - cos(z_k, t_a)).
inline CostMatrix training_cost(const Matrix& mask_probs, const Matrix& gt_masks, const Matrix& z_hat,
                                const Matrix& t_hat) {
  const Eigen::Index k = mask_probs.rows();
  const Eigen::Index a = gt_masks.rows();
  if (a > k) fail(ErrorKind::invalid_argument, "training_cost: more parts than partlets");
  require(mask_probs.cols() == gt_masks.cols(), "training_cost: mask point counts differ");
  require(z_hat.rows() == k && t_hat.rows() == a && z_hat.cols() == t_hat.cols(),
          "training_cost: embedding shape mismatch");
  CostMatrix out{Matrix(k, a), CostKind::training};
  const Matrix sim = linear(z_hat, t_hat);
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < a; ++j)
      out.c(i, j) = (1.0 - soft_dice(mask_probs.row(i), gt_masks.row(j))) + (1.0 - std::clamp(sim(i, j), -1.0, 1.0));
  return out;
}

inline CostMatrix inference_cost(const Matrix& z_hat, const Matrix& t_hat) {
  require(z_hat.cols() == t_hat.cols(), "inference_cost: embedding dimension mismatch");
  const Matrix sim = linear(z_hat, t_hat);
  return {(1.0 - sim.array().cwiseMax(-1.0).cwiseMin(1.0)).matrix(), CostKind::inference};
}

namespace detail {

inline double log_sum_exp(const double* v, Eigen::Index n, Eigen::Index stride) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) mx = std::max(mx, v[i * stride]);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) s += std::exp(v[i * stride] - mx);
  return mx + std::log(s);
}

}  // namespace detail

// Balanced entropic transport on the K x K null-padded cost with uniform
// marginals 1/K, iterated in the log domain.
inline TransportPlan sinkhorn(const CostMatrix& cost, const SinkhornConfig& cfg = {}) {
  if (!(cfg.epsilon > 0.0)) fail(ErrorKind::invalid_argument, "sinkhorn: epsilon must be positive");
  require(cfg.max_iters >= 1, "sinkhorn: max_iters must be positive");
  const Eigen::Index k = cost.partlets();
  const Eigen::Index a = cost.parts();
  require(k >= 1, "sinkhorn: empty cost matrix");
  if (a > k) fail(ErrorKind::invalid_argument, "sinkhorn: more parts than partlets");
  if (!cost.c.allFinite()) fail(ErrorKind::numeric, "sinkhorn: non-finite cost");

  Matrix kernel(k, k);  // -c / eps
  kernel.leftCols(a) = -cost.c / cfg.epsilon;
  kernel.rightCols(k - a).setConstant(-cfg.null_cost / cfg.epsilon);
  const double log_marginal = -std::log(static_cast<double>(k));
  const double target = 1.0 / static_cast<double>(k);

  Vector f = Vector::Zero(k);
  Vector g = Vector::Zero(k);
  Matrix work(k, k);
  TransportPlan out;
  out.real_columns = a;
  for (int it = 1; it <= cfg.max_iters; ++it) {
    work = kernel.colwise() + f;
    for (Eigen::Index j = 0; j < k; ++j) g(j) = log_marginal - detail::log_sum_exp(&work(0, j), k, k);
    work = kernel.rowwise() + g.transpose();
    for (Eigen::Index i = 0; i < k; ++i) f(i) = log_marginal - detail::log_sum_exp(&work(i, 0), k, 1);
    // Rows are exact after the f update; columns carry the residual.
    out.p = ((kernel.colwise() + f).rowwise() + g.transpose()).array().exp().matrix();
    out.iterations = it;
    out.max_violation = (out.p.colwise().sum().array() - target).abs().maxCoeff();
    if (out.max_violation < cfg.tol) {
      out.converged = true;
      break;
    }
  }
  return out;
}

// Row-wise argmax over all columns; real-column winners above 1/(2K) are
// kept, and column collisions go to the row with the larger mass.
inline Assignment harden(const TransportPlan& plan) {
  const Eigen::Index k = plan.p.rows();
  const double threshold = 1.0 / (2.0 * static_cast<double>(k));
  Assignment pi(static_cast<std::size_t>(k), kNull);
  std::vector<int> owner(static_cast<std::size_t>(plan.real_columns), kNull);
  for (Eigen::Index i = 0; i < k; ++i) {
    Eigen::Index best = 0;
    plan.p.row(i).maxCoeff(&best);
    if (best >= plan.real_columns || !(plan.p(i, best) > threshold)) continue;
    int& cur = owner[static_cast<std::size_t>(best)];
    if (cur == kNull || plan.p(i, best) > plan.p(cur, best)) cur = static_cast<int>(i);
  }
  for (std::size_t j = 0; j < owner.size(); ++j)
    if (owner[j] != kNull) pi[static_cast<std::size_t>(owner[j])] = static_cast<int>(j);
  return pi;
}

inline double assignment_cost(const CostMatrix& cost, const Assignment& pi, double null_cost = kNullCost) {
  require(static_cast<Eigen::Index>(pi.size()) == cost.partlets(), "assignment_cost: size mismatch");
  double total = 0.0;
  for (std::size_t k = 0; k < pi.size(); ++k)
    total += pi[k] == kNull ? null_cost : cost.c(static_cast<Eigen::Index>(k), pi[k]);
  return total;
}

inline bool is_injective(const Assignment& pi, Eigen::Index parts) {
  std::vector<char> used(static_cast<std::size_t>(parts), 0);
  for (int a : pi) {
    if (a == kNull) continue;
    if (a < 0 || a >= parts || used[static_cast<std::size_t>(a)]) return false;
    used[static_cast<std::size_t>(a)] = 1;
  }
  return true;
}

// Exact minimum-cost injective partial assignment. Every partlet gets its own
// null column at null_cost, so the solve runs on K x (A + K) with
// shortest augmenting paths and dual potentials (Jonker-Volgenant).
inline Assignment jv_assign(const CostMatrix& cost, double null_cost = kNullCost) {
  const Eigen::Index n = cost.partlets();
  const Eigen::Index a = cost.parts();
  if (!cost.c.allFinite() || !std::isfinite(null_cost)) fail(ErrorKind::numeric, "jv_assign: non-finite cost");
  Assignment pi(static_cast<std::size_t>(n), kNull);
  if (n == 0) return pi;
  const Eigen::Index m = a + n;
  auto at = [&](Eigen::Index i, Eigen::Index j) { return j < a ? cost.c(i, j) : null_cost; };

  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based rows/columns; column 0 is the virtual root.
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(m + 1), 0.0);
  std::vector<Eigen::Index> row_of(static_cast<std::size_t>(m + 1), 0), way(static_cast<std::size_t>(m + 1), 0);
  std::vector<double> minv(static_cast<std::size_t>(m + 1));
  std::vector<char> used(static_cast<std::size_t>(m + 1));
  for (Eigen::Index i = 1; i <= n; ++i) {
    row_of[0] = i;
    Eigen::Index j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const Eigen::Index i0 = row_of[static_cast<std::size_t>(j0)];
      double delta = inf;
      Eigen::Index j1 = 0;
      for (Eigen::Index j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = at(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (Eigen::Index j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(row_of[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (row_of[static_cast<std::size_t>(j0)] != 0);
    do {
      const Eigen::Index j1 = way[static_cast<std::size_t>(j0)];
      row_of[static_cast<std::size_t>(j0)] = row_of[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  for (Eigen::Index j = 1; j <= a; ++j) {
    const Eigen::Index r = row_of[static_cast<std::size_t>(j)];
    if (r != 0) pi[static_cast<std::size_t>(r - 1)] = static_cast<int>(j - 1);
  }
  return pi;
}

inline constexpr Eigen::Index kBruteForceLimit = 9;

// Exhaustive search over injective partial assignments.
inline Assignment brute_force_assign(const CostMatrix& cost, double null_cost = kNullCost) {
  const Eigen::Index k = cost.partlets();
  const Eigen::Index a = cost.parts();
  if (std::max(k, a) > kBruteForceLimit) fail(ErrorKind::invalid_argument, "brute_force_assign: problem too large");
  Assignment cur(static_cast<std::size_t>(k), kNull), best = cur;
  double best_cost = std::numeric_limits<double>::infinity();
  std::vector<char> used(static_cast<std::size_t>(a), 0);
  // Suffix sums of per-row lower bounds prune the search.
  std::vector<double> bound(static_cast<std::size_t>(k + 1), 0.0);
  for (Eigen::Index r = k - 1; r >= 0; --r) {
    const double row_min = a > 0 ? std::min(null_cost, cost.c.row(r).minCoeff()) : null_cost;
    bound[static_cast<std::size_t>(r)] = bound[static_cast<std::size_t>(r + 1)] + row_min;
  }
  auto rec = [&](auto&& self, Eigen::Index row, double acc) -> void {
    if (acc + bound[static_cast<std::size_t>(row)] >= best_cost) return;
    if (row == k) {
      if (acc < best_cost) {
        best_cost = acc;
        best = cur;
      }
      return;
    }
    cur[static_cast<std::size_t>(row)] = kNull;
    self(self, row + 1, acc + null_cost);
    for (Eigen::Index j = 0; j < a; ++j) {
      if (used[static_cast<std::size_t>(j)]) continue;
      used[static_cast<std::size_t>(j)] = 1;
      cur[static_cast<std::size_t>(row)] = static_cast<int>(j);
      self(self, row + 1, acc + cost.c(row, j));
      used[static_cast<std::size_t>(j)] = 0;
    }
    cur[static_cast<std::size_t>(row)] = kNull;
  };
  rec(rec, 0, 0.0);
  return best;
}

}  // namespace alignparts
