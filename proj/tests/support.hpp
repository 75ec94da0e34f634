#pragma once

// Shared fixtures for the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>

#include "alignparts/inference.hpp"
#include "alignparts/losses.hpp"
#include "alignparts/metrics.hpp"

namespace alignparts::testing {

// ||a - b|| / max(||b||, floor)
inline double relative_error(const Vector& a, const Vector& b, double floor = 1e-8) {
  return (a - b).norm() / std::max(b.norm(), floor);
}

// Random injective partial assignment of k partlets onto a parts.
inline Assignment random_assignment(Rng& rng, Eigen::Index k, Eigen::Index a, bool ensure_match = true) {
  std::vector<int> parts(static_cast<std::size_t>(a));
  for (int j = 0; j < a; ++j) parts[static_cast<std::size_t>(j)] = j;
  rng.shuffle(parts);
  std::vector<std::size_t> rows = identity_permutation(static_cast<std::size_t>(k));
  rng.shuffle(rows);
  Assignment pi(static_cast<std::size_t>(k), kNull);
  const std::size_t used = std::min(rows.size(), parts.size());
  for (std::size_t i = 0; i < used; ++i) {
    if (!ensure_match || i > 0) {
      if (rng.uniform() < 0.3) continue;
    }
    pi[rows[i]] = parts[i];
  }
  return pi;
}

inline Matrix random_binary(Rng& rng, Eigen::Index rows, Eigen::Index cols, double p = 0.5) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < p ? 1.0 : 0.0;
  return m;
}

struct LossInstance {
  Matrix logits;
  Matrix gt;
  Matrix z;
  Matrix t_hat;
  Vector partness;
  Assignment pi;
};

inline LossInstance random_loss_instance(Rng& rng) {
  const Eigen::Index k = 2 + static_cast<Eigen::Index>(rng.index(5));
  const Eigen::Index a = 1 + static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(k)));
  const Eigen::Index n = 5 + static_cast<Eigen::Index>(rng.index(20));
  const Eigen::Index d = 3 + static_cast<Eigen::Index>(rng.index(6));
  LossInstance s;
  s.logits = rng.gaussian(k, n, 2.0);
  s.gt = random_binary(rng, a, n);
  s.z = rng.gaussian(k, d);
  s.t_hat = normalize_rows(rng.gaussian(a, d));
  s.partness = rng.gaussian_vector(k, 2.0);
  s.pi = random_assignment(rng, k, a);
  return s;
}

// Analytic vs central-difference gradient for a loss of a matrix argument.
template <class F>
double matrix_gradient_error(const Matrix& x, F&& loss) {
  const Matrix analytic = loss(x).grad;
  const Vector fd = fd_gradient([&](const Vector& v) { return loss(unflatten(v, x.rows(), x.cols())).value; },
                                flatten(x));
  return relative_error(flatten(analytic), fd);
}

// Synthetic shape: N points in A contiguous equal parts, distinct unit text
// embeddings, and K randomly initialized free partlets.
struct ToyProblem {
  Matrix gt;  // A x N
  TextBank texts;
  ToyParams init;
  Segmentation truth;
};

inline ToyProblem make_toy_problem(std::uint64_t seed, Eigen::Index n = 200, Eigen::Index k = 8, Eigen::Index d = 64) {
  static const std::vector<std::string> names{"seat", "back", "leg", "arm"};
  const Eigen::Index a = static_cast<Eigen::Index>(names.size());
  Rng rng(seed);
  ToyProblem p;
  p.gt = Matrix::Zero(a, n);
  for (Eigen::Index i = 0; i < n; ++i) p.gt(i * a / n, i) = 1.0;
  p.texts.labels = names;
  p.texts.embeddings = normalize_rows(rng.gaussian(a, d));
  p.init = {rng.gaussian(k, n, 0.1), rng.gaussian(k, d), Vector::Zero(k)};
  for (Eigen::Index part = 0; part < a; ++part) {
    PointSet pts;
    for (Eigen::Index i = 0; i < n; ++i)
      if (p.gt(part, i) > 0) pts.push_back(static_cast<std::int32_t>(i));
    p.truth.push_back({names[static_cast<std::size_t>(part)], pts});
  }
  return p;
}

struct ToyOutcome {
  std::size_t active = 0;
  double la = 0.0;
};

// Names active partlets by exact assignment and scores LA-mIoU.
inline ToyOutcome evaluate_toy(const ToyProblem& p, const ToyParams& params) {
  const PartletSet set{params.z, params.mask_logits, params.partness};
  std::map<std::string, TextBank> vocab{{"toy", p.texts}};
  TextBank classes{{"toy"}, Matrix::Ones(1, 1)};
  std::vector<std::pair<std::string, Vector>> samples;
  for (Eigen::Index r = 0; r < p.texts.size(); ++r) {
    samples.emplace_back(p.texts.labels[static_cast<std::size_t>(r)], p.texts.embeddings.row(r).transpose());
    samples.emplace_back(p.texts.labels[static_cast<std::size_t>(r)], p.texts.embeddings.row(r).transpose());
  }
  const ClassStats stats = estimate_class_stats(samples);
  const InferenceResult res = mode1_closed(set, Vector::Ones(1), classes, vocab, stats);
  return {res.active.size(), la_miou(p.truth, segments_from_labels(res.point_labels))};
}

}  // namespace alignparts::testing
