#pragma once

// Inference: category prediction, closed- and open-vocabulary naming,
// text-conditioned retrieval, confidence calibration, point labels and the
// saliency / k-means ablation modes.

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>

#include "alignparts/matching.hpp"
#include "alignparts/numerics.hpp"
#include "alignparts/partlets.hpp"

namespace alignparts {

inline constexpr double kMahaEpsilon = 1e-4;
inline constexpr double kFusedAlpha = 0.5;
inline constexpr double kFusedBeta = 1.0;
inline constexpr double kAutoAcceptMaha = 0.8;
inline constexpr double kLowConfidence = 0.5;

// Labels with row-aligned unit embeddings.
struct TextBank {
  std::vector<std::string> labels;
  Matrix embeddings;

  Eigen::Index size() const { return static_cast<Eigen::Index>(labels.size()); }
  void validate() const {
    require(static_cast<Eigen::Index>(labels.size()) == embeddings.rows(), "TextBank: label/embedding count mismatch");
  }
};

struct ClassStats {
  std::map<std::string, Vector> means;
  Matrix cov_inv;
  double epsilon = kMahaEpsilon;
  Eigen::Index dim() const { return cov_inv.rows(); }
};

enum class Route { auto_accept, review, low_confidence };

inline const char* route_name(Route r) {
  switch (r) {
    case Route::auto_accept: return "AUTO_ACCEPT";
    case Route::low_confidence: return "LOW_CONFIDENCE";
    case Route::review: break;
  }
  return "REVIEW";
}

struct PartletPrediction {
  Eigen::Index partlet = 0;
  std::optional<std::string> label;
  double conf_soft = 0.0;
  double conf_maha = 0.0;
  double conf_fused = 0.0;
  Route route = Route::review;
};

struct InferenceResult {
  std::string category;
  std::vector<Eigen::Index> active;
  std::vector<PartletPrediction> partlets;  // one per active partlet
  std::vector<std::optional<std::string>> point_labels;
};

// Unit-normalized projection of the mean-pooled fused point features.
inline Vector z_global_from_fused(const Matrix& fused, const Matrix& projection) {
  require(fused.rows() >= 1, "z_global_from_fused: no points");
  require(projection.cols() == fused.cols(), "z_global_from_fused: projection shape mismatch");
  const Vector pooled = fused.colwise().mean().transpose();
  return unit(projection * pooled);
}

namespace detail {

// argmax cosine over bank rows; ties go to the lexicographically smaller label.
inline Eigen::Index best_match(const Vector& query, const TextBank& bank) {
  const Vector sims = bank.embeddings * unit(query);
  Eigen::Index best = 0;
  for (Eigen::Index a = 1; a < bank.size(); ++a) {
    const double s = sims(a) / bank.embeddings.row(a).norm();
    const double b = sims(best) / bank.embeddings.row(best).norm();
    if (s > b || (s == b && bank.labels[static_cast<std::size_t>(a)] < bank.labels[static_cast<std::size_t>(best)]))
      best = a;
  }
  return best;
}

}  // namespace detail

inline std::string predict_category(const Vector& z_global, const TextBank& classes) {
  classes.validate();
  if (classes.size() == 0) fail(ErrorKind::invalid_argument, "predict_category: empty class list");
  return classes.labels[static_cast<std::size_t>(detail::best_match(z_global, classes))];
}

// Indices with sigma(logit) > 0.5, i.e. logit > 0.
inline std::vector<Eigen::Index> filter_active(const Vector& partness_logits) {
  std::vector<Eigen::Index> out;
  for (Eigen::Index k = 0; k < partness_logits.size(); ++k)
    if (partness_logits(k) > 0.0) out.push_back(k);
  return out;
}

// Per-label means and one pooled, per-label-centered covariance plus eps*I.
inline ClassStats estimate_class_stats(const std::vector<std::pair<std::string, Vector>>& samples,
                                       double epsilon = kMahaEpsilon) {
  require(samples.size() >= 2, "estimate_class_stats: need at least two samples");
  require(epsilon > 0.0, "estimate_class_stats: epsilon must be positive");
  const Eigen::Index d = samples.front().second.size();
  std::map<std::string, std::pair<Vector, double>> sums;
  for (const auto& [label, z] : samples) {
    require(z.size() == d, "estimate_class_stats: inconsistent embedding dimension");
    auto [it, fresh] = sums.try_emplace(label, Vector::Zero(d), 0.0);
    it->second.first += z;
    it->second.second += 1.0;
  }
  ClassStats stats;
  stats.epsilon = epsilon;
  for (auto& [label, acc] : sums) stats.means[label] = acc.first / acc.second;
  Matrix centered(static_cast<Eigen::Index>(samples.size()), d);
  for (std::size_t i = 0; i < samples.size(); ++i)
    centered.row(static_cast<Eigen::Index>(i)) = (samples[i].second - stats.means[samples[i].first]).transpose();
  Matrix cov = centered.transpose() * centered / static_cast<double>(samples.size());
  cov.diagonal().array() += epsilon;
  const Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success) fail(ErrorKind::numeric, "estimate_class_stats: covariance is not positive definite");
  Matrix inv = llt.solve(Matrix::Identity(d, d));
  stats.cov_inv = 0.5 * (inv + inv.transpose());
  return stats;
}

inline double mahalanobis_sq(const Vector& z, const Vector& mean, const Matrix& cov_inv) {
  const Vector diff = z - mean;
  return std::max(0.0, diff.dot(cov_inv * diff));
}

// exp(-d^2) with d the Mahalanobis distance to the label mean.
inline double maha_conf(const Vector& z, const std::string& label, const ClassStats& stats) {
  const auto it = stats.means.find(label);
  if (it == stats.means.end()) fail(ErrorKind::not_found, "maha_conf: no statistics for label '" + label + "'");
  require(z.size() == stats.dim(), "maha_conf: embedding dimension mismatch");
  return std::exp(-mahalanobis_sq(z, it->second, stats.cov_inv));
}

// Largest temperature-softmax probability over the candidate texts.
inline double soft_conf(const Vector& z_hat, const Matrix& t_hats, double tau = kTemperature) {
  require(t_hats.rows() >= 1, "soft_conf: no candidates");
  const Vector logits = t_hats * z_hat / tau;
  const double mx = logits.maxCoeff();
  return 1.0 / (logits.array() - mx).exp().sum();
}

inline double fused_conf(double soft, double maha, double alpha = kFusedAlpha, double beta = kFusedBeta) {
  return alpha * soft + (1.0 - alpha) * sigmoid(beta * (maha - 0.5));
}

struct InferenceThresholds {
  double temperature = kTemperature;
  double fused_alpha = kFusedAlpha;
  double fused_beta = kFusedBeta;
  double auto_accept = kAutoAcceptMaha;
  double low_confidence = kLowConfidence;
  double null_cost = kNullCost;
};

inline Route route_for(double conf_maha, double conf_fused, const InferenceThresholds& th = {}) {
  if (conf_maha >= th.auto_accept) return Route::auto_accept;
  if (conf_fused < th.low_confidence) return Route::low_confidence;
  return Route::review;
}

// Per point, the label of the active partlet with the highest mask
// probability; unlabeled if that probability is below 0.5. Ties go to the
// earlier entry of `active`.
inline std::vector<std::optional<std::string>> assign_point_labels(const Matrix& mask_logits,
                                                                   const std::vector<Eigen::Index>& active,
                                                                   const std::vector<std::string>& names) {
  require(active.size() == names.size(), "assign_point_labels: one name per active partlet");
  std::vector<std::optional<std::string>> out(static_cast<std::size_t>(mask_logits.cols()));
  if (active.empty()) return out;
  for (Eigen::Index i = 0; i < mask_logits.cols(); ++i) {
    std::size_t best = 0;
    for (std::size_t a = 1; a < active.size(); ++a)
      if (mask_logits(active[a], i) > mask_logits(active[best], i)) best = a;
    if (sigmoid(mask_logits(active[best], i)) >= 0.5) out[static_cast<std::size_t>(i)] = names[best];
  }
  return out;
}

namespace detail {

inline std::vector<std::string> matched_names(const std::vector<PartletPrediction>& preds,
                                              std::vector<Eigen::Index>& named) {
  std::vector<std::string> names;
  named.clear();
  for (const auto& p : preds)
    if (p.label) {
      named.push_back(p.partlet);
      names.push_back(*p.label);
    }
  return names;
}

}  // namespace detail

// Closed vocabulary: category from the global embedding, then exact
// assignment of active partlets to that category's parts.
inline InferenceResult mode1_closed(const PartletSet& partlets, const Vector& z_global, const TextBank& classes,
                                    const std::map<std::string, TextBank>& part_vocab, const ClassStats& stats,
                                    const InferenceThresholds& th = {}) {
  InferenceResult out;
  out.category = predict_category(z_global, classes);
  const auto vocab_it = part_vocab.find(out.category);
  if (vocab_it == part_vocab.end() || vocab_it->second.size() == 0)
    fail(ErrorKind::not_found, "mode1_closed: no part vocabulary for class '" + out.category + "'");
  const TextBank& vocab = vocab_it->second;
  vocab.validate();
  out.active = filter_active(partlets.partness_logits);
  out.point_labels.assign(static_cast<std::size_t>(partlets.mask_logits.cols()), std::nullopt);
  if (out.active.empty()) return out;

  Matrix z_hat(static_cast<Eigen::Index>(out.active.size()), partlets.embeddings.cols());
  for (std::size_t r = 0; r < out.active.size(); ++r)
    z_hat.row(static_cast<Eigen::Index>(r)) = unit(partlets.embeddings.row(out.active[r]).transpose()).transpose();
  const Assignment pi = jv_assign(inference_cost(z_hat, vocab.embeddings), th.null_cost);
  for (std::size_t r = 0; r < out.active.size(); ++r) {
    PartletPrediction p;
    p.partlet = out.active[r];
    const Vector zr = z_hat.row(static_cast<Eigen::Index>(r)).transpose();
    p.conf_soft = soft_conf(zr, vocab.embeddings, th.temperature);
    if (pi[r] != kNull) {
      p.label = vocab.labels[static_cast<std::size_t>(pi[r])];
      p.conf_maha = maha_conf(zr, *p.label, stats);
    }
    p.conf_fused = fused_conf(p.conf_soft, p.conf_maha, th.fused_alpha, th.fused_beta);
    p.route = p.label ? route_for(p.conf_maha, p.conf_fused, th) : Route::low_confidence;
    out.partlets.push_back(std::move(p));
  }
  std::vector<Eigen::Index> named;
  const auto names = detail::matched_names(out.partlets, named);
  out.point_labels = assign_point_labels(partlets.mask_logits, named, names);
  return out;
}

// Open vocabulary: each active partlet independently takes its nearest
// description, so two partlets may share a name.
inline InferenceResult mode2_open(const PartletSet& partlets, const TextBank& descriptions) {
  descriptions.validate();
  if (descriptions.size() == 0) fail(ErrorKind::invalid_argument, "mode2_open: no descriptions");
  InferenceResult out;
  out.active = filter_active(partlets.partness_logits);
  for (Eigen::Index k : out.active) {
    PartletPrediction p;
    p.partlet = k;
    const Vector zk = unit(partlets.embeddings.row(k).transpose());
    p.label = descriptions.labels[static_cast<std::size_t>(detail::best_match(zk, descriptions))];
    p.conf_soft = soft_conf(zk, descriptions.embeddings);
    p.conf_fused = p.conf_soft;
    p.route = p.conf_soft < kLowConfidence ? Route::low_confidence : Route::review;
    out.partlets.push_back(std::move(p));
  }
  std::vector<Eigen::Index> named;
  const auto names = detail::matched_names(out.partlets, named);
  out.point_labels = assign_point_labels(partlets.mask_logits, named, names);
  return out;
}

struct Retrieval {
  Eigen::Index partlet = 0;
  double similarity = 0.0;
  RowVector mask_probs;
  std::vector<std::int32_t> points;  // sigma >= 0.5
};

// The active partlet most similar to the query, with its mask.
inline Retrieval mode3_retrieve(const PartletSet& partlets, const Vector& query) {
  const auto active = filter_active(partlets.partness_logits);
  if (active.empty()) fail(ErrorKind::invalid_argument, "mode3_retrieve: no active partlets");
  const Vector q = unit(query);
  Retrieval r;
  r.similarity = -std::numeric_limits<double>::infinity();
  for (Eigen::Index k : active) {
    const double s = cosine_sim(partlets.embeddings.row(k).transpose(), q);
    if (s > r.similarity) {
      r.similarity = s;
      r.partlet = k;
    }
  }
  r.mask_probs = partlets.mask_logits.row(r.partlet).unaryExpr([](double x) { return sigmoid(x); });
  for (Eigen::Index i = 0; i < r.mask_probs.size(); ++i)
    if (r.mask_probs(i) >= 0.5) r.points.push_back(static_cast<std::int32_t>(i));
  return r;
}

// sigma(partness) + mean mask probability.
inline Vector saliency(const PartletSet& partlets) {
  Vector s(partlets.size());
  for (Eigen::Index k = 0; k < partlets.size(); ++k) {
    double mass = 0.0;
    for (Eigen::Index i = 0; i < partlets.mask_logits.cols(); ++i) mass += sigmoid(partlets.mask_logits(k, i));
    const double cov = partlets.mask_logits.cols() > 0 ? mass / static_cast<double>(partlets.mask_logits.cols()) : 0.0;
    s(k) = sigmoid(partlets.partness_logits(k)) + cov;
  }
  return s;
}

// Top-M partlets by descending saliency, ties by index.
inline std::vector<Eigen::Index> rank_by_saliency(const PartletSet& partlets, Eigen::Index m) {
  if (m < 0 || m > partlets.size()) fail(ErrorKind::invalid_argument, "rank_by_saliency: M exceeds partlet count");
  const Vector s = saliency(partlets);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(partlets.size()));
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = static_cast<Eigen::Index>(k);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return s(a) > s(b); });
  order.resize(static_cast<std::size_t>(m));
  return order;
}

// Known part count: keep the M most salient partlets, name them by exact
// assignment against the vocabulary, and give every point to its best mask.
inline InferenceResult mode_part_number(const PartletSet& partlets, Eigen::Index m, const TextBank& vocab) {
  vocab.validate();
  InferenceResult out;
  out.active = rank_by_saliency(partlets, m);
  out.point_labels.assign(static_cast<std::size_t>(partlets.mask_logits.cols()), std::nullopt);
  if (out.active.empty()) return out;
  Matrix z_hat(m, partlets.embeddings.cols());
  for (Eigen::Index r = 0; r < m; ++r)
    z_hat.row(r) = unit(partlets.embeddings.row(out.active[static_cast<std::size_t>(r)]).transpose()).transpose();
  Assignment pi(static_cast<std::size_t>(m), kNull);
  if (vocab.size() > 0) pi = jv_assign(inference_cost(z_hat, vocab.embeddings));
  for (Eigen::Index r = 0; r < m; ++r) {
    PartletPrediction p;
    p.partlet = out.active[static_cast<std::size_t>(r)];
    if (pi[static_cast<std::size_t>(r)] != kNull) {
      p.label = vocab.labels[static_cast<std::size_t>(pi[static_cast<std::size_t>(r)])];
      p.conf_soft = soft_conf(z_hat.row(r).transpose(), vocab.embeddings);
      p.conf_fused = p.conf_soft;
    }
    out.partlets.push_back(std::move(p));
  }
  for (Eigen::Index i = 0; i < partlets.mask_logits.cols(); ++i) {
    std::size_t best = 0;
    for (std::size_t a = 1; a < out.active.size(); ++a)
      if (partlets.mask_logits(out.active[a], i) > partlets.mask_logits(out.active[best], i)) best = a;
    out.point_labels[static_cast<std::size_t>(i)] = out.partlets[best].label;
  }
  return out;
}

struct KMeansResult {
  std::vector<int> assignment;
  Matrix centers;
  std::vector<double> objective;  // after each assignment step
  int iterations = 0;
};

// Lloyd's algorithm from a seeded farthest-point initialization. Stops at an
// assignment fixpoint or after max_iters. Empty clusters keep their center.
inline KMeansResult kmeans_cluster(const Matrix& x, Eigen::Index k, std::uint64_t seed, int max_iters = 100) {
  const Eigen::Index n = x.rows();
  if (k < 1 || k > n) fail(ErrorKind::invalid_argument, "kmeans_cluster: need 1 <= K <= N");
  Rng rng(seed);
  KMeansResult out;
  out.centers.resize(k, x.cols());
  out.centers.row(0) = x.row(static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n))));
  Vector nearest = (x.rowwise() - out.centers.row(0)).rowwise().squaredNorm();
  for (Eigen::Index c = 1; c < k; ++c) {
    Eigen::Index far = 0;
    nearest.maxCoeff(&far);
    out.centers.row(c) = x.row(far);
    nearest = nearest.cwiseMin((x.rowwise() - out.centers.row(c)).rowwise().squaredNorm());
  }

  out.assignment.assign(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < max_iters; ++it) {
    // Squared distances via |x|^2 - 2 x.c + |c|^2, one row of x at a time.
    const Vector cnorm = out.centers.rowwise().squaredNorm();
    const Matrix dots = linear(x, out.centers);
    bool changed = false;
    double obj = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (Eigen::Index c = 0; c < k; ++c) {
        const double d = cnorm(c) - 2.0 * dots(i, c);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (out.assignment[static_cast<std::size_t>(i)] != best) changed = true;
      out.assignment[static_cast<std::size_t>(i)] = static_cast<int>(best);
      obj += (x.row(i) - out.centers.row(best)).squaredNorm();
    }
    out.objective.push_back(obj);
    out.iterations = it + 1;
    if (!changed) break;
    Matrix sums = Matrix::Zero(k, x.cols());
    Vector counts = Vector::Zero(k);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(out.assignment[static_cast<std::size_t>(i)]) += x.row(i);
      counts(out.assignment[static_cast<std::size_t>(i)]) += 1.0;
    }
    for (Eigen::Index c = 0; c < k; ++c)
      if (counts(c) > 0) out.centers.row(c) = sums.row(c) / counts(c);
  }
  return out;
}

}  // namespace alignparts
