#pragma once

// Named part segmentation metrics: class-agnostic mIoU, strict and relaxed
// label-aware mIoU, and Pearson/Spearman correlation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "alignparts/numerics.hpp"

namespace alignparts {

// Sorted, duplicate-free point indices.
using PointSet = std::vector<std::int32_t>;

struct LabeledSegment {
  std::string label;
  PointSet points;
};

using Segmentation = std::vector<LabeledSegment>;
using LabelEmbeddings = std::map<std::string, Vector>;

inline PointSet make_point_set(std::vector<std::int32_t> pts) {
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  return pts;
}

// Groups per-point labels into segments; points without a label are skipped.
inline Segmentation segments_from_labels(const std::vector<std::optional<std::string>>& labels) {
  std::map<std::string, PointSet> groups;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) groups[*labels[i]].push_back(static_cast<std::int32_t>(i));
  Segmentation out;
  for (auto& [label, pts] : groups) out.push_back({label, std::move(pts)});
  return out;
}

inline double iou(const PointSet& a, const PointSet& b) {
  std::size_t inter = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++inter;
      ++i;
      ++j;
    }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace detail {

struct BestSegment {
  std::size_t index;
  double iou;
};

// Highest-IoU predicted segment. Ties go to the smaller label, then the
// smaller first point, so the choice does not depend on segment order.
inline std::optional<BestSegment> best_segment(const PointSet& gt, const Segmentation& pred) {
  std::optional<BestSegment> best;
  for (std::size_t s = 0; s < pred.size(); ++s) {
    const double v = iou(gt, pred[s].points);
    if (!best || v > best->iou) {
      best = BestSegment{s, v};
      continue;
    }
    if (v < best->iou) continue;
    const LabeledSegment& cur = pred[best->index];
    const LabeledSegment& cand = pred[s];
    const auto first = [](const PointSet& p) { return p.empty() ? INT32_MAX : p.front(); };
    if (std::make_pair(cand.label, first(cand.points)) < std::make_pair(cur.label, first(cur.points)))
      best = BestSegment{s, v};
  }
  return best;
}

template <class Credit>
double mean_over_parts(const Segmentation& gt, const Segmentation& pred, Credit&& credit) {
  require(!gt.empty(), "metrics: ground truth has no parts");
  double total = 0.0;
  for (const LabeledSegment& part : gt) {
    const auto best = best_segment(part.points, pred);
    if (best) total += credit(part, pred[best->index], best->iou);
  }
  return total / static_cast<double>(gt.size());
}

}  // namespace detail

inline double class_agnostic_miou(const Segmentation& gt, const Segmentation& pred) {
  return detail::mean_over_parts(gt, pred, [](const LabeledSegment&, const LabeledSegment&, double v) { return v; });
}

inline double la_miou(const Segmentation& gt, const Segmentation& pred) {
  return detail::mean_over_parts(gt, pred, [](const LabeledSegment& g, const LabeledSegment& p, double v) {
    return g.label == p.label ? v : 0.0;
  });
}

inline const Vector& label_embedding(const LabelEmbeddings& emb, const std::string& label) {
  const auto it = emb.find(label);
  if (it == emb.end()) fail(ErrorKind::not_found, "missing embedding for label '" + label + "'");
  return it->second;
}

// IoU weighted by the label-embedding cosine, clamped to [0, 1].
inline double rla_miou(const Segmentation& gt, const Segmentation& pred, const LabelEmbeddings& emb) {
  return detail::mean_over_parts(gt, pred, [&](const LabeledSegment& g, const LabeledSegment& p, double v) {
    const Vector& eg = label_embedding(emb, g.label);
    const Vector& ep = label_embedding(emb, p.label);
    if (g.label == p.label) return v;
    const double c = cosine_sim(eg, ep);
    return v * std::clamp(c, 0.0, 1.0);
  });
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, "pearson: need two equal-length series of length >= 2");
  const Eigen::Map<const Vector> a(x.data(), static_cast<Eigen::Index>(x.size()));
  const Eigen::Map<const Vector> b(y.data(), static_cast<Eigen::Index>(y.size()));
  const Vector da = a.array() - a.mean();
  const Vector db = b.array() - b.mean();
  const double den = std::sqrt(da.squaredNorm() * db.squaredNorm());
  if (!(den > 0.0)) fail(ErrorKind::numeric, "pearson: zero variance");
  return std::clamp(da.dot(db) / den, -1.0, 1.0);
}

// 1-based ranks; ties share their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, "spearman: need two equal-length series of length >= 2");
  return pearson(average_ranks(x), average_ranks(y));
}

}  // namespace alignparts
