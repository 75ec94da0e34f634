#pragma once

// Point-cloud normalization, kNN graphs and Fourier displacement encoding.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "alignparts/numerics.hpp"

namespace alignparts {

// N x 3 coordinates.
struct PointCloud {
  Matrix coords;

  Eigen::Index size() const { return coords.rows(); }
};

struct KnnGraph {
  // N x k_eff, each row sorted by ascending distance then ascending index.
  std::vector<std::int32_t> neighbor_index;
  Eigen::Index num_points = 0;
  Eigen::Index k_eff = 0;

  std::int32_t neighbor(Eigen::Index i, Eigen::Index j) const {
    return neighbor_index[static_cast<std::size_t>(i * k_eff + j)];
  }
};

inline constexpr int kDefaultNeighbors = 16;
inline constexpr int kDefaultFrequencies = 6;

// Centers on the bounding-box center and scales isotropically by half the
// largest axis extent. A zero-extent cloud collapses to the origin.
inline PointCloud normalize_unit_cube(const PointCloud& raw) {
  require(raw.size() >= 1, "normalize_unit_cube: empty point cloud");
  require(raw.coords.cols() == 3, "normalize_unit_cube: coordinates must be N x 3");
  const RowVector lo = raw.coords.colwise().minCoeff();
  const RowVector hi = raw.coords.colwise().maxCoeff();
  const RowVector center = 0.5 * (lo + hi);
  const double half_extent = 0.5 * (hi - lo).maxCoeff();
  PointCloud out{raw.coords.rowwise() - center};
  if (half_extent == 0.0) {
    out.coords.setZero();
    return out;
  }
  out.coords /= half_extent;
  // Clamp rounding spill so every coordinate stays inside [-1, 1].
  out.coords = out.coords.cwiseMax(-1.0).cwiseMin(1.0);
  return out;
}

inline double squared_distance(const Matrix& coords, Eigen::Index a, Eigen::Index b) {
  const double dx = coords(a, 0) - coords(b, 0);
  const double dy = coords(a, 1) - coords(b, 1);
  const double dz = coords(a, 2) - coords(b, 2);
  return dx * dx + dy * dy + dz * dz;
}

// Exhaustive kNN: every point's k_eff = min(k, N-1) nearest other points.
inline KnnGraph knn_graph(const PointCloud& pc, int k = kDefaultNeighbors) {
  const Eigen::Index n = pc.size();
  if (n < 2) fail(ErrorKind::invalid_argument, "knn_graph: need at least two points");
  require(k >= 1, "knn_graph: k must be positive");
  KnnGraph g;
  g.num_points = n;
  g.k_eff = std::min<Eigen::Index>(k, n - 1);
  g.neighbor_index.resize(static_cast<std::size_t>(n * g.k_eff));

  std::vector<std::pair<double, std::int32_t>> cand(static_cast<std::size_t>(n - 1));
  const auto k_eff = static_cast<std::ptrdiff_t>(g.k_eff);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      cand[c++] = {squared_distance(pc.coords, i, j), static_cast<std::int32_t>(j)};
    }
    std::partial_sort(cand.begin(), cand.begin() + k_eff, cand.end());
    for (Eigen::Index j = 0; j < g.k_eff; ++j)
      g.neighbor_index[static_cast<std::size_t>(i * g.k_eff + j)] = cand[static_cast<std::size_t>(j)].second;
  }
  return g;
}

inline Eigen::Index fourier_dim(int frequencies) { return 3 + 6 * frequencies; }

// [d, sin(d_x w_0..w_{F-1}), sin(d_y ...), sin(d_z ...), cos(...)] with w_f = 2^f.
inline Vector fourier_encode(const std::array<double, 3>& d, int frequencies = kDefaultFrequencies) {
  require(frequencies >= 1, "fourier_encode: need at least one frequency");
  Vector out(fourier_dim(frequencies));
  const Eigen::Index block = 3 * frequencies;
  for (int a = 0; a < 3; ++a) {
    out(a) = d[static_cast<std::size_t>(a)];
    for (int f = 0; f < frequencies; ++f) {
      const double arg = d[static_cast<std::size_t>(a)] * std::ldexp(1.0, f);
      out(3 + a * frequencies + f) = std::sin(arg);
      out(3 + block + a * frequencies + f) = std::cos(arg);
    }
  }
  return out;
}

}  // namespace alignparts
