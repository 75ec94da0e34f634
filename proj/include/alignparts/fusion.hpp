#pragma once

// Bi-directional cross-attention fusion of geometry and appearance features
// over a local kNN graph, with Fourier-encoded relative positional bias.

#include <cmath>
#include <cstdint>
#include <vector>

#include "alignparts/geometry.hpp"
#include "alignparts/numerics.hpp"

namespace alignparts {

struct FusionConfig {
  Eigen::Index geo_dim = 448;
  Eigen::Index app_dim = 768;
  Eigen::Index model_dim = 768;
  Eigen::Index heads = 8;
  Eigen::Index fused_dim = 256;
  Eigen::Index bias_hidden = 64;
  int frequencies = kDefaultFrequencies;
  int neighbors = kDefaultNeighbors;

  Eigen::Index head_dim() const { return model_dim / heads; }
  void validate() const {
    require(heads >= 1 && model_dim % heads == 0, "FusionConfig: model_dim must be divisible by heads");
    require(geo_dim > 0 && app_dim > 0 && fused_dim > 0 && bias_hidden > 0, "FusionConfig: dims must be positive");
  }
};

// One attention direction: source features query the target modality of
// their neighbors; the result is projected back to the source dimension.
struct DirectionWeights {
  Matrix query;      // model x src
  Matrix key;        // model x tgt
  Matrix value;      // model x tgt
  Matrix output;     // src x model
  Matrix gate;       // src x 2*src, applied to [original; attended]
  Vector gate_bias;  // src
  LayerNormParams norm;
};

struct FusionWeights {
  FusionConfig config;
  DirectionWeights geo_to_app;  // geometry queries attend to appearance
  DirectionWeights app_to_geo;  // appearance queries attend to geometry
  // Positional bias MLP: fourier_dim -> bias_hidden -> heads, ReLU.
  Matrix bias_w1;
  Vector bias_b1;
  Matrix bias_w2;
  Vector bias_b2;
  LayerNormParams concat_norm;
  Matrix proj_w1;  // fused x (geo + app)
  Matrix proj_w2;  // fused x fused
};

struct FeaturePair {
  Matrix geo;  // N x geo_dim
  Matrix app;  // N x app_dim
};

enum class Direction { geo_to_app, app_to_geo };

inline DirectionWeights init_direction(Rng& rng, const FusionConfig& c, Eigen::Index src, Eigen::Index tgt) {
  DirectionWeights d;
  d.query = init_weight(rng, c.model_dim, src);
  d.key = init_weight(rng, c.model_dim, tgt);
  d.value = init_weight(rng, c.model_dim, tgt);
  d.output = init_weight(rng, src, c.model_dim);
  d.gate = init_weight(rng, src, 2 * src);
  d.gate_bias = Vector::Zero(src);
  d.norm = identity_layer_norm(src);
  return d;
}

inline FusionWeights init_fusion_weights(const FusionConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed);
  FusionWeights w;
  w.config = c;
  w.geo_to_app = init_direction(rng, c, c.geo_dim, c.app_dim);
  w.app_to_geo = init_direction(rng, c, c.app_dim, c.geo_dim);
  const Eigen::Index enc = fourier_dim(c.frequencies);
  w.bias_w1 = init_weight(rng, c.bias_hidden, enc);
  w.bias_b1 = Vector::Zero(c.bias_hidden);
  w.bias_w2 = init_weight(rng, c.heads, c.bias_hidden);
  w.bias_b2 = Vector::Zero(c.heads);
  w.concat_norm = identity_layer_norm(c.geo_dim + c.app_dim);
  w.proj_w1 = init_weight(rng, c.fused_dim, c.geo_dim + c.app_dim);
  w.proj_w2 = init_weight(rng, c.fused_dim, c.fused_dim);
  return w;
}

// Per-edge positional bias, (N * k_eff) x heads, row i*k_eff + j for the
// j-th neighbor of point i.
inline Matrix relative_bias(const KnnGraph& graph, const PointCloud& pc, const FusionWeights& w) {
  require(graph.num_points == pc.size(), "relative_bias: graph does not match point cloud");
  const int freqs = w.config.frequencies;
  const Eigen::Index edges = graph.num_points * graph.k_eff;
  Matrix enc(edges, fourier_dim(freqs));
  for (Eigen::Index i = 0; i < graph.num_points; ++i) {
    for (Eigen::Index j = 0; j < graph.k_eff; ++j) {
      const Eigen::Index nb = graph.neighbor(i, j);
      const std::array<double, 3> d{pc.coords(nb, 0) - pc.coords(i, 0), pc.coords(nb, 1) - pc.coords(i, 1),
                                    pc.coords(nb, 2) - pc.coords(i, 2)};
      enc.row(i * graph.k_eff + j) = fourier_encode(d, freqs).transpose();
    }
  }
  Matrix hidden = linear(enc, w.bias_w1).rowwise() + w.bias_b1.transpose();
  hidden = relu(hidden);
  return linear(hidden, w.bias_w2).rowwise() + w.bias_b2.transpose();
}

struct AttentionResult {
  Matrix attended;              // N x src
  std::vector<double> weights;  // [i][h][j], filled only when requested
};

// Sparse multi-head attention of each point over its graph neighbors in the
// other modality. Logits are scaled dot products plus the per-edge bias.
inline AttentionResult directed_cross_attention(Direction dir, const FeaturePair& features, const KnnGraph& graph,
                                                const Matrix& bias, const FusionWeights& w,
                                                bool keep_weights = false) {
  const FusionConfig& c = w.config;
  const DirectionWeights& dw = dir == Direction::geo_to_app ? w.geo_to_app : w.app_to_geo;
  const Matrix& src = dir == Direction::geo_to_app ? features.geo : features.app;
  const Matrix& tgt = dir == Direction::geo_to_app ? features.app : features.geo;
  const Eigen::Index n = graph.num_points;
  const Eigen::Index k = graph.k_eff;
  const Eigen::Index hd = c.head_dim();
  require(src.rows() == n && tgt.rows() == n, "directed_cross_attention: feature rows must match graph");
  require(bias.rows() == n * k && bias.cols() == c.heads, "directed_cross_attention: bias shape mismatch");

  const Matrix q = linear(src, dw.query);
  const Matrix kmat = linear(tgt, dw.key);
  const Matrix v = linear(tgt, dw.value);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  AttentionResult result;
  if (keep_weights) result.weights.resize(static_cast<std::size_t>(n * c.heads * k));
  Matrix z = Matrix::Zero(n, c.model_dim);
  std::vector<double> logits(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index h = 0; h < c.heads; ++h) {
      const auto qh = q.row(i).segment(h * hd, hd);
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < k; ++j) {
        const Eigen::Index nb = graph.neighbor(i, j);
        const double l = qh.dot(kmat.row(nb).segment(h * hd, hd)) * scale + bias(i * k + j, h);
        logits[static_cast<std::size_t>(j)] = l;
        mx = std::max(mx, l);
      }
      double total = 0.0;
      for (auto& l : logits) {
        l = std::exp(l - mx);
        total += l;
      }
      auto zh = z.row(i).segment(h * hd, hd);
      for (Eigen::Index j = 0; j < k; ++j) {
        const double a = logits[static_cast<std::size_t>(j)] / total;
        if (keep_weights) result.weights[static_cast<std::size_t>((i * c.heads + h) * k + j)] = a;
        zh += a * v.row(graph.neighbor(i, j)).segment(h * hd, hd);
      }
    }
  }
  result.attended = linear(z, dw.output);
  return result;
}

// LayerNorm(original + sigmoid(W_g [original; attended] + b) * attended), row-wise.
inline Matrix gated_fuse(const Matrix& original, const Matrix& attended, const DirectionWeights& dw) {
  require(original.rows() == attended.rows() && original.cols() == attended.cols(),
          "gated_fuse: shape mismatch");
  const Eigen::Index d = original.cols();
  require(dw.gate.rows() == d && dw.gate.cols() == 2 * d, "gated_fuse: gate weight shape mismatch");
  Matrix logits = linear(original, Matrix(dw.gate.leftCols(d))) + linear(attended, Matrix(dw.gate.rightCols(d)));
  logits.rowwise() += dw.gate_bias.transpose();
  const Matrix gate = logits.unaryExpr([](double x) { return sigmoid(x); });
  return layer_norm_rows(original + gate.cwiseProduct(attended), dw.norm);
}

inline Matrix bico_forward(const PointCloud& pc, const KnnGraph& graph, const FeaturePair& features,
                           const FusionWeights& w) {
  const FusionConfig& c = w.config;
  require(features.geo.cols() == c.geo_dim && features.app.cols() == c.app_dim,
          "bico_forward: feature dimensions do not match weights");
  require(features.geo.rows() == pc.size() && features.app.rows() == pc.size(),
          "bico_forward: feature rows must equal point count");
  if (!features.geo.allFinite() || !features.app.allFinite())
    fail(ErrorKind::numeric, "bico_forward: non-finite input features");
  const Matrix bias = relative_bias(graph, pc, w);
  const Matrix r_geo = directed_cross_attention(Direction::geo_to_app, features, graph, bias, w).attended;
  const Matrix r_app = directed_cross_attention(Direction::app_to_geo, features, graph, bias, w).attended;
  const Matrix geo = gated_fuse(features.geo, r_geo, w.geo_to_app);
  const Matrix app = gated_fuse(features.app, r_app, w.app_to_geo);
  Matrix cat(pc.size(), c.geo_dim + c.app_dim);
  cat << geo, app;
  const Matrix normed = layer_norm_rows(cat, w.concat_norm);
  return linear(gelu(linear(normed, w.proj_w1)), w.proj_w2);
}

// Builds the kNN graph on the given (already normalized) coordinates.
inline Matrix bico_forward(const PointCloud& pc, const FeaturePair& features, const FusionWeights& w) {
  require(pc.size() >= 2, "bico_forward: need at least two points");
  return bico_forward(pc, knn_graph(pc, w.config.neighbors), features, w);
}

}  // namespace alignparts
