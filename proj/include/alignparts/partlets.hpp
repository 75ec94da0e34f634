#pragma once

// Partlet decoder: K learned part proposals refined against fused point
// features, plus the mask and partness heads.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "alignparts/numerics.hpp"

namespace alignparts {

struct DecoderConfig {
  Eigen::Index partlets = 32;
  Eigen::Index embed_dim = 768;  // shared with text embeddings
  Eigen::Index fused_dim = 256;
  Eigen::Index heads = 8;
  Eigen::Index layers = 3;
  Eigen::Index mlp_hidden = 4 * 768;

  Eigen::Index head_dim() const { return embed_dim / heads; }
  void validate() const {
    require(partlets >= 1, "DecoderConfig: need at least one partlet");
    require(heads >= 1 && embed_dim % heads == 0, "DecoderConfig: embed_dim must be divisible by heads");
    require(layers >= 0 && fused_dim > 0 && mlp_hidden > 0, "DecoderConfig: invalid dims");
  }
};

struct AttentionWeights {
  Matrix query;   // embed x embed
  Matrix key;     // embed x source
  Matrix value;   // embed x source
  Matrix output;  // embed x embed
};

struct DecoderBlock {
  LayerNormParams self_norm;
  AttentionWeights self_attn;
  LayerNormParams cross_norm;
  AttentionWeights cross_attn;  // key/value map fused_dim -> embed_dim
  LayerNormParams mlp_norm;
  Matrix mlp_w1;  // hidden x embed
  Vector mlp_b1;
  Matrix mlp_w2;  // embed x hidden
  Vector mlp_b2;
};

struct DecoderWeights {
  DecoderConfig config;
  Matrix initial;  // partlets x embed
  std::vector<DecoderBlock> blocks;
  Matrix mask_query;  // embed x embed
  Matrix mask_key;    // embed x fused
  Vector part_w;      // embed
  double part_b = 0.0;
};

struct PartletSet {
  Matrix embeddings;   // K x embed; also the prototypes z_k
  Matrix mask_logits;  // K x N
  Vector partness_logits;

  Eigen::Index size() const { return embeddings.rows(); }
};

// Standard-normal initial embeddings.
inline Matrix init_partlets(std::uint64_t seed, Eigen::Index count, Eigen::Index dim) {
  require(count >= 1, "init_partlets: need at least one partlet");
  Rng rng(seed);
  return rng.gaussian(count, dim);
}

inline AttentionWeights init_attention(Rng& rng, Eigen::Index embed, Eigen::Index source) {
  return {init_weight(rng, embed, embed), init_weight(rng, embed, source), init_weight(rng, embed, source),
          init_weight(rng, embed, embed)};
}

inline DecoderWeights init_decoder_weights(const DecoderConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed);
  DecoderWeights w;
  w.config = c;
  w.initial = init_partlets(seed ^ 0x9e3779b97f4a7c15ULL, c.partlets, c.embed_dim);
  for (Eigen::Index l = 0; l < c.layers; ++l) {
    DecoderBlock b;
    b.self_norm = identity_layer_norm(c.embed_dim);
    b.self_attn = init_attention(rng, c.embed_dim, c.embed_dim);
    b.cross_norm = identity_layer_norm(c.embed_dim);
    b.cross_attn = init_attention(rng, c.embed_dim, c.fused_dim);
    b.mlp_norm = identity_layer_norm(c.embed_dim);
    b.mlp_w1 = init_weight(rng, c.mlp_hidden, c.embed_dim);
    b.mlp_b1 = Vector::Zero(c.mlp_hidden);
    b.mlp_w2 = init_weight(rng, c.embed_dim, c.mlp_hidden);
    b.mlp_b2 = Vector::Zero(c.embed_dim);
    w.blocks.push_back(std::move(b));
  }
  w.mask_query = init_weight(rng, c.embed_dim, c.embed_dim);
  w.mask_key = init_weight(rng, c.embed_dim, c.fused_dim);
  w.part_w = rng.gaussian_vector(c.embed_dim, 1.0 / std::sqrt(static_cast<double>(c.embed_dim)));
  return w;
}

// Sum of the softmax weights of every (query, head) row, in evaluation order.
struct AttentionTrace {
  std::vector<double> row_sums;
};

namespace detail {

// Lexicographic row order. Self-attention accumulates over partlets in this
// order so its output is bitwise equivariant under partlet permutation.
inline std::vector<Eigen::Index> canonical_row_order(const Matrix& m) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(m.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (m(a, c) != m(b, c)) return m(a, c) < m(b, c);
    }
    return false;
  });
  return order;
}

// Multi-head attention of `queries` (already normalized) over `source` rows.
// Accumulation runs over source rows in `order`.
inline Matrix multi_head_attention(const Matrix& queries, const Matrix& source, const AttentionWeights& w,
                                   Eigen::Index heads, const std::vector<Eigen::Index>& order,
                                   AttentionTrace* trace = nullptr) {
  const Eigen::Index embed = w.query.rows();
  const Eigen::Index hd = embed / heads;
  const Matrix q = linear(queries, w.query);
  const Matrix k = linear(source, w.key);
  const Matrix v = linear(source, w.value);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix z = Matrix::Zero(queries.rows(), embed);
  std::vector<double> logits(order.size());
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto qh = q.row(i).segment(h * hd, hd);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < order.size(); ++t) {
        logits[t] = qh.dot(k.row(order[t]).segment(h * hd, hd)) * scale;
        mx = std::max(mx, logits[t]);
      }
      double total = 0.0;
      for (auto& l : logits) {
        l = std::exp(l - mx);
        total += l;
      }
      auto zh = z.row(i).segment(h * hd, hd);
      double weight_sum = 0.0;
      for (std::size_t t = 0; t < order.size(); ++t) {
        zh += (logits[t] / total) * v.row(order[t]).segment(h * hd, hd);
        weight_sum += logits[t] / total;
      }
      if (trace) trace->row_sums.push_back(weight_sum);
    }
  }
  return linear(z, w.output);
}

}  // namespace detail

// L pre-norm residual blocks: self-attention over partlets, cross-attention
// to fused point features, then a GELU MLP.
inline Matrix refine(const Matrix& initial, const Matrix& fused, const DecoderWeights& w,
                     AttentionTrace* trace = nullptr) {
  const DecoderConfig& c = w.config;
  require(initial.cols() == c.embed_dim, "refine: embedding dimension mismatch");
  require(fused.cols() == c.fused_dim, "refine: fused feature dimension mismatch");
  if (!fused.allFinite()) fail(ErrorKind::numeric, "refine: non-finite fused features");
  std::vector<Eigen::Index> point_order(static_cast<std::size_t>(fused.rows()));
  std::iota(point_order.begin(), point_order.end(), Eigen::Index{0});

  Matrix s = initial;
  for (const DecoderBlock& b : w.blocks) {
    const Matrix normed = layer_norm_rows(s, b.self_norm);
    s += detail::multi_head_attention(normed, normed, b.self_attn, c.heads, detail::canonical_row_order(normed), trace);
    s += detail::multi_head_attention(layer_norm_rows(s, b.cross_norm), fused, b.cross_attn, c.heads, point_order, trace);
    Matrix hidden = linear(layer_norm_rows(s, b.mlp_norm), b.mlp_w1).rowwise() + b.mlp_b1.transpose();
    s += linear(gelu(hidden), b.mlp_w2).rowwise() + b.mlp_b2.transpose();
  }
  return s;
}

// m_ki = (W_q s_k) . (W_k h_i) / sqrt(d_t)
inline Matrix predict_masks(const Matrix& s, const Matrix& fused, const DecoderWeights& w) {
  require(s.cols() == w.mask_query.cols() && fused.cols() == w.mask_key.cols(),
          "predict_masks: shape mismatch");
  const double scale = 1.0 / std::sqrt(static_cast<double>(w.config.embed_dim));
  return linear(linear(s, w.mask_query), linear(fused, w.mask_key)) * scale;
}

inline Vector predict_partness(const Matrix& s, const DecoderWeights& w) {
  require(s.cols() == w.part_w.size(), "predict_partness: shape mismatch");
  return linear(s, Matrix(w.part_w.transpose())).col(0).array() + w.part_b;
}

inline PartletSet decode(const Matrix& initial, const Matrix& fused, const DecoderWeights& w) {
  PartletSet out;
  out.embeddings = refine(initial, fused, w);
  out.mask_logits = predict_masks(out.embeddings, fused, w);
  out.partness_logits = predict_partness(out.embeddings, w);
  return out;
}

inline PartletSet decode(const Matrix& fused, const DecoderWeights& w) { return decode(w.initial, fused, w); }

}  // namespace alignparts
