#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "alignparts/fusion.hpp"

using namespace alignparts;

namespace {

FusionConfig tiny_config() {
  FusionConfig c;
  c.geo_dim = 4;
  c.app_dim = 6;
  c.model_dim = 8;
  c.heads = 2;
  c.fused_dim = 5;
  c.bias_hidden = 7;
  c.frequencies = 2;
  c.neighbors = 3;
  return c;
}

FeaturePair random_features(Rng& rng, Eigen::Index n, const FusionConfig& c) {
  return {rng.gaussian(n, c.geo_dim), rng.gaussian(n, c.app_dim)};
}

using Vec = std::vector<double>;

// Plain-loop reference implementation used as an independent oracle.
Vec matvec(const Matrix& w, const Vec& x) {
  Vec y(static_cast<std::size_t>(w.rows()), 0.0);
  for (Eigen::Index r = 0; r < w.rows(); ++r)
    for (Eigen::Index c = 0; c < w.cols(); ++c) y[static_cast<std::size_t>(r)] += w(r, c) * x[static_cast<std::size_t>(c)];
  return y;
}

Vec row_of(const Matrix& m, Eigen::Index r) {
  Vec v(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) v[static_cast<std::size_t>(c)] = m(r, c);
  return v;
}

Vec naive_layer_norm(const Vec& x, const LayerNormParams& p) {
  double mean = 0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = (var == 0 ? 0.0 : (x[i] - mean) / std::sqrt(var + 1e-5)) * p.gain(static_cast<Eigen::Index>(i)) +
             p.bias(static_cast<Eigen::Index>(i));
  return out;
}

Vec naive_edge_bias(const PointCloud& pc, Eigen::Index i, Eigen::Index j, const FusionWeights& w) {
  const int F = w.config.frequencies;
  Vec enc;
  double d[3];
  for (int a = 0; a < 3; ++a) d[a] = pc.coords(j, a) - pc.coords(i, a);
  for (int a = 0; a < 3; ++a) enc.push_back(d[a]);
  for (int a = 0; a < 3; ++a)
    for (int f = 0; f < F; ++f) enc.push_back(std::sin(d[a] * std::pow(2.0, f)));
  for (int a = 0; a < 3; ++a)
    for (int f = 0; f < F; ++f) enc.push_back(std::cos(d[a] * std::pow(2.0, f)));
  Vec hidden = matvec(w.bias_w1, enc);
  for (std::size_t h = 0; h < hidden.size(); ++h) hidden[h] = std::max(0.0, hidden[h] + w.bias_b1(static_cast<Eigen::Index>(h)));
  Vec out = matvec(w.bias_w2, hidden);
  for (std::size_t h = 0; h < out.size(); ++h) out[h] += w.bias_b2(static_cast<Eigen::Index>(h));
  return out;
}

// Attended features for one direction, materializing alpha explicitly.
Matrix naive_attention(Direction dir, const PointCloud& pc, const KnnGraph& g, const FeaturePair& f,
                       const FusionWeights& w, std::vector<double>* alphas = nullptr) {
  const DirectionWeights& dw = dir == Direction::geo_to_app ? w.geo_to_app : w.app_to_geo;
  const Matrix& src = dir == Direction::geo_to_app ? f.geo : f.app;
  const Matrix& tgt = dir == Direction::geo_to_app ? f.app : f.geo;
  const Eigen::Index H = w.config.heads, hd = w.config.head_dim();
  Matrix out(pc.size(), src.cols());
  for (Eigen::Index i = 0; i < pc.size(); ++i) {
    const Vec q = matvec(dw.query, row_of(src, i));
    Vec concat(static_cast<std::size_t>(H * hd), 0.0);
    for (Eigen::Index h = 0; h < H; ++h) {
      std::vector<double> alpha;
      double denom = 0;
      for (Eigen::Index j = 0; j < g.k_eff; ++j) {
        const Eigen::Index nb = g.neighbor(i, j);
        const Vec key = matvec(dw.key, row_of(tgt, nb));
        double dot = 0;
        for (Eigen::Index c = 0; c < hd; ++c) dot += q[static_cast<std::size_t>(h * hd + c)] * key[static_cast<std::size_t>(h * hd + c)];
        const double logit = dot / std::sqrt(static_cast<double>(hd)) + naive_edge_bias(pc, i, nb, w)[static_cast<std::size_t>(h)];
        alpha.push_back(std::exp(logit));
        denom += alpha.back();
      }
      for (Eigen::Index j = 0; j < g.k_eff; ++j) {
        const double a = alpha[static_cast<std::size_t>(j)] / denom;
        if (alphas) alphas->push_back(a);
        const Vec val = matvec(dw.value, row_of(tgt, g.neighbor(i, j)));
        for (Eigen::Index c = 0; c < hd; ++c) concat[static_cast<std::size_t>(h * hd + c)] += a * val[static_cast<std::size_t>(h * hd + c)];
      }
    }
    const Vec r = matvec(dw.output, concat);
    for (Eigen::Index c = 0; c < out.cols(); ++c) out(i, c) = r[static_cast<std::size_t>(c)];
  }
  return out;
}

Matrix naive_gate(const Matrix& orig, const Matrix& att, const DirectionWeights& dw) {
  Matrix out(orig.rows(), orig.cols());
  for (Eigen::Index i = 0; i < orig.rows(); ++i) {
    Vec cat = row_of(orig, i);
    const Vec a = row_of(att, i);
    cat.insert(cat.end(), a.begin(), a.end());
    const Vec logits = matvec(dw.gate, cat);
    Vec mixed(a.size());
    for (std::size_t c = 0; c < a.size(); ++c) {
      const double g = 1.0 / (1.0 + std::exp(-(logits[c] + dw.gate_bias(static_cast<Eigen::Index>(c)))));
      mixed[c] = orig(i, static_cast<Eigen::Index>(c)) + g * a[c];
    }
    const Vec n = naive_layer_norm(mixed, dw.norm);
    for (std::size_t c = 0; c < n.size(); ++c) out(i, static_cast<Eigen::Index>(c)) = n[c];
  }
  return out;
}

Matrix naive_bico(const PointCloud& pc, const FeaturePair& f, const FusionWeights& w) {
  const KnnGraph g = knn_graph(pc, w.config.neighbors);
  const Matrix geo = naive_gate(f.geo, naive_attention(Direction::geo_to_app, pc, g, f, w), w.geo_to_app);
  const Matrix app = naive_gate(f.app, naive_attention(Direction::app_to_geo, pc, g, f, w), w.app_to_geo);
  Matrix out(pc.size(), w.config.fused_dim);
  for (Eigen::Index i = 0; i < pc.size(); ++i) {
    Vec cat = row_of(geo, i);
    const Vec a = row_of(app, i);
    cat.insert(cat.end(), a.begin(), a.end());
    Vec hidden = matvec(w.proj_w1, naive_layer_norm(cat, w.concat_norm));
    for (double& v : hidden) v = v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
    const Vec h = matvec(w.proj_w2, hidden);
    for (std::size_t c = 0; c < h.size(); ++c) out(i, static_cast<Eigen::Index>(c)) = h[c];
  }
  return out;
}

FusionWeights randomized_weights(const FusionConfig& c, std::uint64_t seed) {
  FusionWeights w = init_fusion_weights(c, seed);
  Rng rng(seed + 1000);
  for (DirectionWeights* d : {&w.geo_to_app, &w.app_to_geo}) {
    d->gate_bias = rng.gaussian_vector(d->gate_bias.size(), 0.5);
    d->norm.gain = Vector::Ones(d->norm.gain.size()) + rng.gaussian_vector(d->norm.gain.size(), 0.1);
    d->norm.bias = rng.gaussian_vector(d->norm.bias.size(), 0.1);
  }
  w.bias_b1 = rng.gaussian_vector(w.bias_b1.size(), 0.3);
  w.bias_b2 = rng.gaussian_vector(w.bias_b2.size(), 0.3);
  return w;
}

}  // namespace

TEST(RelativeBias, ZeroWeightsGiveConstantBias) {
  const FusionConfig c = tiny_config();
  FusionWeights w = init_fusion_weights(c, 1);
  w.bias_w1.setZero();
  w.bias_w2.setZero();
  w.bias_b2 << 0.25, -1.5;
  Rng rng(2);
  const PointCloud pc{rng.gaussian(6, 3)};
  const Matrix b = relative_bias(knn_graph(pc, 3), pc, w);
  ASSERT_EQ(b.rows(), 18);
  for (Eigen::Index r = 0; r < b.rows(); ++r) {
    EXPECT_EQ(b(r, 0), 0.25);
    EXPECT_EQ(b(r, 1), -1.5);
  }
}

TEST(RelativeBias, CoincidentPointsUseZeroDisplacementCode) {
  const FusionConfig c = tiny_config();
  const FusionWeights w = randomized_weights(c, 3);
  PointCloud pc{Matrix::Zero(2, 3)};
  const Matrix b = relative_bias(knn_graph(pc, 1), pc, w);
  const Vector enc = fourier_encode({0, 0, 0}, c.frequencies);
  const Vector hidden = (w.bias_w1 * enc + w.bias_b1).cwiseMax(0.0);
  const Vector expect = w.bias_w2 * hidden + w.bias_b2;
  EXPECT_LT((b.row(0).transpose() - expect).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_EQ(b.row(0), b.row(1));
}

TEST(RelativeBias, IdenticalDisplacementsIdenticalBiases) {
  const FusionWeights w = randomized_weights(tiny_config(), 4);
  PointCloud pc{Matrix(4, 3)};
  pc.coords << 0, 0, 0, 0.5, 0, 0, 10, 0, 0, 10.5, 0, 0;
  const KnnGraph g = knn_graph(pc, 1);
  const Matrix b = relative_bias(g, pc, w);
  // 0 -> 1 and 2 -> 3 share displacement (0.5, 0, 0).
  EXPECT_EQ(g.neighbor(0, 0), 1);
  EXPECT_EQ(g.neighbor(2, 0), 3);
  EXPECT_TRUE(b.row(0).isApprox(b.row(2), 1e-12));
}

TEST(DirectedCrossAttention, UniformKeysGiveUniformWeights) {
  const FusionConfig c = tiny_config();
  FusionWeights w = init_fusion_weights(c, 5);
  w.geo_to_app.key.setZero();
  Rng rng(6);
  const PointCloud pc{rng.gaussian(7, 3)};
  const KnnGraph g = knn_graph(pc, 3);
  const Matrix zero_bias = Matrix::Zero(7 * 3, c.heads);
  const auto res = directed_cross_attention(Direction::geo_to_app, random_features(rng, 7, c), g, zero_bias, w, true);
  for (double a : res.weights) EXPECT_NEAR(a, 1.0 / 3.0, 1e-15);
}

TEST(DirectedCrossAttention, SingleNeighborPassesProjectedValue) {
  const FusionConfig c = tiny_config();
  const FusionWeights w = randomized_weights(c, 7);
  Rng rng(8);
  const PointCloud pc{rng.gaussian(2, 3)};
  const KnnGraph g = knn_graph(pc, 3);
  ASSERT_EQ(g.k_eff, 1);
  const FeaturePair f = random_features(rng, 2, c);
  const Matrix bias = relative_bias(g, pc, w);
  const Matrix r = directed_cross_attention(Direction::app_to_geo, f, g, bias, w).attended;
  const Vector expect0 = w.app_to_geo.output * (w.app_to_geo.value * f.geo.row(1).transpose());
  EXPECT_LT((r.row(0).transpose() - expect0).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DirectedCrossAttention, MatchesExplicitAlphaOracle) {
  const FusionConfig c = tiny_config();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const FusionWeights w = randomized_weights(c, 100 + seed);
    Rng rng(200 + seed);
    const PointCloud pc{rng.gaussian(6, 3)};
    const KnnGraph g = knn_graph(pc, 3);
    const FeaturePair f = random_features(rng, 6, c);
    const Matrix bias = relative_bias(g, pc, w);
    for (Direction dir : {Direction::geo_to_app, Direction::app_to_geo}) {
      std::vector<double> alphas;
      const Matrix ref = naive_attention(dir, pc, g, f, w, &alphas);
      const auto res = directed_cross_attention(dir, f, g, bias, w, true);
      EXPECT_LT((res.attended - ref).cwiseAbs().maxCoeff(), 1e-12);
      ASSERT_EQ(alphas.size(), res.weights.size());
      for (std::size_t t = 0; t < alphas.size(); ++t) EXPECT_NEAR(res.weights[t], alphas[t], 1e-14);
    }
  }
}

TEST(DirectedCrossAttention, AttentionRowsSumToOne) {
  const FusionConfig c = tiny_config();
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    const FusionWeights w = randomized_weights(c, 300 + static_cast<std::uint64_t>(t));
    const PointCloud pc{rng.gaussian(30, 3)};
    const KnnGraph g = knn_graph(pc, 3);
    const auto res = directed_cross_attention(Direction::geo_to_app, random_features(rng, 30, c), g,
                                              relative_bias(g, pc, w), w, true);
    for (std::size_t row = 0; row < res.weights.size() / 3; ++row) {
      double s = 0;
      for (std::size_t j = 0; j < 3; ++j) s += res.weights[row * 3 + j];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(GatedFuse, ClosedGateKeepsOriginal) {
  const FusionConfig c = tiny_config();
  FusionWeights w = init_fusion_weights(c, 10);
  w.geo_to_app.gate.setZero();
  w.geo_to_app.gate_bias.setConstant(-1e3);
  Rng rng(11);
  const Matrix orig = rng.gaussian(5, c.geo_dim);
  const Matrix att = rng.gaussian(5, c.geo_dim);
  const Matrix out = gated_fuse(orig, att, w.geo_to_app);
  EXPECT_EQ(out, layer_norm_rows(orig, w.geo_to_app.norm));
}

TEST(GatedFuse, HalfOpenGate) {
  const FusionConfig c = tiny_config();
  FusionWeights w = init_fusion_weights(c, 12);
  w.app_to_geo.gate.setZero();
  Rng rng(13);
  const Matrix orig = rng.gaussian(5, c.app_dim);
  const Matrix att = rng.gaussian(5, c.app_dim);
  const Matrix out = gated_fuse(orig, att, w.app_to_geo);
  EXPECT_LT((out - layer_norm_rows(orig + 0.5 * att, w.app_to_geo.norm)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GatedFuse, MatchesStepwiseFormula) {
  const FusionConfig c = tiny_config();
  const FusionWeights w = randomized_weights(c, 14);
  Rng rng(15);
  const Matrix orig = rng.gaussian(6, c.geo_dim);
  const Matrix att = rng.gaussian(6, c.geo_dim);
  EXPECT_LT((gated_fuse(orig, att, w.geo_to_app) - naive_gate(orig, att, w.geo_to_app)).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(BicoForward, MatchesLoopTraceOnTwoPoints) {
  const FusionConfig c = tiny_config();
  const FusionWeights w = randomized_weights(c, 16);
  Rng rng(17);
  const PointCloud pc{rng.gaussian(2, 3)};
  const FeaturePair f = random_features(rng, 2, c);
  const Matrix out = bico_forward(pc, f, w);
  ASSERT_EQ(out.rows(), 2);
  ASSERT_EQ(out.cols(), c.fused_dim);
  EXPECT_LT((out - naive_bico(pc, f, w)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(BicoForward, MatchesLoopTraceOnRandomClouds) {
  const FusionConfig c = tiny_config();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const FusionWeights w = randomized_weights(c, 400 + seed);
    Rng rng(500 + seed);
    const PointCloud pc{rng.gaussian(12, 3)};
    const FeaturePair f = random_features(rng, 12, c);
    EXPECT_LT((bico_forward(pc, f, w) - naive_bico(pc, f, w)).cwiseAbs().maxCoeff(), 1e-11);
  }
}

TEST(BicoForward, ZeroFeaturesGiveConstantRows) {
  const FusionConfig c = tiny_config();
  const FusionWeights w = init_fusion_weights(c, 18);
  Rng rng(19);
  const PointCloud pc{rng.gaussian(9, 3)};
  const FeaturePair f{Matrix::Zero(9, c.geo_dim), Matrix::Zero(9, c.app_dim)};
  const Matrix out = bico_forward(pc, f, w);
  const Vector expect = w.proj_w2 * gelu(Matrix(w.proj_w1 * Vector::Zero(c.geo_dim + c.app_dim)));
  for (Eigen::Index i = 0; i < 9; ++i) EXPECT_EQ(out.row(i), expect.transpose());
}

TEST(BicoForward, PointPermutationEquivariance) {
  const FusionConfig c = tiny_config();
  for (std::uint64_t t = 0; t < 100; ++t) {
    const FusionWeights w = randomized_weights(c, 600 + t);
    Rng rng(700 + t);
    const Eigen::Index n = 4 + static_cast<Eigen::Index>(rng.index(40));
    const PointCloud pc{rng.gaussian(n, 3)};
    const FeaturePair f = random_features(rng, n, c);
    auto perm = identity_permutation(static_cast<std::size_t>(n));
    rng.shuffle(perm);
    const PointCloud ppc{permute_rows(pc.coords, perm)};
    const FeaturePair pf{permute_rows(f.geo, perm), permute_rows(f.app, perm)};
    const Matrix out = bico_forward(pc, f, w);
    const Matrix pout = bico_forward(ppc, pf, w);
    ASSERT_EQ(pout, permute_rows(out, perm)) << "instance " << t;
  }
}

TEST(BicoForward, RejectsMismatchedFeatures) {
  const FusionConfig c = tiny_config();
  const FusionWeights w = init_fusion_weights(c, 20);
  Rng rng(21);
  const PointCloud pc{rng.gaussian(5, 3)};
  EXPECT_THROW(bico_forward(pc, FeaturePair{rng.gaussian(5, 3), rng.gaussian(5, c.app_dim)}, w), Error);
  EXPECT_THROW(bico_forward(PointCloud{rng.gaussian(1, 3)}, random_features(rng, 1, c), w), Error);
}
