#pragma once

// Dense fp64 primitives shared by every compute module.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "alignparts/error.hpp"

namespace alignparts {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kFdStep = 1e-6;
inline constexpr double kTemperature = 0.07;  // contrastive and softmax-confidence temperature

inline bool all_finite(const Matrix& m) { return m.allFinite(); }
inline bool all_finite(const Vector& v) { return v.allFinite(); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  if (x > 0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

// Exact-erf GELU: x * Phi(x).
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline Matrix gelu(const Matrix& m) { return m.unaryExpr([](double v) { return gelu(v); }); }

inline Matrix relu(const Matrix& m) { return m.cwiseMax(0.0); }

namespace detail {
using Pack8 = double __attribute__((vector_size(64)));
}  // namespace detail

// x * w^T for row-major x (n x d) and w (o x d). Every output element runs
// through the same register-tiled loop, accumulating acc += x_k * w_k for
// k = 0..d-1 (edge tiles are zero padded), so a row's result does not depend
// on its position in x. Eigen's blocked GEMM uses different kernels for
// remainder rows, which breaks the permutation equivariance tests.
inline Matrix linear(const Matrix& x, const Matrix& w) {
  using detail::Pack8;
  require(x.cols() == w.cols(), "linear: inner dimension mismatch");
  constexpr Eigen::Index kRowTile = 6;
  constexpr Eigen::Index kPacks = 4;
  constexpr Eigen::Index kColTile = 8 * kPacks;
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  const Eigen::Index o = w.rows();
  Matrix out(n, o);
  std::vector<Pack8> panel(static_cast<std::size_t>(std::max<Eigen::Index>(d, 1) * kPacks));
  const std::vector<double> zeros(static_cast<std::size_t>(std::max<Eigen::Index>(d, 1)), 0.0);
  for (Eigen::Index j0 = 0; j0 < o; j0 += kColTile) {
    const Eigen::Index nc = std::min(kColTile, o - j0);
    for (Eigen::Index k = 0; k < d; ++k)
      for (Eigen::Index jj = 0; jj < kColTile; ++jj)
        panel[static_cast<std::size_t>(k * kPacks + jj / 8)][jj % 8] = jj < nc ? w(j0 + jj, k) : 0.0;
    for (Eigen::Index i0 = 0; i0 < n; i0 += kRowTile) {
      const double* rows[kRowTile];
      for (Eigen::Index r = 0; r < kRowTile; ++r) rows[r] = i0 + r < n ? x.data() + (i0 + r) * d : zeros.data();
      Pack8 acc[kRowTile][kPacks] = {};
      const Pack8* p = panel.data();
      for (Eigen::Index k = 0; k < d; ++k, p += kPacks) {
        double xv[kRowTile];
#pragma GCC unroll 8
        for (Eigen::Index r = 0; r < kRowTile; ++r) xv[r] = rows[r][k];
#pragma GCC unroll 4
        for (Eigen::Index c = 0; c < kPacks; ++c) {
          const Pack8 pc = p[c];
#pragma GCC unroll 8
          for (Eigen::Index r = 0; r < kRowTile; ++r) acc[r][c] += xv[r] * pc;
        }
      }
      for (Eigen::Index r = 0; r < kRowTile && i0 + r < n; ++r)
        for (Eigen::Index jj = 0; jj < nc; ++jj) out(i0 + r, j0 + jj) = acc[r][jj / 8][jj % 8];
    }
  }
  return out;
}

// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& m) {
  if (m.rows() == 0) fail(ErrorKind::invalid_argument, "softmax_rows: empty row count");
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    double total = 0.0;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      out(r, c) = std::exp(m(r, c) - mx);
      total += out(r, c);
    }
    out.row(r) /= total;
  }
  return out;
}

// Order-independent, correctly rounded summation (Shewchuk partials).
// Used wherever a sum must be bitwise invariant under permutation of its terms.
inline double exact_sum(std::span<const double> values) {
  std::vector<double> partials;
  for (double x : values) {
    std::size_t i = 0;
    for (double y : partials) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials[i++] = lo;
      x = hi;
    }
    partials.resize(i);
    partials.push_back(x);
  }
  // Round the partials to nearest, handling the half-way case like Python's fsum.
  if (partials.empty()) return 0.0;
  auto n = static_cast<std::ptrdiff_t>(partials.size()) - 1;
  double hi = partials[static_cast<std::size_t>(n)];
  double lo = 0.0;
  while (n > 0) {
    const double x = hi;
    const double y = partials[static_cast<std::size_t>(--n)];
    hi = x + y;
    const double yr = hi - x;
    lo = y - yr;
    if (lo != 0.0) break;
  }
  if (n > 0 && ((lo < 0 && partials[static_cast<std::size_t>(n - 1)] < 0) ||
                (lo > 0 && partials[static_cast<std::size_t>(n - 1)] > 0))) {
    const double y = lo * 2.0;
    const double x = hi + y;
    const double yr = x - hi;
    if (y == yr) hi = x;
  }
  return hi;
}

struct LayerNormParams {
  Vector gain;
  Vector bias;
};

inline LayerNormParams identity_layer_norm(Eigen::Index dim) {
  return {Vector::Ones(dim), Vector::Zero(dim)};
}

// Normalizes v to zero mean and unit variance, then applies gain and bias.
// A constant input normalizes to the zero vector.
inline Vector layer_norm(const Vector& v, const Vector& gain, const Vector& bias,
                         double eps = kLayerNormEps) {
  if (v.size() != gain.size() || v.size() != bias.size())
    fail(ErrorKind::invalid_argument, "layer_norm: dimension mismatch");
  require(eps > 0, "layer_norm: eps must be positive");
  const double n = static_cast<double>(v.size());
  const double mean = v.sum() / n;
  const Vector centered = v.array() - mean;
  const double var = centered.squaredNorm() / n;
  if (var == 0.0) return bias;
  return (centered.array() / std::sqrt(var + eps)).matrix().cwiseProduct(gain) + bias;
}

// Row-wise layer norm of an N x d matrix.
inline Matrix layer_norm_rows(const Matrix& m, const LayerNormParams& p, double eps = kLayerNormEps) {
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    out.row(r) = layer_norm(m.row(r).transpose(), p.gain, p.bias, eps).transpose();
  return out;
}

inline double cosine_sim(const Vector& a, const Vector& b) {
  require(a.size() == b.size(), "cosine_sim: dimension mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) fail(ErrorKind::invalid_argument, "cosine_sim: zero vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

inline Vector unit(const Vector& v) {
  const double n = v.norm();
  if (n == 0.0) fail(ErrorKind::invalid_argument, "unit: zero vector");
  return v / n;
}

inline Matrix normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (n == 0.0) fail(ErrorKind::invalid_argument, "normalize_rows: zero row");
    out.row(r) /= n;
  }
  return out;
}

// Central-difference gradient estimate.
inline Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                          double h = kFdStep) {
  require(h > 0, "fd_gradient: step must be positive");
  Vector g(x.size());
  Vector probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = probe(i);
    probe(i) = orig + h;
    const double fp = f(probe);
    probe(i) = orig - h;
    const double fm = f(probe);
    probe(i) = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      fail(ErrorKind::numeric, "fd_gradient: non-finite function value");
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

inline Matrix unflatten(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

// Deterministic generator. Gaussian samples use Box-Muller on raw mt19937_64
// output so streams are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n; }

  Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * normal();
    return m;
  }

  Vector gaussian_vector(Eigen::Index n, double scale = 1.0) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = scale * normal();
    return v;
  }

  Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = lo + (hi - lo) * uniform();
    return m;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Gaussian init with scale 1/sqrt(fan_in) for an out x in weight matrix.
inline Matrix init_weight(Rng& rng, Eigen::Index out, Eigen::Index in) {
  return rng.gaussian(out, in, 1.0 / std::sqrt(static_cast<double>(in)));
}

inline std::vector<std::size_t> identity_permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  return p;
}

// out.row(i) = m.row(perm[i])
inline Matrix permute_rows(const Matrix& m, std::span<const std::size_t> perm) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < perm.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(perm[i]));
  return out;
}

}  // namespace alignparts
