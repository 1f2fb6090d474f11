#pragma once

// Dense row-major matrix plus the primitive kernels everything else composes.
// Accumulation order is pinned (k ascending for every output cell) so repeated
// runs are bit-identical.

#include <algorithm>
#include <cstring>
#include <initializer_list>
#include <vector>

#include "hstu/common.hpp"

namespace hstu {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, real fill = real(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from(std::initializer_list<std::initializer_list<real>> init) {
    Matrix m(init.size(), init.size() ? init.begin()->size() : 0);
    std::size_t i = 0;
    for (const auto& row : init) {
      require(row.size() == m.cols_, "Matrix::from: ragged initializer");
      std::copy(row.begin(), row.end(), m.row(i));
      ++i;
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  real& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  real operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  real* row(std::size_t i) { return data_.data() + i * cols_; }
  const real* row(std::size_t i) const { return data_.data() + i * cols_; }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  void fill(real v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (real v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<real> data_;
};

// ----- elementwise ------------------------------------------------------------

inline real sigmoid(real x) {
  // Split on sign to avoid overflow in exp.
  if (x >= 0) {
    real e = std::exp(-x);
    return real(1) / (real(1) + e);
  }
  real e = std::exp(x);
  return e / (real(1) + e);
}

inline real silu_scalar(real x) { return x * sigmoid(x); }

inline real silu_grad_scalar(real x) {
  real s = sigmoid(x);
  return s * (real(1) + x * (real(1) - s));
}

inline real gelu_scalar(real x) {
  return real(0.5) * x * (real(1) + std::erf(x * real(0.7071067811865475244)));
}

inline real gelu_grad_scalar(real x) {
  constexpr real inv_sqrt2 = real(0.7071067811865475244);
  constexpr real inv_sqrt_2pi = real(0.3989422804014326779);
  real cdf = real(0.5) * (real(1) + std::erf(x * inv_sqrt2));
  real pdf = inv_sqrt_2pi * std::exp(real(-0.5) * x * x);
  return cdf + x * pdf;
}

inline Matrix silu(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = silu_scalar(m.data()[i]);
  count_other_flops(4 * m.size());
  return out;
}

// d silu(x)/dx * g
inline Matrix silu_vjp(const Matrix& x, const Matrix& g) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i)
    out.data()[i] = silu_grad_scalar(x.data()[i]) * g.data()[i];
  return out;
}

inline Matrix gelu(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = gelu_scalar(m.data()[i]);
  count_other_flops(6 * m.size());
  return out;
}

inline Matrix gelu_vjp(const Matrix& x, const Matrix& g) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i)
    out.data()[i] = gelu_grad_scalar(x.data()[i]) * g.data()[i];
  return out;
}

// ----- linear algebra ---------------------------------------------------------

inline void matmul_into(const Matrix& a, const Matrix& b, Matrix& c) {
  require(a.cols() == b.rows(), "matmul: inner dims differ");
  c = Matrix(a.rows(), b.cols());
  const std::size_t K = a.cols(), N = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    real* crow = c.row(i);
    const real* arow = a.row(i);
    for (std::size_t k = 0; k < K; ++k) {
      const real aik = arow[k];
      const real* brow = b.row(k);
      for (std::size_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
    }
  }
  count_linear_flops(2 * a.rows() * K * N);
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c;
  matmul_into(a, b, c);
  return c;
}

// a * b^T; rows dotted with rows, unit stride on both.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), "matmul_nt: inner dims differ");
  Matrix c(a.rows(), b.rows());
  const std::size_t K = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const real* arow = a.row(i);
    real* crow = c.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const real* brow = b.row(j);
      real acc = 0;
      for (std::size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
      crow[j] = acc;
    }
  }
  count_linear_flops(2 * a.rows() * K * b.rows());
  return c;
}

// a^T * b; used by matmul backward.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), "matmul_tn: inner dims differ");
  Matrix c(a.cols(), b.cols());
  const std::size_t K = a.rows(), N = b.cols();
  for (std::size_t k = 0; k < K; ++k) {
    const real* arow = a.row(k);
    const real* brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      real* crow = c.row(i);
      const real aik = arow[i];
      for (std::size_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
    }
  }
  count_linear_flops(2 * K * a.cols() * N);
  return c;
}

inline Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "add: shape mismatch");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  count_other_flops(a.size());
  return out;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "sub: shape mismatch");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  count_other_flops(a.size());
  return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "hadamard: shape mismatch");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  count_other_flops(a.size());
  return out;
}

inline Matrix scale(const Matrix& a, real c) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
  count_other_flops(a.size());
  return out;
}

// m + row broadcast over every row of m (bias add).
inline Matrix add_row_broadcast(const Matrix& m, const Matrix& rowvec) {
  require(rowvec.rows() == 1 && rowvec.cols() == m.cols(), "add_row_broadcast: bad bias shape");
  Matrix out(m.rows(), m.cols());
  const real* b = rowvec.row(0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const real* src = m.row(i);
    real* dst = out.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) dst[j] = src[j] + b[j];
  }
  count_linear_flops(m.size());
  return out;
}

inline Matrix col_sums(const Matrix& m) {
  Matrix out(1, m.cols());
  real* o = out.row(0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const real* r = m.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) o[j] += r[j];
  }
  return out;
}

inline void accumulate(Matrix& into, const Matrix& g) {
  if (into.empty()) {
    into = g;
    return;
  }
  require(into.same_shape(g), "accumulate: shape mismatch");
  for (std::size_t i = 0; i < into.size(); ++i) into.data()[i] += g.data()[i];
}

inline real sum(const Matrix& m) {
  real acc = 0;
  for (std::size_t i = 0; i < m.size(); ++i) acc += m.data()[i];
  return acc;
}

inline real max_abs(const Matrix& m) {
  real best = 0;
  for (std::size_t i = 0; i < m.size(); ++i) best = std::max(best, std::abs(m.data()[i]));
  return best;
}

inline real max_abs_diff(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "max_abs_diff: shape mismatch");
  real best = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    best = std::max(best, std::abs(a.data()[i] - b.data()[i]));
  return best;
}

// ----- row-wise normalization ---------------------------------------------------

// Per-row layer norm over all columns, population variance, no learned affine.
inline Matrix layer_norm_rows(const Matrix& m, real eps) {
  Matrix out(m.rows(), m.cols());
  const std::size_t n = m.cols();
  require(n > 0, "layer_norm_rows: empty rows");
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const real* x = m.row(i);
    real mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += x[j];
    mean /= real(n);
    real var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= real(n);
    real inv = real(1) / std::sqrt(var + eps);
    real* y = out.row(i);
    for (std::size_t j = 0; j < n; ++j) y[j] = (x[j] - mean) * inv;
  }
  count_other_flops(5 * m.size());
  return out;
}

inline Matrix layer_norm_rows_vjp(const Matrix& x, real eps, const Matrix& g) {
  Matrix out(x.rows(), x.cols());
  const std::size_t n = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const real* xi = x.row(i);
    const real* gi = g.row(i);
    real mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += xi[j];
    mean /= real(n);
    real var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= real(n);
    real inv = real(1) / std::sqrt(var + eps);
    // y_j = (x_j - mean) * inv; dx = inv * (g - mean(g) - y * mean(g*y))
    real gmean = 0, gymean = 0;
    for (std::size_t j = 0; j < n; ++j) {
      real y = (xi[j] - mean) * inv;
      gmean += gi[j];
      gymean += gi[j] * y;
    }
    gmean /= real(n);
    gymean /= real(n);
    real* oi = out.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      real y = (xi[j] - mean) * inv;
      oi[j] = inv * (gi[j] - gmean - y * gymean);
    }
  }
  return out;
}

// ----- masked softmax ------------------------------------------------------------

// Row-wise softmax. mask (same shape, nonzero = allowed) may be null. Masked
// entries get exactly zero probability; a fully masked row stays all zero.
inline Matrix softmax_rows(const Matrix& m, const Matrix* mask = nullptr) {
  if (mask) require(mask->same_shape(m), "softmax_rows: mask shape mismatch");
  Matrix out(m.rows(), m.cols());
  const std::size_t n = m.cols();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const real* x = m.row(i);
    real best = 0;
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && (*mask)(i, j) == real(0)) continue;
      if (!any || x[j] > best) best = x[j];
      any = true;
    }
    real* y = out.row(i);
    if (!any) continue;  // fully masked row -> zeros
    real denom = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && (*mask)(i, j) == real(0)) {
        y[j] = 0;
        continue;
      }
      y[j] = std::exp(x[j] - best);
      denom += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= denom;
  }
  count_other_flops(4 * m.size());
  return out;
}

// VJP given the softmax output p: dz = p * (g - sum(p * g)) per row, zero at
// masked entries (p is already zero there).
inline Matrix softmax_rows_vjp(const Matrix& p, const Matrix& g) {
  Matrix out(p.rows(), p.cols());
  const std::size_t n = p.cols();
  for (std::size_t i = 0; i < p.rows(); ++i) {
    const real* pi = p.row(i);
    const real* gi = g.row(i);
    real dot = 0;
    for (std::size_t j = 0; j < n; ++j) dot += pi[j] * gi[j];
    real* oi = out.row(i);
    for (std::size_t j = 0; j < n; ++j) oi[j] = pi[j] * (gi[j] - dot);
  }
  return out;
}

}  // namespace hstu
