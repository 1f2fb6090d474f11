#pragma once

// Hash-bucketed embedding table with a rowwise AdamW optimizer: full first
// moment per row, one scalar second moment per row (d + 1 state scalars).

#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "hstu/matrix.hpp"

namespace hstu {

// Knuth multiplicative hash folded into [0, table_rows).
inline std::size_t hash_id(std::uint64_t id, std::size_t table_rows) {
  require(table_rows > 0, "hash_id: table_rows must be positive");
  std::uint64_t h = (id * 2654435761ull) & 0xffffffffull;
  return static_cast<std::size_t>(h % table_rows);
}

// Row-indexed gradient accumulator; rows are visited in index order so the
// optimizer update order is deterministic.
struct SparseGrad {
  std::map<std::size_t, Matrix> rows;  // row index -> 1 x d gradient

  void add(std::size_t row, const real* g, std::size_t d) {
    auto it = rows.find(row);
    if (it == rows.end()) {
      Matrix m(1, d);
      for (std::size_t j = 0; j < d; ++j) m.data()[j] = g[j];
      rows.emplace(row, std::move(m));
    } else {
      for (std::size_t j = 0; j < d; ++j) it->second.data()[j] += g[j];
    }
  }
};

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::size_t rows, std::size_t dim, Rng& rng, real init_scale = real(0.1))
      : weights_(rows, dim), m_(rows, dim), v_(rows, 1) {
    for (std::size_t i = 0; i < weights_.size(); ++i)
      weights_.data()[i] = real(rng.normal()) * init_scale;
  }

  std::size_t table_rows() const { return weights_.rows(); }
  std::size_t dim() const { return weights_.cols(); }

  Matrix& weights() { return weights_; }
  const Matrix& weights() const { return weights_; }

  std::size_t row_of(std::uint64_t id) const { return hash_id(id, weights_.rows()); }

  // Gathered rows; out row i = weights[hash_id(ids[i])].
  Matrix lookup(const std::vector<std::uint64_t>& ids) const {
    Matrix out(ids.size(), dim());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const real* src = weights_.row(row_of(ids[i]));
      real* dst = out.row(i);
      for (std::size_t j = 0; j < dim(); ++j) dst[j] = src[j];
    }
    return out;
  }

  // Exactly d + 1 optimizer scalars per row.
  static constexpr std::size_t optimizer_state_scalars_per_row(std::size_t d) { return d + 1; }

  // Rowwise AdamW on the touched rows only: full first moment, scalar second
  // moment tracking the mean squared gradient of the row.
  void rowwise_adamw_step(const SparseGrad& grads, real lr, real beta1, real beta2, real eps,
                          real weight_decay, std::uint64_t step_count) {
    require(step_count >= 1, "rowwise_adamw_step: step_count starts at 1");
    const std::size_t d = dim();
    const real bc1 = real(1) - std::pow(beta1, real(step_count));
    const real bc2 = real(1) - std::pow(beta2, real(step_count));
    for (const auto& [row, g] : grads.rows) {
      require(row < table_rows(), "rowwise_adamw_step: row out of range");
      const real* gr = g.row(0);
      for (std::size_t j = 0; j < d; ++j)
        if (!std::isfinite(gr[j])) throw NumericError("rowwise_adamw_step: non-finite gradient");
      real* mrow = m_.row(row);
      real msq = 0;
      for (std::size_t j = 0; j < d; ++j) {
        mrow[j] = beta1 * mrow[j] + (real(1) - beta1) * gr[j];
        msq += gr[j] * gr[j];
      }
      msq /= real(d);
      real& v = *v_.row(row);
      v = beta2 * v + (real(1) - beta2) * msq;
      const real vhat = v / bc2;
      const real denom = std::sqrt(vhat) + eps;
      real* w = weights_.row(row);
      for (std::size_t j = 0; j < d; ++j) {
        const real mhat = mrow[j] / bc1;
        w[j] -= lr * (mhat / denom + weight_decay * w[j]);
      }
    }
  }

  // ----- checkpoint: magic "HSTUEMB1", u64 rows, u64 dim, f32 weights, then
  // optimizer state (f32 m, f32 v, u64 step hint is owned by the trainer and
  // not stored here).
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path);
    out.write("HSTUEMB1", 8);
    write_u64(out, weights_.rows());
    write_u64(out, weights_.cols());
    write_f32_matrix(out, weights_);
    write_f32_matrix(out, m_);
    write_f32_matrix(out, v_);
    if (!out) throw IoError("write failed: " + path);
  }

  static EmbeddingTable load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for read: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != "HSTUEMB1")
      throw IoError("bad embedding checkpoint magic: " + path);
    std::uint64_t rows = read_u64(in), dim = read_u64(in);
    EmbeddingTable t;
    t.weights_ = read_f32_matrix(in, rows, dim);
    t.m_ = read_f32_matrix(in, rows, dim);
    t.v_ = read_f32_matrix(in, rows, 1);
    if (!in) throw IoError("truncated embedding checkpoint: " + path);
    return t;
  }

  // optimizer state accessors (tests assert the d+1 contract on these)
  const Matrix& moment1() const { return m_; }
  const Matrix& moment2_scalar() const { return v_; }

  static void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (v >> (8 * i)) & 0xff;
    out.write(reinterpret_cast<const char*>(b), 8);
  }

  static std::uint64_t read_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
  }

  static void write_f32_matrix(std::ostream& out, const Matrix& m) {
    for (std::size_t i = 0; i < m.size(); ++i) {
      float f = static_cast<float>(m.data()[i]);
      out.write(reinterpret_cast<const char*>(&f), 4);
    }
  }

  static Matrix read_f32_matrix(std::istream& in, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) {
      float f;
      in.read(reinterpret_cast<char*>(&f), 4);
      m.data()[i] = real(f);
    }
    return m;
  }

 private:
  Matrix weights_;
  Matrix m_;  // rows x d
  Matrix v_;  // rows x 1
};

}  // namespace hstu
