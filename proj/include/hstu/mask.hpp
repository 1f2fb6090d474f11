#pragma once

// Attention masks. Structured kinds are iterated without materializing the
// boolean matrix; the dense kind wraps an explicit 0/1 matrix.

#include "hstu/matrix.hpp"

namespace hstu {

struct AttentionMask {
  enum class Kind { none, causal, mfalcon, dense };

  Kind kind = Kind::causal;
  // mfalcon: positions >= prefix are candidates; they see the prefix and
  // themselves but not each other.
  std::size_t prefix = 0;
  const Matrix* dense_mask = nullptr;

  static AttentionMask none() { return {Kind::none, 0, nullptr}; }
  static AttentionMask causal() { return {Kind::causal, 0, nullptr}; }
  static AttentionMask mfalcon(std::size_t prefix_len) {
    return {Kind::mfalcon, prefix_len, nullptr};
  }
  static AttentionMask dense(const Matrix* m) { return {Kind::dense, 0, m}; }

  bool allowed(std::size_t i, std::size_t j) const {
    switch (kind) {
      case Kind::none:
        return true;
      case Kind::causal:
        return j <= i;
      case Kind::mfalcon:
        if (j > i) return false;
        return i < prefix || j < prefix || j == i;
      case Kind::dense:
        return (*dense_mask)(i, j) != real(0);
    }
    return false;
  }

  // Visits allowed columns of row i in ascending order.
  template <class F>
  void for_each_allowed(std::size_t i, std::size_t cols, F&& f) const {
    switch (kind) {
      case Kind::none:
        for (std::size_t j = 0; j < cols; ++j) f(j);
        return;
      case Kind::causal:
        for (std::size_t j = 0; j <= i && j < cols; ++j) f(j);
        return;
      case Kind::mfalcon: {
        std::size_t causal_end = std::min(i + 1, cols);
        if (i < prefix) {
          for (std::size_t j = 0; j < causal_end; ++j) f(j);
        } else {
          std::size_t run = std::min(prefix, cols);
          for (std::size_t j = 0; j < run; ++j) f(j);
          if (i < cols) f(i);
        }
        return;
      }
      case Kind::dense:
        for (std::size_t j = 0; j < cols; ++j)
          if ((*dense_mask)(i, j) != real(0)) f(j);
        return;
    }
  }

  std::size_t allowed_count(std::size_t i, std::size_t cols) const {
    switch (kind) {
      case Kind::none:
        return cols;
      case Kind::causal:
        return std::min(i + 1, cols);
      case Kind::mfalcon: {
        if (i < prefix) return std::min(i + 1, cols);
        std::size_t run = std::min(prefix, cols);
        return run + (i < cols ? 1 : 0);
      }
      case Kind::dense: {
        std::size_t c = 0;
        for (std::size_t j = 0; j < cols; ++j)
          if ((*dense_mask)(i, j) != real(0)) ++c;
        return c;
      }
    }
    return 0;
  }

  std::size_t total_cells(std::size_t rows, std::size_t cols) const {
    std::size_t total = 0;
    for (std::size_t i = 0; i < rows; ++i) total += allowed_count(i, cols);
    return total;
  }

  Matrix to_dense(std::size_t rows, std::size_t cols) const {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) m(i, j) = allowed(i, j) ? real(1) : real(0);
    return m;
  }
};

}  // namespace hstu
