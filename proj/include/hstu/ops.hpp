#pragma once

// Tape operations. Each op computes its value eagerly through the matrix
// kernels and, when the tape records, pushes a closure with the exact VJP.

#include <vector>

#include "hstu/mask.hpp"
#include "hstu/tape.hpp"

namespace hstu {

inline Var t_matmul(Tape& t, Var a, Var b) {
  Matrix out = matmul(t.val(a), t.val(b));
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [a, b](Tape& tt, const Matrix& g) {
    tt.add_grad(a, matmul_nt(g, tt.val(b)));
    tt.add_grad(b, matmul_tn(tt.val(a), g));
  });
}

inline Var t_matmul_nt(Tape& t, Var a, Var b) {
  Matrix out = matmul_nt(t.val(a), t.val(b));
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [a, b](Tape& tt, const Matrix& g) {
    tt.add_grad(a, matmul(g, tt.val(b)));
    tt.add_grad(b, matmul_tn(g, tt.val(a)));
  });
}

inline Var t_add(Tape& t, Var a, Var b) {
  Matrix out = add(t.val(a), t.val(b));
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [a, b](Tape& tt, const Matrix& g) {
    tt.add_grad(a, g);
    tt.add_grad(b, g);
  });
}

inline Var t_hadamard(Tape& t, Var a, Var b) {
  Matrix out = hadamard(t.val(a), t.val(b));
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [a, b](Tape& tt, const Matrix& g) {
    tt.add_grad(a, hadamard(g, tt.val(b)));
    tt.add_grad(b, hadamard(g, tt.val(a)));
  });
}

inline Var t_scale(Tape& t, Var a, real c) {
  Matrix out = scale(t.val(a), c);
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [a, c](Tape& tt, const Matrix& g) {
    tt.add_grad(a, scale(g, c));
  });
}

inline Var t_add_bias(Tape& t, Var m, Var bias) {
  Matrix out = add_row_broadcast(t.val(m), t.val(bias));
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [m, bias](Tape& tt, const Matrix& g) {
    tt.add_grad(m, g);
    tt.add_grad(bias, col_sums(g));
  });
}

inline Var t_silu(Tape& t, Var a) {
  Matrix out = silu(t.val(a));
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [a](Tape& tt, const Matrix& g) {
    tt.add_grad(a, silu_vjp(tt.val(a), g));
  });
}

inline Var t_gelu(Tape& t, Var a) {
  Matrix out = gelu(t.val(a));
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [a](Tape& tt, const Matrix& g) {
    tt.add_grad(a, gelu_vjp(tt.val(a), g));
  });
}

inline Var t_layer_norm(Tape& t, Var a, real eps) {
  Matrix out = layer_norm_rows(t.val(a), eps);
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [a, eps](Tape& tt, const Matrix& g) {
    tt.add_grad(a, layer_norm_rows_vjp(tt.val(a), eps, g));
  });
}

inline Var t_softmax_masked(Tape& t, Var a, const Matrix* mask) {
  Matrix p = softmax_rows(t.val(a), mask);
  if (!t.recording()) return t.input(std::move(p));
  Matrix saved = p;
  return t.push(std::move(p), [a, saved = std::move(saved)](Tape& tt, const Matrix& g) {
    tt.add_grad(a, softmax_rows_vjp(saved, g));
  });
}

inline Var t_slice_cols(Tape& t, Var a, std::size_t c0, std::size_t len) {
  const Matrix& src = t.val(a);
  require(c0 + len <= src.cols(), "t_slice_cols: range out of bounds");
  Matrix out(src.rows(), len);
  for (std::size_t i = 0; i < src.rows(); ++i)
    for (std::size_t j = 0; j < len; ++j) out(i, j) = src(i, c0 + j);
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [a, c0, len](Tape& tt, const Matrix& g) {
    const Matrix& src = tt.val(a);
    Matrix pad(src.rows(), src.cols());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < len; ++j) pad(i, c0 + j) = g(i, j);
    tt.add_grad(a, pad);
  });
}

inline Var t_concat_cols(Tape& t, const std::vector<Var>& parts) {
  require(!parts.empty(), "t_concat_cols: empty input");
  std::size_t rows = t.val(parts[0]).rows(), cols = 0;
  for (Var p : parts) {
    require(t.val(p).rows() == rows, "t_concat_cols: row mismatch");
    cols += t.val(p).cols();
  }
  Matrix out(rows, cols);
  std::size_t at = 0;
  for (Var p : parts) {
    const Matrix& m = t.val(p);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) out(i, at + j) = m(i, j);
    at += m.cols();
  }
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [parts](Tape& tt, const Matrix& g) {
    std::size_t at = 0;
    for (Var p : parts) {
      const Matrix& m = tt.val(p);
      Matrix gp(m.rows(), m.cols());
      for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) gp(i, j) = g(i, at + j);
      tt.add_grad(p, gp);
      at += m.cols();
    }
  });
}

inline Var t_concat_rows(Tape& t, const std::vector<Var>& parts) {
  require(!parts.empty(), "t_concat_rows: empty input");
  std::size_t cols = t.val(parts[0]).cols(), rows = 0;
  for (Var p : parts) {
    require(t.val(p).cols() == cols, "t_concat_rows: column mismatch");
    rows += t.val(p).rows();
  }
  Matrix out(rows, cols);
  std::size_t at = 0;
  for (Var p : parts) {
    const Matrix& m = t.val(p);
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < cols; ++j) out(at + i, j) = m(i, j);
    at += m.rows();
  }
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [parts](Tape& tt, const Matrix& g) {
    std::size_t at = 0;
    for (Var p : parts) {
      const Matrix& m = tt.val(p);
      Matrix gp(m.rows(), m.cols());
      for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) gp(i, j) = g(at + i, j);
      tt.add_grad(p, gp);
      at += m.rows();
    }
  });
}

inline Var t_gather_rows(Tape& t, Var a, std::vector<std::size_t> rows) {
  const Matrix& src = t.val(a);
  Matrix out(rows.size(), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < src.rows(), "t_gather_rows: row out of range");
    for (std::size_t j = 0; j < src.cols(); ++j) out(i, j) = src(rows[i], j);
  }
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [a, rows = std::move(rows)](Tape& tt, const Matrix& g) {
    const Matrix& src = tt.val(a);
    Matrix pad(src.rows(), src.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) pad(rows[i], j) += g(i, j);
    tt.add_grad(a, pad);
  });
}

// Sum of selected rows of a parameter matrix, one output row per group; used
// for action-set embeddings (sum of atomic event rows).
inline Var t_sum_param_rows(Tape& t, Var table, std::vector<std::vector<std::size_t>> groups) {
  const Matrix& src = t.val(table);
  Matrix out(groups.size(), src.cols());
  for (std::size_t i = 0; i < groups.size(); ++i)
    for (std::size_t r : groups[i]) {
      require(r < src.rows(), "t_sum_param_rows: row out of range");
      for (std::size_t j = 0; j < src.cols(); ++j) out(i, j) += src(r, j);
    }
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [table, groups = std::move(groups)](Tape& tt, const Matrix& g) {
    const Matrix& src = tt.val(table);
    Matrix pad(src.rows(), src.cols());
    for (std::size_t i = 0; i < groups.size(); ++i)
      for (std::size_t r : groups[i])
        for (std::size_t j = 0; j < g.cols(); ++j) pad(r, j) += g(i, j);
    tt.add_grad(table, pad);
  });
}

// ----- relative attention bias -----------------------------------------------------
// bias[i][j] = pos_table[pos_idx[i][j]] + temp_table[temp_idx[i][j]], either
// side optional. Index matrices are precomputed constants.

inline Var t_rab(Tape& t, Var pos_table, Var temp_table, std::vector<std::int32_t> pos_idx,
                 std::vector<std::int32_t> temp_idx, std::size_t rows, std::size_t cols) {
  require(pos_table >= 0 || temp_table >= 0, "t_rab: at least one table required");
  Matrix out(rows, cols);
  if (pos_table >= 0) {
    const Matrix& pt = t.val(pos_table);
    require(pos_idx.size() == rows * cols, "t_rab: pos index size mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += pt.data()[pos_idx[i]];
  }
  if (temp_table >= 0) {
    const Matrix& tt_ = t.val(temp_table);
    require(temp_idx.size() == rows * cols, "t_rab: temp index size mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += tt_.data()[temp_idx[i]];
  }
  count_other_flops(out.size());
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [pos_table, temp_table, pos_idx = std::move(pos_idx),
                                 temp_idx = std::move(temp_idx)](Tape& tt, const Matrix& g) {
    if (pos_table >= 0) {
      Matrix gp(1, tt.val(pos_table).cols());
      for (std::size_t i = 0; i < g.size(); ++i) gp.data()[pos_idx[i]] += g.data()[i];
      tt.add_grad(pos_table, gp);
    }
    if (temp_table >= 0) {
      Matrix gt(1, tt.val(temp_table).cols());
      for (std::size_t i = 0; i < g.size(); ++i) gt.data()[temp_idx[i]] += g.data()[i];
      tt.add_grad(temp_table, gt);
    }
  });
}

// ----- fused multi-head attention ----------------------------------------------------

enum class AttnKind { pointwise, softmax };

// q: nq x h*d_qk, k: nk x h*d_qk, v: nk x h*d_v, rab: nq x nk or -1.
// Pointwise: out += silu(q.k + rab) / divisor * v over unmasked cells.
// Softmax: out += softmax(q.k / sqrt(d_qk) + rab) * v over unmasked cells.
// divisors has one entry per query row (pointwise only); empty means 1.
inline Var t_attention(Tape& t, Var q, Var k, Var v, Var rab, std::size_t heads,
                       const AttentionMask& mask, AttnKind kind, std::vector<real> divisors) {
  const Matrix& Q = t.val(q);
  const Matrix& K = t.val(k);
  const Matrix& V = t.val(v);
  require(heads > 0 && Q.cols() % heads == 0 && K.cols() % heads == 0 && V.cols() % heads == 0,
          "t_attention: column count not divisible by heads");
  const std::size_t nq = Q.rows(), nk = K.rows();
  const std::size_t d_qk = Q.cols() / heads, d_v = V.cols() / heads;
  require(K.cols() == Q.cols(), "t_attention: q/k width mismatch");
  require(V.rows() == nk, "t_attention: k/v row mismatch");
  if (rab >= 0)
    require(t.val(rab).rows() == nq && t.val(rab).cols() == nk, "t_attention: rab shape mismatch");
  if (!divisors.empty()) require(divisors.size() == nq, "t_attention: divisor count mismatch");

  const Matrix* RAB = rab >= 0 ? &t.val(rab) : nullptr;
  const real qk_scale = real(1) / std::sqrt(real(d_qk));

  Matrix out(nq, heads * d_v);
  // saved per head: pre-activation scores (pointwise) or probabilities (softmax)
  std::vector<Matrix> saved(heads);
  std::uint64_t cells = 0;

  for (std::size_t hd = 0; hd < heads; ++hd) {
    const std::size_t qc = hd * d_qk, vc = hd * d_v;
    Matrix sc(nq, nk);
    for (std::size_t i = 0; i < nq; ++i) {
      const real* qi = Q.row(i) + qc;
      const real div = divisors.empty() ? real(1) : divisors[i];
      real* orow = out.row(i) + vc;
      if (kind == AttnKind::pointwise) {
        mask.for_each_allowed(i, nk, [&](std::size_t j) {
          const real* kj = K.row(j) + qc;
          real s = 0;
          for (std::size_t c = 0; c < d_qk; ++c) s += qi[c] * kj[c];
          if (RAB) s += (*RAB)(i, j);
          sc(i, j) = s;
          const real w = silu_scalar(s) / div;
          const real* vj = V.row(j) + vc;
          for (std::size_t c = 0; c < d_v; ++c) orow[c] += w * vj[c];
          ++cells;
        });
      } else {
        // two passes: scores with max tracking, then normalized weighting
        real best = 0;
        bool any = false;
        mask.for_each_allowed(i, nk, [&](std::size_t j) {
          const real* kj = K.row(j) + qc;
          real s = 0;
          for (std::size_t c = 0; c < d_qk; ++c) s += qi[c] * kj[c];
          s *= qk_scale;
          if (RAB) s += (*RAB)(i, j);
          sc(i, j) = s;
          if (!any || s > best) best = s;
          any = true;
          ++cells;
        });
        if (!any) continue;
        real denom = 0;
        mask.for_each_allowed(i, nk, [&](std::size_t j) {
          sc(i, j) = std::exp(sc(i, j) - best);
          denom += sc(i, j);
        });
        mask.for_each_allowed(i, nk, [&](std::size_t j) {
          sc(i, j) /= denom;  // sc now holds probabilities
          const real* vj = V.row(j) + vc;
          for (std::size_t c = 0; c < d_v; ++c) orow[c] += sc(i, j) * vj[c];
        });
      }
    }
    saved[hd] = std::move(sc);
  }
  count_attention_flops(cells * (2 * d_qk + 2 * d_v + kAttnCellExtraFlops));

  if (!t.recording()) return t.input(std::move(out));

  return t.push(std::move(out), [q, k, v, rab, heads, mask, kind, d_qk, d_v, nq, nk, qk_scale,
                                 divisors = std::move(divisors),
                                 saved = std::move(saved)](Tape& tt, const Matrix& g) {
    const Matrix& Q = tt.val(q);
    const Matrix& K = tt.val(k);
    const Matrix& V = tt.val(v);
    Matrix dq(nq, heads * d_qk), dk(nk, heads * d_qk), dv(nk, heads * d_v);
    Matrix drab;
    if (rab >= 0) drab = Matrix(nq, nk);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t qc = hd * d_qk, vc = hd * d_v;
      const Matrix& sc = saved[hd];
      for (std::size_t i = 0; i < nq; ++i) {
        const real* qi = Q.row(i) + qc;
        const real* gi = g.row(i) + vc;
        const real div = divisors.empty() ? real(1) : divisors[i];
        if (kind == AttnKind::pointwise) {
          mask.for_each_allowed(i, nk, [&](std::size_t j) {
            const real* vj = V.row(j) + vc;
            real dw = 0;
            for (std::size_t c = 0; c < d_v; ++c) dw += gi[c] * vj[c];
            const real s = sc(i, j);
            const real w = silu_scalar(s) / div;
            const real ds = silu_grad_scalar(s) * dw / div;
            const real* kj = K.row(j) + qc;
            real* dqi = dq.row(i) + qc;
            real* dkj = dk.row(j) + qc;
            real* dvj = dv.row(j) + vc;
            for (std::size_t c = 0; c < d_qk; ++c) {
              dqi[c] += ds * kj[c];
              dkj[c] += ds * qi[c];
            }
            for (std::size_t c = 0; c < d_v; ++c) dvj[c] += w * gi[c];
            if (rab >= 0) drab(i, j) += ds;
          });
        } else {
          // dprob_j = g . v_j ; dz_j = p_j (dprob_j - sum_m p_m dprob_m)
          real pdot = 0;
          mask.for_each_allowed(i, nk, [&](std::size_t j) {
            const real* vj = V.row(j) + vc;
            real dp = 0;
            for (std::size_t c = 0; c < d_v; ++c) dp += gi[c] * vj[c];
            pdot += sc(i, j) * dp;
          });
          mask.for_each_allowed(i, nk, [&](std::size_t j) {
            const real* vj = V.row(j) + vc;
            real dp = 0;
            for (std::size_t c = 0; c < d_v; ++c) dp += gi[c] * vj[c];
            const real p = sc(i, j);
            const real dz = p * (dp - pdot);
            const real* kj = K.row(j) + qc;
            real* dqi = dq.row(i) + qc;
            real* dkj = dk.row(j) + qc;
            real* dvj = dv.row(j) + vc;
            for (std::size_t c = 0; c < d_qk; ++c) {
              dqi[c] += dz * qk_scale * kj[c];
              dkj[c] += dz * qk_scale * qi[c];
            }
            for (std::size_t c = 0; c < d_v; ++c) dvj[c] += p * gi[c];
            if (rab >= 0) drab(i, j) += dz;
          });
        }
      }
    }
    tt.add_grad(q, dq);
    tt.add_grad(k, dk);
    tt.add_grad(v, dv);
    if (rab >= 0) tt.add_grad(rab, drab);
  });
}

inline Var t_sum_all(Tape& t, Var a) {
  Matrix out(1, 1, sum(t.val(a)));
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [a](Tape& tt, const Matrix& g) {
    const Matrix& src = tt.val(a);
    Matrix ga(src.rows(), src.cols(), g(0, 0));
    tt.add_grad(a, ga);
  });
}

// ----- losses -----------------------------------------------------------------------

// Sum over rows of -log softmax(z_p)[target_p]. Stable via max shift.
inline Var t_softmax_xent_rows(Tape& t, Var logits, std::vector<std::size_t> targets) {
  const Matrix& Z = t.val(logits);
  require(targets.size() == Z.rows(), "t_softmax_xent_rows: target count mismatch");
  Matrix probs(Z.rows(), Z.cols());
  double total = 0;
  for (std::size_t p = 0; p < Z.rows(); ++p) {
    require(targets[p] < Z.cols(), "t_softmax_xent_rows: target out of range");
    const real* z = Z.row(p);
    real best = z[0];
    for (std::size_t c = 1; c < Z.cols(); ++c) best = std::max(best, z[c]);
    double denom = 0;
    for (std::size_t c = 0; c < Z.cols(); ++c) denom += std::exp(double(z[c] - best));
    double lse = double(best) + std::log(denom);
    total += lse - double(z[targets[p]]);
    for (std::size_t c = 0; c < Z.cols(); ++c)
      probs(p, c) = real(std::exp(double(z[c] - best)) / denom);
  }
  count_other_flops(3 * Z.size());
  Matrix out(1, 1, real(total));
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [logits, targets = std::move(targets),
                                 probs = std::move(probs)](Tape& tt, const Matrix& g) {
    Matrix dz = probs;
    for (std::size_t p = 0; p < dz.rows(); ++p) dz(p, targets[p]) -= real(1);
    tt.add_grad(logits, scale(dz, g(0, 0)));
  });
}

// Multi-event binary cross entropy from logits, summed over rows:
// sum_p sum_e w_e * (softplus(z) - y*z). weights empty means all ones.
inline Var t_bce_multi(Tape& t, Var logits, std::vector<std::uint64_t> labels,
                       std::vector<real> weights) {
  const Matrix& Z = t.val(logits);
  require(labels.size() == Z.rows(), "t_bce_multi: label count mismatch");
  require(weights.empty() || weights.size() == Z.cols(), "t_bce_multi: weight count mismatch");
  double total = 0;
  for (std::size_t p = 0; p < Z.rows(); ++p) {
    const real* z = Z.row(p);
    for (std::size_t e = 0; e < Z.cols(); ++e) {
      const double w = weights.empty() ? 1.0 : double(weights[e]);
      const double y = (labels[p] >> e) & 1ull;
      const double zz = double(z[e]);
      const double softplus = zz > 0 ? zz + std::log1p(std::exp(-zz)) : std::log1p(std::exp(zz));
      total += w * (softplus - y * zz);
    }
  }
  count_other_flops(4 * Z.size());
  Matrix out(1, 1, real(total));
  if (!t.recording()) return t.input(std::move(out));
  return t.push(std::move(out), [logits, labels = std::move(labels),
                                 weights = std::move(weights)](Tape& tt, const Matrix& g) {
    const Matrix& Z = tt.val(logits);
    Matrix dz(Z.rows(), Z.cols());
    for (std::size_t p = 0; p < Z.rows(); ++p)
      for (std::size_t e = 0; e < Z.cols(); ++e) {
        const real w = weights.empty() ? real(1) : weights[e];
        const real y = real((labels[p] >> e) & 1ull);
        dz(p, e) = w * (sigmoid(Z(p, e)) - y) * g(0, 0);
      }
    tt.add_grad(logits, dz);
  });
}

// Sampled softmax over embedding-table candidates. For each query row p the
// candidate rows are cand_rows[p*C .. p*C+C-1], target at local index 0.
// Returns the summed loss; gradients flow to u and sparsely into the table.
inline Var t_sampled_softmax(Tape& t, Var u, const EmbeddingTable& table,
                             std::vector<std::size_t> cand_rows, std::size_t C) {
  const Matrix& U = t.val(u);
  const std::size_t P = U.rows(), d = U.cols();
  require(C >= 1 && cand_rows.size() == P * C, "t_sampled_softmax: candidate layout mismatch");
  const Matrix& W = table.weights();
  Matrix probs(P, C);
  double total = 0;
  for (std::size_t p = 0; p < P; ++p) {
    const real* up = U.row(p);
    std::vector<double> z(C);
    double best = -1e300;
    for (std::size_t c = 0; c < C; ++c) {
      const real* w = W.row(cand_rows[p * C + c]);
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += double(up[j]) * double(w[j]);
      z[c] = dot;
      best = std::max(best, dot);
    }
    double denom = 0;
    for (std::size_t c = 0; c < C; ++c) denom += std::exp(z[c] - best);
    total += best + std::log(denom) - z[0];
    for (std::size_t c = 0; c < C; ++c) probs(p, c) = real(std::exp(z[c] - best) / denom);
  }
  count_linear_flops(2 * P * C * d);
  Matrix out(1, 1, real(total));
  if (!t.recording()) return t.input(std::move(out));
  const EmbeddingTable* tp = &table;
  return t.push(std::move(out), [u, tp, cand_rows = std::move(cand_rows), C,
                                 probs = std::move(probs)](Tape& tt, const Matrix& g) {
    const Matrix& U = tt.val(u);
    const Matrix& W = tp->weights();
    const std::size_t P = U.rows(), d = U.cols();
    const real gs = g(0, 0);
    Matrix du(P, d);
    std::vector<real> grow(d);
    for (std::size_t p = 0; p < P; ++p) {
      const real* up = U.row(p);
      real* dup = du.row(p);
      for (std::size_t c = 0; c < C; ++c) {
        const real coeff = (probs(p, c) - (c == 0 ? real(1) : real(0))) * gs;
        const std::size_t row = cand_rows[p * C + c];
        const real* w = W.row(row);
        for (std::size_t j = 0; j < d; ++j) {
          dup[j] += coeff * w[j];
          grow[j] = coeff * up[j];
        }
        tt.add_sparse_grad(tp, row, grow.data(), d);
      }
    }
    tt.add_grad(u, du);
  });
}

}  // namespace hstu
