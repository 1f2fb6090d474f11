#pragma once

// Sequential transduction encoder: stacked pointwise-attention layers with a
// relative position/time bias, plus a softmax-attention ablation and a
// pre-norm transformer baseline behind the same interface.

#include <string>

#include "hstu/ops.hpp"

namespace hstu {

enum class Arch { hstu, transformer };

// Divisor for pointwise attention weights. max_len divides by a fixed
// reference length (the model's max sequence length, or an explicit override
// such as n+1 when scoring candidates); valid_count divides by the row's
// unmasked entry count; one disables normalization.
enum class NNormMode { max_len, valid_count, one };

struct HstuConfig {
  std::size_t d = 64;
  std::size_t heads = 2;
  std::size_t d_qk = 32;
  std::size_t d_v = 32;
  std::size_t layers = 2;
  std::size_t max_seq_len = 128;
  real norm_eps = real(1e-6);
  AttnKind attention = AttnKind::pointwise;
  NNormMode n_norm = NNormMode::max_len;
  bool rab_pos = true;
  bool rab_temp = true;
  std::size_t rab_pos_buckets = 128;  // relative distance clamps to [-(B-1), B-1]
  std::size_t rab_temp_buckets = 32;  // log2 time-delta buckets, bucket 0 for dt <= 0
  std::size_t d_ff = 0;               // transformer only; 0 means 4d

  std::size_t f1_cols() const { return 2 * heads * (d_qk + d_v); }
  std::size_t dff() const { return d_ff ? d_ff : 4 * d; }
  bool use_rab() const { return rab_pos || rab_temp; }

  void validate() const {
    require(d > 0, "config: d must be positive");
    require(heads > 0, "config: heads must be positive");
    require(d_qk > 0, "config: d_qk must be positive");
    require(d_v > 0, "config: d_v must be positive");
    require(layers > 0, "config: layers must be positive");
    require(max_seq_len > 0, "config: max_seq_len must be positive");
    require(norm_eps >= 0, "config: norm_eps must be nonnegative");
    require(rab_pos_buckets > 0, "config: rab_pos_buckets must be positive");
    require(rab_temp_buckets > 0, "config: rab_temp_buckets must be positive");
  }
};

// ----- relative attention bias indexing ---------------------------------------------

// Position side: clamp(i - j, -(B-1), B-1) shifted to [0, 2B-2].
inline std::size_t rab_pos_index(std::int64_t qi, std::int64_t kj, std::size_t buckets) {
  std::int64_t delta = qi - kj;
  std::int64_t lim = std::int64_t(buckets) - 1;
  delta = std::max(-lim, std::min(lim, delta));
  return std::size_t(delta + lim);
}

// Time side: bucket 0 holds dt <= 0, otherwise floor(log2 dt) clamped.
inline std::size_t temporal_bucket(std::int64_t dt, std::size_t buckets) {
  if (dt <= 0) return 0;
  std::size_t b = std::size_t(std::log2(double(dt)));
  return std::min(b, buckets - 1);
}

// ----- parameters --------------------------------------------------------------------

struct HstuLayerParams {
  Matrix w1, b1;      // d x 2h(d_qk+d_v)
  Matrix w2, b2;      // h*d_v x d
  Matrix rab_pos;     // 1 x (2B-1)
  Matrix rab_temp;    // 1 x T

  void init(const HstuConfig& cfg, Rng& rng) {
    auto fill = [&](Matrix& m, std::size_t r, std::size_t c, double scl) {
      m = Matrix(r, c);
      for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = real(rng.normal() * scl);
    };
    fill(w1, cfg.d, cfg.f1_cols(), 1.0 / std::sqrt(double(cfg.d)));
    b1 = Matrix(1, cfg.f1_cols());
    fill(w2, cfg.heads * cfg.d_v, cfg.d, 1.0 / std::sqrt(double(cfg.heads * cfg.d_v)));
    b2 = Matrix(1, cfg.d);
    rab_pos = Matrix(1, 2 * cfg.rab_pos_buckets - 1);
    rab_temp = Matrix(1, cfg.rab_temp_buckets);
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    f(prefix + ".w1", w1);
    f(prefix + ".b1", b1);
    f(prefix + ".w2", w2);
    f(prefix + ".b2", b2);
    f(prefix + ".rab_pos", rab_pos);
    f(prefix + ".rab_temp", rab_temp);
  }
};

struct TransformerLayerParams {
  Matrix wq, bq, wk, bk, wv, bv;  // d x h*d_qk / h*d_v
  Matrix wo, bo;                  // h*d_v x d
  Matrix ffn1, bffn1;             // d x d_ff
  Matrix ffn2, bffn2;             // d_ff x d

  void init(const HstuConfig& cfg, Rng& rng) {
    auto fill = [&](Matrix& m, std::size_t r, std::size_t c) {
      m = Matrix(r, c);
      double scl = 1.0 / std::sqrt(double(r));
      for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = real(rng.normal() * scl);
    };
    fill(wq, cfg.d, cfg.heads * cfg.d_qk);
    fill(wk, cfg.d, cfg.heads * cfg.d_qk);
    fill(wv, cfg.d, cfg.heads * cfg.d_v);
    fill(wo, cfg.heads * cfg.d_v, cfg.d);
    fill(ffn1, cfg.d, cfg.dff());
    fill(ffn2, cfg.dff(), cfg.d);
    bq = Matrix(1, cfg.heads * cfg.d_qk);
    bk = Matrix(1, cfg.heads * cfg.d_qk);
    bv = Matrix(1, cfg.heads * cfg.d_v);
    bo = Matrix(1, cfg.d);
    bffn1 = Matrix(1, cfg.dff());
    bffn2 = Matrix(1, cfg.d);
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    f(prefix + ".wq", wq);
    f(prefix + ".bq", bq);
    f(prefix + ".wk", wk);
    f(prefix + ".bk", bk);
    f(prefix + ".wv", wv);
    f(prefix + ".bv", bv);
    f(prefix + ".wo", wo);
    f(prefix + ".bo", bo);
    f(prefix + ".ffn1", ffn1);
    f(prefix + ".bffn1", bffn1);
    f(prefix + ".ffn2", ffn2);
    f(prefix + ".bffn2", bffn2);
  }
};

struct EncoderParams {
  Arch arch = Arch::hstu;
  std::vector<HstuLayerParams> hstu_layers;
  std::vector<TransformerLayerParams> tf_layers;

  void init(const HstuConfig& cfg, Arch a, Rng& rng) {
    arch = a;
    hstu_layers.clear();
    tf_layers.clear();
    if (arch == Arch::hstu) {
      hstu_layers.resize(cfg.layers);
      for (auto& l : hstu_layers) l.init(cfg, rng);
    } else {
      tf_layers.resize(cfg.layers);
      for (auto& l : tf_layers) l.init(cfg, rng);
    }
  }

  std::size_t layer_count() const {
    return arch == Arch::hstu ? hstu_layers.size() : tf_layers.size();
  }

  template <class F>
  void for_each_param(F&& f) {
    for (std::size_t i = 0; i < hstu_layers.size(); ++i)
      hstu_layers[i].for_each_param("layer" + std::to_string(i), f);
    for (std::size_t i = 0; i < tf_layers.size(); ++i)
      tf_layers[i].for_each_param("layer" + std::to_string(i), f);
  }
};

// ----- jagged batches -----------------------------------------------------------------

struct JaggedBatch {
  std::vector<std::size_t> offsets{0};  // size B+1, offsets[0] == 0
  Matrix tokens;                        // total x d
  std::vector<std::int64_t> timestamps;  // per token; empty means no time info

  std::size_t size() const { return offsets.size() - 1; }
  std::size_t len(std::size_t s) const { return offsets[s + 1] - offsets[s]; }

  void validate(std::size_t d) const {
    require(!offsets.empty() && offsets.front() == 0, "jagged: offsets must start at 0");
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
      require(offsets[s] < offsets[s + 1], "jagged: offsets must be strictly increasing");
    require(offsets.back() == tokens.rows(), "jagged: offsets do not cover the token rows");
    require(tokens.cols() == d, "jagged: token width differs from config d");
    require(timestamps.empty() || timestamps.size() == tokens.rows(),
            "jagged: timestamp count mismatch");
  }
};

// ----- layer forwards ------------------------------------------------------------------

struct LayerIo {
  Var k = -1, v = -1;  // packed projections, captured for KV caching
};

struct SequenceContext {
  AttentionMask mask = AttentionMask::causal();
  Var rab = -1;                 // n x n bias, or -1
  std::vector<real> divisors;   // per query row; empty means 1
};

inline Var hstu_layer_forward(Tape& t, Var x, const HstuLayerParams& p, const HstuConfig& cfg,
                              const SequenceContext& ctx, LayerIo* io = nullptr) {
  Var z = t_silu(t, t_add_bias(t, t_matmul(t, x, t.param(p.w1)), t.param(p.b1)));
  const std::size_t hdv = cfg.heads * cfg.d_v, hdqk = cfg.heads * cfg.d_qk;
  // split order U | V | Q | K, heads contiguous inside each block
  Var u = t_slice_cols(t, z, 0, hdv);
  Var v = t_slice_cols(t, z, hdv, hdv);
  Var q = t_slice_cols(t, z, 2 * hdv, hdqk);
  Var k = t_slice_cols(t, z, 2 * hdv + hdqk, hdqk);
  if (io) {
    io->k = k;
    io->v = v;
  }
  Var av = t_attention(t, q, k, v, ctx.rab, cfg.heads, ctx.mask, cfg.attention,
                       std::vector<real>(ctx.divisors));
  Var gated = t_hadamard(t, t_layer_norm(t, av, cfg.norm_eps), u);
  return t_add(t, x, t_add_bias(t, t_matmul(t, gated, t.param(p.w2)), t.param(p.b2)));
}

inline Var transformer_layer_forward(Tape& t, Var x, const TransformerLayerParams& p,
                                     const HstuConfig& cfg, const SequenceContext& ctx,
                                     LayerIo* io = nullptr) {
  Var xn = t_layer_norm(t, x, cfg.norm_eps);
  Var q = t_add_bias(t, t_matmul(t, xn, t.param(p.wq)), t.param(p.bq));
  Var k = t_add_bias(t, t_matmul(t, xn, t.param(p.wk)), t.param(p.bk));
  Var v = t_add_bias(t, t_matmul(t, xn, t.param(p.wv)), t.param(p.bv));
  if (io) {
    io->k = k;
    io->v = v;
  }
  Var av = t_attention(t, q, k, v, ctx.rab, cfg.heads, ctx.mask, AttnKind::softmax, {});
  Var x1 = t_add(t, x, t_add_bias(t, t_matmul(t, av, t.param(p.wo)), t.param(p.bo)));
  Var x1n = t_layer_norm(t, x1, cfg.norm_eps);
  Var hidden = t_gelu(t, t_add_bias(t, t_matmul(t, x1n, t.param(p.ffn1)), t.param(p.bffn1)));
  Var ffn = t_add_bias(t, t_matmul(t, hidden, t.param(p.ffn2)), t.param(p.bffn2));
  return t_add(t, x1, ffn);
}

// ----- encoder over a jagged batch --------------------------------------------------------

struct EncodeOptions {
  // mfalcon_prefix > 0 switches the mask so positions >= prefix are candidates.
  std::size_t mfalcon_prefix = 0;
  // pointwise divisor for max_len mode; 0 falls back to cfg.max_seq_len
  std::size_t n_norm_value = 0;
  // per-token position override (e.g. candidates pinned to position n); empty
  // means 0..len-1 within each sequence
  const std::vector<std::size_t>* positions = nullptr;
  bool capture_kv = false;
};

struct EncoderForward {
  Var out = -1;                             // total x d
  std::vector<std::vector<LayerIo>> layer_io;  // [sequence][layer]
};

inline std::vector<real> attention_divisors(const HstuConfig& cfg, const AttentionMask& mask,
                                            std::size_t rows, std::size_t cols,
                                            std::size_t n_norm_value) {
  if (cfg.attention != AttnKind::pointwise) return {};
  std::vector<real> div(rows, real(1));
  switch (cfg.n_norm) {
    case NNormMode::max_len: {
      real n = real(n_norm_value ? n_norm_value : cfg.max_seq_len);
      for (auto& v : div) v = n;
      break;
    }
    case NNormMode::valid_count:
      for (std::size_t i = 0; i < rows; ++i)
        div[i] = real(std::max<std::size_t>(1, mask.allowed_count(i, cols)));
      break;
    case NNormMode::one:
      break;
  }
  return div;
}

// Builds the rab bias for one sequence on the tape (tables are trainable).
inline Var build_rab(Tape& t, const HstuLayerParams& p, const HstuConfig& cfg,
                     const std::vector<std::size_t>& q_pos, const std::vector<std::size_t>& k_pos,
                     const std::vector<std::int64_t>& q_ts, const std::vector<std::int64_t>& k_ts) {
  if (!cfg.use_rab()) return -1;
  const std::size_t rows = q_pos.size(), cols = k_pos.size();
  std::vector<std::int32_t> pidx, tidx;
  if (cfg.rab_pos) {
    pidx.resize(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j)
        pidx[i * cols + j] = std::int32_t(
            rab_pos_index(std::int64_t(q_pos[i]), std::int64_t(k_pos[j]), cfg.rab_pos_buckets));
  }
  if (cfg.rab_temp) {
    tidx.resize(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        std::int64_t dt = (q_ts.empty() || k_ts.empty()) ? 0 : q_ts[i] - k_ts[j];
        tidx[i * cols + j] = std::int32_t(temporal_bucket(dt, cfg.rab_temp_buckets));
      }
  }
  Var pos_var = cfg.rab_pos ? t.param(p.rab_pos) : -1;
  Var temp_var = cfg.rab_temp ? t.param(p.rab_temp) : -1;
  return t_rab(t, pos_var, temp_var, std::move(pidx), std::move(tidx), rows, cols);
}

// Runs the stacked encoder over every sequence of the batch independently;
// sequences never attend across their boundary. Returns outputs with the same
// jagged layout as the input.
inline EncoderForward forward_encoder(Tape& t, const HstuConfig& cfg, EncoderParams& params,
                                      Var tokens, const JaggedBatch& batch,
                                      const EncodeOptions& opt = {}) {
  cfg.validate();
  batch.validate(cfg.d);
  require(batch.size() >= 1, "forward_encoder: empty batch");

  EncoderForward fwd;
  std::vector<Var> outs;
  outs.reserve(batch.size());
  if (opt.capture_kv) fwd.layer_io.resize(batch.size());

  for (std::size_t s = 0; s < batch.size(); ++s) {
    const std::size_t off = batch.offsets[s], n = batch.len(s);
    require(cfg.attention != AttnKind::pointwise || cfg.n_norm != NNormMode::max_len ||
                n <= (opt.n_norm_value ? opt.n_norm_value : cfg.max_seq_len),
            "forward_encoder: sequence longer than the n_norm reference length");

    Var x;
    if (batch.size() == 1 && off == 0) {
      x = tokens;
    } else {
      std::vector<std::size_t> rows(n);
      for (std::size_t i = 0; i < n; ++i) rows[i] = off + i;
      x = t_gather_rows(t, tokens, std::move(rows));
    }

    std::vector<std::size_t> pos(n);
    for (std::size_t i = 0; i < n; ++i)
      pos[i] = opt.positions ? (*opt.positions)[off + i] : i;
    std::vector<std::int64_t> ts;
    if (!batch.timestamps.empty())
      ts.assign(batch.timestamps.begin() + off, batch.timestamps.begin() + off + n);

    SequenceContext ctx;
    ctx.mask = opt.mfalcon_prefix > 0 ? AttentionMask::mfalcon(opt.mfalcon_prefix)
                                      : AttentionMask::causal();
    ctx.divisors = attention_divisors(cfg, ctx.mask, n, n, opt.n_norm_value);

    if (opt.capture_kv) fwd.layer_io[s].resize(params.layer_count());
    for (std::size_t l = 0; l < params.layer_count(); ++l) {
      LayerIo* io = opt.capture_kv ? &fwd.layer_io[s][l] : nullptr;
      if (params.arch == Arch::hstu) {
        ctx.rab = build_rab(t, params.hstu_layers[l], cfg, pos, pos, ts, ts);
        x = hstu_layer_forward(t, x, params.hstu_layers[l], cfg, ctx, io);
      } else {
        ctx.rab = -1;  // the baseline runs without relative biases
        x = transformer_layer_forward(t, x, params.tf_layers[l], cfg, ctx, io);
      }
    }
    outs.push_back(x);
  }
  fwd.out = outs.size() == 1 ? outs[0] : t_concat_rows(t, outs);
  return fwd;
}

// ----- activation accounting ---------------------------------------------------------------
// Stored activation scalars per token per layer under the usual recompute
// policy. The transformer dropout masks are byte-counted at half weight, which
// is where the closed-form 33d comes from; the pointwise layer carries 14d.

inline std::size_t estimate_activation_floats(const HstuConfig& cfg, Arch arch) {
  const std::size_t d = cfg.d, hdqk = cfg.heads * cfg.d_qk, hdv = cfg.heads * cfg.d_v;
  if (arch == Arch::hstu) return 2 * d + 2 * d + 4 * hdqk + 4 * hdv + 2 * hdv;
  return 3 * hdv + 4 * d + 4 * cfg.dff() + 4 * d + 2 * (2 * hdqk + hdv);
}

}  // namespace hstu
