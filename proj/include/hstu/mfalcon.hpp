#pragma once

// Batched candidate scoring. A request carries a user's event prefix and m
// candidate items; candidates are scored in microbatches of b_m that share one
// forward pass through a modified attention mask (candidates see the prefix
// and themselves, never each other). Per-layer K/V projections of the prefix
// are cached within a request and, optionally, across requests in a session
// store that reuses, extends, or rebuilds the cache as the history grows.
//
// Every candidate is treated as sitting at position n (the prefix length)
// with the request timestamp, so its bias row is identical no matter which
// microbatch it lands in. Pointwise attention is normalized by the number of
// entries a row can see (a candidate sees the prefix plus itself: n + 1);
// this keeps cached rows valid as histories grow and makes scores independent
// of b_m. Scoring never records gradients.

#include <chrono>
#include <fstream>
#include <string>
#include <unordered_map>

#include "hstu/model.hpp"

namespace hstu {

// ----- prefix identity ----------------------------------------------------------

inline std::uint64_t fnv1a64(const unsigned char* p, std::size_t len,
                             std::uint64_t h = 1469598103934665603ull) {
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t token_fingerprint(const TokenSequence& s, std::size_t i) {
  std::uint64_t fields[6] = {std::uint64_t(s.kinds[i]),       s.items[i],
                             s.actions[i],                    s.feature_ids[i],
                             s.value_ids[i],                  std::uint64_t(s.timestamps[i])};
  return fnv1a64(reinterpret_cast<const unsigned char*>(fields), sizeof fields);
}

inline std::vector<std::uint64_t> token_fingerprints(const TokenSequence& s) {
  std::vector<std::uint64_t> sigs(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) sigs[i] = token_fingerprint(s, i);
  return sigs;
}

// ----- mask ----------------------------------------------------------------------

// Dense 0/1 allow-mask of size (n+b_m)^2: lower-triangular with the candidate
// block's off-diagonal removed. The disallowed-beyond-causal count is
// b_m(b_m-1)/2.
inline Matrix build_mfalcon_mask(std::size_t n, std::size_t b_m) {
  require(b_m >= 1, "mask: microbatch size must be at least 1");
  return AttentionMask::mfalcon(n).to_dense(n + b_m, n + b_m);
}

// ----- kv cache ---------------------------------------------------------------------

struct KvCache {
  std::vector<Matrix> k, v;              // per layer; rows = cached prefix length
  std::vector<std::int64_t> ts;          // cached token timestamps
  std::vector<std::uint64_t> sigs;       // per-token content fingerprints

  std::size_t size() const { return ts.size(); }
  std::uint64_t content_hash() const {
    return sigs.empty() ? fnv1a64(nullptr, 0)
                        : fnv1a64(reinterpret_cast<const unsigned char*>(sigs.data()),
                                  sigs.size() * sizeof(std::uint64_t));
  }
};

enum class CacheMode { off, request, session };
enum class CacheOutcome { none, fresh, reused, extended, recomputed };

inline const char* cache_outcome_name(CacheOutcome o) {
  switch (o) {
    case CacheOutcome::none: return "none";
    case CacheOutcome::fresh: return "fresh";
    case CacheOutcome::reused: return "reused";
    case CacheOutcome::extended: return "extended";
    case CacheOutcome::recomputed: return "recomputed";
  }
  return "?";
}

// Scoring normalizes pointwise attention by visible-entry count so that a
// cached row never depends on how long the sequence later becomes.
inline HstuConfig serving_config(const HstuConfig& c) {
  HstuConfig s = c;
  if (s.attention == AttnKind::pointwise && s.n_norm == NNormMode::max_len)
    s.n_norm = NNormMode::valid_count;
  return s;
}

namespace detail {

inline void append_rows(Matrix& into, const Matrix& more) {
  if (into.rows() == 0) {
    into = more;
    return;
  }
  require(into.cols() == more.cols(), "cache append: width mismatch");
  Matrix next(into.rows() + more.rows(), into.cols());
  std::copy(into.data(), into.data() + into.size(), next.data());
  std::copy(more.data(), more.data() + more.size(), next.data() + into.size());
  into = std::move(next);
}

inline Matrix take_rows(const Matrix& src, std::size_t r0, std::size_t count) {
  Matrix out(count, src.cols());
  std::copy(src.row(r0), src.row(r0) + count * src.cols(), out.data());
  return out;
}

// One layer over a block of query rows whose keys are an optional cached
// prefix followed by the block's own projections.
inline Var hstu_block(Tape& t, const HstuConfig& cfg, HstuLayerParams& p, Var x, Var kp, Var vp,
                      const AttentionMask& mask, std::vector<real> divisors, Var rab,
                      Var* k_out = nullptr, Var* v_out = nullptr) {
  Var z = t_silu(t, t_add_bias(t, t_matmul(t, x, t.param(p.w1)), t.param(p.b1)));
  const std::size_t hdv = cfg.heads * cfg.d_v, hdqk = cfg.heads * cfg.d_qk;
  Var u = t_slice_cols(t, z, 0, hdv);
  Var v = t_slice_cols(t, z, hdv, hdv);
  Var q = t_slice_cols(t, z, 2 * hdv, hdqk);
  Var k = t_slice_cols(t, z, 2 * hdv + hdqk, hdqk);
  if (k_out) *k_out = k;
  if (v_out) *v_out = v;
  Var kk = kp >= 0 ? t_concat_rows(t, {kp, k}) : k;
  Var vv = vp >= 0 ? t_concat_rows(t, {vp, v}) : v;
  Var av = t_attention(t, q, kk, vv, rab, cfg.heads, mask, cfg.attention, std::move(divisors));
  Var gated = t_hadamard(t, t_layer_norm(t, av, cfg.norm_eps), u);
  return t_add(t, x, t_add_bias(t, t_matmul(t, gated, t.param(p.w2)), t.param(p.b2)));
}

inline Var tf_block(Tape& t, const HstuConfig& cfg, TransformerLayerParams& p, Var x, Var kp,
                    Var vp, const AttentionMask& mask, Var* k_out = nullptr,
                    Var* v_out = nullptr) {
  Var xn = t_layer_norm(t, x, cfg.norm_eps);
  Var q = t_add_bias(t, t_matmul(t, xn, t.param(p.wq)), t.param(p.bq));
  Var k = t_add_bias(t, t_matmul(t, xn, t.param(p.wk)), t.param(p.bk));
  Var v = t_add_bias(t, t_matmul(t, xn, t.param(p.wv)), t.param(p.bv));
  if (k_out) *k_out = k;
  if (v_out) *v_out = v;
  Var kk = kp >= 0 ? t_concat_rows(t, {kp, k}) : k;
  Var vv = vp >= 0 ? t_concat_rows(t, {vp, v}) : v;
  Var av = t_attention(t, q, kk, vv, -1, cfg.heads, mask, AttnKind::softmax, {});
  Var x1 = t_add(t, x, t_add_bias(t, t_matmul(t, av, t.param(p.wo)), t.param(p.bo)));
  Var x1n = t_layer_norm(t, x1, cfg.norm_eps);
  Var hidden = t_gelu(t, t_add_bias(t, t_matmul(t, x1n, t.param(p.ffn1)), t.param(p.bffn1)));
  return t_add(t, x1, t_add_bias(t, t_matmul(t, hidden, t.param(p.ffn2)), t.param(p.bffn2)));
}

}  // namespace detail

// ----- cache construction -------------------------------------------------------------

// Full causal pass over the prefix, capturing per-layer K/V. The cache holds
// exactly what any longer pass would compute for these rows: every kernel is
// row-independent, so the values are bitwise stable as the sequence grows.
inline KvCache build_prefix_cache(Model& m, const TokenSequence& events) {
  require(events.size() >= 1, "prefix cache: empty event sequence");
  const HstuConfig cfg = serving_config(m.config().encoder);
  Tape t(false);
  Var emb = embed_tokens(t, m, events);
  JaggedBatch batch;
  batch.offsets = {0, events.size()};
  batch.tokens = t.val(emb);
  batch.timestamps = events.timestamps;
  EncodeOptions opt;
  opt.capture_kv = true;
  auto fwd = forward_encoder(t, cfg, m.encoder(), emb, batch, opt);
  KvCache c;
  for (std::size_t l = 0; l < m.encoder().layer_count(); ++l) {
    c.k.push_back(t.val(fwd.layer_io[0][l].k));
    c.v.push_back(t.val(fwd.layer_io[0][l].v));
  }
  c.ts = events.timestamps;
  c.sigs = token_fingerprints(events);
  return c;
}

// Runs only the new suffix through the encoder, attending causally to the
// cached prefix, and appends the suffix's K/V to the cache.
inline void extend_prefix_cache(Model& m, KvCache& cache, const TokenSequence& events) {
  const std::size_t from = cache.size(), n = events.size();
  require(from >= 1 && from < n, "cache extension: nothing to extend");
  const HstuConfig cfg = serving_config(m.config().encoder);
  Tape t(false);

  Var emb = embed_tokens(t, m, events);
  std::vector<std::size_t> rows(n - from);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = from + i;
  Var x = t_gather_rows(t, emb, std::move(rows));

  Matrix mask01(n - from, n);
  for (std::size_t i = 0; i < mask01.rows(); ++i)
    for (std::size_t j = 0; j <= from + i; ++j) mask01(i, j) = real(1);
  AttentionMask mask = AttentionMask::dense(&mask01);

  std::vector<real> divisors;
  if (cfg.attention == AttnKind::pointwise && cfg.n_norm == NNormMode::valid_count) {
    divisors.resize(n - from);
    for (std::size_t i = 0; i < divisors.size(); ++i) divisors[i] = real(from + i + 1);
  }

  std::vector<std::size_t> q_pos(n - from), k_pos(n);
  for (std::size_t i = 0; i < q_pos.size(); ++i) q_pos[i] = from + i;
  for (std::size_t j = 0; j < n; ++j) k_pos[j] = j;
  std::vector<std::int64_t> q_ts(events.timestamps.begin() + std::ptrdiff_t(from),
                                 events.timestamps.end());
  const std::vector<std::int64_t>& k_ts = events.timestamps;

  for (std::size_t l = 0; l < m.encoder().layer_count(); ++l) {
    Var kp = t.input(cache.k[l]);
    Var vp = t.input(cache.v[l]);
    Var k_new = -1, v_new = -1;
    if (m.encoder().arch == Arch::hstu) {
      Var rab = cfg.use_rab()
                    ? build_rab(t, m.encoder().hstu_layers[l], cfg, q_pos, k_pos, q_ts, k_ts)
                    : -1;
      x = detail::hstu_block(t, cfg, m.encoder().hstu_layers[l], x, kp, vp, mask,
                             std::vector<real>(divisors), rab, &k_new, &v_new);
    } else {
      x = detail::tf_block(t, cfg, m.encoder().tf_layers[l], x, kp, vp, mask, &k_new, &v_new);
    }
    detail::append_rows(cache.k[l], t.val(k_new));
    detail::append_rows(cache.v[l], t.val(v_new));
  }
  cache.ts = events.timestamps;
  cache.sigs = token_fingerprints(events);
}

// ----- scoring paths ----------------------------------------------------------------

struct ScoreRequest {
  std::uint64_t user_id = 0;
  TokenSequence events;                     // interleaved prefix, length n >= 1
  std::vector<std::uint64_t> candidates;    // m item ids
  std::int64_t request_ts = 0;              // timestamp given to candidate tokens
  std::size_t b_m = 1;                      // microbatch size
  CacheMode cache = CacheMode::request;
};

struct ScoreOutput {
  Matrix probs;  // m x action_types, sigmoid of the head logits
  FlopCounter flops;
  CacheOutcome outcome = CacheOutcome::none;
};

namespace detail {

inline void head_into(Tape& t, Model& m, Var y, Matrix& probs, std::size_t row0) {
  Var logits = ranking_logits(t, m, y);
  const Matrix& L = t.val(logits);
  for (std::size_t i = 0; i < L.rows(); ++i)
    for (std::size_t j = 0; j < L.cols(); ++j)
      probs(row0 + i, j) = real(1) / (real(1) + std::exp(-L(i, j)));
  count_other_flops(2 * L.size());
}

// Appends candidate tokens to a copy of the prefix. Candidates are content
// tokens with no engagement bits; their engagement is what the head predicts.
inline TokenSequence with_candidates(const TokenSequence& events,
                                     const std::vector<std::uint64_t>& cands,
                                     std::int64_t req_ts) {
  TokenSequence full = events;
  for (std::uint64_t id : cands) full.push(TokenKind::content, id, 0, 0, 0, req_ts);
  return full;
}

// First microbatch: one forward over prefix + b candidates under the modified
// mask, pinning every candidate to position n. Fills the prefix cache from the
// captured projections and returns the encoded candidate rows.
inline Var batched_pass(Tape& t, Model& m, const HstuConfig& cfg, const TokenSequence& events,
                        const std::vector<std::uint64_t>& slice, std::int64_t req_ts,
                        KvCache& cache) {
  const std::size_t n = events.size(), b = slice.size();
  TokenSequence full = with_candidates(events, slice, req_ts);
  Var emb = embed_tokens(t, m, full);
  JaggedBatch batch;
  batch.offsets = {0, n + b};
  batch.tokens = t.val(emb);
  batch.timestamps = full.timestamps;
  std::vector<std::size_t> pos(n + b);
  for (std::size_t i = 0; i < n + b; ++i) pos[i] = std::min(i, n);
  EncodeOptions opt;
  opt.mfalcon_prefix = n;
  opt.positions = &pos;
  opt.capture_kv = true;
  auto fwd = forward_encoder(t, cfg, m.encoder(), emb, batch, opt);
  cache.k.clear();
  cache.v.clear();
  for (std::size_t l = 0; l < m.encoder().layer_count(); ++l) {
    cache.k.push_back(take_rows(t.val(fwd.layer_io[0][l].k), 0, n));
    cache.v.push_back(take_rows(t.val(fwd.layer_io[0][l].v), 0, n));
  }
  cache.ts = events.timestamps;
  cache.sigs = token_fingerprints(events);
  std::vector<std::size_t> crows(b);
  for (std::size_t i = 0; i < b; ++i) crows[i] = n + i;
  return t_gather_rows(t, fwd.out, std::move(crows));
}

// Later microbatches: U/V/Q/K are computed for the b candidate rows alone;
// attention reads the cached prefix plus each candidate's own entry.
inline Var cached_pass(Tape& t, Model& m, const HstuConfig& cfg, KvCache& cache,
                       const std::vector<std::uint64_t>& slice, std::int64_t req_ts) {
  const std::size_t n = cache.size(), b = slice.size();
  Var x = t.lookup(m.items(), std::vector<std::uint64_t>(slice));

  Matrix mask01(b, n + b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < n; ++j) mask01(i, j) = real(1);
    mask01(i, n + i) = real(1);
  }
  AttentionMask mask = AttentionMask::dense(&mask01);

  std::vector<real> divisors;
  if (cfg.attention == AttnKind::pointwise && cfg.n_norm == NNormMode::valid_count)
    divisors.assign(b, real(n + 1));

  std::vector<std::size_t> q_pos(b, n), k_pos(n + b, n);
  for (std::size_t j = 0; j < n; ++j) k_pos[j] = j;
  std::vector<std::int64_t> q_ts(b, req_ts), k_ts = cache.ts;
  k_ts.resize(n + b, req_ts);

  for (std::size_t l = 0; l < m.encoder().layer_count(); ++l) {
    Var kp = t.input(cache.k[l]);
    Var vp = t.input(cache.v[l]);
    if (m.encoder().arch == Arch::hstu) {
      Var rab = cfg.use_rab()
                    ? build_rab(t, m.encoder().hstu_layers[l], cfg, q_pos, k_pos, q_ts, k_ts)
                    : -1;
      x = hstu_block(t, cfg, m.encoder().hstu_layers[l], x, kp, vp, mask,
                     std::vector<real>(divisors), rab);
    } else {
      x = tf_block(t, cfg, m.encoder().tf_layers[l], x, kp, vp, mask);
    }
  }
  return x;
}

}  // namespace detail

// Oracle path: one independent causal pass of length n+1 per candidate.
inline ScoreOutput naive_score(Model& m, const TokenSequence& events,
                               const std::vector<std::uint64_t>& cands, std::int64_t req_ts) {
  require(!cands.empty(), "score request carries no candidates");
  require(events.size() >= 1, "score request needs a non-empty event prefix");
  const HstuConfig cfg = serving_config(m.config().encoder);
  ScoreOutput out;
  out.probs = Matrix(cands.size(), m.config().action_types);
  FlopScope scope(out.flops);
  for (std::size_t c = 0; c < cands.size(); ++c) {
    TokenSequence one = detail::with_candidates(events, {cands[c]}, req_ts);
    Tape t(false);
    Var emb = embed_tokens(t, m, one);
    JaggedBatch batch;
    batch.offsets = {0, one.size()};
    batch.tokens = t.val(emb);
    batch.timestamps = one.timestamps;
    auto fwd = forward_encoder(t, cfg, m.encoder(), emb, batch, {});
    Var last = t_gather_rows(t, fwd.out, {one.size() - 1});
    detail::head_into(t, m, last, out.probs, c);
  }
  return out;
}

// Microbatched scoring. CacheMode::off recomputes everything per candidate;
// CacheMode::request caches prefix K/V from the first microbatch for the rest
// of the request; CacheMode::session additionally reuses, extends, or rebuilds
// a per-user cache held in the store across requests.
class SessionStore;
inline ScoreOutput mfalcon_score(Model& m, const ScoreRequest& req, SessionStore* store = nullptr);

class SessionStore {
 public:
  KvCache& ensure(Model& m, std::uint64_t user, const TokenSequence& events,
                  CacheOutcome* outcome) {
    auto sigs = token_fingerprints(events);
    auto [it, inserted] = sessions_.try_emplace(user);
    KvCache& c = it->second;
    if (inserted) {
      c = build_prefix_cache(m, events);
      *outcome = CacheOutcome::fresh;
    } else if (c.size() <= sigs.size() &&
               std::equal(c.sigs.begin(), c.sigs.end(), sigs.begin())) {
      if (c.size() == sigs.size()) {
        *outcome = CacheOutcome::reused;
      } else {
        extend_prefix_cache(m, c, events);
        *outcome = CacheOutcome::extended;
      }
    } else {
      c = build_prefix_cache(m, events);
      *outcome = CacheOutcome::recomputed;
    }
    return c;
  }

  bool contains(std::uint64_t user) const { return sessions_.count(user) != 0; }
  const KvCache* find(std::uint64_t user) const {
    auto it = sessions_.find(user);
    return it == sessions_.end() ? nullptr : &it->second;
  }
  std::size_t size() const { return sessions_.size(); }
  void clear() { sessions_.clear(); }

 private:
  std::unordered_map<std::uint64_t, KvCache> sessions_;
};

inline ScoreOutput mfalcon_score(Model& m, const ScoreRequest& req, SessionStore* store) {
  require(!req.candidates.empty(), "score request carries no candidates");
  require(req.b_m >= 1, "score request: microbatch size must be at least 1");
  require(req.events.size() >= 1, "score request needs a non-empty event prefix");
  if (req.cache == CacheMode::off)
    return naive_score(m, req.events, req.candidates, req.request_ts);

  const HstuConfig cfg = serving_config(m.config().encoder);
  const std::size_t mm = req.candidates.size();
  ScoreOutput out;
  out.probs = Matrix(mm, m.config().action_types);
  FlopScope scope(out.flops);

  KvCache local;
  KvCache* cache = &local;
  std::size_t done = 0;
  if (req.cache == CacheMode::session) {
    require(store != nullptr, "session cache mode needs a session store");
    cache = &store->ensure(m, req.user_id, req.events, &out.outcome);
  } else {
    const std::size_t b = std::min(req.b_m, mm);
    std::vector<std::uint64_t> slice(req.candidates.begin(),
                                     req.candidates.begin() + std::ptrdiff_t(b));
    Tape t(false);
    Var y = detail::batched_pass(t, m, cfg, req.events, slice, req.request_ts, local);
    detail::head_into(t, m, y, out.probs, 0);
    done = b;
  }
  while (done < mm) {
    const std::size_t b = std::min(req.b_m, mm - done);
    std::vector<std::uint64_t> slice(req.candidates.begin() + std::ptrdiff_t(done),
                                     req.candidates.begin() + std::ptrdiff_t(done + b));
    Tape t(false);
    Var y = detail::cached_pass(t, m, cfg, *cache, slice, req.request_ts);
    detail::head_into(t, m, y, out.probs, done);
    done += b;
  }
  return out;
}

// ----- throughput benchmark ------------------------------------------------------------

struct BenchRow {
  std::string mode;  // naive | batched | cached
  std::size_t n = 0, m = 0, b_m = 0, repetitions = 0;
  double wall_seconds = 0, candidates_per_second = 0;
  FlopCounter flops;  // summed over repetitions
};

// Interleaved content/action prefix of exactly n tokens with random items.
inline TokenSequence synthetic_event_prefix(std::size_t n, std::size_t action_types,
                                            std::uint64_t seed) {
  require(n >= 1, "bench: prefix length must be at least 1");
  Rng rng(seed);
  const std::uint64_t bits_bound =
      action_types >= 63 ? ~0ull : (1ull << action_types) - 1;
  TokenSequence seq;
  seq.task = Task::ranking;
  std::int64_t ts = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i % 2 == 0) {
      ts = std::int64_t(i);
      seq.push(TokenKind::content, rng.uniform_u64(1ull << 20), 0, 0, 0, ts);
    } else {
      seq.push(TokenKind::action, 0, 1 + rng.uniform_u64(bits_bound), 0, 0, ts);
    }
  }
  return seq;
}

inline std::vector<BenchRow> throughput_bench(Model& m, std::size_t n, std::size_t cands,
                                              const std::vector<std::size_t>& bm_grid,
                                              std::size_t repetitions, std::uint64_t seed = 1) {
  std::vector<BenchRow> rows;
  if (repetitions == 0) return rows;
  TokenSequence events = synthetic_event_prefix(n, m.config().action_types, seed);
  Rng rng(seed + 1);
  std::vector<std::uint64_t> ids(cands);
  for (auto& id : ids) id = rng.uniform_u64(1ull << 20);
  const std::int64_t req_ts = std::int64_t(n + 1);

  for (std::size_t bm : bm_grid) {
    for (const char* mode : {"naive", "batched", "cached"}) {
      BenchRow row;
      row.mode = mode;
      row.n = n;
      row.m = cands;
      row.b_m = bm;
      row.repetitions = repetitions;
      auto t0 = std::chrono::steady_clock::now();
      for (std::size_t rep = 0; rep < repetitions; ++rep) {
        ScoreRequest req;
        req.events = events;
        req.candidates = ids;
        req.request_ts = req_ts;
        if (row.mode == "naive") {
          req.cache = CacheMode::off;
          req.b_m = 1;
        } else if (row.mode == "batched") {
          req.cache = CacheMode::request;
          req.b_m = cands;  // one microbatch
        } else {
          req.cache = CacheMode::request;
          req.b_m = bm;
        }
        ScoreOutput so = mfalcon_score(m, req);
        row.flops.attention += so.flops.attention;
        row.flops.linear += so.flops.linear;
        row.flops.other += so.flops.other;
      }
      row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      row.candidates_per_second =
          double(cands * repetitions) / std::max(row.wall_seconds, 1e-12);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write benchmark csv: " + path);
  out << "mode,n,m,b_m,repetitions,wall_seconds,candidates_per_second,"
         "attention_flops,linear_flops,other_flops,total_flops\n";
  for (const auto& r : rows)
    out << r.mode << ',' << r.n << ',' << r.m << ',' << r.b_m << ',' << r.repetitions << ','
        << r.wall_seconds << ',' << r.candidates_per_second << ',' << r.flops.attention << ','
        << r.flops.linear << ',' << r.flops.other << ',' << r.flops.total() << '\n';
}

}  // namespace hstu
