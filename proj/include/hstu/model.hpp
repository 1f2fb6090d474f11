#pragma once

// The full recommendation model: hashed item and contextual embedding tables,
// a dense per-action-event embedding matrix, the encoder stack, and the two
// task heads (ranking MLP over action logits; retrieval as dot products
// against the tied item table).

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hstu/embedding.hpp"
#include "hstu/encoder.hpp"
#include "hstu/ops.hpp"
#include "hstu/sequence.hpp"
#include "hstu/tape.hpp"

namespace hstu {

// Contextual tokens share one table; a feature's id and value mix into a
// single key so distinct (feature, value) pairs land on distinct rows.
inline std::uint64_t ctx_key(std::uint64_t feature_id, std::uint64_t value_id) {
  return feature_id * 0x9E3779B97F4A7C15ull ^ value_id;
}

struct ModelConfig {
  HstuConfig encoder;
  Arch arch = Arch::hstu;
  Task task = Task::retrieval;
  std::uint64_t positive_mask = 1;
  std::size_t item_rows = 4096;
  std::size_t ctx_rows = 256;
  std::size_t action_types = 4;  // A
  real embed_init = real(0.1);
  std::uint64_t seed = 0;

  void validate() const {
    encoder.validate();
    require(item_rows >= 1 && ctx_rows >= 1, "embedding tables need at least one row");
    require(action_types >= 1 && action_types <= 64, "action types must lie in [1, 64]");
    require(embed_init > 0, "embedding init scale must be positive");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{
        {"arch", arch == Arch::hstu ? "hstu" : "transformer"},
        {"task", task == Task::ranking     ? "ranking"
                 : task == Task::retrieval ? "retrieval"
                                           : "next_content"},
        {"attention", encoder.attention == AttnKind::pointwise ? "pointwise" : "softmax"},
        {"n_norm", encoder.n_norm == NNormMode::max_len      ? "max_len"
                   : encoder.n_norm == NNormMode::valid_count ? "valid_count"
                                                              : "one"},
        {"d", encoder.d},
        {"heads", encoder.heads},
        {"d_qk", encoder.d_qk},
        {"d_v", encoder.d_v},
        {"layers", encoder.layers},
        {"max_seq_len", encoder.max_seq_len},
        {"d_ff", encoder.d_ff},
        {"norm_eps", encoder.norm_eps},
        {"rab_pos", encoder.rab_pos},
        {"rab_temp", encoder.rab_temp},
        {"rab_pos_buckets", encoder.rab_pos_buckets},
        {"rab_temp_buckets", encoder.rab_temp_buckets},
        {"positive_mask", positive_mask},
        {"item_rows", item_rows},
        {"ctx_rows", ctx_rows},
        {"action_types", action_types},
        {"embed_init", embed_init},
        {"seed", seed}};
  }

  // Strict: unknown keys are configuration mistakes, not extensions.
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    for (const auto& [key, val] : j.items()) {
      try {
        if (key == "arch") {
          std::string s = val.get<std::string>();
          if (s == "hstu")
            c.arch = Arch::hstu;
          else if (s == "transformer")
            c.arch = Arch::transformer;
          else
            throw ConfigError("unknown arch: " + s);
        } else if (key == "task") {
          std::string s = val.get<std::string>();
          if (s == "ranking")
            c.task = Task::ranking;
          else if (s == "retrieval")
            c.task = Task::retrieval;
          else if (s == "next_content")
            c.task = Task::next_content;
          else
            throw ConfigError("unknown task: " + s);
        } else if (key == "attention") {
          std::string s = val.get<std::string>();
          if (s == "pointwise")
            c.encoder.attention = AttnKind::pointwise;
          else if (s == "softmax")
            c.encoder.attention = AttnKind::softmax;
          else
            throw ConfigError("unknown attention kind: " + s);
        } else if (key == "n_norm") {
          std::string s = val.get<std::string>();
          if (s == "max_len")
            c.encoder.n_norm = NNormMode::max_len;
          else if (s == "valid_count")
            c.encoder.n_norm = NNormMode::valid_count;
          else if (s == "one")
            c.encoder.n_norm = NNormMode::one;
          else
            throw ConfigError("unknown n_norm mode: " + s);
        } else if (key == "d") {
          c.encoder.d = val.get<std::size_t>();
        } else if (key == "heads") {
          c.encoder.heads = val.get<std::size_t>();
        } else if (key == "d_qk") {
          c.encoder.d_qk = val.get<std::size_t>();
        } else if (key == "d_v") {
          c.encoder.d_v = val.get<std::size_t>();
        } else if (key == "layers") {
          c.encoder.layers = val.get<std::size_t>();
        } else if (key == "max_seq_len") {
          c.encoder.max_seq_len = val.get<std::size_t>();
        } else if (key == "d_ff") {
          c.encoder.d_ff = val.get<std::size_t>();
        } else if (key == "norm_eps") {
          c.encoder.norm_eps = val.get<real>();
        } else if (key == "rab_pos") {
          c.encoder.rab_pos = val.get<bool>();
        } else if (key == "rab_temp") {
          c.encoder.rab_temp = val.get<bool>();
        } else if (key == "rab_pos_buckets") {
          c.encoder.rab_pos_buckets = val.get<std::size_t>();
        } else if (key == "rab_temp_buckets") {
          c.encoder.rab_temp_buckets = val.get<std::size_t>();
        } else if (key == "positive_mask") {
          c.positive_mask = val.get<std::uint64_t>();
        } else if (key == "item_rows") {
          c.item_rows = val.get<std::size_t>();
        } else if (key == "ctx_rows") {
          c.ctx_rows = val.get<std::size_t>();
        } else if (key == "action_types") {
          c.action_types = val.get<std::size_t>();
        } else if (key == "embed_init") {
          c.embed_init = val.get<real>();
        } else if (key == "seed") {
          c.seed = val.get<std::uint64_t>();
        } else {
          throw ConfigError("unknown config key: " + key);
        }
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("bad value for config key '" + key + "': " + e.what());
      }
    }
    c.validate();
    return c;
  }
};

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    // construction order is the determinism and checkpoint-layout contract:
    // items, ctx, action events, encoder stack, head
    Rng rng(cfg_.seed);
    const std::size_t d = cfg_.encoder.d;
    items_ = EmbeddingTable(cfg_.item_rows, d, rng, cfg_.embed_init);
    ctx_ = EmbeddingTable(cfg_.ctx_rows, d, rng, cfg_.embed_init);
    action_events_ = Matrix(cfg_.action_types, d);
    for (std::size_t i = 0; i < action_events_.size(); ++i)
      action_events_.data()[i] = real(rng.normal()) * cfg_.embed_init;
    encoder_.init(cfg_.encoder, cfg_.arch, rng);
    const real s1 = real(1.0 / std::sqrt(double(d)));
    head_w1_ = Matrix(d, d);
    for (std::size_t i = 0; i < head_w1_.size(); ++i)
      head_w1_.data()[i] = real(rng.normal()) * s1;
    head_b1_ = Matrix(1, d);
    head_w2_ = Matrix(d, cfg_.action_types);
    for (std::size_t i = 0; i < head_w2_.size(); ++i)
      head_w2_.data()[i] = real(rng.normal()) * s1;
    head_b2_ = Matrix(1, cfg_.action_types);
  }

  const ModelConfig& config() const { return cfg_; }
  EmbeddingTable& items() { return items_; }
  const EmbeddingTable& items() const { return items_; }
  EmbeddingTable& ctx() { return ctx_; }
  Matrix& action_events() { return action_events_; }
  EncoderParams& encoder() { return encoder_; }
  Matrix& head_w1() { return head_w1_; }
  Matrix& head_b1() { return head_b1_; }
  Matrix& head_w2() { return head_w2_; }
  Matrix& head_b2() { return head_b2_; }

  ParamSet params() {
    ParamSet ps;
    ps.tables.push_back({"items", &items_});
    ps.tables.push_back({"ctx", &ctx_});
    ps.dense.push_back({"action_events", &action_events_});
    encoder_.for_each_param([&](const std::string& name, Matrix& m) {
      ps.dense.push_back({"encoder." + name, &m});
    });
    ps.dense.push_back({"head.w1", &head_w1_});
    ps.dense.push_back({"head.b1", &head_b1_});
    ps.dense.push_back({"head.w2", &head_w2_});
    ps.dense.push_back({"head.b2", &head_b2_});
    return ps;
  }

  // ----- checkpoint: magic, config JSON, then every tensor as f32 in params()
  // order (table weights only; optimizer state is not part of the model)

  void save(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write model: " + path);
    out.write("HSTUMDL1", 8);
    std::string cfg_text = cfg_.to_json().dump();
    EmbeddingTable::write_u64(out, cfg_text.size());
    out.write(cfg_text.data(), std::streamsize(cfg_text.size()));
    EmbeddingTable::write_f32_matrix(out, items_.weights());
    EmbeddingTable::write_f32_matrix(out, ctx_.weights());
    ParamSet ps = params();
    for (auto& [name, m] : ps.dense) EmbeddingTable::write_f32_matrix(out, *m);
    if (!out) throw IoError("failed writing model: " + path);
  }

  static Model load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open model: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != "HSTUMDL1") throw IoError("bad model magic: " + path);
    std::uint64_t cfg_len = EmbeddingTable::read_u64(in);
    std::string cfg_text(cfg_len, '\0');
    in.read(cfg_text.data(), std::streamsize(cfg_len));
    if (!in) throw IoError("truncated model config: " + path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(cfg_text);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("bad model config block: ") + e.what());
    }
    Model m(ModelConfig::from_json(j));
    m.items_.weights() = EmbeddingTable::read_f32_matrix(in, m.items_.table_rows(), m.items_.dim());
    m.ctx_.weights() = EmbeddingTable::read_f32_matrix(in, m.ctx_.table_rows(), m.ctx_.dim());
    ParamSet ps = m.params();
    for (auto& [name, mat] : ps.dense)
      *mat = EmbeddingTable::read_f32_matrix(in, mat->rows(), mat->cols());
    if (!in) throw IoError("truncated model tensors: " + path);
    return m;
  }

 private:
  ModelConfig cfg_;
  EmbeddingTable items_;
  EmbeddingTable ctx_;
  Matrix action_events_;
  EncoderParams encoder_;
  Matrix head_w1_, head_b1_, head_w2_, head_b2_;
};

// ----- token embedding ------------------------------------------------------------------

inline std::vector<std::size_t> action_bits(std::uint64_t mask, std::size_t action_types) {
  std::vector<std::size_t> bits;
  for (std::size_t b = 0; b < 64; ++b)
    if (mask >> b & 1) {
      require(b < action_types, "action bit outside the configured action set");
      bits.push_back(b);
    }
  return bits;
}

// n x d embedded inputs for one token sequence. Content tokens look up the
// item table; action tokens sum their active event rows; retrieval-style
// combined tokens add both; contextual tokens look up the shared table.
inline Var embed_tokens(Tape& t, Model& m, const TokenSequence& seq) {
  const std::size_t n = seq.size();
  require(n >= 1, "cannot embed an empty sequence");
  const std::size_t A = m.config().action_types;
  const bool combined = seq.task == Task::retrieval;

  std::vector<std::uint64_t> content_ids, ctx_ids;
  std::vector<std::vector<std::size_t>> content_groups, action_groups;
  std::vector<std::size_t> order(n);  // position -> row in the concatenated parts
  std::size_t n_content = 0, n_action = 0, n_ctx = 0;
  for (std::size_t p = 0; p < n; ++p) {
    switch (seq.kinds[p]) {
      case TokenKind::content:
        content_ids.push_back(seq.items[p]);
        if (combined) content_groups.push_back(action_bits(seq.actions[p], A));
        order[p] = n_content++;
        break;
      case TokenKind::action:
        action_groups.push_back(action_bits(seq.actions[p], A));
        order[p] = n_action++;
        break;
      case TokenKind::contextual:
        ctx_ids.push_back(ctx_key(seq.feature_ids[p], seq.value_ids[p]));
        order[p] = n_ctx++;
        break;
    }
  }
  std::vector<Var> parts;
  std::size_t content_base = 0, action_base = 0, ctx_base = 0, used = 0;
  if (n_content) {
    Var v = t.lookup(m.items(), content_ids);
    if (combined)
      v = t_add(t, v, t_sum_param_rows(t, t.param(m.action_events()), std::move(content_groups)));
    content_base = used;
    used += n_content;
    parts.push_back(v);
  }
  if (n_action) {
    action_base = used;
    used += n_action;
    parts.push_back(t_sum_param_rows(t, t.param(m.action_events()), std::move(action_groups)));
  }
  if (n_ctx) {
    ctx_base = used;
    parts.push_back(t.lookup(m.ctx(), ctx_ids));
  }
  std::vector<std::size_t> rows(n);
  bool identity = parts.size() == 1;
  for (std::size_t p = 0; p < n; ++p) {
    std::size_t base = seq.kinds[p] == TokenKind::content  ? content_base
                       : seq.kinds[p] == TokenKind::action ? action_base
                                                           : ctx_base;
    rows[p] = base + order[p];
    if (rows[p] != p) identity = false;
  }
  Var cat = parts.size() == 1 ? parts[0] : t_concat_rows(t, parts);
  if (identity) return cat;
  return t_gather_rows(t, cat, std::move(rows));
}

struct ModelForward {
  Var emb = -1;
  Var out = -1;  // n x d encodings
};

inline ModelForward encode_sequence(Tape& t, Model& m, const TokenSequence& seq,
                                    const EncodeOptions& opt = {}) {
  ModelForward f;
  f.emb = embed_tokens(t, m, seq);
  JaggedBatch batch;
  batch.offsets = {0, seq.size()};
  batch.tokens = t.val(f.emb);
  batch.timestamps = seq.timestamps;
  f.out = forward_encoder(t, m.config().encoder, m.encoder(), f.emb, batch, opt).out;
  return f;
}

// Per-event logits for the ranking task: SiLU MLP d -> d -> A.
inline Var ranking_logits(Tape& t, Model& m, Var u) {
  Var h = t_silu(t, t_add_bias(t, t_matmul(t, u, t.param(m.head_w1())), t.param(m.head_b1())));
  return t_add_bias(t, t_matmul(t, h, t.param(m.head_w2())), t.param(m.head_b2()));
}

}  // namespace hstu
