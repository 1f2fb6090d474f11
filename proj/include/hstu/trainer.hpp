#pragma once

// Training and evaluation: one-pass streaming or shuffled multi-epoch loops
// over per-user records, sampled-softmax and multi-task BCE losses at every
// defined target, AdamW updates (rowwise for the hashed tables), and the
// ranking metric suite (HR@K, NDCG@K, NE, log perplexity).

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hstu/model.hpp"
#include "hstu/stochastic_length.hpp"

namespace hstu {

// ---------------------------------------------------------------------------
// metrics

// Rank of the target among corpus ids [0, scores.size()): one plus the number
// of strictly better scores, plus equal scores held by smaller ids. Pessimistic
// and deterministic under ties.
inline std::size_t corpus_rank(const std::vector<double>& scores, std::uint64_t target_id) {
  require(target_id < scores.size(), "rank target outside the scored corpus");
  const double ts = scores[target_id];
  std::size_t rank = 1;
  for (std::size_t id = 0; id < scores.size(); ++id) {
    if (id == target_id) continue;
    if (scores[id] > ts || (scores[id] == ts && id < target_id)) ++rank;
  }
  return rank;
}

struct HrNdcg {
  std::map<std::size_t, double> hr;
  std::map<std::size_t, double> ndcg;
};

inline HrNdcg hr_ndcg(const std::vector<double>& scores, std::uint64_t target_id,
                      const std::vector<std::size_t>& ks) {
  std::size_t rank = corpus_rank(scores, target_id);
  HrNdcg out;
  for (std::size_t k : ks) {
    out.hr[k] = rank <= k ? 1.0 : 0.0;
    out.ndcg[k] = rank <= k ? 1.0 / std::log2(double(rank) + 1.0) : 0.0;
  }
  return out;
}

// Cross entropy of the predictions over the entropy of the label base rate.
inline double normalized_entropy(const std::vector<double>& p, const std::vector<double>& y) {
  require(!p.empty() && p.size() == y.size(), "normalized entropy needs matched nonempty inputs");
  double ybar = 0;
  for (double v : y) ybar += v;
  ybar /= double(y.size());
  require(ybar > 0.0 && ybar < 1.0, "normalized entropy is undefined for single-class labels");
  double num = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    require(p[i] > 0.0 && p[i] < 1.0, "predictions must lie strictly inside (0, 1)");
    num -= y[i] * std::log(p[i]) + (1.0 - y[i]) * std::log(1.0 - p[i]);
  }
  num /= double(p.size());
  double den = -(ybar * std::log(ybar) + (1.0 - ybar) * std::log(1.0 - ybar));
  return num / den;
}

struct MetricReport {
  std::map<std::size_t, double> hr_at_k;
  std::map<std::size_t, double> ndcg_at_k;
  std::map<std::string, double> ne;  // per action event, ranking task only
  double log_pplx = 0.0;
  std::size_t examples_seen = 0;
};

inline nlohmann::json metric_report_json(const MetricReport& r) {
  nlohmann::json hr = nlohmann::json::object(), ndcg = nlohmann::json::object(),
                 ne = nlohmann::json::object();
  for (const auto& [k, v] : r.hr_at_k) hr[std::to_string(k)] = v;
  for (const auto& [k, v] : r.ndcg_at_k) ndcg[std::to_string(k)] = v;
  for (const auto& [name, v] : r.ne) ne[name] = v;
  return nlohmann::json{{"hr_at_k", hr},
                        {"ndcg_at_k", ndcg},
                        {"ne", ne},
                        {"log_pplx", r.log_pplx},
                        {"examples_seen", r.examples_seen}};
}

// ---------------------------------------------------------------------------
// records

// One user's raw history plus the id range it may score or sample against
// (ids in [0, corpus_bound) are live; for streaming synthetic data the bound
// grows with the record index).
struct TrainRecord {
  std::vector<std::uint64_t> items;
  std::vector<std::uint64_t> actions;
  std::vector<std::int64_t> ts;
  std::vector<Event> contextual;
  std::uint64_t corpus_bound = 0;
};

inline TrainRecord synthetic_record(const std::vector<std::uint64_t>& items,
                                    std::uint64_t corpus_bound) {
  TrainRecord r;
  r.items = items;
  r.actions.assign(items.size(), 1);
  r.ts.resize(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) r.ts[i] = std::int64_t(i);
  r.corpus_bound = corpus_bound;
  return r;
}

// From a merged (sequentialized) event history.
inline TrainRecord event_record(const std::vector<Event>& merged, std::uint64_t corpus_bound) {
  TrainRecord r;
  r.corpus_bound = corpus_bound;
  for (const Event& e : merged) {
    if (e.kind == EventKind::contextual) {
      r.contextual.push_back(e);
    } else {
      r.items.push_back(e.item_id);
      r.actions.push_back(e.actions);
      r.ts.push_back(e.ts);
    }
  }
  return r;
}

inline TokenSequence record_to_sequence(const TrainRecord& r, Task task,
                                        std::uint64_t positive_mask) {
  switch (task) {
    case Task::ranking:
      return build_ranking_sequence(r.items, r.actions, r.ts, r.contextual);
    case Task::retrieval:
      return build_retrieval_sequence(r.items, r.actions, r.ts, positive_mask, r.contextual);
    case Task::next_content:
      return build_next_content_sequence(r.items, r.actions, r.ts, r.contextual);
  }
  throw ConfigError("unknown task");
}

// ---------------------------------------------------------------------------
// loss construction

inline std::vector<std::size_t> defined_positions(const TokenSequence& seq) {
  std::vector<std::size_t> pos;
  for (std::size_t p = 0; p < seq.size(); ++p)
    if (seq.target_defined[p]) pos.push_back(p);
  return pos;
}

// Mean training loss over the sequence's defined targets. Retrieval-style
// tasks take candidate table rows (target first, then negatives) per target;
// ranking ignores them and uses the event head with per-event weights.
inline Var build_training_loss(Tape& t, Model& m, const TokenSequence& seq,
                               const std::vector<std::size_t>& targets,
                               const std::vector<std::size_t>& cand_rows, std::size_t C,
                               const std::vector<real>& event_weights = {}) {
  require(!targets.empty(), "loss needs at least one defined target");
  ModelForward f = encode_sequence(t, m, seq);
  Var u = t_gather_rows(t, f.out, targets);
  Var total;
  if (seq.task == Task::ranking) {
    Var logits = ranking_logits(t, m, u);
    std::vector<std::uint64_t> labels;
    labels.reserve(targets.size());
    for (std::size_t p : targets) labels.push_back(seq.targets[p]);
    total = t_bce_multi(t, logits, std::move(labels), event_weights);
  } else {
    total = t_sampled_softmax(t, u, m.items(), cand_rows, C);
  }
  return t_scale(t, total, real(1.0 / double(targets.size())));
}

// Uniform negatives from [0, corpus_bound), resampling on raw-id collision
// with the positive. Returns hashed table rows, target row first.
inline std::vector<std::size_t> sample_candidate_rows(const Model& m, const TokenSequence& seq,
                                                      const std::vector<std::size_t>& targets,
                                                      std::uint64_t corpus_bound,
                                                      std::size_t k_neg, Rng& rng) {
  require(corpus_bound >= 2, "negative sampling needs at least two live ids");
  std::vector<std::size_t> rows;
  rows.reserve(targets.size() * (1 + k_neg));
  for (std::size_t p : targets) {
    std::uint64_t pos_id = seq.targets[p];
    rows.push_back(m.items().row_of(pos_id));
    for (std::size_t k = 0; k < k_neg; ++k) {
      std::uint64_t neg;
      do {
        neg = rng.uniform_u64(corpus_bound);
      } while (neg == pos_id);
      rows.push_back(m.items().row_of(neg));
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// optimizer

struct AdamWConfig {
  real lr = real(1e-3);
  real beta1 = real(0.9);
  real beta2 = real(0.999);
  real eps = real(1e-8);
  real weight_decay = real(0.0);
};

// Standard AdamW for dense parameters; moments live beside the optimizer,
// keyed by parameter address.
class DenseAdamW {
 public:
  void step(Matrix& w, const Matrix& g, const AdamWConfig& c, std::uint64_t step_count) {
    require(step_count >= 1, "optimizer step count starts at 1");
    auto& [m, v] = state_[&w];
    if (m.size() == 0) {
      m = Matrix(w.rows(), w.cols());
      v = Matrix(w.rows(), w.cols());
    }
    const real bc1 = real(1) - std::pow(c.beta1, real(step_count));
    const real bc2 = real(1) - std::pow(c.beta2, real(step_count));
    for (std::size_t i = 0; i < w.size(); ++i) {
      const real gi = g.data()[i];
      if (!std::isfinite(gi)) throw NumericError("dense optimizer: non-finite gradient");
      real& mi = m.data()[i];
      real& vi = v.data()[i];
      mi = c.beta1 * mi + (real(1) - c.beta1) * gi;
      vi = c.beta2 * vi + (real(1) - c.beta2) * gi * gi;
      const real mhat = mi / bc1;
      const real vhat = vi / bc2;
      w.data()[i] -= c.lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * w.data()[i]);
    }
  }

 private:
  std::map<const Matrix*, std::pair<Matrix, Matrix>> state_;
};

// ---------------------------------------------------------------------------
// training

struct TrainConfig {
  Task task = Task::retrieval;
  std::size_t epochs = 1;  // 1 = streaming
  bool shuffle = false;
  std::size_t batch_size = 1;
  AdamWConfig opt;
  std::size_t k_neg = 128;
  std::vector<real> event_weights;  // ranking only; empty = all ones
  bool use_sl = false;
  SLPolicy sl;
  bool generative_emission = false;
  double emission_c = 1.0;
  std::uint64_t seed = 0;
  std::size_t log_every = 100;

  void validate() const {
    require(epochs >= 1, "epochs must be positive");
    require(!(epochs == 1 && shuffle),
            "streaming mode trains in data order: one epoch cannot shuffle");
    require(batch_size >= 1, "batch size must be positive");
    require(k_neg >= 1, "need at least one negative per positive");
    if (use_sl) sl.validate();
  }
};

struct TimelinePoint {
  std::size_t step = 0;
  std::string metric;
  double value = 0;
};

inline void write_timeline_csv(const std::string& path, const std::vector<TimelinePoint>& tl) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write timeline: " + path);
  out << "step,metric,value\n";
  for (const auto& p : tl) out << p.step << ',' << p.metric << ',' << p.value << "\n";
  if (!out) throw IoError("failed writing timeline: " + path);
}

struct TrainResult {
  std::vector<TimelinePoint> timeline;
  std::size_t steps = 0;
  std::size_t examples_trained = 0;  // sequences that contributed a gradient
  std::size_t records_visited = 0;   // every record counts once per epoch
  double mean_loss = 0.0;            // over all trained examples
};

// Visits records in order (streaming) or reshuffled per epoch, applies
// stochastic-length selection and emission sampling, and takes an optimizer
// step every batch_size contributing examples. Throws NumericError on a
// non-finite loss.
inline TrainResult train_model(Model& m, const std::vector<TrainRecord>& data,
                               const TrainConfig& tc) {
  tc.validate();
  require(!data.empty(), "training needs at least one record");
  Rng rng(tc.seed);
  DenseAdamW dense_opt;
  TrainResult res;
  double loss_sum = 0, window_sum = 0;
  std::size_t window_count = 0;

  std::map<Matrix*, Matrix> dense_acc;
  std::map<EmbeddingTable*, SparseGrad> sparse_acc;
  std::size_t in_batch = 0;
  std::uint64_t opt_steps = 0;
  ParamSet ps = m.params();

  auto flush = [&]() {
    if (in_batch == 0) return;
    ++opt_steps;
    const real inv = real(1.0 / double(in_batch));
    for (auto& [w, g] : dense_acc) {
      for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] *= inv;
      dense_opt.step(*w, g, tc.opt, opt_steps);
    }
    for (auto& [table, sg] : sparse_acc) {
      for (auto& [row, g] : sg.rows)
        for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] *= inv;
      table->rowwise_adamw_step(sg, tc.opt.lr, tc.opt.beta1, tc.opt.beta2, tc.opt.eps,
                                tc.opt.weight_decay, opt_steps);
    }
    dense_acc.clear();
    sparse_acc.clear();
    in_batch = 0;
  };

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    if (tc.shuffle) rng.shuffle(order);
    for (std::size_t idx : order) {
      const TrainRecord& rec = data[idx];
      ++res.records_visited;
      if (rec.items.empty()) continue;

      TrainRecord view = rec;
      if (tc.use_sl && rec.items.size() > tc.sl.threshold()) {
        SLDecision d = sl_decide(rec.items.size(), tc.sl, rng);
        if (!d.keep_full) {
          auto keep = select_subsequence(rec.items.size(), d.target_len, tc.sl.method, rec.ts,
                                         rec.ts.back(), rng);
          TrainRecord cut;
          cut.corpus_bound = rec.corpus_bound;
          cut.contextual = rec.contextual;
          for (std::size_t i : keep) {
            cut.items.push_back(rec.items[i]);
            cut.actions.push_back(rec.actions[i]);
            cut.ts.push_back(rec.ts[i]);
          }
          view = std::move(cut);
        }
      }

      TokenSequence seq = record_to_sequence(view, tc.task, m.config().positive_mask);
      if (seq.size() == 0) continue;
      if (tc.generative_emission && !generative_emission_sampler(seq.size(), rng, tc.emission_c))
        continue;
      std::vector<std::size_t> targets = defined_positions(seq);
      if (targets.empty()) continue;

      std::vector<std::size_t> cand_rows;
      std::size_t C = 0;
      if (tc.task != Task::ranking) {
        C = 1 + tc.k_neg;
        cand_rows = sample_candidate_rows(m, seq, targets, rec.corpus_bound, tc.k_neg, rng);
      }

      Tape t(true);
      Var loss = build_training_loss(t, m, seq, targets, cand_rows, C, tc.event_weights);
      double lv = double(t.val(loss)(0, 0));
      if (!std::isfinite(lv))
        throw NumericError("training diverged: non-finite loss at step " +
                           std::to_string(res.steps));
      t.backward(loss);

      for (auto& [name, w] : ps.dense)
        if (const Matrix* g = t.grad_of(w)) accumulate(dense_acc[w], *g);
      for (auto& [name, table] : ps.tables)
        if (const SparseGrad* sg = t.sparse_grad_of(table))
          for (const auto& [row, g] : sg->rows) sparse_acc[table].add(row, g.row(0), g.cols());

      ++in_batch;
      ++res.examples_trained;
      ++res.steps;
      loss_sum += lv;
      window_sum += lv;
      ++window_count;
      if (in_batch >= tc.batch_size) flush();

      if (tc.log_every && res.steps % tc.log_every == 0 && window_count > 0) {
        res.timeline.push_back({res.steps, "train_loss", window_sum / double(window_count)});
        window_sum = 0;
        window_count = 0;
      }
    }
  }
  flush();
  if (window_count > 0)
    res.timeline.push_back({res.steps, "train_loss", window_sum / double(window_count)});
  res.mean_loss = res.examples_trained ? loss_sum / double(res.examples_trained) : 0.0;
  return res;
}

// ---------------------------------------------------------------------------
// evaluation

struct EvalConfig {
  std::vector<std::size_t> ks = {1, 10, 50};
  bool last_target_only = true;  // otherwise every defined target scores
};

// Scores every live corpus id against the encoder output at each evaluated
// target. Retrieval-style tasks report HR/NDCG and full-corpus log
// perplexity; ranking reports per-event NE.
inline MetricReport evaluate_model(Model& m, const std::vector<TrainRecord>& data,
                                   const EvalConfig& ec = {}) {
  MetricReport rep;
  for (std::size_t k : ec.ks) {
    rep.hr_at_k[k] = 0;
    rep.ndcg_at_k[k] = 0;
  }
  double pplx_sum = 0;
  std::size_t scored = 0;
  const std::size_t A = m.config().action_types;
  std::vector<std::vector<double>> ne_p(A), ne_y(A);

  for (const TrainRecord& rec : data) {
    if (rec.items.empty()) continue;
    TokenSequence seq = record_to_sequence(rec, m.config().task, m.config().positive_mask);
    std::vector<std::size_t> targets = defined_positions(seq);
    if (targets.empty()) continue;
    if (ec.last_target_only) targets = {targets.back()};

    Tape t(false);
    ModelForward f = encode_sequence(t, m, seq);
    const Matrix& out = t.val(f.out);

    if (m.config().task == Task::ranking) {
      Var u = t_gather_rows(t, f.out, targets);
      const Matrix& logits = t.val(ranking_logits(t, m, u));
      for (std::size_t i = 0; i < targets.size(); ++i) {
        std::uint64_t label = seq.targets[targets[i]];
        for (std::size_t e = 0; e < A; ++e) {
          double p = 1.0 / (1.0 + std::exp(-double(logits(i, e))));
          p = std::min(1.0 - 1e-12, std::max(1e-12, p));
          ne_p[e].push_back(p);
          ne_y[e].push_back(label >> e & 1 ? 1.0 : 0.0);
        }
      }
      rep.examples_seen += 1;
      continue;
    }

    require(rec.corpus_bound >= 1, "evaluation needs a positive corpus bound");
    const std::size_t V = rec.corpus_bound;
    const std::size_t d = m.config().encoder.d;
    const Matrix& W = m.items().weights();
    for (std::size_t pos : targets) {
      std::vector<double> scores(V);
      const real* u = out.row(pos);
      for (std::size_t id = 0; id < V; ++id) {
        const real* w = W.row(m.items().row_of(id));
        double dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += double(u[j]) * double(w[j]);
        scores[id] = dot;
      }
      count_linear_flops(2 * V * d);
      std::uint64_t target_id = seq.targets[pos];
      require(target_id < V, "evaluation target outside the live corpus");
      HrNdcg h = hr_ndcg(scores, target_id, ec.ks);
      for (std::size_t k : ec.ks) {
        rep.hr_at_k[k] += h.hr[k];
        rep.ndcg_at_k[k] += h.ndcg[k];
      }
      double best = scores[0];
      for (double s : scores) best = std::max(best, s);
      double denom = 0;
      for (double s : scores) denom += std::exp(s - best);
      pplx_sum += (best + std::log(denom)) - scores[target_id];
      ++scored;
    }
    rep.examples_seen += 1;
  }

  if (scored) {
    for (std::size_t k : ec.ks) {
      rep.hr_at_k[k] /= double(scored);
      rep.ndcg_at_k[k] /= double(scored);
    }
    rep.log_pplx = pplx_sum / double(scored);
  }
  for (std::size_t e = 0; e < A; ++e) {
    if (ne_p[e].empty()) continue;
    bool has0 = false, has1 = false;
    for (double y : ne_y[e]) (y > 0.5 ? has1 : has0) = true;
    if (has0 && has1) rep.ne["event" + std::to_string(e)] = normalized_entropy(ne_p[e], ne_y[e]);
  }
  return rep;
}

}  // namespace hstu
