#pragma once

// Event ingestion and task sequence construction: raw logs become a single
// per-user time series (engagements plus run-length-compressed contextual
// features), which is then laid out as ranking, retrieval, or next-content
// supervision.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hstu/common.hpp"

namespace hstu {

// ---------------------------------------------------------------------------
// events

enum class EventKind { engagement, contextual };

struct Event {
  std::uint64_t user_id = 0;
  std::uint64_t item_id = 0;   // engagement only
  std::uint64_t actions = 0;   // bitmask of atomic action events
  std::int64_t ts = 0;
  EventKind kind = EventKind::engagement;
  std::uint64_t feature_id = 0;  // contextual only
  std::uint64_t value_id = 0;    // contextual only
};

// One line per event: {"user_id":..,"item_id":..,"actions":..,"ts":..}
// with optional "ctx":{"feature_id":..,"value_id":..} marking a contextual
// event. Lines starting with '#' are comments.
inline std::vector<Event> load_events_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open event log: " + path);
  std::vector<Event> events;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    Event e;
    if (!j.contains("user_id") || !j.contains("ts"))
      throw IoError(path + ":" + std::to_string(line_no) + ": missing user_id or ts");
    e.user_id = j.at("user_id").get<std::uint64_t>();
    e.ts = j.at("ts").get<std::int64_t>();
    if (j.contains("ctx")) {
      e.kind = EventKind::contextual;
      e.feature_id = j.at("ctx").at("feature_id").get<std::uint64_t>();
      e.value_id = j.at("ctx").at("value_id").get<std::uint64_t>();
    } else {
      e.item_id = j.at("item_id").get<std::uint64_t>();
      e.actions = j.value("actions", std::uint64_t(1));
    }
    events.push_back(e);
  }
  return events;
}

// MovieLens-style triples: "user::item::rating::ts" or "user,item,rating,ts".
// Every rating becomes an engagement with action bit 0 set.
inline std::vector<Event> load_movielens(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open ratings file: " + path);
  std::vector<Event> events;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::string norm = line;
    std::size_t pos;
    while ((pos = norm.find("::")) != std::string::npos) norm.replace(pos, 2, ",");
    std::stringstream ss(norm);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() < 4)
      throw IoError(path + ":" + std::to_string(line_no) + ": expected user,item,rating,ts");
    Event e;
    try {
      e.user_id = std::stoull(fields[0]);
      e.item_id = std::stoull(fields[1]);
      e.ts = std::stoll(fields[3]);
    } catch (const std::exception&) {
      throw IoError(path + ":" + std::to_string(line_no) + ": bad numeric field");
    }
    e.actions = 1;
    events.push_back(e);
  }
  return events;
}

// Groups by user and stable-sorts each history by timestamp, preserving file
// order at ties.
inline std::map<std::uint64_t, std::vector<Event>> user_histories(const std::vector<Event>& events) {
  std::map<std::uint64_t, std::vector<Event>> users;
  for (const Event& e : events) users[e.user_id].push_back(e);
  for (auto& [id, hist] : users)
    std::stable_sort(hist.begin(), hist.end(),
                     [](const Event& a, const Event& b) { return a.ts < b.ts; });
  return users;
}

// Merges one user's events into the main time series: per contextual feature,
// consecutive runs of equal values collapse to the earliest occurrence; the
// survivors merge with engagements by timestamp, contextual first at ties.
inline std::vector<Event> sequentialize(std::vector<Event> events) {
  std::stable_sort(events.begin(), events.end(),
                   [](const Event& a, const Event& b) { return a.ts < b.ts; });
  std::map<std::uint64_t, std::uint64_t> last_value;
  std::vector<Event> kept;
  kept.reserve(events.size());
  for (const Event& e : events) {
    if (e.kind == EventKind::contextual) {
      auto it = last_value.find(e.feature_id);
      if (it != last_value.end() && it->second == e.value_id) continue;
      last_value[e.feature_id] = e.value_id;
    }
    kept.push_back(e);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const Event& a, const Event& b) {
    if (a.ts != b.ts) return a.ts < b.ts;
    return a.kind == EventKind::contextual && b.kind == EventKind::engagement;
  });
  return kept;
}

// ---------------------------------------------------------------------------
// task sequences

enum class TokenKind { content, action, contextual };
enum class Task { ranking, retrieval, next_content };

// Struct-of-arrays token series. For ranking, engagement i produces a content
// token (item) followed by an action token (bitmask), both at t_i. For
// retrieval and next-content the pair is combined into one content token
// carrying both item and actions. Targets are per-position and may be
// undefined; defined targets hold an action bitmask (ranking) or the next
// item id (retrieval, next-content).
struct TokenSequence {
  Task task = Task::ranking;
  std::vector<TokenKind> kinds;
  std::vector<std::uint64_t> items;
  std::vector<std::uint64_t> actions;
  std::vector<std::uint64_t> feature_ids;
  std::vector<std::uint64_t> value_ids;
  std::vector<std::int64_t> timestamps;
  std::vector<std::uint8_t> target_defined;
  std::vector<std::uint64_t> targets;

  std::size_t size() const { return kinds.size(); }
  std::size_t defined_target_count() const {
    std::size_t n = 0;
    for (std::uint8_t d : target_defined) n += d;
    return n;
  }

  void push(TokenKind kind, std::uint64_t item, std::uint64_t action_bits, std::uint64_t fid,
            std::uint64_t vid, std::int64_t ts) {
    kinds.push_back(kind);
    items.push_back(item);
    actions.push_back(action_bits);
    feature_ids.push_back(fid);
    value_ids.push_back(vid);
    timestamps.push_back(ts);
    target_defined.push_back(0);
    targets.push_back(0);
  }

  void set_target(std::size_t pos, std::uint64_t value) {
    target_defined[pos] = 1;
    targets[pos] = value;
  }
};

namespace detail {

struct SplitEvents {
  std::vector<Event> engagements;
  std::vector<Event> contextual;
};

inline SplitEvents split_events(const std::vector<Event>& merged) {
  SplitEvents s;
  for (const Event& e : merged)
    (e.kind == EventKind::engagement ? s.engagements : s.contextual).push_back(e);
  return s;
}

}  // namespace detail

// Interleaved layout: ...ctx(ts<=t_i)..., item_i (target a_i), action_i (no
// target), ... Contextual tokens always carry undefined targets.
inline TokenSequence build_ranking_sequence(const std::vector<std::uint64_t>& items,
                                            const std::vector<std::uint64_t>& actions,
                                            const std::vector<std::int64_t>& ts,
                                            const std::vector<Event>& contextual = {}) {
  require(items.size() == actions.size() && items.size() == ts.size(),
          "ranking needs matching item, action, and timestamp counts");
  TokenSequence seq;
  seq.task = Task::ranking;
  std::size_t c = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    while (c < contextual.size() && contextual[c].ts <= ts[i]) {
      seq.push(TokenKind::contextual, 0, 0, contextual[c].feature_id, contextual[c].value_id,
               contextual[c].ts);
      ++c;
    }
    seq.push(TokenKind::content, items[i], 0, 0, 0, ts[i]);
    seq.set_target(seq.size() - 1, actions[i]);
    seq.push(TokenKind::action, 0, actions[i], 0, 0, ts[i]);
  }
  while (c < contextual.size()) {
    seq.push(TokenKind::contextual, 0, 0, contextual[c].feature_id, contextual[c].value_id,
             contextual[c].ts);
    ++c;
  }
  return seq;
}

// Combined (item, actions) tokens; the target at engagement ordinal i is the
// next item iff its actions intersect the positive set, never at the last.
inline TokenSequence build_retrieval_sequence(const std::vector<std::uint64_t>& items,
                                              const std::vector<std::uint64_t>& actions,
                                              const std::vector<std::int64_t>& ts,
                                              std::uint64_t positive_mask = 1,
                                              const std::vector<Event>& contextual = {}) {
  require(items.size() == actions.size() && items.size() == ts.size(),
          "retrieval needs matching item, action, and timestamp counts");
  TokenSequence seq;
  seq.task = Task::retrieval;
  std::vector<std::size_t> content_pos;
  std::size_t c = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    while (c < contextual.size() && contextual[c].ts <= ts[i]) {
      seq.push(TokenKind::contextual, 0, 0, contextual[c].feature_id, contextual[c].value_id,
               contextual[c].ts);
      ++c;
    }
    seq.push(TokenKind::content, items[i], actions[i], 0, 0, ts[i]);
    content_pos.push_back(seq.size() - 1);
  }
  while (c < contextual.size()) {
    seq.push(TokenKind::contextual, 0, 0, contextual[c].feature_id, contextual[c].value_id,
             contextual[c].ts);
    ++c;
  }
  for (std::size_t i = 0; i + 1 < items.size(); ++i)
    if (actions[i + 1] & positive_mask) seq.set_target(content_pos[i], items[i + 1]);
  return seq;
}

// Ranking-style interleave, but supervision sits at action positions: the
// target after action a_i is the next item, undefined at the end.
inline TokenSequence build_next_content_sequence(const std::vector<std::uint64_t>& items,
                                                 const std::vector<std::uint64_t>& actions,
                                                 const std::vector<std::int64_t>& ts,
                                                 const std::vector<Event>& contextual = {}) {
  TokenSequence seq = build_ranking_sequence(items, actions, ts, contextual);
  seq.task = Task::next_content;
  std::fill(seq.target_defined.begin(), seq.target_defined.end(), 0);
  std::fill(seq.targets.begin(), seq.targets.end(), 0);
  std::size_t ordinal = 0;
  for (std::size_t p = 0; p < seq.size(); ++p) {
    if (seq.kinds[p] != TokenKind::action) continue;
    if (ordinal + 1 < items.size()) seq.set_target(p, items[ordinal + 1]);
    ++ordinal;
  }
  return seq;
}

// Builds the task layout straight from one user's merged event series.
inline TokenSequence make_task_sequence(const std::vector<Event>& merged, Task task,
                                        std::uint64_t positive_mask = 1) {
  auto split = detail::split_events(merged);
  std::vector<std::uint64_t> items, actions;
  std::vector<std::int64_t> ts;
  for (const Event& e : split.engagements) {
    items.push_back(e.item_id);
    actions.push_back(e.actions);
    ts.push_back(e.ts);
  }
  switch (task) {
    case Task::ranking:
      return build_ranking_sequence(items, actions, ts, split.contextual);
    case Task::retrieval:
      return build_retrieval_sequence(items, actions, ts, positive_mask, split.contextual);
    case Task::next_content:
      return build_next_content_sequence(items, actions, ts, split.contextual);
  }
  throw ConfigError("unknown task");
}

// ---------------------------------------------------------------------------
// generative emission and training cost

// A user's whole sequence is emitted as one training example with probability
// min(1, c/n); across users this keeps expected supervision linear in tokens.
inline bool generative_emission_sampler(std::size_t n_tokens, Rng& rng, double c = 1.0) {
  require(n_tokens >= 1, "emission sampler needs a nonempty sequence");
  double p = std::min(1.0, c / double(n_tokens));
  return rng.uniform() < p;
}

enum class TrainingMode { impression, generative };

// Closed-form cost of a training pass. Impression-level training replays the
// whole prefix for each of the n_i impressions; generative training visits the
// sequence once, scaled by the 1/n_i emission rate.
inline double count_training_flops(const std::vector<std::size_t>& seq_lens, TrainingMode mode,
                                   double d, double d_ff) {
  double total = 0;
  for (std::size_t n_raw : seq_lens) {
    double n = double(n_raw);
    if (mode == TrainingMode::impression)
      total += n * (n * n * d + n * d_ff * d);
    else
      total += (1.0 / n) * n * (n * n * d + n * d * d);
  }
  return total;
}

}  // namespace hstu
