// Command-line entry point wiring every module together: synthetic data
// generation, training, evaluation, cached inference, throughput benchmarks,
// and sequence-length sparsity reports.
//
// Config files are UTF-8 JSON; command-line flags override file values
// (base defaults < config file < flags). Unknown config keys are rejected.
// Every run writes a manifest JSON capturing the full effective
// configuration so the run is reproducible from the manifest alone.
//
// Exit codes: 0 success, 2 usage/config/io error, 3 numeric failure,
// 1 unexpected error.

#include <chrono>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hstu/mfalcon.hpp"
#include "hstu/model.hpp"
#include "hstu/stochastic_length.hpp"
#include "hstu/synthetic.hpp"
#include "hstu/trainer.hpp"

namespace {

constexpr const char* kVersion = "0.1.0";

using nlohmann::json;

// ---------------------------------------------------------------------------
// config file helpers

json read_json_file(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw hstu::IoError(std::string("cannot open ") + what + ": " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw hstu::ConfigError(std::string(what) + " is not valid JSON (" + path + "): " + e.what());
  }
  if (!j.is_object()) throw hstu::ConfigError(std::string(what) + " must be a JSON object");
  return j;
}

hstu::DPConfig dp_from_json(const json& j, hstu::DPConfig base) {
  hstu::DPConfig c = base;
  for (const auto& [key, val] : j.items()) {
    try {
      if (key == "num_items")
        c.num_items = val.get<std::size_t>();
      else if (key == "num_categories")
        c.num_categories = val.get<std::size_t>();
      else if (key == "num_records")
        c.num_records = val.get<std::size_t>();
      else if (key == "record_length")
        c.record_length = val.get<std::size_t>();
      else if (key == "train_fraction")
        c.train_fraction = val.get<double>();
      else if (key == "initial_available_fraction")
        c.initial_available_fraction = val.get<double>();
      else if (key == "categories_per_record_max")
        c.categories_per_record_max = val.get<std::size_t>();
      else if (key == "alpha_lo")
        c.alpha_lo = val.get<double>();
      else if (key == "alpha_hi")
        c.alpha_hi = val.get<double>();
      else if (key == "seed")
        c.seed = val.get<std::uint64_t>();
      else
        throw hstu::ConfigError("generate config: unknown key '" + key + "'");
    } catch (const json::exception& e) {
      throw hstu::ConfigError("generate config key '" + key + "': " + e.what());
    }
  }
  return c;
}

json dp_to_json(const hstu::DPConfig& c) {
  return json{{"num_items", c.num_items},
              {"num_categories", c.num_categories},
              {"num_records", c.num_records},
              {"record_length", c.record_length},
              {"train_fraction", c.train_fraction},
              {"initial_available_fraction", c.initial_available_fraction},
              {"categories_per_record_max", c.categories_per_record_max},
              {"alpha_lo", c.alpha_lo},
              {"alpha_hi", c.alpha_hi},
              {"seed", c.seed}};
}

hstu::Task parse_task(const std::string& s) {
  if (s == "ranking") return hstu::Task::ranking;
  if (s == "retrieval") return hstu::Task::retrieval;
  if (s == "next_content") return hstu::Task::next_content;
  throw hstu::ConfigError("unknown task: " + s);
}

hstu::SelectionMethod parse_selection(const std::string& s) {
  if (s == "greedy") return hstu::SelectionMethod::greedy;
  if (s == "random_uniform") return hstu::SelectionMethod::random_uniform;
  if (s == "feature_weighted") return hstu::SelectionMethod::feature_weighted;
  throw hstu::ConfigError("unknown selection method: " + s);
}

const char* selection_name(hstu::SelectionMethod m) {
  switch (m) {
    case hstu::SelectionMethod::greedy: return "greedy";
    case hstu::SelectionMethod::random_uniform: return "random_uniform";
    default: return "feature_weighted";
  }
}

const char* task_name(hstu::Task t) {
  switch (t) {
    case hstu::Task::ranking: return "ranking";
    case hstu::Task::retrieval: return "retrieval";
    default: return "next_content";
  }
}

hstu::TrainConfig train_from_json(const json& j, hstu::TrainConfig base) {
  hstu::TrainConfig c = base;
  for (const auto& [key, val] : j.items()) {
    try {
      if (key == "task")
        c.task = parse_task(val.get<std::string>());
      else if (key == "epochs")
        c.epochs = val.get<std::size_t>();
      else if (key == "shuffle")
        c.shuffle = val.get<bool>();
      else if (key == "batch_size")
        c.batch_size = val.get<std::size_t>();
      else if (key == "lr")
        c.opt.lr = val.get<hstu::real>();
      else if (key == "beta1")
        c.opt.beta1 = val.get<hstu::real>();
      else if (key == "beta2")
        c.opt.beta2 = val.get<hstu::real>();
      else if (key == "eps")
        c.opt.eps = val.get<hstu::real>();
      else if (key == "weight_decay")
        c.opt.weight_decay = val.get<hstu::real>();
      else if (key == "k_neg")
        c.k_neg = val.get<std::size_t>();
      else if (key == "event_weights")
        c.event_weights = val.get<std::vector<hstu::real>>();
      else if (key == "use_sl")
        c.use_sl = val.get<bool>();
      else if (key == "sl_alpha")
        c.sl.alpha = val.get<double>();
      else if (key == "sl_max_content_len")
        c.sl.max_content_len = val.get<std::size_t>();
      else if (key == "sl_method")
        c.sl.method = parse_selection(val.get<std::string>());
      else if (key == "generative_emission")
        c.generative_emission = val.get<bool>();
      else if (key == "emission_c")
        c.emission_c = val.get<double>();
      else if (key == "seed")
        c.seed = val.get<std::uint64_t>();
      else if (key == "log_every")
        c.log_every = val.get<std::size_t>();
      else
        throw hstu::ConfigError("train config: unknown key '" + key + "'");
    } catch (const json::exception& e) {
      throw hstu::ConfigError("train config key '" + key + "': " + e.what());
    }
  }
  return c;
}

json train_to_json(const hstu::TrainConfig& c) {
  return json{{"task", task_name(c.task)},
              {"epochs", c.epochs},
              {"shuffle", c.shuffle},
              {"batch_size", c.batch_size},
              {"lr", c.opt.lr},
              {"beta1", c.opt.beta1},
              {"beta2", c.opt.beta2},
              {"eps", c.opt.eps},
              {"weight_decay", c.opt.weight_decay},
              {"k_neg", c.k_neg},
              {"event_weights", c.event_weights},
              {"use_sl", c.use_sl},
              {"sl_alpha", c.sl.alpha},
              {"sl_max_content_len", c.sl.max_content_len},
              {"sl_method", selection_name(c.sl.method)},
              {"generative_emission", c.generative_emission},
              {"emission_c", c.emission_c},
              {"seed", c.seed},
              {"log_every", c.log_every}};
}

// ---------------------------------------------------------------------------
// manifest

void write_manifest(const std::string& path, const std::string& command, const json& config,
                    std::uint64_t seed, double wall_seconds,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) {
  json m{{"command", command},       {"version", kVersion}, {"seed", seed},
         {"wall_seconds", wall_seconds}, {"config", config},    {"inputs", inputs},
         {"outputs", outputs}};
  std::ofstream out(path);
  if (!out) throw hstu::IoError("cannot write manifest: " + path);
  out << m.dump(2) << "\n";
  if (!out) throw hstu::IoError("failed writing manifest: " + path);
}

struct WallTimer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

// ---------------------------------------------------------------------------
// dataset loading shared by train/eval

struct LoadedRecords {
  std::vector<hstu::TrainRecord> records;
  std::uint64_t bound = 1;
};

LoadedRecords load_records(const std::string& path, const std::string& format,
                           std::uint64_t bound_flag) {
  LoadedRecords out;
  std::uint64_t max_id = 0;
  bool any = false;
  auto see = [&](std::uint64_t id) {
    if (!any || id > max_id) max_id = id;
    any = true;
  };
  if (format == "dp") {
    for (auto& items : hstu::load_dp_dataset(path)) {
      for (std::uint64_t id : items) see(id);
      out.records.push_back(hstu::synthetic_record(items, 1));
    }
  } else {
    std::vector<hstu::Event> events =
        format == "events" ? hstu::load_events_jsonl(path) : hstu::load_movielens(path);
    for (auto& [uid, ev] : hstu::user_histories(events)) {
      hstu::TrainRecord r = hstu::event_record(hstu::sequentialize(ev), 1);
      for (std::uint64_t id : r.items) see(id);
      out.records.push_back(std::move(r));
    }
  }
  out.bound = bound_flag != 0 ? bound_flag : (any ? max_id + 1 : 1);
  for (auto& r : out.records) r.corpus_bound = out.bound;
  return out;
}

// ---------------------------------------------------------------------------
// shared model/train flag plumbing

struct ModelFlags {
  std::string arch, attention, task, n_norm;
  std::size_t d = 0, heads = 0, d_qk = 0, d_v = 0, layers = 0, max_seq_len = 0;
  std::size_t item_rows = 0, ctx_rows = 0, action_types = 0;
  std::size_t pos_buckets = 0, temp_buckets = 0;
  int rab_pos = -1, rab_temp = -1;
  std::uint64_t model_seed = 0;

  CLI::Option* o_arch = nullptr;
  CLI::Option* o_attention = nullptr;
  CLI::Option* o_task = nullptr;
  CLI::Option* o_n_norm = nullptr;
  CLI::Option* o_d = nullptr;
  CLI::Option* o_heads = nullptr;
  CLI::Option* o_d_qk = nullptr;
  CLI::Option* o_d_v = nullptr;
  CLI::Option* o_layers = nullptr;
  CLI::Option* o_max_seq_len = nullptr;
  CLI::Option* o_item_rows = nullptr;
  CLI::Option* o_ctx_rows = nullptr;
  CLI::Option* o_action_types = nullptr;
  CLI::Option* o_pos_buckets = nullptr;
  CLI::Option* o_temp_buckets = nullptr;
  CLI::Option* o_rab_pos = nullptr;
  CLI::Option* o_rab_temp = nullptr;
  CLI::Option* o_model_seed = nullptr;

  void attach(CLI::App* cmd) {
    o_arch = cmd->add_option("--arch", arch, "Encoder architecture: hstu or transformer");
    o_attention = cmd->add_option("--attention", attention, "Attention kind: pointwise or softmax");
    o_task = cmd->add_option("--task", task, "Task: ranking, retrieval, or next_content");
    o_n_norm = cmd->add_option("--n-norm", n_norm,
                               "Pointwise normalizer: max_len, valid_count, or one");
    o_d = cmd->add_option("--d", d, "Embedding width");
    o_heads = cmd->add_option("--heads", heads, "Attention heads");
    o_d_qk = cmd->add_option("--d-qk", d_qk, "Per-head query/key width");
    o_d_v = cmd->add_option("--d-v", d_v, "Per-head value width");
    o_layers = cmd->add_option("--layers", layers, "Encoder layers");
    o_max_seq_len = cmd->add_option("--max-seq-len", max_seq_len, "Maximum sequence length");
    o_item_rows = cmd->add_option("--item-rows", item_rows, "Hashed item table rows");
    o_ctx_rows = cmd->add_option("--ctx-rows", ctx_rows, "Hashed contextual table rows");
    o_action_types = cmd->add_option("--action-types", action_types, "Action event count");
    o_pos_buckets = cmd->add_option("--rab-pos-buckets", pos_buckets, "Positional bias buckets");
    o_temp_buckets = cmd->add_option("--rab-temp-buckets", temp_buckets, "Temporal bias buckets");
    o_rab_pos = cmd->add_option("--rab-pos", rab_pos, "Positional bias on (1) or off (0)");
    o_rab_temp = cmd->add_option("--rab-temp", rab_temp, "Temporal bias on (1) or off (0)");
    o_model_seed = cmd->add_option("--model-seed", model_seed, "Parameter init seed");
  }

  void apply(hstu::ModelConfig& c) const {
    if (*o_arch)
      c.arch = arch == "hstu" ? hstu::Arch::hstu
               : arch == "transformer"
                   ? hstu::Arch::transformer
                   : throw hstu::ConfigError("unknown arch: " + arch);
    if (*o_attention)
      c.encoder.attention = attention == "pointwise" ? hstu::AttnKind::pointwise
                            : attention == "softmax"
                                ? hstu::AttnKind::softmax
                                : throw hstu::ConfigError("unknown attention kind: " + attention);
    if (*o_task) c.task = parse_task(task);
    if (*o_n_norm)
      c.encoder.n_norm = n_norm == "max_len"       ? hstu::NNormMode::max_len
                         : n_norm == "valid_count" ? hstu::NNormMode::valid_count
                         : n_norm == "one"
                             ? hstu::NNormMode::one
                             : throw hstu::ConfigError("unknown n_norm mode: " + n_norm);
    if (*o_d) c.encoder.d = d;
    if (*o_heads) c.encoder.heads = heads;
    if (*o_d_qk) c.encoder.d_qk = d_qk;
    if (*o_d_v) c.encoder.d_v = d_v;
    if (*o_layers) c.encoder.layers = layers;
    if (*o_max_seq_len) c.encoder.max_seq_len = max_seq_len;
    if (*o_item_rows) c.item_rows = item_rows;
    if (*o_ctx_rows) c.ctx_rows = ctx_rows;
    if (*o_action_types) c.action_types = action_types;
    if (*o_pos_buckets) c.encoder.rab_pos_buckets = pos_buckets;
    if (*o_temp_buckets) c.encoder.rab_temp_buckets = temp_buckets;
    if (*o_rab_pos) c.encoder.rab_pos = rab_pos != 0;
    if (*o_rab_temp) c.encoder.rab_temp = rab_temp != 0;
    if (*o_model_seed) c.seed = model_seed;
  }
};

hstu::ModelConfig model_config_from(const json* file_cfg, const ModelFlags& flags) {
  hstu::ModelConfig mc;
  if (file_cfg != nullptr) {
    if (file_cfg->contains("model")) mc = hstu::ModelConfig::from_json((*file_cfg)["model"]);
  }
  flags.apply(mc);
  return mc;
}

// ---------------------------------------------------------------------------
// subcommand runners

struct GenerateArgs {
  std::string config_path, out_path, manifest_path;
  bool full_scale = false;
  hstu::DPConfig flags;  // flag values land here when set
  CLI::Option *o_num_items, *o_num_categories, *o_num_records, *o_record_length,
      *o_train_fraction, *o_initial_available_fraction, *o_categories_per_record_max, *o_alpha_lo,
      *o_alpha_hi, *o_seed;
};

int run_generate(const GenerateArgs& a) {
  WallTimer timer;
  hstu::DPConfig cfg = a.full_scale ? hstu::DPConfig::full_scale() : hstu::DPConfig{};
  if (!a.config_path.empty())
    cfg = dp_from_json(read_json_file(a.config_path, "generate config"), cfg);
  if (*a.o_num_items) cfg.num_items = a.flags.num_items;
  if (*a.o_num_categories) cfg.num_categories = a.flags.num_categories;
  if (*a.o_num_records) cfg.num_records = a.flags.num_records;
  if (*a.o_record_length) cfg.record_length = a.flags.record_length;
  if (*a.o_train_fraction) cfg.train_fraction = a.flags.train_fraction;
  if (*a.o_initial_available_fraction)
    cfg.initial_available_fraction = a.flags.initial_available_fraction;
  if (*a.o_categories_per_record_max)
    cfg.categories_per_record_max = a.flags.categories_per_record_max;
  if (*a.o_alpha_lo) cfg.alpha_lo = a.flags.alpha_lo;
  if (*a.o_alpha_hi) cfg.alpha_hi = a.flags.alpha_hi;
  if (*a.o_seed) cfg.seed = a.flags.seed;
  cfg.validate();

  hstu::DPDataset ds = hstu::generate_dp_dataset(cfg);
  hstu::write_dp_dataset(a.out_path, cfg, ds.records);
  std::string manifest = a.manifest_path.empty() ? a.out_path + ".manifest.json" : a.manifest_path;
  write_manifest(manifest, "generate", dp_to_json(cfg), cfg.seed, timer.seconds(),
                 a.config_path.empty() ? std::vector<std::string>{}
                                       : std::vector<std::string>{a.config_path},
                 {a.out_path});
  std::cout << "wrote " << cfg.num_records << " records to " << a.out_path << "\n";
  return 0;
}

struct TrainArgs {
  std::string config_path, data_path, format = "dp", out_path, timeline_path, manifest_path;
  std::uint64_t corpus_bound = 0;
  ModelFlags model;
  // train flag values + presence
  std::size_t epochs = 0, batch_size = 0, k_neg = 0, log_every = 0, sl_max_content_len = 0;
  double lr = 0, weight_decay = 0, sl_alpha = 0, emission_c = 0;
  bool shuffle = false, use_sl = false, generative_emission = false;
  std::uint64_t seed = 0;
  std::string sl_method;
  CLI::Option *o_epochs, *o_batch_size, *o_k_neg, *o_log_every, *o_lr, *o_weight_decay, *o_shuffle,
      *o_use_sl, *o_sl_alpha, *o_sl_max_content_len, *o_sl_method, *o_generative_emission,
      *o_emission_c, *o_seed, *o_corpus_bound;
};

int run_train(const TrainArgs& a) {
  WallTimer timer;
  std::optional<json> file_cfg;
  if (!a.config_path.empty()) {
    json j = read_json_file(a.config_path, "train config");
    for (const auto& [key, val] : j.items()) {
      (void)val;
      if (key != "model" && key != "train")
        throw hstu::ConfigError("train config: unknown top-level key '" + key +
                                "' (expected 'model' and/or 'train')");
    }
    file_cfg = j;
  }
  hstu::ModelConfig mc = model_config_from(file_cfg ? &*file_cfg : nullptr, a.model);
  hstu::TrainConfig tc;
  if (file_cfg && file_cfg->contains("train")) tc = train_from_json((*file_cfg)["train"], tc);
  if (*a.o_epochs) tc.epochs = a.epochs;
  if (*a.o_shuffle) tc.shuffle = a.shuffle;
  if (*a.o_batch_size) tc.batch_size = a.batch_size;
  if (*a.o_lr) tc.opt.lr = hstu::real(a.lr);
  if (*a.o_weight_decay) tc.opt.weight_decay = hstu::real(a.weight_decay);
  if (*a.o_k_neg) tc.k_neg = a.k_neg;
  if (*a.o_use_sl) tc.use_sl = a.use_sl;
  if (*a.o_sl_alpha) tc.sl.alpha = a.sl_alpha;
  if (*a.o_sl_max_content_len) tc.sl.max_content_len = a.sl_max_content_len;
  if (*a.o_sl_method) tc.sl.method = parse_selection(a.sl_method);
  if (*a.o_generative_emission) tc.generative_emission = a.generative_emission;
  if (*a.o_emission_c) tc.emission_c = a.emission_c;
  if (*a.o_seed) tc.seed = a.seed;
  if (*a.o_log_every) tc.log_every = a.log_every;

  // One task governs the whole run: the model's. A conflicting train-side
  // task is a configuration mistake, not a silent override.
  bool file_train_task = file_cfg && file_cfg->contains("train") &&
                         (*file_cfg)["train"].contains("task");
  if (file_train_task && tc.task != mc.task)
    throw hstu::ConfigError("task must match between model and train config");
  tc.task = mc.task;

  tc.validate();
  mc.validate();

  LoadedRecords data = load_records(a.data_path, a.format, a.corpus_bound);
  if (data.records.empty()) throw hstu::ConfigError("no training records in " + a.data_path);

  hstu::Model model(mc);
  hstu::TrainResult res = hstu::train_model(model, data.records, tc);
  model.save(a.out_path);
  std::vector<std::string> outputs{a.out_path};
  if (!a.timeline_path.empty()) {
    hstu::write_timeline_csv(a.timeline_path, res.timeline);
    outputs.push_back(a.timeline_path);
  }

  json cfg_echo{{"model", mc.to_json()},
                {"train", train_to_json(tc)},
                {"data", a.data_path},
                {"format", a.format},
                {"corpus_bound", data.bound}};
  std::string manifest = a.manifest_path.empty() ? a.out_path + ".manifest.json" : a.manifest_path;
  write_manifest(manifest, "train", cfg_echo, tc.seed, timer.seconds(), {a.data_path}, outputs);
  std::cout << "trained on " << res.examples_trained << " examples over " << res.steps
            << " steps; mean loss " << res.mean_loss << "; checkpoint " << a.out_path << "\n";
  return 0;
}

struct EvalArgs {
  std::string model_path, data_path, format = "dp", out_path, manifest_path;
  std::vector<std::size_t> ks = {1, 10, 50};
  bool all_targets = false;
  std::uint64_t corpus_bound = 0;
};

int run_eval(const EvalArgs& a) {
  WallTimer timer;
  hstu::Model model = hstu::Model::load(a.model_path);
  LoadedRecords data = load_records(a.data_path, a.format, a.corpus_bound);
  if (data.records.empty()) throw hstu::ConfigError("no evaluation records in " + a.data_path);
  hstu::EvalConfig ec;
  if (!a.ks.empty()) ec.ks = a.ks;
  ec.last_target_only = !a.all_targets;
  hstu::MetricReport rep = hstu::evaluate_model(model, data.records, ec);
  json out = hstu::metric_report_json(rep);
  std::cout << out.dump(2) << "\n";
  std::vector<std::string> outputs;
  if (!a.out_path.empty()) {
    std::ofstream f(a.out_path);
    if (!f) throw hstu::IoError("cannot write metrics: " + a.out_path);
    f << out.dump(2) << "\n";
    outputs.push_back(a.out_path);
  }
  json cfg_echo{{"model", a.model_path}, {"data", a.data_path},
                {"format", a.format},    {"ks", ec.ks},
                {"last_target_only", ec.last_target_only}, {"corpus_bound", data.bound}};
  std::string manifest = a.manifest_path.empty()
                             ? (a.out_path.empty() ? std::string("eval.manifest.json")
                                                   : a.out_path + ".manifest.json")
                             : a.manifest_path;
  write_manifest(manifest, "eval", cfg_echo, model.config().seed, timer.seconds(),
                 {a.model_path, a.data_path}, outputs);
  return 0;
}

struct InferArgs {
  std::string model_path, events_path, candidates_path, out_path, manifest_path;
  std::string cache = "request";
  std::uint64_t user = 0;
  std::int64_t request_ts = 0;
  std::size_t b_m = 1;
  CLI::Option *o_user, *o_request_ts;
};

int run_infer(const InferArgs& a) {
  WallTimer timer;
  hstu::Model model = hstu::Model::load(a.model_path);

  std::vector<hstu::Event> events = hstu::load_events_jsonl(a.events_path);
  auto users = hstu::user_histories(events);
  if (users.empty()) throw hstu::ConfigError("no events in " + a.events_path);
  std::uint64_t uid;
  if (*a.o_user) {
    uid = a.user;
    if (users.find(uid) == users.end())
      throw hstu::ConfigError("user " + std::to_string(uid) + " has no events in " +
                              a.events_path);
  } else if (users.size() == 1) {
    uid = users.begin()->first;
  } else {
    throw hstu::ConfigError("events file holds " + std::to_string(users.size()) +
                            " users; pick one with --user");
  }

  hstu::TrainRecord rec = hstu::event_record(hstu::sequentialize(users[uid]), 1);
  if (rec.items.empty()) throw hstu::ConfigError("selected user has no engagement events");
  hstu::TokenSequence prefix =
      hstu::record_to_sequence(rec, model.config().task, model.config().positive_mask);

  std::vector<std::uint64_t> candidates;
  {
    std::ifstream in(a.candidates_path);
    if (!in) throw hstu::IoError("cannot open candidates: " + a.candidates_path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      try {
        candidates.push_back(std::stoull(line));
      } catch (const std::exception&) {
        throw hstu::ConfigError("candidates file: not an item id: '" + line + "'");
      }
    }
  }
  if (candidates.empty()) throw hstu::ConfigError("no candidates in " + a.candidates_path);

  hstu::CacheMode mode;
  if (a.cache == "off")
    mode = hstu::CacheMode::off;
  else if (a.cache == "request")
    mode = hstu::CacheMode::request;
  else if (a.cache == "session")
    mode = hstu::CacheMode::session;
  else
    throw hstu::ConfigError("unknown cache mode: " + a.cache);

  hstu::ScoreRequest req;
  req.user_id = uid;
  req.events = prefix;
  req.candidates = candidates;
  req.request_ts = *a.o_request_ts
                       ? a.request_ts
                       : *std::max_element(rec.ts.begin(), rec.ts.end()) + 1;
  req.b_m = a.b_m;
  req.cache = mode;

  hstu::SessionStore store;
  hstu::ScoreOutput out =
      hstu::mfalcon_score(model, req, mode == hstu::CacheMode::session ? &store : nullptr);

  std::ostringstream lines;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    json row{{"candidate", candidates[i]}, {"probabilities", json::array()}};
    for (std::size_t e = 0; e < model.config().action_types; ++e)
      row["probabilities"].push_back(out.probs(i, e));
    lines << row.dump() << "\n";
  }
  std::vector<std::string> outputs;
  if (a.out_path.empty()) {
    std::cout << lines.str();
  } else {
    std::ofstream f(a.out_path);
    if (!f) throw hstu::IoError("cannot write scores: " + a.out_path);
    f << lines.str();
    outputs.push_back(a.out_path);
  }

  json cfg_echo{{"model", a.model_path},
                {"events", a.events_path},
                {"candidates", a.candidates_path},
                {"user", uid},
                {"request_ts", req.request_ts},
                {"b_m", req.b_m},
                {"cache", a.cache},
                {"cache_outcome", hstu::cache_outcome_name(out.outcome)},
                {"attention_flops", out.flops.attention},
                {"linear_flops", out.flops.linear},
                {"other_flops", out.flops.other}};
  std::string manifest = a.manifest_path.empty()
                             ? (a.out_path.empty() ? std::string("infer.manifest.json")
                                                   : a.out_path + ".manifest.json")
                             : a.manifest_path;
  write_manifest(manifest, "infer", cfg_echo, model.config().seed, timer.seconds(),
                 {a.model_path, a.events_path, a.candidates_path}, outputs);
  return 0;
}

struct BenchArgs {
  std::string model_path, config_path, out_path, manifest_path;
  std::size_t n = 128, candidates = 16, repetitions = 3;
  std::vector<std::size_t> bm_grid = {1, 4};
  std::uint64_t seed = 1;
  ModelFlags model;
};

int run_bench(const BenchArgs& a) {
  WallTimer timer;
  std::optional<hstu::Model> model;
  json model_echo;
  if (!a.model_path.empty()) {
    model.emplace(hstu::Model::load(a.model_path));
    model_echo = a.model_path;
  } else {
    std::optional<json> file_cfg;
    if (!a.config_path.empty()) {
      json j = read_json_file(a.config_path, "bench config");
      for (const auto& [key, val] : j.items()) {
        (void)val;
        if (key != "model")
          throw hstu::ConfigError("bench config: unknown top-level key '" + key +
                                  "' (expected 'model')");
      }
      file_cfg = j;
    }
    hstu::ModelConfig mc = model_config_from(file_cfg ? &*file_cfg : nullptr, a.model);
    if (!*a.model.o_max_seq_len && !(file_cfg && file_cfg->contains("model")))
      mc.encoder.max_seq_len = a.n + a.candidates;
    mc.validate();
    model.emplace(mc);
    model_echo = mc.to_json();
  }

  std::vector<hstu::BenchRow> rows =
      hstu::throughput_bench(*model, a.n, a.candidates, a.bm_grid, a.repetitions, a.seed);
  hstu::write_bench_csv(a.out_path, rows);

  json cfg_echo{{"model", model_echo},   {"n", a.n},
                {"candidates", a.candidates}, {"bm_grid", a.bm_grid},
                {"repetitions", a.repetitions}, {"seed", a.seed}};
  std::string manifest = a.manifest_path.empty() ? a.out_path + ".manifest.json" : a.manifest_path;
  write_manifest(manifest, "bench", cfg_echo, a.seed, timer.seconds(),
                 a.model_path.empty() ? std::vector<std::string>{}
                                      : std::vector<std::string>{a.model_path},
                 {a.out_path});
  std::cout << "wrote " << rows.size() << " bench rows to " << a.out_path << "\n";
  return 0;
}

struct SlReportArgs {
  std::string histogram_path, out_path, manifest_path;
  std::size_t max_len = 0;
  double alpha = 0;
  CLI::Option *o_max_len, *o_alpha;
};

int run_sl_report(const SlReportArgs& a) {
  WallTimer timer;
  std::ifstream in(a.histogram_path);
  if (!in) throw hstu::IoError("cannot open histogram: " + a.histogram_path);
  std::map<std::size_t, std::uint64_t> hist;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw hstu::ConfigError("histogram line " + std::to_string(line_no) + ": " + e.what());
    }
    std::size_t length = 0;
    std::uint64_t count = 0;
    for (const auto& [key, val] : j.items()) {
      try {
        if (key == "length")
          length = val.get<std::size_t>();
        else if (key == "count")
          count = val.get<std::uint64_t>();
        else
          throw hstu::ConfigError("histogram line " + std::to_string(line_no) +
                                  ": unknown key '" + key + "'");
      } catch (const json::exception& e) {
        throw hstu::ConfigError("histogram line " + std::to_string(line_no) + " key '" + key +
                                "': " + e.what());
      }
    }
    hstu::require(length >= 1, "histogram lengths must be positive");
    hstu::require(count >= 1, "histogram counts must be positive");
    hist[length] += count;
  }
  if (hist.empty()) throw hstu::ConfigError("histogram is empty: " + a.histogram_path);

  std::size_t max_observed = hist.rbegin()->first;
  std::size_t N = *a.o_max_len ? a.max_len : max_observed;
  hstu::require(N >= max_observed, "max length is below the longest histogram entry");

  double total = 0, sum = 0, sum2 = 0;
  for (const auto& [n, c] : hist) {
    total += double(c);
    sum += double(c) * double(n);
    sum2 += double(c) * double(n) * double(n);
  }
  double raw_sparsity = 1.0 - (sum / total) / double(N);
  double raw_s2 = 1.0 - (sum2 / total) / (double(N) * double(N));

  json out{{"max_len", N},
           {"sequences", std::uint64_t(total)},
           {"raw", {{"sparsity", raw_sparsity}, {"s2", raw_s2}}},
           {"sl", nullptr}};

  std::ostringstream table;
  table << "sequences " << std::uint64_t(total) << "  max_len " << N << "\n";
  table << "setting               sparsity        s2\n";
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-20s  %.6f        %.6f\n", "raw", raw_sparsity, raw_s2);
  table << buf;

  if (*a.o_alpha) {
    hstu::SLPolicy policy;
    policy.alpha = a.alpha;
    policy.max_content_len = N;
    policy.validate();
    std::size_t lstar = policy.threshold();
    // Expected post-policy lengths: below the threshold nothing changes;
    // above it the sequence keeps full length with probability p and is
    // otherwise subsampled to exactly the threshold.
    double esum = 0, esum2 = 0;
    for (const auto& [n, c] : hist) {
      double ev, ev2;
      if (n <= lstar) {
        ev = double(n);
        ev2 = double(n) * double(n);
      } else {
        double p = policy.keep_full_probability(n);
        ev = p * double(n) + (1.0 - p) * double(lstar);
        ev2 = p * double(n) * double(n) + (1.0 - p) * double(lstar) * double(lstar);
      }
      esum += double(c) * ev;
      esum2 += double(c) * ev2;
    }
    double sl_sparsity = 1.0 - (esum / total) / double(N);
    double sl_s2 = 1.0 - (esum2 / total) / (double(N) * double(N));
    out["sl"] = json{{"alpha", a.alpha},
                     {"threshold", lstar},
                     {"sparsity", sl_sparsity},
                     {"s2", sl_s2}};
    std::string label = "sl(alpha=" + std::to_string(a.alpha).substr(0, 4) + ")";
    std::snprintf(buf, sizeof buf, "%-20s  %.6f        %.6f\n", label.c_str(), sl_sparsity,
                  sl_s2);
    table << buf;
  }

  std::cout << table.str();
  std::vector<std::string> outputs;
  if (!a.out_path.empty()) {
    std::ofstream f(a.out_path);
    if (!f) throw hstu::IoError("cannot write report: " + a.out_path);
    f << out.dump(2) << "\n";
    outputs.push_back(a.out_path);
  }
  json cfg_echo{{"histogram", a.histogram_path},
                {"max_len", N},
                {"alpha", *a.o_alpha ? json(a.alpha) : json(nullptr)}};
  std::string manifest = a.manifest_path.empty()
                             ? (a.out_path.empty() ? std::string("sl-report.manifest.json")
                                                   : a.out_path + ".manifest.json")
                             : a.manifest_path;
  write_manifest(manifest, "sl-report", cfg_echo, 0, timer.seconds(), {a.histogram_path},
                 outputs);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Sequential recommendation toolkit: synthetic data, training, evaluation,\n"
      "cached candidate scoring, throughput benchmarks, and sparsity reports.\n"
      "Flags override config-file values; every run writes a manifest JSON.\n"
      "HSTU_THREADS caps worker threads."};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  GenerateArgs gen;
  CLI::App* g = app.add_subcommand("generate", "Generate a synthetic interaction dataset (JSONL)");
  g->add_option("--config", gen.config_path, "Generator config JSON");
  g->add_option("--out", gen.out_path, "Output dataset path")->required();
  g->add_option("--manifest", gen.manifest_path, "Manifest path (default: <out>.manifest.json)");
  g->add_flag("--full-scale", gen.full_scale, "Start from the large reference configuration");
  gen.o_num_items = g->add_option("--num-items", gen.flags.num_items, "Vocabulary size");
  gen.o_num_categories = g->add_option("--num-categories", gen.flags.num_categories, "Categories");
  gen.o_num_records = g->add_option("--num-records", gen.flags.num_records, "Record count");
  gen.o_record_length = g->add_option("--record-length", gen.flags.record_length, "Items/record");
  gen.o_train_fraction =
      g->add_option("--train-fraction", gen.flags.train_fraction, "Train split fraction");
  gen.o_initial_available_fraction =
      g->add_option("--initial-available-fraction", gen.flags.initial_available_fraction,
                    "Initially available vocabulary fraction");
  gen.o_categories_per_record_max = g->add_option(
      "--categories-per-record-max", gen.flags.categories_per_record_max, "Max categories/record");
  gen.o_alpha_lo = g->add_option("--alpha-lo", gen.flags.alpha_lo, "Dirichlet alpha lower bound");
  gen.o_alpha_hi = g->add_option("--alpha-hi", gen.flags.alpha_hi, "Dirichlet alpha upper bound");
  gen.o_seed = g->add_option("--seed", gen.flags.seed, "Generator seed");

  TrainArgs tr;
  CLI::App* t = app.add_subcommand("train", "Train a model and write a checkpoint");
  t->add_option("--config", tr.config_path, "Config JSON with 'model' and/or 'train' objects");
  t->add_option("--data", tr.data_path, "Training data path")->required();
  t->add_option("--format", tr.format, "Data format: dp, events, or movielens")
      ->check(CLI::IsMember({"dp", "events", "movielens"}));
  t->add_option("--out", tr.out_path, "Checkpoint output path")->required();
  t->add_option("--timeline", tr.timeline_path, "Training timeline CSV path");
  t->add_option("--manifest", tr.manifest_path, "Manifest path (default: <out>.manifest.json)");
  tr.o_corpus_bound = t->add_option("--corpus-bound", tr.corpus_bound,
                                    "Scoring vocabulary bound (default: max item id + 1)");
  tr.model.attach(t);
  tr.o_epochs = t->add_option("--epochs", tr.epochs, "Training epochs (1 = streaming)");
  tr.o_shuffle = t->add_option("--shuffle", tr.shuffle, "Shuffle between epochs (0/1)");
  tr.o_batch_size = t->add_option("--batch-size", tr.batch_size, "Sequences per step");
  tr.o_lr = t->add_option("--lr", tr.lr, "Learning rate");
  tr.o_weight_decay = t->add_option("--weight-decay", tr.weight_decay, "Decoupled weight decay");
  tr.o_k_neg = t->add_option("--k-neg", tr.k_neg, "Sampled negatives per positive");
  tr.o_use_sl = t->add_option("--use-sl", tr.use_sl, "Stochastic length on (1) or off (0)");
  tr.o_sl_alpha = t->add_option("--sl-alpha", tr.sl_alpha, "Stochastic length alpha");
  tr.o_sl_max_content_len =
      t->add_option("--sl-max-content-len", tr.sl_max_content_len, "Stochastic length N");
  tr.o_sl_method = t->add_option("--sl-method", tr.sl_method,
                                 "Subsampling method: greedy, random_uniform, feature_weighted");
  tr.o_generative_emission =
      t->add_option("--generative-emission", tr.generative_emission, "Sample long sequences (0/1)");
  tr.o_emission_c = t->add_option("--emission-c", tr.emission_c, "Emission sampling constant");
  tr.o_seed = t->add_option("--seed", tr.seed, "Training seed");
  tr.o_log_every = t->add_option("--log-every", tr.log_every, "Timeline logging stride");

  EvalArgs ev;
  CLI::App* e = app.add_subcommand("eval", "Evaluate a checkpoint; prints metrics JSON");
  e->add_option("--model", ev.model_path, "Checkpoint path")->required();
  e->add_option("--data", ev.data_path, "Evaluation data path")->required();
  e->add_option("--format", ev.format, "Data format: dp, events, or movielens")
      ->check(CLI::IsMember({"dp", "events", "movielens"}));
  e->add_option("--ks", ev.ks, "Cutoffs for HR/NDCG, e.g. 1,10,50")->delimiter(',');
  e->add_flag("--all-targets", ev.all_targets, "Score every defined target, not just the last");
  e->add_option("--corpus-bound", ev.corpus_bound,
                "Scoring vocabulary bound (default: max item id + 1)");
  e->add_option("--out", ev.out_path, "Also write metrics JSON here");
  e->add_option("--manifest", ev.manifest_path, "Manifest path");

  InferArgs inf;
  CLI::App* i = app.add_subcommand("infer", "Score candidates against a user history");
  i->add_option("--model", inf.model_path, "Checkpoint path")->required();
  i->add_option("--events", inf.events_path, "User events JSONL")->required();
  i->add_option("--candidates", inf.candidates_path, "Candidate item ids, one per line")
      ->required();
  inf.o_user = i->add_option("--user", inf.user, "User id (required with multi-user files)");
  inf.o_request_ts =
      i->add_option("--request-ts", inf.request_ts, "Scoring timestamp (default: last ts + 1)");
  i->add_option("--bm", inf.b_m, "Microbatch size")->check(CLI::PositiveNumber);
  i->add_option("--cache", inf.cache, "Cache mode: off, request, or session")
      ->check(CLI::IsMember({"off", "request", "session"}));
  i->add_option("--out", inf.out_path, "Write score JSONL here instead of stdout");
  i->add_option("--manifest", inf.manifest_path, "Manifest path");

  BenchArgs be;
  CLI::App* b = app.add_subcommand("bench", "Measure candidate-scoring throughput");
  b->add_option("--model", be.model_path, "Checkpoint path (default: fresh model from flags)");
  b->add_option("--config", be.config_path, "Config JSON with a 'model' object");
  b->add_option("--n", be.n, "History length")->check(CLI::PositiveNumber);
  b->add_option("--candidates", be.candidates, "Candidates per request")
      ->check(CLI::PositiveNumber);
  b->add_option("--bm-grid", be.bm_grid, "Microbatch sizes, e.g. 1,4")->delimiter(',');
  b->add_option("--repetitions", be.repetitions, "Requests per configuration");
  b->add_option("--seed", be.seed, "History/model seed");
  b->add_option("--out", be.out_path, "Output CSV path")->required();
  b->add_option("--manifest", be.manifest_path, "Manifest path (default: <out>.manifest.json)");
  be.model.attach(b);

  SlReportArgs sl;
  CLI::App* s = app.add_subcommand(
      "sl-report", "Sparsity report for a length histogram (JSON lines of {length, count})");
  s->add_option("--histogram", sl.histogram_path, "Histogram path")->required();
  sl.o_max_len = s->add_option("--max-len", sl.max_len, "Reference maximum length");
  sl.o_alpha = s->add_option("--alpha", sl.alpha, "Also report the expected effect of "
                                                  "stochastic length at this alpha");
  s->add_option("--out", sl.out_path, "Also write the report JSON here");
  s->add_option("--manifest", sl.manifest_path, "Manifest path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    int rc = app.exit(err);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (g->parsed()) return run_generate(gen);
    if (t->parsed()) return run_train(tr);
    if (e->parsed()) return run_eval(ev);
    if (i->parsed()) return run_infer(inf);
    if (b->parsed()) return run_bench(be);
    if (s->parsed()) return run_sl_report(sl);
    std::cerr << "error: no command selected\n";
    return 2;
  } catch (const hstu::NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << "\n";
    return 3;
  } catch (const hstu::ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const hstu::IoError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "unexpected error: " << err.what() << "\n";
    return 1;
  }
}
