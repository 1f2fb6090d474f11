#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "hstu/trainer.hpp"

using namespace hstu;

namespace {

ModelConfig small_config(Task task, std::uint64_t seed = 7) {
  ModelConfig mc;
  mc.encoder.d = 16;
  mc.encoder.heads = 2;
  mc.encoder.d_qk = 8;
  mc.encoder.d_v = 8;
  mc.encoder.layers = 1;
  mc.encoder.max_seq_len = 64;
  mc.encoder.rab_pos = true;
  mc.encoder.rab_temp = true;
  mc.encoder.rab_pos_buckets = 8;
  mc.encoder.rab_temp_buckets = 8;
  mc.item_rows = 64;
  mc.ctx_rows = 16;
  mc.action_types = 4;
  mc.task = task;
  mc.seed = seed;
  return mc;
}

std::vector<TrainRecord> random_records(std::size_t count, std::size_t len, std::uint64_t vocab,
                                        std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TrainRecord> recs;
  for (std::size_t r = 0; r < count; ++r) {
    std::vector<std::uint64_t> items;
    for (std::size_t i = 0; i < len; ++i) items.push_back(rng.uniform_u64(vocab));
    recs.push_back(synthetic_record(items, vocab));
  }
  return recs;
}

std::filesystem::path temp_file(const std::string& stem) {
  return std::filesystem::temp_directory_path() / (stem + std::to_string(::getpid()) + ".bin");
}

}  // namespace

TEST_CASE("normalized entropy matches its closed forms") {
  CHECK(normalized_entropy({0.8, 0.4}, {1, 0}) ==
        Catch::Approx(0.5294468445267843).margin(1e-12));

  // predictions equal to the base rate give exactly 1
  std::vector<double> p(10, 0.3), y = {1, 0, 0, 1, 0, 0, 1, 0, 0, 0};
  CHECK(normalized_entropy(p, y) == Catch::Approx(1.0).margin(1e-12));

  // perfect predictions drive NE to zero
  std::vector<double> pp, yy;
  for (int i = 0; i < 100; ++i) {
    double label = i % 2;
    yy.push_back(label);
    pp.push_back(std::min(1.0 - 1e-9, std::max(1e-9, label)));
  }
  CHECK(normalized_entropy(pp, yy) < 1e-6);

  CHECK_THROWS_AS(normalized_entropy({0.5, 0.5}, {1, 1}), ConfigError);
  CHECK_THROWS_AS(normalized_entropy({0.5, 0.5}, {0, 0}), ConfigError);
  CHECK_THROWS_AS(normalized_entropy({1.0, 0.5}, {1, 0}), ConfigError);
}

TEST_CASE("corpus rank counts better scores with smaller-id tie break") {
  // target id 1 with the single best score
  CHECK(corpus_rank({0.1, 0.9, 0.5}, 1) == 1);
  // two better, none tied
  CHECK(corpus_rank({0.9, 0.1, 0.5}, 1) == 3);
  // tie: id 0 equal to target id 2 ranks ahead, id 3 equal ranks behind
  CHECK(corpus_rank({0.5, 0.1, 0.5, 0.5}, 2) == 2);
  CHECK_THROWS_AS(corpus_rank({0.5}, 3), ConfigError);

  auto m1 = hr_ndcg({0.1, 0.9, 0.5}, 1, {1, 10});
  CHECK(m1.hr[1] == 1.0);
  CHECK(m1.ndcg[1] == 1.0);

  std::vector<double> scores(20);
  for (std::size_t i = 0; i < 20; ++i) scores[i] = i < 10 ? 1.0 + double(i) : 0.0;
  auto m2 = hr_ndcg(scores, 15, {10});  // rank 11
  CHECK(m2.hr[10] == 0.0);
  CHECK(m2.ndcg[10] == 0.0);

  auto m3 = hr_ndcg({0.9, 0.8, 0.5, 0.1}, 2, {10});  // rank 3
  CHECK(m3.ndcg[10] == Catch::Approx(0.5).epsilon(1e-12));

  // monotone nondecreasing in K
  auto m4 = hr_ndcg(scores, 12, {1, 5, 10, 20});
  double prev_hr = 0, prev_ndcg = 0;
  for (std::size_t k : {1, 5, 10, 20}) {
    CHECK(m4.hr[k] >= prev_hr);
    CHECK(m4.ndcg[k] >= prev_ndcg);
    prev_hr = m4.hr[k];
    prev_ndcg = m4.ndcg[k];
  }
}

TEST_CASE("embedded tokens combine table rows as documented") {
  ModelConfig mc = small_config(Task::ranking);
  Model m(mc);
  const std::size_t d = mc.encoder.d;

  std::vector<Event> ctx_events = {[] {
    Event e;
    e.kind = EventKind::contextual;
    e.feature_id = 3;
    e.value_id = 9;
    e.ts = 5;
    return e;
  }()};
  TokenSequence seq = build_ranking_sequence({42}, {5}, {10}, ctx_events);  // bits 0 and 2
  REQUIRE(seq.size() == 3);

  Tape t(false);
  const Matrix& emb = t.val(embed_tokens(t, m, seq));
  REQUIRE(emb.rows() == 3);

  const Matrix& cw = m.ctx().weights();
  std::size_t crow = m.ctx().row_of(ctx_key(3, 9));
  for (std::size_t j = 0; j < d; ++j) CHECK(emb(0, j) == cw(crow, j));

  const Matrix& iw = m.items().weights();
  std::size_t irow = m.items().row_of(42);
  for (std::size_t j = 0; j < d; ++j) CHECK(emb(1, j) == iw(irow, j));

  const Matrix& ev = m.action_events();
  for (std::size_t j = 0; j < d; ++j) CHECK(emb(2, j) == ev(0, j) + ev(2, j));

  // retrieval combines item and action rows in one token
  ModelConfig rc = small_config(Task::retrieval);
  Model mr(rc);
  TokenSequence rseq = build_retrieval_sequence({42}, {5}, {10});
  Tape t2(false);
  const Matrix& remb = t2.val(embed_tokens(t2, mr, rseq));
  const Matrix& riw = mr.items().weights();
  const Matrix& rev = mr.action_events();
  std::size_t rrow = mr.items().row_of(42);
  for (std::size_t j = 0; j < d; ++j)
    CHECK(remb(0, j) == Catch::Approx(riw(rrow, j) + rev(0, j) + rev(2, j)).margin(1e-15));

  // action bits outside the configured set are rejected
  TokenSequence bad = build_ranking_sequence({1}, {1ull << 10}, {1});
  Tape t3(false);
  CHECK_THROWS_AS(embed_tokens(t3, m, bad), ConfigError);
}

TEST_CASE("full model passes grad_check on the retrieval loss") {
  ModelConfig mc;
  mc.encoder.d = 6;
  mc.encoder.heads = 2;
  mc.encoder.d_qk = 3;
  mc.encoder.d_v = 3;
  mc.encoder.layers = 1;
  mc.encoder.max_seq_len = 16;
  mc.encoder.rab_pos = true;
  mc.encoder.rab_temp = true;
  mc.encoder.rab_pos_buckets = 4;
  mc.encoder.rab_temp_buckets = 4;
  mc.item_rows = 32;
  mc.ctx_rows = 8;
  mc.action_types = 3;
  mc.task = Task::retrieval;
  mc.seed = 11;
  Model m(mc);

  Event ce;
  ce.kind = EventKind::contextual;
  ce.feature_id = 1;
  ce.value_id = 2;
  ce.ts = 1;
  TokenSequence seq = build_retrieval_sequence({3, 9, 4, 9}, {1, 3, 1, 1}, {0, 2, 4, 6}, 1, {ce});
  auto targets = defined_positions(seq);
  REQUIRE(targets.size() == 3);
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    cand.push_back(m.items().row_of(seq.targets[targets[i]]));
    cand.push_back(m.items().row_of(17 + i));
    cand.push_back(m.items().row_of(2 + i));
  }
  ParamSet ps = m.params();
  auto f = [&](Tape& t) { return build_training_loss(t, m, seq, targets, cand, 3); };
  auto report = grad_check(f, ps, 1e-5);
  INFO("worst param: " << report.worst_param);
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("full model passes grad_check on the weighted ranking loss") {
  ModelConfig mc;
  mc.encoder.d = 6;
  mc.encoder.heads = 1;
  mc.encoder.d_qk = 4;
  mc.encoder.d_v = 4;
  mc.encoder.layers = 1;
  mc.encoder.max_seq_len = 16;
  mc.item_rows = 16;
  mc.ctx_rows = 8;
  mc.action_types = 3;
  mc.task = Task::ranking;
  mc.seed = 13;
  Model m(mc);

  TokenSequence seq = build_ranking_sequence({3, 9, 5}, {1, 6, 2}, {0, 3, 7});
  auto targets = defined_positions(seq);
  REQUIRE(targets.size() == 3);
  std::vector<real> weights = {real(1), real(0.5), real(2)};
  ParamSet ps = m.params();
  auto f = [&](Tape& t) { return build_training_loss(t, m, seq, targets, {}, 0, weights); };
  auto report = grad_check(f, ps, 1e-5);
  INFO("worst param: " << report.worst_param);
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("streaming config rules are enforced") {
  TrainConfig tc;
  tc.epochs = 1;
  tc.shuffle = true;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc.shuffle = false;
  CHECK_NOTHROW(tc.validate());
  tc.epochs = 3;
  tc.shuffle = true;
  CHECK_NOTHROW(tc.validate());
  tc.epochs = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
}

TEST_CASE("zero learning rate leaves every parameter bitwise unchanged") {
  Model m(small_config(Task::retrieval));
  auto recs = random_records(6, 10, 40, 3);
  Matrix items_before = m.items().weights();
  Matrix w1_before = m.encoder().hstu_layers[0].w1;
  Matrix events_before = m.action_events();

  TrainConfig tc;
  tc.task = Task::retrieval;
  tc.k_neg = 4;
  tc.opt.lr = 0;
  tc.seed = 1;
  auto res = train_model(m, recs, tc);
  CHECK(res.examples_trained == 6);
  CHECK(max_abs_diff(items_before, m.items().weights()) == 0.0);
  CHECK(max_abs_diff(w1_before, m.encoder().hstu_layers[0].w1) == 0.0);
  CHECK(max_abs_diff(events_before, m.action_events()) == 0.0);
}

TEST_CASE("streaming visits every record exactly once") {
  Model m(small_config(Task::retrieval));
  auto recs = random_records(9, 8, 40, 4);
  TrainConfig tc;
  tc.task = Task::retrieval;
  tc.k_neg = 4;
  tc.seed = 2;
  auto res = train_model(m, recs, tc);
  CHECK(res.records_visited == 9);
  CHECK(res.examples_trained == 9);

  Model m2(small_config(Task::retrieval));
  tc.epochs = 3;
  tc.shuffle = true;
  auto res3 = train_model(m2, recs, tc);
  CHECK(res3.records_visited == 27);
}

TEST_CASE("same seed and config reproduce the identical run") {
  auto recs = random_records(8, 10, 40, 5);
  TrainConfig tc;
  tc.task = Task::retrieval;
  tc.k_neg = 8;
  tc.opt.lr = real(1e-3);
  tc.seed = 33;
  tc.log_every = 2;

  Model a(small_config(Task::retrieval));
  Model b(small_config(Task::retrieval));
  auto ra = train_model(a, recs, tc);
  auto rb = train_model(b, recs, tc);
  REQUIRE(ra.timeline.size() == rb.timeline.size());
  for (std::size_t i = 0; i < ra.timeline.size(); ++i) {
    CHECK(ra.timeline[i].step == rb.timeline[i].step);
    CHECK(ra.timeline[i].value == rb.timeline[i].value);
  }
  CHECK(ra.mean_loss == rb.mean_loss);
  CHECK(max_abs_diff(a.items().weights(), b.items().weights()) == 0.0);
  CHECK(max_abs_diff(a.encoder().hstu_layers[0].w1, b.encoder().hstu_layers[0].w1) == 0.0);
}

TEST_CASE("two hundred steps overfit a single retrieval sequence") {
  Model m(small_config(Task::retrieval, 21));
  std::vector<TrainRecord> recs = {synthetic_record({3, 7, 11, 15, 2, 9}, 20)};
  TrainConfig tc;
  tc.task = Task::retrieval;
  tc.epochs = 200;
  tc.k_neg = 8;
  tc.opt.lr = real(2e-2);
  tc.seed = 6;
  tc.log_every = 1;
  auto res = train_model(m, recs, tc);
  REQUIRE_FALSE(res.timeline.empty());
  INFO("final loss " << res.timeline.back().value);
  CHECK(res.timeline.back().value < 0.1);

  // the overfit target is now ranked first from its own history
  EvalConfig ec;
  ec.ks = {1, 10};
  auto rep = evaluate_model(m, recs, ec);
  CHECK(rep.hr_at_k[1] == 1.0);
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  Model m(small_config(Task::retrieval));
  m.encoder().hstu_layers[0].w1(0, 0) = std::numeric_limits<real>::quiet_NaN();
  auto recs = random_records(2, 6, 30, 8);
  TrainConfig tc;
  tc.task = Task::retrieval;
  tc.k_neg = 2;
  CHECK_THROWS_AS(train_model(m, recs, tc), NumericError);
}

TEST_CASE("inactive stochastic length does not perturb the run") {
  auto recs = random_records(5, 12, 40, 9);
  TrainConfig plain;
  plain.task = Task::retrieval;
  plain.k_neg = 4;
  plain.seed = 17;
  TrainConfig with_sl = plain;
  with_sl.use_sl = true;
  with_sl.sl.alpha = 2.0;  // threshold = N >= every length
  with_sl.sl.max_content_len = 64;

  Model a(small_config(Task::retrieval));
  Model b(small_config(Task::retrieval));
  train_model(a, recs, plain);
  train_model(b, recs, with_sl);
  CHECK(max_abs_diff(a.items().weights(), b.items().weights()) == 0.0);
}

TEST_CASE("active stochastic length trains on shortened sequences") {
  auto recs = random_records(12, 30, 40, 10);
  TrainConfig tc;
  tc.task = Task::retrieval;
  tc.k_neg = 4;
  tc.seed = 18;
  tc.use_sl = true;
  tc.sl.alpha = 1.1;
  tc.sl.max_content_len = 4;  // threshold floor(4^0.55) = 2
  tc.sl.method = SelectionMethod::feature_weighted;
  Model m(small_config(Task::retrieval));
  auto res = train_model(m, recs, tc);
  CHECK(res.records_visited == 12);
  CHECK(res.examples_trained == 12);
  CHECK(std::isfinite(res.mean_loss));
}

TEST_CASE("generative emission skips long sequences most of the time") {
  auto recs = random_records(60, 25, 40, 11);
  TrainConfig tc;
  tc.task = Task::retrieval;
  tc.k_neg = 2;
  tc.seed = 19;
  tc.generative_emission = true;  // emit odds = 1/25 per record
  Model m(small_config(Task::retrieval));
  auto res = train_model(m, recs, tc);
  CHECK(res.records_visited == 60);
  CHECK(res.examples_trained < 30);
}

TEST_CASE("untrained retrieval metrics sit at chance level") {
  Model m(small_config(Task::retrieval, 99));
  auto recs = random_records(100, 8, 50, 12);
  EvalConfig ec;
  ec.ks = {1, 10, 50};
  auto rep = evaluate_model(m, recs, ec);
  CHECK(rep.examples_seen == 100);
  CHECK(rep.hr_at_k[1] <= rep.hr_at_k[10]);
  CHECK(rep.hr_at_k[10] <= rep.hr_at_k[50]);
  CHECK(rep.hr_at_k[50] == 1.0);  // the corpus has exactly 50 ids
  for (std::size_t k : ec.ks) {
    CHECK(rep.ndcg_at_k[k] <= rep.hr_at_k[k]);
    CHECK(rep.hr_at_k[k] >= 0.0);
    CHECK(rep.hr_at_k[k] <= 1.0);
  }
  CHECK(rep.hr_at_k[10] > 0.02);
  CHECK(rep.hr_at_k[10] < 0.6);
  // near-uniform scores put log perplexity near ln(50)
  CHECK(rep.log_pplx > 3.0);
  CHECK(rep.log_pplx < 5.0);
}

TEST_CASE("ranking evaluation reports per-event normalized entropy") {
  Model m(small_config(Task::ranking, 101));
  Rng rng(14);
  std::vector<TrainRecord> recs;
  for (int r = 0; r < 30; ++r) {
    TrainRecord rec;
    for (int i = 0; i < 6; ++i) {
      rec.items.push_back(rng.uniform_u64(40));
      rec.actions.push_back(1 + rng.uniform_u64(8));  // bits 0..2 mixed
      rec.ts.push_back(i);
    }
    rec.corpus_bound = 40;
    recs.push_back(rec);
  }
  EvalConfig ec;
  ec.last_target_only = false;
  auto rep = evaluate_model(m, recs, ec);
  REQUIRE(rep.ne.count("event1") == 1);
  CHECK(rep.ne["event1"] > 0.5);
  CHECK(rep.ne["event1"] < 2.0);
  CHECK(rep.examples_seen == 30);
  CHECK(rep.log_pplx == 0.0);

  // training the ranking task runs end to end
  TrainConfig tc;
  tc.task = Task::ranking;
  tc.seed = 15;
  auto res = train_model(m, recs, tc);
  CHECK(res.examples_trained == 30);
  CHECK(std::isfinite(res.mean_loss));
}

TEST_CASE("timeline csv and report json serialize cleanly") {
  auto path = temp_file("hstu_timeline_");
  write_timeline_csv(path.string(),
                     {{10, "train_loss", 0.5}, {20, "train_loss", 0.25}});
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,metric,value");
  std::getline(in, line);
  CHECK(line == "10,train_loss,0.5");
  std::filesystem::remove(path);

  MetricReport rep;
  rep.hr_at_k[10] = 0.25;
  rep.ndcg_at_k[10] = 0.125;
  rep.ne["event0"] = 0.9;
  rep.log_pplx = 3.5;
  rep.examples_seen = 7;
  auto j = metric_report_json(rep);
  CHECK(j["hr_at_k"]["10"] == 0.25);
  CHECK(j["ne"]["event0"] == 0.9);
  CHECK(j["examples_seen"] == 7);
}

TEST_CASE("model config json round-trips and rejects unknown keys") {
  ModelConfig mc = small_config(Task::next_content, 42);
  mc.encoder.attention = AttnKind::softmax;
  mc.encoder.n_norm = NNormMode::valid_count;
  auto j = mc.to_json();
  ModelConfig back = ModelConfig::from_json(j);
  CHECK(back.to_json().dump() == j.dump());

  auto bad = j;
  bad["bogus_key"] = 1;
  CHECK_THROWS_AS(ModelConfig::from_json(bad), ConfigError);

  auto wrong = j;
  wrong["d"] = "not a number";
  CHECK_THROWS_AS(ModelConfig::from_json(wrong), ConfigError);

  auto badval = j;
  badval["arch"] = "perceptron";
  CHECK_THROWS_AS(ModelConfig::from_json(badval), ConfigError);
}

TEST_CASE("model checkpoints round-trip through disk") {
  Model m(small_config(Task::retrieval, 77));
  auto p1 = temp_file("hstu_model_a_");
  auto p2 = temp_file("hstu_model_b_");
  m.save(p1.string());
  Model back = Model::load(p1.string());
  CHECK(back.config().to_json().dump() == m.config().to_json().dump());
  // f32 storage: values agree to single precision
  CHECK(max_abs_diff(back.items().weights(), m.items().weights()) < 1e-6);
  CHECK(max_abs_diff(back.encoder().hstu_layers[0].w1, m.encoder().hstu_layers[0].w1) < 1e-6);
  // a second save of the loaded model is byte-identical (f32 fixed point)
  back.save(p2.string());
  Model again = Model::load(p2.string());
  CHECK(max_abs_diff(again.items().weights(), back.items().weights()) == 0.0);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);

  CHECK_THROWS_AS(Model::load("/nonexistent/model.bin"), IoError);
  auto p3 = temp_file("hstu_model_c_");
  {
    std::ofstream out(p3, std::ios::binary);
    out << "NOTMODEL and some trailing bytes";
  }
  CHECK_THROWS_AS(Model::load(p3.string()), IoError);
  std::filesystem::remove(p3);
}
