#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "hstu/sequence.hpp"

using namespace hstu;

namespace {

Event engage(std::uint64_t item, std::uint64_t actions, std::int64_t ts, std::uint64_t user = 1) {
  Event e;
  e.user_id = user;
  e.item_id = item;
  e.actions = actions;
  e.ts = ts;
  return e;
}

Event ctx(std::uint64_t feature, std::uint64_t value, std::int64_t ts, std::uint64_t user = 1) {
  Event e;
  e.user_id = user;
  e.kind = EventKind::contextual;
  e.feature_id = feature;
  e.value_id = value;
  e.ts = ts;
  return e;
}

std::filesystem::path temp_file(const std::string& stem) {
  return std::filesystem::temp_directory_path() / (stem + std::to_string(::getpid()) + ".txt");
}

}  // namespace

TEST_CASE("consecutive equal contextual values collapse to the earliest") {
  std::vector<Event> events = {ctx(7, 100, 1), ctx(7, 100, 5), ctx(7, 200, 9)};
  auto merged = sequentialize(events);
  REQUIRE(merged.size() == 2);
  CHECK(merged[0].ts == 1);
  CHECK(merged[0].value_id == 100);
  CHECK(merged[1].ts == 9);
  CHECK(merged[1].value_id == 200);

  // value returning after a change starts a new run and is kept
  auto back = sequentialize({ctx(7, 100, 1), ctx(7, 200, 2), ctx(7, 100, 3)});
  CHECK(back.size() == 3);

  // independent features do not interfere
  auto two = sequentialize({ctx(1, 5, 1), ctx(2, 5, 2), ctx(1, 5, 3)});
  CHECK(two.size() == 2);
}

TEST_CASE("merge is by timestamp with contextual winning ties") {
  auto merged = sequentialize({engage(10, 1, 2), engage(11, 1, 4), ctx(7, 1, 3)});
  REQUIRE(merged.size() == 3);
  CHECK(merged[0].ts == 2);
  CHECK(merged[1].ts == 3);
  CHECK(merged[2].ts == 4);
  CHECK(merged[1].kind == EventKind::contextual);

  auto tie = sequentialize({engage(10, 1, 5), ctx(7, 1, 5)});
  CHECK(tie[0].kind == EventKind::contextual);
  CHECK(tie[1].kind == EventKind::engagement);

  // no contextual events: pass-through
  auto plain = sequentialize({engage(1, 1, 1), engage(2, 1, 2)});
  CHECK(plain.size() == 2);
  CHECK(plain[0].item_id == 1);
}

TEST_CASE("sequentialize is idempotent") {
  std::vector<Event> events = {ctx(7, 100, 1), engage(10, 3, 2), ctx(7, 100, 3),
                               ctx(9, 4, 3),   engage(11, 1, 3), ctx(7, 200, 8)};
  auto once = sequentialize(events);
  auto twice = sequentialize(once);
  REQUIRE(once.size() == twice.size());
  for (std::size_t i = 0; i < once.size(); ++i) {
    CHECK(once[i].ts == twice[i].ts);
    CHECK(once[i].kind == twice[i].kind);
    CHECK(once[i].item_id == twice[i].item_id);
    CHECK(once[i].value_id == twice[i].value_id);
  }
}

TEST_CASE("ranking layout interleaves items and actions with action targets") {
  auto seq = build_ranking_sequence({10, 11}, {3, 5}, {100, 200});
  REQUIRE(seq.size() == 4);
  CHECK(seq.kinds == std::vector<TokenKind>{TokenKind::content, TokenKind::action,
                                            TokenKind::content, TokenKind::action});
  CHECK(seq.items[0] == 10);
  CHECK(seq.actions[1] == 3);
  CHECK(seq.items[2] == 11);
  CHECK(seq.actions[3] == 5);
  CHECK(seq.target_defined == std::vector<std::uint8_t>{1, 0, 1, 0});
  CHECK(seq.targets[0] == 3);
  CHECK(seq.targets[2] == 5);
  // both tokens of pair i carry t_i
  CHECK(seq.timestamps == std::vector<std::int64_t>{100, 100, 200, 200});

  CHECK(build_ranking_sequence({}, {}, {}).size() == 0);
  CHECK_THROWS_AS(build_ranking_sequence({1}, {1, 2}, {5}), ConfigError);
}

TEST_CASE("ranking merges contextual tokens by timestamp with undefined targets") {
  auto seq = build_ranking_sequence({10}, {3}, {50}, {ctx(7, 9, 10)});
  REQUIRE(seq.size() == 3);
  CHECK(seq.kinds[0] == TokenKind::contextual);
  CHECK(seq.kinds[1] == TokenKind::content);
  CHECK(seq.kinds[2] == TokenKind::action);
  CHECK(seq.target_defined == std::vector<std::uint8_t>{0, 1, 0});
  CHECK(seq.targets[1] == 3);

  // tie goes to the contextual token; trailing contextual tokens are kept
  auto tied = build_ranking_sequence({10}, {3}, {50}, {ctx(7, 9, 50), ctx(8, 2, 60)});
  CHECK(tied.kinds[0] == TokenKind::contextual);
  CHECK(tied.kinds[3] == TokenKind::contextual);
  CHECK(tied.target_defined[3] == 0);
}

TEST_CASE("de-interleaving a ranking sequence recovers the inputs") {
  std::vector<std::uint64_t> items = {5, 9, 2, 2};
  std::vector<std::uint64_t> actions = {1, 6, 1, 2};
  std::vector<std::int64_t> ts = {10, 20, 30, 40};
  auto seq = build_ranking_sequence(items, actions, ts, {ctx(1, 1, 15), ctx(1, 2, 35)});
  std::vector<std::uint64_t> ri, ra;
  std::vector<std::int64_t> rt;
  for (std::size_t p = 0; p < seq.size(); ++p) {
    if (seq.kinds[p] == TokenKind::content) {
      ri.push_back(seq.items[p]);
      rt.push_back(seq.timestamps[p]);
    } else if (seq.kinds[p] == TokenKind::action) {
      ra.push_back(seq.actions[p]);
    }
  }
  CHECK(ri == items);
  CHECK(ra == actions);
  CHECK(rt == ts);
  // non-contextual positions strictly alternate content, action
  TokenKind expect = TokenKind::content;
  for (std::size_t p = 0; p < seq.size(); ++p) {
    if (seq.kinds[p] == TokenKind::contextual) continue;
    CHECK(seq.kinds[p] == expect);
    expect = expect == TokenKind::content ? TokenKind::action : TokenKind::content;
  }
}

TEST_CASE("retrieval targets point at the next positive item") {
  auto allpos = build_retrieval_sequence({10, 11, 12}, {1, 1, 1}, {1, 2, 3});
  REQUIRE(allpos.size() == 3);
  CHECK(allpos.target_defined == std::vector<std::uint8_t>{1, 1, 0});
  CHECK(allpos.targets[0] == 11);
  CHECK(allpos.targets[1] == 12);
  CHECK(allpos.actions[0] == 1);  // combined token keeps its action bits

  auto allneg = build_retrieval_sequence({10, 11, 12}, {2, 2, 2}, {1, 2, 3});
  CHECK(allneg.defined_target_count() == 0);

  auto mixed = build_retrieval_sequence({10, 11, 12}, {1, 2, 1}, {1, 2, 3});
  CHECK(mixed.target_defined == std::vector<std::uint8_t>{0, 1, 0});
  CHECK(mixed.targets[1] == 12);

  // positive set is configurable
  auto bit1 = build_retrieval_sequence({10, 11, 12}, {1, 2, 1}, {1, 2, 3}, 2);
  CHECK(bit1.target_defined == std::vector<std::uint8_t>{1, 0, 0});
  CHECK(bit1.targets[0] == 11);

  // the final position never carries a target, even with trailing contextual
  auto with_ctx = build_retrieval_sequence({10, 11}, {1, 1}, {1, 5}, 1, {ctx(1, 1, 3)});
  REQUIRE(with_ctx.size() == 3);
  CHECK(with_ctx.kinds[1] == TokenKind::contextual);
  CHECK(with_ctx.target_defined == std::vector<std::uint8_t>{1, 0, 0});
  CHECK(with_ctx.targets[0] == 11);
}

TEST_CASE("next-content supervision sits at action positions") {
  auto seq = build_next_content_sequence({10, 11}, {3, 5}, {1, 2});
  REQUIRE(seq.size() == 4);
  CHECK(seq.target_defined == std::vector<std::uint8_t>{0, 1, 0, 0});
  CHECK(seq.targets[1] == 11);

  auto one = build_next_content_sequence({10}, {3}, {1});
  CHECK(one.defined_target_count() == 0);

  // alignment: the target at the action position of pair i is item i+1
  std::vector<std::uint64_t> items = {4, 5, 6, 7};
  auto seq4 = build_next_content_sequence(items, {1, 1, 1, 1}, {1, 2, 3, 4});
  std::size_t ordinal = 0;
  for (std::size_t p = 0; p < seq4.size(); ++p) {
    if (seq4.kinds[p] != TokenKind::action) continue;
    if (ordinal + 1 < items.size()) {
      CHECK(seq4.target_defined[p] == 1);
      CHECK(seq4.targets[p] == items[ordinal + 1]);
    } else {
      CHECK(seq4.target_defined[p] == 0);
    }
    ++ordinal;
  }
}

TEST_CASE("make_task_sequence wires merged events into each task layout") {
  std::vector<Event> merged =
      sequentialize({engage(10, 1, 1), ctx(7, 5, 2), engage(11, 2, 3), engage(12, 1, 4)});
  auto rank = make_task_sequence(merged, Task::ranking);
  CHECK(rank.size() == 7);  // 3 pairs + 1 contextual
  auto retr = make_task_sequence(merged, Task::retrieval);
  CHECK(retr.size() == 4);  // 3 combined + 1 contextual
  CHECK(retr.defined_target_count() == 1);  // only item 12 is a positive successor
  auto next = make_task_sequence(merged, Task::next_content);
  CHECK(next.size() == 7);
  CHECK(next.defined_target_count() == 2);
}

TEST_CASE("emission sampler fires with probability min(1, c/n)") {
  Rng rng(42);
  for (int i = 0; i < 20; ++i) CHECK(generative_emission_sampler(1, rng));
  for (int i = 0; i < 20; ++i) CHECK_FALSE(generative_emission_sampler(8, rng, 0.0));
  CHECK_THROWS_AS(generative_emission_sampler(0, rng), ConfigError);

  const int trials = 100000;
  int emitted = 0;
  for (int i = 0; i < trials; ++i) emitted += generative_emission_sampler(4, rng) ? 1 : 0;
  double p = 0.25;
  double sigma = std::sqrt(p * (1 - p) * trials);
  CHECK(std::abs(emitted - p * trials) < 3 * sigma);
}

TEST_CASE("training cost formulas match their closed forms") {
  CHECK(count_training_flops({8}, TrainingMode::impression, 2, 2) == 1280.0);
  CHECK(count_training_flops({8}, TrainingMode::generative, 2, 2) == 160.0);

  // impression/generative ratio is exactly n for one user when d_ff = d
  for (std::size_t n : {std::size_t(2), std::size_t(8), std::size_t(64)}) {
    double imp = count_training_flops({n}, TrainingMode::impression, 16, 16);
    double gen = count_training_flops({n}, TrainingMode::generative, 16, 16);
    CHECK(imp / gen == double(n));
  }

  // two users accumulate independently: n(n^2 d + n d_ff d) per user
  double d = 3, dff = 5;
  double expect_imp = 2 * (4 * d + 2 * dff * d) + 4 * (16 * d + 4 * dff * d);
  CHECK(count_training_flops({2, 4}, TrainingMode::impression, d, dff) == expect_imp);
  double expect_gen = (4 * d + 2 * d * d) + (16 * d + 4 * d * d);
  CHECK(count_training_flops({2, 4}, TrainingMode::generative, d, d) ==
        Catch::Approx(expect_gen).epsilon(1e-15));
}

TEST_CASE("jsonl loader parses events, comments, and contextual markers") {
  auto path = temp_file("hstu_events_");
  {
    std::ofstream out(path);
    out << "# generated fixture\n";
    out << R"({"user_id":1,"item_id":10,"actions":3,"ts":100})" << "\n";
    out << "\n";
    out << R"({"user_id":1,"ts":150,"ctx":{"feature_id":7,"value_id":2}})" << "\n";
    out << R"({"user_id":2,"item_id":11,"ts":90})" << "\n";
  }
  auto events = load_events_jsonl(path.string());
  REQUIRE(events.size() == 3);
  CHECK(events[0].item_id == 10);
  CHECK(events[0].actions == 3);
  CHECK(events[1].kind == EventKind::contextual);
  CHECK(events[1].feature_id == 7);
  CHECK(events[2].actions == 1);  // default action bit
  std::filesystem::remove(path);

  {
    std::ofstream out(path);
    out << "{not json\n";
  }
  CHECK_THROWS_AS(load_events_jsonl(path.string()), IoError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_events_jsonl("/nonexistent/events.jsonl"), IoError);
}

TEST_CASE("ratings loader accepts :: and comma separated rows") {
  auto path = temp_file("hstu_ratings_");
  {
    std::ofstream out(path);
    out << "1::1193::5::978300760\n";
    out << "2,661,3,978302109\n";
  }
  auto events = load_movielens(path.string());
  REQUIRE(events.size() == 2);
  CHECK(events[0].user_id == 1);
  CHECK(events[0].item_id == 1193);
  CHECK(events[0].ts == 978300760);
  CHECK(events[0].actions == 1);
  CHECK(events[1].user_id == 2);
  std::filesystem::remove(path);

  {
    std::ofstream out(path);
    out << "1::1193\n";
  }
  CHECK_THROWS_AS(load_movielens(path.string()), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("user histories are grouped and time sorted") {
  std::vector<Event> events = {engage(1, 1, 50, 9), engage(2, 1, 10, 9), engage(3, 1, 30, 4)};
  auto users = user_histories(events);
  REQUIRE(users.size() == 2);
  REQUIRE(users.at(9).size() == 2);
  CHECK(users.at(9)[0].item_id == 2);
  CHECK(users.at(9)[1].item_id == 1);
  CHECK(users.at(4)[0].item_id == 3);
}
