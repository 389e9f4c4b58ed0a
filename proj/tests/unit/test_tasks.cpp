#include <gtest/gtest.h>

#include <set>

#include "json.hpp"
#include "mechshift/errors.hpp"
#include "mechshift/tasks.hpp"

using namespace mechshift;

TEST(Vocabulary, SpecialIdsAndNumbers) {
  const Vocabulary& v = Vocabulary::standard();
  EXPECT_EQ(v.token(v.pad_id()), "<pad>");
  EXPECT_EQ(v.token(v.mask_id()), "<mask>");
  EXPECT_EQ(v.token(v.bos_id()), "<bos>");
  for (int n = Vocabulary::kMinNumber; n <= Vocabulary::kMaxNumber; ++n) {
    EXPECT_TRUE(v.is_number(v.number_id(n)));
    EXPECT_EQ(v.number_value(v.number_id(n)), n);
  }
  EXPECT_EQ(v.names().size(), 16u);
  EXPECT_FALSE(v.is_number(v.id("When")));
  EXPECT_THROW(v.id("nonexistent"), Error);
  for (int id : v.content_ids()) {
    EXPECT_NE(id, v.pad_id());
    EXPECT_NE(id, v.mask_id());
  }
}

TEST(Ioi, PairStructure) {
  const Vocabulary& v = Vocabulary::standard();
  for (const PromptPair& p : gen_ioi(50, 3)) {
    ASSERT_EQ(p.clean.size(), 16u);
    EXPECT_EQ(p.prompt_len, 15);
    EXPECT_EQ(p.gen_len, 1);
    EXPECT_EQ(p.steps, 1);
    const int a = p.clean[2], b = p.clean[4], s = p.clean[10];
    EXPECT_TRUE(s == a || s == b);
    // Answer is the name that is not repeated as the subject.
    EXPECT_EQ(p.answer[0], s == a ? b : a);
    EXPECT_EQ(p.distractor[0], s);
    EXPECT_EQ(p.clean.back(), p.answer[0]);
    // The corruption swaps the repeated name, which flips the answer.
    EXPECT_EQ(p.corrupt[10], p.answer[0]);
    EXPECT_EQ(p.corrupt.back(), s);
    for (std::size_t i = 0; i < p.clean.size(); ++i) {
      if (i != 10 && i != 15) {
        EXPECT_EQ(p.clean[i], p.corrupt[i]);
      }
    }
    EXPECT_EQ(v.token(p.clean[0]), "<bos>");
  }
}

TEST(Ioi, BothOrdersAppear) {
  int first = 0, second = 0;
  for (const PromptPair& p : gen_ioi(200, 4)) (p.answer[0] == p.clean[2] ? first : second)++;
  EXPECT_GT(first, 50);
  EXPECT_GT(second, 50);
}

TEST(Countdown, PairStructureAndValidity) {
  const Vocabulary& v = Vocabulary::standard();
  for (const PromptPair& p : gen_countdown(100, 5)) {
    ASSERT_EQ(p.clean.size(), 12u);
    EXPECT_EQ(p.prompt_len, 7);
    EXPECT_EQ(p.gen_len, 5);
    EXPECT_EQ(p.steps, 5);
    const auto prompt = p.clean_prompt();
    EXPECT_TRUE(countdown_valid(prompt, p.answer));
    EXPECT_TRUE(countdown_valid(p.corrupt_prompt(), p.corrupt_answer));
    EXPECT_FALSE(countdown_valid(prompt, p.corrupt_answer));
    EXPECT_NE(p.clean[5], p.corrupt[5]);
    EXPECT_FALSE(p.clean[2] == v.number_id(2) && p.clean[3] == v.number_id(2));
  }
}

TEST(Countdown, ValidityChecker) {
  const Vocabulary& v = Vocabulary::standard();
  auto n = [&](int x) { return v.number_id(x); };
  const std::vector<int> prompt{v.bos_id(), v.id("nums"), n(3), n(4), v.id("target"), n(12), v.id(":")};
  EXPECT_TRUE(countdown_valid(prompt, std::vector<int>{n(3), v.id("*"), n(4), v.id("="), n(12)}));
  EXPECT_FALSE(countdown_valid(prompt, std::vector<int>{n(3), v.id("+"), n(4), v.id("="), n(12)}));
  EXPECT_FALSE(countdown_valid(prompt, std::vector<int>{n(4), v.id("*"), n(3), v.id("="), n(12)}));
  EXPECT_FALSE(countdown_valid(prompt, std::vector<int>{n(3), v.id("*"), n(4), v.id("=")}));
}

TEST(Generators, DeterministicAndDistinct) {
  for (TaskId t : {TaskId::kIoi, TaskId::kCountdown}) {
    const auto a = gen_task(t, 40, 7), b = gen_task(t, 40, 7), c = gen_task(t, 40, 8);
    std::set<std::vector<int>> seen;
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].clean, b[i].clean);
      EXPECT_EQ(a[i].corrupt, b[i].corrupt);
      seen.insert(a[i].clean);
    }
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) differs |= a[i].clean != c[i].clean;
    EXPECT_TRUE(differs);
    if (t == TaskId::kIoi) {
      EXPECT_EQ(seen.size(), a.size());
    }
  }
}

TEST(Generators, CapacityAndSplits) {
  for (TaskId t : {TaskId::kIoi, TaskId::kCountdown}) {
    const int all = task_capacity(t, Split::kAll);
    const int train = task_capacity(t, Split::kTrain);
    const int held = task_capacity(t, Split::kHeldout);
    EXPECT_EQ(train + held, all);
    EXPECT_GT(held, 0);
    EXPECT_THROW(gen_task(t, all + 1, 1), CapacityError);
    EXPECT_THROW(gen_task(t, 0, 1), ParameterError);
    std::set<std::vector<int>> train_set;
    for (const auto& p : gen_task(t, train, 1, Split::kTrain)) train_set.insert(p.clean_prompt());
    for (const auto& p : gen_task(t, held, 1, Split::kHeldout)) EXPECT_FALSE(train_set.contains(p.clean_prompt()));
  }
  EXPECT_EQ(task_capacity(TaskId::kCountdown, Split::kAll), 480);
  EXPECT_EQ(task_capacity(TaskId::kIoi, Split::kAll), 30720);
}

TEST(Generators, CorpusIsTrainSplitOnly) {
  std::set<std::vector<int>> held;
  for (const auto& p : gen_task(TaskId::kCountdown, task_capacity(TaskId::kCountdown, Split::kHeldout), 1,
                                Split::kHeldout)) {
    held.insert(p.clean);
  }
  const auto corpus = task_corpus(TaskId::kCountdown, Split::kTrain);
  for (const auto& s : corpus) {
    EXPECT_EQ(s.size(), 12u);
    EXPECT_FALSE(held.contains(s));
  }
}

TEST(Metric, AnalysisTokensPerMode) {
  const PromptPair p = gen_countdown(1, 9)[0];
  const auto ar = analysis_tokens(p, RunMode::kAr, false);
  EXPECT_EQ(ar.size(), p.clean.size() - 1);
  const auto mdm = analysis_tokens(p, RunMode::kMdm, true);
  ASSERT_EQ(mdm.size(), p.clean.size());
  for (int pos : p.answer_positions) EXPECT_EQ(mdm[static_cast<std::size_t>(pos)], Vocabulary::standard().mask_id());
  EXPECT_EQ(readout_row(RunMode::kAr, 15), 14);
  EXPECT_EQ(readout_row(RunMode::kMdm, 15), 15);
}

TEST(Metric, LogitDiffAlgebra) {
  const PromptPair p = gen_ioi(1, 2)[0];
  const int V = Vocabulary::standard().size();
  Tensor logits({15, V});
  logits.at(14, p.answer[0]) = 3.0f;
  logits.at(14, p.distractor[0]) = 1.25f;
  EXPECT_FLOAT_EQ(metric_logit_diff(logits, p, RunMode::kAr), 1.75f);
  // Symmetric under swapping the two logits.
  std::swap(logits.at(14, p.answer[0]), logits.at(14, p.distractor[0]));
  EXPECT_FLOAT_EQ(metric_logit_diff(logits, p, RunMode::kAr), -1.75f);
  // Shifting a whole row leaves it unchanged.
  for (float& x : logits.row(14)) x += 10.0f;
  EXPECT_FLOAT_EQ(metric_logit_diff(logits, p, RunMode::kAr), -1.75f);
  EXPECT_THROW(metric_logit_diff(Tensor({3, V}), p, RunMode::kAr), UsageError);
}

TEST(Metric, MarginAlgebraAndVarAgree) {
  const PromptPair p = gen_countdown(1, 3)[0];
  const int V = Vocabulary::standard().size();
  Tensor logits({12, V});
  float expected = 0.0f;
  for (std::size_t i = 0; i < p.answer_positions.size(); ++i) {
    const int r = p.answer_positions[i];
    logits.at(r, p.answer[i]) = 2.0f + static_cast<float>(i);
    logits.at(r, Vocabulary::standard().bos_id()) = 0.5f;
    logits.at(r, Vocabulary::standard().mask_id()) = 100.0f;  // never a competitor
    expected += 1.5f + static_cast<float>(i);
  }
  expected /= 5.0f;
  const MetricSpec spec = metric_spec(p, RunMode::kMdm);
  EXPECT_NEAR(metric_value(logits, spec), expected, 1e-6);
  Tape tape;
  EXPECT_NEAR(metric_var(tape.input(logits), spec).value()[0], expected, 1e-6);
  const int one[] = {p.answer_positions[2]};
  EXPECT_NEAR(metric_value(logits, metric_spec(p, RunMode::kMdm, one)), 3.5f, 1e-6);
  const int bad[] = {0};
  EXPECT_THROW(metric_spec(p, RunMode::kMdm, bad), UsageError);
}

TEST(Dump, JsonLinesParse) {
  const auto pairs = gen_ioi(3, 1);
  const std::string text = dump_pairs(pairs);
  std::size_t lines = 0, start = 0;
  while (start < text.size()) {
    const auto end = text.find('\n', start);
    const auto j = nlohmann::json::parse(text.substr(start, end - start));
    EXPECT_EQ(j["clean"].get<std::vector<int>>(), pairs[lines].clean);
    ++lines;
    start = end + 1;
  }
  EXPECT_EQ(lines, 3u);
}

TEST(Enums, ParseRoundTrip) {
  EXPECT_EQ(parse_task("countdown"), TaskId::kCountdown);
  EXPECT_EQ(parse_run_mode(to_string(RunMode::kMdm)), RunMode::kMdm);
  EXPECT_THROW(parse_task("sudoku"), ConfigError);
}
