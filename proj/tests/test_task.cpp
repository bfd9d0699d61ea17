#include <gtest/gtest.h>

#include <set>

#include "test_support.hpp"
#include "tws/pipeline.hpp"
#include "tws/task.hpp"

using namespace tws;

namespace {

std::string data(const char* name) { return std::string(TWS_TEST_DATA) + "/" + name; }

// 32-bit FNV-1a, the published reference constants.
int bucket(const std::string& w, int base, int buckets) {
  std::uint32_t h = 0x811C9DC5u;
  for (unsigned char c : w) h = (h ^ c) * 0x01000193u;
  return base + static_cast<int>(h % static_cast<std::uint32_t>(buckets));
}

TsvSchema sentence_schema(int vocab, int seq, int buckets) {
  TsvSchema s;
  s.text_columns = {"sentence"};
  s.vocab = vocab;
  s.seq = seq;
  s.hash_buckets = buckets;
  return s;
}

}  // namespace

TEST(SynthTask, SameSeedSameData) {
  for (TaskKind k : {TaskKind::kParity, TaskKind::kMajority, TaskKind::kPattern}) {
    const Task a = synth_task(k, 3, {64, 16, 200, 50});
    const Task b = synth_task(k, 3, {64, 16, 200, 50});
    ASSERT_EQ(a.train.size(), 200u);
    for (std::size_t i = 0; i < a.train.size(); ++i) {
      EXPECT_EQ(a.train[i].tokens, b.train[i].tokens);
      EXPECT_EQ(a.train[i].label, b.train[i].label);
    }
    const Task c = synth_task(k, 4, {64, 16, 200, 50});
    bool differs = false;
    for (std::size_t i = 0; i < a.train.size(); ++i) differs |= a.train[i].tokens != c.train[i].tokens;
    EXPECT_TRUE(differs);
  }
}

TEST(SynthTask, LabelsBalancedAndValid) {
  for (TaskKind k : {TaskKind::kParity, TaskKind::kMajority, TaskKind::kPattern}) {
    const Task t = synth_task(k, 0, {64, 16, 1000, 300});
    double pos = 0;
    for (const auto& e : t.train) {
      ASSERT_GE(e.label, 0);
      ASSERT_LT(e.label, t.classes);
      pos += e.label;
      ASSERT_EQ(e.tokens.front(), kClsId);
      ASSERT_LE(e.tokens.size(), 16u);
      for (int tok : e.tokens) ASSERT_LT(tok, 64);
    }
    EXPECT_NEAR(pos / t.train.size(), 0.5, 0.01);
  }
}

TEST(SynthTask, LabelsFollowTheirRule) {
  const Task maj = synth_task(TaskKind::kMajority, 1, {64, 16, 300, 0});
  const int mid = kFirstContentId + (64 - kFirstContentId) / 2;
  for (const auto& e : maj.train) {
    int high = 0, low = 0;
    for (std::size_t i = 1; i < e.tokens.size(); ++i) (e.tokens[i] >= mid ? high : low)++;
    EXPECT_EQ(e.label, high > low ? 1 : 0);
  }
  const Task pat = synth_task(TaskKind::kPattern, 1, {64, 16, 300, 0});
  for (const auto& e : pat.train) {
    bool found = false;
    for (std::size_t i = 1; i + 1 < e.tokens.size(); ++i) {
      found |= e.tokens[i] == kFirstContentId && e.tokens[i + 1] == kFirstContentId + 1;
    }
    EXPECT_EQ(e.label, found ? 1 : 0);
  }
  const Task par = synth_task(TaskKind::kParity, 1, {64, 16, 300, 0});
  const int marked = (64 - kFirstContentId) / 8;
  for (const auto& e : par.train) {
    int n = 0;
    for (std::size_t i = 1; i < e.tokens.size(); ++i) n += e.tokens[i] < kFirstContentId + marked;
    EXPECT_EQ(e.label, n % 2);
  }
}

TEST(SynthTask, TrainAndDevDisjoint) {
  const Task t = synth_task(TaskKind::kPattern, 0, {64, 16, 4000, 1000});
  std::set<std::vector<int>> train;
  for (const auto& e : t.train) train.insert(e.tokens);
  for (const auto& e : t.dev) EXPECT_EQ(train.count(e.tokens), 0u);
}

TEST(SynthTask, RejectsBadOptions) {
  EXPECT_THROW(synth_task(TaskKind::kParity, 0, {8, 16, 10, 10}), std::invalid_argument);
  EXPECT_THROW(task_kind_from_string("sorting"), std::invalid_argument);
  EXPECT_EQ(task_kind_from_string(to_string(TaskKind::kMajority)), TaskKind::kMajority);
}

TEST(IngestTsv, TenRowGoldenTokens) {
  const Task t = ingest_tsv(data("ten_rows.tsv"), sentence_schema(13, 4, 4));
  // Training frequencies: cat 7, the 5, dog/ran/sat 2, then a. Ids from 3
  // up; the remaining words hash into ids 9..12.
  auto h = [](const char* w) { return bucket(w, 9, 4); };
  const std::vector<std::vector<int>> train{
      {1, 4, 3, 7}, {1, 4, 5, 7}, {1, 8, 3, 6}, {1, 4, 3, 6},
      {1, 4, h("bird"), h("flew")}, {1, 3, 3, 3}, {1, 5, h("and"), 3}, {1, 4, h("end")}};
  const std::vector<int> train_labels{1, 0, 1, 1, 0, 1, 0, 1};
  ASSERT_EQ(t.train.size(), train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    EXPECT_EQ(t.train[i].tokens, train[i]) << "row " << i;
    EXPECT_EQ(t.train[i].label, train_labels[i]);
  }
  ASSERT_EQ(t.dev.size(), 2u);
  EXPECT_EQ(t.dev[0].tokens, (std::vector<int>{1, 8, 5, 7}));
  EXPECT_EQ(t.dev[1].tokens, (std::vector<int>{1, h("zebra"), 7}));
  EXPECT_EQ(t.classes, 2);
  EXPECT_EQ(t.seq, 4);

  const Task again = ingest_tsv(data("ten_rows.tsv"), sentence_schema(13, 4, 4));
  for (std::size_t i = 0; i < t.train.size(); ++i) EXPECT_EQ(again.train[i].tokens, t.train[i].tokens);
}

TEST(IngestTsv, SentencePairsUseSeparator) {
  TsvSchema s = sentence_schema(64, 16, 8);
  s.text_columns = {"premise", "hypothesis"};
  s.dev_path = data("pair.tsv");
  const Task t = ingest_tsv(data("pair.tsv"), s);
  ASSERT_EQ(t.train.size(), 2u);
  EXPECT_EQ(t.dev.size(), 2u);
  const auto& toks = t.train[0].tokens;
  EXPECT_EQ(toks.size(), 1u + 2u + 1u + 3u);
  EXPECT_EQ(toks[3], kSepId);
  EXPECT_EQ(t.train[0].label, 1);  // contra < entail
}

TEST(IngestTsv, Errors) {
  EXPECT_THROW(ingest_tsv(data("empty.tsv"), sentence_schema(64, 8, 4)), DataError);
  EXPECT_THROW(ingest_tsv(data("missing.tsv"), sentence_schema(64, 8, 4)), DataError);
  try {
    ingest_tsv(data("malformed.tsv"), sentence_schema(64, 8, 4));
    FAIL() << "malformed row accepted";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
  TsvSchema bad = sentence_schema(64, 8, 4);
  bad.label_column = "gold";
  EXPECT_THROW(ingest_tsv(data("ten_rows.tsv"), bad), DataError);
}

TEST(IngestTsv, SingleRowAndConstantPredictor) {
  const Task t = ingest_tsv(data("one_row.tsv"), sentence_schema(64, 8, 4));
  ASSERT_EQ(t.train.size(), 1u);
  EXPECT_TRUE(t.dev.empty());
  EXPECT_EQ(t.classes, 1);
  // With a single class every model is a constant predictor and is always right.
  ModelSpec s = tws::testing::tiny_spec();
  s.vocab = 64;
  s.classes = 1;
  const Model m = build_model(s, uniform_precision(s, QuantScheme::full()), {}, 0);
  EXPECT_EQ(accuracy(m, t.train, t.seq), 1.0);
}

TEST(Batching, PadsAndCoversEveryExample) {
  const Task t = synth_task(TaskKind::kPattern, 2, {64, 16, 70, 30});
  const Batch b = make_batch(std::span(t.train).first(3), 16);
  EXPECT_EQ(b.size, 3u);
  EXPECT_EQ(b.tokens.size(), 48u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(b.lengths[i], t.train[i].tokens.size());
    for (std::size_t p = b.lengths[i]; p < 16; ++p) EXPECT_EQ(b.tokens[i * 16 + p], kPadId);
  }
  std::mt19937_64 rng(0);
  std::size_t seen = 0;
  for (const Batch& e : epoch_batches(t, 32, rng)) seen += e.size;
  EXPECT_EQ(seen, 70u);
  EXPECT_EQ(eval_batches(t.dev, 16, 64).size(), 1u);
}
