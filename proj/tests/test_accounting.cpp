#include <gtest/gtest.h>

#include "test_support.hpp"
#include "tws/accounting.hpp"
#include "tws/pipeline.hpp"
#include "tws/splitting.hpp"

using namespace tws;
using tws::testing::tiny_spec;

namespace {

CostInput config(const ModelSpec& spec, const PrecisionMap& p, int act_bits, bool split_all) {
  CostInput in;
  in.spec = spec;
  in.precision = p;
  in.act_bits = act_bits;
  if (split_all) {
    for (const auto& k : splittable_matrices(spec)) in.split.insert(k);
  }
  return in;
}

CostInput bert_fp() {
  const ModelSpec s = ModelSpec::bert_base();
  return config(s, uniform_precision(s, QuantScheme::full()), 32, false);
}

CostInput bert_bwn(int act_bits) {
  const ModelSpec s = ModelSpec::bert_base();
  return config(s, binary_precision(s), act_bits, false);
}

CostInput bert_tws(int act_bits) {
  ModelSpec s = ModelSpec::bert_base();
  s.width = 0.5;
  return config(s, binary_precision(s), act_bits, true);
}

}  // namespace

TEST(Accounting, ScalarMultiplyRule) {
  EXPECT_EQ(multiply_flops(1, 8), 0.125);
  EXPECT_EQ(multiply_flops(32, 32), 1.0);
  EXPECT_EQ(multiply_flops(1, 4), 0.0625);
  EXPECT_EQ(matmul_flops(128, 768, 768, 32, 32), 2.0 * 128 * 768 * 768);
  EXPECT_EQ(matmul_flops(1, 1, 1, 1, 8), 0.25);
}

TEST(Accounting, FullPrecisionBytesAreFourPerParameter) {
  // Parameter count of BERT-base with a 2-way classifier, counted by hand.
  const double h = 768, f = 3072, layers = 12;
  const double emb = (30522 + 512 + 2) * h + 2 * h;
  const double layer = 4 * h * h + 4 * h + 2 * h * f + f + h + 4 * h;
  const double params = emb + layers * layer + h * h + h + 2 * h + 2;
  EXPECT_EQ(model_size_bytes(bert_fp()), 4.0 * params);
}

TEST(Accounting, BertBaseSizesMatchReportedTable) {
  const double fp = model_size_bytes(bert_fp()) / kMiB;
  const double bwn = model_size_bytes(bert_bwn(8)) / kMiB;
  const double tws = model_size_bytes(bert_tws(8)) / kMiB;
  EXPECT_NEAR(fp, 417.6, 0.03 * 417.6);
  EXPECT_NEAR(bwn, 13.4, 0.03 * 13.4);
  EXPECT_NEAR(tws, 16.5, 0.03 * 16.5);
  EXPECT_NEAR(fp / tws, 24.6, 0.05 * 24.6);
}

TEST(Accounting, BertBaseFlopsMatchReportedTable) {
  EXPECT_NEAR(model_flops(bert_fp()) / 1e9, 22.5, 0.15 * 22.5);
  EXPECT_NEAR(model_flops(bert_bwn(8)) / 1e9, 3.1, 0.15 * 3.1);
  EXPECT_NEAR(model_flops(bert_bwn(4)) / 1e9, 1.5, 0.15 * 1.5);
}

TEST(Accounting, SplitAndDirectBinaryFlopsAreEqual) {
  for (int a : {8, 4}) EXPECT_EQ(model_flops(bert_tws(a)), model_flops(bert_bwn(a)));
  const ModelSpec s = tiny_spec();
  ModelSpec half = tiny_spec(0.5);
  EXPECT_EQ(model_flops(config(half, binary_precision(half), 8, true), 10),
            model_flops(config(s, binary_precision(s), 8, false), 10));
}

TEST(Accounting, SplittingDoublesQuantizedWeightBytes) {
  ModelSpec half = ModelSpec::bert_base();
  half.width = 0.5;
  for (const auto& k : splittable_matrices(half)) {
    const QuantScheme b = k.slot == Slot::kEmbedding ? QuantScheme::binary(Granularity::kPerRow)
                                                     : QuantScheme::binary();
    const double weights = matrix_bytes(half, k, b, false, false);
    EXPECT_EQ(matrix_bytes(half, k, b, true, false), 2.0 * weights);
    const double scales = k.slot == Slot::kEmbedding ? half.embedding_rows() : 1.0;
    EXPECT_EQ(matrix_bytes(half, k, b, true) - matrix_bytes(half, k, b, false), weights + 4.0 * scales);
  }
}

TEST(Accounting, MatrixBytesFollowBitWidth) {
  const ModelSpec s = tiny_spec();
  const MatrixKey q{Slot::kQuery, 0};
  EXPECT_EQ(matrix_bytes(s, q, QuantScheme::full(), false), 16 * 16 * 4.0);
  EXPECT_EQ(matrix_bytes(s, q, QuantScheme::ternary(), false), 16 * 16 / 4.0 + 4.0);
  EXPECT_EQ(matrix_bytes(s, q, QuantScheme::binary(), false), 16 * 16 / 8.0 + 4.0);
  EXPECT_EQ(matrix_bytes(s, q, QuantScheme::uniform(4), false, false), 16 * 16 / 2.0);
}

TEST(Accounting, CostInputOfSplitModel) {
  const ModelSpec half = tiny_spec(0.5);
  const Model tern = build_model(half, ternary_precision(half), {ActKind::kMinMax, 8}, 2);
  const Model bin = split_model(tern);
  const CostInput in = cost_input(bin);
  EXPECT_EQ(in.split.size(), splittable_matrices(half).size());
  EXPECT_EQ(in.act_bits, 8);
  EXPECT_EQ(model_size_bytes(in), model_size_bytes(config(half, binary_precision(half), 8, true)));
  const CostReport rep = cost_report(in);
  EXPECT_EQ(rep.bytes, model_size_bytes(in));
  EXPECT_NE(rep.csv().find("total"), std::string::npos);
}
