#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <json.hpp>

#include "test_support.hpp"
#include "tws/checkpoint.hpp"
#include "tws/model.hpp"
#include "tws/pipeline.hpp"
#include "tws/splitting.hpp"

using namespace tws;
using tws::testing::random_batch;
using tws::testing::tiny_spec;

namespace {

PrecisionMap full_precision(const ModelSpec& s) { return uniform_precision(s, QuantScheme::full()); }

std::size_t matrix_params(const ModelSpec& spec, bool transformer_only) {
  std::size_t n = 0;
  for (const auto& k : splittable_matrices(spec)) {
    if (transformer_only && k.layer < 0) continue;
    const auto [r, c] = matrix_shape(spec, k);
    n += r * c;
  }
  return n;
}

}  // namespace

TEST(ModelSpec, Validation) {
  ModelSpec s = tiny_spec();
  EXPECT_NO_THROW(s.validate());
  s.heads = 3;
  EXPECT_THROW(s.validate(), ConfigError);
  s = tiny_spec();
  s.width = 0.3;
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_EQ(tiny_spec(0.5).active_heads(), 2);
  EXPECT_EQ(tiny_spec(0.5).active_ffn(), 16);
  EXPECT_EQ(tiny_spec(0.5).head_dim(), 4);
}

TEST(PartTags, GroupsPartitionTheSplittableMatrices) {
  const ModelSpec s = tiny_spec();
  const auto groups = parameters_by_tag(s);
  EXPECT_EQ(groups.size(), 5u * 2 + 2);
  std::set<MatrixKey> seen;
  for (const auto& [tag, keys] : groups) {
    for (const auto& k : keys) {
      EXPECT_EQ(k.tag(), tag);
      EXPECT_TRUE(seen.insert(k).second);
    }
  }
  const auto all = splittable_matrices(s);
  EXPECT_EQ(seen, std::set<MatrixKey>(all.begin(), all.end()));
  const auto& qk = groups.at(PartTag{Part::kQueryKey, 1});
  EXPECT_EQ(qk, (std::vector<MatrixKey>{{Slot::kQuery, 1}, {Slot::kKey, 1}}));
}

TEST(PartTags, BertBaseHas74SplittableMatrices) {
  EXPECT_EQ(splittable_matrices(ModelSpec::bert_base()).size(), 74u);
}

TEST(PartTags, StringRoundTrip) {
  for (const auto& k : splittable_matrices(tiny_spec())) EXPECT_EQ(matrix_key_from_string(to_string(k)), k);
  for (const auto& [tag, keys] : parameters_by_tag(tiny_spec())) EXPECT_EQ(part_tag_from_string(to_string(tag)), tag);
  EXPECT_THROW(matrix_key_from_string("layer0.nothing"), std::invalid_argument);
}

TEST(Build, PrecisionMapErrors) {
  const ModelSpec s = tiny_spec();
  PrecisionMap p = full_precision(s);
  p.erase(MatrixKey{Slot::kPooler, -1});
  EXPECT_THROW(build_model(s, p, {}, 0), ConfigError);
  p = full_precision(s);
  p[MatrixKey{Slot::kQuery, 0}] = QuantScheme::ternary(Granularity::kPerRow);
  EXPECT_THROW(build_model(s, p, {}, 0), ConfigError);
  p = full_precision(s);
  p[MatrixKey{Slot::kQuery, 7}] = QuantScheme::full();
  EXPECT_THROW(build_model(s, p, {}, 0), ConfigError);
}

TEST(Build, EmbeddingIsPerRowAndRestPerMatrix) {
  const ModelSpec s = tiny_spec(0.5);
  const Model m = build_model(s, ternary_precision(s), {}, 1);
  for (const WeightSlot* slot : m.slots()) {
    const auto g = slot->branches[0].scheme.granularity;
    EXPECT_EQ(g, slot->key.slot == Slot::kEmbedding ? Granularity::kPerRow : Granularity::kPerMatrix);
    EXPECT_TRUE(on_latent_grid(slot->branches[0].latent.value));
  }
}

TEST(Build, WidthRuleHalvesTransformerMatrices) {
  EXPECT_EQ(2 * matrix_params(tiny_spec(0.5), true), matrix_params(tiny_spec(1.0), true));
  const auto emb = MatrixKey{Slot::kEmbedding, -1};
  EXPECT_EQ(matrix_shape(tiny_spec(0.5), emb), matrix_shape(tiny_spec(1.0), emb));
  const ModelSpec b = ModelSpec::bert_base();
  ModelSpec h = b;
  h.width = 0.5;
  EXPECT_EQ(2 * matrix_params(h, true), matrix_params(b, true));
}

TEST(Forward, RejectsEmptyAndOutOfRangeBatches) {
  const ModelSpec s = tiny_spec();
  const Model m = build_model(s, full_precision(s), {}, 2);
  Batch empty;
  EXPECT_THROW(forward(m, empty), std::invalid_argument);
  std::mt19937_64 rng(1);
  Batch b = random_batch(s, 2, 5, rng);
  b.tokens[3] = s.vocab;
  EXPECT_THROW(forward(m, b), std::out_of_range);
}

TEST(Forward, IntermediatesHaveHookShapes) {
  const ModelSpec s = tiny_spec(0.5);
  const Model m = build_model(s, full_precision(s), {}, 3);
  std::mt19937_64 rng(2);
  const Batch b = random_batch(s, 3, 6, rng);
  const ModelOutput out = forward(m, b);
  EXPECT_EQ(out.inter.mha.size(), 2u);
  EXPECT_EQ(out.inter.ffn.size(), 2u);
  const auto expect = std::vector<std::size_t>{18, 16};
  EXPECT_EQ(out.tape->value(out.inter.embedding).shape(), expect);
  for (const Var& v : out.inter.ffn) EXPECT_EQ(out.tape->value(v).shape(), expect);
  EXPECT_EQ(out.logits_value().shape(), (std::vector<std::size_t>{3, 2}));
}

// Recorded once from this build of the full-precision model; guards against
// accidental changes to initialization or the forward pass.
TEST(Forward, GoldenLogits) {
  const ModelSpec s = tiny_spec();
  const Model m = build_model(s, full_precision(s), {}, 42);
  Batch b;
  b.size = 2;
  b.seq = 4;
  b.tokens = {1, 5, 9, 2, 1, 30, 2, 0};
  b.lengths = {4, 3};
  const Tensor logits = predict_logits(m, b);
  const std::vector<double> golden = {0.00091978048942138605, 0.008012853401250462, 0.00091967265564864677,
                                      0.0080305546932871331};
  ASSERT_EQ(logits.size(), golden.size());
  for (std::size_t i = 0; i < golden.size(); ++i) EXPECT_NEAR(logits[i], golden[i], 1e-12);
}

TEST(Forward, PadPositionsDoNotAffectLogits) {
  const ModelSpec s = tiny_spec();
  const Model m = build_model(s, full_precision(s), {}, 4);
  std::mt19937_64 rng(3);
  Batch b = random_batch(s, 4, 7, rng);
  const Tensor a = predict_logits(m, b);
  for (std::size_t i = 0; i < b.size; ++i) {
    for (std::size_t t = b.lengths[i]; t < b.seq; ++t) b.tokens[i * b.seq + t] = (b.tokens[i * b.seq + t] + 7) % s.vocab;
  }
  EXPECT_LE(max_abs_diff(a, predict_logits(m, b)), 1e-12);
}

TEST(Pairs, ZeroSecondBranchMatchesSingle) {
  const ModelSpec s = tiny_spec();
  const Model single = build_model(s, full_precision(s), {}, 5);
  Model paired = single;
  for (WeightSlot* slot : paired.slots()) {
    WeightBranch extra = slot->branches[0];
    extra.latent.name += "_2";
    extra.latent.value = Tensor(extra.latent.value.shape());
    slot->branches.push_back(extra);
  }
  std::mt19937_64 rng(4);
  const Batch b = random_batch(s, 4, 8, rng);
  EXPECT_EQ(predict_logits(single, b).values(), predict_logits(paired, b).values());
}

TEST(Pairs, AdditivityWithQuantizersDisabled) {
  const ModelSpec s = tiny_spec();
  const Model base = build_model(s, full_precision(s), {}, 6);
  Model single = base;
  Model paired = base;
  std::mt19937_64 rng(5);
  for (WeightSlot* slot : paired.slots()) {
    WeightBranch extra = slot->branches[0];
    extra.latent.name += "_2";
    extra.latent.value = tws::testing::random_tensor(extra.latent.value.shape(), rng, -0.05, 0.05);
    WeightSlot& target = single.slot(slot->key);
    for (std::size_t i = 0; i < extra.latent.value.size(); ++i) {
      target.branches[0].latent.value[i] = slot->branches[0].latent.value[i] + extra.latent.value[i];
    }
    slot->branches.push_back(extra);
  }
  const Batch b = random_batch(s, 4, 8, rng);
  const Tensor ls = predict_logits(single, b);
  EXPECT_LE(max_abs_diff(ls, predict_logits(paired, b)), 1e-12 * std::max(1.0, max_abs(ls.span())));
}

TEST(Placement, ActivationSitesMatchQuantizedMatmuls) {
  const ModelSpec s = tiny_spec(0.5);
  std::mt19937_64 rng(6);
  const Batch b = random_batch(s, 2, 5, rng);

  const Model fp = build_model(s, full_precision(s), {ActKind::kMinMax, 8}, 7);
  const ModelOutput fo = forward(fp, b);
  EXPECT_EQ(fo.quantized_weight_matmuls, 0u);
  EXPECT_EQ(fo.weight_act_sites, 0u);
  EXPECT_EQ(fo.attention_act_sites, 0u);

  const Model tern = build_model(s, ternary_precision(s), {ActKind::kMinMax, 8}, 7);
  const ModelOutput to = forward(tern, b);
  // six per layer plus the pooler; the embedding is a lookup
  EXPECT_EQ(to.quantized_weight_matmuls, 6u * 2 + 1);
  EXPECT_EQ(to.weight_act_sites, to.quantized_weight_matmuls);
  EXPECT_EQ(to.attention_act_sites, 4u * 2);

  PrecisionMap mixed = ternary_precision(s);
  mixed[MatrixKey{Slot::kFfnMid, 0}] = QuantScheme::full();
  mixed[MatrixKey{Slot::kPooler, -1}] = QuantScheme::full();
  const ModelOutput mo = forward(build_model(s, mixed, {ActKind::kMinMax, 8}, 7), b);
  EXPECT_EQ(mo.quantized_weight_matmuls, 6u * 2 - 1);
  EXPECT_EQ(mo.weight_act_sites, mo.quantized_weight_matmuls);
}

TEST(Placement, UncalibratedLsqSiteIsAnError) {
  const ModelSpec s = tiny_spec(0.5);
  Model m = build_model(s, ternary_precision(s), {ActKind::kLsq, 8}, 8);
  std::mt19937_64 rng(7);
  const Batch b = random_batch(s, 2, 5, rng);
  EXPECT_THROW(forward(m, b), QuantStateError);
  calibrate_activations(m, b);
  EXPECT_NO_THROW(forward(m, b));
  for (ActSite* site : m.act_sites()) {
    EXPECT_TRUE(site->calibrated);
    EXPECT_GT(site->step.value.item(), 0.0);
  }
}

TEST(ShrinkWidth, FullWidthCopyIsIdentical) {
  const ModelSpec s = tiny_spec();
  const Model m = build_model(s, full_precision(s), {}, 9);
  std::mt19937_64 rng(8);
  const Batch b = random_batch(s, 3, 6, rng);
  EXPECT_EQ(predict_logits(m, b).values(), predict_logits(shrink_width(m, 1.0, full_precision(s)), b).values());
  const Model half = shrink_width(m, 0.5, full_precision(tiny_spec(0.5)));
  EXPECT_EQ(half.slot({Slot::kFfnMid, 0}).branches[0].latent.value.shape(), (std::vector<std::size_t>{16, 16}));
  EXPECT_EQ(half.slot({Slot::kFfnOut, 0}).branches[0].latent.value.shape(), (std::vector<std::size_t>{16, 16}));
  EXPECT_EQ(half.slot({Slot::kQuery, 1}).branches[0].latent.value.at(3, 7),
            m.slot({Slot::kQuery, 1}).branches[0].latent.value.at(3, 7));
}

class CheckpointTest : public ::testing::Test {
 protected:
  void TearDown() override { std::filesystem::remove(path_); }
  std::string path_ = (std::filesystem::temp_directory_path() / "tws_ckpt_test.bin").string();
};

TEST_F(CheckpointTest, RoundTripTernaryAndSplit) {
  const ModelSpec s = tiny_spec(0.5);
  const Model tern = build_model(s, ternary_precision(s), {ActKind::kMinMax, 8}, 10);
  std::mt19937_64 rng(9);
  const Batch b = random_batch(s, 3, 6, rng);
  for (const Model& m : {tern, split_model(tern)}) {
    save_checkpoint(path_, m, "int-distil-ternary");
    const Checkpoint ck = load_checkpoint(path_);
    EXPECT_EQ(ck.stage, "int-distil-ternary");
    EXPECT_EQ(ck.model.spec, m.spec);
    EXPECT_EQ(ck.model.act, m.act);
    EXPECT_EQ(ck.model.precision(), m.precision());
    for (const WeightSlot* slot : m.slots()) {
      const WeightSlot& got = ck.model.slot(slot->key);
      ASSERT_EQ(got.branches.size(), slot->branches.size());
      for (std::size_t i = 0; i < got.branches.size(); ++i) {
        EXPECT_EQ(got.branches[i].latent.name, slot->branches[i].latent.name);
        EXPECT_TRUE(on_latent_grid(got.branches[i].latent.value));
        EXPECT_LE(max_abs_diff(got.branches[i].latent.value, slot->branches[i].latent.value), 1e-8);
      }
    }
    EXPECT_LE(max_abs_diff(predict_logits(ck.model, b), predict_logits(m, b)), 1e-4);
  }
}

TEST_F(CheckpointTest, RejectsForeignFiles) {
  { std::ofstream(path_) << "not a checkpoint at all"; }
  EXPECT_THROW(load_checkpoint(path_), CheckpointError);
  EXPECT_THROW(load_checkpoint(path_ + ".missing"), CheckpointError);
}

TEST_F(CheckpointTest, HeaderDescribesPackedBlocks) {
  const ModelSpec s = tiny_spec(0.5);
  const Model tern = build_model(s, ternary_precision(s), {}, 11);
  save_checkpoint(path_, tern, "pred-distil-ternary");
  std::ifstream in(path_, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ASSERT_EQ(bytes.substr(0, 8), "TWSCKPT1");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  const auto header = nlohmann::json::parse(bytes.substr(16, len));
  EXPECT_EQ(header.at("packed").size(), splittable_matrices(s).size());
  for (const auto& p : header.at("packed")) {
    const std::size_t n = p.at("elements");
    const std::size_t scales = p.at("scales");
    EXPECT_EQ(p.at("bytes").get<std::size_t>(), 2 * ((n + 7) / 8) + 4 * scales);
  }
}
