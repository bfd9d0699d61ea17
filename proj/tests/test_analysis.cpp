#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "test_support.hpp"
#include "tws/analysis.hpp"
#include "tws/pipeline.hpp"

using namespace tws;
using tws::testing::random_batch;
using tws::testing::random_tensor;
using tws::testing::micro_spec;
using tws::testing::tiny_spec;
using tws::testing::ToyMlp;

TEST(PowerMethod, DiagonalQuadratic) {
  // l(w) = 1/2 w^T diag(2, 1) w
  const GradFn g = [](const std::vector<double>& w) { return std::vector<double>{2.0 * w[0], w[1]}; };
  const PowerResult r = power_method(g, {0.3, -0.7});
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.lambda, 2.0, 1e-4 * 2.0);
  const PowerResult at_zero = power_method(g, {0.0, 0.0});
  EXPECT_NEAR(at_zero.lambda, 2.0, 1e-3);
}

TEST(PowerMethod, NegativeDominantEigenvalueReportsMagnitude) {
  const GradFn g = [](const std::vector<double>& w) { return std::vector<double>{-3.0 * w[0], 0.5 * w[1]}; };
  const PowerResult r = power_method(g, {1.0, 1.0});
  EXPECT_NEAR(r.lambda, 3.0, 1e-3);
  EXPECT_NEAR(r.signed_lambda, -3.0, 1e-3);
}

TEST(PowerMethod, MatchesDenseHessianOnToyMlp) {
  const ToyMlp mlp(3);
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto w = mlp.init(seed);
    const double oracle_lambda = oracle::dominant_abs_eigenvalue(
        oracle::fd_hessian([&](const std::vector<double>& v) { return mlp.loss(v); }, w));
    PowerOptions opt;
    opt.max_iterations = 300;
    const PowerResult r = power_method([&](const std::vector<double>& v) { return mlp.grad(v); }, w, opt);
    EXPECT_NEAR(r.lambda, oracle_lambda, 0.05 * oracle_lambda) << "seed " << seed;
  }
}

TEST(PowerMethod, StartVectorInvariance) {
  const ToyMlp mlp(4);
  const auto w = mlp.init(7);
  PowerOptions opt;
  opt.max_iterations = 300;
  std::vector<double> lams;
  for (std::uint64_t s = 0; s < 5; ++s) {
    opt.seed = s;
    lams.push_back(power_method([&](const std::vector<double>& v) { return mlp.grad(v); }, w, opt).lambda);
  }
  for (double l : lams) EXPECT_NEAR(l, lams[0], 0.01 * lams[0]);
}

TEST(TopEigenvalue, ModelGroupMatchesDenseHessian) {
  const ModelSpec s = micro_spec();
  const Model m = build_model(s, ternary_precision(s), {ActKind::kMinMax, 8}, 11);
  std::mt19937_64 rng(12);
  const Batch b = random_batch(s, 6, 6, rng);
  const std::vector<MatrixKey> group{{Slot::kQuery, 0}, {Slot::kKey, 0}};
  GroupObjective obj(m, group, b);
  ASSERT_EQ(obj.point().size(), 32u);
  const double expect = oracle::dominant_abs_eigenvalue(
      oracle::fd_hessian([&](const std::vector<double>& v) { return obj.loss(v); }, obj.point()));
  PowerOptions opt;
  opt.max_iterations = 300;
  const PowerResult r = top_eigenvalue(m, group, b, opt);
  EXPECT_NEAR(r.lambda, expect, 0.05 * expect);
}

TEST(GroupObjective, LossAtPointIsUnquantizedModelLoss) {
  const ModelSpec s = micro_spec();
  Model m = build_model(s, uniform_precision(s, QuantScheme::full()), {}, 11);
  std::mt19937_64 rng(12);
  const Batch b = random_batch(s, 4, 6, rng);
  GroupObjective obj(m, {{Slot::kValue, 0}}, b);
  EXPECT_DOUBLE_EQ(obj.loss(obj.point()), batch_loss(m, b));
  std::vector<double> w = obj.point();
  const auto grad = obj.grad(w);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double h = 1e-6, orig = w[i];
    w[i] = orig + h;
    const double up = obj.loss(w);
    w[i] = orig - h;
    const double down = obj.loss(w);
    w[i] = orig;
    EXPECT_NEAR(grad[i], (up - down) / (2 * h), 1e-6);
  }
}

TEST(Landscape, CenterIsUnperturbedLossAndShapeIs11By11) {
  const ModelSpec s = tiny_spec(0.5);
  const Model m = build_model(s, ternary_precision(s), {ActKind::kMinMax, 8}, 5);
  std::mt19937_64 rng(6);
  const Batch b = random_batch(s, 4, 8, rng);
  const LandscapeGrid g = landscape_grid(m, {{Slot::kQuery, 0}}, {{Slot::kFfnMid, 1}}, b);
  ASSERT_EQ(g.loss.size(), 11u);
  ASSERT_EQ(g.loss[0].size(), 11u);
  EXPECT_EQ(g.fractions.front(), -1.0);
  EXPECT_EQ(g.fractions[5], 0.0);
  EXPECT_EQ(g.loss[5][5], batch_loss(m, b));

  // One off-center point against a hand-shifted copy.
  Model shifted = m;
  for (auto& v : shifted.slot({Slot::kQuery, 0}).branches[0].latent.value.span()) v += 0.4 * g.mean_abs_a;
  for (auto& v : shifted.slot({Slot::kFfnMid, 1}).branches[0].latent.value.span()) v -= 0.2 * g.mean_abs_b;
  EXPECT_EQ(g.loss[7][4], batch_loss(shifted, b));
  const std::string csv = g.csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 122);
  EXPECT_THROW(landscape_grid(m, {{Slot::kQuery, 7}}, {{Slot::kKey, 0}}, b), std::out_of_range);
}

TEST(Landscape, QuadraticLossGivesExactParaboloid) {
  const double ma = 0.3, mb = 0.05;
  auto q = [](double x, double y) { return 3.0 * x * x + x * y + 0.5 * y * y; };
  const LandscapeGrid g = landscape_grid(q, ma, mb, 5);
  for (std::size_t i = 0; i < 11; ++i) {
    for (std::size_t j = 0; j < 11; ++j) {
      const double x = g.fractions[i] * ma, y = g.fractions[j] * mb;
      EXPECT_EQ(g.loss[i][j], q(x, y));
      EXPECT_EQ(g.loss[i][j], g.loss[10 - i][10 - j]);
    }
  }
}

TEST(Steepness, IdenticalModelsGiveUnitRatios) {
  ModelSpec s = tiny_spec(0.5);
  s.layers = 1;
  const Model fp = build_model(s, uniform_precision(s, QuantScheme::full()), {}, 8);
  std::mt19937_64 rng(9);
  const std::vector<Batch> batches{random_batch(s, 4, 8, rng)};
  PowerOptions opt;
  opt.max_iterations = 20;
  const SteepnessReport r = steepness_report(fp, fp, fp, batches, opt);
  ASSERT_EQ(r.parts.size(), 5u);
  for (const auto& p : r.parts) {
    EXPECT_EQ(p.ternary_ratio_mean, 1.0);
    EXPECT_EQ(p.binary_ratio_mean, 1.0);
    EXPECT_EQ(p.ternary_ratio_std, 0.0);
  }
  EXPECT_EQ(r.entries.size(), 15u);
  EXPECT_EQ(r.bound_fraction, 1.0);
  EXPECT_FALSE(r.csv().empty());
}

TEST(Steepness, NoiseCheckUsesQuantizationError) {
  ModelSpec s = tiny_spec(0.5);
  s.layers = 1;
  const Model fp = build_model(s, uniform_precision(s, QuantScheme::full()), {}, 8);
  Model tern = fp;
  set_precision(tern, ternary_precision(s));
  std::mt19937_64 rng(9);
  PowerOptions opt;
  opt.max_iterations = 10;
  const SteepnessReport r = steepness_report(fp, tern, tern, {random_batch(s, 4, 8, rng)}, opt);
  for (const auto& e : r.entries) {
    if (e.model == "fp") continue;
    EXPECT_GT(e.noise_sq, 0.0);
    EXPECT_GE(e.grad_norm, 0.0);
    EXPECT_EQ(e.bound_holds, e.loss_increase <= e.lambda * e.noise_sq);
  }
}
