#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_support.hpp"
#include "tws/distillation.hpp"
#include "tws/pipeline.hpp"

using namespace tws;
using tws::testing::random_tensor;

namespace {

struct Hooks {
  std::vector<Parameter> params;  // embedding, then mha/ffn per layer
  DistillTargets targets;
};

Hooks make_hooks(int layers, std::mt19937_64& rng) {
  Hooks h;
  h.targets.embedding = random_tensor({4, 3}, rng);
  h.params.push_back({"e", random_tensor({4, 3}, rng)});
  for (int l = 0; l < layers; ++l) {
    h.targets.mha.push_back(random_tensor({4, 3}, rng));
    h.targets.ffn.push_back(random_tensor({4, 3}, rng));
    h.params.push_back({"m", random_tensor({4, 3}, rng)});
    h.params.push_back({"f", random_tensor({4, 3}, rng)});
  }
  return h;
}

Intermediates as_intermediates(const std::vector<Var>& v) {
  Intermediates in;
  in.embedding = v[0];
  for (std::size_t i = 1; i < v.size(); i += 2) {
    in.mha.push_back(v[i]);
    in.ffn.push_back(v[i + 1]);
  }
  return in;
}

double entropy(const Tensor& logits) {
  const Tensor p = kernels::softmax_rows(logits);
  double h = 0.0;
  for (double v : p.span()) h -= v * std::log(v);
  return h / static_cast<double>(logits.rows());
}

}  // namespace

TEST(LossInt, ZeroWhenEqualAndConstantShift) {
  std::mt19937_64 rng(40);
  const int L = 3;
  Hooks h = make_hooks(L, rng);
  auto eval = [&](double shift) {
    Tape t;
    std::vector<Var> v;
    v.push_back(t.constant(h.targets.embedding));
    for (int l = 0; l < L; ++l) {
      v.push_back(t.constant(h.targets.mha[l]));
      v.push_back(t.constant(h.targets.ffn[l]));
    }
    for (Var& x : v) {
      Tensor s = t.value(x);
      for (auto& e : s.span()) e += shift;
      x = t.constant(s);
    }
    return t.value(loss_int(as_intermediates(v), h.targets)).item();
  };
  EXPECT_EQ(eval(0.0), 0.0);
  EXPECT_NEAR(eval(0.3), (2 * L + 1) * 0.09, 1e-14);
}

TEST(LossInt, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(41);
  Hooks h = make_hooks(2, rng);
  const double err = tws::testing::gradcheck(
      h.params, [&](Tape&, const std::vector<Var>& v) { return loss_int(as_intermediates(v), h.targets); });
  EXPECT_LE(err, 1e-4);
}

TEST(LossInt, LayerCountMismatchIsShapeError) {
  std::mt19937_64 rng(42);
  Hooks h = make_hooks(2, rng);
  Tape t;
  std::vector<Var> v;
  for (auto& p : h.params) v.push_back(t.parameter(p));
  Intermediates in = as_intermediates(v);
  in.mha.pop_back();
  EXPECT_THROW(loss_int(in, h.targets), ShapeError);
}

TEST(LossPred, UniformAndEntropyCases) {
  Tape t;
  const Tensor zero = Tensor::row({0, 0});
  EXPECT_NEAR(t.value(loss_pred(t.constant(zero), zero)).item(), std::log(2.0), 1e-15);
  std::mt19937_64 rng(43);
  const Tensor y = random_tensor({5, 4}, rng);
  EXPECT_NEAR(t.value(loss_pred(t.constant(y), y)).item(), entropy(y), 1e-13);
  for (int i = 0; i < 20; ++i) {
    const Tensor yh = random_tensor({5, 4}, rng);
    EXPECT_GE(t.value(loss_pred(t.constant(yh), y)).item(), entropy(y) - 1e-13);
  }
}

TEST(LossPred, GradientIsSoftmaxDifference) {
  std::mt19937_64 rng(44);
  const Tensor y = random_tensor({3, 4}, rng);
  Parameter yh{"yh", random_tensor({3, 4}, rng)};
  Tape t;
  t.backward(loss_pred(t.parameter(yh), y));
  const Tensor g = t.grad_of(yh);
  const Tensor ps = kernels::softmax_rows(yh.value);
  const Tensor pt = kernels::softmax_rows(y);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], (ps[i] - pt[i]) / 3.0, 1e-15);
  EXPECT_LE(tws::testing::gradcheck({yh}, [&](Tape&, const std::vector<Var>& v) { return loss_pred(v[0], y); }),
            1e-4);
}

TEST(CaptureTargets, DetachesTeacherHooks) {
  const ModelSpec s = tws::testing::tiny_spec();
  const Model m = build_model(s, uniform_precision(s, QuantScheme::full()), {}, 45);
  std::mt19937_64 rng(45);
  const Batch b = tws::testing::random_batch(s, 2, 5, rng);
  const ModelOutput out = forward(m, b);
  const DistillTargets t = capture_targets(out);
  EXPECT_EQ(t.mha.size(), 2u);
  EXPECT_EQ(t.logits.values(), out.logits_value().values());
  EXPECT_EQ(t.ffn[1].values(), out.tape->value(out.inter.ffn[1]).values());
}
