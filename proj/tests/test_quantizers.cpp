#include <algorithm>
#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "test_support.hpp"
#include "tws/quantizers.hpp"

using namespace tws;
using tws::testing::lsq_step_grad;
using tws::testing::random_tensor;
using tws::testing::surrogate_loss;

TEST(Ternarize, WorkedExample) {
  const TernaryResult r = ternarize(Tensor::row({0.8, -0.6, 0.05, -0.05}));
  EXPECT_NEAR(r.delta[0], 0.2625, 1e-15);
  EXPECT_NEAR(r.alpha[0], 0.7, 1e-15);
  EXPECT_NEAR(r.w_hat[0], 0.7, 1e-15);
  EXPECT_NEAR(r.w_hat[1], -0.7, 1e-15);
  EXPECT_EQ(r.w_hat[2], 0.0);
  EXPECT_EQ(r.w_hat[3], 0.0);
  EXPECT_EQ(r.nonzero, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(r.zeroed_pos, (std::vector<std::size_t>{2}));
  EXPECT_EQ(r.zeroed_neg, (std::vector<std::size_t>{3}));
}

TEST(Ternarize, DegenerateAndConstant) {
  const TernaryResult z = ternarize(Tensor::row({0, 0, 0}));
  EXPECT_EQ(z.alpha[0], 0.0);
  EXPECT_EQ(z.delta[0], 0.0);
  EXPECT_EQ(z.nonzero.size(), 3u);
  for (double v : z.w_hat.span()) EXPECT_EQ(v, 0.0);

  const TernaryResult c = ternarize(Tensor::row({1.5, 1.5, 1.5, 1.5}));
  EXPECT_DOUBLE_EQ(c.delta[0], 0.7 * 1.5);
  EXPECT_EQ(c.alpha[0], 1.5);
  for (double v : c.w_hat.span()) EXPECT_EQ(v, 1.5);
}

TEST(Ternarize, PartitionSupportRuleAndOptimalScale) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor w = random_tensor({6, 7}, rng);
    const TernaryResult r = ternarize(w);
    std::set<std::size_t> all;
    for (auto* s : {&r.nonzero, &r.zeroed_pos, &r.zeroed_neg}) all.insert(s->begin(), s->end());
    EXPECT_EQ(all.size(), w.size());
    EXPECT_EQ(r.nonzero.size() + r.zeroed_pos.size() + r.zeroed_neg.size(), w.size());
    for (auto i : r.nonzero) EXPECT_GE(std::abs(w[i]), r.delta[0]);
    for (auto i : r.zeroed_pos) EXPECT_TRUE(w[i] > 0.0 && w[i] < r.delta[0]);
    for (auto i : r.zeroed_neg) EXPECT_TRUE(w[i] <= 0.0 && -w[i] < r.delta[0]);
    for (double v : r.w_hat.span()) EXPECT_TRUE(v == 0.0 || std::abs(v) == r.alpha[0]);

    auto err = [&](double a) {
      double e = 0.0;
      for (auto i : r.nonzero) e += std::pow(w[i] - a * (w[i] >= 0 ? 1 : -1), 2);
      return e;
    };
    for (double a = 0.0; a < 3.0; a += 0.01) EXPECT_LE(err(r.alpha[0]), err(a) + 1e-12);
  }
}

TEST(Ternarize, PerRowHasOneScalePerRow) {
  std::mt19937_64 rng(12);
  const Tensor w = random_tensor({5, 8}, rng);
  const TernaryResult rows = ternarize(w, Granularity::kPerRow);
  EXPECT_EQ(rows.alpha.size(), 5u);
  EXPECT_EQ(rows.delta.size(), 5u);
  for (std::size_t r = 0; r < 5; ++r) {
    Tensor one({1, 8});
    for (std::size_t c = 0; c < 8; ++c) one[c] = w.at(r, c);
    const TernaryResult single = ternarize(one);
    EXPECT_EQ(single.alpha[0], rows.alpha[r]);
    EXPECT_EQ(single.delta[0], rows.delta[r]);
  }
  EXPECT_EQ(ternarize(w).alpha.size(), 1u);
}

TEST(Binarize, WorkedExamples) {
  const BinaryResult r = binarize(Tensor::row({0.5, -0.3, 0.1, -0.1}));
  EXPECT_DOUBLE_EQ(r.alpha[0], 0.25);
  EXPECT_EQ(r.w_hat.values(), (std::vector<double>{0.25, -0.25, 0.25, -0.25}));
  EXPECT_EQ(binarize(Tensor::row({0.7, 0.7})).w_hat.values(), (std::vector<double>{0.7, 0.7}));
  const BinaryResult z = binarize(Tensor::row({0, 0}));
  EXPECT_EQ(z.alpha[0], 0.0);
  EXPECT_EQ(z.w_hat.values(), (std::vector<double>{0, 0}));
}

TEST(Binarize, SignOfZeroIsPositive) {
  const BinaryResult r = binarize(Tensor::row({0.0, -1.0, 1.0}));
  EXPECT_GT(r.w_hat[0], 0.0);
}

TEST(Binarize, ScaleMinimizesReconstructionError) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    const Tensor w = random_tensor({4, 9}, rng);
    const double alpha = binarize(w).alpha[0];
    auto err = [&](double a) {
      double e = 0.0;
      for (double v : w.span()) e += std::pow(v - a * (v >= 0 ? 1 : -1), 2);
      return e;
    };
    for (double a = 0.0; a < 2.5; a += 0.005) EXPECT_LE(err(alpha), err(a) + 1e-12);
  }
}

TEST(Binarize, TwnScaleVariantUsesTernaryAlpha) {
  const Tensor w = Tensor::row({0.8, -0.6, 0.05, -0.05});
  const BinaryResult r = binarize_with_ternary_scale(w);
  EXPECT_NEAR(r.alpha[0], 0.7, 1e-15);
  EXPECT_NEAR(r.w_hat[2], 0.7, 1e-15);
  EXPECT_NEAR(r.w_hat[3], -0.7, 1e-15);
}

TEST(UniformWeight, GridExamples) {
  EXPECT_EQ(quantize_uniform_weight(Tensor::row({1.0, -1.0}), 8).values(), (std::vector<double>{1.0, -1.0}));
  const Tensor q = quantize_uniform_weight(Tensor::row({0.1, 0.9}), 3);
  EXPECT_NEAR(q[0], 0.0, 1e-15);
  EXPECT_NEAR(q[1], 0.9, 1e-15);
  // 3 levels each side with step 1: ties go to even.
  EXPECT_EQ(quantize_uniform_weight(Tensor::row({3.0, 0.5, 1.5, 2.5, -0.5}), 3).values(),
            (std::vector<double>{3.0, 0.0, 2.0, 2.0, 0.0}));
}

TEST(UniformWeight, Idempotent) {
  std::mt19937_64 rng(14);
  for (int bits : {3, 4, 8}) {
    const Tensor q = quantize_uniform_weight(random_tensor({5, 5}, rng), bits);
    EXPECT_LE(max_abs_diff(quantize_uniform_weight(q, bits), q), 1e-15);
  }
}

TEST(MinMaxActivation, SmallExamples) {
  // 2 bits signed on absmax 1.5: step 1, codes -2..1.
  EXPECT_EQ(quantize_activation_minmax(Tensor::row({-1.5, -0.4, 0.0, 0.6, 1.5}), 2).values(),
            (std::vector<double>{-2.0, 0.0, 0.0, 1.0, 1.0}));
  // 2 bits unsigned on absmax 0.9: step 0.3, codes 0..3.
  const Tensor u = quantize_activation_minmax(Tensor::row({0.0, 0.2, 0.9}), 2, false);
  EXPECT_EQ(u[0], 0.0);
  EXPECT_NEAR(u[1], 0.3, 1e-15);
  EXPECT_NEAR(u[2], 0.9, 1e-15);
  EXPECT_EQ(quantize_activation_minmax(Tensor::row({0.0, 0.0})).values(), (std::vector<double>{0.0, 0.0}));
}

TEST(MinMaxActivation, ErrorBoundZeroLevelAndCodeCount) {
  std::mt19937_64 rng(15);
  for (int bits : {2, 4, 8}) {
    for (bool is_signed : {true, false}) {
      const Tensor x = is_signed ? random_tensor({6, 6}, rng) : random_tensor({6, 6}, rng, 0.0, 1.0);
      Tensor xz = x;
      xz[7] = 0.0;
      const Tensor q = quantize_activation_minmax(xz, bits, is_signed);
      const double absmax = max_abs(xz.span());
      EXPECT_LE(max_abs_diff(q, xz), absmax / ((1 << bits) - 1) + 1e-15);
      EXPECT_EQ(q[7], 0.0);
      std::vector<double> levels(q.span().begin(), q.span().end());
      std::sort(levels.begin(), levels.end());
      levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
      EXPECT_LE(levels.size(), std::size_t{1} << bits);
    }
  }
}

TEST(MinMaxActivation, HalfCodeTiesIgnoreLastUlpNoise) {
  const double step = 2.0 / 255.0;
  const double tie = 63.5 * step;
  for (double v : {tie, std::nextafter(tie, 0.0), std::nextafter(tie, 1.0)}) {
    const Tensor q = quantize_activation_minmax(Tensor::row({1.0, v, -v}));
    EXPECT_EQ(q[1], 64.0 * step);
    EXPECT_EQ(q[2], -64.0 * step);
  }
}

TEST(Lsq, OnGridSaturationAndInvalidStep) {
  const LsqState s{0.25, 4, true};
  const LsqResult on = lsq_quantize(Tensor::row({0.5, -0.75, 1.75}), s);
  EXPECT_EQ(on.x_hat.values(), (std::vector<double>{0.5, -0.75, 1.75}));
  const LsqResult sat = lsq_quantize(Tensor::row({100.0, -100.0}), s);
  EXPECT_EQ(sat.x_hat[0], 0.25 * 7);
  EXPECT_EQ(sat.x_hat[1], 0.25 * -8);
  EXPECT_EQ(sat.grad_x_mask[0], 0.0);
  EXPECT_THROW(lsq_quantize(Tensor::row({1.0}), LsqState{0.0, 4, true}), QuantStateError);
  EXPECT_THROW(lsq_quantize(Tensor::row({1.0}), LsqState{-1.0, 4, true}), QuantStateError);
}

TEST(Lsq, InitialStep) {
  const Tensor x = Tensor::row({1.0, -3.0});
  EXPECT_DOUBLE_EQ(LsqState::initial_step(x, 8, true), 2.0 * 2.0 / std::sqrt(127.0));
  EXPECT_DOUBLE_EQ(LsqState::initial_step(x, 8, false), 2.0 * 2.0 / std::sqrt(255.0));
}

TEST(Lsq, StepGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(16);
  for (bool is_signed : {true, false}) {
    for (int trial = 0; trial < 20; ++trial) {
      const Tensor x = random_tensor({4, 8}, rng, is_signed ? -3.0 : 0.0, 3.0);
      const Tensor r = random_tensor({4, 8}, rng);
      const LsqState st{0.05 + 0.1 * trial / 20.0, 4, is_signed};
      const double g = 1.0 / std::sqrt(double(x.size()) * st.qp());
      const double h = 1e-6;
      const double fd = g * (surrogate_loss(x, r, st.step + h, st.step, st) -
                             surrogate_loss(x, r, st.step - h, st.step, st)) / (2 * h);
      const double analytic = lsq_step_grad(x, r, st.step, 4, is_signed);
      EXPECT_LE(std::abs(analytic - fd), 1e-3 * std::max(std::abs(fd), 1e-8));
    }
  }
}

TEST(Lsq, SaturatedStepGradientMatchesPlainFiniteDifferences) {
  // In the clipped region x_hat = s * Q is smooth in s, so the rule must agree
  // with differencing the quantizer itself.
  const Tensor x = Tensor::row({10.0, -12.0, 9.0});
  const Tensor r = Tensor::row({0.3, -1.1, 2.0});
  const LsqState st{0.2, 3, true};
  const double h = 1e-6;
  auto loss = [&](double s) {
    const Tensor q = lsq_quantize(x, LsqState{s, 3, true}).x_hat;
    double acc = 0.0;
    for (std::size_t i = 0; i < 3; ++i) acc += r[i] * q[i];
    return acc;
  };
  const double g = 1.0 / std::sqrt(3.0 * st.qp());
  const double fd = g * (loss(st.step + h) - loss(st.step - h)) / (2 * h);
  EXPECT_NEAR(lsq_step_grad(x, r, st.step, 3, true), fd, 1e-3 * std::abs(fd));
}

TEST(LatentGrid, SnapAndCheck) {
  EXPECT_EQ(snap_latent(0.5), 0.5);
  EXPECT_EQ(snap_latent(1e-20), 0.0);
  EXPECT_LT(snap_latent(1e6), kLatentBound);
  std::mt19937_64 rng(17);
  Tensor w = random_tensor({8, 8}, rng);
  EXPECT_FALSE(on_latent_grid(w));
  snap_latent(w);
  EXPECT_TRUE(on_latent_grid(w));
}

TEST(QuantScheme, Validation) {
  EXPECT_NO_THROW(QuantScheme::ternary().validate());
  EXPECT_THROW((QuantScheme{QuantKind::kTernary, Granularity::kPerMatrix, 3}.validate()), std::invalid_argument);
  EXPECT_THROW((QuantScheme{QuantKind::kUniform, Granularity::kPerRow, 4}.validate()), std::invalid_argument);
  EXPECT_EQ(QuantScheme::for_bits(1), QuantScheme::binary());
  EXPECT_EQ(QuantScheme::for_bits(2), QuantScheme::ternary());
  EXPECT_EQ(QuantScheme::for_bits(32), QuantScheme::full());
  EXPECT_EQ(QuantScheme::for_bits(4).kind, QuantKind::kUniform);
}
