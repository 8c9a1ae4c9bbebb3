#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "femae/optim.hpp"

namespace femae {
namespace {

using Pd = Parameter<double>;

Pd make_param(const std::string& name, std::vector<double> v) {
  const std::size_t n = v.size();
  return Pd(name, Tensor<double>({n}, std::move(v)));
}

void step(std::vector<Pd*> ps, AdamState<double>& st, double lr, const AdamConfig& cfg) {
  adamw_step<double>(std::span<Pd* const>(ps.data(), ps.size()), st, lr, cfg);
}

// Textbook scalar AdamW used as the reference.
struct ScalarAdamW {
  double m = 0, v = 0, w;
  int t = 0;
  explicit ScalarAdamW(double w0) : w(w0) {}
  void step(double g, double lr, double b1, double b2, double eps, double wd) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    w = w - lr * wd * w - lr * mh / (std::sqrt(vh) + eps);
  }
};

TEST(AdamW, ZeroGradientWithoutDecayLeavesWeights) {
  Pd p = make_param("w", {0.3, -1.2, 4.0});
  AdamState<double> st;
  step({&p}, st, 1e-2, {0.9, 0.999, 1e-8, 0.0});
  EXPECT_EQ(p.value.storage(), (std::vector<double>{0.3, -1.2, 4.0}));
}

TEST(AdamW, FirstStepMovesByLearningRateAgainstGradient) {
  Pd p = make_param("w", {1.0, 1.0, 1.0});
  p.grad.storage() = {2.5, -0.01, 300.0};
  AdamState<double> st;
  step({&p}, st, 1e-3, {0.9, 0.999, 1e-8, 0.0});
  EXPECT_NEAR(p.value[0], 1.0 - 1e-3, 1e-9);
  EXPECT_NEAR(p.value[1], 1.0 + 1e-3, 1e-9);
  EXPECT_NEAR(p.value[2], 1.0 - 1e-3, 1e-9);
}

TEST(AdamW, DecoupledDecayShrinksWeights) {
  Pd p = make_param("w", {2.0, -4.0});
  AdamState<double> st;
  step({&p}, st, 0.1, {0.9, 0.999, 1e-8, 0.05});
  EXPECT_NEAR(p.value[0], 2.0 * (1 - 0.1 * 0.05), 1e-15);
  EXPECT_NEAR(p.value[1], -4.0 * (1 - 0.1 * 0.05), 1e-15);
}

TEST(AdamW, MatchesScalarReferenceOverManySteps) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 1.0);
  Pd p = make_param("w", {0.5, -0.7, 1.9, 0.0});
  std::vector<ScalarAdamW> ref;
  for (double w : p.value.storage()) ref.emplace_back(w);
  AdamState<double> st;
  const AdamConfig cfg{0.9, 0.999, 1e-8, 0.05};
  for (int s = 0; s < 50; ++s) {
    const double lr = 1e-2 * (1.0 + 0.1 * s);
    for (std::size_t i = 0; i < 4; ++i) {
      p.grad[i] = n(rng);
      ref[i].step(p.grad[i], lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    }
    step({&p}, st, lr, cfg);
  }
  EXPECT_EQ(st.step, 50u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(p.value[i], ref[i].w, 1e-12);
}

TEST(AdamW, FrozenParameterUntouchedAndHasNoState) {
  Pd a = make_param("a", {1.0}), b = make_param("b", {1.0});
  b.trainable = false;
  a.grad[0] = b.grad[0] = 1.0;
  AdamState<double> st;
  step({&a, &b}, st, 0.1, {});
  EXPECT_NE(a.value[0], 1.0);
  EXPECT_EQ(b.value[0], 1.0);
  EXPECT_EQ(st.m.count("b"), 0u);
}

TEST(AdamW, MinimizesQuadraticBowl) {
  const std::vector<double> target{3.0, -2.0, 0.5};
  Pd p = make_param("w", {0.0, 0.0, 0.0});
  AdamState<double> st;
  for (int s = 0; s < 2000; ++s) {
    for (std::size_t i = 0; i < 3; ++i) p.grad[i] = 2.0 * (p.value[i] - target[i]);
    step({&p}, st, 0.05 * (1.0 - s / 2000.0) + 1e-4, {0.9, 0.999, 1e-8, 0.0});
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p.value[i], target[i], 1e-3);
}

TEST(AdamW, GradientShapeMismatchIsUsageError) {
  Pd p = make_param("w", {1.0, 2.0});
  p.grad = Tensor<double>({3});
  AdamState<double> st;
  EXPECT_THROW(step({&p}, st, 0.1, {}), UsageError);
}

TEST(LrSchedule, WarmupThenCosineToFloor) {
  const double base = 1e-3;
  EXPECT_DOUBLE_EQ(lr_schedule(0, 100, 10, base), 0.0);
  EXPECT_DOUBLE_EQ(lr_schedule(5, 100, 10, base), 0.5 * base);
  EXPECT_DOUBLE_EQ(lr_schedule(10, 100, 10, base), base);
  EXPECT_DOUBLE_EQ(lr_schedule(55, 100, 10, base), base / 100 + 0.5 * (base - base / 100));
  EXPECT_DOUBLE_EQ(lr_schedule(100, 100, 10, base), base / 100);
  double prev = base;
  for (std::size_t s = 11; s < 100; ++s) {
    const double lr = lr_schedule(s, 100, 10, base);
    EXPECT_LT(lr, prev);
    EXPECT_GT(lr, base / 100);
    prev = lr;
  }
}

TEST(LrSchedule, NoWarmupStartsAtBase) { EXPECT_DOUBLE_EQ(lr_schedule(0, 50, 0, 2e-3), 2e-3); }

TEST(LrSchedule, WarmupNotShorterThanRunIsConfigError) {
  EXPECT_THROW(lr_schedule(0, 10, 10, 1e-3), ConfigError);
}

}  // namespace
}  // namespace femae
