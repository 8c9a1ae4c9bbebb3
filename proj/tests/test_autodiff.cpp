#include <gtest/gtest.h>

#include <random>

#include "femae/autodiff.hpp"

namespace femae {
namespace {

using Td = Tensor<double>;

Td random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Td t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

Parameter<double> param(std::string name, Td v) { return Parameter<double>(std::move(name), std::move(v)); }

TEST(AutodiffForward, MatmulIdentity) {
  Graph<float> g;
  auto a = g.constant(Tensor<float>::matrix({{1, 2}, {3, 4}}));
  auto i = g.constant(Tensor<float>::matrix({{1, 0}, {0, 1}}));
  EXPECT_EQ(matmul(a, i).value(), Tensor<float>::matrix({{1, 2}, {3, 4}}));
}

TEST(AutodiffForward, SoftmaxSymmetric) {
  Graph<double> g;
  auto y = softmax_lastaxis(g.constant(Td::vector({0.0, 0.0})));
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(AutodiffForward, MaxOverAxisRecordsArgmax) {
  Graph<double> g;
  auto y = max_over_axis(g.constant(Td::matrix({{1, 5}, {7, 2}})), 0);
  EXPECT_EQ(y.value(), Td::vector({7, 5}));
  EXPECT_EQ(g.node(y.id).saved_indices, (std::vector<std::size_t>{1, 0}));
}

TEST(AutodiffForward, MaxTieRoutesToFirstIndex) {
  Graph<double> g;
  auto x = g.input(Td::vector({3, 3, 1}));
  auto y = max_over_axis(x, 0);
  g.backward(y);
  EXPECT_EQ(g.grad(x), Td::vector({1, 0, 0}));
}

TEST(AutodiffForward, ShapeMismatchIsConfigError) {
  Graph<double> g;
  auto a = g.constant(Td({2, 3}));
  auto b = g.constant(Td({2, 3}));
  EXPECT_THROW(matmul(a, b), ConfigError);
  EXPECT_THROW(add(a, g.constant(Td({3, 2}))), ConfigError);
}

TEST(AutodiffForward, NonFiniteOutputIsNumericError) {
  Graph<double> g;
  auto a = g.constant(Td::vector({1e300}));
  try {
    mul(a, a);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("mul"), std::string::npos);
  }
}

TEST(AutodiffBackward, SumGradientIsOnes) {
  Graph<double> g;
  auto x = g.input(Td::vector({1, 2, 3}));
  g.backward(sum(x));
  EXPECT_EQ(g.grad(x), Td::vector({1, 1, 1}));
}

TEST(AutodiffBackward, SquareGradient) {
  Graph<double> g;
  auto x = g.input(Td::vector({1, 2}));
  g.backward(sum(mul(x, x)));
  EXPECT_EQ(g.grad(x), Td::vector({2, 4}));
}

TEST(AutodiffBackward, NonScalarSinkIsUsageError) {
  Graph<double> g;
  auto x = g.input(Td::vector({1, 2}));
  EXPECT_THROW(g.backward(x), UsageError);
}

TEST(AutodiffBackward, FanOutAccumulatesPerPathGradients) {
  // f(x) = sum(x * w) + sum(x * x): df/dx = w + 2x, the sum of both paths.
  std::mt19937_64 rng(7);
  Td xv = random_tensor({4}, rng), wv = random_tensor({4}, rng);
  Graph<double> g;
  auto x = g.input(xv);
  auto w = g.constant(wv);
  g.backward(add(sum(mul(x, w)), sum(mul(x, x))));
  auto gx = g.grad(x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(gx[i], wv[i] + 2 * xv[i], 1e-12);

  // Duplicated input: gather the same row twice equals doubling it.
  Graph<double> h;
  auto y = h.input(Td::matrix({{1, 2}}));
  h.backward(sum(gather_rows(y, {0, 0})));
  EXPECT_EQ(h.grad(y), Td::matrix({{2, 2}}));
}

TEST(AutodiffBackward, ParameterGradientsAccumulateAcrossGraphs) {
  auto p = param("w", Td::vector({1.0, -2.0}));
  for (int i = 0; i < 2; ++i) {
    Graph<double> g;
    g.backward(sum(g.param(p)));
  }
  EXPECT_EQ(p.grad, Td::vector({2, 2}));
}

TEST(AutodiffBackward, FrozenParameterGetsNoGradient) {
  auto p = param("w", Td::vector({1.0, -2.0}));
  p.trainable = false;
  Graph<double> g;
  auto x = g.input(Td::vector({3.0, 4.0}));
  g.backward(sum(mul(g.param(p), x)));
  EXPECT_EQ(p.grad, Td::vector({0, 0}));
  EXPECT_EQ(g.grad(x), Td::vector({1, -2}));
}

TEST(AutodiffDeterminism, ForwardIsBitwiseReproducible) {
  std::mt19937_64 rng(3);
  Td a = random_tensor({7, 5}, rng), b = random_tensor({5, 9}, rng);
  auto run = [&] {
    Graph<float> g;
    return softmax_lastaxis(matmul(g.constant(a.cast<float>()), g.constant(b.cast<float>()))).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, ConstantProgramHasZeroError) {
  auto p = param("x", Td::vector({0.3, -0.1}));
  auto err = grad_check<double>([](Graph<double>& g) { return g.constant(Td::vector({2.0})); }, {&p});
  EXPECT_EQ(err, 0.0);
}

TEST(GradCheck, LayerNorm4x8) {
  std::mt19937_64 rng(11);
  auto x = param("x", random_tensor({4, 8}, rng));
  auto gain = param("g", random_tensor({8}, rng, 0.5, 1.5));
  auto bias = param("b", random_tensor({8}, rng));
  auto w = random_tensor({4, 8}, rng);
  auto err = grad_check<double>(
      [&](Graph<double>& g) {
        return sum(mul(layer_norm(g.param(x), g.param(gain), g.param(bias)), g.constant(w)));
      },
      {&x, &gain, &bias});
  EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, SoftmaxOfMatmul) {
  std::mt19937_64 rng(12);
  auto a = param("a", random_tensor({3, 4}, rng));
  auto b = param("b", random_tensor({4, 5}, rng));
  auto w = random_tensor({3, 5}, rng);
  auto err = grad_check<double>(
      [&](Graph<double>& g) { return sum(mul(softmax_lastaxis(matmul(g.param(a), g.param(b))), g.constant(w))); },
      {&a, &b});
  EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, RandomFiveOpGraph) {
  std::mt19937_64 rng(13);
  auto a = param("a", random_tensor({3, 4}, rng));
  auto b = param("b", random_tensor({4, 4}, rng));
  auto err = grad_check<double>(
      [&](Graph<double>& g) {
        auto x = matmul(g.param(a), g.param(b));
        auto y = gelu(sub(x, scale(g.param(a), 0.5)));
        return sum(mul(y, softmax_lastaxis(y)));
      },
      {&a, &b});
  EXPECT_LT(err, 1e-4);
}

// Every primitive, 20 random shapes/seeds each.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, MatchCentralDifferences) {
  const int seed = GetParam();
  std::mt19937_64 rng(1000 + seed);
  std::uniform_int_distribution<std::size_t> ext(1, 5);
  const std::size_t r = ext(rng), c = ext(rng), k = ext(rng);
  auto a = param("a", random_tensor({r, c}, rng));
  auto b = param("b", random_tensor({r, c}, rng));
  auto m = param("m", random_tensor({c, k}, rng));
  auto row = param("row", random_tensor({c}, rng));
  auto gain = param("gain", random_tensor({c}, rng, 0.5, 1.5));
  Td wrc = random_tensor({r, c}, rng), wrk = random_tensor({r, k}, rng), wcr = random_tensor({c, r}, rng);
  Td w2 = random_tensor({r, 2 * c}, rng), wc = random_tensor({c}, rng), wr = random_tensor({r}, rng);

  using Prog = std::function<Var<double>(Graph<double>&)>;
  auto proj = [](Var<double> y, const Td& w) { return sum(mul(y, y.graph->constant(w))); };
  std::vector<std::pair<std::string, Prog>> programs = {
      {"matmul", [&](Graph<double>& g) { return proj(matmul(g.param(a), g.param(m)), wrk); }},
      {"add", [&](Graph<double>& g) { return proj(add(g.param(a), g.param(b)), wrc); }},
      {"sub", [&](Graph<double>& g) { return proj(sub(g.param(a), g.param(b)), wrc); }},
      {"mul", [&](Graph<double>& g) { return proj(mul(g.param(a), g.param(b)), wrc); }},
      {"scale", [&](Graph<double>& g) { return proj(scale(g.param(a), 1.7), wrc); }},
      {"concat", [&](Graph<double>& g) { return proj(concat<double>({g.param(a), g.param(b)}, 1), w2); }},
      {"slice", [&](Graph<double>& g) { return proj(slice(concat<double>({g.param(a), g.param(b)}, 1), 1, c, c), wrc); }},
      {"reshape", [&](Graph<double>& g) { return proj(reshape(g.param(a), {r * c}), wrc.reshaped({r * c})); }},
      {"transpose", [&](Graph<double>& g) { return proj(transpose(g.param(a)), wcr); }},
      {"gather_rows", [&](Graph<double>& g) {
         std::vector<std::size_t> idx;
         for (std::size_t i = 0; i < r; ++i) idx.push_back((i * 7 + 3) % r);
         return proj(gather_rows(g.param(a), idx), wrc);
       }},
      {"softmax", [&](Graph<double>& g) { return proj(softmax_lastaxis(g.param(a)), wrc); }},
      {"layer_norm", [&](Graph<double>& g) {
         return proj(layer_norm(g.param(a), g.param(gain), g.param(row)), wrc);
       }},
      {"gelu", [&](Graph<double>& g) { return proj(gelu(g.param(a)), wrc); }},
      {"relu", [&](Graph<double>& g) { return proj(relu(g.param(a)), wrc); }},
      {"max_over_axis", [&](Graph<double>& g) { return proj(max_over_axis(g.param(a), 0), wc); }},
      {"mean_over_axis", [&](Graph<double>& g) { return proj(mean_over_axis(g.param(a), 1), wr); }},
      {"sum", [&](Graph<double>& g) { return sum(g.param(a)); }},
      {"broadcast", [&](Graph<double>& g) { return proj(broadcast(g.param(row), {r, c}), wrc); }},
  };
  std::vector<Parameter<double>*> inputs = {&a, &b, &m, &row, &gain};
  for (const auto& [name, prog] : programs) {
    const double err = grad_check<double>(prog, std::span<Parameter<double>* const>(inputs));
    EXPECT_LT(err, 1e-4) << name << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(TwentySeeds, PrimitiveGradients, ::testing::Range(0, 20));

}  // namespace
}  // namespace femae
