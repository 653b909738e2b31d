#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "otafed/model.hpp"

using namespace otafed;

namespace {

MlpArch arch_of(std::vector<std::size_t> sizes, Activation a = Activation::tanh) { return {std::move(sizes), a}; }

std::vector<std::size_t> random_labels(std::size_t n, std::size_t classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, classes - 1);
  std::vector<std::size_t> y(n);
  for (auto& v : y) v = pick(rng);
  return y;
}

}  // namespace

TEST(MlpArch, ParamCount) {
  EXPECT_EQ(arch_of({2, 3}).param_count(), 9u);
  EXPECT_EQ(arch_of({784, 100, 10}).param_count(), 79510u);
  EXPECT_EQ(arch_of({784, 32, 10}).param_count(), 25450u);
  EXPECT_THROW(arch_of({5}).validate(), std::invalid_argument);
  EXPECT_THROW(arch_of({5, 0, 2}).validate(), std::invalid_argument);
}

TEST(InitParams, ShapeBiasesAndDeterminism) {
  const auto p = init_params(arch_of({2, 3}), 7);
  ASSERT_EQ(p.size(), 9u);
  EXPECT_EQ(p[6], 0.0);
  EXPECT_EQ(p[7], 0.0);
  EXPECT_EQ(p[8], 0.0);
  EXPECT_EQ(init_params(arch_of({784, 100, 10}), 3).size(), 79510u);
  EXPECT_EQ(init_params(arch_of({4, 5, 3}), 11), init_params(arch_of({4, 5, 3}), 11));
  EXPECT_NE(init_params(arch_of({4, 5, 3}), 11), init_params(arch_of({4, 5, 3}), 12));
}

TEST(InitParams, FanInScaling) {
  const auto arch = arch_of({400, 300});
  const auto p = init_params(arch, 5);
  double sq = 0.0;
  for (std::size_t i = 0; i < 400 * 300; ++i) sq += p[i] * p[i];
  // Var = 1/fan_in
  EXPECT_NEAR(sq / (400.0 * 300.0), 1.0 / 400.0, 0.05 / 400.0);
}

TEST(Forward, ZeroParamsGiveZeroLogits) {
  const auto arch = arch_of({3, 4, 2});
  std::mt19937_64 rng(1);
  const Matrix x = oracle::random_matrix(5, 3, rng);
  const Logits z = forward(ParamVector(arch.param_count(), 0.0), arch, x);
  for (double v : z.data) EXPECT_EQ(v, 0.0);
}

TEST(Forward, IdentityLayer) {
  const auto arch = arch_of({2, 2});
  const ParamVector p{1, 0, 0, 1, 0, 0};
  const Logits z = forward(p, arch, Matrix(1, 2, {1.0, 2.0}));
  EXPECT_EQ(z(0, 0), 1.0);
  EXPECT_EQ(z(0, 1), 2.0);
}

TEST(Forward, MatchesNaiveOracle) {
  std::mt19937_64 rng(2);
  for (Activation act : {Activation::tanh, Activation::relu}) {
    const auto arch = arch_of({6, 7, 5, 3}, act);
    const auto p = oracle::random_vector(arch.param_count(), rng, 0.7);
    const Matrix x = oracle::random_matrix(9, 6, rng);
    const Logits z = forward(p, arch, x);
    for (std::size_t r = 0; r < x.rows; ++r) {
      std::vector<double> xr(x.row(r).begin(), x.row(r).end());
      const auto ref = oracle::forward_one(p, arch.layer_sizes, act == Activation::relu, xr);
      for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(z(r, c), ref[c], 1e-12);
    }
  }
}

TEST(Forward, PureAndDimensionChecked) {
  std::mt19937_64 rng(3);
  const auto arch = arch_of({4, 5, 3});
  const auto p = oracle::random_vector(arch.param_count(), rng);
  const Matrix x = oracle::random_matrix(8, 4, rng);
  EXPECT_EQ(forward(p, arch, x), forward(p, arch, x));
  EXPECT_THROW(forward(p, arch, Matrix(2, 3)), std::invalid_argument);
  EXPECT_THROW(forward(ParamVector(3), arch, x), std::invalid_argument);
}

TEST(CrossEntropy, KnownValues) {
  const std::vector<std::size_t> y0{0};
  EXPECT_NEAR(cross_entropy(Matrix(1, 2, {0.0, 0.0}), y0), std::log(2.0), 1e-15);
  EXPECT_NEAR(cross_entropy(Matrix(1, 2, {100.0, 0.0}), y0), 0.0, 1e-40);
  const std::vector<std::size_t> y3{3};
  EXPECT_NEAR(cross_entropy(Matrix(1, 4, {0, 0, 0, 0}), y3), std::log(4.0), 1e-15);
  EXPECT_THROW(cross_entropy(Matrix(1, 2, {0.0, 0.0}), std::vector<std::size_t>{2}), std::out_of_range);
  EXPECT_THROW(cross_entropy(Matrix(2, 2), y0), std::invalid_argument);
}

TEST(CrossEntropy, FiniteForExtremeLogits) {
  const std::vector<std::size_t> y{1, 0};
  const double v = cross_entropy(Matrix(2, 2, {1e300, -1e300, -1e300, 1e300}), y);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_TRUE(std::isfinite(cross_entropy(Matrix(1, 2, {-800.0, 800.0}), std::vector<std::size_t>{1})));
}

TEST(LossAndGrad, MatchesCentralDifferences) {
  std::mt19937_64 rng(4);
  const auto arch = arch_of({4, 5, 3});
  const auto p = oracle::random_vector(arch.param_count(), rng, 0.8);
  const Matrix x = oracle::random_matrix(6, 4, rng);
  const auto y = random_labels(6, 3, rng);
  const auto [loss, grad] = loss_and_grad(p, arch, x, y);
  const auto xs = oracle::to_rows(x);
  EXPECT_NEAR(loss, oracle::mean_loss(p, arch.layer_sizes, false, xs, y), 1e-13);
  const auto fd = oracle::central_differences(
      [&](const std::vector<double>& q) { return oracle::mean_loss(q, arch.layer_sizes, false, xs, y); }, p, 1e-6);
  EXPECT_LT(oracle::max_relative_error(grad, fd, 1e-4), 1e-5);
}

// Property: random tanh architectures with d <= 200.
TEST(LossAndGrad, FiniteDifferenceProperty) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> width(1, 6);
  std::uniform_int_distribution<std::size_t> depth(1, 3);
  int checked = 0;
  while (checked < 25) {
    std::vector<std::size_t> sizes{width(rng)};
    for (std::size_t l = 0, n = depth(rng); l < n; ++l) sizes.push_back(width(rng));
    sizes.push_back(width(rng) + 1);
    const auto arch = arch_of(sizes);
    if (arch.param_count() > 200) continue;
    const auto p = oracle::random_vector(arch.param_count(), rng, 0.8);
    const std::size_t b = depth(rng) + 1;
    const Matrix x = oracle::random_matrix(b, sizes.front(), rng);
    const auto y = random_labels(b, sizes.back(), rng);
    const auto grad = loss_and_grad(p, arch, x, y).second;
    const auto xs = oracle::to_rows(x);
    const auto fd = oracle::central_differences(
        [&](const std::vector<double>& q) { return oracle::mean_loss(q, sizes, false, xs, y); }, p, 1e-6);
    EXPECT_LT(oracle::max_relative_error(grad, fd, 1e-4), 1e-5) << "arch with d=" << arch.param_count();
    for (double g : grad) ASSERT_TRUE(std::isfinite(g));
    ++checked;
  }
}

TEST(LossAndGrad, BalancedUniformOutputBiasGradientIsZero) {
  const auto arch = arch_of({3, 4, 2});
  std::mt19937_64 rng(6);
  const Matrix x = oracle::random_matrix(2, 3, rng);
  const std::vector<std::size_t> y{0, 1};
  const auto grad = loss_and_grad(ParamVector(arch.param_count(), 0.0), arch, x, y).second;
  const std::size_t bias = arch.layer_offset(1) + 4 * 2;
  EXPECT_EQ(grad[bias], 0.0);
  EXPECT_EQ(grad[bias + 1], 0.0);
}

TEST(LossAndGrad, TwoBatchIsMeanOfSingles) {
  std::mt19937_64 rng(7);
  const auto arch = arch_of({3, 4, 3});
  const auto p = oracle::random_vector(arch.param_count(), rng);
  const Matrix x = oracle::random_matrix(2, 3, rng);
  const std::vector<std::size_t> y{2, 0};
  const auto both = loss_and_grad(p, arch, x, y).second;
  const auto g0 = loss_and_grad(p, arch, Matrix(1, 3, {x(0, 0), x(0, 1), x(0, 2)}), std::vector<std::size_t>{2}).second;
  const auto g1 = loss_and_grad(p, arch, Matrix(1, 3, {x(1, 0), x(1, 1), x(1, 2)}), std::vector<std::size_t>{0}).second;
  for (std::size_t i = 0; i < both.size(); ++i) EXPECT_NEAR(both[i], 0.5 * (g0[i] + g1[i]), 1e-15);
}

TEST(LossAndGrad, Errors) {
  const auto arch = arch_of({2, 2});
  const ParamVector p(arch.param_count(), 0.0);
  EXPECT_THROW(loss_and_grad(p, arch, Matrix(1, 3), std::vector<std::size_t>{0}), std::invalid_argument);
  EXPECT_THROW(loss_and_grad(p, arch, Matrix(1, 2), std::vector<std::size_t>{5}), std::out_of_range);
  EXPECT_THROW(loss_and_grad(p, arch, Matrix(2, 2), std::vector<std::size_t>{0}), std::invalid_argument);
}

TEST(SampleLabels, SaturatedAndDeterministic) {
  Rng rng(1);
  const auto y = sample_labels(Matrix(3, 2, {50, -50, 50, -50, 50, -50}), rng);
  for (auto v : y) EXPECT_EQ(v, 0u);
  Rng a(9), b(9);
  const Logits z(20, 3, std::vector<double>(60, 0.3));
  EXPECT_EQ(sample_labels(z, a), sample_labels(z, b));
}

TEST(SampleLabels, UniformFrequencyMonteCarlo) {
  Rng rng(10);
  const Logits z(100000, 2, std::vector<double>(200000, 0.0));
  const auto y = sample_labels(z, rng);
  const double f0 = static_cast<double>(std::count(y.begin(), y.end(), 0u)) / 100000.0;
  EXPECT_GE(f0, 0.49);
  EXPECT_LE(f0, 0.51);
}

TEST(Gnb, FormulaArithmetic) {
  const auto h = gnb_from_gradient(std::vector<double>{0.1, -0.2}, 4);
  EXPECT_NEAR(h[0], 0.04, 1e-17);
  EXPECT_NEAR(h[1], 0.16, 1e-16);
  EXPECT_EQ(gnb_from_gradient(std::vector<double>(5, 0.0), 8), ParamVector(5, 0.0));
}

TEST(Gnb, SaturatedLogitsGiveZeroEstimate) {
  // Single linear layer with logits (50, -50) for every input.
  const auto arch = arch_of({1, 2});
  const ParamVector p{0.0, 0.0, 50.0, -50.0};
  Rng rng(3);
  const auto h = gnb_diag_hessian(p, arch, Matrix(4, 1, {1, 2, 3, 4}), rng);
  for (double v : h) EXPECT_LE(v, 1e-80);
}

TEST(Gnb, NonNegativeProperty) {
  std::mt19937_64 gen(11);
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const auto arch = arch_of({5, 6, 4});
    const auto p = oracle::random_vector(arch.param_count(), gen, 1.5);
    const auto h = gnb_diag_hessian(p, arch, oracle::random_matrix(7, 5, gen), rng);
    ASSERT_EQ(h.size(), arch.param_count());
    for (double v : h) ASSERT_GE(v, 0.0);
  }
  EXPECT_THROW(gnb_diag_hessian(ParamVector(arch_of({2, 2}).param_count()), arch_of({2, 2}), Matrix(0, 2), rng),
               std::invalid_argument);
}

TEST(Gnb, MeanMatchesExactGaussNewtonDiagonal) {
  constexpr std::size_t in = 4, classes = 2, batch = 8;
  const auto arch = arch_of({in, classes});
  std::mt19937_64 gen(13);
  const auto p = oracle::random_vector(arch.param_count(), gen, 0.5);
  const Matrix x = oracle::random_matrix(batch, in, gen);
  const auto exact = oracle::gauss_newton_diag_linear(p, in, classes, oracle::to_rows(x));

  Rng rng(14);
  std::vector<double> mean(arch.param_count(), 0.0);
  constexpr int draws = 10000;
  for (int t = 0; t < draws; ++t) {
    const auto h = gnb_diag_hessian(p, arch, x, rng);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += h[i] / draws;
  }
  for (std::size_t i = 0; i < mean.size(); ++i)
    EXPECT_LT(std::abs(mean[i] - exact[i]) / exact[i], 0.05) << "coordinate " << i;
}
