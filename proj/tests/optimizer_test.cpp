#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "otafed/optimizer.hpp"

using namespace otafed;

TEST(EmaMoment, Formula) {
  const auto m = ema_moment(ParamVector(3, 0.0), ParamVector(3, 1.0), 0.9);
  for (double v : m) EXPECT_NEAR(v, 0.1, 1e-16);
  const ParamVector g{0.3, -2.0};
  EXPECT_EQ(ema_moment(ParamVector{5.0, 7.0}, g, 0.0), g);
  EXPECT_THROW(ema_moment(ParamVector(2), ParamVector(3), 0.5), std::invalid_argument);
}

TEST(EmaMoment, GeometricSeriesAndFixedPoint) {
  ParamVector m(1, 0.0);
  const ParamVector c{2.5};
  for (int k = 1; k <= 30; ++k) {
    m = ema_moment(m, c, 0.9);
    EXPECT_NEAR(m[0], 2.5 * (1.0 - std::pow(0.9, k)), 1e-13);
  }
  EXPECT_NEAR(ema_moment(c, c, 0.9)[0], 2.5, 1e-15);
}

TEST(EmaMoment, RangeProperty) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-0.7, 1.3);
  ParamVector m(50);
  for (double& v : m) v = u(rng);
  for (int k = 0; k < 200; ++k) {
    ParamVector g(50);
    for (double& v : g) v = u(rng);
    m = ema_moment(m, g, 0.9);
    for (double v : m) {
      ASSERT_GE(v, -0.7);
      ASSERT_LE(v, 1.3);
    }
  }
}

TEST(EmaHessian, OffRefreshRoundsKeepPrevious) {
  EmaState st{ParamVector(3, 0.0), ParamVector{0.1, 0.2, 0.3}, 0};
  const ParamVector hhat{9.0, 9.0, 9.0};
  const auto out = ema_hessian(st, hhat, 0.99, 3, 2);
  EXPECT_EQ(out, st.h);
}

TEST(EmaHessian, RefreshRounds) {
  EmaState st{ParamVector(1, 0.0), ParamVector{1.0}, -1};
  EXPECT_NEAR(ema_hessian(st, ParamVector{0.0}, 0.99, 0, 10)[0], 0.99, 1e-16);
  for (std::int64_t k = 0; k < 5; ++k)
    EXPECT_NE(ema_hessian(st, ParamVector{0.0}, 0.5, k, 1)[0], 1.0) << "tau = 1 refreshes every round";
  EXPECT_THROW(ema_hessian(st, ParamVector{0.0}, 0.5, 0, 0), std::invalid_argument);
  EXPECT_THROW(ema_hessian(st, ParamVector(2), 0.5, 0, 1), std::invalid_argument);
}

TEST(EmaHessian, NonNegativeFromZeroProperty) {
  std::mt19937_64 rng(2);
  std::exponential_distribution<double> e(3.0);
  EmaState st = EmaState::zeros(40);
  for (std::int64_t k = 0; k < 100; ++k) {
    ParamVector hhat(40);
    for (double& v : hhat) v = e(rng);
    const auto next = ema_hessian(st, hhat, 0.99, k, 3);
    if (k % 3 != 0) ASSERT_EQ(next, st.h);
    st.h = next;
    for (double v : st.h) ASSERT_GE(v, 0.0);
  }
}

TEST(Clip, DefinitionIdentityIdempotence) {
  const auto c = clip_elementwise(ParamVector{0.5, 2.0, -3.0}, 1.0);
  EXPECT_EQ(c, (ParamVector{0.5, 1.0, -1.0}));
  const ParamVector inside{0.2, -0.9, 1.0, -1.0};
  EXPECT_EQ(clip_elementwise(inside, 1.0), inside);
  std::mt19937_64 rng(3);
  const auto z = oracle::random_vector(100, rng, 4.0);
  const auto once = clip_elementwise(z, 1.5);
  EXPECT_EQ(clip_elementwise(once, 1.5), once);
  for (double v : once) EXPECT_LE(std::abs(v), 1.5);
  EXPECT_THROW(clip_elementwise(z, 0.0), std::invalid_argument);
}

TEST(SophiaDirection, Examples) {
  EXPECT_DOUBLE_EQ(sophia_direction(ParamVector{0.5}, ParamVector{100.0}, 0.01, 1e-12)[0], 0.5);
  EXPECT_EQ(sophia_direction(ParamVector{0.3}, ParamVector{-2.0}, 0.01, 1e-12)[0], 1.0);
  EXPECT_EQ(sophia_direction(ParamVector{-0.3}, ParamVector{0.0}, 0.01, 1e-12)[0], -1.0);
  EXPECT_EQ(sophia_direction(ParamVector{0.0}, ParamVector{5.0}, 0.01, 1e-12)[0], 0.0);
  EXPECT_THROW(sophia_direction(ParamVector(2), ParamVector(3), 0.01, 1e-12), std::invalid_argument);
}

// Step bound and sign fallback over random inputs.
TEST(SophiaDirection, BoundAndSignFallbackProperty) {
  std::mt19937_64 rng(4);
  const double gamma = 0.01, eps = 1e-12, eta = 1e-3;
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = oracle::random_vector(64, rng, std::pow(10.0, trial % 7 - 4));
    auto h = oracle::random_vector(64, rng, std::pow(10.0, trial % 5 - 2));
    for (std::size_t i = 0; i < h.size(); i += 4) h[i] = -std::abs(h[i]);
    const auto dir = sophia_direction(m, h, gamma, eps);
    for (std::size_t i = 0; i < dir.size(); ++i) {
      ASSERT_LE(std::abs(eta * dir[i]), eta);
      if (std::max(gamma * h[i], eps) == eps && std::abs(m[i]) >= eps) ASSERT_EQ(dir[i], m[i] > 0 ? 1.0 : -1.0);
    }
  }
}

TEST(ApplyStep, Examples) {
  const ParamVector theta{1.0, 1.0};
  EXPECT_EQ(apply_step(theta, ParamVector{1.0, -1.0}, 0.0), theta);
  const auto out = apply_step(theta, ParamVector{1.0, -1.0}, 0.1);
  EXPECT_DOUBLE_EQ(out[0], 0.9);
  EXPECT_DOUBLE_EQ(out[1], 1.1);
  std::mt19937_64 rng(5);
  const auto t = oracle::random_vector(30, rng);
  const auto dir = sophia_direction(oracle::random_vector(30, rng), oracle::random_vector(30, rng), 0.01, 1e-12);
  const auto next = apply_step(t, dir, 1e-3);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_LE(std::abs(next[i] - t[i]), 1e-3 * (1.0 + 1e-12));
  EXPECT_THROW(apply_step(theta, ParamVector(3), 0.1), std::invalid_argument);
}

TEST(FedProxGrad, Examples) {
  const ParamVector g{0.4, -0.1};
  const ParamVector theta{2.0, 3.0};
  const ParamVector global{1.0, 5.0};
  EXPECT_EQ(fedprox_grad(g, theta, global, 0.0), g);
  EXPECT_EQ(fedprox_grad(g, theta, theta, 0.5), g);
  const auto v = fedprox_grad(ParamVector{0.0, 0.0}, ParamVector{1.0, -2.0}, ParamVector{0.0, 0.0}, 0.01);
  EXPECT_DOUBLE_EQ(v[0], 0.01);
  EXPECT_DOUBLE_EQ(v[1], -0.02);
  EXPECT_THROW(fedprox_grad(g, theta, ParamVector(3), 0.1), std::invalid_argument);
  EXPECT_THROW(fedprox_grad(g, theta, global, -1.0), std::invalid_argument);
}

TEST(SophiaConfig, Validation) {
  SophiaConfig c;
  EXPECT_NO_THROW(c.validate());
  c.tau = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.beta1 = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
