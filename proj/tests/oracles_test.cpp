#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <vector>

#include "impdiff/core.hpp"
#include "impdiff/estimators.hpp"
#include "impdiff/oracles.hpp"
#include "impdiff/potentials.hpp"

using namespace impdiff;

namespace {

std::array<double, 4> mat_mul(const std::array<double, 4>& x,
                              const std::array<double, 4>& y) {
  return {x[0] * y[0] + x[1] * y[2], x[0] * y[1] + x[1] * y[3],
          x[2] * y[0] + x[3] * y[2], x[2] * y[1] + x[3] * y[3]};
}

// plain Taylor series, good for ||tA|| of order one
std::array<double, 4> expm_taylor(std::array<double, 4> a, double t) {
  for (double& v : a) v *= t;
  std::array<double, 4> out = {1, 0, 0, 1}, term = {1, 0, 0, 1};
  for (int k = 1; k <= 40; ++k) {
    term = mat_mul(term, a);
    for (double& v : term) v /= double(k);
    for (int j = 0; j < 4; ++j) out[j] += term[j];
  }
  return out;
}

RewardSpec first_coordinate_reward() {
  RewardSpec r;
  r.eval = [](const double* x, int) { return x[0]; };
  return r;
}

}  // namespace

TEST(QuadratureLoss, GaussianLinearRewardClosedForm) {
  QuadraticPotential pot(1);
  ObjectiveSpec obj;
  obj.lambda = 1.0;
  obj.reward = first_coordinate_reward();
  // pi*(theta) = N(theta, 1), so the loss -E[X] is exactly -theta
  EXPECT_NEAR(quadrature_loss(pot, {0.4}, obj), -0.4, 1e-8);
  EXPECT_NEAR(quadrature_loss(pot, {-1.2}, obj), 1.2, 1e-8);
  auto loss = [&](const ParamVector& t) { return quadrature_loss(pot, t, obj); };
  ParamVector fd = finite_difference_grad(loss, {0.4}, 1e-4);
  EXPECT_NEAR(fd[0], -1.0, 1e-7);
}

TEST(QuadratureLoss, BetaTermIsReferenceKl) {
  QuadraticPotential pot(1);
  StationaryGrid ref = stationary_quadrature(pot, {1.0});
  ObjectiveSpec obj;
  obj.lambda = 0.0;
  obj.beta = 2.0;
  EXPECT_NEAR(quadrature_loss(pot, {1.0}, obj, &ref.grid), 0.0, 1e-8);
  // 2 KL(N(1,1) || N(1.5,1)) = 2 (0.5^2 / 2)
  EXPECT_NEAR(quadrature_loss(pot, {1.5}, obj, &ref.grid), 0.25, 1e-8);
  EXPECT_THROW(quadrature_loss(pot, {1.0}, obj), std::invalid_argument);
}

TEST(QuadratureLoss, SelfCheckCatchesCoarseGrids) {
  MixturePotential pot = hexagon_mixture(2.0, WeightMap::kSoftmax);
  ParamVector th = {1, 0, 1, 0, 1, 0};
  ObjectiveSpec smooth;
  smooth.lambda = 1.0;
  smooth.reward = smoothed_gaussian_reward({1.0, 0.95}, 0.1);
  EXPECT_NO_THROW(quadrature_loss(pot, th, smooth, nullptr, {-6, -6}, {6, 6}, 301, true));
  EXPECT_THROW(quadrature_loss(pot, th, smooth, nullptr, {-6, -6}, {6, 6}, 5, true),
               std::runtime_error);
  // the hard indicator converges too slowly for the doubling gate at this resolution
  ObjectiveSpec jump;
  jump.lambda = 1.0;
  jump.reward = indicator_gaussian_reward();
  EXPECT_THROW(quadrature_loss(pot, th, jump, nullptr, {-6, -6}, {6, 6}, 301, true),
               std::runtime_error);
  QuadraticPotential threed(3);
  EXPECT_THROW(quadrature_loss(threed, {0, 0, 0}, jump), std::invalid_argument);
}

TEST(FiniteDifferenceGrad, SmoothFunctionAndRichardsonGate) {
  auto f = [](const ParamVector& t) { return std::sin(t[0]) + t[1] * t[1]; };
  ParamVector g = finite_difference_grad(f, {0.3, -0.7}, 1e-5);
  EXPECT_NEAR(g[0], std::cos(0.3), 1e-8);
  EXPECT_NEAR(g[1], -1.4, 1e-8);
  EXPECT_NO_THROW(finite_difference_grad(f, {0.3, -0.7}, 1e-4, true));

  // kink inside the stencil: halving h moves the estimate a lot
  auto kink = [](const ParamVector& t) { return std::abs(t[0] - 0.03); };
  EXPECT_THROW(finite_difference_grad(kink, {0.0}, 0.1, true), std::runtime_error);

  auto partial = [](const ParamVector& t) { return std::log(t[0]); };
  EXPECT_THROW(finite_difference_grad(partial, {1e-6}, 1e-4), std::runtime_error);
  EXPECT_THROW(finite_difference_grad(f, {0.0, 0.0}, 0.0), std::invalid_argument);
}

TEST(Example1Moments, RecursionEndpointsAndPinnedValue) {
  // s = 0 returns the initial law
  Moments m0 = example1_moments(0, 0.1, 0.0, 3.0, 4.0);
  EXPECT_DOUBLE_EQ(m0.mean, 3.0);
  EXPECT_DOUBLE_EQ(m0.variance, 4.0);

  // N(theta, 1) is invariant
  for (long s : {1l, 10l, 1000l}) {
    Moments m = example1_moments(s, 0.2, -1.5, -1.5, 1.0);
    EXPECT_DOUBLE_EQ(m.mean, -1.5);
    EXPECT_DOUBLE_EQ(m.variance, 1.0);
  }

  // one-step recursion mean' = theta + a (mean - theta), var' = 1 + a^2 (var - 1)
  const double delta = 0.13, theta = 0.4, a = 1.0 - 2.0 * delta;
  for (long s = 0; s < 20; ++s) {
    Moments cur = example1_moments(s, delta, theta, 3.0, 4.0);
    Moments nxt = example1_moments(s + 1, delta, theta, 3.0, 4.0);
    EXPECT_NEAR(nxt.mean, theta + a * (cur.mean - theta), 1e-12);
    EXPECT_NEAR(nxt.variance, 1.0 + a * a * (cur.variance - 1.0), 1e-12);
  }

  Moments m5 = example1_moments(5, 0.1, 0.0, 3.0, 4.0);
  EXPECT_NEAR(m5.mean, 0.98304, 1e-9);
  EXPECT_NEAR(m5.variance, 1.3221225472, 1e-9);

  EXPECT_THROW(example1_moments(1, 0.0, 0, 0, 1), std::invalid_argument);
  EXPECT_THROW(example1_moments(1, 0.5, 0, 0, 1), std::invalid_argument);
  EXPECT_THROW(example1_moments(-1, 0.1, 0, 0, 1), std::invalid_argument);
  EXPECT_THROW(example1_moments(1, 0.1, 0, 0, -1.0), std::invalid_argument);
}

TEST(Expm2x2, KnownMatrixExponentials) {
  // diagonal
  std::array<double, 4> d = {0.3, 0.0, 0.0, -1.2};
  std::array<double, 4> ed = expm2x2(d, 0.7);
  EXPECT_NEAR(ed[0], std::exp(0.21), 1e-12);
  EXPECT_NEAR(ed[1], 0.0, 1e-12);
  EXPECT_NEAR(ed[2], 0.0, 1e-12);
  EXPECT_NEAR(ed[3], std::exp(-0.84), 1e-12);

  // rotation generator (complex eigenvalues branch)
  const double w = 1.1, t = 0.9;
  std::array<double, 4> rot = {0.0, -w, w, 0.0};
  std::array<double, 4> er = expm2x2(rot, t);
  EXPECT_NEAR(er[0], std::cos(w * t), 1e-12);
  EXPECT_NEAR(er[1], -std::sin(w * t), 1e-12);
  EXPECT_NEAR(er[2], std::sin(w * t), 1e-12);
  EXPECT_NEAR(er[3], std::cos(w * t), 1e-12);

  // nilpotent (repeated eigenvalue, series branch)
  std::array<double, 4> nil = {0.0, 1.0, 0.0, 0.0};
  std::array<double, 4> en = expm2x2(nil, 2.5);
  EXPECT_NEAR(en[0], 1.0, 1e-14);
  EXPECT_NEAR(en[1], 2.5, 1e-14);
  EXPECT_NEAR(en[2], 0.0, 1e-14);
  EXPECT_NEAR(en[3], 1.0, 1e-14);
}

TEST(Expm2x2, MatchesTaylorSeriesOnGenericMatrices) {
  std::vector<std::array<double, 4>> mats = {
      {0.2, -0.5, 0.3, -0.4}, {-1.0, 2.0, 0.7, 0.1}, {0.0, -0.9, 1.0, -2.0}};
  for (const auto& a : mats)
    for (double t : {0.3, 1.0, 1.7}) {
      std::array<double, 4> got = expm2x2(a, t);
      std::array<double, 4> want = expm_taylor(a, t);
      for (int j = 0; j < 4; ++j) EXPECT_NEAR(got[j], want[j], 1e-11);
    }
}

TEST(CoupledOdeSolution, ConstructionMatchesAffineSystem) {
  const double T = 3.0, eta = 1.0, th0 = 0.0, target = 1.0;
  CoupledOdeSolution sol = diffusion1d_theta_path(th0, target, eta, T);
  const double c = 1.0 - std::exp(-2.0 * T);
  EXPECT_DOUBLE_EQ(sol.a[0], 0.0);
  EXPECT_DOUBLE_EQ(sol.a[1], -2.0 * eta * c);
  EXPECT_DOUBLE_EQ(sol.a[2], 1.0);
  EXPECT_DOUBLE_EQ(sol.a[3], -2.0);
  EXPECT_DOUBLE_EQ(sol.b[0], eta * c * target);
  EXPECT_DOUBLE_EQ(sol.b[1], -th0 * std::exp(-2.0 * T));

  // A x* + b = 0
  for (int i = 0; i < 2; ++i)
    EXPECT_NEAR(sol.a[2 * i] * sol.fixed_point[0] + sol.a[2 * i + 1] * sol.fixed_point[1] +
                    sol.b[i],
                0.0, 1e-14);

  // the trajectory starts at the primed state
  std::array<double, 2> xT = sol.state(T);
  EXPECT_NEAR(xT[0], sol.xi_horizon[0], 1e-14);
  EXPECT_NEAR(xT[1], sol.xi_horizon[1], 1e-14);

  EXPECT_THROW(sol.state(T - 0.1), std::invalid_argument);
  EXPECT_THROW(sol.state(2 * T + 0.1), std::invalid_argument);
  EXPECT_THROW(diffusion1d_theta_path(0, 1, 0.0, T), std::invalid_argument);
  EXPECT_THROW(diffusion1d_theta_path(0, 1, 1.0, 0.0), std::invalid_argument);
}

TEST(CoupledOdeSolution, AgreesWithHeunIntegration) {
  for (double T : {2.0, 4.0}) {
    CoupledOdeSolution sol = diffusion1d_theta_path(0.3, 1.0, 0.8, T);
    for (double frac : {0.25, 0.6, 1.0}) {
      double t = T + frac * T;
      std::array<double, 2> exact = sol.state(t);
      std::array<double, 2> heun = integrate_theta_path_heun(sol, t, 40000);
      EXPECT_NEAR(exact[0], heun[0], 1e-6);
      EXPECT_NEAR(exact[1], heun[1], 1e-6);
    }
  }
  CoupledOdeSolution sol = diffusion1d_theta_path(0.0, 1.0, 1.0, 2.0);
  EXPECT_THROW(integrate_theta_path_heun(sol, 3.0, 0), std::invalid_argument);
  EXPECT_THROW(integrate_theta_path_heun(sol, 1.0, 10), std::invalid_argument);
}

TEST(CoupledOdeSolution, DerivativeSatisfiesTheOde) {
  CoupledOdeSolution sol = diffusion1d_theta_path(0.0, 1.0, 1.0, 3.0);
  const double h = 1e-6;
  for (double t : {3.5, 4.0, 5.5}) {
    std::array<double, 2> x = sol.state(t);
    std::array<double, 2> xp = sol.state(t + h), xm = sol.state(t - h);
    for (int i = 0; i < 2; ++i) {
      double lhs = (xp[i] - xm[i]) / (2.0 * h);
      double rhs = sol.a[2 * i] * x[0] + sol.a[2 * i + 1] * x[1] + sol.b[i];
      EXPECT_NEAR(lhs, rhs, 1e-7);
    }
  }
}

TEST(CoupledOdeSolution, PinnedTerminalValuesAndHorizonDecay) {
  // theta(2T) for theta0 = 0, target 1, eta 1; the residual |theta(2T) - 1|
  // shrinks roughly like e^{-0.7 T} in the horizon
  const double want[3] = {1.049398, 1.011995, 0.997620};
  double err[3];
  int i = 0;
  for (double T : {2.0, 4.0, 6.0}) {
    CoupledOdeSolution sol = diffusion1d_theta_path(0.0, 1.0, 1.0, T);
    double terminal = sol.theta(2.0 * T);
    EXPECT_NEAR(terminal, want[i], 1e-5);
    err[i] = std::abs(terminal - 1.0);
    ++i;
  }
  EXPECT_LE(err[2] / err[1], 0.3);
  double seg_slope = (std::log(err[2]) - std::log(err[1])) / 2.0;
  EXPECT_LE(seg_slope, -0.8);
  // least-squares slope of log err against T over all three horizons
  double xs[3] = {2, 4, 6}, xbar = 4, ybar = 0, num = 0, den = 0;
  for (int j = 0; j < 3; ++j) ybar += std::log(err[j]) / 3.0;
  for (int j = 0; j < 3; ++j) {
    num += (xs[j] - xbar) * (std::log(err[j]) - ybar);
    den += (xs[j] - xbar) * (xs[j] - xbar);
  }
  EXPECT_LE(num / den, -0.7);
}

TEST(AnalyticPathKl, ClosedFormScaling) {
  EXPECT_NEAR(analytic_path_kl_1d(1.0, 0.0, 3.0), 2.0 * (1.0 - std::exp(-6.0)), 1e-15);
  EXPECT_NEAR(analytic_path_kl_1d(3.0, 1.0, 2.0), 8.0 * (1.0 - std::exp(-4.0)), 1e-15);
  EXPECT_DOUBLE_EQ(analytic_path_kl_1d(0.7, 0.7, 5.0), 0.0);
  EXPECT_DOUBLE_EQ(analytic_path_kl_1d(1.0, 0.0, 3.0), analytic_path_kl_1d(0.0, 1.0, 3.0));
  EXPECT_THROW(analytic_path_kl_1d(1.0, 0.0, 0.0), std::invalid_argument);
}
