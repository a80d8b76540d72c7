#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "impdiff/core.hpp"
#include "impdiff/estimators.hpp"
#include "impdiff/oracles.hpp"
#include "impdiff/potentials.hpp"
#include "impdiff/samplers.hpp"

using namespace impdiff;

namespace {

RewardSpec linear_reward() {
  RewardSpec r;
  r.eval = [](const double* x, int) { return x[0]; };
  r.differentiable = true;
  r.grad = [](const double*, int d, double* out) {
    out[0] = 1.0;
    for (int j = 1; j < d; ++j) out[j] = 0.0;
  };
  return r;
}

RewardSpec constant_reward(double c) {
  RewardSpec r;
  r.eval = [c](const double*, int) { return c; };
  return r;
}

// drift with no parameter dependence at all
struct FrozenParamDrift final : DriftModel {
  int state_dim() const override { return 1; }
  int param_dim() const override { return 1; }
  double horizon() const override { return 1.0; }
  void mu(double, const double* y, const ParamVector&, double* out) const override {
    out[0] = -y[0];
  }
  void mu_state_jac(double, const double*, const ParamVector&, double* out) const override {
    out[0] = -1.0;
  }
  void mu_param_jac(double, const double*, const ParamVector&, double* out) const override {
    out[0] = 0.0;
  }
};

}  // namespace

TEST(RewardSpecs, IndicatorAndSmoothedValues) {
  RewardSpec ind = indicator_gaussian_reward();
  double at_mu[2] = {1.0, 0.95};
  double left[2] = {-0.5, 0.95};
  EXPECT_DOUBLE_EQ(ind.eval(at_mu, 2), 1.0);
  EXPECT_DOUBLE_EQ(ind.eval(left, 2), 0.0);
  EXPECT_FALSE(ind.differentiable);

  RewardSpec sm = smoothed_gaussian_reward({1.0, 0.95}, 0.1);
  ASSERT_TRUE(sm.differentiable && sm.grad);
  // tau -> 0 limit approaches the indicator away from the axis
  EXPECT_NEAR(sm.eval(at_mu, 2), 1.0, 1e-4);
  EXPECT_NEAR(sm.eval(left, 2), 0.0, 1e-2);
  const double h = 1e-6;
  double x[2] = {0.15, -0.4}, g[2], xp[2], xm[2];
  sm.grad(x, 2, g);
  for (int j = 0; j < 2; ++j) {
    xp[0] = xm[0] = x[0];
    xp[1] = xm[1] = x[1];
    xp[j] += h;
    xm[j] -= h;
    EXPECT_NEAR(g[j], (sm.eval(xp, 2) - sm.eval(xm, 2)) / (2 * h), 1e-6);
  }
}

TEST(GammaReward, ConstantRewardHasZeroCovariance) {
  QuadraticPotential pot(2);
  RngStream rng(5, 0);
  ParticleEnsemble e = gaussian_ensemble(500, 2, 0.3, 1.0, rng);
  ParamVector g = gamma_reward(e, {0.1, -0.2}, pot, constant_reward(0.7));
  for (double v : g) EXPECT_NEAR(v, 0.0, 1e-13);
}

TEST(GammaReward, QuadratureGridMatchesClosedFormAndFiniteDifferences) {
  // pi*(theta) = N(theta, 1); with R(x) = x the loss -E[R] = -theta, so the
  // descent direction is exactly -1 = -var(X)
  QuadraticPotential pot(1);
  ParamVector th = {0.4};
  ObjectiveSpec obj;
  obj.lambda = 1.0;
  obj.reward = linear_reward();
  StationaryGrid st = stationary_quadrature(pot, th);
  ParamVector g = gamma_reward(st.grid, th, pot, obj.reward);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_NEAR(g[0], -1.0, 1e-6);

  auto loss = [&](const ParamVector& t) { return quadrature_loss(pot, t, obj); };
  ParamVector fd = finite_difference_grad(loss, th, 1e-4);
  EXPECT_NEAR(g[0], fd[0], 1e-6);
}

TEST(GammaReward, SingleSampleDegeneratesToZero) {
  QuadraticPotential pot(2);
  ParticleEnsemble one(1, 2);
  one.at(0, 0) = 3.0;
  ParamVector g = gamma_reward(one, {0.0, 0.0}, pot, linear_reward());
  EXPECT_EQ(g, ParamVector(2, 0.0));
}

TEST(GammaReward, ShiftedLogisticL1NormBound) {
  // |cov(R, g_k)| <= 2 sup|R| E|g_k| and sum_k |g_k| <= 1/eta pointwise
  const double eta = 0.2;
  MixturePotential pot = hexagon_mixture(2.0, WeightMap::kShiftedLogistic, eta);
  RewardSpec r = indicator_gaussian_reward();
  RngStream rng(21, 0);
  for (int trial = 0; trial < 10; ++trial) {
    ParticleEnsemble e = gaussian_ensemble(200, 2, 0.0, 2.0, rng.at(0, trial));
    ParamVector th(6);
    for (int k = 0; k < 6; ++k) th[k] = rng.at(1, trial).gaussian(k, 0);
    ParamVector g = gamma_reward(e, th, pot, r);
    double l1 = 0.0;
    for (double v : g) l1 += std::abs(v);
    EXPECT_LE(l1, 2.0 / eta + 1e-12);
  }
}

TEST(GammaRef, ExactlyZeroOnSelf) {
  MixturePotential pot = hexagon_mixture(2.0, WeightMap::kSoftmax);
  RngStream rng(33, 0);
  ParticleEnsemble e = gaussian_ensemble(100, 2, 0.0, 1.5, rng);
  ParamVector g = gamma_ref(e, e, {1, 0, 1, 0, 1, 0}, pot);
  for (double v : g) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(GammaRef, GridMatchesGaussianKlGradient) {
  // KL(N(1,1) || N(theta,1)) = (theta-1)^2/2, gradient theta - 1
  QuadraticPotential pot(1);
  StationaryGrid ref = stationary_quadrature(pot, {1.0});
  StationaryGrid cur = stationary_quadrature(pot, {0.3});
  ParamVector g = gamma_ref(cur.grid, ref.grid, {0.3}, pot);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_NEAR(g[0], -0.7, 1e-6);

  ObjectiveSpec obj;
  obj.lambda = 0.0;
  obj.beta = 1.0;
  auto loss = [&](const ParamVector& t) {
    return quadrature_loss(pot, t, obj, &ref.grid);
  };
  ParamVector fd = finite_difference_grad(loss, {0.3}, 1e-4);
  EXPECT_NEAR(g[0], fd[0], 1e-6);
}

TEST(GammaCombined, LinearInTheTwoTerms) {
  MixturePotential pot = hexagon_mixture(2.0, WeightMap::kSoftmax);
  RngStream rng(44, 0);
  ParticleEnsemble e = gaussian_ensemble(300, 2, 0.0, 1.5, rng.at(0, 0));
  ParticleEnsemble ref = gaussian_ensemble(300, 2, 0.5, 1.5, rng.at(1, 0));
  ParamVector th = {1, 0, 1, 0, 1, 0};

  ObjectiveSpec obj;
  obj.lambda = 0.8;
  obj.beta = 0.3;
  obj.reward = indicator_gaussian_reward();
  ParamVector combined = gamma_combined(e, &ref, th, pot, obj);
  ParamVector gr = gamma_reward(e, th, pot, obj.reward);
  ParamVector gf = gamma_ref(e, ref, th, pot);
  for (size_t k = 0; k < combined.size(); ++k)
    EXPECT_NEAR(combined[k], 0.8 * gr[k] + 0.3 * gf[k], 1e-15);

  // beta term falls back to obj.ref_ensemble when no explicit ref is passed
  obj.ref_ensemble = &ref;
  ParamVector fallback = gamma_combined(e, nullptr, th, pot, obj);
  EXPECT_EQ(fallback, combined);

  obj.ref_ensemble = nullptr;
  EXPECT_THROW(gamma_combined(e, nullptr, th, pot, obj), std::invalid_argument);

  ObjectiveSpec bad;
  bad.lambda = 0.0;
  bad.beta = 0.0;
  EXPECT_THROW(gamma_combined(e, nullptr, th, pot, bad), std::invalid_argument);
  bad.beta = -1.0;
  EXPECT_THROW(gamma_combined(e, nullptr, th, pot, bad), std::invalid_argument);
}

TEST(AdjointOde, ZeroStepsAndFrozenParametersGiveZero) {
  Diffusion1dDrift drift(2.0);
  ParticleEnsemble e(4, 1);
  RewardSpec r = linear_reward();
  EXPECT_EQ(adjoint_ode_gradient(drift, e, {1.0}, r, 0), ParamVector{0.0});

  FrozenParamDrift frozen;
  ParticleEnsemble e2(3, 1);
  e2.at(0, 0) = 1.0;
  e2.at(1, 0) = -2.0;
  ParamVector g = adjoint_ode_gradient(frozen, e2, {0.5}, r, 100);
  EXPECT_EQ(g, ParamVector{0.0});

  RewardSpec nondiff = indicator_gaussian_reward();
  EXPECT_THROW(adjoint_ode_gradient(drift, e, {1.0}, nondiff, 10),
               std::invalid_argument);
}

TEST(AdjointOde, MatchesSensitivityClosedForm) {
  // dY_T/dtheta = 1 - e^{-2T}, so grad E[R(Y_T)] = R'(y) (1 - e^{-2T})
  const double T = 2.0, target = 2.0;
  Diffusion1dDrift drift(T);
  RewardSpec r;
  r.differentiable = true;
  r.eval = [target](const double* x, int) {
    return -(x[0] - target) * (x[0] - target);
  };
  r.grad = [target](const double* x, int, double* out) {
    out[0] = -2.0 * (x[0] - target);
  };
  ParticleEnsemble e(1, 1);
  e.at(0, 0) = 0.7;
  ParamVector g = adjoint_ode_gradient(drift, e, {1.0}, r, 2048);
  const double want = -2.0 * (0.7 - target) * (1.0 - std::exp(-2.0 * T));
  EXPECT_NEAR(g[0], want, 1e-6);
  EXPECT_NEAR(g[0], -2.0 * gamma_diffusion1d(e, target, T), 1e-6);
}

TEST(AdjointSde, AgreesWithOdeSweepForStateFreeSensitivity) {
  // this drift's adjoint never reads the stored state, so both sweeps take
  // identical steps
  Diffusion1D model{1.3, 2.0, 64};
  Diffusion1dDrift drift(2.0);
  RngStream rng(64, 9);
  SdeRunResult out = diffusion1d_backward_sde(model, 40, rng, true);
  RewardSpec r;
  r.differentiable = true;
  r.eval = [](const double* x, int) { return -(x[0] - 2.0) * (x[0] - 2.0); };
  r.grad = [](const double* x, int, double* out) { out[0] = -2.0 * (x[0] - 2.0); };
  ParamVector gs = adjoint_sde_gradient(drift, out.paths, {1.3}, r);
  ParamVector go = adjoint_ode_gradient(drift, out.terminal, {1.3}, r, 64);
  ASSERT_EQ(gs.size(), 1u);
  EXPECT_NEAR(gs[0], go[0], 1e-12);
  EXPECT_THROW(adjoint_sde_gradient(drift, {}, {1.3}, r), std::invalid_argument);
}

TEST(GirsanovKl, ZeroOnEqualParamsAndMatchesAnalyticValue) {
  const double T = 3.0;
  Diffusion1D model{1.0, T, 512};
  Diffusion1dDrift drift(T);
  RngStream rng(2, 2);
  SdeRunResult out = diffusion1d_backward_sde(model, 8, rng, true);
  EXPECT_DOUBLE_EQ(girsanov_kl_accumulate(drift, {1.0}, {1.0}, out.paths), 0.0);
  // the drift gap 2 (th1 - th2) e^{-(T-t)} is state-free, so one path already
  // integrates it exactly up to the midpoint-rule error
  double kl = girsanov_kl_accumulate(drift, {1.0}, {0.0}, out.paths);
  EXPECT_NEAR(kl, analytic_path_kl_1d(1.0, 0.0, T), 1e-4);
  EXPECT_DOUBLE_EQ(girsanov_kl_accumulate(drift, {1.0}, {0.0}, out.paths, 0.25),
                   0.25 * kl);
}

TEST(GammaDiffusion1d, ClosedForm) {
  ParticleEnsemble e(2, 1);
  e.at(0, 0) = 1.0;
  e.at(1, 0) = 3.0;  // mean 2
  EXPECT_DOUBLE_EQ(gamma_diffusion1d(e, 0.5, 3.0),
                   1.5 * (1.0 - std::exp(-6.0)));
  ParticleEnsemble bad(2, 2);
  EXPECT_THROW(gamma_diffusion1d(bad, 0.0, 1.0), std::invalid_argument);
}

TEST(FiniteState, TwoStateClosedFormGradient) {
  // V = (theta, 0), R = (1, 0): l(theta) = sigmoid(-theta),
  // dl/dtheta = -sigmoid(theta) sigmoid(-theta)
  FiniteStateProblem prob;
  prob.m = 2;
  prob.p = 1;
  prob.v_table = [](const ParamVector& th) { return std::vector<double>{th[0], 0.0}; };
  prob.v_jacobian = [](const ParamVector&) { return std::vector<double>{1.0, 0.0}; };
  prob.reward_table = {1.0, 0.0};

  for (double th : {0.0, 0.7, -1.3}) {
    double sp = 1.0 / (1.0 + std::exp(-th)), sn = 1.0 - sp;
    EXPECT_NEAR(finite_state_loss(prob, {th}), sn, 1e-14);
    ParamVector g = finite_state_implicit_gradient(prob, {th});
    EXPECT_NEAR(g[0], -sp * sn, 1e-12);
  }
}

TEST(FiniteState, StationaryIsSimplexPointAndShiftInvariant) {
  FiniteStateProblem prob = random_finite_state_problem(6, 2, 19);
  ParamVector th = {0.4, -0.9};
  std::vector<double> pi = finite_state_stationary(prob, th);
  double s = 0.0;
  for (double v : pi) {
    EXPECT_GT(v, 0.0);
    s += v;
  }
  EXPECT_NEAR(s, 1.0, 1e-12);

  FiniteStateProblem shifted = prob;
  shifted.v_table = [&prob](const ParamVector& t) {
    std::vector<double> v = prob.v_table(t);
    for (double& x : v) x += 11.5;
    return v;
  };
  std::vector<double> pi2 = finite_state_stationary(shifted, th);
  for (int x = 0; x < prob.m; ++x) EXPECT_NEAR(pi[x], pi2[x], 1e-12);
}

TEST(FiniteState, ImplicitGradientMatchesFiniteDifferences) {
  FiniteStateProblem prob = random_finite_state_problem(5, 3, 7);
  auto loss = [&prob](const ParamVector& t) { return finite_state_loss(prob, t); };
  RngStream rng(123, 0);
  for (int trial = 0; trial < 12; ++trial) {
    ParamVector th(3);
    for (int j = 0; j < 3; ++j) th[j] = 1.5 * rng.gaussian(trial, j);
    ParamVector g = finite_state_implicit_gradient(prob, th);
    ParamVector fd = finite_difference_grad(loss, th, 1e-5);
    double dinf = 0.0, ninf = 0.0;
    for (int j = 0; j < 3; ++j) {
      dinf = std::max(dinf, std::abs(g[j] - fd[j]));
      ninf = std::max(ninf, std::abs(fd[j]));
    }
    EXPECT_LT(dinf, 1e-8 * std::max(ninf, 1.0));
  }
}

TEST(FiniteState, RandomProblemIsSeedDeterministic) {
  FiniteStateProblem a = random_finite_state_problem(4, 2, 99);
  FiniteStateProblem b = random_finite_state_problem(4, 2, 99);
  FiniteStateProblem c = random_finite_state_problem(4, 2, 100);
  ParamVector th = {0.2, -0.4};
  EXPECT_EQ(a.v_table(th), b.v_table(th));
  EXPECT_EQ(a.reward_table, b.reward_table);
  EXPECT_NE(a.v_table(th), c.v_table(th));
  EXPECT_THROW(random_finite_state_problem(1, 1, 0), std::invalid_argument);
}

TEST(SolveLinear, SmallSystems) {
  std::vector<double> A = {2, 1, 1, 3};
  std::vector<double> B = {5, 10};
  detail::solve_linear(A, B, 2, 1);
  EXPECT_NEAR(B[0], 1.0, 1e-12);
  EXPECT_NEAR(B[1], 3.0, 1e-12);

  std::vector<double> S = {1, 2, 2, 4};  // rank 1
  std::vector<double> rhs = {1, 1};
  EXPECT_THROW(detail::solve_linear(S, rhs, 2, 1), std::invalid_argument);
}
