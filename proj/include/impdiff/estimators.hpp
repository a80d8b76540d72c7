#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "impdiff/core.hpp"
#include "impdiff/potentials.hpp"
#include "impdiff/samplers.hpp"

namespace impdiff {

/* Outer reward R(x). `grad` must be set exactly when `differentiable` is true;
   estimators that differentiate through R refuse non-differentiable specs. */
struct RewardSpec {
  std::function<double(const double* x, int d)> eval;
  bool differentiable = false;
  std::function<void(const double* x, int d, double* out)> grad;
};

// R(x) = 1(x_1 > 0) exp(-||x - mu||^2); not differentiable at x_1 = 0.
inline RewardSpec indicator_gaussian_reward(std::vector<double> mu = {1.0, 0.95}) {
  RewardSpec r;
  r.eval = [mu](const double* x, int d) {
    if (x[0] <= 0.0) return 0.0;
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      double dx = x[j] - mu[j];
      s += dx * dx;
    }
    return std::exp(-s);
  };
  r.differentiable = false;
  return r;
}

// sigmoid(x_1 / tau) exp(-||x - mu||^2), a smooth stand-in for the indicator.
inline RewardSpec smoothed_gaussian_reward(std::vector<double> mu = {1.0, 0.95},
                                           double tau = 0.1) {
  RewardSpec r;
  r.differentiable = true;
  r.eval = [mu, tau](const double* x, int d) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      double dx = x[j] - mu[j];
      s += dx * dx;
    }
    return std::exp(-s) / (1.0 + std::exp(-x[0] / tau));
  };
  r.grad = [mu, tau](const double* x, int d, double* out) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      double dx = x[j] - mu[j];
      s += dx * dx;
    }
    double e = std::exp(-s);
    double sig = 1.0 / (1.0 + std::exp(-x[0] / tau));
    for (int j = 0; j < d; ++j) out[j] = -2.0 * (x[j] - mu[j]) * sig * e;
    out[0] += e * sig * (1.0 - sig) / tau;
  };
  return r;
}

/* Outer objective F(p) = -lambda E_p[R] + beta KL(p_ref || p); at least one of
   lambda, beta must be nonzero, beta >= 0. */
struct ObjectiveSpec {
  double lambda = 1.0;
  double beta = 0.0;
  RewardSpec reward;
  const ParticleEnsemble* ref_ensemble = nullptr;
};

namespace detail {

inline void check_objective(const ObjectiveSpec& obj) {
  require(obj.lambda != 0.0 || obj.beta != 0.0,
          "objective: needs lambda or beta nonzero");
  require(obj.beta >= 0.0, "objective: beta must be >= 0");
}

using WeightedVisitor = std::function<void(const double* x, double w)>;
using WeightedPoints = std::function<void(const WeightedVisitor&)>;

inline WeightedPoints enumerate(const ParticleEnsemble& ens) {
  return [&ens](const WeightedVisitor& visit) {
    double w = 1.0 / ens.size();
    for (int i = 0; i < ens.size(); ++i) visit(ens.row(i), w);
  };
}

inline WeightedPoints enumerate(const GridDistribution& g) {
  return [&g](const WeightedVisitor& visit) {
    double cell = g.cell_volume();
    double xy[2];
    for (size_t i = 0; i < g.size(); ++i) {
      double w = g.density(i) * cell;
      if (w == 0.0) continue;
      g.node(i, xy);
      visit(xy, w);
    }
  };
}

inline ParamVector gamma_reward_core(const ParamVector& theta, const Potential& pot,
                                     const RewardSpec& reward,
                                     const WeightedPoints& points) {
  int p = pot.param_dim(), d = pot.state_dim();
  require(int(theta.size()) == p, "gamma_reward: param dim mismatch");
  ParamVector mean_g(p, 0.0), mean_rg(p, 0.0), g(p);
  double mean_r = 0.0, wsum = 0.0;
  points([&](const double* x, double w) {
    double r = reward.eval(x, d);
    pot.grad_theta(x, theta, g.data());
    wsum += w;
    mean_r += w * r;
    for (int k = 0; k < p; ++k) {
      mean_g[k] += w * g[k];
      mean_rg[k] += w * r * g[k];
    }
  });
  require(wsum > 0.0, "gamma_reward: empty sample");
  mean_r /= wsum;
  ParamVector out(p);
  for (int k = 0; k < p; ++k) out[k] = mean_rg[k] / wsum - mean_r * mean_g[k] / wsum;
  return out;
}

inline ParamVector mean_grad_theta(const ParamVector& theta, const Potential& pot,
                                   const WeightedPoints& points) {
  int p = pot.param_dim();
  ParamVector mean_g(p, 0.0), g(p);
  double wsum = 0.0;
  points([&](const double* x, double w) {
    pot.grad_theta(x, theta, g.data());
    wsum += w;
    for (int k = 0; k < p; ++k) mean_g[k] += w * g[k];
  });
  require(wsum > 0.0, "gamma_ref: empty sample");
  for (int k = 0; k < p; ++k) mean_g[k] /= wsum;
  return mean_g;
}

}  // namespace detail

/* Score-function gradient of l(theta) = -E_{pi*(theta)}[R]:
   Gamma = cov_{X ~ p}[R(X), grad_theta V(X, theta)], population covariance.
   Descent direction: theta <- theta - eta Gamma. R need not be smooth. */
inline ParamVector gamma_reward(const ParticleEnsemble& ens, const ParamVector& theta,
                                const Potential& pot, const RewardSpec& reward) {
  detail::require(ens.dim() == pot.state_dim(), "gamma_reward: state dim mismatch");
  if (ens.size() == 1) {
    std::fprintf(stderr,
                 "gamma_reward: covariance of a single sample is undefined; "
                 "returning zero\n");
    return ParamVector(pot.param_dim(), 0.0);
  }
  return detail::gamma_reward_core(theta, pot, reward, detail::enumerate(ens));
}

// Same estimator with expectations taken under a grid density instead of samples.
inline ParamVector gamma_reward(const GridDistribution& p, const ParamVector& theta,
                                const Potential& pot, const RewardSpec& reward) {
  detail::require(p.dim() == pot.state_dim(), "gamma_reward: state dim mismatch");
  return detail::gamma_reward_core(theta, pot, reward, detail::enumerate(p));
}

/* Contrastive gradient of l(theta) = KL(p_ref || pi*(theta)):
   Gamma = E_{p_ref}[grad_theta V] - E_p[grad_theta V]. */
inline ParamVector gamma_ref(const ParticleEnsemble& ens, const ParticleEnsemble& ref,
                             const ParamVector& theta, const Potential& pot) {
  detail::require(ens.dim() == pot.state_dim() && ref.dim() == pot.state_dim(),
                  "gamma_ref: state dim mismatch");
  detail::require(int(theta.size()) == pot.param_dim(), "gamma_ref: param dim mismatch");
  ParamVector a = detail::mean_grad_theta(theta, pot, detail::enumerate(ref));
  ParamVector b = detail::mean_grad_theta(theta, pot, detail::enumerate(ens));
  for (size_t k = 0; k < a.size(); ++k) a[k] -= b[k];
  return a;
}

inline ParamVector gamma_ref(const GridDistribution& p, const GridDistribution& ref,
                             const ParamVector& theta, const Potential& pot) {
  detail::require(p.dim() == pot.state_dim() && ref.dim() == pot.state_dim(),
                  "gamma_ref: state dim mismatch");
  detail::require(int(theta.size()) == pot.param_dim(), "gamma_ref: param dim mismatch");
  ParamVector a = detail::mean_grad_theta(theta, pot, detail::enumerate(ref));
  ParamVector b = detail::mean_grad_theta(theta, pot, detail::enumerate(p));
  for (size_t k = 0; k < a.size(); ++k) a[k] -= b[k];
  return a;
}

// lambda * gamma_reward + beta * gamma_ref, skipping terms with zero weight.
inline ParamVector gamma_combined(const ParticleEnsemble& ens,
                                  const ParticleEnsemble* ref, const ParamVector& theta,
                                  const Potential& pot, const ObjectiveSpec& obj) {
  detail::check_objective(obj);
  ParamVector out(pot.param_dim(), 0.0);
  if (obj.lambda != 0.0) {
    ParamVector gr = gamma_reward(ens, theta, pot, obj.reward);
    for (size_t k = 0; k < out.size(); ++k) out[k] += obj.lambda * gr[k];
  }
  if (obj.beta != 0.0) {
    if (ref == nullptr) ref = obj.ref_ensemble;
    detail::require(ref != nullptr,
                    "gamma_combined: beta term needs a reference ensemble");
    ParamVector gf = gamma_ref(ens, *ref, theta, pot);
    for (size_t k = 0; k < out.size(); ++k) out[k] += obj.beta * gf[k];
  }
  return out;
}

/* Drift mu(t, y, theta) of a parameterized flow, with analytic Jacobians in
   the state (d x d) and the parameters (d x p), both row-major. */
class DriftModel {
 public:
  virtual ~DriftModel() = default;
  virtual int state_dim() const = 0;
  virtual int param_dim() const = 0;
  virtual double horizon() const = 0;
  virtual void mu(double t, const double* y, const ParamVector& theta,
                  double* out) const = 0;
  virtual void mu_state_jac(double t, const double* y, const ParamVector& theta,
                            double* out) const = 0;
  virtual void mu_param_jac(double t, const double* y, const ParamVector& theta,
                            double* out) const = 0;
};

// Reverse-SDE drift of Diffusion1D: mu(t, y, theta) = -y + 2 theta e^{-(T-t)}.
class Diffusion1dDrift : public DriftModel {
 public:
  explicit Diffusion1dDrift(double horizon) : horizon_(horizon) {
    detail::require(horizon > 0.0, "Diffusion1dDrift: horizon must be > 0");
  }
  int state_dim() const override { return 1; }
  int param_dim() const override { return 1; }
  double horizon() const override { return horizon_; }
  void mu(double t, const double* y, const ParamVector& th, double* out) const override {
    out[0] = -y[0] + 2.0 * th[0] * std::exp(-(horizon_ - t));
  }
  void mu_state_jac(double, const double*, const ParamVector&, double* out) const override {
    out[0] = -1.0;
  }
  void mu_param_jac(double t, const double*, const ParamVector&, double* out) const override {
    out[0] = 2.0 * std::exp(-(horizon_ - t));
  }

 private:
  double horizon_;
};

namespace detail {

/* One midpoint (RK2) step of the reverse-time adjoint system over
   [t0, t0 + h] in adjoint time t (drift arguments evaluated at T - t):
     dZ/dt = -mu(T-t, Z, theta)
     dA/dt =  A^T d_state mu(T-t, ., theta)
     dG/dt =  A^T d_param mu(T-t, ., theta)
   z, a are length d; g is length p; all updated in place. */
inline void adjoint_rk2_step(const DriftModel& drift, const ParamVector& theta,
                             double t0, double h, double* z, double* a, double* g) {
  int d = drift.state_dim(), p = drift.param_dim();
  double T = drift.horizon(), tm = t0 + 0.5 * h;
  std::vector<double> f(d), zm(d), am(d), an(d);
  std::vector<double> js(size_t(d) * d), jp(size_t(d) * p);
  drift.mu(T - t0, z, theta, f.data());
  for (int j = 0; j < d; ++j) zm[j] = z[j] - 0.5 * h * f[j];
  drift.mu_state_jac(T - t0, z, theta, js.data());
  for (int j = 0; j < d; ++j) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += a[i] * js[size_t(i) * d + j];
    am[j] = a[j] + 0.5 * h * s;
  }
  drift.mu_state_jac(T - tm, zm.data(), theta, js.data());
  drift.mu_param_jac(T - tm, zm.data(), theta, jp.data());
  for (int j = 0; j < d; ++j) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += am[i] * js[size_t(i) * d + j];
    an[j] = a[j] + h * s;
  }
  for (int q = 0; q < p; ++q) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += am[i] * jp[size_t(i) * p + q];
    g[q] += h * s;
  }
  drift.mu(T - tm, zm.data(), theta, f.data());
  for (int j = 0; j < d; ++j) {
    z[j] -= h * f[j];
    a[j] = an[j];
  }
}

/* Same system swept along a stored trajectory: Z_t is read off as Y_{T-t}
   (midpoint states by linear interpolation) instead of re-integrated. */
inline void adjoint_path_step(const DriftModel& drift, const ParamVector& theta,
                              double t0, double h, const double* y0, const double* y1,
                              double* a, double* g) {
  int d = drift.state_dim(), p = drift.param_dim();
  double T = drift.horizon(), tm = t0 + 0.5 * h;
  std::vector<double> zm(d), am(d), an(d);
  std::vector<double> js(size_t(d) * d), jp(size_t(d) * p);
  for (int j = 0; j < d; ++j) zm[j] = 0.5 * (y0[j] + y1[j]);
  drift.mu_state_jac(T - t0, y0, theta, js.data());
  for (int j = 0; j < d; ++j) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += a[i] * js[size_t(i) * d + j];
    am[j] = a[j] + 0.5 * h * s;
  }
  drift.mu_state_jac(T - tm, zm.data(), theta, js.data());
  drift.mu_param_jac(T - tm, zm.data(), theta, jp.data());
  for (int j = 0; j < d; ++j) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += am[i] * js[size_t(i) * d + j];
    an[j] = a[j] + h * s;
  }
  for (int q = 0; q < p; ++q) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += am[i] * jp[size_t(i) * p + q];
    g[q] += h * s;
  }
  for (int j = 0; j < d; ++j) a[j] = an[j];
}

}  // namespace detail

/* Pathwise gradient of E[R(Y_T)] for the flow dY = mu dt: backward sweep of
   the adjoint system from each terminal sample, Z re-integrated
   deterministically. Returns the batch mean of G_T (the ascent direction of
   E[R]; optimizers maximizing R negate it to get a descent Gamma for -E[R]). */
inline ParamVector adjoint_ode_gradient(const DriftModel& drift,
                                        const ParticleEnsemble& terminal,
                                        const ParamVector& theta,
                                        const RewardSpec& reward, int steps) {
  detail::require(reward.differentiable && reward.grad,
                  "adjoint_ode_gradient: reward must be differentiable");
  detail::require(terminal.dim() == drift.state_dim(),
                  "adjoint_ode_gradient: state dim mismatch");
  detail::require(int(theta.size()) == drift.param_dim(),
                  "adjoint_ode_gradient: param dim mismatch");
  detail::require(steps >= 0, "adjoint_ode_gradient: steps must be >= 0");
  int p = drift.param_dim(), d = drift.state_dim();
  ParamVector mean_g(p, 0.0);
  if (steps == 0) return mean_g;
  double T = drift.horizon(), h = T / steps;
  std::vector<double> z(d), a(d), g(p);
  for (int i = 0; i < terminal.size(); ++i) {
    const double* y = terminal.row(i);
    for (int j = 0; j < d; ++j) z[j] = y[j];
    reward.grad(y, d, a.data());
    for (int q = 0; q < p; ++q) g[q] = 0.0;
    for (int k = 0; k < steps; ++k)
      detail::adjoint_rk2_step(drift, theta, k * h, h, z.data(), a.data(), g.data());
    for (int q = 0; q < p; ++q) mean_g[q] += g[q];
  }
  for (int q = 0; q < p; ++q) mean_g[q] /= terminal.size();
  return mean_g;
}

/* Adjoint sweep along stored SDE paths: Z_t is read off as Y_{T-t}, so the
   gradient follows each realized noisy trajectory. */
inline ParamVector adjoint_sde_gradient(const DriftModel& drift,
                                        const std::vector<SdePath>& paths,
                                        const ParamVector& theta,
                                        const RewardSpec& reward) {
  detail::require(!paths.empty(), "adjoint_sde_gradient: no paths");
  detail::require(reward.differentiable && reward.grad,
                  "adjoint_sde_gradient: reward must be differentiable");
  detail::require(drift.state_dim() == 1,
                  "adjoint_sde_gradient: stored paths are one-dimensional");
  int p = drift.param_dim();
  ParamVector mean_g(p, 0.0), g(p);
  double a;
  for (const SdePath& path : paths) {
    detail::require(path.horizon == drift.horizon() && path.steps >= 1,
                    "adjoint_sde_gradient: path/drift step-grid mismatch");
    detail::require(int(path.values.size()) == path.steps + 1,
                    "adjoint_sde_gradient: malformed path");
    int n = path.steps;
    double h = path.horizon / n;
    reward.grad(&path.values[size_t(n)], 1, &a);
    for (int q = 0; q < p; ++q) g[q] = 0.0;
    for (int k = 0; k < n; ++k)
      detail::adjoint_path_step(drift, theta, k * h, h, &path.values[size_t(n - k)],
                                &path.values[size_t(n - k - 1)], &a, g.data());
    for (int q = 0; q < p; ++q) mean_g[q] += g[q];
  }
  for (int q = 0; q < p; ++q) mean_g[q] /= double(paths.size());
  return mean_g;
}

/* Path-space divergence accumulated along trajectories sampled under theta_a:
   scale * integral_0^T E ||mu(t, y, theta_a) - mu(t, y, theta_b)||^2 dt.
   The conventional diffusion factor 1/(2 sigma^2) is left to `scale`. */
inline double girsanov_kl_accumulate(const DriftModel& drift, const ParamVector& theta_a,
                                     const ParamVector& theta_b,
                                     const std::vector<SdePath>& paths,
                                     double scale = 1.0) {
  detail::require(!paths.empty(), "girsanov_kl_accumulate: no paths");
  detail::require(drift.state_dim() == 1,
                  "girsanov_kl_accumulate: stored paths are one-dimensional");
  double total = 0.0;
  double T = drift.horizon();
  double ma, mb, ymid;
  for (const SdePath& path : paths) {
    detail::require(path.horizon == T && path.steps >= 1,
                    "girsanov_kl_accumulate: path/drift step-grid mismatch");
    double h = T / path.steps, acc = 0.0;
    for (int k = 0; k < path.steps; ++k) {
      double tm = (k + 0.5) * h;
      ymid = 0.5 * (path.values[k] + path.values[k + 1]);
      drift.mu(tm, &ymid, theta_a, &ma);
      drift.mu(tm, &ymid, theta_b, &mb);
      acc += h * (ma - mb) * (ma - mb);
    }
    total += acc;
  }
  return scale * total / double(paths.size());
}

/* Closed-form implicit gradient for the 1-d denoising family with loss
   (1/2)(x - theta_target)^2: Gamma(p) = (E_p[X] - theta_target)(1 - e^{-2T}).
   adjoint_ode_gradient with R(x) = -(x - theta_target)^2 returns exactly -2x
   this value (R' = -2(x - theta_target) plus the ascent orientation). */
inline double gamma_diffusion1d(const ParticleEnsemble& ens, double theta_target,
                                double horizon) {
  detail::require(ens.dim() == 1, "gamma_diffusion1d: ensemble must be 1-d");
  detail::require(horizon > 0.0, "gamma_diffusion1d: horizon must be > 0");
  return (ens.mean(0) - theta_target) * (1.0 - std::exp(-2.0 * horizon));
}

/* Finite-state analogue: m states, pi*(theta) = softmax(-V(theta)), the
   minimizer of sum_x p_x V_x(theta) + sum_x p_x log p_x over the simplex. */
struct FiniteStateProblem {
  int m = 0, p = 0;
  std::function<std::vector<double>(const ParamVector&)> v_table;     // length m
  std::function<std::vector<double>(const ParamVector&)> v_jacobian;  // m x p row-major
  std::vector<double> reward_table;                                   // length m
};

inline std::vector<double> finite_state_stationary(const FiniteStateProblem& prob,
                                                   const ParamVector& theta) {
  std::vector<double> v = prob.v_table(theta);
  detail::require(int(v.size()) == prob.m, "finite_state: V table length mismatch");
  for (double& x : v) x = -x;
  double lse = detail::logsumexp(v);
  for (double& x : v) x = std::exp(x - lse);
  return v;
}

// l(theta) = sum_x R_x pi*(theta)_x
inline double finite_state_loss(const FiniteStateProblem& prob, const ParamVector& theta) {
  std::vector<double> pi = finite_state_stationary(prob, theta);
  double s = 0.0;
  for (int x = 0; x < prob.m; ++x) s += prob.reward_table[x] * pi[x];
  return s;
}

// Smooth random instance: V_x(theta) = v0_x + sum_j w_xj tanh(theta_j).
inline FiniteStateProblem random_finite_state_problem(int m, int p, std::uint64_t seed) {
  detail::require(m >= 2 && p >= 1, "random_finite_state_problem: need m >= 2, p >= 1");
  RngStream rng(seed, 0x66737470u);  // decorrelated from experiment streams
  auto v0 = std::make_shared<std::vector<double>>(m);
  auto w = std::make_shared<std::vector<double>>(size_t(m) * p);
  for (int x = 0; x < m; ++x) (*v0)[x] = rng.gaussian(std::uint64_t(x), 0);
  for (int x = 0; x < m; ++x)
    for (int j = 0; j < p; ++j)
      (*w)[size_t(x) * p + j] = rng.gaussian(std::uint64_t(x), std::uint64_t(j + 1));
  FiniteStateProblem prob;
  prob.m = m;
  prob.p = p;
  prob.v_table = [m, p, v0, w](const ParamVector& th) {
    std::vector<double> out(m);
    for (int x = 0; x < m; ++x) {
      double s = (*v0)[x];
      for (int j = 0; j < p; ++j) s += (*w)[size_t(x) * p + j] * std::tanh(th[j]);
      out[x] = s;
    }
    return out;
  };
  prob.v_jacobian = [m, p, w](const ParamVector& th) {
    std::vector<double> out(size_t(m) * p);
    for (int j = 0; j < p; ++j) {
      double t = std::tanh(th[j]), dt = 1.0 - t * t;
      for (int x = 0; x < m; ++x) out[size_t(x) * p + j] = (*w)[size_t(x) * p + j] * dt;
    }
    return out;
  };
  prob.reward_table.resize(m);
  for (int x = 0; x < m; ++x)
    prob.reward_table[x] = rng.uniform(std::uint64_t(x), std::uint64_t(p + 1));
  return prob;
}

namespace detail {

// Gaussian elimination with partial pivoting; B holds nrhs columns, row-major.
inline void solve_linear(std::vector<double>& A, std::vector<double>& B, int n,
                         int nrhs) {
  for (int c = 0; c < n; ++c) {
    int piv = c;
    for (int r = c + 1; r < n; ++r)
      if (std::abs(A[size_t(r) * n + c]) > std::abs(A[size_t(piv) * n + c])) piv = r;
    require(std::abs(A[size_t(piv) * n + c]) > 1e-300, "solve_linear: singular system");
    if (piv != c) {
      for (int j = 0; j < n; ++j) std::swap(A[size_t(c) * n + j], A[size_t(piv) * n + j]);
      for (int j = 0; j < nrhs; ++j)
        std::swap(B[size_t(c) * nrhs + j], B[size_t(piv) * nrhs + j]);
    }
    double d = A[size_t(c) * n + c];
    for (int r = c + 1; r < n; ++r) {
      double f = A[size_t(r) * n + c] / d;
      if (f == 0.0) continue;
      for (int j = c; j < n; ++j) A[size_t(r) * n + j] -= f * A[size_t(c) * n + j];
      for (int j = 0; j < nrhs; ++j)
        B[size_t(r) * nrhs + j] -= f * B[size_t(c) * nrhs + j];
    }
  }
  for (int c = n - 1; c >= 0; --c) {
    double d = A[size_t(c) * n + c];
    for (int j = 0; j < nrhs; ++j) {
      double s = B[size_t(c) * nrhs + j];
      for (int r = c + 1; r < n; ++r) s -= A[size_t(c) * n + r] * B[size_t(r) * nrhs + j];
      B[size_t(c) * nrhs + j] = s / d;
    }
  }
}

}  // namespace detail

/* Implicit gradient of l(theta) = sum_x R_x pi*(theta)_x. The KKT system of
   the entropic inner problem (Hessian diag(1/p) bordered by the simplex
   constraint row) is differentiated in theta and solved for the sensitivity
   of pi* w.r.t. theta, then contracted with the first variation R. */
inline ParamVector finite_state_implicit_gradient(const FiniteStateProblem& prob,
                                                  const ParamVector& theta) {
  detail::require(int(theta.size()) == prob.p,
                  "finite_state_implicit_gradient: param dim mismatch");
  detail::require(int(prob.reward_table.size()) == prob.m,
                  "finite_state_implicit_gradient: reward table length mismatch");
  int m = prob.m, p = prob.p, n = m + 1;
  std::vector<double> pi = finite_state_stationary(prob, theta);
  for (int x = 0; x < m; ++x)
    if (!(pi[x] > 0.0))
      throw std::invalid_argument(
          "finite_state_implicit_gradient: stationary probability underflowed "
          "to 0 at state " +
          std::to_string(x));
  std::vector<double> jac = prob.v_jacobian(theta);
  detail::require(int(jac.size()) == m * p,
                  "finite_state_implicit_gradient: V jacobian shape mismatch");

  std::vector<double> K(size_t(n) * n, 0.0);
  for (int x = 0; x < m; ++x) {
    K[size_t(x) * n + x] = 1.0 / pi[x];
    K[size_t(x) * n + m] = 1.0;
    K[size_t(m) * n + x] = 1.0;
  }
  std::vector<double> rhs(size_t(n) * p, 0.0);
  for (int x = 0; x < m; ++x)
    for (int j = 0; j < p; ++j) rhs[size_t(x) * p + j] = -jac[size_t(x) * p + j];
  detail::solve_linear(K, rhs, n, p);

  ParamVector out(p, 0.0);
  for (int j = 0; j < p; ++j)
    for (int x = 0; x < m; ++x)
      out[j] += prob.reward_table[x] * rhs[size_t(x) * p + j];
  return out;
}

}  // namespace impdiff
