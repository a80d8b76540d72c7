#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <vector>

#include "impdiff/core.hpp"
#include "impdiff/estimators.hpp"
#include "impdiff/potentials.hpp"

namespace impdiff {

namespace detail {

inline double quadrature_loss_once(const Potential& pot, const ParamVector& theta,
                                   const ObjectiveSpec& obj, const GridDistribution* ref,
                                   const std::vector<double>& lo,
                                   const std::vector<double>& hi, int pts) {
  StationaryGrid sg = stationary_quadrature(pot, theta, lo, hi, pts);
  double out = 0.0;
  if (obj.lambda != 0.0) {
    int d = pot.state_dim();
    out -= obj.lambda * sg.grid.expectation([&](const double* x) {
      return obj.reward.eval(x, d);
    });
  }
  if (obj.beta != 0.0) {
    /* KL(ref || pi*) evaluated on ref's own nodes:
       sum ref_i (log ref_i + V(x_i, theta) + log Z) * cell. */
    double kl = 0.0, cell = ref->cell_volume(), xy[2];
    for (size_t i = 0; i < ref->size(); ++i) {
      double ri = ref->density(i);
      if (ri == 0.0) continue;
      ref->node(i, xy);
      kl += ri * (ref->log_density()[i] + pot.value(xy, theta)) * cell;
    }
    kl += sg.log_z;
    out += obj.beta * kl;
  }
  return out;
}

}  // namespace detail

/* Brute-force outer loss l(theta) = F(pi*(theta)) on a quadrature grid:
   -lambda * integral R dpi + beta * KL(p_ref || pi). With self_check set,
   recomputes at doubled resolution and errors if the value moves > 1e-4. */
inline double quadrature_loss(const Potential& pot, const ParamVector& theta,
                              const ObjectiveSpec& obj,
                              const GridDistribution* ref = nullptr,
                              std::vector<double> lo = {}, std::vector<double> hi = {},
                              int pts = 0, bool self_check = false) {
  int d = pot.state_dim();
  detail::require(d <= 2, "quadrature_loss: state dim must be <= 2");
  detail::check_objective(obj);
  if (obj.beta != 0.0)
    detail::require(ref != nullptr && ref->dim() == d,
                    "quadrature_loss: beta term needs a reference grid density");
  if (pts == 0) {
    lo = default_box_lo(d);
    hi = default_box_hi(d);
    pts = default_grid_pts(d);
  }
  double v = detail::quadrature_loss_once(pot, theta, obj, ref, lo, hi, pts);
  if (self_check) {
    double v2 = detail::quadrature_loss_once(pot, theta, obj, ref, lo, hi, 2 * pts);
    if (!(std::abs(v - v2) <= 1e-4))
      throw std::runtime_error("quadrature_loss: grid too coarse (doubling the "
                               "resolution moved the value by more than 1e-4)");
  }
  return v;
}

/* Central-difference gradient per coordinate. With richardson_check set,
   recomputes at h/2, errors unless the two agree to 1% (sup-norm, relative),
   and returns the finer estimate. */
inline ParamVector finite_difference_grad(
    const std::function<double(const ParamVector&)>& loss_fn, const ParamVector& theta,
    double h = 1e-4, bool richardson_check = false) {
  detail::require(h > 0.0, "finite_difference_grad: h must be > 0");
  auto central = [&](double step) {
    ParamVector g(theta.size());
    ParamVector t = theta;
    for (size_t j = 0; j < theta.size(); ++j) {
      t[j] = theta[j] + step;
      double fp = loss_fn(t);
      t[j] = theta[j] - step;
      double fm = loss_fn(t);
      t[j] = theta[j];
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("finite_difference_grad: non-finite loss at "
                                 "perturbed point");
      g[j] = (fp - fm) / (2.0 * step);
    }
    return g;
  };
  ParamVector g = central(h);
  if (!richardson_check) return g;
  ParamVector g2 = central(0.5 * h);
  double diff = 0.0, norm = 0.0;
  for (size_t j = 0; j < g.size(); ++j) {
    diff = std::max(diff, std::abs(g[j] - g2[j]));
    norm = std::max(norm, std::abs(g2[j]));
  }
  if (!(diff <= 0.01 * std::max(norm, 1e-12)))
    throw std::runtime_error("finite_difference_grad: halving h moved the "
                             "estimate by more than 1%");
  return g2;
}

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

/* Exact law of the Gaussian chain X_{s+1} = X_s - 2 delta (X_s - theta) + noise
   keeping N(theta, 1) invariant: mean_s = theta + (1-2delta)^s (mu0 - theta),
   var_s = 1 + (1-2delta)^{2s} (var0 - 1). */
inline Moments example1_moments(long s, double delta, double theta, double mu0,
                                double var0) {
  detail::require(delta > 0.0 && delta < 0.5, "example1_moments: delta must be in (0, 1/2)");
  detail::require(s >= 0, "example1_moments: s must be >= 0");
  detail::require(var0 >= 0.0, "example1_moments: var0 must be >= 0");
  double a = std::pow(1.0 - 2.0 * delta, double(s));
  return {theta + a * (mu0 - theta), 1.0 + a * a * (var0 - 1.0)};
}

/* e^{tA} for a 2x2 row-major A via the trace split A = mu I + M with
   M^2 = q^2 I: e^{tA} = e^{mu t} (C(u) I + tS(u) M), u = q^2 t^2, where
   C = cosh/cos and S = sinh/sin over their arguments depending on the sign
   of q^2, with a series fallback near the repeated-eigenvalue case q = 0. */
inline std::array<double, 4> expm2x2(const std::array<double, 4>& A, double t) {
  double mu = 0.5 * (A[0] + A[3]);
  double m00 = A[0] - mu, m01 = A[1], m10 = A[2];  // m11 = -m00
  double q2 = m00 * m00 + m01 * m10;
  double u = q2 * t * t, C, S;
  if (u > 1e-3) {
    double qt = std::sqrt(u);
    C = std::cosh(qt);
    S = std::sinh(qt) / qt;
  } else if (u < -1e-3) {
    double wt = std::sqrt(-u);
    C = std::cos(wt);
    S = std::sin(wt) / wt;
  } else {
    C = 1.0 + u / 2.0 + u * u / 24.0 + u * u * u / 720.0;
    S = 1.0 + u / 6.0 + u * u / 120.0 + u * u * u / 5040.0;
  }
  double e = std::exp(mu * t);
  return {e * (C + S * t * m00), e * S * t * m01, e * S * t * m10,
          e * (C - S * t * m00)};
}

/* Closed-form trajectory of the parameter in the finite-horizon 1-d denoising
   chain, after the queue is primed. State xi_t = (theta_t, psi_t) with
   psi_t = integral_0^T e^{-2u} theta_{t-u} du (the sampler's output mean is
   2 psi_t). On [T, 2T] the delayed argument theta_{t-T} is the frozen warm-up
   value theta0 and the dynamics are affine, xi' = A xi + b:
     theta' = -eta (1 - e^{-2T}) (2 psi - theta_target)
     psi'   = theta - 2 psi - theta0 e^{-2T}
   solved as xi_t = xi* + e^{(t-T)A} (xi_T - xi*) with xi* = -A^{-1} b. */
struct CoupledOdeSolution {
  double theta0 = 0.0, theta_target = 0.0, eta = 1.0, horizon = 1.0;
  std::array<double, 4> a{};
  std::array<double, 2> b{}, fixed_point{}, xi_horizon{};

  std::array<double, 2> state(double t) const {
    detail::require(t >= horizon - 1e-12 && t <= 2.0 * horizon + 1e-12,
                    "CoupledOdeSolution: t must lie in [T, 2T]");
    std::array<double, 4> e = expm2x2(a, t - horizon);
    double d0 = xi_horizon[0] - fixed_point[0];
    double d1 = xi_horizon[1] - fixed_point[1];
    return {fixed_point[0] + e[0] * d0 + e[1] * d1,
            fixed_point[1] + e[2] * d0 + e[3] * d1};
  }
  double theta(double t) const { return state(t)[0]; }
};

inline CoupledOdeSolution diffusion1d_theta_path(double theta0, double theta_target,
                                                 double eta, double horizon) {
  detail::require(eta > 0.0, "diffusion1d_theta_path: eta must be > 0");
  detail::require(horizon > 0.0, "diffusion1d_theta_path: horizon must be > 0");
  double decay = std::exp(-2.0 * horizon), c = 1.0 - decay;
  CoupledOdeSolution sol;
  sol.theta0 = theta0;
  sol.theta_target = theta_target;
  sol.eta = eta;
  sol.horizon = horizon;
  sol.a = {0.0, -2.0 * eta * c, 1.0, -2.0};
  sol.b = {eta * c * theta_target, -theta0 * decay};
  sol.fixed_point = {theta_target + theta0 * decay, 0.5 * theta_target};
  sol.xi_horizon = {theta0, 0.5 * theta0 * c};
  return sol;
}

// Independent second-order (Heun) integration of the same affine system.
inline std::array<double, 2> integrate_theta_path_heun(const CoupledOdeSolution& sol,
                                                       double t_end, int steps) {
  detail::require(steps >= 1, "integrate_theta_path_heun: steps must be >= 1");
  detail::require(t_end >= sol.horizon, "integrate_theta_path_heun: t_end < T");
  double h = (t_end - sol.horizon) / steps;
  std::array<double, 2> x = sol.xi_horizon;
  auto f = [&](const std::array<double, 2>& v) {
    return std::array<double, 2>{sol.a[0] * v[0] + sol.a[1] * v[1] + sol.b[0],
                                 sol.a[2] * v[0] + sol.a[3] * v[1] + sol.b[1]};
  };
  for (int k = 0; k < steps; ++k) {
    std::array<double, 2> k1 = f(x);
    std::array<double, 2> pred{x[0] + h * k1[0], x[1] + h * k1[1]};
    std::array<double, 2> k2 = f(pred);
    x[0] += 0.5 * h * (k1[0] + k2[0]);
    x[1] += 0.5 * h * (k1[1] + k2[1]);
  }
  return x;
}

/* Path-space KL between the 1-d denoising SDEs with parameters theta1, theta2
   (constant convention, no diffusion-coefficient factor):
   integral_0^T ||2 (theta1 - theta2) e^{-(T-tau)}||^2 dtau = 2 dtheta^2 (1 - e^{-2T}). */
inline double analytic_path_kl_1d(double theta1, double theta2, double horizon) {
  detail::require(horizon > 0.0, "analytic_path_kl_1d: horizon must be > 0");
  double d = theta1 - theta2;
  return 2.0 * d * d * (1.0 - std::exp(-2.0 * horizon));
}

}  // namespace impdiff
