#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "impdiff/core.hpp"
#include "impdiff/potentials.hpp"

namespace impdiff {

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline constexpr double kDivergenceLimit = 1e9;

inline void guard_particle(double v, int particle, const char* where, long step = -1) {
  if (std::isfinite(v) && std::abs(v) <= kDivergenceLimit) return;
  std::string msg = std::string(where) + ": particle " + std::to_string(particle) +
                    " diverged (coordinate " + std::to_string(v) + ")";
  if (step >= 0) msg += " at step " + std::to_string(step);
  throw DivergenceError(msg);
}

}  // namespace detail

/* One unadjusted Langevin update, in place:
   X <- X - gamma grad_x V(X, theta) + sqrt(2 gamma) N(0, I).
   Noise for particle i, coordinate j comes from rng key (i, j); bind the
   stream to (slot, step) before calling. */
inline void langevin_step(ParticleEnsemble& ens, const Potential& pot,
                          const ParamVector& theta, double gamma,
                          const RngStream& rng) {
  detail::require(gamma >= 0.0, "langevin_step: gamma must be >= 0");
  detail::require(ens.dim() == pot.state_dim(), "langevin_step: state dim mismatch");
  detail::require(int(theta.size()) == pot.param_dim(),
                  "langevin_step: param dim mismatch");
  int d = ens.dim();
  std::vector<double> g(d);
  double noise = std::sqrt(2.0 * gamma);
  for (int i = 0; i < ens.size(); ++i) {
    double* x = ens.row(i);
    pot.grad_x(x, theta, g.data());
    for (int j = 0; j < d; ++j) {
      x[j] += -gamma * g[j] + noise * rng.gaussian(std::uint64_t(i), std::uint64_t(j));
      detail::guard_particle(x[j], i, "langevin_step");
    }
  }
}

/* Exact transition of the mean-reverting unit-variance diffusion
   dX = -(X - mean) dt + sqrt(2) dB over one interval with contraction
   a = e^{-dt}:  X <- mean + a (X - mean) + sqrt(1 - a^2) N(0,1) per axis.
   With a = 1 - 2*delta this realizes, step for step, the Gaussian dynamics
   N(mu_s, sigma_s^2) of the quadratic-potential chain (delta = gamma). */
inline void ou_exact_step(ParticleEnsemble& ens, const ParamVector& mean, double a,
                          const RngStream& rng) {
  detail::require(a > -1.0 && a < 1.0, "ou_exact_step: contraction must be in (-1,1)");
  detail::require(int(mean.size()) == ens.dim(), "ou_exact_step: mean dim mismatch");
  double noise = std::sqrt(1.0 - a * a);
  for (int i = 0; i < ens.size(); ++i)
    for (int j = 0; j < ens.dim(); ++j) {
      double& x = ens.at(i, j);
      x = mean[j] + a * (x - mean[j]) +
          noise * rng.gaussian(std::uint64_t(i), std::uint64_t(j));
      detail::guard_particle(x, i, "ou_exact_step");
    }
}

// Euler-Maruyama step of dX = -X dt + sqrt(2) dB.
inline void ou_forward_step(ParticleEnsemble& ens, double gamma, const RngStream& rng) {
  detail::require(gamma >= 0.0, "ou_forward_step: gamma must be >= 0");
  double noise = std::sqrt(2.0 * gamma);
  for (int i = 0; i < ens.size(); ++i)
    for (int j = 0; j < ens.dim(); ++j) {
      double& x = ens.at(i, j);
      x += -gamma * x + noise * rng.gaussian(std::uint64_t(i), std::uint64_t(j));
      detail::guard_particle(x, i, "ou_forward_step");
    }
}

/* One-dimensional denoising model with the analytic score of the
   Ornstein-Uhlenbeck flow started from N(theta, 1):
   s_theta(x, t) = -(x - theta e^{-t}). */
struct Diffusion1D {
  double theta = 0.0;
  double horizon = 1.0;  // T
  int steps = 100;       // Euler grid

  double score(double x, double t) const { return -(x - theta * std::exp(-t)); }
  // reverse-time SDE drift at backward time tau: Y + 2 s(Y, T - tau)
  double sde_drift(double tau, double y) const {
    return -y + 2.0 * theta * std::exp(-(horizon - tau));
  }
  // probability-flow drift Y + s(Y, T - tau); the state cancels for this score
  double ode_drift(double tau, double /*y*/) const {
    return theta * std::exp(-(horizon - tau));
  }
};

/* Integration record of one particle's reverse SDE trajectory. `values`
   holds the steps+1 grid states; the noise key (stream bound to the slot it
   was generated under, plus the particle id) regenerates the exact Brownian
   increments, so paths never store them. */
struct SdePath {
  std::vector<double> values;
  RngStream noise_key{0, 0};
  std::uint64_t particle = 0;
  double horizon = 0.0;
  int steps = 0;
};

struct SdeRunResult {
  ParticleEnsemble terminal;
  std::vector<SdePath> paths;
};

namespace detail {

// shared by the sampler and by path replay so both stay bit-identical
inline void integrate_backward_sde(const Diffusion1D& m, const RngStream& rng,
                                   std::uint64_t particle, std::vector<double>* path,
                                   double* terminal) {
  double h = m.horizon / m.steps;
  double noise = std::sqrt(2.0 * h);
  double y = rng.at(rng.slot(), 0).gaussian(particle, 0);
  if (path) (*path)[0] = y;
  for (int k = 0; k < m.steps; ++k) {
    double tau = k * h;
    double b = rng.at(rng.slot(), std::uint64_t(k + 1)).gaussian(particle, 0);
    y += h * m.sde_drift(tau, y) + noise * b;
    guard_particle(y, int(particle), "diffusion1d_backward_sde", k + 1);
    if (path) (*path)[k + 1] = y;
  }
  *terminal = y;
}

}  // namespace detail

/* Euler-Maruyama integration of the reverse SDE from Y_0 ~ N(0,1) for n
   particles. Step k's increment uses rng key (slot, step k+1); step 0 is
   reserved for the initial draw. */
inline SdeRunResult diffusion1d_backward_sde(const Diffusion1D& m, int n,
                                             const RngStream& rng,
                                             bool keep_paths = false) {
  detail::require(n >= 1 && m.steps >= 1 && m.horizon > 0.0,
                  "diffusion1d_backward_sde: need n >= 1, steps >= 1, horizon > 0");
  SdeRunResult out{ParticleEnsemble(n, 1), {}};
  if (keep_paths) out.paths.reserve(n);
  for (int i = 0; i < n; ++i) {
    double y = 0.0;
    if (keep_paths) {
      SdePath p{std::vector<double>(size_t(m.steps) + 1, 0.0), rng, std::uint64_t(i),
                m.horizon, m.steps};
      detail::integrate_backward_sde(m, rng, std::uint64_t(i), &p.values, &y);
      out.paths.push_back(std::move(p));
    } else {
      detail::integrate_backward_sde(m, rng, std::uint64_t(i), nullptr, &y);
    }
    out.terminal.at(i, 0) = y;
  }
  return out;
}

// Re-generates a stored path from its noise key; bitwise equal to the original.
inline std::vector<double> replay_path(const Diffusion1D& m, const SdePath& p) {
  detail::require(p.steps == m.steps && p.horizon == m.horizon,
                  "replay_path: path/model step grid mismatch");
  std::vector<double> v(size_t(m.steps) + 1, 0.0);
  double y = 0.0;
  detail::integrate_backward_sde(m, p.noise_key, p.particle, &v, &y);
  return v;
}

/* Deterministic Euler map of the probability-flow equation applied to a given
   initial ensemble (the drift is state-free for this score family, so the map
   is a pure translation of each particle). */
inline ParticleEnsemble diffusion1d_backward_ode(const Diffusion1D& m,
                                                 const ParticleEnsemble& ens0) {
  detail::require(ens0.dim() == 1, "diffusion1d_backward_ode: ensemble must be 1-d");
  detail::require(m.steps >= 1 && m.horizon > 0.0,
                  "diffusion1d_backward_ode: need steps >= 1, horizon > 0");
  ParticleEnsemble out = ens0;
  double h = m.horizon / m.steps;
  for (int i = 0; i < out.size(); ++i) {
    double y = out.at(i, 0);
    for (int k = 0; k < m.steps; ++k) {
      y += h * m.ode_drift(k * h, y);
      detail::guard_particle(y, i, "diffusion1d_backward_ode", k + 1);
    }
    out.at(i, 0) = y;
  }
  return out;
}

}  // namespace impdiff
