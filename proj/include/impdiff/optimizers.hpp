#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "impdiff/estimators.hpp"
#include "impdiff/samplers.hpp"

namespace impdiff {

/* Per-step record: step sizes actually used, cumulative sampler sweeps over
   the batch, and the parameter snapshot after the update. */
struct TraceRow {
  long k = 0;
  double gamma = 0.0;
  double eps = 1.0;
  long gradient_evaluations = 0;
  ParamVector theta;
};

struct RunTrace {
  std::vector<TraceRow> rows;
  ParamVector final_theta;
  ParticleEnsemble final_ensemble;
  long gradient_evaluations = 0;  // total batch sweeps through a sampler
  long theta_updates = 0;
  long parallel_depth = 0;  // sweeps on the sequential critical path
};

// Fresh batch from p0; the stream is pre-bound to the key reserved for this draw.
using EnsembleInit = std::function<ParticleEnsemble(const RngStream&)>;

/* One sampler transition applied in place. `slot` is the sampler time index
   (queue slot, or inner-step index for time-inhomogeneous chains). The stream
   is pre-bound; implementations key by (particle, draw) only. */
using SlotSampler =
    std::function<void(ParticleEnsemble&, const ParamVector&, int slot, const RngStream&)>;

// Transition for schedule-driven runs where the inner step size varies with k.
using StepSampler =
    std::function<void(ParticleEnsemble&, const ParamVector&, double gamma, const RngStream&)>;

using GradientEstimator = std::function<ParamVector(const ParticleEnsemble&, const ParamVector&)>;

/* Observer invoked after step k completes, with the post-transition working
   ensemble, post-update theta, and cumulative evaluation count. Returning
   false stops the run after this step. */
using StepCallback =
    std::function<bool(long k, const ParticleEnsemble&, const ParamVector&, long evals)>;

namespace detail {

inline void record_row(RunTrace& trace, long k, double gamma, double eps,
                       const ParamVector& theta, int trace_every, long total_steps) {
  if (k % trace_every == 0 || k == total_steps - 1)
    trace.rows.push_back(TraceRow{k, gamma, eps, trace.gradient_evaluations, theta});
}

[[noreturn]] inline void rethrow_with_step(const char* stage, long k, int slot) {
  std::string ctx = std::string(stage) + " failed at step k=" + std::to_string(k) +
                    ", slot=" + std::to_string(slot) + ": ";
  try {
    throw;
  } catch (const DivergenceError& e) {
    throw DivergenceError(ctx + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error(ctx + e.what());
  }
}

inline void apply_update(ParamVector& theta, const ParamVector& gamma, double step,
                         const char* who) {
  require(gamma.size() == theta.size(), std::string(who) + ": gradient size mismatch");
  for (std::size_t j = 0; j < theta.size(); ++j) theta[j] -= step * gamma[j];
}

}  // namespace detail

/* Cold-restart baseline: every outer step draws a fresh batch, runs
   inner_steps sampler transitions at the current theta, then takes one
   gradient step from the terminal batch. Keys: the batch for outer step k is
   drawn at (0, k*(inner_steps+1)) and inner step t advances with
   (0, k*(inner_steps+1)+1+t). */
inline RunTrace run_nested_loop(const ParamVector& theta0, const EnsembleInit& init,
                                int inner_steps, long outer_steps, const SlotSampler& sampler,
                                const GradientEstimator& gamma_fn, double eta,
                                const RngStream& rng, int trace_every = 1,
                                const StepCallback& on_step = {}) {
  detail::require(inner_steps >= 1, "run_nested_loop: inner_steps must be >= 1");
  detail::require(outer_steps >= 0, "run_nested_loop: outer_steps must be >= 0");
  detail::require(trace_every >= 1, "run_nested_loop: trace_every must be >= 1");
  RunTrace trace;
  ParamVector theta = theta0;
  ParticleEnsemble ens;
  const std::uint64_t stride = std::uint64_t(inner_steps) + 1;
  for (long k = 0; k < outer_steps; ++k) {
    const std::uint64_t base = std::uint64_t(k) * stride;
    ens = init(rng.at(0, base));
    for (int t = 0; t < inner_steps; ++t) {
      try {
        sampler(ens, theta, t, rng.at(0, base + 1 + std::uint64_t(t)));
      } catch (...) {
        detail::rethrow_with_step("run_nested_loop: sampler", k, t);
      }
      ++trace.gradient_evaluations;
      ++trace.parallel_depth;
    }
    ParamVector gamma;
    try {
      gamma = gamma_fn(ens, theta);
    } catch (...) {
      detail::rethrow_with_step("run_nested_loop: gradient estimator", k, inner_steps);
    }
    detail::apply_update(theta, gamma, eta, "run_nested_loop");
    ++trace.theta_updates;
    detail::record_row(trace, k, eta, 1.0, theta, trace_every, outer_steps);
    if (on_step && !on_step(k, ens, theta, trace.gradient_evaluations)) break;
  }
  trace.final_theta = theta;
  trace.final_ensemble = std::move(ens);
  return trace;
}

/* Single warm-started chain: the batch keeps evolving while theta moves.
   Gamma is evaluated on the pre-transition batch, the sampler then advances
   one transition with gamma_k, and theta steps by eta_scale * gamma_k * eps_k
   (eta_scale = 1 recovers the coupled two-timescale update; a constant
   schedule with eta_scale = gamma_theta / gamma_x decouples the two rates).
   Keys: init at (0, 0), transition k at (0, k+1). */
inline RunTrace run_implicit_infinite(const ParamVector& theta0, const EnsembleInit& init,
                                      long outer_steps, const StepSampler& sampler,
                                      const GradientEstimator& gamma_fn,
                                      const StepSchedule& schedule, const RngStream& rng,
                                      double eta_scale = 1.0, int trace_every = 1,
                                      const StepCallback& on_step = {}) {
  detail::require(outer_steps >= 0, "run_implicit_infinite: outer_steps must be >= 0");
  detail::require(trace_every >= 1, "run_implicit_infinite: trace_every must be >= 1");
  RunTrace trace;
  ParamVector theta = theta0;
  ParticleEnsemble ens = init(rng.at(0, 0));
  for (long k = 0; k < outer_steps; ++k) {
    auto [gk, ek] = schedule_values(schedule, k);
    ParamVector gamma;
    try {
      gamma = gamma_fn(ens, theta);
    } catch (...) {
      detail::rethrow_with_step("run_implicit_infinite: gradient estimator", k, 0);
    }
    try {
      sampler(ens, theta, gk, rng.at(0, std::uint64_t(k) + 1));
    } catch (...) {
      detail::rethrow_with_step("run_implicit_infinite: sampler", k, 0);
    }
    ++trace.gradient_evaluations;
    ++trace.parallel_depth;
    detail::apply_update(theta, gamma, eta_scale * gk * ek, "run_implicit_infinite");
    ++trace.theta_updates;
    detail::record_row(trace, k, gk, ek, theta, trace_every, outer_steps);
    if (on_step && !on_step(k, ens, theta, trace.gradient_evaluations)) break;
  }
  trace.final_theta = theta;
  trace.final_ensemble = std::move(ens);
  return trace;
}

/* Queue of queue_len+1 slots; slot m holds the batch that has seen m
   transitions. Each step every filled slot advances one transition (all
   reading the pre-step state, so the sweep is one parallel round), slot 0 is
   refilled from p0, and theta steps using the deepest slot's pre-transition
   batch. warm_start=true seeds every slot from p0 up front and updates theta
   from step 0; warm_start=false starts with slot 0 only and freezes theta
   until the queue has filled once. Keys: initial fill of slot m at (m, 0);
   at step k the transition into slot m+1 uses (m+1, k+1) and the refill uses
   (0, k+1). */
inline RunTrace run_implicit_finite_queue(const ParamVector& theta0, const EnsembleInit& init,
                                          int queue_len, long outer_steps,
                                          const SlotSampler& sampler,
                                          const GradientEstimator& gamma_fn, double eta,
                                          const RngStream& rng, bool warm_start = true,
                                          int trace_every = 1, const StepCallback& on_step = {}) {
  detail::require(queue_len >= 1, "run_implicit_finite_queue: queue_len must be >= 1");
  detail::require(outer_steps >= 0, "run_implicit_finite_queue: outer_steps must be >= 0");
  detail::require(trace_every >= 1, "run_implicit_finite_queue: trace_every must be >= 1");
  const int M = queue_len;
  RunTrace trace;
  ParamVector theta = theta0;
  std::vector<ParticleEnsemble> slots(std::size_t(M) + 1);
  int filled = 0;  // deepest valid slot index
  if (warm_start) {
    for (int m = 0; m <= M; ++m) slots[m] = init(rng.at(std::uint64_t(m), 0));
    filled = M;
  } else {
    slots[0] = init(rng.at(0, 0));
  }
  for (long k = 0; k < outer_steps; ++k) {
    const bool update = filled == M;
    ParamVector gamma;
    if (update) {
      try {
        gamma = gamma_fn(slots[std::size_t(M)], theta);
      } catch (...) {
        detail::rethrow_with_step("run_implicit_finite_queue: gradient estimator", k, M);
      }
    }
    for (int m = std::min(filled, M - 1); m >= 0; --m) {
      slots[std::size_t(m) + 1] = std::move(slots[std::size_t(m)]);
      try {
        sampler(slots[std::size_t(m) + 1], theta, m,
                rng.at(std::uint64_t(m) + 1, std::uint64_t(k) + 1));
      } catch (...) {
        detail::rethrow_with_step("run_implicit_finite_queue: sampler", k, m);
      }
      ++trace.gradient_evaluations;
    }
    slots[0] = init(rng.at(0, std::uint64_t(k) + 1));
    filled = std::min(filled + 1, M);
    ++trace.parallel_depth;
    if (update) {
      detail::apply_update(theta, gamma, eta, "run_implicit_finite_queue");
      ++trace.theta_updates;
    }
    detail::record_row(trace, k, eta, 1.0, theta, trace_every, outer_steps);
    if (on_step && !on_step(k, slots[std::size_t(filled)], theta, trace.gradient_evaluations))
      break;
  }
  trace.final_theta = theta;
  trace.final_ensemble = std::move(slots[std::size_t(filled)]);
  return trace;
}

/* Queue over a chain of length inner_steps with queue_len slots,
   queue_len dividing inner_steps: slot m advances sub_steps =
   inner_steps/queue_len transitions per step, covering time indices
   m*sub_steps .. (m+1)*sub_steps-1. With queue_len == inner_steps this is
   bitwise-identical to run_implicit_finite_queue (sub-step s of step k is
   keyed (m+1, k*sub_steps+s+1), the refill (0, k*sub_steps+1)). */
inline RunTrace run_queue_m_divides_t(const ParamVector& theta0, const EnsembleInit& init,
                                      int queue_len, int inner_steps, long outer_steps,
                                      const SlotSampler& sampler,
                                      const GradientEstimator& gamma_fn, double eta,
                                      const RngStream& rng, bool warm_start = true,
                                      int trace_every = 1, const StepCallback& on_step = {}) {
  detail::require(queue_len >= 1, "run_queue_m_divides_t: queue_len must be >= 1");
  detail::require(inner_steps >= 1 && inner_steps % queue_len == 0,
                  "run_queue_m_divides_t: queue_len must divide inner_steps");
  detail::require(outer_steps >= 0, "run_queue_m_divides_t: outer_steps must be >= 0");
  detail::require(trace_every >= 1, "run_queue_m_divides_t: trace_every must be >= 1");
  const int M = queue_len;
  const int sub = inner_steps / queue_len;
  RunTrace trace;
  ParamVector theta = theta0;
  std::vector<ParticleEnsemble> slots(std::size_t(M) + 1);
  int filled = 0;
  if (warm_start) {
    for (int m = 0; m <= M; ++m) slots[m] = init(rng.at(std::uint64_t(m), 0));
    filled = M;
  } else {
    slots[0] = init(rng.at(0, 0));
  }
  for (long k = 0; k < outer_steps; ++k) {
    const std::uint64_t base = std::uint64_t(k) * std::uint64_t(sub);
    const bool update = filled == M;
    ParamVector gamma;
    if (update) {
      try {
        gamma = gamma_fn(slots[std::size_t(M)], theta);
      } catch (...) {
        detail::rethrow_with_step("run_queue_m_divides_t: gradient estimator", k, M);
      }
    }
    for (int m = std::min(filled, M - 1); m >= 0; --m) {
      slots[std::size_t(m) + 1] = std::move(slots[std::size_t(m)]);
      for (int s = 0; s < sub; ++s) {
        try {
          sampler(slots[std::size_t(m) + 1], theta, m * sub + s,
                  rng.at(std::uint64_t(m) + 1, base + std::uint64_t(s) + 1));
        } catch (...) {
          detail::rethrow_with_step("run_queue_m_divides_t: sampler", k, m);
        }
        ++trace.gradient_evaluations;
      }
    }
    slots[0] = init(rng.at(0, base + 1));
    filled = std::min(filled + 1, M);
    trace.parallel_depth += sub;
    if (update) {
      detail::apply_update(theta, gamma, eta, "run_queue_m_divides_t");
      ++trace.theta_updates;
    }
    detail::record_row(trace, k, eta, 1.0, theta, trace_every, outer_steps);
    if (on_step && !on_step(k, slots[std::size_t(filled)], theta, trace.gradient_evaluations))
      break;
  }
  trace.final_theta = theta;
  trace.final_ensemble = std::move(slots[std::size_t(filled)]);
  return trace;
}

namespace detail {

struct AdjointSlot {
  ParticleEnsemble z;
  std::vector<double> a;  // n x d sensitivities
  std::vector<double> g;  // n x p accumulated parameter derivatives
};

}  // namespace detail

/* Two queues over the same drift. The forward queue carries Euler-Maruyama
   batches of the reverse-time SDE (slot m at time m*h, h = horizon/M); once
   it fills, each step spawns an adjoint wave from the terminal batch that
   flows back through a second queue of (Z, A, G) states advanced by the
   midpoint adjoint step. Theta first moves once an adjoint wave completes
   (step 2M), using Gamma = -mean G, so E[R] ascends. Keys follow the plain
   queue: forward init/refill at (0, k+1)-style slots, transition into
   forward slot m+1 at (m+1, k+1); the adjoint queue is deterministic. */
inline RunTrace run_double_queue_adjoint(const ParamVector& theta0, int queue_len,
                                         long outer_steps, const DriftModel& drift,
                                         const RewardSpec& reward, double eta, int batch,
                                         const RngStream& rng, int trace_every = 1,
                                         const StepCallback& on_step = {}) {
  detail::require(queue_len >= 1, "run_double_queue_adjoint: queue_len must be >= 1");
  detail::require(outer_steps >= 0, "run_double_queue_adjoint: outer_steps must be >= 0");
  detail::require(batch >= 1, "run_double_queue_adjoint: batch must be >= 1");
  detail::require(trace_every >= 1, "run_double_queue_adjoint: trace_every must be >= 1");
  detail::require(bool(reward.differentiable) && bool(reward.grad),
                  "run_double_queue_adjoint: needs a differentiable reward");
  detail::require(int(theta0.size()) == drift.param_dim(),
                  "run_double_queue_adjoint: theta dimension mismatch");
  const int M = queue_len, d = drift.state_dim(), p = drift.param_dim();
  const double h = drift.horizon() / M;
  const double noise_sd = std::sqrt(2.0 * h);
  RunTrace trace;
  ParamVector theta = theta0;
  std::vector<ParticleEnsemble> fwd(std::size_t(M) + 1);
  std::vector<detail::AdjointSlot> adj(std::size_t(M) + 1);
  fwd[0] = gaussian_ensemble(batch, d, 0.0, 1.0, rng.at(0, 0));
  int ffilled = 0, afilled = -1;
  std::vector<double> mu(std::size_t(d), 0.0);
  for (long k = 0; k < outer_steps; ++k) {
    const bool update = afilled == M;
    ParamVector gamma(std::size_t(p), 0.0);
    if (update) {
      const auto& g = adj[std::size_t(M)].g;
      for (int i = 0; i < batch; ++i)
        for (int q = 0; q < p; ++q) gamma[std::size_t(q)] -= g[std::size_t(i) * p + q];
      for (int q = 0; q < p; ++q) gamma[std::size_t(q)] /= batch;
    }
    for (int j = std::min(afilled, M - 1); j >= 0; --j) {
      adj[std::size_t(j) + 1] = std::move(adj[std::size_t(j)]);
      auto& slot = adj[std::size_t(j) + 1];
      const double t0 = double(j) * h;
      for (int i = 0; i < batch; ++i)
        detail::adjoint_rk2_step(drift, theta, t0, h, slot.z.row(i),
                                 slot.a.data() + std::size_t(i) * d,
                                 slot.g.data() + std::size_t(i) * p);
      ++trace.gradient_evaluations;
    }
    if (ffilled == M) {
      detail::AdjointSlot spawn;
      spawn.z = std::move(fwd[std::size_t(M)]);
      spawn.a.resize(std::size_t(batch) * d);
      spawn.g.assign(std::size_t(batch) * p, 0.0);
      for (int i = 0; i < batch; ++i)
        reward.grad(spawn.z.row(i), d, spawn.a.data() + std::size_t(i) * d);
      adj[0] = std::move(spawn);
      afilled = std::min(afilled + 1, M);
    }
    for (int m = std::min(ffilled, M - 1); m >= 0; --m) {
      fwd[std::size_t(m) + 1] = std::move(fwd[std::size_t(m)]);
      auto& e = fwd[std::size_t(m) + 1];
      const double tau = double(m) * h;
      const RngStream noise = rng.at(std::uint64_t(m) + 1, std::uint64_t(k) + 1);
      try {
        for (int i = 0; i < batch; ++i) {
          drift.mu(tau, e.row(i), theta, mu.data());
          for (int j = 0; j < d; ++j) {
            e.at(i, j) += h * mu[std::size_t(j)] +
                          noise_sd * noise.gaussian(std::uint64_t(i), std::uint64_t(j));
            detail::guard_particle(e.at(i, j), i, "run_double_queue_adjoint");
          }
        }
      } catch (...) {
        detail::rethrow_with_step("run_double_queue_adjoint: forward transition", k, m);
      }
      ++trace.gradient_evaluations;
    }
    fwd[0] = gaussian_ensemble(batch, d, 0.0, 1.0, rng.at(0, std::uint64_t(k) + 1));
    ffilled = std::min(ffilled + 1, M);
    ++trace.parallel_depth;
    if (update) {
      detail::apply_update(theta, gamma, eta, "run_double_queue_adjoint");
      ++trace.theta_updates;
    }
    detail::record_row(trace, k, eta, 1.0, theta, trace_every, outer_steps);
    if (on_step && !on_step(k, fwd[std::size_t(ffilled)], theta, trace.gradient_evaluations))
      break;
  }
  trace.final_theta = theta;
  trace.final_ensemble = std::move(fwd[std::size_t(ffilled)]);
  return trace;
}

/* Backprop truncated to the final inner transition:
     Gamma = gamma_x * mean_i[ (d2V/dx dtheta)(X_{T-1,i})^T grad R(X_{T,i}) ],
   the gradient of -E[R(X_T)] through the last Langevin update only. Keys
   match run_nested_loop. */
inline RunTrace run_unroll_last_step(const ParamVector& theta0, const EnsembleInit& init,
                                     int inner_steps, long outer_steps, const Potential& pot,
                                     const RewardSpec& reward, double gamma_x, double eta,
                                     const RngStream& rng, int trace_every = 1,
                                     const StepCallback& on_step = {}) {
  detail::require(inner_steps >= 1, "run_unroll_last_step: inner_steps must be >= 1");
  detail::require(outer_steps >= 0, "run_unroll_last_step: outer_steps must be >= 0");
  detail::require(trace_every >= 1, "run_unroll_last_step: trace_every must be >= 1");
  detail::require(bool(reward.differentiable) && bool(reward.grad),
                  "run_unroll_last_step: needs a differentiable reward");
  const int d = pot.state_dim(), p = pot.param_dim();
  detail::require(int(theta0.size()) == p, "run_unroll_last_step: theta dimension mismatch");
  RunTrace trace;
  ParamVector theta = theta0;
  ParticleEnsemble ens;
  const std::uint64_t stride = std::uint64_t(inner_steps) + 1;
  std::vector<double> jac(std::size_t(d) * p, 0.0), rg(std::size_t(d), 0.0);
  for (long k = 0; k < outer_steps; ++k) {
    const std::uint64_t base = std::uint64_t(k) * stride;
    ens = init(rng.at(0, base));
    for (int t = 0; t + 1 < inner_steps; ++t) {
      try {
        langevin_step(ens, pot, theta, gamma_x, rng.at(0, base + 1 + std::uint64_t(t)));
      } catch (...) {
        detail::rethrow_with_step("run_unroll_last_step: sampler", k, t);
      }
      ++trace.gradient_evaluations;
      ++trace.parallel_depth;
    }
    ParticleEnsemble pre = ens;
    try {
      langevin_step(ens, pot, theta, gamma_x, rng.at(0, base + std::uint64_t(inner_steps)));
    } catch (...) {
      detail::rethrow_with_step("run_unroll_last_step: sampler", k, inner_steps - 1);
    }
    ++trace.gradient_evaluations;
    ++trace.parallel_depth;
    ParamVector gamma(std::size_t(p), 0.0);
    const int n = ens.size();
    for (int i = 0; i < n; ++i) {
      pot.grad_x_theta(pre.row(i), theta, jac.data());
      reward.grad(ens.row(i), d, rg.data());
      for (int q = 0; q < p; ++q) {
        double s = 0.0;
        for (int l = 0; l < d; ++l) s += jac[std::size_t(l) * p + q] * rg[std::size_t(l)];
        gamma[std::size_t(q)] += s;
      }
    }
    for (int q = 0; q < p; ++q) gamma[std::size_t(q)] *= gamma_x / n;
    detail::apply_update(theta, gamma, eta, "run_unroll_last_step");
    ++trace.theta_updates;
    detail::record_row(trace, k, eta, 1.0, theta, trace_every, outer_steps);
    if (on_step && !on_step(k, ens, theta, trace.gradient_evaluations)) break;
  }
  trace.final_theta = theta;
  trace.final_ensemble = std::move(ens);
  return trace;
}

// Target tilted toward the reward: V_lambda(x, theta) = V(x, theta) - lambda * R(x).
class TiltedPotential final : public Potential {
 public:
  TiltedPotential(const Potential& base, RewardSpec reward, double lambda)
      : base_(base), reward_(std::move(reward)), lambda_(lambda) {
    detail::require(lambda == 0.0 || (reward_.differentiable && bool(reward_.grad)),
                    "TiltedPotential: guidance needs a differentiable reward");
  }

  int state_dim() const override { return base_.state_dim(); }
  int param_dim() const override { return base_.param_dim(); }

  double value(const double* x, const ParamVector& theta) const override {
    double v = base_.value(x, theta);
    if (lambda_ != 0.0) v -= lambda_ * reward_.eval(x, state_dim());
    return v;
  }

  void grad_x(const double* x, const ParamVector& theta, double* out) const override {
    base_.grad_x(x, theta, out);
    if (lambda_ != 0.0) {
      const int d = state_dim();
      std::vector<double> rg(std::size_t(d), 0.0);
      reward_.grad(x, d, rg.data());
      for (int j = 0; j < d; ++j) out[j] -= lambda_ * rg[std::size_t(j)];
    }
  }

  void grad_theta(const double* x, const ParamVector& theta, double* out) const override {
    base_.grad_theta(x, theta, out);
  }

  void grad_x_theta(const double* x, const ParamVector& theta, double* out) const override {
    base_.grad_x_theta(x, theta, out);
  }

 private:
  const Potential& base_;
  RewardSpec reward_;
  double lambda_;
};

/* Inference-time guidance: theta stays fixed and the chain samples the tilted
   target V - lambda * R. With lambda = 0 the transitions are bitwise those of
   a plain Langevin run under the same keys (init at (0,0), step k at
   (0, k+1)). */
inline RunTrace run_guided_langevin(const ParamVector& theta0, const EnsembleInit& init,
                                    long outer_steps, const Potential& pot,
                                    const RewardSpec& reward, double lambda_guidance,
                                    double gamma_x, const RngStream& rng, int trace_every = 1,
                                    const StepCallback& on_step = {}) {
  detail::require(outer_steps >= 0, "run_guided_langevin: outer_steps must be >= 0");
  detail::require(trace_every >= 1, "run_guided_langevin: trace_every must be >= 1");
  TiltedPotential tilted(pot, reward, lambda_guidance);
  RunTrace trace;
  ParticleEnsemble ens = init(rng.at(0, 0));
  for (long k = 0; k < outer_steps; ++k) {
    try {
      langevin_step(ens, tilted, theta0, gamma_x, rng.at(0, std::uint64_t(k) + 1));
    } catch (...) {
      detail::rethrow_with_step("run_guided_langevin: sampler", k, 0);
    }
    ++trace.gradient_evaluations;
    ++trace.parallel_depth;
    detail::record_row(trace, k, gamma_x, 1.0, theta0, trace_every, outer_steps);
    if (on_step && !on_step(k, ens, theta0, trace.gradient_evaluations)) break;
  }
  trace.final_theta = theta0;
  trace.final_ensemble = std::move(ens);
  return trace;
}

}  // namespace impdiff
