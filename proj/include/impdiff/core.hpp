#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace impdiff {

using ParamVector = std::vector<double>;

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// splitmix64 finalizer; full avalanche per stage.
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;

}  // namespace detail

/* Counter-based keyed randomness: every draw is a pure function of
   (seed, experiment, slot, step, particle, draw index), so results do not
   depend on evaluation order and any sub-stream can be replayed in isolation. */
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t experiment = 0)
      : seed_(seed), experiment_(experiment) {
    reprefix();
  }

  RngStream at(std::uint64_t slot, std::uint64_t step) const {
    RngStream r = *this;
    r.slot_ = slot;
    r.step_ = step;
    r.reprefix();
    return r;
  }

  std::uint64_t word(std::uint64_t particle, std::uint64_t draw,
                     std::uint64_t kind) const {
    return detail::mix64(detail::mix64(prefix_ + particle) + 2 * draw + kind);
  }

  // Uniform on (0,1].
  double uniform(std::uint64_t particle, std::uint64_t draw) const {
    return ((word(particle, draw, 2) >> 11) + 1) * 0x1p-53;
  }

  // Standard normal via Box-Muller on two keyed words.
  double gaussian(std::uint64_t particle, std::uint64_t draw) const {
    std::uint64_t h = detail::mix64(prefix_ + particle) + 2 * draw;
    double u1 = ((detail::mix64(h) >> 11) + 1) * 0x1p-53;
    double u2 = (detail::mix64(h + 1) >> 11) * 0x1p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t experiment() const { return experiment_; }
  std::uint64_t slot() const { return slot_; }
  std::uint64_t step() const { return step_; }

 private:
  void reprefix() {
    std::uint64_t h = detail::mix64(seed_ + detail::kGolden);
    h = detail::mix64(h + experiment_);
    h = detail::mix64(h + slot_);
    prefix_ = detail::mix64(h + step_);
  }

  std::uint64_t seed_;
  std::uint64_t experiment_;
  std::uint64_t slot_ = 0;
  std::uint64_t step_ = 0;
  std::uint64_t prefix_ = 0;
};

class ParticleEnsemble {
 public:
  ParticleEnsemble() : n_(0), dim_(0) {}
  ParticleEnsemble(int n, int dim) : n_(n), dim_(dim), x_(size_t(n) * dim, 0.0) {
    detail::require(n >= 1 && dim >= 1, "ensemble needs n >= 1, dim >= 1");
  }

  int size() const { return n_; }
  int dim() const { return dim_; }

  double* row(int i) { return x_.data() + size_t(i) * dim_; }
  const double* row(int i) const { return x_.data() + size_t(i) * dim_; }
  double& at(int i, int j) { return x_[size_t(i) * dim_ + j]; }
  double at(int i, int j) const { return x_[size_t(i) * dim_ + j]; }

  std::vector<double>& raw() { return x_; }
  const std::vector<double>& raw() const { return x_; }

  double mean(int j) const {
    double s = 0.0;
    for (int i = 0; i < n_; ++i) s += at(i, j);
    return s / n_;
  }

  // Population variance (1/n).
  double variance(int j) const {
    double m = mean(j), s = 0.0;
    for (int i = 0; i < n_; ++i) {
      double d = at(i, j) - m;
      s += d * d;
    }
    return s / n_;
  }

 private:
  int n_, dim_;
  std::vector<double> x_;
};

/* i.i.d. N(mean, stddev^2 I). Draw for particle i, coordinate j uses key
   (particle=i, draw=j) of the supplied stream. */
inline ParticleEnsemble gaussian_ensemble(int n, int dim, double mean,
                                          double stddev, const RngStream& rng) {
  detail::require(stddev >= 0.0, "gaussian_ensemble: stddev must be >= 0");
  ParticleEnsemble e(n, dim);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dim; ++j)
      e.at(i, j) = mean + stddev * rng.gaussian(std::uint64_t(i), std::uint64_t(j));
  return e;
}

enum class ScheduleKind { kConstant, kInvSqrtGamma, kInvSqrtEps, kInvSqrtBoth };

/* Inner step size gamma_k and coupling eps_k in (0,1] as functions of k.
   kConstant     : (gamma_base, eps_base)
   kInvSqrtGamma : (gamma_base / sqrt(k+offset), eps_base)
   kInvSqrtEps   : (gamma_base, min(1, 1/sqrt(k+offset)))
   kInvSqrtBoth  : (gamma_base / sqrt(k+offset), 1/sqrt(k+offset))   */
struct StepSchedule {
  ScheduleKind kind = ScheduleKind::kConstant;
  double gamma_base = 0.05;
  double eps_base = 1.0;
  long offset = 1;
};

inline std::pair<double, double> schedule_values(const StepSchedule& s, long k) {
  detail::require(k >= 0, "schedule_values: k must be >= 0");
  detail::require(s.gamma_base > 0.0, "schedule_values: gamma_base must be > 0");
  detail::require(s.eps_base > 0.0 && s.eps_base <= 1.0,
                  "schedule_values: eps_base must be in (0,1]");
  detail::require(s.offset >= 1, "schedule_values: offset must be >= 1");
  double t = double(k + s.offset);
  switch (s.kind) {
    case ScheduleKind::kConstant:
      return {s.gamma_base, s.eps_base};
    case ScheduleKind::kInvSqrtGamma:
      return {s.gamma_base / std::sqrt(t), s.eps_base};
    case ScheduleKind::kInvSqrtEps:
      return {s.gamma_base, std::min(1.0, 1.0 / std::sqrt(t))};
    case ScheduleKind::kInvSqrtBoth:
      return {s.gamma_base / std::sqrt(t), 1.0 / std::sqrt(t)};
  }
  throw std::logic_error("schedule_values: unknown kind");
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "constant") return ScheduleKind::kConstant;
  if (s == "inv-sqrt-gamma") return ScheduleKind::kInvSqrtGamma;
  if (s == "inv-sqrt-eps") return ScheduleKind::kInvSqrtEps;
  if (s == "inv-sqrt-both") return ScheduleKind::kInvSqrtBoth;
  throw std::invalid_argument("unknown schedule kind: " + s);
}

inline std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::kConstant: return "constant";
    case ScheduleKind::kInvSqrtGamma: return "inv-sqrt-gamma";
    case ScheduleKind::kInvSqrtEps: return "inv-sqrt-eps";
    case ScheduleKind::kInvSqrtBoth: return "inv-sqrt-both";
  }
  return "?";
}

}  // namespace impdiff
