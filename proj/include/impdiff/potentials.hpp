#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include "impdiff/core.hpp"

namespace impdiff {

/* Parameterized potential V(x, theta). grad_x_theta is the mixed second
   derivative d(grad_x)/d(theta), laid out row-major state_dim x param_dim. */
class Potential {
 public:
  virtual ~Potential() = default;
  virtual int state_dim() const = 0;
  virtual int param_dim() const = 0;
  virtual double value(const double* x, const ParamVector& theta) const = 0;
  virtual void grad_x(const double* x, const ParamVector& theta, double* out) const = 0;
  virtual void grad_theta(const double* x, const ParamVector& theta, double* out) const = 0;
  virtual void grad_x_theta(const double* x, const ParamVector& theta, double* out) const = 0;
};

namespace detail {

inline void check_dims(const Potential& pot, size_t xlen, const ParamVector& theta) {
  require(int(xlen) == pot.state_dim(), "potential: state dimension mismatch");
  require(int(theta.size()) == pot.param_dim(), "potential: param dimension mismatch");
}

inline double logsumexp(const std::vector<double>& a) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : a) m = std::max(m, v);
  double s = 0.0;
  for (double v : a) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace detail

// V(x, theta) = 0.5 * ||x - theta||^2, state and parameter share the dimension.
class QuadraticPotential : public Potential {
 public:
  explicit QuadraticPotential(int dim) : dim_(dim) {
    detail::require(dim >= 1, "QuadraticPotential: dim must be >= 1");
  }
  int state_dim() const override { return dim_; }
  int param_dim() const override { return dim_; }

  double value(const double* x, const ParamVector& th) const override {
    double s = 0.0;
    for (int j = 0; j < dim_; ++j) {
      double d = x[j] - th[j];
      s += d * d;
    }
    return 0.5 * s;
  }
  void grad_x(const double* x, const ParamVector& th, double* out) const override {
    for (int j = 0; j < dim_; ++j) out[j] = x[j] - th[j];
  }
  void grad_theta(const double* x, const ParamVector& th, double* out) const override {
    for (int j = 0; j < dim_; ++j) out[j] = th[j] - x[j];
  }
  void grad_x_theta(const double*, const ParamVector&, double* out) const override {
    for (int a = 0; a < dim_; ++a)
      for (int b = 0; b < dim_; ++b) out[a * dim_ + b] = (a == b) ? -1.0 : 0.0;
  }

 private:
  int dim_;
};

enum class WeightMap { kSoftmax, kShiftedLogistic };

/* V(x, theta) = -log sum_i w(theta)_i exp(-||x - z_i||^2) with one parameter
   per center. Softmax weights make V invariant to adding a constant to theta;
   the shifted logistic w_i = eta + (1-eta) sigmoid(theta_i) keeps every weight
   >= eta, which bounds ||grad_theta V||_1 by 1/eta. */
class MixturePotential : public Potential {
 public:
  MixturePotential(std::vector<std::vector<double>> centers, WeightMap map,
                   double eta = 0.2)
      : centers_(std::move(centers)), map_(map), eta_(eta) {
    detail::require(!centers_.empty(), "MixturePotential: needs >= 1 center");
    dim_ = int(centers_.front().size());
    detail::require(dim_ >= 1, "MixturePotential: centers need dim >= 1");
    for (const auto& c : centers_)
      detail::require(int(c.size()) == dim_, "MixturePotential: ragged centers");
    if (map_ == WeightMap::kShiftedLogistic)
      detail::require(eta_ > 0.0 && eta_ < 1.0,
                      "MixturePotential: eta must be in (0,1)");
  }

  int state_dim() const override { return dim_; }
  int param_dim() const override { return int(centers_.size()); }
  WeightMap weight_map() const { return map_; }
  double eta() const { return eta_; }
  const std::vector<std::vector<double>>& centers() const { return centers_; }

  double value(const double* x, const ParamVector& th) const override {
    std::vector<double> lo(centers_.size());
    scores(x, th, lo.data());
    return -detail::logsumexp(lo);
  }

  void grad_x(const double* x, const ParamVector& th, double* out) const override {
    std::vector<double> q(centers_.size());
    responsibilities(x, th, q.data());
    for (int j = 0; j < dim_; ++j) out[j] = 0.0;
    for (size_t i = 0; i < centers_.size(); ++i)
      for (int j = 0; j < dim_; ++j)
        out[j] += q[i] * 2.0 * (x[j] - centers_[i][j]);
  }

  void grad_theta(const double* x, const ParamVector& th, double* out) const override {
    size_t p = centers_.size();
    std::vector<double> q(p);
    responsibilities(x, th, q.data());
    if (map_ == WeightMap::kSoftmax) {
      std::vector<double> w(p);
      softmax_weights(th, w.data());
      for (size_t k = 0; k < p; ++k) out[k] = w[k] - q[k];
    } else {
      for (size_t k = 0; k < p; ++k) out[k] = -q[k] * logistic_logw_deriv(th[k]);
    }
  }

  void grad_x_theta(const double* x, const ParamVector& th, double* out) const override {
    size_t p = centers_.size();
    std::vector<double> q(p);
    responsibilities(x, th, q.data());
    std::vector<double> bary(dim_, 0.0);
    for (size_t i = 0; i < p; ++i)
      for (int j = 0; j < dim_; ++j) bary[j] += q[i] * (x[j] - centers_[i][j]);
    // d(grad_x V)/d(theta_k) = 2 c_k q_k [(x - z_k) - sum_i q_i (x - z_i)],
    // c_k = 1 for softmax, H'(theta_k)/H(theta_k) for the shifted logistic.
    for (int j = 0; j < dim_; ++j)
      for (size_t k = 0; k < p; ++k) {
        double ck = (map_ == WeightMap::kSoftmax) ? 1.0 : logistic_logw_deriv(th[k]);
        out[j * p + k] = 2.0 * ck * q[k] * ((x[j] - centers_[k][j]) - bary[j]);
      }
  }

  void log_weights(const ParamVector& th, double* out) const {
    size_t p = centers_.size();
    if (map_ == WeightMap::kSoftmax) {
      double lse = detail::logsumexp(th);
      for (size_t i = 0; i < p; ++i) out[i] = th[i] - lse;
    } else {
      for (size_t i = 0; i < p; ++i) out[i] = std::log(shifted_logistic(th[i]));
    }
  }

  double shifted_logistic(double t) const {
    return eta_ + (1.0 - eta_) / (1.0 + std::exp(-t));
  }

 private:
  // log w_i(theta) - ||x - z_i||^2
  void scores(const double* x, const ParamVector& th, double* out) const {
    size_t p = centers_.size();
    std::vector<double> lw(p);
    log_weights(th, lw.data());
    for (size_t i = 0; i < p; ++i) {
      double r = 0.0;
      for (int j = 0; j < dim_; ++j) {
        double d = x[j] - centers_[i][j];
        r += d * d;
      }
      out[i] = lw[i] - r;
    }
  }

  void responsibilities(const double* x, const ParamVector& th, double* q) const {
    size_t p = centers_.size();
    scores(x, th, q);
    double m = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < p; ++i) m = std::max(m, q[i]);
    double s = 0.0;
    for (size_t i = 0; i < p; ++i) {
      q[i] = std::exp(q[i] - m);
      s += q[i];
    }
    for (size_t i = 0; i < p; ++i) q[i] /= s;
  }

  void softmax_weights(const ParamVector& th, double* w) const {
    double lse = detail::logsumexp(th);
    for (size_t i = 0; i < centers_.size(); ++i) w[i] = std::exp(th[i] - lse);
  }

  // d/dt log(eta + (1-eta) sigmoid(t)) = H'(t)/H(t)
  double logistic_logw_deriv(double t) const {
    double s = 1.0 / (1.0 + std::exp(-t));
    double h = eta_ + (1.0 - eta_) * s;
    return (1.0 - eta_) * s * (1.0 - s) / h;
  }

  std::vector<std::vector<double>> centers_;
  WeightMap map_;
  double eta_;
  int dim_;
};

// Six wells at the vertices of a regular hexagon, first vertex at angle 0.
inline MixturePotential hexagon_mixture(double radius = 2.0,
                                        WeightMap map = WeightMap::kSoftmax,
                                        double eta = 0.2) {
  std::vector<std::vector<double>> c;
  for (int i = 0; i < 6; ++i) {
    double a = 2.0 * M_PI * i / 6.0;
    c.push_back({radius * std::cos(a), radius * std::sin(a)});
  }
  return MixturePotential(std::move(c), map, eta);
}

// Hexagon plus a seventh well at the origin.
inline MixturePotential hexagon_with_center_mixture(double radius = 2.0,
                                                    WeightMap map = WeightMap::kSoftmax,
                                                    double eta = 0.2) {
  std::vector<std::vector<double>> c;
  for (int i = 0; i < 6; ++i) {
    double a = 2.0 * M_PI * i / 6.0;
    c.push_back({radius * std::cos(a), radius * std::sin(a)});
  }
  c.push_back({0.0, 0.0});
  return MixturePotential(std::move(c), map, eta);
}

inline double potential_value(const Potential& pot, const std::vector<double>& x,
                              const ParamVector& theta) {
  detail::check_dims(pot, x.size(), theta);
  return pot.value(x.data(), theta);
}

inline std::vector<double> grad_x(const Potential& pot, const std::vector<double>& x,
                                  const ParamVector& theta) {
  detail::check_dims(pot, x.size(), theta);
  std::vector<double> g(pot.state_dim());
  pot.grad_x(x.data(), theta, g.data());
  return g;
}

inline ParamVector grad_theta(const Potential& pot, const std::vector<double>& x,
                              const ParamVector& theta) {
  detail::check_dims(pot, x.size(), theta);
  ParamVector g(pot.param_dim());
  pot.grad_theta(x.data(), theta, g.data());
  return g;
}

/* Normalized density on a uniform midpoint grid over an axis-aligned box,
   dimension 1 or 2. node(j) = lo + (j + 0.5) h per axis. */
class GridDistribution {
 public:
  GridDistribution(int dim, std::vector<double> lo, std::vector<double> hi, int pts)
      : dim_(dim), lo_(std::move(lo)), hi_(std::move(hi)), pts_(pts) {
    detail::require(dim_ == 1 || dim_ == 2, "GridDistribution: dim must be 1 or 2");
    detail::require(int(lo_.size()) == dim_ && int(hi_.size()) == dim_,
                    "GridDistribution: box dimension mismatch");
    detail::require(pts_ >= 2, "GridDistribution: needs >= 2 points per axis");
    for (int a = 0; a < dim_; ++a)
      detail::require(hi_[a] > lo_[a], "GridDistribution: requires hi > lo");
    size_t total = 1;
    for (int a = 0; a < dim_; ++a) total *= size_t(pts_);
    log_density_.assign(total, 0.0);
  }

  int dim() const { return dim_; }
  int pts_per_axis() const { return pts_; }
  size_t size() const { return log_density_.size(); }
  const std::vector<double>& lo() const { return lo_; }
  const std::vector<double>& hi() const { return hi_; }

  double step(int axis) const { return (hi_[axis] - lo_[axis]) / pts_; }
  double cell_volume() const {
    double v = 1.0;
    for (int a = 0; a < dim_; ++a) v *= step(a);
    return v;
  }

  // flat index -> node coordinates (row-major, axis 0 outermost)
  void node(size_t flat, double* out) const {
    if (dim_ == 1) {
      out[0] = lo_[0] + (double(flat) + 0.5) * step(0);
    } else {
      size_t i = flat / pts_, j = flat % pts_;
      out[0] = lo_[0] + (double(i) + 0.5) * step(0);
      out[1] = lo_[1] + (double(j) + 0.5) * step(1);
    }
  }

  std::vector<double>& log_density() { return log_density_; }
  const std::vector<double>& log_density() const { return log_density_; }

  double density(size_t flat) const { return std::exp(log_density_[flat]); }

  // integral of the stored density over the box (1 once normalized)
  double total_mass() const {
    double s = 0.0;
    for (size_t i = 0; i < size(); ++i) s += density(i);
    return s * cell_volume();
  }

  // Shifts log-density so the grid integrates to one; returns log of the factor.
  double normalize() {
    std::vector<double> tmp(log_density_);
    double lse = detail::logsumexp(tmp) + std::log(cell_volume());
    for (double& v : log_density_) v -= lse;
    return lse;
  }

  double expectation(const std::function<double(const double*)>& f) const {
    double s = 0.0, xy[2];
    for (size_t i = 0; i < size(); ++i) {
      node(i, xy);
      s += density(i) * f(xy);
    }
    return s * cell_volume();
  }

  double mean(int axis) const {
    return expectation([axis](const double* x) { return x[axis]; });
  }

  double variance(int axis) const {
    double m = mean(axis);
    return expectation([axis, m](const double* x) {
      double d = x[axis] - m;
      return d * d;
    });
  }

 private:
  int dim_;
  std::vector<double> lo_, hi_;
  int pts_;
  std::vector<double> log_density_;
};

struct StationaryGrid {
  GridDistribution grid;
  double log_z;  // log of the normalizing constant of exp(-V(., theta))
};

inline std::vector<double> default_box_lo(int dim) {
  return dim == 1 ? std::vector<double>{-8.0} : std::vector<double>{-6.0, -6.0};
}
inline std::vector<double> default_box_hi(int dim) {
  return dim == 1 ? std::vector<double>{8.0} : std::vector<double>{6.0, 6.0};
}
inline int default_grid_pts(int dim) { return dim == 1 ? 1601 : 601; }

/* Gibbs law exp(-V(x,theta))/Z on a midpoint grid. The box must carry
   essentially all of the mass; callers pick it per family. */
inline StationaryGrid stationary_quadrature(const Potential& pot, const ParamVector& theta,
                                            std::vector<double> lo, std::vector<double> hi,
                                            int pts) {
  int d = pot.state_dim();
  detail::require(d == 1 || d == 2, "stationary_quadrature: state dim must be 1 or 2");
  detail::require(int(theta.size()) == pot.param_dim(),
                  "stationary_quadrature: param dimension mismatch");
  GridDistribution g(d, std::move(lo), std::move(hi), pts);
  double xy[2];
  for (size_t i = 0; i < g.size(); ++i) {
    g.node(i, xy);
    g.log_density()[i] = -pot.value(xy, theta);
  }
  double log_z = g.normalize();
  return {std::move(g), log_z};
}

inline StationaryGrid stationary_quadrature(const Potential& pot, const ParamVector& theta) {
  int d = pot.state_dim();
  return stationary_quadrature(pot, theta, default_box_lo(d), default_box_hi(d),
                               default_grid_pts(d));
}

// log of exp(-V(x,theta))/Z at an arbitrary point; Z > 0 supplied by the caller.
inline double log_density(const Potential& pot, const ParamVector& theta,
                          const std::vector<double>& x, double z) {
  detail::require(z > 0.0, "log_density: Z must be > 0");
  detail::check_dims(pot, x.size(), theta);
  return -pot.value(x.data(), theta) - std::log(z);
}

// KL(p || q) for two grids over the same box and resolution.
inline double grid_kl(const GridDistribution& p, const GridDistribution& q) {
  detail::require(p.dim() == q.dim() && p.pts_per_axis() == q.pts_per_axis() &&
                      p.lo() == q.lo() && p.hi() == q.hi(),
                  "grid_kl: grids must share geometry");
  double s = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    double pi = p.density(i);
    if (pi > 0.0) s += pi * (p.log_density()[i] - q.log_density()[i]);
  }
  return s * p.cell_volume();
}

/* 1-Wasserstein distance between the empirical law of one ensemble coordinate
   and a grid marginal, via integrated CDF difference on the grid nodes. */
inline double wasserstein1_marginal(const ParticleEnsemble& ens, int axis,
                                    const GridDistribution& g) {
  detail::require(axis >= 0 && axis < g.dim(), "wasserstein1_marginal: bad axis");
  int pts = g.pts_per_axis();
  std::vector<double> marg(pts, 0.0);
  double xy[2];
  for (size_t i = 0; i < g.size(); ++i) {
    g.node(i, xy);
    size_t idx = (g.dim() == 1) ? i : (axis == 0 ? i / pts : i % pts);
    marg[idx] += g.density(i);
  }
  double cell = g.step(axis), other = g.dim() == 2 ? g.step(1 - axis) : 1.0;
  for (double& m : marg) m *= other;  // marginal density along the axis

  std::vector<double> xs(ens.size());
  for (int i = 0; i < ens.size(); ++i) xs[i] = ens.at(i, axis);
  std::sort(xs.begin(), xs.end());

  double w1 = 0.0, cdf_grid = 0.0;
  size_t kemp = 0;
  for (int j = 0; j < pts; ++j) {
    double edge = g.lo()[axis] + (j + 1) * cell;
    cdf_grid += marg[j] * cell;
    while (kemp < xs.size() && xs[kemp] <= edge) ++kemp;
    double cdf_emp = double(kemp) / xs.size();
    w1 += std::abs(cdf_emp - cdf_grid) * cell;
  }
  return w1;
}

/* Draws from a grid density by inverse CDF over cells with uniform jitter
   inside the chosen cell. */
inline ParticleEnsemble sample_from_grid(const GridDistribution& g, int n,
                                         const RngStream& rng) {
  detail::require(n >= 1, "sample_from_grid: n must be >= 1");
  std::vector<double> cdf(g.size());
  double acc = 0.0, cell = g.cell_volume();
  for (size_t i = 0; i < g.size(); ++i) {
    acc += g.density(i) * cell;
    cdf[i] = acc;
  }
  ParticleEnsemble out(n, g.dim());
  double xy[2];
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform(std::uint64_t(i), 0) * acc;
    size_t cellix = std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin();
    if (cellix >= g.size()) cellix = g.size() - 1;
    g.node(cellix, xy);
    for (int a = 0; a < g.dim(); ++a) {
      double jitter = rng.uniform(std::uint64_t(i), std::uint64_t(a + 1)) - 0.5;
      out.at(i, a) = xy[a] + jitter * g.step(a);
    }
  }
  return out;
}

/* Gaussian-kernel smoothing of an ensemble onto a grid, bandwidth
   sigma_axis * n^(-1/6) per axis. Diagnostic-quality density for KL traces. */
inline GridDistribution smooth_ensemble_to_grid(const ParticleEnsemble& ens,
                                                const GridDistribution& like) {
  GridDistribution g(like.dim(), like.lo(), like.hi(), like.pts_per_axis());
  int d = g.dim(), pts = g.pts_per_axis(), n = ens.size();
  detail::require(d == ens.dim(), "smooth_ensemble_to_grid: dimension mismatch");
  std::vector<double> bw(d);
  for (int a = 0; a < d; ++a) {
    double sd = std::sqrt(std::max(ens.variance(a), 1e-12));
    bw[a] = sd * std::pow(double(n), -1.0 / 6.0);
  }
  std::vector<double> dens(g.size(), 0.0);
  double norm = 1.0;
  for (int a = 0; a < d; ++a) norm /= std::sqrt(2.0 * M_PI) * bw[a];
  for (int i = 0; i < n; ++i) {
    // truncate the kernel at 5 bandwidths
    int jlo[2] = {0, 0}, jhi[2] = {0, 0};
    for (int a = 0; a < d; ++a) {
      double x = ens.at(i, a);
      jlo[a] = std::max(0, int((x - 5.0 * bw[a] - g.lo()[a]) / g.step(a)));
      jhi[a] = std::min(pts - 1, int((x + 5.0 * bw[a] - g.lo()[a]) / g.step(a)));
    }
    if (d == 1) {
      for (int j = jlo[0]; j <= jhi[0]; ++j) {
        double c = g.lo()[0] + (j + 0.5) * g.step(0);
        double z = (c - ens.at(i, 0)) / bw[0];
        dens[j] += norm * std::exp(-0.5 * z * z);
      }
    } else {
      for (int j0 = jlo[0]; j0 <= jhi[0]; ++j0) {
        double c0 = g.lo()[0] + (j0 + 0.5) * g.step(0);
        double z0 = (c0 - ens.at(i, 0)) / bw[0];
        double e0 = std::exp(-0.5 * z0 * z0);
        for (int j1 = jlo[1]; j1 <= jhi[1]; ++j1) {
          double c1 = g.lo()[1] + (j1 + 0.5) * g.step(1);
          double z1 = (c1 - ens.at(i, 1)) / bw[1];
          dens[size_t(j0) * pts + j1] += norm * e0 * std::exp(-0.5 * z1 * z1);
        }
      }
    }
  }
  const double floor = 1e-300;
  for (size_t i = 0; i < g.size(); ++i)
    g.log_density()[i] = std::log(std::max(dens[i] / n, floor));
  g.normalize();
  return g;
}

}  // namespace impdiff
