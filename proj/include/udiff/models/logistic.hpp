#pragma once

#include <array>
#include <cmath>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/special_functions/digamma.hpp>
#include <Eigen/Core>

#include "udiff/model_base.hpp"
#include "udiff/rng.hpp"

namespace udiff {

inline double log_add_exp(double a, double b) {
  const double m = std::max(a, b);
  if (m == -std::numeric_limits<double>::infinity()) return m;
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

inline double digamma(double x) { return boost::math::digamma(x); }

// Log of NB(y; r, mean exp(log_mu)).
inline double neg_binomial_logpmf(double y, double r, double log_mu) {
  const double log_rm = log_add_exp(std::log(r), log_mu);
  return std::lgamma(y + r) - std::lgamma(r) - std::lgamma(y + 1.0) + r * (std::log(r) - log_rm) +
         y * (log_mu - log_rm);
}

// Stochastic logistic growth after the Lamperti transform X = log(Z)/theta3:
//   dX = (theta1/theta3 - (theta2/theta3) exp(theta3 X)) dt + dW,
//   X_{t_1} ~ N(5/theta3, 100/theta3^2),
//   Y^i | X ~ NB(theta4, exp(theta3 X)), i = 1, 2, independent.
class LogisticModel {
 public:
  static constexpr int dim = 1;
  static constexpr int obs_dim = 2;
  static constexpr int n_params = 4;
  static constexpr ObsKind obs_kind = ObsKind::pointwise;
  static constexpr bool random_init = true;
  using State = std::array<double, 1>;
  using Jacobian = Eigen::Matrix<double, dim, n_params>;

  static std::string name() { return "logistic"; }

  static void check_params(const Params& th) {
    if (th.size() != n_params) throw std::invalid_argument("LogisticModel: expected 4 parameters");
    if (!(th[1] > 0.0) || !(th[2] > 0.0) || !(th[3] > 0.0))
      throw std::invalid_argument("LogisticModel: theta2, theta3, theta4 must be positive");
  }

  static std::vector<Transform> default_transforms() {
    return {Transform::identity, Transform::log, Transform::log, Transform::log};
  }

  State drift(const Params& th, const State& x) const {
    return {th[0] / th[2] - (th[1] / th[2]) * std::exp(th[2] * x[0])};
  }

  Jacobian drift_jacobian(const Params& th, const State& x) const {
    const double e = std::exp(th[2] * x[0]);
    const double t3 = th[2];
    Jacobian j;
    j << 1.0 / t3, -e / t3, -th[0] / (t3 * t3) - (th[1] / (t3 * t3)) * e * (t3 * x[0] - 1.0), 0.0;
    return j;
  }

  State sigma_mul(const State&, const State& v) const { return v; }
  State sigma_inv_mul(const State&, const State& u) const { return u; }
  double log_det_sigma(const State&) const { return 0.0; }

  State init_from_normal(const Params& th, const State& z) const {
    return {5.0 / th[2] + (10.0 / th[2]) * z[0]};
  }

  double init_logdensity(const Params& th, const State& x) const {
    const double sd = 10.0 / th[2];
    const double r = (x[0] - 5.0 / th[2]) / sd;
    return -0.5 * kLogTwoPi - std::log(sd) - 0.5 * r * r;
  }

  void add_init_score(const Params& th, const State& x, ScoreVector& out) const {
    const double c = x[0] - 5.0 / th[2];
    out[2] += 1.0 / th[2] - (th[2] / 100.0) * c * c - (5.0 / 100.0) * c;
  }

  double obs_logdensity(const Params& th, std::span<const double> y, const State& x) const {
    if (y[0] < 0.0 || y[1] < 0.0) throw std::invalid_argument("LogisticModel: negative count");
    const double log_mu = th[2] * x[0];
    return neg_binomial_logpmf(y[0], th[3], log_mu) + neg_binomial_logpmf(y[1], th[3], log_mu);
  }

  void add_obs_score(const Params& th, std::span<const double> y, const State& x,
                     ScoreVector& out) const {
    const double r = th[3];
    const double log_mu = th[2] * x[0];
    const double log_rm = log_add_exp(std::log(r), log_mu);
    const double p = std::exp(log_mu - log_rm);      // mu / (r + mu)
    const double inv_rm = std::exp(-log_rm);         // 1 / (r + mu)
    const double ysum = y[0] + y[1];
    out[2] += -2.0 * r * x[0] * p + ysum * x[0] * (1.0 - p);
    out[3] += digamma(y[0] + r) + digamma(y[1] + r) - 2.0 * digamma(r) +
              2.0 * (std::log(r) - log_rm) + 2.0 * p - ysum * inv_rm;
  }

  std::vector<double> sample_obs(const Params& th, const State& x, RngStream& rng) const {
    const double mu = std::exp(th[2] * x[0]);
    std::vector<double> y(2);
    for (double& yi : y) {
      std::gamma_distribution<double> gamma(th[3], mu / th[3]);
      const double lambda = gamma(rng);
      std::poisson_distribution<long long> pois(lambda);
      yi = lambda > 0.0 ? static_cast<double>(pois(rng)) : 0.0;
    }
    return y;
  }
};

}  // namespace udiff
