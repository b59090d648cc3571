#pragma once

#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "udiff/model_base.hpp"
#include "udiff/rng.hpp"

namespace udiff {

// dX = theta1 (theta2 - X) dt + sigma dW, X_0 = 0, Y_t ~ N(X_t, theta3).
class OuModel {
 public:
  static constexpr int dim = 1;
  static constexpr int obs_dim = 1;
  static constexpr int n_params = 3;
  static constexpr ObsKind obs_kind = ObsKind::pointwise;
  static constexpr bool random_init = false;
  using State = std::array<double, 1>;
  using Jacobian = Eigen::Matrix<double, dim, n_params>;

  explicit OuModel(double sigma = 1.0) : sigma_(sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("OuModel: sigma must be positive");
  }

  static std::string name() { return "ou"; }
  double sigma() const { return sigma_; }

  static void check_params(const Params& th) {
    if (th.size() != n_params) throw std::invalid_argument("OuModel: expected 3 parameters");
    if (!(th[0] > 0.0) || !(th[2] > 0.0))
      throw std::invalid_argument("OuModel: theta1 and theta3 must be positive");
  }

  static std::vector<Transform> default_transforms() {
    return {Transform::log, Transform::identity, Transform::log};
  }

  State drift(const Params& th, const State& x) const { return {th[0] * (th[1] - x[0])}; }

  Jacobian drift_jacobian(const Params& th, const State& x) const {
    Jacobian j;
    j << th[1] - x[0], th[0], 0.0;
    return j;
  }

  State sigma_mul(const State&, const State& v) const { return {sigma_ * v[0]}; }
  State sigma_inv_mul(const State&, const State& u) const { return {u[0] / (sigma_ * sigma_)}; }
  double log_det_sigma(const State&) const { return 2.0 * std::log(sigma_); }

  State initial_state(const Params&) const { return {0.0}; }

  double obs_logdensity(const Params& th, std::span<const double> y, const State& x) const {
    const double r = y[0] - x[0];
    return -0.5 * (kLogTwoPi + std::log(th[2]) + r * r / th[2]);
  }

  void add_obs_score(const Params& th, std::span<const double> y, const State& x,
                     ScoreVector& out) const {
    const double r = y[0] - x[0];
    out[2] += -0.5 / th[2] + r * r / (2.0 * th[2] * th[2]);
  }

  std::vector<double> sample_obs(const Params& th, const State& x, RngStream& rng) const {
    return {x[0] + std::sqrt(th[2]) * rng.normal()};
  }

 private:
  double sigma_;
};

}  // namespace udiff
