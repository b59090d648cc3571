#pragma once

#include <array>
#include <cmath>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "udiff/model_base.hpp"
#include "udiff/rng.hpp"

namespace udiff {

// Two coupled grid cells in rescaled coordinates X^i = Z^i / sigma_i.
// theta = (alpha1, beta1, gamma1, delta1, sigma1, kappa1,
//          alpha2, beta2, gamma2, delta2, sigma2, kappa2).
// Counts on [t_{p-1}, t_p] are Poisson with rate
//   Delta_l * sum_{t_{p-1} <= s_k <= t_p} exp(kappa_i + X^i_{s_k}),
// both endpoints included.
class GridCellModel {
 public:
  static constexpr int dim = 2;
  static constexpr int obs_dim = 2;
  static constexpr int n_params = 12;
  static constexpr ObsKind obs_kind = ObsKind::segment;
  static constexpr bool random_init = false;
  using State = std::array<double, 2>;
  using Accum = std::array<double, 2>;
  using Jacobian = Eigen::Matrix<double, dim, n_params>;

  enum Index { a1 = 0, b1, g1, d1, s1, k1, a2, b2, g2, d2, s2, k2 };

  static std::string name() { return "gridcell"; }

  static void check_params(const Params& th) {
    if (th.size() != n_params) throw std::invalid_argument("GridCellModel: expected 12 parameters");
    if (!(th[d1] > 0.0) || !(th[d2] > 0.0) || !(th[s1] > 0.0) || !(th[s2] > 0.0))
      throw std::invalid_argument("GridCellModel: delta and sigma must be positive");
  }

  static std::vector<Transform> default_transforms() {
    std::vector<Transform> t(n_params, Transform::identity);
    t[d1] = t[s1] = t[d2] = t[s2] = Transform::log;
    return t;
  }

  State drift(const Params& th, const State& x) const {
    return {th[a1] * std::tanh(th[b1] * th[s2] * x[1] + th[g1]) / th[s1] - th[d1] * x[0],
            th[a2] * std::tanh(th[b2] * th[s1] * x[0] + th[g2]) / th[s2] - th[d2] * x[1]};
  }

  Jacobian drift_jacobian(const Params& th, const State& x) const {
    Jacobian j = Jacobian::Zero();
    const double t1 = std::tanh(th[b1] * th[s2] * x[1] + th[g1]);
    const double t2 = std::tanh(th[b2] * th[s1] * x[0] + th[g2]);
    const double sech1 = 1.0 - t1 * t1;
    const double sech2 = 1.0 - t2 * t2;
    j(0, a1) = t1 / th[s1];
    j(0, b1) = th[a1] * th[s2] * x[1] * sech1 / th[s1];
    j(0, g1) = th[a1] * sech1 / th[s1];
    j(0, d1) = -x[0];
    j(0, s1) = -th[a1] * t1 / (th[s1] * th[s1]);
    j(0, s2) = th[a1] * th[b1] * x[1] * sech1 / th[s1];
    j(1, a2) = t2 / th[s2];
    j(1, b2) = th[a2] * th[s1] * x[0] * sech2 / th[s2];
    j(1, g2) = th[a2] * sech2 / th[s2];
    j(1, d2) = -x[1];
    j(1, s1) = th[a2] * th[b2] * x[0] * sech2 / th[s2];
    j(1, s2) = -th[a2] * t2 / (th[s2] * th[s2]);
    return j;
  }

  State sigma_mul(const State&, const State& v) const { return v; }
  State sigma_inv_mul(const State&, const State& u) const { return u; }
  double log_det_sigma(const State&) const { return 0.0; }

  State initial_state(const Params&) const { return {0.0, 0.0}; }

  // Theta-free per-point contribution to the segment sum.
  Accum accum_point(const State& x) const { return {std::exp(x[0]), std::exp(x[1])}; }

  double segment_logdensity(const Params& th, std::span<const double> y, const Accum& acc,
                            double dt) const {
    double lp = 0.0;
    for (int i = 0; i < 2; ++i) {
      const double kappa = th[i == 0 ? k1 : k2];
      const double rate = dt * std::exp(kappa) * acc[i];
      lp += (y[i] > 0.0 ? y[i] * (std::log(dt) + kappa + std::log(acc[i])) : 0.0) - rate -
            std::lgamma(y[i] + 1.0);
    }
    return lp;
  }

  void add_segment_score(const Params& th, std::span<const double> y, const Accum& acc, double dt,
                         ScoreVector& out) const {
    out[k1] += y[0] - dt * std::exp(th[k1]) * acc[0];
    out[k2] += y[1] - dt * std::exp(th[k2]) * acc[1];
  }

  std::vector<double> sample_segment_obs(const Params& th, const Accum& acc, double dt,
                                         RngStream& rng) const {
    std::vector<double> y(2);
    for (int i = 0; i < 2; ++i) {
      std::poisson_distribution<long long> pois(dt * std::exp(th[i == 0 ? k1 : k2]) * acc[i]);
      y[static_cast<std::size_t>(i)] = static_cast<double>(pois(rng));
    }
    return y;
  }
};

}  // namespace udiff
