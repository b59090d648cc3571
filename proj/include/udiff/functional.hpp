#pragma once

#include <array>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "udiff/model_base.hpp"
#include "udiff/sde_grid.hpp"

namespace udiff {

inline void check_obs_on_grid(const TimeGrid& grid, const ObservationSet& obs) {
  if (grid.num_obs() != obs.size())
    throw std::invalid_argument("observation count does not match grid markers");
  for (std::size_t p = 0; p < obs.size(); ++p) {
    const double t = grid.times[static_cast<std::size_t>(grid.obs_index[p])];
    if (std::abs(t - obs.times[p]) > 1e-9 * (1.0 + std::abs(t)))
      throw std::invalid_argument("observation time missing from grid");
  }
}

// Observation log-density p at grid level; segment models use the inclusive
// sum over grid points s_k in [t_{p-1}, t_p] (from s_0 for p = 0).
template <class M>
typename M::Accum segment_accum(const M& model, const TimeGrid& grid, const Path<M>& x, std::size_t p) {
  typename M::Accum acc{};
  for (int k = grid.segment_begin(p); k <= grid.obs_index[p]; ++k) {
    const auto a = model.accum_point(x[static_cast<std::size_t>(k)]);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += a[i];
  }
  return acc;
}

// Discretized score functional:
//   sum_k J(X_{k-1})^T Sigma^{-1}(X_{k-1}) (X_k - X_{k-1} - a(X_{k-1}) D_k)
//   + sum_p grad log g(y_p | .) + grad log mu(X_0) (random init only).
template <class M>
ScoreVector eval_score_functional(const M& model, const Params& th, const TimeGrid& grid,
                                  const Path<M>& x, const ObservationSet& obs) {
  if (x.size() != grid.size()) throw std::invalid_argument("trajectory length does not match grid");
  check_obs_on_grid(grid, obs);
  constexpr int D = M::dim;
  constexpr int P = M::n_params;
  std::array<long double, P> acc{};
  for (int k = 1; k <= grid.num_steps(); ++k) {
    const auto& x0 = x[static_cast<std::size_t>(k - 1)];
    const auto& x1 = x[static_cast<std::size_t>(k)];
    const double dt = grid.step(k);
    const auto a = model.drift(th, x0);
    typename M::State r;
    for (int i = 0; i < D; ++i) r[i] = x1[i] - x0[i] - a[i] * dt;
    const auto u = model.sigma_inv_mul(x0, r);
    const auto J = model.drift_jacobian(th, x0);
    for (int j = 0; j < P; ++j) {
      double s = 0.0;
      for (int i = 0; i < D; ++i) s += J(i, j) * u[i];
      acc[static_cast<std::size_t>(j)] += s;
    }
  }
  ScoreVector g(P);
  for (int j = 0; j < P; ++j) g[j] = static_cast<double>(acc[static_cast<std::size_t>(j)]);
  for (std::size_t p = 0; p < obs.size(); ++p) {
    if constexpr (M::obs_kind == ObsKind::pointwise) {
      model.add_obs_score(th, obs.at(p), x[static_cast<std::size_t>(grid.obs_index[p])], g);
    } else {
      model.add_segment_score(th, obs.at(p), segment_accum(model, grid, x, p), grid.nominal_step, g);
    }
  }
  if constexpr (M::random_init) model.add_init_score(th, x[0], g);
  return g;
}

}  // namespace udiff
