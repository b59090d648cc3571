#pragma once

#include <array>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace udiff {

using Params = Eigen::VectorXd;
using ScoreVector = Eigen::VectorXd;

enum class Transform { identity, log };

// Observation flavours. Pointwise densities depend on the state at t_p only;
// segment densities depend on the grid path over [t_{p-1}, t_p] and on the
// level step size.
enum class ObsKind { pointwise, segment };

inline constexpr double kLogTwoPi = 1.8378770664093454836;

struct ObservationSet {
  std::vector<double> times;
  std::vector<double> values;  // row-major, dim entries per observation
  int dim = 1;

  std::size_t size() const { return times.size(); }
  std::span<const double> at(std::size_t p) const {
    return {values.data() + p * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
  }

  void validate(bool counts = false) const {
    if (dim < 1) throw std::invalid_argument("ObservationSet: dim must be >= 1");
    if (values.size() != times.size() * static_cast<std::size_t>(dim))
      throw std::invalid_argument("ObservationSet: values/times size mismatch");
    for (std::size_t p = 1; p < times.size(); ++p)
      if (!(times[p] > times[p - 1]))
        throw std::invalid_argument("ObservationSet: times must be strictly increasing");
    for (double v : values) {
      if (!std::isfinite(v)) throw std::invalid_argument("ObservationSet: non-finite value");
      if (counts && (v < 0.0 || v != std::floor(v)))
        throw std::invalid_argument("ObservationSet: counts must be nonnegative integers");
    }
  }
};

inline Params to_constrained(const Params& working, std::span<const Transform> tf) {
  if (static_cast<std::size_t>(working.size()) != tf.size())
    throw std::invalid_argument("to_constrained: transform size mismatch");
  Params out = working;
  for (Eigen::Index j = 0; j < out.size(); ++j)
    if (tf[static_cast<std::size_t>(j)] == Transform::log) out[j] = std::exp(working[j]);
  return out;
}

inline Params from_constrained(const Params& theta, std::span<const Transform> tf) {
  if (static_cast<std::size_t>(theta.size()) != tf.size())
    throw std::invalid_argument("from_constrained: transform size mismatch");
  Params out = theta;
  for (Eigen::Index j = 0; j < out.size(); ++j) {
    if (tf[static_cast<std::size_t>(j)] != Transform::log) continue;
    if (!(theta[j] > 0.0))
      throw std::invalid_argument("from_constrained: log component must be positive");
    out[j] = std::log(theta[j]);
  }
  return out;
}

// d/dw f(theta(w)) = f'(theta) * dtheta/dw; dtheta/dw = theta on log components.
inline ScoreVector score_to_working(const ScoreVector& score, const Params& theta,
                                    std::span<const Transform> tf) {
  ScoreVector out = score;
  for (Eigen::Index j = 0; j < out.size(); ++j)
    if (tf[static_cast<std::size_t>(j)] == Transform::log) out[j] *= theta[j];
  return out;
}

// Model contract used by the kernels. State is a fixed-size array; the drift
// Jacobian with respect to theta is dim x n_params.
template <class M>
concept DiffusionModel = requires(const M& m, const Params& th, const typename M::State& x) {
  { M::dim } -> std::convertible_to<int>;
  { M::obs_dim } -> std::convertible_to<int>;
  { M::obs_kind } -> std::convertible_to<ObsKind>;
  { M::random_init } -> std::convertible_to<bool>;
  { M::n_params } -> std::convertible_to<int>;
  { m.drift(th, x) } -> std::same_as<typename M::State>;
  { m.sigma_mul(x, x) } -> std::same_as<typename M::State>;
  { m.sigma_inv_mul(x, x) } -> std::same_as<typename M::State>;
  { m.log_det_sigma(x) } -> std::convertible_to<double>;
  m.check_params(th);
};

template <int D>
inline std::array<double, D> add(const std::array<double, D>& a, const std::array<double, D>& b) {
  std::array<double, D> r;
  for (int i = 0; i < D; ++i) r[i] = a[i] + b[i];
  return r;
}

}  // namespace udiff
