#pragma once

#include <algorithm>
#include <limits>
#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "udiff/model_base.hpp"
#include "udiff/rng.hpp"

namespace udiff {

struct TimeGrid {
  int level = 0;
  std::vector<double> times;  // s_0 < ... < s_K
  std::vector<double> steps;  // steps[k-1] = s_k - s_{k-1}
  std::vector<int> obs_index;  // grid index of observation p
  std::vector<int> obs_at;     // observation number at grid index, or -1
  double nominal_step = 0.0;   // Delta_l

  int num_steps() const { return static_cast<int>(steps.size()); }
  std::size_t size() const { return times.size(); }
  double horizon() const { return times.back(); }
  double step(int k) const { return steps[static_cast<std::size_t>(k - 1)]; }
  int observation_at(int k) const { return obs_at[static_cast<std::size_t>(k)]; }
  std::size_t num_obs() const { return obs_index.size(); }

  // First grid index of the segment ending at observation p.
  int segment_begin(std::size_t p) const { return p == 0 ? 0 : obs_index[p - 1]; }
};

namespace detail {

inline TimeGrid finish_grid(int level, std::vector<double> times, std::vector<int> obs_index,
                            double nominal) {
  TimeGrid g;
  g.level = level;
  g.times = std::move(times);
  g.obs_index = std::move(obs_index);
  g.nominal_step = nominal;
  g.steps.resize(g.times.size() - 1);
  for (std::size_t k = 1; k < g.times.size(); ++k) g.steps[k - 1] = g.times[k] - g.times[k - 1];
  g.obs_at.assign(g.times.size(), -1);
  for (std::size_t p = 0; p < g.obs_index.size(); ++p)
    g.obs_at[static_cast<std::size_t>(g.obs_index[p])] = static_cast<int>(p);
  return g;
}

}  // namespace detail

// Dyadic grid on [0, T], s_k = k 2^{-l}, observations at t = 1..T.
inline TimeGrid build_unit_grid(int level, int T) {
  if (level < 0) throw std::invalid_argument("build_unit_grid: negative level");
  if (T < 1) throw std::invalid_argument("build_unit_grid: T must be >= 1");
  const long long per_unit = 1LL << level;
  const long long K = per_unit * T;
  std::vector<double> times(static_cast<std::size_t>(K + 1));
  for (long long k = 0; k <= K; ++k) times[static_cast<std::size_t>(k)] = std::ldexp(double(k), -level);
  std::vector<int> obs(static_cast<std::size_t>(T));
  for (int t = 1; t <= T; ++t) obs[static_cast<std::size_t>(t - 1)] = static_cast<int>(per_unit * t);
  return detail::finish_grid(level, std::move(times), std::move(obs), std::ldexp(1.0, -level));
}

// Grid over [t_1, t_P] with Delta_l = 2^{-l} min gap. Inside each gap the
// points are t_{p-1} + j Delta_l, followed by t_p itself.
inline TimeGrid build_irregular_grid(std::span<const double> obs_times, int level) {
  if (level < 0) throw std::invalid_argument("build_irregular_grid: negative level");
  if (obs_times.size() < 2) throw std::invalid_argument("build_irregular_grid: need >= 2 times");
  double min_gap = std::numeric_limits<double>::infinity();
  for (std::size_t p = 1; p < obs_times.size(); ++p) {
    const double gap = obs_times[p] - obs_times[p - 1];
    if (!(gap > 0.0)) throw std::invalid_argument("build_irregular_grid: times must increase");
    min_gap = std::min(min_gap, gap);
  }
  const double dt = std::ldexp(min_gap, -level);
  constexpr double tol = 1e-9;
  std::vector<double> times{obs_times[0]};
  std::vector<int> obs{0};
  for (std::size_t p = 1; p < obs_times.size(); ++p) {
    const double t0 = obs_times[p - 1];
    const double gap = obs_times[p] - t0;
    const long long full = static_cast<long long>(std::floor(gap / dt + tol));
    const bool remainder = gap - double(full) * dt > tol * dt;
    const long long interior = remainder ? full : full - 1;
    for (long long j = 1; j <= interior; ++j) times.push_back(t0 + double(j) * dt);
    times.push_back(obs_times[p]);
    obs.push_back(static_cast<int>(times.size() - 1));
  }
  return detail::finish_grid(level, std::move(times), std::move(obs), dt);
}

// Dyadic grid on [0, H] with Delta_l = H 2^{-l} and P = 2^q observation
// intervals; observation p sits at p H / P. Requires l >= q.
inline TimeGrid build_interval_grid(double horizon, int intervals_log2, int level) {
  if (!(horizon > 0.0)) throw std::invalid_argument("build_interval_grid: horizon must be positive");
  if (intervals_log2 < 0 || level < intervals_log2)
    throw std::invalid_argument("build_interval_grid: level below interval resolution");
  const long long K = 1LL << level;
  const long long stride = 1LL << (level - intervals_log2);
  std::vector<double> times(static_cast<std::size_t>(K + 1));
  for (long long k = 0; k <= K; ++k)
    times[static_cast<std::size_t>(k)] = std::ldexp(double(k) * horizon, -level);
  std::vector<int> obs;
  for (long long k = stride; k <= K; k += stride) obs.push_back(static_cast<int>(k));
  return detail::finish_grid(level, std::move(times), std::move(obs), std::ldexp(horizon, -level));
}

// How to build the grid at any level for one observation schedule.
struct GridScheme {
  enum class Kind { unit, irregular, intervals };
  Kind kind = Kind::unit;
  int T = 1;
  std::vector<double> obs_times;
  double horizon = 1.0;
  int intervals_log2 = 0;

  static GridScheme unit(int T) {
    GridScheme s;
    s.kind = Kind::unit;
    s.T = T;
    return s;
  }
  static GridScheme irregular(std::vector<double> times) {
    GridScheme s;
    s.kind = Kind::irregular;
    s.obs_times = std::move(times);
    return s;
  }
  static GridScheme intervals(double horizon, int log2_count) {
    GridScheme s;
    s.kind = Kind::intervals;
    s.horizon = horizon;
    s.intervals_log2 = log2_count;
    return s;
  }

  int min_level() const { return kind == Kind::intervals ? intervals_log2 : 0; }

  TimeGrid build(int level) const {
    switch (kind) {
      case Kind::unit: return build_unit_grid(level, T);
      case Kind::irregular: return build_irregular_grid(obs_times, level);
      case Kind::intervals: return build_interval_grid(horizon, intervals_log2, level);
    }
    throw std::logic_error("GridScheme: unknown kind");
  }

  std::vector<double> observation_times() const {
    std::vector<double> out;
    switch (kind) {
      case Kind::unit:
        for (int t = 1; t <= T; ++t) out.push_back(double(t));
        break;
      case Kind::irregular: out = obs_times; break;
      case Kind::intervals: {
        const long long P = 1LL << intervals_log2;
        for (long long p = 1; p <= P; ++p) out.push_back(std::ldexp(double(p) * horizon, -intervals_log2));
        break;
      }
    }
    return out;
  }
};

// Pairing of a level-(l-1) grid with its level-l refinement.
struct LevelPairGrid {
  TimeGrid coarse;
  TimeGrid fine;
  std::vector<int> fine_index;  // fine grid index of coarse point c

  // Coarse step c (1-based) spans fine steps fine_index[c-1]+1 .. fine_index[c].
  std::pair<int, int> fine_steps(int c) const {
    return {fine_index[static_cast<std::size_t>(c - 1)] + 1, fine_index[static_cast<std::size_t>(c)]};
  }
};

inline LevelPairGrid make_level_pair(TimeGrid coarse, TimeGrid fine) {
  if (coarse.num_obs() != fine.num_obs())
    throw std::invalid_argument("make_level_pair: observation counts differ");
  LevelPairGrid pg;
  pg.fine_index.resize(coarse.size());
  std::size_t j = 0;
  for (std::size_t c = 0; c < coarse.size(); ++c) {
    while (j < fine.size() && fine.times[j] < coarse.times[c]) ++j;
    if (j == fine.size() || fine.times[j] != coarse.times[c])
      throw std::invalid_argument("make_level_pair: coarse point missing from fine grid");
    pg.fine_index[c] = static_cast<int>(j);
    if (c > 0) {
      const int span = pg.fine_index[c] - pg.fine_index[c - 1];
      if (span < 1 || span > 2) throw std::invalid_argument("make_level_pair: coarse step must span 1 or 2 fine steps");
    }
  }
  if (pg.fine_index.back() != fine.num_steps())
    throw std::invalid_argument("make_level_pair: horizons differ");
  for (std::size_t p = 0; p < coarse.num_obs(); ++p)
    if (pg.fine_index[static_cast<std::size_t>(coarse.obs_index[p])] != fine.obs_index[p])
      throw std::invalid_argument("make_level_pair: observation markers disagree");
  pg.coarse = std::move(coarse);
  pg.fine = std::move(fine);
  return pg;
}

inline LevelPairGrid make_level_pair(const GridScheme& scheme, int fine_level) {
  return make_level_pair(scheme.build(fine_level - 1), scheme.build(fine_level));
}

// F(x, v) = x + a(x) dt + sigma(x) v.
template <class M>
typename M::State euler_step(const M& model, const Params& th, const typename M::State& x, double dt,
                             const typename M::State& v) {
  if (!(dt > 0.0)) throw std::invalid_argument("euler_step: step must be positive");
  const auto a = model.drift(th, x);
  const auto sv = model.sigma_mul(x, v);
  typename M::State out;
  for (int i = 0; i < M::dim; ++i) out[i] = x[i] + a[i] * dt + sv[i];
  return out;
}

inline std::vector<double> coarsen_increments(std::span<const double> v1, std::span<const double> v2) {
  if (v1.size() != v2.size()) throw std::invalid_argument("coarsen_increments: dimension mismatch");
  std::vector<double> out(v1.size());
  for (std::size_t i = 0; i < v1.size(); ++i) out[i] = v1[i] + v2[i];
  return out;
}

template <std::size_t D>
std::array<double, D> coarsen_increments(const std::array<double, D>& v1, const std::array<double, D>& v2) {
  std::array<double, D> out;
  for (std::size_t i = 0; i < D; ++i) out[i] = v1[i] + v2[i];
  return out;
}

template <class M>
using Path = std::vector<typename M::State>;

template <class M>
typename M::State draw_initial_state(const M& model, const Params& th, RngStream& rng) {
  if constexpr (M::random_init) {
    typename M::State z;
    for (auto& zi : z) zi = rng.normal();
    return model.init_from_normal(th, z);
  } else {
    return model.initial_state(th);
  }
}

// One path from the Euler dynamics on grid.
template <class M>
Path<M> simulate_path(const M& model, const Params& th, const TimeGrid& grid, RngStream& rng) {
  Path<M> x(grid.size());
  x[0] = draw_initial_state(model, th, rng);
  for (int k = 1; k <= grid.num_steps(); ++k) {
    const double dt = grid.step(k);
    const double sd = std::sqrt(dt);
    typename M::State v;
    for (auto& vi : v) vi = sd * rng.normal();
    x[static_cast<std::size_t>(k)] = euler_step(model, th, x[static_cast<std::size_t>(k - 1)], dt, v);
  }
  return x;
}

// Fine and coarse Euler paths driven by one Brownian path.
template <class M>
std::pair<Path<M>, Path<M>> simulate_path_pair(const M& model, const Params& th, const LevelPairGrid& pg,
                                               RngStream& rng) {
  Path<M> fine(pg.fine.size());
  Path<M> coarse(pg.coarse.size());
  fine[0] = draw_initial_state(model, th, rng);
  coarse[0] = fine[0];
  typename M::State acc{};
  std::size_t c = 1;
  for (int k = 1; k <= pg.fine.num_steps(); ++k) {
    const double dt = pg.fine.step(k);
    const double sd = std::sqrt(dt);
    typename M::State v;
    for (auto& vi : v) vi = sd * rng.normal();
    fine[static_cast<std::size_t>(k)] = euler_step(model, th, fine[static_cast<std::size_t>(k - 1)], dt, v);
    acc = coarsen_increments(acc, v);
    if (c < pg.coarse.size() && pg.fine_index[c] == k) {
      coarse[c] = euler_step(model, th, coarse[c - 1], pg.coarse.step(static_cast<int>(c)), acc);
      acc = typename M::State{};
      ++c;
    }
  }
  return {std::move(coarse), std::move(fine)};
}

}  // namespace udiff
