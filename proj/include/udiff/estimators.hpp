#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "udiff/csmc.hpp"
#include "udiff/functional.hpp"
#include "udiff/rng.hpp"
#include "udiff/sde_grid.hpp"

namespace udiff {

struct EstimatorConfig {
  int N = 64;
  int burn_in = 0;     // b
  int iterations = 0;  // I
  SweepOptions sweep;
  std::int64_t iteration_cap = 100000;
};

// History of one level's chain pair. lead[i] = G(X(i)), shadow[i] = G(Xb(i)).
struct ChainRecord {
  std::vector<ScoreVector> lead;
  std::vector<ScoreVector> shadow;
  int meeting_time = 0;             // tau = inf{i >= 1 : X(i) = Xb(i-1)}
  int iterations = 0;               // last lead index computed, max(I, tau)
  std::int64_t kernel_applications = 0;  // CPF kernels at this level
  std::int64_t euler_steps = 0;
};

class IterationCapExceeded : public std::runtime_error {
 public:
  explicit IterationCapExceeded(const std::string& what) : std::runtime_error(what) {}
};

// A^{b:I} + sum_{i=b+1}^{tau-1} min(1, (i-b)/(I-b+1)) (G(X(i)) - G(Xb(i-1))).
inline ScoreVector time_averaged_score(const ChainRecord& rec, int b, int I) {
  if (b < 0 || b > I) throw std::invalid_argument("time_averaged_score: need 0 <= b <= I");
  if (static_cast<int>(rec.lead.size()) <= std::max(I, rec.meeting_time - 1))
    throw std::invalid_argument("time_averaged_score: record too short");
  const double span = static_cast<double>(I - b + 1);
  ScoreVector s = ScoreVector::Zero(rec.lead.front().size());
  for (int i = b; i <= I; ++i) s += rec.lead[static_cast<std::size_t>(i)];
  s /= span;
  for (int i = b + 1; i <= rec.meeting_time - 1; ++i) {
    const double wgt = std::min(1.0, static_cast<double>(i - b) / span);
    s += wgt * (rec.lead[static_cast<std::size_t>(i)] - rec.shadow[static_cast<std::size_t>(i - 1)]);
  }
  return s;
}

struct LevelEstimate {
  ScoreVector value;
  ChainRecord record;
  int level = 0;
};

struct IncrementEstimate {
  ScoreVector value;  // S_l - S_{l-1}
  ScoreVector fine_score, coarse_score;
  ChainRecord coarse, fine;
  int level = 0;
  int stopping_time = 0;     // max of the two meeting times
  double kernel_units = 0.0;  // in level-l CPF applications
};

namespace detail {

// One level's chain pair: cur = X(i), prev_bar = Xb(i-1).
template <class M>
struct ChainPair {
  Path<M> cur, prev_bar;
  bool met = false;
  ChainRecord rec;

  bool active(int i, int I) const { return !(met && i >= I); }
};

template <class M>
void record_g(const M& model, const Params& th, const TimeGrid& g, const ObservationSet& obs, const Path<M>& x,
              std::vector<ScoreVector>& dst, bool evaluate) {
  dst.push_back(evaluate ? eval_score_functional(model, th, g, x, obs) : ScoreVector());
}

template <class M>
void advance_pair(const M& model, const Params& th, const TimeGrid& g, const ObservationSet& obs, ChainPair<M>& c,
                  Path<M> next, Path<M> next_bar, int i_next, bool evaluate) {
  // next = X(i+1), next_bar = Xb(i); i_next = i+1.
  record_g(model, th, g, obs, next_bar, c.rec.shadow, evaluate);
  record_g(model, th, g, obs, next, c.rec.lead, evaluate);
  c.cur = std::move(next);
  c.prev_bar = std::move(next_bar);
  c.rec.iterations = i_next;
  if (!c.met && c.cur == c.prev_bar) {
    c.met = true;
    c.rec.meeting_time = i_next;
  }
}

inline void check_cap(int i, const EstimatorConfig& cfg, int level) {
  if (i >= cfg.iteration_cap)
    throw IterationCapExceeded("meeting time exceeded iteration cap " + std::to_string(cfg.iteration_cap) +
                               " at level " + std::to_string(level));
}

// Advance one level alone: 2-CCPF before meeting, CPF after.
template <class M>
void step_single(const M& model, const Params& th, const TimeGrid& g, const ObservationSet& obs,
                 const EstimatorConfig& cfg, ChainPair<M>& c, int i, const SeedSpec& seed, bool evaluate) {
  SweepStreams st(seed.child("sweep", i + 1));
  SweepDiagnostics d;
  if (c.met) {
    Path<M> nx = cpf_sweep(model, th, g, obs, c.cur, cfg.N, st, cfg.sweep, &d);
    Path<M> nb = nx;
    c.rec.kernel_applications += 1;
    advance_pair(model, th, g, obs, c, std::move(nx), std::move(nb), i + 1, evaluate);
  } else {
    auto [nx, nb] = ccpf2_sweep(model, th, g, obs, c.cur, c.prev_bar, cfg.N, st, cfg.sweep, &d);
    c.rec.kernel_applications += 2;
    advance_pair(model, th, g, obs, c, std::move(nx), std::move(nb), i + 1, evaluate);
  }
  c.rec.euler_steps += d.euler_steps;
}

template <class M>
ChainRecord run_single_level(const M& model, const Params& th, const TimeGrid& g, const ObservationSet& obs,
                             const EstimatorConfig& cfg, const SeedSpec& seed, bool evaluate) {
  const int I = cfg.iterations;
  ChainPair<M> c;
  {
    RngStream r0 = derive_stream(seed.child("init", 0));
    RngStream r1 = derive_stream(seed.child("init", 1));
    Path<M> x0 = simulate_path(model, th, g, r0);
    c.prev_bar = simulate_path(model, th, g, r1);
    record_g(model, th, g, obs, x0, c.rec.lead, evaluate);
    record_g(model, th, g, obs, c.prev_bar, c.rec.shadow, evaluate);
    SweepStreams st(seed.child("sweep", 1));
    SweepDiagnostics d;
    c.cur = cpf_sweep(model, th, g, obs, x0, cfg.N, st, cfg.sweep, &d);
    c.rec.kernel_applications = 1;
    c.rec.euler_steps = d.euler_steps;
    record_g(model, th, g, obs, c.cur, c.rec.lead, evaluate);
    c.rec.iterations = 1;
    if (c.cur == c.prev_bar) {
      c.met = true;
      c.rec.meeting_time = 1;
    }
  }
  int i = 1;
  while (c.active(i, I)) {
    check_cap(i, cfg, g.level);
    step_single(model, th, g, obs, cfg, c, i, seed, evaluate);
    ++i;
  }
  return std::move(c.rec);
}

template <class M>
std::pair<ChainRecord, ChainRecord> run_level_pair(const M& model, const Params& th, const LevelPairGrid& pg,
                                                   const ObservationSet& obs, const EstimatorConfig& cfg,
                                                   const SeedSpec& seed, bool evaluate) {
  const int I = cfg.iterations;
  ChainPair<M> c, f;
  {
    RngStream r0 = derive_stream(seed.child("init", 0));
    RngStream r1 = derive_stream(seed.child("init", 1));
    auto [xc0, xf0] = simulate_path_pair(model, th, pg, r0);
    auto [bc0, bf0] = simulate_path_pair(model, th, pg, r1);
    record_g(model, th, pg.coarse, obs, xc0, c.rec.lead, evaluate);
    record_g(model, th, pg.coarse, obs, bc0, c.rec.shadow, evaluate);
    record_g(model, th, pg.fine, obs, xf0, f.rec.lead, evaluate);
    record_g(model, th, pg.fine, obs, bf0, f.rec.shadow, evaluate);
    c.prev_bar = std::move(bc0);
    f.prev_bar = std::move(bf0);
    SweepStreams st(seed.child("sweep", 1));
    SweepDiagnostics d;
    auto [xc1, xf1] = mlcpf_sweep(model, th, pg, obs, xc0, xf0, cfg.N, st, cfg.sweep, &d);
    c.cur = std::move(xc1);
    f.cur = std::move(xf1);
    const auto coarse_steps = static_cast<std::int64_t>(cfg.N) * pg.coarse.num_steps();
    c.rec.euler_steps = coarse_steps;
    f.rec.euler_steps = d.euler_steps - coarse_steps;
    c.rec.kernel_applications = f.rec.kernel_applications = 1;
    record_g(model, th, pg.coarse, obs, c.cur, c.rec.lead, evaluate);
    record_g(model, th, pg.fine, obs, f.cur, f.rec.lead, evaluate);
    c.rec.iterations = f.rec.iterations = 1;
    for (ChainPair<M>* p : {&c, &f}) {
      if (p->cur == p->prev_bar) {
        p->met = true;
        p->rec.meeting_time = 1;
      }
    }
  }
  int i = 1;
  while (c.active(i, I) || f.active(i, I)) {
    check_cap(i, cfg, pg.fine.level);
    if (c.active(i, I) && f.active(i, I)) {
      SweepStreams st(seed.child("sweep", i + 1));
      SweepDiagnostics d;
      PathQuad<M> q = ccpf4_sweep(model, th, pg, obs, c.cur, c.prev_bar, f.cur, f.prev_bar, cfg.N, st, cfg.sweep, &d);
      const std::int64_t nc = c.met ? 1 : 2, nf = f.met ? 1 : 2;
      c.rec.kernel_applications += nc;
      f.rec.kernel_applications += nf;
      c.rec.euler_steps += nc * cfg.N * pg.coarse.num_steps();
      f.rec.euler_steps += nf * cfg.N * pg.fine.num_steps();
      advance_pair(model, th, pg.coarse, obs, c, std::move(q.coarse), std::move(q.coarse_bar), i + 1, evaluate);
      advance_pair(model, th, pg.fine, obs, f, std::move(q.fine), std::move(q.fine_bar), i + 1, evaluate);
    } else if (f.active(i, I)) {
      step_single(model, th, pg.fine, obs, cfg, f, i, seed, evaluate);
    } else {
      step_single(model, th, pg.coarse, obs, cfg, c, i, seed, evaluate);
    }
    ++i;
  }
  return {std::move(c.rec), std::move(f.rec)};
}

}  // namespace detail

// Lowest-level estimator: X(0), Xb(0) ~ nu independently, X(1) by CPF,
// then 2-CCPF until i = max(I, tau).
template <class M>
LevelEstimate estimate_increment_l0(const M& model, const Params& th, const TimeGrid& grid,
                                    const ObservationSet& obs, const EstimatorConfig& cfg, const SeedSpec& seed) {
  model.check_params(th);
  LevelEstimate e;
  e.level = grid.level;
  e.record = detail::run_single_level(model, th, grid, obs, cfg, seed, true);
  e.value = time_averaged_score(e.record, cfg.burn_in, cfg.iterations);
  return e;
}

// Increment S_l - S_{l-1} from two across-level chain pairs: ML-CPF first,
// then 4-CCPF. Each level stops once it has met and reached I; the other
// then continues alone.
template <class M>
IncrementEstimate estimate_increment(const M& model, const Params& th, const LevelPairGrid& pg,
                                     const ObservationSet& obs, const EstimatorConfig& cfg, const SeedSpec& seed) {
  model.check_params(th);
  IncrementEstimate e;
  e.level = pg.fine.level;
  auto recs = detail::run_level_pair(model, th, pg, obs, cfg, seed, true);
  e.coarse = std::move(recs.first);
  e.fine = std::move(recs.second);
  e.coarse_score = time_averaged_score(e.coarse, cfg.burn_in, cfg.iterations);
  e.fine_score = time_averaged_score(e.fine, cfg.burn_in, cfg.iterations);
  e.value = e.fine_score - e.coarse_score;
  e.stopping_time = std::max(e.coarse.meeting_time, e.fine.meeting_time);
  e.kernel_units = static_cast<double>(e.coarse.kernel_applications) / 2.0 +
                   static_cast<double>(e.fine.kernel_applications);
  return e;
}

// Meeting time at one level (single) or stopping time of a level pair,
// without evaluating the functional.
template <class M>
int stopping_time(const M& model, const Params& th, const GridScheme& scheme, const ObservationSet& obs, int level,
                  bool pair, const EstimatorConfig& cfg, const SeedSpec& seed) {
  EstimatorConfig c = cfg;
  c.iterations = 0;
  c.burn_in = 0;
  if (!pair) return detail::run_single_level(model, th, scheme.build(level), obs, c, seed, false).meeting_time;
  const LevelPairGrid pg = make_level_pair(scheme, level);
  auto recs = detail::run_level_pair(model, th, pg, obs, c, seed, false);
  return std::max(recs.first.meeting_time, recs.second.meeting_time);
}

enum class PmfKind { sqrt, linear };

struct LevelPMF {
  int l_min = 0;
  std::vector<double> probs;  // over shifted levels j = 0..L_max
  std::vector<double> tails;  // tails[j] = sum_{k >= j} probs[k]

  int truncation() const { return static_cast<int>(probs.size()) - 1; }

  int sample(RngStream& s) const {
    std::vector<double> c(probs.size());
    double acc = 0.0;
    for (std::size_t j = 0; j < probs.size(); ++j) c[j] = (acc += probs[j]);
    return detail::sample_cdf(c, s.uniform());
  }
};

// P_j proportional to 2^{-j kappa} (j+1) log2(2+j)^2, kappa = 1/2 or 1,
// truncated at j = truncation and renormalized.
inline LevelPMF build_level_pmf(PmfKind kind, int l_min, int truncation) {
  if (truncation < 1) throw std::invalid_argument("build_level_pmf: truncation must be >= 1");
  if (l_min < 0) throw std::invalid_argument("build_level_pmf: negative l_min");
  const double kappa = kind == PmfKind::sqrt ? 0.5 : 1.0;
  LevelPMF pmf;
  pmf.l_min = l_min;
  pmf.probs.resize(static_cast<std::size_t>(truncation) + 1);
  double total = 0.0;
  for (int j = 0; j <= truncation; ++j) {
    const double lg = std::log2(2.0 + j);
    total += pmf.probs[static_cast<std::size_t>(j)] = std::exp2(-kappa * j) * (j + 1.0) * lg * lg;
  }
  for (double& p : pmf.probs) p /= total;
  pmf.tails.assign(pmf.probs.size(), 0.0);
  double tail = 0.0;
  for (int j = truncation; j >= 0; --j) pmf.tails[static_cast<std::size_t>(j)] = (tail += pmf.probs[static_cast<std::size_t>(j)]);
  pmf.tails[0] = 1.0;
  return pmf;
}

struct UnbiasedConfig {
  EstimatorConfig estimator;
  LevelPMF pmf = build_level_pmf(PmfKind::linear, 0, 12);
  bool single_term = false;
};

struct ScoreEstimate {
  ScoreVector value;
  int sampled_level = 0;  // shifted L
  std::vector<ScoreVector> increments;      // I_j for j = 0..L
  std::vector<int> stopping_times;          // per shifted level
  std::vector<double> kernel_units;         // per level, in that level's CPF applications
  double cost = 0.0;                        // sum_j units_j * N * K_{l_min+j}
  std::int64_t euler_steps = 0;
  std::string seed;
};

// Independent-sum estimator sum_{j<=L} I_j / P(L >= j), L ~ pmf.
template <class M>
ScoreEstimate unbiased_score(const M& model, const Params& th, const GridScheme& scheme, const ObservationSet& obs,
                             const UnbiasedConfig& cfg, const SeedSpec& seed) {
  model.check_params(th);
  const LevelPMF& pmf = cfg.pmf;
  if (pmf.l_min < scheme.min_level()) throw std::invalid_argument("unbiased_score: l_min below grid resolution");
  ScoreEstimate out;
  out.seed = seed.to_string();
  RngStream ls = derive_stream(seed.child("pmf", 0));
  out.sampled_level = pmf.sample(ls);
  const int L = out.sampled_level;
  out.value = ScoreVector::Zero(M::n_params);
  const int first = cfg.single_term ? L : 0;
  for (int j = 0; j <= L; ++j) {
    if (j < first) {
      out.increments.emplace_back();
      out.stopping_times.push_back(0);
      out.kernel_units.push_back(0.0);
      continue;
    }
    const int level = pmf.l_min + j;
    const SeedSpec sj = seed.child("level", j);
    ScoreVector inc;
    int tau = 0;
    double units = 0.0;
    std::int64_t steps = 0;
    if (j == 0) {
      const TimeGrid g = scheme.build(level);
      LevelEstimate e = estimate_increment_l0(model, th, g, obs, cfg.estimator, sj);
      inc = std::move(e.value);
      tau = e.record.meeting_time;
      units = static_cast<double>(e.record.kernel_applications);
      steps = e.record.euler_steps;
      out.cost += units * cfg.estimator.N * g.num_steps();
    } else {
      const LevelPairGrid pg = make_level_pair(scheme, level);
      IncrementEstimate e = estimate_increment(model, th, pg, obs, cfg.estimator, sj);
      inc = std::move(e.value);
      tau = e.stopping_time;
      units = e.kernel_units;
      steps = e.coarse.euler_steps + e.fine.euler_steps;
      out.cost += units * cfg.estimator.N * pg.fine.num_steps();
    }
    const double weight = cfg.single_term ? pmf.probs[static_cast<std::size_t>(j)] : pmf.tails[static_cast<std::size_t>(j)];
    out.value += inc / weight;
    out.increments.push_back(std::move(inc));
    out.stopping_times.push_back(tau);
    out.kernel_units.push_back(units);
    out.euler_steps += steps;
  }
  return out;
}

struct ReplicateSummary {
  ScoreVector mean;
  Eigen::MatrixXd covariance;
  std::size_t count = 0;

  ScoreVector standard_errors() const {
    return (covariance.diagonal() / static_cast<double>(count)).cwiseSqrt();
  }
};

inline ReplicateSummary average_replicates(const std::vector<ScoreVector>& xs) {
  if (xs.empty()) throw std::invalid_argument("average_replicates: empty list");
  ReplicateSummary s;
  s.count = xs.size();
  const Eigen::Index d = xs.front().size();
  s.mean = ScoreVector::Zero(d);
  for (const auto& x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  s.covariance = Eigen::MatrixXd::Zero(d, d);
  if (xs.size() > 1) {
    for (const auto& x : xs) {
      const ScoreVector c = x - s.mean;
      s.covariance += c * c.transpose();
    }
    s.covariance /= static_cast<double>(xs.size() - 1);
  }
  return s;
}

inline ReplicateSummary average_replicates(const std::vector<ScoreEstimate>& es) {
  std::vector<ScoreVector> xs;
  xs.reserve(es.size());
  for (const auto& e : es) xs.push_back(e.value);
  return average_replicates(xs);
}

// Empirical quantile (linear interpolation between order statistics).
inline double empirical_quantile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("empirical_quantile: empty sample");
  std::sort(v.begin(), v.end());
  const double h = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// Burn-in from pilot runs: ceiling of the 90% quantile of stopping times.
template <class M>
int tune_burnin(const M& model, const Params& th, const GridScheme& scheme, const ObservationSet& obs, int level,
                bool pair, const EstimatorConfig& cfg, int runs, const SeedSpec& seed) {
  std::vector<double> taus;
  for (int r = 0; r < runs; ++r)
    taus.push_back(stopping_time(model, th, scheme, obs, level, pair, cfg, seed.child("pilot", r)));
  return static_cast<int>(std::ceil(empirical_quantile(std::move(taus), 0.9)));
}

enum class EstimatorPreset { naive, simple, time_averaged };

// (b, I) for a preset given the pilot quantile q90.
inline std::pair<int, int> preset_burnin(EstimatorPreset p, int q90) {
  switch (p) {
    case EstimatorPreset::naive: return {0, 0};
    case EstimatorPreset::simple: return {q90, q90};
    case EstimatorPreset::time_averaged: return {q90, 10 * q90};
  }
  throw std::invalid_argument("preset_burnin: unknown preset");
}

}  // namespace udiff
