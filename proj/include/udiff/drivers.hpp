#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "udiff/model_base.hpp"
#include "udiff/rng.hpp"

namespace udiff {

// epsilon_m = scale * (c0 + m)^{-gamma}, component-wise; gamma = 0 gives a
// constant diagonal rate.
struct LearningSchedule {
  Eigen::VectorXd scale;
  double c0 = 0.0;
  double gamma = 0.0;

  static LearningSchedule constant(Eigen::VectorXd rate) { return {std::move(rate), 0.0, 0.0}; }
  static LearningSchedule constant(int d, double rate) { return constant(Eigen::VectorXd::Constant(d, rate)); }
  static LearningSchedule power(Eigen::VectorXd scale, double c0, double gamma) {
    return {std::move(scale), c0, gamma};
  }

  Eigen::VectorXd rate(int m) const {
    if (gamma == 0.0) return scale;
    const double base = c0 + m;
    if (!(base > 0.0)) throw std::invalid_argument("LearningSchedule: c0 + m must be positive");
    return scale * std::pow(base, -gamma);
  }
};

struct PriorSpec {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;  // diagonal
  bool flat = false;

  static PriorSpec flat_prior(int d) { return {Eigen::VectorXd::Zero(d), Eigen::VectorXd::Ones(d), true}; }

  Eigen::VectorXd grad_log_density(const Eigen::VectorXd& w) const {
    if (flat) return Eigen::VectorXd::Zero(w.size());
    return -((w - mean).array() / variance.array()).matrix();
  }
};

struct ScoreSample {
  Eigen::VectorXd score;  // constrained-space score
  double cost = 0.0;
};

// theta (constrained) and iteration index to a score sample.
using ScoreOracle = std::function<ScoreSample(const Params&, int)>;

struct TraceRow {
  int iteration = 0;
  Eigen::VectorXd working;
  Eigen::VectorXd constrained;
  double score_norm = 0.0;
  double cost = 0.0;
};

struct RunTrace {
  std::vector<TraceRow> rows;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, RunTrace trace) : std::runtime_error(what), trace(std::move(trace)) {}
  RunTrace trace;
};

struct DriverOptions {
  double divergence_bound = 50.0;
};

namespace detail {

inline void guard(const Eigen::VectorXd& w, int m, const DriverOptions& opt, RunTrace& trace) {
  bool bad = false;
  for (Eigen::Index j = 0; j < w.size(); ++j)
    if (!std::isfinite(w[j]) || std::abs(w[j]) > opt.divergence_bound) bad = true;
  if (bad) throw DivergenceError("iterate diverged at iteration " + std::to_string(m), std::move(trace));
}

}  // namespace detail

// theta_m = theta_{m-1} + eps_m * S(theta_{m-1}) in working coordinates.
inline RunTrace sga_run(const ScoreOracle& score, const std::vector<Transform>& tf, const Eigen::VectorXd& w0,
                        const LearningSchedule& schedule, int M, const DriverOptions& opt = {}) {
  RunTrace trace;
  Eigen::VectorXd w = w0;
  trace.rows.push_back({0, w, to_constrained(w, tf), 0.0, 0.0});
  for (int m = 1; m <= M; ++m) {
    const Params th = to_constrained(w, tf);
    const ScoreSample s = score(th, m);
    const Eigen::VectorXd g = score_to_working(s.score, th, tf);
    w = w + schedule.rate(m).cwiseProduct(g);
    trace.rows.push_back({m, w, to_constrained(w, tf), g.norm(), s.cost});
    detail::guard(w, m, opt, trace);
  }
  return trace;
}

// theta_m = theta_{m-1} + eps/2 (grad log p + S) + sqrt(eps) eta.
inline RunTrace sgld_run(const ScoreOracle& score, const std::vector<Transform>& tf, const PriorSpec& prior,
                         const Eigen::VectorXd& w0, const LearningSchedule& schedule, int M, RngStream& noise,
                         const DriverOptions& opt = {}) {
  RunTrace trace;
  Eigen::VectorXd w = w0;
  trace.rows.push_back({0, w, to_constrained(w, tf), 0.0, 0.0});
  for (int m = 1; m <= M; ++m) {
    const Params th = to_constrained(w, tf);
    const ScoreSample s = score(th, m);
    const Eigen::VectorXd g = score_to_working(s.score, th, tf);
    const Eigen::VectorXd eps = schedule.rate(m);
    Eigen::VectorXd eta(w.size());
    for (Eigen::Index j = 0; j < eta.size(); ++j) eta[j] = noise.normal();
    w = w + 0.5 * eps.cwiseProduct(prior.grad_log_density(w) + g) + eps.cwiseSqrt().cwiseProduct(eta);
    trace.rows.push_back({m, w, to_constrained(w, tf), g.norm(), s.cost});
    detail::guard(w, m, opt, trace);
  }
  return trace;
}

// Running means of the iterates after dropping the first burn_fraction.
inline std::vector<Eigen::VectorXd> polyak_ruppert(const std::vector<Eigen::VectorXd>& xs, double burn_fraction) {
  if (xs.empty()) throw std::invalid_argument("polyak_ruppert: empty trace");
  if (!(burn_fraction >= 0.0 && burn_fraction < 1.0))
    throw std::invalid_argument("polyak_ruppert: burn fraction must lie in [0, 1)");
  const std::size_t start = static_cast<std::size_t>(std::floor(burn_fraction * static_cast<double>(xs.size())));
  std::vector<Eigen::VectorXd> out;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(xs.front().size());
  for (std::size_t i = start; i < xs.size(); ++i) {
    sum += xs[i];
    out.push_back(sum / static_cast<double>(i - start + 1));
  }
  return out;
}

inline std::vector<Eigen::VectorXd> polyak_ruppert(const RunTrace& trace, double burn_fraction, bool working = true) {
  std::vector<Eigen::VectorXd> xs;
  for (const auto& r : trace.rows) xs.push_back(working ? r.working : r.constrained);
  return polyak_ruppert(xs, burn_fraction);
}

}  // namespace udiff
