#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "udiff/functional.hpp"
#include "udiff/model_base.hpp"
#include "udiff/resampling.hpp"
#include "udiff/rng.hpp"
#include "udiff/sde_grid.hpp"

namespace udiff {

enum class ResamplingCoupling { maximal, common_uniforms, other_maximal };

struct SweepOptions {
  bool adaptive = false;
  double ess_fraction = 0.5;
  bool ancestor_sampling = false;
  ResamplingCoupling coupling = ResamplingCoupling::maximal;
  bool common_residual_uniforms = false;
  std::int64_t rejection_cap = kDefaultRejectionCap;
};

struct SweepDiagnostics {
  std::int64_t euler_steps = 0;  // N per physical system per step of its grid
  int physical_systems = 0;
  std::vector<int> resample_obs;
  std::vector<double> min_ess;  // per observation, over all systems
  CouplingStats coupling;

  void clear() { *this = SweepDiagnostics{}; }
};

// Increments and resampling consume separate streams.
struct SweepStreams {
  RngStream increments;
  RngStream resampling;

  explicit SweepStreams(const SeedSpec& spec)
      : increments(derive_stream(spec.child("inc", 0))), resampling(derive_stream(spec.child("res", 0))) {}
};

template <class M>
struct PathQuad {
  Path<M> coarse, coarse_bar, fine, fine_bar;
};

namespace detail {

// Draws one ancestor index per logical system from S in {1, 2, 4} weight
// vectors, ordered (lead, shadow) or (coarse, coarse_bar, fine, fine_bar).
class AncestorCoupler {
 public:
  AncestorCoupler(const std::vector<const WeightVector*>& w, const SweepOptions& opts) : w_(w), opts_(opts) {
    const ResamplingCoupling c = opts.coupling;
    if (w.size() == 2 && c != ResamplingCoupling::common_uniforms) {
      two_.emplace_back(*w[0], *w[1], opts.common_residual_uniforms);
    } else if (w.size() == 4 && c == ResamplingCoupling::maximal) {
      four_.emplace_back(*w[0], *w[1], *w[2], *w[3], opts.rejection_cap);
    } else if (w.size() == 4 && c == ResamplingCoupling::other_maximal) {
      four_.emplace_back(*w[0], *w[2], *w[1], *w[3], opts.rejection_cap);
    } else if (w.size() != 1 && w.size() != 2 && w.size() != 4) {
      throw std::invalid_argument("AncestorCoupler: unsupported number of systems");
    }
  }

  void draw(RngStream& s, std::array<int, 4>& out, CouplingStats* stats) const {
    if (w_.size() == 1) {
      out[0] = sample_cdf(w_[0]->cdf(), s.uniform());
    } else if (!two_.empty()) {
      const AncestorDraw2 d = two_.front().draw(s);
      out[0] = d.a;
      out[1] = d.b;
    } else if (!four_.empty()) {
      const AncestorDraw4 d = four_.front().draw(s, stats);
      if (opts_.coupling == ResamplingCoupling::other_maximal) {
        out = {d.coarse, d.fine, d.coarse_bar, d.fine_bar};
      } else {
        out = {d.coarse, d.coarse_bar, d.fine, d.fine_bar};
      }
    } else {
      const double u = s.uniform();
      for (std::size_t i = 0; i < w_.size(); ++i) out[i] = sample_cdf(w_[i]->cdf(), u);
    }
  }

 private:
  std::vector<const WeightVector*> w_;
  const SweepOptions& opts_;
  std::vector<MaximalCoupling2> two_;
  std::vector<MaximalCoupling4> four_;
};

// log w_n + log f(next | x_n) for the Euler transition over dt, up to a
// constant common to all n.
template <class M>
std::vector<double> transition_log_weights(const M& model, const Params& th, std::span<const typename M::State> xs,
                                           const WeightVector& w, const typename M::State& next, double dt) {
  using State = typename M::State;
  std::vector<double> lw(xs.size());
  for (std::size_t n = 0; n < xs.size(); ++n) {
    const State& x = xs[n];
    const auto a = model.drift(th, x);
    State r;
    for (int i = 0; i < M::dim; ++i) r[i] = next[i] - x[i] - a[i] * dt;
    const State u = model.sigma_inv_mul(x, r);
    double q = 0.0;
    for (int i = 0; i < M::dim; ++i) q += r[i] * u[i];
    lw[n] = std::log(w[n]) - 0.5 * (q / dt + model.log_det_sigma(x));
  }
  return lw;
}

template <class M>
struct LogicalSystem {
  int level;  // 0 coarse, 1 fine
  const Path<M>* ref;
};

template <class M>
struct AccumType {
  using type = std::array<double, 1>;
};
template <class M>
  requires(M::obs_kind == ObsKind::segment)
struct AccumType<M> {
  using type = typename M::Accum;
};

// Runs S coupled conditional particle filters through one pass over the
// fine grid. Logical systems on the same level whose references are equal
// share one physical particle system; this is exact because equal
// references see equal increments and equal weights, so every coupling
// below returns equal indices for them.
template <class M>
class SweepEngine {
 public:
  using State = typename M::State;
  using Accum = typename AccumType<M>::type;
  static constexpr bool kSegment = M::obs_kind == ObsKind::segment;

  SweepEngine(const M& model, const Params& th, const ObservationSet& obs, int N, const TimeGrid* coarse,
              const TimeGrid& fine, const std::vector<int>* fine_index, std::vector<LogicalSystem<M>> logical,
              const SweepOptions& opts)
      : model_(model), th_(th), obs_(obs), N_(N), coarse_(coarse), fine_(fine), fine_index_(fine_index),
        logical_(std::move(logical)), opts_(opts) {
    if (N < 2) throw std::invalid_argument("particle sweep: N must be >= 2");
    check_obs_on_grid(fine, obs);
    if (coarse) check_obs_on_grid(*coarse, obs);
    for (const auto& ls : logical_) {
      const TimeGrid& g = ls.level == 0 ? *coarse_ : fine_;
      if (ls.ref->size() != g.size()) throw std::invalid_argument("particle sweep: reference not on its grid");
    }
    phys_of_.resize(logical_.size());
    for (std::size_t i = 0; i < logical_.size(); ++i) {
      int found = -1;
      for (std::size_t j = 0; j < i && found < 0; ++j) {
        if (logical_[j].level == logical_[i].level &&
            (logical_[j].ref == logical_[i].ref || *logical_[j].ref == *logical_[i].ref))
          found = phys_of_[j];
      }
      if (found < 0) {
        found = static_cast<int>(phys_.size());
        Phys p;
        p.level = logical_[i].level;
        p.ref = logical_[i].ref;
        p.grid = p.level == 0 ? coarse_ : &fine_;
        phys_.push_back(std::move(p));
      }
      phys_of_[i] = found;
    }
  }

  std::vector<Path<M>> run(SweepStreams& streams, SweepDiagnostics* diag) {
    diag_ = diag;
    const std::size_t n_obs = obs_.size();
    const std::size_t N = static_cast<std::size_t>(N_);
    for (Phys& p : phys_) {
      p.x.assign(p.grid->size() * N, State{});
      p.logw.assign(N, 0.0);
      p.parent.resize(N);
      p.anc.assign(n_obs * N, 0);
      p.resampled.assign(n_obs, 0);
      if constexpr (kSegment) p.accum.assign(N, Accum{});
    }
    if (diag_) {
      diag_->physical_systems = static_cast<int>(phys_.size());
      diag_->min_ess.assign(n_obs, 0.0);
    }

    // Grid index 0.
    std::vector<State> init(N - 1);
    for (std::size_t n = 0; n + 1 < N; ++n) init[n] = draw_initial_state(model_, th_, streams.increments);
    for (Phys& p : phys_) {
      for (std::size_t n = 0; n + 1 < N; ++n) p.x[n] = init[n];
      p.x[N - 1] = (*p.ref)[0];
      if constexpr (kSegment)
        for (std::size_t n = 0; n < N; ++n) p.accum[n] = model_.accum_point(p.x[n]);
    }
    if (fine_.observation_at(0) >= 0) process_observation(static_cast<std::size_t>(fine_.observation_at(0)), 0, 0, streams);

    std::vector<State> inc(N - 1), cinc(N - 1, State{});
    int c = 1;
    const int K = fine_.num_steps();
    for (int k = 1; k <= K; ++k) {
      const double dt = fine_.step(k);
      const double sd = std::sqrt(dt);
      for (std::size_t n = 0; n + 1 < N; ++n)
        for (auto& v : inc[n]) v = sd * streams.increments.normal();
      for (Phys& p : phys_)
        if (p.level == 1) propagate(p, k, inc, dt);
      if (coarse_) {
        for (std::size_t n = 0; n + 1 < N; ++n) cinc[n] = coarsen_increments(cinc[n], inc[n]);
        if ((*fine_index_)[static_cast<std::size_t>(c)] == k) {
          const double dtc = coarse_->step(c);
          for (Phys& p : phys_)
            if (p.level == 0) propagate(p, c, cinc, dtc);
          for (auto& v : cinc) v = State{};
          ++c;
        }
      }
      const int ob = fine_.observation_at(k);
      if (ob >= 0) process_observation(static_cast<std::size_t>(ob), k, c - 1, streams);
    }

    // Terminal indices from the final weights, then backward tracing.
    std::vector<const WeightVector*> wl;
    for (std::size_t i = 0; i < logical_.size(); ++i) wl.push_back(&phys_[static_cast<std::size_t>(phys_of_[i])].w);
    AncestorCoupler coupler(wl, opts_);
    std::array<int, 4> b{};
    coupler.draw(streams.resampling, b, diag_ ? &diag_->coupling : nullptr);

    std::vector<Path<M>> out(logical_.size());
    for (std::size_t i = 0; i < logical_.size(); ++i) {
      const Phys& p = phys_[static_cast<std::size_t>(phys_of_[i])];
      const TimeGrid& g = *p.grid;
      const int Kl = g.num_steps();
      Path<M> path(g.size());
      std::size_t B = static_cast<std::size_t>(b[i]);
      path[static_cast<std::size_t>(Kl)] = p.x[static_cast<std::size_t>(Kl) * N + B];
      for (int k = Kl - 1; k >= 0; --k) {
        const int ob = g.observation_at(k);
        if (ob >= 0 && p.resampled[static_cast<std::size_t>(ob)])
          B = static_cast<std::size_t>(p.anc[static_cast<std::size_t>(ob) * N + B]);
        path[static_cast<std::size_t>(k)] = p.x[static_cast<std::size_t>(k) * N + B];
      }
      out[i] = std::move(path);
    }
    return out;
  }

 private:
  struct Phys {
    int level = 1;
    const Path<M>* ref = nullptr;
    const TimeGrid* grid = nullptr;
    std::vector<State> x;  // grid index major, N per row
    std::vector<double> logw;
    WeightVector w;
    WeightVector as_w;
    std::vector<int> parent;
    bool pending_parent = false;
    std::vector<int> anc;  // observation major, N per row
    std::vector<char> resampled;
    std::vector<Accum> accum;
  };

  void propagate(Phys& p, int k, const std::vector<State>& v, double dt) {
    const std::size_t N = static_cast<std::size_t>(N_);
    const State* prev = p.x.data() + static_cast<std::size_t>(k - 1) * N;
    State* cur = p.x.data() + static_cast<std::size_t>(k) * N;
    for (std::size_t n = 0; n + 1 < N; ++n) {
      const std::size_t src = p.pending_parent ? static_cast<std::size_t>(p.parent[n]) : n;
      cur[n] = euler_step(model_, th_, prev[src], dt, v[n]);
    }
    cur[N - 1] = (*p.ref)[static_cast<std::size_t>(k)];
    p.pending_parent = false;
    if constexpr (kSegment) {
      for (std::size_t n = 0; n < N; ++n) {
        const Accum a = model_.accum_point(cur[n]);
        for (std::size_t i = 0; i < a.size(); ++i) p.accum[n][i] += a[i];
      }
    }
    if (diag_) diag_->euler_steps += N_;
  }

  double obs_loglik(const Phys& p, std::size_t ob, const State& x, std::size_t n) const {
    if constexpr (kSegment) {
      (void)x;
      return model_.segment_logdensity(th_, obs_.at(ob), p.accum[n], p.grid->nominal_step);
    } else {
      (void)n;
      (void)p;
      return model_.obs_logdensity(th_, obs_.at(ob), x);
    }
  }

  // log f(ref_{k+1} | x) for the Euler transition, plus for segment models
  // the next observation's density with x at the segment start.
  void ancestor_weights(Phys& p, std::size_t ob, int k) {
    const std::size_t N = static_cast<std::size_t>(N_);
    const TimeGrid& g = *p.grid;
    const State* row = p.x.data() + static_cast<std::size_t>(k) * N;
    const State& next = (*p.ref)[static_cast<std::size_t>(k + 1)];
    const double dt = g.step(k + 1);
    Accum ahead{};
    if constexpr (kSegment) {
      for (int j = k + 1; j <= g.obs_index[ob + 1]; ++j) {
        const Accum a = model_.accum_point((*p.ref)[static_cast<std::size_t>(j)]);
        for (std::size_t i = 0; i < a.size(); ++i) ahead[i] += a[i];
      }
    }
    std::vector<double> lw = transition_log_weights(model_, th_, std::span<const State>(row, N), p.w, next, dt);
    if constexpr (kSegment) {
      for (std::size_t n = 0; n < N; ++n) {
        Accum s = model_.accum_point(row[n]);
        for (std::size_t i = 0; i < s.size(); ++i) s[i] += ahead[i];
        lw[n] += model_.segment_logdensity(th_, obs_.at(ob + 1), s, g.nominal_step);
      }
    }
    p.as_w = WeightVector::from_log(lw);
  }

  void process_observation(std::size_t ob, int kf, int kc, SweepStreams& streams) {
    const std::size_t N = static_cast<std::size_t>(N_);
    for (Phys& p : phys_) {
      const int k = p.level == 1 ? kf : kc;
      const State* row = p.x.data() + static_cast<std::size_t>(k) * N;
      for (std::size_t n = 0; n < N; ++n) p.logw[n] += obs_loglik(p, ob, row[n], n);
      p.w = WeightVector::from_log(p.logw);
    }
    double min_ess = static_cast<double>(N);
    for (const Phys& p : phys_) min_ess = std::min(min_ess, ess(p.w));
    if (diag_) diag_->min_ess[ob] = min_ess;
    if (kf == fine_.num_steps()) return;

    const bool resample = !opts_.adaptive || min_ess < opts_.ess_fraction * static_cast<double>(N);
    if (resample) {
      std::vector<const WeightVector*> wl;
      for (std::size_t i = 0; i < logical_.size(); ++i) wl.push_back(&phys_[static_cast<std::size_t>(phys_of_[i])].w);
      AncestorCoupler coupler(wl, opts_);
      std::array<int, 4> a{};
      CouplingStats* stats = diag_ ? &diag_->coupling : nullptr;
      for (std::size_t n = 0; n + 1 < N; ++n) {
        coupler.draw(streams.resampling, a, stats);
        for (std::size_t i = 0; i < logical_.size(); ++i)
          phys_[static_cast<std::size_t>(phys_of_[i])].anc[ob * N + n] = a[i];
      }
      if (opts_.ancestor_sampling) {
        std::vector<const WeightVector*> asl;
        for (Phys& p : phys_) ancestor_weights(p, ob, p.level == 1 ? kf : kc);
        for (std::size_t i = 0; i < logical_.size(); ++i)
          asl.push_back(&phys_[static_cast<std::size_t>(phys_of_[i])].as_w);
        AncestorCoupler as_coupler(asl, opts_);
        as_coupler.draw(streams.resampling, a, stats);
        for (std::size_t i = 0; i < logical_.size(); ++i)
          phys_[static_cast<std::size_t>(phys_of_[i])].anc[ob * N + N - 1] = a[i];
      } else {
        for (Phys& p : phys_) p.anc[ob * N + N - 1] = N_ - 1;
      }
      for (Phys& p : phys_) {
        for (std::size_t n = 0; n < N; ++n) p.parent[n] = p.anc[ob * N + n];
        p.pending_parent = true;
        p.resampled[ob] = 1;
        std::fill(p.logw.begin(), p.logw.end(), 0.0);
      }
      if (diag_) diag_->resample_obs.push_back(static_cast<int>(ob));
    }
    if constexpr (kSegment) {
      for (Phys& p : phys_) {
        const int k = p.level == 1 ? kf : kc;
        const State* row = p.x.data() + static_cast<std::size_t>(k) * N;
        for (std::size_t n = 0; n < N; ++n)
          p.accum[n] = model_.accum_point(row[resample ? static_cast<std::size_t>(p.parent[n]) : n]);
      }
    }
  }

  const M& model_;
  const Params& th_;
  const ObservationSet& obs_;
  int N_;
  const TimeGrid* coarse_;
  const TimeGrid& fine_;
  const std::vector<int>* fine_index_;
  std::vector<LogicalSystem<M>> logical_;
  const SweepOptions& opts_;
  std::vector<Phys> phys_;
  std::vector<int> phys_of_;
  SweepDiagnostics* diag_ = nullptr;
};

}  // namespace detail

// One draw from the CPF kernel conditioned on ref.
template <class M>
Path<M> cpf_sweep(const M& model, const Params& th, const TimeGrid& grid, const ObservationSet& obs,
                  const Path<M>& ref, int N, SweepStreams& streams, const SweepOptions& opts = {},
                  SweepDiagnostics* diag = nullptr) {
  detail::SweepEngine<M> eng(model, th, obs, N, nullptr, grid, nullptr, {{1, &ref}}, opts);
  return std::move(eng.run(streams, diag)[0]);
}

// Two CPFs on one grid with common increments and maximally coupled indices.
template <class M>
std::pair<Path<M>, Path<M>> ccpf2_sweep(const M& model, const Params& th, const TimeGrid& grid,
                                        const ObservationSet& obs, const Path<M>& ref, const Path<M>& ref_bar,
                                        int N, SweepStreams& streams, const SweepOptions& opts = {},
                                        SweepDiagnostics* diag = nullptr) {
  detail::SweepEngine<M> eng(model, th, obs, N, nullptr, grid, nullptr, {{1, &ref}, {1, &ref_bar}}, opts);
  auto out = eng.run(streams, diag);
  return {std::move(out[0]), std::move(out[1])};
}

// CPFs at levels l-1 and l; the coarse system is driven by summed fine
// increments. Returns (coarse, fine).
template <class M>
std::pair<Path<M>, Path<M>> mlcpf_sweep(const M& model, const Params& th, const LevelPairGrid& pg,
                                        const ObservationSet& obs, const Path<M>& ref_coarse,
                                        const Path<M>& ref_fine, int N, SweepStreams& streams,
                                        const SweepOptions& opts = {}, SweepDiagnostics* diag = nullptr) {
  detail::SweepEngine<M> eng(model, th, obs, N, &pg.coarse, pg.fine, &pg.fine_index,
                             {{0, &ref_coarse}, {1, &ref_fine}}, opts);
  auto out = eng.run(streams, diag);
  return {std::move(out[0]), std::move(out[1])};
}

template <class M>
PathQuad<M> ccpf4_sweep(const M& model, const Params& th, const LevelPairGrid& pg, const ObservationSet& obs,
                        const Path<M>& ref_coarse, const Path<M>& ref_coarse_bar, const Path<M>& ref_fine,
                        const Path<M>& ref_fine_bar, int N, SweepStreams& streams, const SweepOptions& opts = {},
                        SweepDiagnostics* diag = nullptr) {
  detail::SweepEngine<M> eng(model, th, obs, N, &pg.coarse, pg.fine, &pg.fine_index,
                             {{0, &ref_coarse}, {0, &ref_coarse_bar}, {1, &ref_fine}, {1, &ref_fine_bar}}, opts);
  auto out = eng.run(streams, diag);
  return {std::move(out[0]), std::move(out[1]), std::move(out[2]), std::move(out[3])};
}

}  // namespace udiff
