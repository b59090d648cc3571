#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "udiff/rng.hpp"

namespace udiff {

namespace detail {

inline std::vector<double> cumulative(std::span<const double> p) {
  std::vector<double> c(p.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    s += p[i];
    c[i] = s;
  }
  return c;
}

// Inverse-CDF draw with one uniform. The chosen index always has positive
// mass: rounding at the top end falls back to the last positive entry.
inline int sample_cdf(std::span<const double> cdf, double u) {
  const double target = u * cdf.back();
  auto it = std::upper_bound(cdf.begin(), cdf.end(), target);
  std::size_t i = static_cast<std::size_t>(it - cdf.begin());
  if (i == cdf.size()) {
    i = cdf.size() - 1;
    while (i > 0 && cdf[i] == cdf[i - 1]) --i;
  }
  return static_cast<int>(i);
}

}  // namespace detail

class WeightVector {
 public:
  WeightVector() = default;

  static WeightVector from_log(std::span<const double> logw) {
    if (logw.empty()) throw std::invalid_argument("normalize: empty weight vector");
    double m = -std::numeric_limits<double>::infinity();
    for (double v : logw) {
      if (std::isnan(v)) throw std::invalid_argument("normalize: NaN log-weight");
      m = std::max(m, v);
    }
    if (!std::isfinite(m)) throw std::invalid_argument("normalize: all weights are zero");
    WeightVector w;
    w.p_.resize(logw.size());
    double s = 0.0;
    for (std::size_t i = 0; i < logw.size(); ++i) s += (w.p_[i] = std::exp(logw[i] - m));
    for (double& v : w.p_) v /= s;
    w.cdf_ = detail::cumulative(w.p_);
    return w;
  }

  static WeightVector from_probs(std::span<const double> p) {
    double s = 0.0;
    for (double v : p) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("WeightVector: invalid probability");
      s += v;
    }
    if (!(s > 0.0)) throw std::invalid_argument("WeightVector: zero total mass");
    WeightVector w;
    w.p_.assign(p.begin(), p.end());
    for (double& v : w.p_) v /= s;
    w.cdf_ = detail::cumulative(w.p_);
    return w;
  }

  std::size_t size() const { return p_.size(); }
  double operator[](std::size_t i) const { return p_[i]; }
  std::span<const double> probs() const { return p_; }
  std::span<const double> cdf() const { return cdf_; }

  // Bitwise equality of the normalized vectors.
  bool identical(const WeightVector& o) const { return p_ == o.p_; }

 private:
  std::vector<double> p_;
  std::vector<double> cdf_;
};

inline WeightVector normalize(std::span<const double> logw) { return WeightVector::from_log(logw); }

inline double ess(const WeightVector& w) {
  double s = 0.0;
  for (double v : w.probs()) s += v * v;
  return 1.0 / s;
}

inline int multinomial(RngStream& s, const WeightVector& w) {
  return detail::sample_cdf(w.cdf(), s.uniform());
}

struct AncestorDraw2 {
  int a = 0;
  int b = 0;
};

struct AncestorDraw4 {
  int coarse = 0;
  int coarse_bar = 0;
  int fine = 0;
  int fine_bar = 0;
};

struct CouplingStats {
  std::int64_t draws = 0;
  std::int64_t rejection_iterations = 0;
};

// Maximal coupling of R(w) and R(wb) with independent residuals. Holds
// references; the weight vectors must outlive it.
class MaximalCoupling2 {
 public:
  MaximalCoupling2(const WeightVector& w, const WeightVector& wb, bool common_residual_uniforms = false)
      : w_(&w), wb_(&wb), common_(common_residual_uniforms) {
    if (w.size() != wb.size()) throw std::invalid_argument("maximal coupling: mismatched N");
    identical_ = w.identical(wb);
    if (identical_) {
      mu_ = 1.0;
      return;
    }
    const std::size_t n = w.size();
    std::vector<double> o(n), r(n), rb(n);
    for (std::size_t i = 0; i < n; ++i) {
      o[i] = std::min(w[i], wb[i]);
      r[i] = w[i] - o[i];
      rb[i] = wb[i] - o[i];
    }
    o_cdf_ = detail::cumulative(o);
    r_cdf_ = detail::cumulative(r);
    rb_cdf_ = detail::cumulative(rb);
    mu_ = o_cdf_.back();
    overlap_ = std::move(o);
    residual_ = std::move(r);
    residual_bar_ = std::move(rb);
  }

  bool identical() const { return identical_; }
  double overlap_mass() const { return mu_; }

  AncestorDraw2 draw(RngStream& s) const {
    if (identical_) {
      const int a = detail::sample_cdf(w_->cdf(), s.uniform());
      return {a, a};
    }
    const bool residual_empty = !(r_cdf_.back() > 0.0) || !(rb_cdf_.back() > 0.0);
    if (s.uniform() < mu_ || residual_empty) {
      const int a = detail::sample_cdf(o_cdf_, s.uniform());
      return {a, a};
    }
    const double u = s.uniform();
    const int a = detail::sample_cdf(r_cdf_, u);
    const int b = detail::sample_cdf(rb_cdf_, common_ ? u : s.uniform());
    return {a, b};
  }

  // R(a, b) = 1{a=b} o_a + (1 - mu) (r_a / sum r)(rb_b / sum rb).
  double pmf(int a, int b) const {
    const std::size_t ia = static_cast<std::size_t>(a), ib = static_cast<std::size_t>(b);
    if (identical_) return a == b ? (*w_)[ia] : 0.0;
    double v = a == b ? overlap_[ia] : 0.0;
    const double rm = r_cdf_.back(), rbm = rb_cdf_.back();
    if (rm > 0.0 && rbm > 0.0) v += (1.0 - mu_) * (residual_[ia] / rm) * (residual_bar_[ib] / rbm);
    return v;
  }

 private:
  const WeightVector* w_;
  const WeightVector* wb_;
  bool common_;
  bool identical_ = false;
  double mu_ = 1.0;
  std::vector<double> overlap_, residual_, residual_bar_;
  std::vector<double> o_cdf_, r_cdf_, rb_cdf_;
};

inline AncestorDraw2 maximal_couple2(RngStream& s, const WeightVector& w, const WeightVector& wb) {
  return MaximalCoupling2(w, wb).draw(s);
}

inline Eigen::MatrixXd coupling_pmf(const WeightVector& w, const WeightVector& wb) {
  MaximalCoupling2 c(w, wb);
  const int n = static_cast<int>(w.size());
  Eigen::MatrixXd m(n, n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) m(a, b) = c.pmf(a, b);
  return m;
}

inline constexpr std::int64_t kDefaultRejectionCap = 10'000'000;

// Coupling of the across-level maximal couplings R(wc, wf) and R(wcb, wfb)
// that maximizes P((A_c, A_f) = (Ab_c, Ab_f)), with the level-faithful
// branches used when one level's pair of weights is identical.
class MaximalCoupling4 {
 public:
  MaximalCoupling4(const WeightVector& wc, const WeightVector& wcb, const WeightVector& wf,
                   const WeightVector& wfb, std::int64_t cap = kDefaultRejectionCap)
      : wc_(&wc), wcb_(&wcb), wf_(&wf), wfb_(&wfb), lead_(wc, wf), shadow_(wcb, wfb), cap_(cap) {
    const std::size_t n = wc.size();
    if (wcb.size() != n || wf.size() != n || wfb.size() != n)
      throw std::invalid_argument("maximal_couple4: mismatched N");
    coarse_same_ = wc.identical(wcb);
    fine_same_ = wf.identical(wfb);
  }

  bool coarse_identical() const { return coarse_same_; }
  bool fine_identical() const { return fine_same_; }

  AncestorDraw4 draw(RngStream& s, CouplingStats* stats = nullptr) const {
    if (stats) ++stats->draws;
    const AncestorDraw2 lead = lead_.draw(s);
    AncestorDraw4 out{lead.a, lead.a, lead.b, lead.b};
    if (coarse_same_ && fine_same_) return out;
    if (coarse_same_) {
      out.fine_bar = conditional(s, *wcb_, *wfb_, out.coarse_bar, stats);
    } else if (fine_same_) {
      out.coarse_bar = conditional(s, *wfb_, *wcb_, out.fine_bar, stats);
    } else {
      const double ratio = shadow_.pmf(lead.a, lead.b) / lead_.pmf(lead.a, lead.b);
      if (ratio >= 1.0 || s.uniform() < ratio) return out;
      for (std::int64_t it = 0;; ++it) {
        check_cap(it);
        if (stats) ++stats->rejection_iterations;
        const AncestorDraw2 prop = shadow_.draw(s);
        const double back = lead_.pmf(prop.a, prop.b) / shadow_.pmf(prop.a, prop.b);
        if (s.uniform() > back) {
          out.coarse_bar = prop.a;
          out.fine_bar = prop.b;
          break;
        }
      }
    }
    return out;
  }

 private:
  // Given the shared index `given` drawn from p, draw from q maximally coupled
  // to it: keep it with prob min(1, q/p), else sample q's residual by rejection.
  int conditional(RngStream& s, const WeightVector& p, const WeightVector& q, int given,
                  CouplingStats* stats) const {
    const std::size_t g = static_cast<std::size_t>(given);
    const double ratio = q[g] / p[g];
    if (ratio >= 1.0 || s.uniform() < ratio) return given;
    for (std::int64_t it = 0;; ++it) {
      check_cap(it);
      if (stats) ++stats->rejection_iterations;
      const int a = detail::sample_cdf(q.cdf(), s.uniform());
      const std::size_t ia = static_cast<std::size_t>(a);
      if (s.uniform() > p[ia] / q[ia]) return a;
    }
  }

  void check_cap(std::int64_t it) const {
    if (it >= cap_)
      throw std::runtime_error("maximal_couple4: rejection loop exceeded cap of " + std::to_string(cap_));
  }

  const WeightVector *wc_, *wcb_, *wf_, *wfb_;
  MaximalCoupling2 lead_;
  MaximalCoupling2 shadow_;
  std::int64_t cap_;
  bool coarse_same_ = false;
  bool fine_same_ = false;
};

inline AncestorDraw4 maximal_couple4(RngStream& s, const WeightVector& wc, const WeightVector& wcb,
                                     const WeightVector& wf, const WeightVector& wfb,
                                     std::int64_t cap = kDefaultRejectionCap) {
  return MaximalCoupling4(wc, wcb, wf, wfb, cap).draw(s);
}

// Comparator: one uniform shared by every system's inverse-CDF draw.
inline int common_uniform_draw(const WeightVector& w, double u) { return detail::sample_cdf(w.cdf(), u); }

}  // namespace udiff
