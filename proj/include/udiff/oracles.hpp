#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "udiff/rng.hpp"

// Ground truth for the linear-Gaussian case and for the four-way coupling.
// Deliberately independent of the particle engine: own densities, own
// recursions, no model classes.
namespace udiff::oracle {

// x_k = alpha_k x_{k-1} + beta_k + N(0, var_k), k = 1..K, x_0 fixed;
// y_p = x_{obs_step[p]} + N(0, obs_var). Derivatives per parameter j.
struct LinearGaussianSSM {
  double x0 = 0.0;
  std::vector<double> alpha, beta, var;
  std::vector<int> obs_step;
  double obs_var = 1.0;
  int n_params = 0;
  std::vector<std::vector<double>> d_alpha, d_beta, d_var;
  std::vector<double> d_obs_var;
  bool stable = true;

  int num_steps() const { return static_cast<int>(alpha.size()); }
};

namespace detail {

inline void allocate(LinearGaussianSSM& s, int K, int P) {
  s.alpha.assign(static_cast<std::size_t>(K), 0.0);
  s.beta = s.alpha;
  s.var = s.alpha;
  s.d_alpha.assign(static_cast<std::size_t>(P), std::vector<double>(static_cast<std::size_t>(K), 0.0));
  s.d_beta = s.d_alpha;
  s.d_var = s.d_alpha;
  s.d_obs_var.assign(static_cast<std::size_t>(P), 0.0);
  s.n_params = P;
}

inline void check_theta(std::span<const double> th, double sigma) {
  if (th.size() != 3) throw std::invalid_argument("ou ssm: expected 3 parameters");
  if (!(th[0] > 0.0) || !(th[2] > 0.0) || !(sigma > 0.0))
    throw std::invalid_argument("ou ssm: theta1, theta3, sigma must be positive");
}

}  // namespace detail

// Exact unit-time transitions of dX = t1 (t2 - X) dt + sigma dW, X_0 = x0.
inline LinearGaussianSSM ou_exact_ssm(std::span<const double> th, double sigma, int T, double x0 = 0.0) {
  detail::check_theta(th, sigma);
  LinearGaussianSSM s;
  detail::allocate(s, T, 3);
  s.x0 = x0;
  const double e1 = std::exp(-th[0]);
  const double e2 = std::exp(-2.0 * th[0]);
  const double s2 = sigma * sigma;
  for (int k = 0; k < T; ++k) {
    const std::size_t i = static_cast<std::size_t>(k);
    s.alpha[i] = e1;
    s.beta[i] = th[1] * (1.0 - e1);
    s.var[i] = s2 * (1.0 - e2) / (2.0 * th[0]);
    s.d_alpha[0][i] = -e1;
    s.d_beta[0][i] = th[1] * e1;
    s.d_beta[1][i] = 1.0 - e1;
    s.d_var[0][i] = s2 * (2.0 * th[0] * e2 - (1.0 - e2)) / (2.0 * th[0] * th[0]);
    s.obs_step.push_back(k + 1);
  }
  s.obs_var = th[2];
  s.d_obs_var[2] = 1.0;
  return s;
}

// Euler chain with step 2^{-level}, observations at unit times.
inline LinearGaussianSSM ou_euler_ssm(std::span<const double> th, double sigma, int level, int T, double x0 = 0.0) {
  detail::check_theta(th, sigma);
  if (level < 0) throw std::invalid_argument("ou_euler_ssm: negative level");
  const int per = 1 << level;
  const double dt = std::ldexp(1.0, -level);
  LinearGaussianSSM s;
  detail::allocate(s, per * T, 3);
  s.x0 = x0;
  for (int k = 0; k < per * T; ++k) {
    const std::size_t i = static_cast<std::size_t>(k);
    s.alpha[i] = 1.0 - th[0] * dt;
    s.beta[i] = th[0] * th[1] * dt;
    s.var[i] = dt * sigma * sigma;
    s.d_alpha[0][i] = -dt;
    s.d_beta[0][i] = th[1] * dt;
    s.d_beta[1][i] = th[0] * dt;
  }
  for (int t = 1; t <= T; ++t) s.obs_step.push_back(t * per);
  s.obs_var = th[2];
  s.d_obs_var[2] = 1.0;
  s.stable = th[0] * dt < 1.0;
  return s;
}

struct KalmanResult {
  double loglik = 0.0;
  std::vector<double> filt_mean, filt_var;  // after update, k = 0..K
  std::vector<double> pred_mean, pred_var;  // k = 1..K (index 0 unused)
  std::vector<double> smooth_mean, smooth_var;
  std::vector<double> lag_cov;  // Cov(x_k, x_{k+1} | y), k = 0..K-1
};

inline KalmanResult kalman_smooth(const LinearGaussianSSM& s, std::span<const double> y) {
  if (y.size() != s.obs_step.size()) throw std::invalid_argument("kalman: observation count mismatch");
  const int K = s.num_steps();
  const std::size_t n = static_cast<std::size_t>(K) + 1;
  KalmanResult r;
  r.filt_mean.assign(n, 0.0);
  r.filt_var.assign(n, 0.0);
  r.pred_mean.assign(n, 0.0);
  r.pred_var.assign(n, 0.0);
  std::vector<int> obs_at(n, -1);
  for (std::size_t p = 0; p < s.obs_step.size(); ++p) {
    const int k = s.obs_step[p];
    if (k < 0 || k > K) throw std::invalid_argument("kalman: observation step out of range");
    obs_at[static_cast<std::size_t>(k)] = static_cast<int>(p);
  }
  const double ln2pi = std::log(2.0 * 3.14159265358979323846);
  double m = s.x0, P = 0.0;
  auto update = [&](std::size_t k) {
    const int p = obs_at[k];
    if (p < 0) return;
    const double S = P + s.obs_var;
    if (!(S > 0.0)) throw std::runtime_error("kalman: innovation variance not positive");
    const double e = y[static_cast<std::size_t>(p)] - m;
    r.loglik += -0.5 * (ln2pi + std::log(S) + e * e / S);
    const double gain = P / S;
    m += gain * e;
    P = (1.0 - gain) * P;
  };
  update(0);
  r.filt_mean[0] = m;
  r.filt_var[0] = P;
  for (std::size_t k = 1; k < n; ++k) {
    const double a = s.alpha[k - 1];
    m = a * m + s.beta[k - 1];
    P = a * a * P + s.var[k - 1];
    if (!(P > 0.0)) throw std::runtime_error("kalman: predicted variance not positive");
    r.pred_mean[k] = m;
    r.pred_var[k] = P;
    update(k);
    r.filt_mean[k] = m;
    r.filt_var[k] = P;
  }
  r.smooth_mean = r.filt_mean;
  r.smooth_var = r.filt_var;
  r.lag_cov.assign(n - 1, 0.0);
  for (std::size_t k = n - 1; k-- > 0;) {
    const double J = r.filt_var[k] * s.alpha[k] / r.pred_var[k + 1];
    r.smooth_mean[k] = r.filt_mean[k] + J * (r.smooth_mean[k + 1] - r.pred_mean[k + 1]);
    r.smooth_var[k] = r.filt_var[k] + J * J * (r.smooth_var[k + 1] - r.pred_var[k + 1]);
    r.lag_cov[k] = J * r.smooth_var[k + 1];
  }
  return r;
}

inline double kalman_loglik(const LinearGaussianSSM& s, std::span<const double> y) {
  return kalman_smooth(s, y).loglik;
}

// Score by pairwise smoothing expectations of the complete-data gradient.
inline Eigen::VectorXd kalman_score(const LinearGaussianSSM& s, std::span<const double> y) {
  const KalmanResult r = kalman_smooth(s, y);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(s.n_params);
  const int K = s.num_steps();
  for (int k = 1; k <= K; ++k) {
    const std::size_t i = static_cast<std::size_t>(k - 1), c = static_cast<std::size_t>(k);
    const double a = s.alpha[i], v = s.var[i];
    const double m0 = r.smooth_mean[i], P0 = r.smooth_var[i];
    const double m1 = r.smooth_mean[c], P1 = r.smooth_var[c];
    const double C = r.lag_cov[i];
    const double ee = m1 - a * m0 - s.beta[i];
    const double e2 = P1 + a * a * P0 - 2.0 * a * C + ee * ee;
    const double ex = C - a * P0 + ee * m0;
    for (int j = 0; j < s.n_params; ++j) {
      const std::size_t jj = static_cast<std::size_t>(j);
      const double da = s.d_alpha[jj][i], db = s.d_beta[jj][i], dv = s.d_var[jj][i];
      g[j] += -0.5 * dv / v + 0.5 * dv * e2 / (v * v) + (da * ex + db * ee) / v;
    }
  }
  for (std::size_t p = 0; p < s.obs_step.size(); ++p) {
    const std::size_t k = static_cast<std::size_t>(s.obs_step[p]);
    const double d = y[p] - r.smooth_mean[k];
    const double e2 = d * d + r.smooth_var[k];
    const double R = s.obs_var;
    for (int j = 0; j < s.n_params; ++j) {
      const double dR = s.d_obs_var[static_cast<std::size_t>(j)];
      g[j] += -0.5 * dR / R + 0.5 * dR * e2 / (R * R);
    }
  }
  return g;
}

// Central differences of the Kalman log-likelihood, h_j = rel (1 + |theta_j|).
inline Eigen::VectorXd kalman_score_fd(const std::function<LinearGaussianSSM(const std::vector<double>&)>& build,
                                       const std::vector<double>& theta, std::span<const double> y,
                                       double rel = 1e-5) {
  Eigen::VectorXd g(static_cast<Eigen::Index>(theta.size()));
  for (std::size_t j = 0; j < theta.size(); ++j) {
    const double h = rel * (1.0 + std::abs(theta[j]));
    std::vector<double> up = theta, dn = theta;
    up[j] += h;
    dn[j] -= h;
    g[static_cast<Eigen::Index>(j)] = (kalman_loglik(build(up), y) - kalman_loglik(build(dn), y)) / (2.0 * h);
  }
  return g;
}

// Forward filtering, backward sampling: one exact smoothing draw x_{0:K}.
inline std::vector<double> sample_smoothing_path(const LinearGaussianSSM& s, const KalmanResult& r, RngStream& rng) {
  const std::size_t n = r.filt_mean.size();
  std::vector<double> x(n);
  x[n - 1] = r.filt_mean[n - 1] + std::sqrt(r.filt_var[n - 1]) * rng.normal();
  for (std::size_t k = n - 1; k-- > 0;) {
    const double Pp = r.pred_var[k + 1];
    const double J = r.filt_var[k] * s.alpha[k] / Pp;
    const double mean = r.filt_mean[k] + J * (x[k + 1] - r.pred_mean[k + 1]);
    const double var = r.filt_var[k] * s.var[k] / Pp;
    x[k] = mean + std::sqrt(std::max(var, 0.0)) * rng.normal();
  }
  return x;
}

namespace detail {

// R(a, b) = 1{a=b} min(w_a, v_a) + (w_a - o_a)(v_b - o_b) / (1 - mu).
inline Eigen::MatrixXd pair_pmf(std::span<const double> w, std::span<const double> v) {
  const Eigen::Index n = static_cast<Eigen::Index>(w.size());
  Eigen::MatrixXd R = Eigen::MatrixXd::Zero(n, n);
  double mu = 0.0;
  for (Eigen::Index a = 0; a < n; ++a) {
    R(a, a) = std::min(w[static_cast<std::size_t>(a)], v[static_cast<std::size_t>(a)]);
    mu += R(a, a);
  }
  const double rest = 1.0 - mu;
  if (rest > 1e-15) {
    for (Eigen::Index a = 0; a < n; ++a)
      for (Eigen::Index b = 0; b < n; ++b)
        R(a, b) += (w[static_cast<std::size_t>(a)] - std::min(w[static_cast<std::size_t>(a)], v[static_cast<std::size_t>(a)])) *
                   (v[static_cast<std::size_t>(b)] - std::min(w[static_cast<std::size_t>(b)], v[static_cast<std::size_t>(b)])) / rest;
  }
  return R;
}

inline bool same(std::span<const double> a, std::span<const double> b) {
  return std::equal(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace detail

// Joint PMF of ((A_c, A_f), (Ab_c, Ab_f)); row a*N+b, column a'*N+b'. When a
// level's two weight vectors are identical the shadow copies that level's
// index and draws the other from the shadow pair's conditional; otherwise it
// is the maximal coupling of the two pair PMFs with independent residuals.
inline Eigen::MatrixXd bruteforce_coupling4_pmf(std::span<const double> wc, std::span<const double> wcb,
                                                std::span<const double> wf, std::span<const double> wfb) {
  const std::size_t N = wc.size();
  if (N > 8) throw std::invalid_argument("bruteforce_coupling4_pmf: N must be <= 8");
  if (wcb.size() != N || wf.size() != N || wfb.size() != N)
    throw std::invalid_argument("bruteforce_coupling4_pmf: mismatched N");
  const Eigen::MatrixXd R = detail::pair_pmf(wc, wf);
  const Eigen::MatrixXd Rb = detail::pair_pmf(wcb, wfb);
  const Eigen::Index n = static_cast<Eigen::Index>(N);
  const bool cs = detail::same(wc, wcb), fs = detail::same(wf, wfb);
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n * n, n * n);
  for (Eigen::Index a = 0; a < n; ++a)
    for (Eigen::Index b = 0; b < n; ++b) {
      if (R(a, b) == 0.0) continue;
      if (cs && fs) {
        J(a * n + b, a * n + b) = R(a, b);
      } else if (cs) {
        for (Eigen::Index b2 = 0; b2 < n; ++b2) J(a * n + b, a * n + b2) = R(a, b) * Rb(a, b2) / wcb[static_cast<std::size_t>(a)];
      } else if (fs) {
        for (Eigen::Index a2 = 0; a2 < n; ++a2) J(a * n + b, a2 * n + b) = R(a, b) * Rb(a2, b) / wfb[static_cast<std::size_t>(b)];
      }
    }
  if (!cs && !fs) {
    const Eigen::MatrixXd m = R.cwiseMin(Rb);
    const double rest = 1.0 - m.sum();
    for (Eigen::Index a = 0; a < n; ++a)
      for (Eigen::Index b = 0; b < n; ++b) {
        J(a * n + b, a * n + b) += m(a, b);
        if (rest <= 1e-15) continue;
        for (Eigen::Index a2 = 0; a2 < n; ++a2)
          for (Eigen::Index b2 = 0; b2 < n; ++b2)
            J(a * n + b, a2 * n + b2) += (R(a, b) - m(a, b)) * (Rb(a2, b2) - m(a2, b2)) / rest;
      }
  }
  return J;
}

}  // namespace udiff::oracle
