#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "test_util.hpp"
#include "udiff/models/gridcell.hpp"
#include "udiff/models/logistic.hpp"
#include "udiff/models/ou.hpp"

using namespace udiff;
using udiff_test::rel_err;

namespace {

constexpr double kTol = 1e-5;

double fd_step(double v) { return 1e-6 * (1.0 + std::abs(v)); }

Eigen::VectorXd fd_gradient(const std::function<double(const Params&)>& f, const Params& th) {
  Eigen::VectorXd g(th.size());
  for (Eigen::Index j = 0; j < th.size(); ++j) {
    const double h = fd_step(th[j]);
    Params up = th, dn = th;
    up[j] += h;
    dn[j] -= h;
    g[j] = (f(up) - f(dn)) / (2 * h);
  }
  return g;
}

template <class M>
void expect_jacobian_matches_fd(const M& m, const Params& th, const typename M::State& x) {
  const auto J = m.drift_jacobian(th, x);
  for (int i = 0; i < M::dim; ++i) {
    const Eigen::VectorXd fd = fd_gradient([&](const Params& t) { return m.drift(t, x)[i]; }, th);
    for (int j = 0; j < M::n_params; ++j) ASSERT_LT(rel_err(J(i, j), fd[j]), kTol) << "row " << i << " col " << j;
  }
}

double unif(RngStream& s, double a, double b) { return a + (b - a) * s.uniform(); }

Params ou_random(RngStream& s) {
  Params th(3);
  th << unif(s, 0.5, 3.0), unif(s, -5.0, 10.0), unif(s, 0.2, 3.0);
  return th;
}

Params logistic_random(RngStream& s) {
  Params th(4);
  th << unif(s, 0.5, 4.0), unif(s, 1e-3, 1e-2), unif(s, 0.3, 1.5), unif(s, 1.0, 30.0);
  return th;
}

Params gridcell_random(RngStream& s) {
  Params th(12);
  for (int j = 0; j < 12; ++j) th[j] = unif(s, -1.5, 1.5);
  for (int j : {GridCellModel::d1, GridCellModel::d2, GridCellModel::s1, GridCellModel::s2}) th[j] = unif(s, 0.3, 2.0);
  return th;
}

}  // namespace

TEST(OuModel, Examples) {
  const OuModel m(1.0);
  Params th(3);
  th << 2.0, 7.0, 1.0;
  EXPECT_DOUBLE_EQ(m.drift(th, {0.0})[0], 14.0);
  const auto J = m.drift_jacobian(th, {7.0});
  EXPECT_EQ(J(0, 0), 0.0);
  EXPECT_EQ(J(0, 1), 2.0);
  EXPECT_EQ(J(0, 2), 0.0);
  ScoreVector g = ScoreVector::Zero(3);
  const std::vector<double> y{3.0};
  m.add_obs_score(th, y, {3.0}, g);
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_DOUBLE_EQ(g[2], -0.5);
}

TEST(OuModel, RejectsInvalidParameters) {
  Params th(3);
  th << -1.0, 7.0, 1.0;
  EXPECT_THROW(OuModel::check_params(th), std::invalid_argument);
  th << 1.0, 7.0, 0.0;
  EXPECT_THROW(OuModel::check_params(th), std::invalid_argument);
  EXPECT_THROW(OuModel(0.0), std::invalid_argument);
}

TEST(OuModel, GradientsMatchFiniteDifferences) {
  const OuModel m(0.7);
  RngStream s = derive_stream({1, {{"ou-fd", 0}}});
  for (int r = 0; r < 100; ++r) {
    const Params th = ou_random(s);
    const OuModel::State x{unif(s, -5.0, 10.0)};
    expect_jacobian_matches_fd(m, th, x);
    const std::vector<double> y{x[0] + unif(s, -3.0, 3.0)};
    ScoreVector g = ScoreVector::Zero(3);
    m.add_obs_score(th, y, x, g);
    const Eigen::VectorXd fd = fd_gradient([&](const Params& t) { return m.obs_logdensity(t, y, x); }, th);
    for (int j = 0; j < 3; ++j) ASSERT_LT(rel_err(g[j], fd[j]), kTol);
  }
}

TEST(LogisticModel, Examples) {
  const LogisticModel m;
  Params th(4);
  th << 0.3, 0.3, 1.0, 5.0;
  EXPECT_NEAR(m.drift(th, {0.0})[0], 0.0, 1e-15);
  th << 2.397, 4.429e-3, 0.840, 17.631;
  EXPECT_NEAR(m.drift_jacobian(th, {0.0})(0, 0), 1.0 / 0.840, 1e-14);
  EXPECT_NEAR(m.drift_jacobian(th, {0.0})(0, 0), 1.19048, 1e-5);
  EXPECT_EQ(m.drift_jacobian(th, {1.3})(0, 3), 0.0);
}

TEST(LogisticModel, DensitiesMatchReferenceValues) {
  // Reference values from tests/oracles/derive_values.py (scipy).
  const LogisticModel m;
  Params th(4);
  th << 2.397, 4.429e-3, 0.840, 17.631;
  EXPECT_NEAR(neg_binomial_logpmf(12.0, 17.631, 0.840 * 3.1), -2.4808201863954462, 1e-12);
  EXPECT_NEAR(neg_binomial_logpmf(0.0, 17.631, 0.840 * 3.1), -10.034045787039508, 1e-12);
  EXPECT_NEAR(m.obs_logdensity(th, std::vector<double>{12.0, 0.0}, {3.1}), -2.4808201863954462 - 10.034045787039508,
              1e-11);
  EXPECT_NEAR(m.init_logdensity(th, {4.0}), -3.409325013343496, 1e-12);
}

TEST(LogisticModel, RejectsInvalidInput) {
  Params th(4);
  th << 2.0, -1e-3, 0.8, 17.0;
  EXPECT_THROW(LogisticModel::check_params(th), std::invalid_argument);
  th << 2.0, 1e-3, 0.8, 0.0;
  EXPECT_THROW(LogisticModel::check_params(th), std::invalid_argument);
  th << 2.0, 1e-3, 0.8, 17.0;
  EXPECT_THROW(LogisticModel().obs_logdensity(th, std::vector<double>{-1.0, 3.0}, {1.0}), std::invalid_argument);
}

TEST(LogisticModel, GradientsMatchFiniteDifferences) {
  const LogisticModel m;
  RngStream s = derive_stream({1, {{"logistic-fd", 0}}});
  for (int r = 0; r < 100; ++r) {
    const Params th = logistic_random(s);
    const LogisticModel::State x{unif(s, 0.0, 10.0)};
    expect_jacobian_matches_fd(m, th, x);
    const std::vector<double> y{std::floor(unif(s, 0.0, 2000.0)), std::floor(unif(s, 0.0, 2000.0))};
    ScoreVector g = ScoreVector::Zero(4);
    m.add_obs_score(th, y, x, g);
    Eigen::VectorXd fd = fd_gradient([&](const Params& t) { return m.obs_logdensity(t, y, x); }, th);
    for (int j = 0; j < 4; ++j) ASSERT_LT(rel_err(g[j], fd[j]), kTol) << "obs component " << j;
    ScoreVector gi = ScoreVector::Zero(4);
    m.add_init_score(th, x, gi);
    fd = fd_gradient([&](const Params& t) { return m.init_logdensity(t, x); }, th);
    for (int j = 0; j < 4; ++j) ASSERT_LT(rel_err(gi[j], fd[j]), kTol) << "init component " << j;
  }
}

TEST(LogisticModel, NegativeBinomialMassSumsToOne) {
  for (double mean : {3.0, 20.0, 150.0}) {
    double total = 0.0;
    for (int y = 0; y <= 20000; ++y) total += std::exp(neg_binomial_logpmf(y, 17.631, std::log(mean)));
    EXPECT_LE(total, 1.0 + 1e-12);
    EXPECT_GE(total, 1.0 - 1e-6);
  }
}

TEST(LogisticModel, InitFromNormalHasStatedMoments) {
  const LogisticModel m;
  Params th(4);
  th << 2.397, 4.429e-3, 0.840, 17.631;
  EXPECT_DOUBLE_EQ(m.init_from_normal(th, {0.0})[0], 5.0 / 0.840);
  EXPECT_DOUBLE_EQ(m.init_from_normal(th, {1.0})[0] - m.init_from_normal(th, {0.0})[0], 10.0 / 0.840);
}

TEST(GridCellModel, Examples) {
  const GridCellModel m;
  const Params th = Params::Ones(12);
  const auto a = m.drift(th, {0.0, 0.0});
  EXPECT_NEAR(a[0], std::tanh(1.0), 1e-15);
  EXPECT_NEAR(a[1], 0.76159, 1e-5);
  EXPECT_DOUBLE_EQ(m.drift_jacobian(th, {3.0, 0.0})(0, GridCellModel::d1), -3.0);
}

TEST(GridCellModel, RejectsInvalidParameters) {
  Params th = Params::Ones(12);
  th[GridCellModel::s2] = 0.0;
  EXPECT_THROW(GridCellModel::check_params(th), std::invalid_argument);
  th = Params::Ones(12);
  th[GridCellModel::d1] = -1.0;
  EXPECT_THROW(GridCellModel::check_params(th), std::invalid_argument);
}

TEST(GridCellModel, SegmentDensityMatchesReferenceValue) {
  // rate = 0.25 (e^{1.3} + e^{0.8}), y = 3 for one cell; the other cell is empty
  // with zero accumulated intensity.
  const GridCellModel m;
  const Params th = Params::Ones(12);
  const GridCellModel::Accum acc{std::exp(0.3) + std::exp(-0.2), 0.0};
  EXPECT_NEAR(m.segment_logdensity(th, std::vector<double>{3.0, 0.0}, acc, 0.25), -2.1021209990753347, 1e-12);
}

TEST(GridCellModel, GradientsMatchFiniteDifferences) {
  const GridCellModel m;
  RngStream s = derive_stream({1, {{"gridcell-fd", 0}}});
  for (int r = 0; r < 100; ++r) {
    const Params th = gridcell_random(s);
    const GridCellModel::State x{unif(s, -2.0, 2.0), unif(s, -2.0, 2.0)};
    expect_jacobian_matches_fd(m, th, x);
    const GridCellModel::Accum acc{unif(s, 0.5, 40.0), unif(s, 0.5, 40.0)};
    const std::vector<double> y{std::floor(unif(s, 0.0, 30.0)), std::floor(unif(s, 0.0, 30.0))};
    ScoreVector g = ScoreVector::Zero(12);
    m.add_segment_score(th, y, acc, 0.078125, g);
    const Eigen::VectorXd fd =
        fd_gradient([&](const Params& t) { return m.segment_logdensity(t, y, acc, 0.078125); }, th);
    for (int j = 0; j < 12; ++j) ASSERT_LT(rel_err(g[j], fd[j]), kTol) << "component " << j;
  }
}

TEST(Transforms, ExamplesAndRoundTrip) {
  const std::vector<Transform> tf{Transform::log, Transform::identity};
  Params w(2);
  w << 0.0, 0.0;
  EXPECT_EQ(to_constrained(w, tf)[0], 1.0);
  w << -1.0, 2.5;
  const Params back = from_constrained(to_constrained(w, tf), tf);
  EXPECT_NEAR(back[0], -1.0, 1e-14);
  EXPECT_NEAR(back[1], 2.5, 1e-14);
  Params bad(2);
  bad << -3.0, 1.0;
  EXPECT_THROW(from_constrained(bad, tf), std::invalid_argument);
}

TEST(Transforms, ScoreChainRule) {
  const std::vector<Transform> tf{Transform::log, Transform::identity};
  Params th(2);
  th << 4.0, -2.0;
  ScoreVector g(2);
  g << 0.5, 3.0;
  const ScoreVector gw = score_to_working(g, th, tf);
  EXPECT_DOUBLE_EQ(gw[0], 2.0);
  EXPECT_DOUBLE_EQ(gw[1], 3.0);
}
