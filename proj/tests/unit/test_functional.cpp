#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "udiff/functional.hpp"
#include "udiff/models/gridcell.hpp"
#include "udiff/models/logistic.hpp"
#include "udiff/models/ou.hpp"
#include "udiff/oracles.hpp"

using namespace udiff;

namespace {

Params ou_theta() {
  Params th(3);
  th << 2.0, 7.0, 1.0;
  return th;
}

ObservationSet unit_obs(const std::vector<double>& y) {
  ObservationSet o;
  o.dim = 1;
  for (std::size_t t = 0; t < y.size(); ++t) o.times.push_back(double(t + 1));
  o.values = y;
  return o;
}

// Term-by-term OU evaluation written directly from the closed forms.
std::array<double, 3> ou_reference(double th1, double th2, double th3, double sigma, double dt,
                                   const std::vector<double>& x, int per_unit, const std::vector<double>& y) {
  std::array<double, 3> g{0, 0, 0};
  for (std::size_t k = 1; k < x.size(); ++k) {
    const double drift = th1 * (th2 - x[k - 1]);
    const double inc = x[k] - x[k - 1];
    g[0] += (th2 - x[k - 1]) * (inc - drift * dt) / (sigma * sigma);
    g[1] += th1 * (inc - drift * dt) / (sigma * sigma);
  }
  for (std::size_t t = 0; t < y.size(); ++t) {
    const double e = y[t] - x[(t + 1) * static_cast<std::size_t>(per_unit)];
    g[2] += -0.5 / th3 + e * e / (2 * th3 * th3);
  }
  return g;
}

}  // namespace

TEST(Functional, ConstantPathAtEquilibrium) {
  const OuModel m(1.0);
  const int T = 4;
  const TimeGrid g = build_unit_grid(3, T);
  const Path<OuModel> x(g.size(), OuModel::State{7.0});
  const ScoreVector s = eval_score_functional(m, ou_theta(), g, x, unit_obs(std::vector<double>(T, 7.0)));
  EXPECT_EQ(s[0], 0.0);
  EXPECT_EQ(s[1], 0.0);
  EXPECT_DOUBLE_EQ(s[2], -T / 2.0);
}

TEST(Functional, EmptySumsLeaveOnlyTheInitialTerm) {
  TimeGrid g;
  g.times = {0.0};
  g.obs_at = {-1};
  g.nominal_step = 1.0;
  const ObservationSet none{{}, {}, 1};
  EXPECT_EQ(eval_score_functional(OuModel(1.0), ou_theta(), g, Path<OuModel>{{0.3}}, none),
            ScoreVector::Zero(3));
  const LogisticModel lm;
  Params th(4);
  th << 2.397, 4.429e-3, 0.840, 17.631;
  ObservationSet none2{{}, {}, 2};
  ScoreVector init = ScoreVector::Zero(4);
  lm.add_init_score(th, {4.0}, init);
  EXPECT_EQ(eval_score_functional(lm, th, g, Path<LogisticModel>{{4.0}}, none2), init);
}

TEST(Functional, MatchesIndependentOuEvaluator) {
  const double sigma = 1.3;
  const OuModel m(sigma);
  const Params th = ou_theta();
  const TimeGrid g = build_unit_grid(3, 2);
  RngStream s = derive_stream({4, {{"path", 0}}});
  for (int rep = 0; rep < 20; ++rep) {
    Path<OuModel> x(g.size());
    std::vector<double> xv(g.size()), y{s.normal() + 6.0, s.normal() + 7.0};
    for (std::size_t k = 0; k < g.size(); ++k) xv[k] = x[k][0] = 7.0 + 2.0 * s.normal();
    const ScoreVector got = eval_score_functional(m, th, g, x, unit_obs(y));
    const auto ref = ou_reference(2.0, 7.0, 1.0, sigma, 0.125, xv, 8, y);
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(got[j], ref[static_cast<std::size_t>(j)], 1e-12 * (1 + std::abs(ref[static_cast<std::size_t>(j)])));
  }
}

TEST(Functional, GridCellUsesInclusiveSegments) {
  const GridCellModel m;
  const Params th = Params::Ones(12);
  const TimeGrid g = build_interval_grid(2.0, 1, 2);  // 2 intervals of 2 steps each, dt = 0.5
  Path<GridCellModel> x(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) x[k] = {0.1 * double(k), -0.2 * double(k)};
  ObservationSet obs{{1.0, 2.0}, {3, 1, 0, 2}, 2};
  const ScoreVector s = eval_score_functional(m, th, g, x, obs);
  // kappa1: y - dt e^{kappa} sum_{inclusive} e^{x}; points 0..2 then 2..4.
  double k1 = 0.0, k2 = 0.0;
  for (int p = 0; p < 2; ++p) {
    double a1 = 0.0, a2 = 0.0;
    for (int k = 2 * p; k <= 2 * p + 2; ++k) {
      a1 += std::exp(0.1 * k);
      a2 += std::exp(-0.2 * k);
    }
    k1 += obs.values[static_cast<std::size_t>(2 * p)] - 0.5 * std::exp(1.0) * a1;
    k2 += obs.values[static_cast<std::size_t>(2 * p + 1)] - 0.5 * std::exp(1.0) * a2;
  }
  EXPECT_NEAR(s[GridCellModel::k1], k1, 1e-12);
  EXPECT_NEAR(s[GridCellModel::k2], k2, 1e-12);
}

TEST(Functional, AdditiveOverUnitIntervals) {
  const OuModel m(1.0);
  const Params th = ou_theta();
  const int T = 5, l = 3, K = 8;
  const TimeGrid g = build_unit_grid(l, T);
  const TimeGrid g1 = build_unit_grid(l, 1);
  RngStream s = derive_stream({6, {{"path", 0}}});
  Path<OuModel> x(g.size());
  for (auto& v : x) v = {7.0 + s.normal()};
  std::vector<double> y;
  for (int t = 0; t < T; ++t) y.push_back(7.0 + s.normal());
  const ScoreVector whole = eval_score_functional(m, th, g, x, unit_obs(y));
  ScoreVector parts = ScoreVector::Zero(3);
  for (int t = 0; t < T; ++t) {
    const Path<OuModel> seg(x.begin() + t * K, x.begin() + (t + 1) * K + 1);
    parts += eval_score_functional(m, th, g1, seg, unit_obs({y[static_cast<std::size_t>(t)]}));
  }
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(whole[j], parts[j], 1e-11);
}

TEST(Functional, EqualIrregularStepsReproduceUnitGrid) {
  const OuModel m(1.0);
  const Params th = ou_theta();
  const TimeGrid gu = build_unit_grid(2, 3);
  const TimeGrid gi = build_irregular_grid(std::vector<double>{0, 1, 2, 3}, 2);
  ASSERT_EQ(gu.times, gi.times);
  ASSERT_EQ(gu.steps, gi.steps);
  RngStream s = derive_stream({8, {{"path", 0}}});
  Path<OuModel> x(gu.size());
  for (auto& v : x) v = {7.0 + s.normal()};
  const std::vector<double> y{6.5, 7.2, 7.9};
  ObservationSet with0{{0, 1, 2, 3}, {x[0][0], 6.5, 7.2, 7.9}, 1};
  ScoreVector at0 = ScoreVector::Zero(3);
  m.add_obs_score(th, std::vector<double>{x[0][0]}, x[0], at0);
  const ScoreVector a = eval_score_functional(m, th, gu, x, unit_obs(y));
  const ScoreVector b = eval_score_functional(m, th, gi, x, with0) - at0;
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(a[j], b[j], 1e-12);
}

TEST(Functional, MissingObservationTimeIsAnError) {
  const OuModel m(1.0);
  const TimeGrid g = build_unit_grid(1, 2);
  const Path<OuModel> x(g.size(), OuModel::State{0.0});
  ObservationSet bad{{1.0, 1.75}, {0.0, 0.0}, 1};
  EXPECT_THROW(eval_score_functional(m, ou_theta(), g, x, bad), std::invalid_argument);
  const Path<OuModel> short_path(3, OuModel::State{0.0});
  EXPECT_THROW(eval_score_functional(m, ou_theta(), g, short_path, unit_obs({0.0, 0.0})), std::invalid_argument);
}

TEST(Functional, FisherIdentityUnderExactSmoother) {
  // Average of the functional over exact smoothing draws equals S_3 for the
  // fixed five-point dataset (reference from tests/oracles/derive_values.py).
  const OuModel m(1.0);
  const Params th = ou_theta();
  const std::vector<double> y{1.3, 4.2, 6.1, 7.4, 6.8};
  const std::vector<double> tv{2.0, 7.0, 1.0};
  const auto ssm = oracle::ou_euler_ssm(tv, 1.0, 3, 5);
  const auto kr = oracle::kalman_smooth(ssm, y);
  const TimeGrid g = build_unit_grid(3, 5);
  RngStream s = derive_stream({10, {{"ffbs", 0}}});
  std::vector<std::vector<double>> comp(3);
  for (int r = 0; r < 20000; ++r) {
    const auto draw = oracle::sample_smoothing_path(ssm, kr, s);
    Path<OuModel> x(draw.size());
    for (std::size_t k = 0; k < draw.size(); ++k) x[k] = {draw[k]};
    const ScoreVector v = eval_score_functional(m, th, g, x, unit_obs(y));
    for (int j = 0; j < 3; ++j) comp[static_cast<std::size_t>(j)].push_back(v[j]);
  }
  const double exact[3] = {-5.3407322900411565, -5.9432557393855943, 7.796718868511519};
  for (int j = 0; j < 3; ++j) {
    const auto mo = udiff_test::moments(comp[static_cast<std::size_t>(j)]);
    EXPECT_NEAR(mo.mean, exact[j], 4 * mo.se) << "component " << j;
  }
}
