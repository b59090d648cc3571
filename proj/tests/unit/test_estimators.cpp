#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "test_util.hpp"
#include "udiff/estimators.hpp"
#include "udiff/models/ou.hpp"
#include "udiff/oracles.hpp"

using namespace udiff;

namespace {

Params ou_theta() {
  Params th(3);
  th << 2.0, 7.0, 1.0;
  return th;
}

const std::vector<double> kY{1.3, 4.2, 6.1, 7.4, 6.8};

ObservationSet ou_obs() {
  ObservationSet o;
  o.dim = 1;
  o.times = {1, 2, 3, 4, 5};
  o.values = kY;
  return o;
}

ScoreVector scalar(double v) { return ScoreVector::Constant(1, v); }

ChainRecord toy_record(int tau) {
  ChainRecord r;
  for (int i = 0; i < 5; ++i) {
    r.lead.push_back(scalar(i + 1.0));
    r.shadow.push_back(scalar(10.0 * (i + 1)));
  }
  r.meeting_time = tau;
  r.iterations = 4;
  return r;
}

ScoreVector euler_score(int level) {
  const std::vector<double> tv{2.0, 7.0, 1.0};
  return oracle::kalman_score(oracle::ou_euler_ssm(tv, 1.0, level, 5), kY);
}

// Frozen from the independent oracle.
const double kS3[3] = {-5.3407322900411565, -5.9432557393855943, 7.796718868511519};
const double kS4[3] = {-5.3980901376174781, -5.8211013631602793, 7.6041686875751937};

void expect_unbiased(const std::vector<ScoreVector>& xs, const ScoreVector& target, double nse = 4.0) {
  const auto s = average_replicates(xs);
  const ScoreVector se = s.standard_errors();
  for (Eigen::Index j = 0; j < target.size(); ++j)
    EXPECT_NEAR(s.mean[j], target[j], nse * se[j]) << "component " << j << " se " << se[j];
}

}  // namespace

TEST(TimeAveragedScore, HandComputedExample) {
  // A = (2 + 3) / 2; corrections 0.5 (3 - 20) + 1 (4 - 30).
  EXPECT_DOUBLE_EQ(time_averaged_score(toy_record(4), 1, 2)[0], 2.5 - 8.5 - 26.0);
}

TEST(TimeAveragedScore, NaivePresetTelescopes) {
  // b = I = 0: G(X0) + sum_{i=1}^{tau-1} (G(X(i)) - G(Xb(i-1))).
  EXPECT_DOUBLE_EQ(time_averaged_score(toy_record(3), 0, 0)[0], 1.0 + (2.0 - 10.0) + (3.0 - 20.0));
}

TEST(TimeAveragedScore, MeetingAtOneHasNoCorrection) {
  EXPECT_DOUBLE_EQ(time_averaged_score(toy_record(1), 0, 0)[0], 1.0);
  EXPECT_DOUBLE_EQ(time_averaged_score(toy_record(1), 1, 3)[0], 3.0);
}

TEST(TimeAveragedScore, RejectsBadArguments) {
  EXPECT_THROW(time_averaged_score(toy_record(3), 3, 2), std::invalid_argument);
  EXPECT_THROW(time_averaged_score(toy_record(3), -1, 2), std::invalid_argument);
  EXPECT_THROW(time_averaged_score(toy_record(3), 0, 5), std::invalid_argument);
  EXPECT_THROW(time_averaged_score(toy_record(7), 0, 0), std::invalid_argument);
}

TEST(SingleLevel, UnbiasedForEulerScore) {
  const OuModel m(1.0);
  const TimeGrid g = build_unit_grid(3, 5);
  const ScoreVector target = Eigen::Map<const ScoreVector>(kS3, 3);
  for (auto [b, I] : {std::pair{0, 0}, std::pair{3, 3}, std::pair{3, 30}}) {
    EstimatorConfig cfg;
    cfg.N = 32;
    cfg.burn_in = b;
    cfg.iterations = I;
    std::vector<ScoreVector> xs;
    for (int r = 0; r < 2000; ++r)
      xs.push_back(estimate_increment_l0(m, ou_theta(), g, ou_obs(), cfg, {31, {{"b", b}, {"I", I}, {"r", r}}}).value);
    expect_unbiased(xs, target);
  }
}

TEST(SingleLevel, KernelApplicationsMatchCostFormula) {
  const OuModel m(1.0);
  const TimeGrid g = build_unit_grid(3, 5);
  for (int I : {0, 2, 20}) {
    EstimatorConfig cfg;
    cfg.N = 16;
    cfg.iterations = I;
    for (int r = 0; r < 50; ++r) {
      const auto e = estimate_increment_l0(m, ou_theta(), g, ou_obs(), cfg, {32, {{"r", r}}});
      const int tau = e.record.meeting_time;
      ASSERT_GE(tau, 1);
      ASSERT_EQ(e.record.kernel_applications, std::max(2 * tau - 1, I + tau - 1));
      ASSERT_EQ(e.record.iterations, std::max(I, tau));
    }
  }
}

TEST(Increment, UnbiasedForLevelDifference) {
  const OuModel m(1.0);
  const LevelPairGrid pg = make_level_pair(GridScheme::unit(5), 4);
  ScoreVector target(3);
  for (int j = 0; j < 3; ++j) target[j] = kS4[j] - kS3[j];
  EstimatorConfig cfg;
  cfg.N = 32;
  cfg.burn_in = 2;
  cfg.iterations = 2;
  std::vector<ScoreVector> xs;
  for (int r = 0; r < 2000; ++r) {
    const auto e = estimate_increment(m, ou_theta(), pg, ou_obs(), cfg, {33, {{"r", r}}});
    ASSERT_EQ(e.stopping_time, std::max(e.coarse.meeting_time, e.fine.meeting_time));
    ASSERT_DOUBLE_EQ(e.kernel_units, e.coarse.kernel_applications / 2.0 + e.fine.kernel_applications);
    xs.push_back(e.value);
  }
  expect_unbiased(xs, target);
}

TEST(Increment, LevelsStopIndependently) {
  const OuModel m(1.0);
  const LevelPairGrid pg = make_level_pair(GridScheme::unit(5), 4);
  EstimatorConfig cfg;
  cfg.N = 16;
  cfg.iterations = 3;
  for (int r = 0; r < 50; ++r) {
    const auto e = estimate_increment(m, ou_theta(), pg, ou_obs(), cfg, {34, {{"r", r}}});
    for (const ChainRecord* c : {&e.coarse, &e.fine}) {
      ASSERT_EQ(c->iterations, std::max(3, c->meeting_time));
      ASSERT_EQ(c->kernel_applications, std::max(2 * c->meeting_time - 1, 3 + c->meeting_time - 1));
    }
  }
}

TEST(UnbiasedScore, MatchesTruncatedTarget) {
  const OuModel m(1.0);
  UnbiasedConfig cfg;
  cfg.estimator.N = 32;
  cfg.pmf = build_level_pmf(PmfKind::linear, 3, 2);
  std::vector<ScoreVector> xs;
  for (int r = 0; r < 3000; ++r)
    xs.push_back(unbiased_score(m, ou_theta(), GridScheme::unit(5), ou_obs(), cfg, {35, {{"r", r}}}).value);
  expect_unbiased(xs, euler_score(5));
}

TEST(UnbiasedScore, SingleTermMatchesTruncatedTarget) {
  const OuModel m(1.0);
  UnbiasedConfig cfg;
  cfg.estimator.N = 32;
  cfg.single_term = true;
  cfg.pmf = build_level_pmf(PmfKind::linear, 3, 2);
  std::vector<ScoreVector> xs;
  for (int r = 0; r < 3000; ++r) {
    const auto e = unbiased_score(m, ou_theta(), GridScheme::unit(5), ou_obs(), cfg, {36, {{"r", r}}});
    const int L = e.sampled_level;
    ASSERT_NEAR((e.value - e.increments[static_cast<std::size_t>(L)] / cfg.pmf.probs[static_cast<std::size_t>(L)]).norm(),
                0.0, 1e-12);
    xs.push_back(e.value);
  }
  expect_unbiased(xs, euler_score(5));
}

TEST(UnbiasedScore, LevelZeroDrawReturnsBaseEstimate) {
  const OuModel m(1.0);
  UnbiasedConfig cfg;
  cfg.estimator.N = 16;
  cfg.pmf = build_level_pmf(PmfKind::linear, 3, 4);
  int found = 0;
  for (int r = 0; r < 40 && found < 3; ++r) {
    const auto e = unbiased_score(m, ou_theta(), GridScheme::unit(5), ou_obs(), cfg, {37, {{"r", r}}});
    if (e.sampled_level != 0) continue;
    ++found;
    ASSERT_EQ(e.increments.size(), 1u);
    EXPECT_EQ(e.value, e.increments[0]);
    EXPECT_DOUBLE_EQ(e.cost, e.kernel_units[0] * 16 * 40);
  }
  EXPECT_GT(found, 0);
}

TEST(UnbiasedScore, CostAccountsEveryLevel) {
  const OuModel m(1.0);
  UnbiasedConfig cfg;
  cfg.estimator.N = 8;
  cfg.pmf = build_level_pmf(PmfKind::sqrt, 2, 4);
  for (int r = 0; r < 20; ++r) {
    const auto e = unbiased_score(m, ou_theta(), GridScheme::unit(5), ou_obs(), cfg, {38, {{"r", r}}});
    double cost = 0.0;
    for (int j = 0; j <= e.sampled_level; ++j) cost += e.kernel_units[static_cast<std::size_t>(j)] * 8 * 5 * (1 << (2 + j));
    EXPECT_DOUBLE_EQ(e.cost, cost);
    EXPECT_EQ(e.stopping_times.size(), static_cast<std::size_t>(e.sampled_level + 1));
    EXPECT_GT(e.euler_steps, 0);
  }
}

TEST(UnbiasedScore, DeterministicGivenSeed) {
  const OuModel m(1.0);
  UnbiasedConfig cfg;
  cfg.estimator.N = 16;
  cfg.pmf = build_level_pmf(PmfKind::linear, 3, 3);
  const auto a = unbiased_score(m, ou_theta(), GridScheme::unit(5), ou_obs(), cfg, {39, {{"r", 0}}});
  const auto b = unbiased_score(m, ou_theta(), GridScheme::unit(5), ou_obs(), cfg, {39, {{"r", 0}}});
  const auto c = unbiased_score(m, ou_theta(), GridScheme::unit(5), ou_obs(), cfg, {39, {{"r", 1}}});
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.stopping_times, b.stopping_times);
  EXPECT_NE(a.value, c.value);
}

TEST(UnbiasedScore, RejectsLevelBelowGridResolution) {
  const OuModel m(1.0);
  UnbiasedConfig cfg;
  cfg.pmf = build_level_pmf(PmfKind::linear, 2, 3);
  ObservationSet obs{{0.5, 1.0, 1.5, 2.0}, std::vector<double>(4, 1.0), 1};
  EXPECT_THROW(unbiased_score(m, ou_theta(), GridScheme::intervals(2.0, 3), obs, cfg, {1, {{"r", 0}}}), std::invalid_argument);
}

TEST(IterationCap, RaisesWhenChainsHaveNotMet) {
  const OuModel m(1.0);
  EstimatorConfig cfg;
  cfg.N = 8;
  cfg.iteration_cap = 1;
  EXPECT_THROW(estimate_increment_l0(m, ou_theta(), build_unit_grid(3, 5), ou_obs(), cfg, {40, {}}),
               IterationCapExceeded);
  EXPECT_THROW(estimate_increment(m, ou_theta(), make_level_pair(GridScheme::unit(5), 4), ou_obs(), cfg, {40, {}}),
               IterationCapExceeded);
}

TEST(LevelPmf, ShapeAndNormalization) {
  for (auto kind : {PmfKind::sqrt, PmfKind::linear}) {
    const LevelPMF p = build_level_pmf(kind, 3, 12);
    const double kappa = kind == PmfKind::sqrt ? 0.5 : 1.0;
    double total = 0.0;
    for (double q : p.probs) total += q;
    EXPECT_NEAR(total, 1.0, 1e-15);
    EXPECT_EQ(p.truncation(), 12);
    EXPECT_EQ(p.l_min, 3);
    EXPECT_DOUBLE_EQ(p.tails[0], 1.0);
    for (int j = 0; j < 12; ++j) {
      const double a = std::log2(2.0 + j), b = std::log2(3.0 + j);
      const double ratio = std::exp2(-kappa) * (j + 2.0) * b * b / ((j + 1.0) * a * a);
      EXPECT_NEAR(p.probs[j + 1] / p.probs[j], ratio, 1e-12);
      EXPECT_NEAR(p.tails[j], p.tails[j + 1] + p.probs[j], 1e-15);
    }
  }
  EXPECT_GT(build_level_pmf(PmfKind::sqrt, 0, 12).probs[12], build_level_pmf(PmfKind::linear, 0, 12).probs[12]);
}

TEST(LevelPmf, SamplingFollowsProbabilities) {
  const LevelPMF p = build_level_pmf(PmfKind::sqrt, 0, 6);
  RngStream s = derive_stream({41, {{"pmf", 0}}});
  std::vector<double> counts(7, 0.0);
  const int n = 200000;
  for (int i = 0; i < n; ++i) counts[static_cast<std::size_t>(p.sample(s))] += 1.0;
  EXPECT_GT(udiff_test::chi_square_pvalue(counts, p.probs, n), 1e-4);
}

TEST(LevelPmf, RejectsBadArguments) {
  EXPECT_THROW(build_level_pmf(PmfKind::linear, 0, 0), std::invalid_argument);
  EXPECT_THROW(build_level_pmf(PmfKind::linear, -1, 4), std::invalid_argument);
}

TEST(AverageReplicates, MeanCovarianceAndErrors) {
  ScoreVector a(2), b(2);
  a << 1, 2;
  b << 3, 4;
  const auto s = average_replicates(std::vector<ScoreVector>{a, b});
  EXPECT_EQ(s.count, 2u);
  EXPECT_DOUBLE_EQ(s.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(s.mean[1], 3.0);
  EXPECT_DOUBLE_EQ(s.covariance(0, 1), 2.0);
  EXPECT_DOUBLE_EQ(s.standard_errors()[0], 1.0);
  EXPECT_THROW(average_replicates(std::vector<ScoreVector>{}), std::invalid_argument);
}

TEST(EmpiricalQuantile, InterpolatesOrderStatistics) {
  EXPECT_DOUBLE_EQ(empirical_quantile({5, 1, 3, 2, 4}, 0.9), 4.6);
  EXPECT_DOUBLE_EQ(empirical_quantile({5, 1, 3, 2, 4}, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(empirical_quantile({5, 1, 3, 2, 4}, 1.0), 5.0);
  EXPECT_DOUBLE_EQ(empirical_quantile({7}, 0.9), 7.0);
  EXPECT_THROW(empirical_quantile({}, 0.5), std::invalid_argument);
}

TEST(Presets, BurninPairs) {
  EXPECT_EQ(preset_burnin(EstimatorPreset::naive, 7), std::make_pair(0, 0));
  EXPECT_EQ(preset_burnin(EstimatorPreset::simple, 7), std::make_pair(7, 7));
  EXPECT_EQ(preset_burnin(EstimatorPreset::time_averaged, 7), std::make_pair(7, 70));
}

TEST(TuneBurnin, CeilingOfNinetiethPercentile) {
  const OuModel m(1.0);
  EstimatorConfig cfg;
  cfg.N = 16;
  const SeedSpec seed{42, {}};
  std::vector<double> taus;
  for (int r = 0; r < 30; ++r)
    taus.push_back(stopping_time(m, ou_theta(), GridScheme::unit(5), ou_obs(), 4, true, cfg, seed.child("pilot", r)));
  EXPECT_EQ(tune_burnin(m, ou_theta(), GridScheme::unit(5), ou_obs(), 4, true, cfg, 30, seed),
            static_cast<int>(std::ceil(empirical_quantile(taus, 0.9))));
  for (double t : taus) EXPECT_GE(t, 1.0);
}
