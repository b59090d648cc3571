// Unbiased score of a simulated OU series, compared with the Kalman score of
// the Euler discretization at the truncation level.
#include <cstdio>
#include <vector>

#include "udiff/experiments.hpp"
#include "udiff/udiff.hpp"

int main() {
  using namespace udiff;
  const OuModel model(1.0);
  Params th(3);
  th << 2.0, 7.0, 1.0;

  const GridScheme scheme = GridScheme::unit(10);
  const ObservationSet obs = simulate_data(model, th, scheme, 10, SeedSpec{7, {{"data", 0}}}).obs;

  UnbiasedConfig cfg;
  cfg.estimator.N = 64;
  cfg.estimator.burn_in = 3;
  cfg.estimator.iterations = 3;
  cfg.pmf = build_level_pmf(PmfKind::linear, 3, 4);

  std::vector<ScoreEstimate> reps;
  for (int r = 0; r < 200; ++r) reps.push_back(unbiased_score(model, th, scheme, obs, cfg, SeedSpec{11, {{"replicate", r}}}));
  const ReplicateSummary s = average_replicates(reps);
  const ScoreVector se = s.standard_errors();

  const std::vector<double> tv{2.0, 7.0, 1.0};
  const ScoreVector exact = oracle::kalman_score(oracle::ou_euler_ssm(tv, 1.0, 7, 10), obs.values);
  for (int j = 0; j < 3; ++j)
    std::printf("theta_%d  estimate %9.4f +- %.4f   Kalman %9.4f\n", j + 1, s.mean[j], se[j], exact[j]);
}
