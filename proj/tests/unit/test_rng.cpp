#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "test_util.hpp"
#include "udiff/rng.hpp"

using namespace udiff;

TEST(Rng, Fnv1aKnownValues) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Rng, SameSpecSameStream) {
  const SeedSpec s{42, {{"replicate", 3}, {"level", 5}}};
  RngStream a = derive_stream(s), b = derive_stream(s);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a(), b());
}

TEST(Rng, PathOrderAndLabelsMatter) {
  std::set<std::uint64_t> first;
  const std::vector<SeedSpec> specs = {
      {42, {{"replicate", 3}, {"level", 5}}}, {42, {{"level", 5}, {"replicate", 3}}},
      {42, {{"replicate", 4}, {"level", 5}}}, {43, {{"replicate", 3}, {"level", 5}}},
      {42, {{"replicat", 3}, {"level", 5}}},  {42, {{"replicate", 3}}}};
  for (const auto& s : specs) first.insert(derive_stream(s)());
  EXPECT_EQ(first.size(), specs.size());
}

TEST(Rng, ChildExtendsPath) {
  const SeedSpec s{7, {{"a", 1}}};
  const SeedSpec c = s.child("b", 2);
  ASSERT_EQ(c.path.size(), 2u);
  EXPECT_EQ(c.path[1].first, "b");
  EXPECT_EQ(c.path[1].second, 2);
  EXPECT_EQ(s.path.size(), 1u);
  EXPECT_NE(s.to_string(), c.to_string());
}

TEST(Rng, EmptyPathRejected) { EXPECT_THROW(derive_stream(SeedSpec{1, {}}), std::invalid_argument); }

TEST(Rng, UniformRangeAndMoments) {
  RngStream s = derive_stream({1, {{"u", 0}}});
  std::vector<double> v;
  for (int i = 0; i < 100000; ++i) {
    const double u = uniform(s);
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    v.push_back(u);
  }
  const auto m = udiff_test::moments(v);
  EXPECT_NEAR(m.mean, 0.5, 4 * m.se);
  EXPECT_NEAR(m.var, 1.0 / 12.0, 0.002);
}

TEST(Rng, GaussianVectorVariance) {
  RngStream s = derive_stream({2, {{"g", 0}}});
  std::vector<double> v;
  for (int i = 0; i < 50000; ++i)
    for (double x : gaussian_vector(s, 2, 0.125)) v.push_back(x);
  const auto m = udiff_test::moments(v);
  EXPECT_NEAR(m.mean, 0.0, 4 * m.se);
  // Var of the sample variance of N(0, s2) is 2 s2^2 / n.
  EXPECT_NEAR(m.var, 0.125, 4 * std::sqrt(2.0 * 0.125 * 0.125 / v.size()));
}

TEST(Rng, GaussianVectorRejectsBadArguments) {
  RngStream s = derive_stream({2, {{"g", 0}}});
  EXPECT_THROW(gaussian_vector(s, 0, 1.0), std::invalid_argument);
  EXPECT_THROW(gaussian_vector(s, 1, 0.0), std::invalid_argument);
  EXPECT_THROW(gaussian_vector(s, 1, -1.0), std::invalid_argument);
}

TEST(Rng, SiblingStreamsUncorrelated) {
  const SeedSpec root{99, {{"replicate", 0}}};
  for (int k = 0; k < 4; ++k) {
    RngStream a = derive_stream(root.child("level", k));
    RngStream b = derive_stream(root.child("level", k + 1));
    double sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
      const double x = a.normal(), y = b.normal();
      sa += x; sb += y; sab += x * y; saa += x * x; sbb += y * y;
    }
    const double cov = sab / n - sa / n * sb / n;
    const double corr = cov / std::sqrt((saa / n - sa * sa / n / n) * (sbb / n - sb * sb / n / n));
    EXPECT_LT(std::abs(corr), 0.02);
  }
}
