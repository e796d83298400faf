#include <gtest/gtest.h>

#include "mfsb/oracle.hpp"
#include "mfsb/penalty.hpp"

using namespace mfsb;

namespace {

ParticleCloud cloud1(std::vector<double> v) { return ParticleCloud::from_values(v); }

Feature half_square() {
  Feature f;
  f.name = "x^2/2";
  f.value = [](const double* x, int) { return 0.5 * x[0] * x[0]; };
  f.gradient = [](const double* x, int, double* out) { out[0] = x[0]; };
  return f;
}

PhiFamily probe_family(const ParticleCloud& target) {
  PhiFamily fam = default_phi_family(target, 4, 5, 0.1, 3, true);
  return fam;
}

}  // namespace

TEST(PhiFamily, MembersAreConvexLipschitzNonnegative) {
  ParticleCloud target = sample(MeasureSpec::gaussian(VectorXd::Zero(2), MatrixXd::Identity(2, 2)), 500, 1);
  PhiFamily fam = probe_family(target);
  Rng rng(7);
  for (const auto& phi : fam.members)
    for (int t = 0; t < 200; ++t) {
      VectorXd a(2), b(2);
      a << 3 * rng.normal(), 3 * rng.normal();
      b << 3 * rng.normal(), 3 * rng.normal();
      EXPECT_GE(phi.value(a), 0.0);
      EXPECT_LE(phi.gradient(a).norm(), 1.0 + 1e-12);
      EXPECT_LE(phi.value(0.5 * (a + b)), 0.5 * (phi.value(a) + phi.value(b)) + 1e-12);
    }
}

TEST(PhiFamily, DefaultShape) {
  ParticleCloud target = sample(MeasureSpec::gaussian(VectorXd::Zero(2), MatrixXd::Identity(2, 2)), 500, 1);
  EXPECT_EQ(default_phi_family(target).size(), 16 * 5);
  EXPECT_EQ(default_phi_family(target, 16, 5, 0.1, 0, true).size(), 16 * 5 + 1);
}

TEST(PenaltyValue, TargetCloudGivesZero) {
  ParticleCloud target = sample(MeasureSpec::gaussian1d(1, 0.5), 300, 2);
  EXPECT_NEAR(penalty_value(default_feature_penalty(target), target), 0.0, 1e-15);
  EXPECT_NEAR(penalty_value(ConvexDualPenalty(PhiMember(Ridge{VectorXd::Ones(1), 0.5, 0.2}), target), target), 0.0, 1e-15);
}

TEST(PenaltyValue, RidgeShift) {
  const double c = 0.3, s = 0.2;
  ConvexDualPenalty p(PhiMember(Ridge{VectorXd::Ones(1), c, s}), cloud1({c}));
  EXPECT_NEAR(penalty_value(p, cloud1({c + s})), s * (softplus(1.0) - softplus(0.0)), 1e-15);
}

TEST(PenaltyValue, WeightedMeanFeature) {
  FeatureMomentPenalty p({monomial_feature({1})}, {2.0}, cloud1({-1, 1}));
  EXPECT_DOUBLE_EQ(penalty_value(p, cloud1({0.5, 1.5})), 2.0);
  EXPECT_GE(penalty_value(p, cloud1({3, 4})), 0.0);
}

TEST(PenaltyValue, FeatureMomentVanishesAsSampleGrows) {
  ParticleCloud target = sample(MeasureSpec::gaussian1d(1, 0.5), 20000, 2);
  const PenaltySpec p = default_feature_penalty(target);
  const double small = penalty_value(p, sample(MeasureSpec::gaussian1d(1, 0.5), 100, 5));
  const double large = penalty_value(p, sample(MeasureSpec::gaussian1d(1, 0.5), 10000, 5));
  EXPECT_LT(large, small);
  EXPECT_LT(large, 1e-3);
}

TEST(PenaltyValue, ConvexDualCanBeNegative) {
  ConvexDualPenalty p(PhiMember(SmoothedNorm{0.1}), cloud1({-2, 2}));
  EXPECT_LT(penalty_value(p, cloud1({0})), 0.0);
}

TEST(PenaltyLDerivative, SmoothedNormAtOrigin) {
  ConvexDualPenalty p(PhiMember(SmoothedNorm{0.1}), cloud1({-1, 1}));
  EXPECT_EQ(penalty_lderiv(p, cloud1({0.3}), VectorXd::Zero(1)).norm(), 0.0);
}

TEST(PenaltyLDerivative, RidgeIsDirectionTimesSigmoid) {
  VectorXd u(2);
  u << 0.6, 0.8;
  ConvexDualPenalty p(PhiMember(Ridge{u, 0.2, 0.3}), 0.0);
  ParticleCloud cloud = sample(MeasureSpec::gaussian(VectorXd::Zero(2), MatrixXd::Identity(2, 2)), 10, 4);
  VectorXd x(2);
  x << 0.4, -0.1;
  const VectorXd got = penalty_lderiv(p, cloud, x);
  EXPECT_LE((got - u * sigmoid((u.dot(x) - 0.2) / 0.3)).norm(), 1e-15);
  EXPECT_LE(lifted_lderiv_check(p, cloud, {0, 3, 7}), 1e-7);
}

TEST(PenaltyLDerivative, FeatureMomentZeroAtMatchedMoments) {
  ParticleCloud target = sample(MeasureSpec::gaussian1d(0, 1), 200, 8);
  const PenaltySpec p = default_feature_penalty(target);
  for (double x : {-2.0, 0.0, 0.7}) EXPECT_LE(penalty_lderiv(p, target, VectorXd::Constant(1, x)).norm(), 1e-14);
}

TEST(PenaltyLDerivative, FeatureMomentFormula) {
  ParticleCloud target = cloud1({0.0, 2.0});
  FeatureMomentPenalty p({monomial_feature({1}), half_square()}, {1.5, 0.5}, target);
  ParticleCloud cloud = cloud1({0.5, 1.0, 3.0});
  const double g1 = cloud.mean()(0) - 1.0;
  const double g2 = 0.5 * cloud.second_moment() - 1.0;
  for (double x : {-1.0, 0.25, 2.0}) {
    const double want = 2 * 1.5 * g1 * 1.0 + 2 * 0.5 * g2 * x;
    EXPECT_NEAR(penalty_lderiv(p, cloud, VectorXd::Constant(1, x))(0), want, 1e-14);
  }
}

TEST(PenaltyLDerivative, LiftedFiniteDifferences) {
  ParticleCloud target = sample(MeasureSpec::gaussian1d(1, 0.5), 2000, 1);
  ParticleCloud cloud = sample(MeasureSpec::gaussian1d(0.3, 0.7), 100, 2);
  std::vector<int> idx;
  for (int i = 0; i < 100; i += 7) idx.push_back(i);
  EXPECT_LE(lifted_lderiv_check(default_feature_penalty(target), cloud, idx), 1e-5);
  PhiFamily fam = default_phi_family(target, 2, 4);
  EXPECT_LE(lifted_lderiv_check(SoftMaxDualPenalty(fam, target, 0.05), cloud, idx), 1e-5);
  for (const auto& phi : fam.members) EXPECT_LE(lifted_lderiv_check(ConvexDualPenalty(phi, target), cloud, idx), 1e-5);
}

TEST(DisplacementConvexity, IdenticalCloudsGiveZero) {
  ParticleCloud a = sample(MeasureSpec::gaussian1d(0, 1), 50, 3);
  EXPECT_EQ(displacement_convexity_probe(ConvexDualPenalty(PhiMember(SmoothedNorm{0.2}), a), a, a), 0.0);
}

TEST(DisplacementConvexity, ShiftedSmoothedNorm) {
  ParticleCloud b = sample(MeasureSpec::gaussian1d(0, 1), 50, 3);
  Points shifted = (b.points().array() + 0.7).matrix();
  EXPECT_GE(displacement_convexity_probe(ConvexDualPenalty(PhiMember(SmoothedNorm{0.2}), b), ParticleCloud(shifted), b), 0.0);
}

TEST(DisplacementConvexity, FeatureMomentTwoTermSign) {
  // psi = x^2/2, w = 1, target moment 0 (target {0}); clouds {0} and {1}
  FeatureMomentPenalty p({half_square()}, {1.0}, cloud1({0.0}));
  // dmu g(law_a)(0) = 0, dmu g(law_b)(1) = 2 * (1/2 - 0) * 1 = 1
  EXPECT_DOUBLE_EQ(displacement_convexity_probe(p, cloud1({0.0}), cloud1({1.0})), (0.0 - 1.0) * (0.0 - 1.0));
}

TEST(DisplacementConvexity, ConvexDualOnRandomCoupledClouds) {
  ParticleCloud target = sample(MeasureSpec::gaussian(VectorXd::Zero(2), MatrixXd::Identity(2, 2)), 500, 1);
  PhiFamily fam = probe_family(target);
  Rng rng(17);
  for (int t = 0; t < 20; ++t) {
    Points a(40, 2), b(40, 2);
    for (int i = 0; i < 40; ++i)
      for (int c = 0; c < 2; ++c) a(i, c) = 2 * rng.normal(), b(i, c) = 2 * rng.normal();
    for (const auto& phi : fam.members)
      EXPECT_GE(displacement_convexity_probe(ConvexDualPenalty(phi, target), ParticleCloud(a), ParticleCloud(b)), -1e-10);
  }
}

TEST(DisplacementConvexity, SizeMismatchThrows) {
  ConvexDualPenalty p(PhiMember(SmoothedNorm{0.2}), 0.0);
  EXPECT_THROW(displacement_convexity_probe(p, cloud1({0, 1}), cloud1({0})), std::invalid_argument);
}
