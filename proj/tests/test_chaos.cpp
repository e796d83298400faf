#include <gtest/gtest.h>

#include <cmath>

#include "mfsb/chaos.hpp"

using namespace mfsb;

namespace {

ProblemSpec entropic(bool interacting) {
  ProblemSpec s;
  s.mu_in = MeasureSpec::gaussian1d(0.0, 0.5);
  s.mu_fin = MeasureSpec::gaussian1d(1.0, 0.5);
  if (interacting) s.interaction.kind = PairwiseQuadratic{};
  return s;
}

ConvexDualPenalty ridge() {
  return ConvexDualPenalty(PhiMember(Ridge{VectorXd::Constant(1, -1.0), -1.0, 0.1}), 0.0);
}

}  // namespace

TEST(Spearman, Basics) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {1, 100, 2, 3}), 0.4);
  EXPECT_TRUE(std::isnan(spearman({1}, {1})));
  EXPECT_TRUE(std::isnan(spearman({1, 2, 3}, {5, 5, 5})));
  // ties take average ranks
  EXPECT_NEAR(spearman({1, 2, 3}, {1, 1, 2}), std::sqrt(0.75), 1e-15);
}

TEST(EpsilonN, IdenticalCloudsGiveZero) {
  const TimeGrid grid(1.0, 4);
  std::vector<Points> a(5, sample(MeasureSpec::gaussian1d(0, 1), 30, 2).points());
  EXPECT_EQ(epsilon_n(a, a, grid), 0.0);
}

TEST(EpsilonN, SinglePointHandCase) {
  const TimeGrid grid(2.0, 4);
  std::vector<Points> a, b;
  for (int j = 0; j <= 4; ++j) {
    a.push_back(Points::Constant(1, 2, 0.0));
    Points q(1, 2);
    q << 3.0, 4.0 * j;  // distance only in the first entry at node 0
    b.push_back(q);
  }
  // nodes 0..3 enter with dt = 0.5; |(3, 4j)| = 3, 5, sqrt(73), sqrt(153)
  EXPECT_NEAR(epsilon_n(a, b, grid), 0.5 * (9 + 25 + 73 + 153), 1e-12);
  std::vector<Points> short_list(a.begin(), a.end() - 1);
  EXPECT_THROW(epsilon_n(short_list, b, grid), std::invalid_argument);
}

TEST(Chaos, NoInteractionLeavesOnlyRegressionNoise) {
  // both systems follow the same law-free dynamics, so the gap is the regression error of
  // the decoupling field, which shrinks like 1/N
  const ConvexDualPenalty smooth(PhiMember(Ridge{VectorXd::Constant(1, -1.0), -1.0, 1.0}), 0.0);
  ChaosOptions opts;
  opts.replications = 2;
  ChaosReport rep = synchronous_coupling_error(entropic(false), 8.0, smooth, {50, 400}, TimeGrid(1.0, 20), SolverConfig{}, 1, opts);
  ASSERT_EQ(rep.rows.size(), 2u);
  for (const auto& row : rep.rows) EXPECT_TRUE(row.error.empty()) << row.error;
  EXPECT_LT(rep.rows[1].h2_error, 0.5 * rep.rows[0].h2_error);
  EXPECT_LT(rep.rows[1].h2_error, 0.01);
}

TEST(Chaos, SameSeedSameReportAcrossThreadCounts) {
  ChaosOptions one, two;
  one.replications = two.replications = 3;
  two.threads = 2;
  const ProblemSpec spec = entropic(true);
  ChaosReport a = synchronous_coupling_error(spec, 4.0, ridge(), {20, 40}, TimeGrid(1.0, 10), SolverConfig{}, 5, one);
  ChaosReport b = synchronous_coupling_error(spec, 4.0, ridge(), {20, 40}, TimeGrid(1.0, 10), SolverConfig{}, 5, two);
  for (std::size_t r = 0; r < a.rows.size(); ++r) {
    EXPECT_EQ(a.rows[r].h2_error, b.rows[r].h2_error);
    EXPECT_EQ(a.rows[r].epsilon_n, b.rows[r].epsilon_n);
  }
}

TEST(Martingale, ConvergedSolvePassesAndInjectedDriftFails) {
  const ProblemSpec spec = entropic(true);
  FbsdeSolution sol = solve_mkv_fbsde(spec, 8.0, PenaltySpec(ridge()), TimeGrid(1.0, 20), 1000, SolverConfig{}, 3);
  ASSERT_TRUE(sol.converged);
  const MartingaleReport ok = martingale_test(sol, spec);
  EXPECT_TRUE(ok.pass) << ok.max_abs_correlation << " vs " << ok.threshold;
  EXPECT_DOUBLE_EQ(ok.threshold, 3.0 / std::sqrt(1000.0));
  EXPECT_EQ(ok.correlations.size(), ok.features.size());
  const MartingaleReport bad = martingale_test(with_injected_drift(sol, 1.0), spec);
  EXPECT_FALSE(bad.pass);
}

TEST(Martingale, PureMartingaleIncrementsPass) {
  // Y a random walk with F = 0 (no interaction, quadratic cost): increments are noise
  ProblemSpec spec = entropic(false);
  FbsdeSolution sol;
  sol.grid = TimeGrid(1.0, 20);
  const int n = 2000;
  Rng rng(9);
  Points x = Points::Zero(n, 1), y = Points::Zero(n, 1);
  for (int j = 0; j <= 20; ++j) {
    sol.X.push_back(x);
    sol.Y.push_back(y);
    for (int i = 0; i < n; ++i) {
      x(i, 0) += rng.normal() * 0.2;
      y(i, 0) += rng.normal() * 0.2;
    }
  }
  EXPECT_TRUE(martingale_test(sol, spec).pass);
}

TEST(Duality, SingleMemberSingleK) {
  const ProblemSpec spec = entropic(false);
  PhiFamily fam;
  fam.members.emplace_back(Ridge{VectorXd::Constant(1, -1.0), -1.0, 0.1});
  DualityOptions opts;
  opts.n = 300;
  opts.Ns = {};
  opts.target_size = 2000;
  opts.mixture_steps = 0;
  DualityReport rep = duality_checks(spec, {2.0}, fam, TimeGrid(1.0, 10), SolverConfig{}, 4, opts);
  EXPECT_EQ(rep.members, 1);
  ASSERT_EQ(rep.primal.size(), 1u);
  ASSERT_EQ(rep.inner_sup.size(), 1u);
  EXPECT_GE(rep.inner_sup[0], 0.0);
  EXPECT_EQ(rep.violations(), 0u);
  bool has_primal = false, has_member = false;
  for (const auto& c : rep.cells) {
    has_primal |= c.member == -1;
    has_member |= c.member == 0;
    EXPECT_TRUE(c.Ns.empty());
  }
  EXPECT_TRUE(has_primal && has_member);
  EXPECT_THROW(duality_checks(spec, {2.0, 1.0}, fam, TimeGrid(1.0, 10), SolverConfig{}, 4, opts), std::invalid_argument);
  EXPECT_THROW(duality_checks(spec, {1.0}, PhiFamily{}, TimeGrid(1.0, 10), SolverConfig{}, 4, opts), std::invalid_argument);
}
