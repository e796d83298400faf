#include <gtest/gtest.h>

#include "mfsb/mkv_solver.hpp"
#include "mfsb/oracle.hpp"

using namespace mfsb;

namespace {

ProblemSpec free_problem(double m0 = 0.0, double target = 2.0) {
  ProblemSpec s;
  s.mu_in = MeasureSpec::gaussian1d(m0, 0.5);
  s.mu_fin = MeasureSpec::gaussian1d(target, 0.5);
  return s;
}

// g(law) = (mean - target)^2
PenaltySpec mean_penalty(double target) {
  return FeatureMomentPenalty({monomial_feature({1})}, {1.0}, ParticleCloud::from_values({target}));
}

SolverConfig quick() {
  SolverConfig c;
  c.max_picard = 400;
  return c;
}

}  // namespace

TEST(MkvSolver, ZeroPenaltyWeightIsUncontrolled) {
  const ProblemSpec spec = free_problem();
  const TimeGrid grid(1.0, 10);
  FbsdeSolution sol = solve_mkv_fbsde(spec, 0.0, mean_penalty(2.0), grid, 200, quick(), 5);
  ASSERT_TRUE(sol.converged);
  for (const auto& y : sol.Y) EXPECT_EQ(y.cwiseAbs().maxCoeff(), 0.0);
  NoiseBank bank(spec.mu_in, 200, grid, 1, 5);
  Points x = bank.initial();
  for (int j = 0; j < grid.steps; ++j) x += bank.increments(j);
  EXPECT_LE((sol.X.back() - x).cwiseAbs().maxCoeff(), 1e-12);
  const ValueEstimate v = estimate_value(sol, spec, 0.0, mean_penalty(2.0));
  EXPECT_EQ(v.value, 0.0);
  EXPECT_EQ(v.std_error, 0.0);
}

TEST(MkvSolver, MeanSteerMatchesShooting) {
  const ProblemSpec spec = free_problem();
  const PenaltySpec p = mean_penalty(2.0);
  const TimeGrid grid(1.0, 20);
  const double k = 50.0;
  FbsdeSolution sol = solve_mkv_fbsde(spec, k, p, grid, 500, quick(), 11);
  ASSERT_TRUE(sol.converged);
  EXPECT_NEAR(sol.law(grid.steps).mean()(0), 2.0, 0.1);
  const double m0 = sol.law(0).mean()(0);
  const ValueEstimate v = estimate_value(sol, spec, k, p);
  const MeanSteerResult shoot = mean_steer_shooting(m0, 0.25, 2.0, k, 1.0, grid.steps);
  EXPECT_NEAR(v.value, shoot.value, 3.0 * v.std_error);
  // on the sample the mean also picks up the average noise; with that shift the control is
  // a constant and the left-endpoint quadrature is exact
  NoiseBank bank(spec.mu_in, 500, grid, 1, 11);
  double drift = 0.0;
  for (int j = 0; j < grid.steps; ++j) drift += bank.increments(j).mean();
  EXPECT_NEAR(v.value, mean_steer_closed_form(2.0 - m0 - drift, k, 1.0), 1e-4);
}

TEST(MkvSolver, SameSeedIsBitIdentical) {
  const ProblemSpec spec = free_problem();
  const TimeGrid grid(1.0, 10);
  FbsdeSolution a = solve_mkv_fbsde(spec, 4.0, mean_penalty(1.0), grid, 200, quick(), 9);
  FbsdeSolution b = solve_mkv_fbsde(spec, 4.0, mean_penalty(1.0), grid, 200, quick(), 9);
  for (int j = 0; j <= grid.steps; ++j) {
    EXPECT_TRUE(a.X[static_cast<std::size_t>(j)] == b.X[static_cast<std::size_t>(j)]);
    EXPECT_TRUE(a.Y[static_cast<std::size_t>(j)] == b.Y[static_cast<std::size_t>(j)]);
  }
  EXPECT_EQ(a.iterations, b.iterations);
  FbsdeSolution c = solve_mkv_fbsde(spec, 4.0, mean_penalty(1.0), grid, 200, quick(), 10);
  EXPECT_FALSE(a.X.back() == c.X.back());
}

TEST(MkvSolver, ForwardAndTerminalConsistency) {
  ProblemSpec spec = free_problem(0.0, 1.0);
  spec.interaction.kind = PairwiseQuadratic{};
  const PenaltySpec p = default_feature_penalty(sample(spec.mu_fin, 2000, 3));
  const TimeGrid grid(1.0, 10);
  const double k = 3.0;
  FbsdeSolution sol = solve_mkv_fbsde(spec, k, p, grid, 300, quick(), 2);
  ASSERT_TRUE(sol.converged);
  NoiseBank bank(spec.mu_in, 300, grid, 1, 2);
  EXPECT_TRUE(sol.X[0] == bank.initial());
  for (int j = 0; j < grid.steps; ++j) {
    const auto sj = static_cast<std::size_t>(j);
    const double mean = sol.X[sj].mean();
    const Points expect = sol.X[sj] + grid.dt() * (-sol.Y[sj] - (sol.X[sj].array() - mean).matrix()) + bank.increments(j);
    EXPECT_LE((sol.X[sj + 1] - expect).cwiseAbs().maxCoeff(), 1e-12);
  }
  const ParticleCloud law = sol.law(grid.steps);
  double worst = 0.0;
  for (int i = 0; i < 300; i += 13)
    worst = std::max(worst, std::abs(sol.Y.back()(i, 0) - k * penalty_lderiv(p, law, law.point(i))(0)));
  EXPECT_LE(worst, 1e-6 * k);
}

TEST(MkvSolver, ConstantControlQuadrature) {
  const ProblemSpec spec = free_problem();
  const TimeGrid grid(2.0, 8);
  std::vector<Points> X(9, Points::Zero(5, 1)), control(9, Points::Constant(5, 1, 0.7));
  const ValueEstimate v = detail::running_cost_estimate(spec, grid, X, control, nullptr);
  EXPECT_NEAR(v.value, 2.0 * 0.5 * 0.49, 1e-14);
  EXPECT_EQ(v.std_error, 0.0);
}

TEST(MkvSolver, SmallLadderIsMonotone) {
  const ProblemSpec spec = free_problem(0.0, 1.0);
  const PenaltySpec p = default_feature_penalty(sample(spec.mu_fin, 5000, 1));
  LadderReport rep = run_k_ladder(spec, {0.5, 2.0, 8.0}, p, TimeGrid(1.0, 10), 400, quick(), 4);
  ASSERT_EQ(rep.rows.size(), 3u);
  for (const auto& r : rep.rows) EXPECT_TRUE(r.error.empty()) << r.error;
  EXPECT_TRUE(rep.monotonicity_violations.empty());
  EXPECT_LT(rep.rows[0].value.value, rep.rows[2].value.value);
  EXPECT_GT(rep.rows[0].terminal_penalty, rep.rows[2].terminal_penalty);
  EXPECT_LT(rep.decay_slope, 0.0);
  EXPECT_THROW(run_k_ladder(spec, {2.0, 1.0}, p, TimeGrid(1.0, 10), 400, quick(), 4), std::invalid_argument);
}

TEST(MkvSolver, PreconditionErrors) {
  const ProblemSpec spec = free_problem();
  const TimeGrid grid(1.0, 10);
  auto kind_of = [](auto&& fn) {
    try {
      fn();
    } catch (const SolverError& e) {
      return static_cast<int>(e.kind());
    }
    return -1;
  };
  const int pre = static_cast<int>(SolverError::Kind::precondition);
  EXPECT_EQ(kind_of([&] { solve_mkv_fbsde(spec, -1.0, mean_penalty(1), grid, 100, quick(), 1); }), pre);
  EXPECT_EQ(kind_of([&] { solve_mkv_fbsde(spec, 1.0, mean_penalty(1), grid, 10, quick(), 1); }), pre);
  NoiseBank wrong(spec.mu_in, 100, TimeGrid(1.0, 12), 1, 1);
  EXPECT_EQ(kind_of([&] { solve_mkv_fbsde(spec, 1.0, mean_penalty(1), grid, quick(), wrong); }), pre);
}

TEST(MkvSolver, NonFiniteDriftIsReported) {
  ProblemSpec spec = free_problem();
  GeneralInteraction g;
  g.b = [](double, const VectorXd& x, const Points&) { return VectorXd::Constant(x.size(), std::nan("")); };
  g.dx_b = [](double, const VectorXd& x, const Points&) { return MatrixXd::Zero(x.size(), x.size()); };
  g.dmu_b = [](double, const VectorXd& x, const Points&, const VectorXd&) { return MatrixXd::Zero(x.size(), x.size()); };
  spec.interaction.kind = g;
  try {
    solve_mkv_fbsde(spec, 1.0, mean_penalty(1), TimeGrid(1.0, 10), 100, quick(), 1);
    FAIL() << "expected SolverError";
  } catch (const SolverError& e) {
    EXPECT_EQ(e.kind(), SolverError::Kind::non_finite);
    EXPECT_EQ(e.node(), 1);
  }
}

TEST(MkvSolver, IterationCapGivesNotConverged) {
  SolverConfig c = quick();
  c.max_picard = 1;
  c.fallback_damping = 0.0;
  c.max_outer = 1;
  FbsdeSolution sol = solve_mkv_fbsde(free_problem(), 4.0, mean_penalty(2.0), TimeGrid(1.0, 10), 100, c, 1);
  EXPECT_FALSE(sol.converged);
}
