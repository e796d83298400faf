#include <gtest/gtest.h>

#include <numeric>

#include "mfsb/oracle.hpp"

using namespace mfsb;

namespace {

GridBridgeOptions small_grid(int G = 161, int M = 20) {
  GridBridgeOptions o;
  o.grid_points = G;
  o.steps = M;
  o.sinkhorn_tol = 1e-12;
  return o;
}

}  // namespace

TEST(GridBridge, HeatFlowTargetCostsNearlyNothing) {
  // N(0, 1) diffused for unit time is N(0, 2): the reference itself
  GridBridge br = grid_sinkhorn_bridge(MeasureSpec::gaussian1d(0.0, 1.0), MeasureSpec::gaussian1d(0.0, std::sqrt(2.0)), 1.0,
                                       1.0, small_grid());
  EXPECT_LT(br.value, 1e-4);
  for (int j = 0; j <= br.steps; ++j) EXPECT_NEAR(br.marginal_mean(j), 0.0, 1e-8);
}

TEST(GridBridge, SymmetricMidpointMean) {
  GridBridge br = grid_sinkhorn_bridge(MeasureSpec::gaussian1d(0, 0.5), MeasureSpec::gaussian1d(1, 0.5), 1.0, 1.0, small_grid());
  EXPECT_NEAR(br.marginal_mean(br.steps / 2), 0.5, 1e-6);
  // moving the mean alone costs delta^2 / (2T); undoing the spread of the noise costs extra
  EXPECT_GT(br.value, 0.5);
}

TEST(GridBridge, MarginalsAreProbabilitiesWithMatchingEndpoints) {
  GridBridge br = grid_sinkhorn_bridge(MeasureSpec::gaussian1d(0, 0.5), MeasureSpec::gaussian1d(1, 0.3), 1.0, 1.0, small_grid());
  ASSERT_EQ(static_cast<int>(br.marginals.size()), br.steps + 1);
  for (const auto& row : br.marginals) {
    EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-10);
    for (double w : row) EXPECT_GE(w, 0.0);
  }
  double e0 = 0, eM = 0;
  for (int g = 0; g < br.size(); ++g) {
    e0 += std::abs(br.marginals.front()[static_cast<std::size_t>(g)] - br.mu_in[static_cast<std::size_t>(g)]);
    eM += std::abs(br.marginals.back()[static_cast<std::size_t>(g)] - br.mu_fin[static_cast<std::size_t>(g)]);
  }
  EXPECT_LT(e0, 1e-9);
  EXPECT_LT(eM, 1e-9);
}

TEST(GridBridge, DynamicProgrammingAgrees) {
  GridBridge br = grid_sinkhorn_bridge(MeasureSpec::gaussian1d(0, 0.5), MeasureSpec::gaussian1d(1, 0.5), 1.0, 1.0, small_grid());
  EXPECT_NEAR(grid_bridge_dp_value(br), br.value, 1e-4);
}

TEST(GridBridge, DualTraceIsMonotone) {
  GridBridge br = grid_sinkhorn_bridge(MeasureSpec::gaussian1d(0, 0.5), MeasureSpec::gaussian1d(1.5, 0.4), 1.0, 1.0, small_grid());
  ASSERT_GE(br.dual_trace.size(), 2u);
  for (std::size_t i = 1; i < br.dual_trace.size(); ++i)
    EXPECT_GE(br.dual_trace[i], br.dual_trace[i - 1] - 1e-10 * (1.0 + std::abs(br.dual_trace[i - 1])));
}

TEST(GridBridge, WassersteinToOwnSample) {
  GridBridge br = grid_sinkhorn_bridge(MeasureSpec::gaussian1d(0, 0.5), MeasureSpec::gaussian1d(1, 0.5), 1.0, 1.0, small_grid());
  ParticleCloud c = sample(MeasureSpec::gaussian1d(1, 0.5), 20000, 4);
  EXPECT_LT(br.wasserstein_to(br.steps, c), 0.03);
  EXPECT_THROW(br.wasserstein_to(0, sample(MeasureSpec::gaussian(VectorXd::Zero(2), MatrixXd::Identity(2, 2)), 5, 1)),
               std::invalid_argument);
}

TEST(MeanSteer, ShootingMatchesClosedForm) {
  for (double k : {0.0, 0.5, 4.0, 64.0})
    for (double delta : {0.0, 1.0, -2.5}) {
      const MeanSteerResult r = mean_steer_shooting(0.3, 0.25, 0.3 + delta, k, 1.5);
      EXPECT_NEAR(r.value, mean_steer_closed_form(delta, k, 1.5), 1e-10) << "k=" << k << " delta=" << delta;
    }
}

TEST(MeanSteer, ZeroCaseIsExactlyZero) {
  const MeanSteerResult r = mean_steer_shooting(1.0, 0.0, 1.0, 10.0, 1.0);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_EQ(r.terminal_mean, 1.0);
  EXPECT_EQ(mean_steer_closed_form(0.0, 10.0, 1.0), 0.0);
}

TEST(MeanSteer, RejectsBadInput) {
  EXPECT_THROW(mean_steer_shooting(0, -1, 1, 1, 1), std::invalid_argument);
  EXPECT_THROW(mean_steer_shooting(0, 1, 1, -1, 1), std::invalid_argument);
  EXPECT_THROW(mean_steer_shooting(0, 1, 1, 1, 0), std::invalid_argument);
}

TEST(FiniteDifferences, QuadraticIsExact) {
  std::vector<VectorXd> probes;
  Rng rng(3);
  for (int i = 0; i < 20; ++i) probes.push_back(VectorXd::NullaryExpr(3, [&] { return rng.normal(); }));
  auto f = [](const VectorXd& x) { return 0.5 * x.squaredNorm() + x(0) * x(1); };
  auto g = [](const VectorXd& x) {
    VectorXd d = x;
    d(0) += x(1);
    d(1) += x(0);
    return d;
  };
  EXPECT_LE(finite_diff_check(f, g, probes), 1e-8);
}

TEST(FiniteDifferences, SoftplusGradient) {
  std::vector<VectorXd> probes;
  for (double x = -5; x <= 5; x += 0.5) probes.push_back(VectorXd::Constant(1, x));
  EXPECT_LE(finite_diff_check([](const VectorXd& x) { return softplus(x(0)); },
                              [](const VectorXd& x) { return VectorXd::Constant(1, sigmoid(x(0))); }, probes),
            1e-6);
}

TEST(FiniteDifferences, WrongGradientIsCaught) {
  std::vector<VectorXd> probes{VectorXd::Constant(1, 1.0), VectorXd::Constant(1, 2.0)};
  const double err = finite_diff_check([](const VectorXd& x) { return x(0) * x(0); },
                                       [](const VectorXd& x) { return VectorXd::Constant(1, 4.0 * x(0)); }, probes);
  EXPECT_NEAR(err, 1.0, 1e-6);
  EXPECT_THROW(finite_diff_check([](const VectorXd&) { return 0.0; }, [](const VectorXd& x) { return x; }, probes, 0.0),
               std::invalid_argument);
}
