#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "mfsb/mkv_solver.hpp"

namespace mfsb {

/// N-particle solution of the weak penalized problem. Y is in the rescaled variables, so the
/// terminal condition reads Y^i_M = k grad phi(X^i_M).
struct NParticleSolution {
  TimeGrid grid;
  double k = 0.0;
  std::vector<Points> X;       // M+1 nodes, N x m
  std::vector<Points> Y;       // M+1 nodes, N x m
  std::vector<Points> Z_diag;  // M nodes, N x (m*d), regression estimate of Z^{i,i}
  std::vector<Points> control;
  std::vector<double> picard_residuals;
  bool converged = false;
  int iterations = 0;
  std::uint64_t noise_bank_id = 0;
  DecouplingField field;
  std::vector<std::string> events;

  int particles() const { return X.empty() ? 0 : static_cast<int>(X[0].rows()); }
  int dim() const { return X.empty() ? 0 : static_cast<int>(X[0].cols()); }
  ParticleCloud law(int j) const { return ParticleCloud(X[static_cast<std::size_t>(j)]); }
};

/// Runs the mean-field Picard scheme on the ensemble itself: the law argument of B and F is
/// the running empirical measure of the N particles and the terminal condition is k grad phi.
/// The conditional expectations regress on the particle's own state; the ensemble moments
/// are common to all particles at a node, hence already spanned by the intercept.
inline NParticleSolution solve_nparticle_fbsde(const ProblemSpec& spec, double k, const ConvexDualPenalty& phi, int N,
                                               const TimeGrid& grid, const SolverConfig& cfg, const NoiseBank& noise) {
  spec.validate();
  if (N < 1) throw SolverError(SolverError::Kind::precondition, "N-particle solve: need N >= 1");
  if (noise.particles() != N)
    throw SolverError(SolverError::Kind::precondition, "noise bank has " + std::to_string(noise.particles()) +
                                                           " rows, expected N = " + std::to_string(N));
  SolverConfig c = cfg;
  c.min_particles = 1;
  const PenaltySpec penalty = phi;
  FbsdeSolution sol = detail::solve_on_bank(spec, k, penalty, grid, c, noise, nullptr);

  NParticleSolution out;
  out.grid = sol.grid;
  out.k = k;
  out.X = std::move(sol.X);
  out.Y = std::move(sol.Y);
  out.Z_diag = std::move(sol.Z);
  out.control = std::move(sol.control);
  out.picard_residuals = std::move(sol.picard_residuals);
  out.converged = sol.converged;
  out.iterations = sol.iterations;
  out.noise_bank_id = noise.id();
  out.field = std::move(sol.field);
  const double stiff = detail::max_row_norm(out.Y.back()) * grid.dt();
  if (stiff > cfg.stiff_threshold) {
    std::ostringstream msg;
    msg << "warning: stiffness " << stiff << " exceeds threshold " << cfg.stiff_threshold
        << " on a supplied noise bank; grid not refined";
    out.events.push_back(msg.str());
  }
  return out;
}

/// Particle average of the running-cost quadrature plus k (mean of phi at T - target(phi)).
inline ValueEstimate nparticle_value(const NParticleSolution& sol, const ProblemSpec& spec, double k,
                                     const ConvexDualPenalty& phi) {
  const PenaltySpec penalty = phi;
  const VectorXd infl = k * penalty_influence(penalty, sol.X.back());
  ValueEstimate est = detail::running_cost_estimate(spec, sol.grid, sol.X, sol.control, k == 0.0 ? nullptr : &infl);
  est.penalty = k == 0.0 ? 0.0 : k * (phi.phi.mean(sol.X.back()) - phi.target_mean);
  est.value = est.running + est.penalty;
  return est;
}

}  // namespace mfsb
