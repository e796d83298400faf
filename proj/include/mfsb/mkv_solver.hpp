#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfsb/measures.hpp"
#include "mfsb/model.hpp"
#include "mfsb/noise.hpp"
#include "mfsb/penalty.hpp"
#include "mfsb/regression.hpp"
#include "mfsb/wasserstein.hpp"

namespace mfsb {

struct SolverConfig {
  double tol = 1e-6;
  int max_picard = 200;
  double damping = 0.5;
  int basis_degree = 3;
  int min_particles = 64;
  double stiff_threshold = 0.5;
  int divergence_patience = 10;
  int anderson_depth = 5;     // 0 gives plain damped Picard
  double ridge = 1e-8;        // relative to the particle count
  int max_refinements = 3;    // stiffness guard
  int max_outer = 60;         // quasi-Newton steps on the penalty's law summary
  double inner_tol = 0.01;    // inner tolerance relative to the outer residual
  double fallback_damping = 0.2;  // plain damped re-solve when the accelerated one fails, 0 disables
};

class SolverError : public std::runtime_error {
 public:
  enum class Kind { divergence, non_finite, precondition };
  SolverError(Kind kind, const std::string& msg, std::vector<double> trace = {}, int node = -1)
      : std::runtime_error(msg), kind_(kind), trace_(std::move(trace)), node_(node) {}
  Kind kind() const { return kind_; }
  const std::vector<double>& residual_trace() const { return trace_; }
  int node() const { return node_; }

 private:
  Kind kind_;
  std::vector<double> trace_;
  int node_;
};

struct FbsdeSolution {
  TimeGrid grid;
  double k = 0.0;
  std::vector<Points> X;        // M+1 nodes, n x m
  std::vector<Points> Y;        // M+1 nodes, n x m
  std::vector<Points> Z;        // M nodes, n x (m*d), column c*d + e holds Z[c][e]
  std::vector<Points> control;  // M+1 nodes, Lambda(t_j, Y_j)
  std::vector<double> picard_residuals;
  std::vector<double> outer_residuals;  // empty when the terminal condition is solved directly
  bool converged = false;
  int iterations = 0;
  DecouplingField field;
  std::vector<std::string> events;
  std::uint64_t noise_id = 0;

  int particles() const { return X.empty() ? 0 : static_cast<int>(X[0].rows()); }
  int dim() const { return X.empty() ? 0 : static_cast<int>(X[0].cols()); }
  ParticleCloud law(int j) const { return ParticleCloud(X[static_cast<std::size_t>(j)]); }
  ParticleCloud joint_law(int j) const {
    const auto& x = X[static_cast<std::size_t>(j)];
    Points p(x.rows(), 2 * x.cols());
    p << x, Y[static_cast<std::size_t>(j)];
    return ParticleCloud(std::move(p));
  }
};

struct ValueEstimate {
  double value = 0.0;
  double std_error = 0.0;
  double running = 0.0;
  double penalty = 0.0;
};

namespace detail {

// Fixed-order kernels: a row's result never depends on the other rows, which keeps the
// batched solve and single-row replays bit-identical.
inline Points rowwise_product(const MatrixXd& A, const MatrixXd& C) {
  const Eigen::Index n = A.rows(), b = A.cols(), q = C.cols();
  Points out(n, q);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < q; ++c) {
      double s = 0.0;
      for (Eigen::Index l = 0; l < b; ++l) s += A(i, l) * C(l, c);
      out(i, c) = s;
    }
  return out;
}

inline Points shocks(const Points& dW, const MatrixXd& sigma) {
  const Eigen::Index n = dW.rows(), m = sigma.rows(), d = sigma.cols();
  Points out(n, m);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < m; ++c) {
      double s = 0.0;
      for (Eigen::Index e = 0; e < d; ++e) s += sigma(c, e) * dW(i, e);
      out(i, c) = s;
    }
  return out;
}

inline void euler_step(const Points& X, const Points& B, const Points& shock, double dt, Points& next) {
  next.resize(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    for (Eigen::Index c = 0; c < X.cols(); ++c) next(i, c) = X(i, c) + B(i, c) * dt + shock(i, c);
}

inline Points terminal_rows(const PenaltySpec& penalty, double k, const Points& XM, const Points& law) {
  if (k == 0.0) return Points::Zero(XM.rows(), XM.cols());
  Points g = LawDerivative(penalty, law).rows(XM);
  return k * g;
}

inline Points terminal_rows(const PenaltySpec& penalty, double k, const Points& XM, const VectorXd& summary) {
  if (k == 0.0) return Points::Zero(XM.rows(), XM.cols());
  Points g = LawDerivative(penalty, summary).rows(XM);
  return k * g;
}

inline Points unpermute(const Points& canon, const std::vector<int>& order) {
  Points out(canon.rows(), canon.cols());
  for (std::size_t i = 0; i < order.size(); ++i) out.row(order[i]) = canon.row(static_cast<Eigen::Index>(i));
  return out;
}

struct PathSet {
  std::vector<Points> X, Y;
  std::vector<MatrixXd> design;
};

inline double flow_distance(const PathSet& a, const PathSet& b) {
  double worst = 0.0;
  for (std::size_t j = 0; j < a.X.size(); ++j) {
    const Points& xa = a.X[j];
    double s = 0.0;
    for (Eigen::Index i = 0; i < xa.rows(); ++i)
      s += std::sqrt((xa.row(i) - b.X[j].row(i)).squaredNorm() + (a.Y[j].row(i) - b.Y[j].row(i)).squaredNorm());
    worst = std::max(worst, s / static_cast<double>(xa.rows()));
  }
  return worst;
}

inline VectorXd flatten(const std::vector<MatrixXd>& coef) {
  Eigen::Index total = 0;
  for (const auto& c : coef) total += c.size();
  VectorXd v(total);
  Eigen::Index o = 0;
  for (const auto& c : coef) {
    v.segment(o, c.size()) = Eigen::Map<const VectorXd>(c.data(), c.size());
    o += c.size();
  }
  return v;
}

inline void unflatten(const VectorXd& v, std::vector<MatrixXd>& coef) {
  Eigen::Index o = 0;
  for (auto& c : coef) {
    c = Eigen::Map<const MatrixXd>(v.data() + o, c.rows(), c.cols());
    o += c.size();
  }
}

/// Picard / Anderson iteration on the decoupling field. `noise` must already be in the order
/// the caller wants reductions performed in.
///
/// When the terminal condition depends on the law only through a finite summary (feature or
/// member means) it has the form sum_c w_c grad psi_c, and the solve is nested: the inner loop
/// solves the FBSDE with the weights w frozen, the outer loop is a quasi-Newton iteration on w.
class PicardEngine {
  static constexpr double kMinDamping = 0.01;

 public:
  PicardEngine(const ProblemSpec& spec, double k, const PenaltySpec& penalty, const TimeGrid& grid,
               const SolverConfig& cfg, const NoiseBank& noise, const DecouplingField* warm)
      : spec_(spec), k_(k), penalty_(penalty), grid_(grid), cfg_(cfg), noise_(noise) {
    const int M = grid.steps;
    for (int j = 0; j < M; ++j) shock_.push_back(shocks(noise.increments(j), spec.sigma));
    if (warm && warm->nodes() == M && warm->basis && warm->basis->dim() == spec.dim) {
      field_ = *warm;
      scaled_ = true;
    } else {
      field_.basis = std::make_shared<RegressionBasis>(spec.dim, cfg.basis_degree, regression_features(penalty, spec.dim));
      field_.coef.assign(static_cast<std::size_t>(M), MatrixXd::Zero(field_.basis->size(), spec.dim));
    }
  }

  PathSet forward() {
    const int M = grid_.steps;
    const double dt = grid_.dt();
    PathSet p;
    p.X.resize(static_cast<std::size_t>(M + 1));
    p.Y.resize(static_cast<std::size_t>(M + 1));
    p.design.resize(static_cast<std::size_t>(M));
    p.X[0] = noise_.initial();
    Points B;
    for (int j = 0; j < M; ++j) {
      const auto sj = static_cast<std::size_t>(j);
      MatrixXd A = field_.basis->raw(p.X[sj]);
      if (!scaled_) field_.scaling.push_back(ColumnScaling::fit(A));
      field_.scaling[sj].apply(A);
      p.Y[sj] = rowwise_product(A, field_.coef[sj]);
      p.design[sj] = std::move(A);
      drift_all(spec_, grid_.node(j), p.X[sj], p.Y[sj], p.X[sj], B);
      euler_step(p.X[sj], B, shock_[sj], dt, p.X[sj + 1]);
      if (!p.X[sj + 1].allFinite() || !p.Y[sj].allFinite())
        throw SolverError(SolverError::Kind::non_finite,
                          "non-finite state at node " + std::to_string(j + 1) + " (t = " +
                              std::to_string(grid_.node(j + 1)) + ")",
                          residuals_, j + 1);
    }
    scaled_ = true;
    const Points& XM = p.X[static_cast<std::size_t>(M)];
    p.Y[static_cast<std::size_t>(M)] =
        weights_ ? weighted_summary_gradient(penalty_, *weights_, XM) : terminal_rows(penalty_, k_, XM, XM);
    if (!p.Y[static_cast<std::size_t>(M)].allFinite())
      throw SolverError(SolverError::Kind::non_finite, "non-finite terminal condition at node " + std::to_string(M),
                        residuals_, M);
    return p;
  }

  std::vector<MatrixXd> backward(const PathSet& p) const {
    const int M = grid_.steps;
    const double dt = grid_.dt();
    std::vector<MatrixXd> coef(static_cast<std::size_t>(M));
    Points Yn = p.Y[static_cast<std::size_t>(M)];
    Points F;
    for (int j = M - 1; j >= 0; --j) {
      const auto sj = static_cast<std::size_t>(j);
      sensitivity_all(spec_, grid_.node(j), p.X[sj], Yn, p.X[sj], Yn, F);
      MatrixXd target = Yn + dt * F;
      coef[sj] = ridge_solve(p.design[sj], target, cfg_.ridge);
      Yn = rowwise_product(p.design[sj], coef[sj]);
    }
    return coef;
  }

  // sup over nodes of the mean move of Y an undamped sweep would cause on the current paths
  static double defect(const PathSet& p, const std::vector<MatrixXd>& cur, const std::vector<MatrixXd>& next) {
    double worst = 0.0;
    for (std::size_t j = 0; j < cur.size(); ++j) {
      Points d = rowwise_product(p.design[j], next[j] - cur[j]);
      worst = std::max(worst, d.rowwise().norm().mean());
    }
    return worst;
  }

  // Damped Anderson-accelerated Picard until both the flow move and the defect are below tol.
  bool picard(PathSet& paths, double tol) {
    VectorXd x = flatten(field_.coef);
    std::vector<VectorXd> dX, dF;
    VectorXd x_prev, f_prev;
    double beta = cfg_.damping;
    bool accelerate = cfg_.anderson_depth > 0;
    double cap = cfg_.damping;
    double best = std::numeric_limits<double>::infinity();
    int rising = 0, falling = 0, stale = 0;
    VectorXd x_best;
    PathSet paths_best;
    const std::size_t first = residuals_.size();
    // Anderson can cycle when the terminal map is close to nonsmooth (sharp penalties at large k);
    // from then on this call uses plain damped sweeps
    auto plain = [&]() {
      accelerate = false;
      dX.clear();
      dF.clear();
      x_prev.resize(0);
      if (cfg_.fallback_damping > 0.0) cap = std::min(cap, cfg_.fallback_damping);
      beta = std::min(beta, cap);
    };
    for (int it = 1; it <= cfg_.max_picard; ++it) {
      std::vector<MatrixXd> g = backward(paths);
      const double dfct = defect(paths, field_.coef, g);
      VectorXd f = flatten(g) - x;

      if (accelerate && x_prev.size() == x.size()) {
        dX.push_back(x - x_prev);
        dF.push_back(f - f_prev);
        if (static_cast<int>(dX.size()) > cfg_.anderson_depth) {
          dX.erase(dX.begin());
          dF.erase(dF.begin());
        }
      }
      VectorXd x_new = x + beta * f;
      if (!dF.empty()) {
        MatrixXd DF(x.size(), static_cast<Eigen::Index>(dF.size())), DX(x.size(), static_cast<Eigen::Index>(dX.size()));
        for (std::size_t q = 0; q < dF.size(); ++q) {
          DF.col(static_cast<Eigen::Index>(q)) = dF[q];
          DX.col(static_cast<Eigen::Index>(q)) = dX[q];
        }
        VectorXd gamma = DF.colPivHouseholderQr().solve(f);
        VectorXd cand = x + beta * f - (DX + beta * DF) * gamma;
        if (cand.allFinite()) x_new = cand;
      }
      x_prev = x;
      f_prev = f;

      // trial steps that blow up the forward pass are pulled back toward the current field
      PathSet next;
      for (int back = 0;; ++back) {
        unflatten(x_new, field_.coef);
        try {
          next = forward();
          break;
        } catch (const SolverError& e) {
          if (e.kind() != SolverError::Kind::non_finite || back >= 8) throw;
          x_new = x + 0.25 * (x_new - x);
          plain();
          beta = std::max(0.5 * beta, kMinDamping);
        }
      }
      const double r = flow_distance(next, paths);
      residuals_.push_back(r);
      ++iterations_;
      x = x_new;
      paths = std::move(next);

      if (r < tol && dfct < tol) return true;
      if (residuals_.size() >= first + 2 && r > residuals_[residuals_.size() - 2]) {
        if (++rising >= cfg_.divergence_patience) {
          std::ostringstream msg;
          msg << "Picard iteration diverged: residual rose for " << rising << " consecutive iterations (last "
              << r << ")";
          throw SolverError(SolverError::Kind::divergence, msg.str(), residuals_);
        }
        if (accelerate) {
          if (rising >= 2 || r > 4.0 * best) plain();
        } else if (rising >= 2 || r > 2.0 * best) {
          beta = std::max(0.5 * beta, kMinDamping);
        }
        falling = 0;
      } else {
        rising = 0;
        if (++falling >= 5 && beta < cap) {
          beta = std::min(cap, 1.5 * beta);
          falling = 0;
        }
      }
      // a jump well past the best residual is not continued from: once particles are thrown out
      // the cubic part of the basis extrapolates badly
      if (r > 4.0 * best && x_best.size() == x.size()) {
        x = x_best;
        unflatten(x, field_.coef);
        paths = paths_best;
        dX.clear();
        dF.clear();
        x_prev.resize(0);
      }
      if (r < best) {
        best = r;
        x_best = x;
        paths_best = paths;
        stale = 0;
      } else if (++stale >= 20 && accelerate) {
        plain();
        stale = 0;
      }
    }
    // out of iterations: hand back the best iterate rather than the last
    if (x_best.size() == x.size()) {
      unflatten(x_best, field_.coef);
      paths = std::move(paths_best);
    }
    return false;
  }

  // Response of the summary to the terminal weights. For the entropic problem without interaction
  // the terminal law is an h-transform and d summary / d w = -E[Cov(psi(X_T) | X_0)] / (c sigma^2),
  // c the cost curvature; elsewhere it serves as the starting Jacobian for the secant updates.
  // The conditional mean is the regression onto the node-0 basis.
  MatrixXd summary_response(const PathSet& p) const {
    const MatrixXd Psi = summary_values(penalty_, p.X.back());
    const MatrixXd& A = p.design[0];
    const MatrixXd P = A * ridge_solve(A, Psi, cfg_.ridge);
    const double n = static_cast<double>(Psi.rows());
    const double diffusion = (spec_.sigma * spec_.sigma.transpose()).trace() / static_cast<double>(spec_.dim);
    const double curvature = spec_.cost.strong_convexity() > 0.0 ? spec_.cost.strong_convexity() : 1.0;
    MatrixXd C = (Psi.transpose() * Psi - P.transpose() * P) / n;
    return -C / (curvature * std::max(diffusion, 1e-12));
  }

  // k d(coefficients)/d(summary) by central differences
  MatrixXd coefficient_slope(const VectorXd& s) const {
    const Eigen::Index q = s.size();
    MatrixXd D(q, q);
    for (Eigen::Index c = 0; c < q; ++c) {
      const double h = 1e-6 * std::max(1.0, std::abs(s(c)));
      VectorXd up = s, dn = s;
      up(c) += h;
      dn(c) -= h;
      D.col(c) = k_ * (LawDerivative(penalty_, up).coefficients() - LawDerivative(penalty_, dn).coefficients()) / (2.0 * h);
    }
    return D;
  }

  // Newton-type iteration on the terminal weights w: solve the FBSDE with Y_T = sum_c w_c grad psi_c,
  // then require w = k * coefficients(summary(L(X_T))).
  bool outer(PathSet& paths, VectorXd w) {
    const auto sM = static_cast<std::size_t>(grid_.steps);
    const Eigen::Index q = w.size();
    VectorXd w_prev, H_prev, step;
    MatrixXd J;
    DecouplingField field_prev = field_;
    double res_prev = std::numeric_limits<double>::infinity();
    int halvings = 0;
    for (int o = 1; o <= cfg_.max_outer; ++o) {
      weights_ = w;
      // inexact inner solves while far from the outer fixed point
      const double inner_tol = std::max(cfg_.inner_tol * cfg_.tol, cfg_.inner_tol * std::min(res_prev, 1.0));
      bool inner_ok = false;
      try {
        paths = forward();
        inner_ok = picard(paths, inner_tol);
      } catch (const SolverError& e) {
        // a step that breaks the inner solve is shortened, as a rejected step would be
        if (e.kind() == SolverError::Kind::precondition || !w_prev.size() || halvings >= 8) throw;
        ++halvings;
        step *= 0.5;
        w = w_prev + step;
        field_ = field_prev;
        J.resize(0, 0);
        continue;
      }
      const VectorXd s = law_summary(penalty_, paths.X[sM]);
      const VectorXd H = k_ * LawDerivative(penalty_, s).coefficients() - w;
      const double res = weighted_summary_gradient(penalty_, H, paths.X[sM]).rowwise().norm().mean();
      outer_.push_back(res);
      if (!std::isfinite(res))
        throw SolverError(SolverError::Kind::non_finite, "non-finite law summary", residuals_, grid_.steps);
      if (res < cfg_.tol && inner_ok) return true;
      if (w_prev.size() && res > res_prev && halvings < 4) {
        ++halvings;
        step *= 0.5;
        w = w_prev + step;
        J.resize(0, 0);  // rebuild from the regression response after the rejected step
        continue;
      }
      if (J.size() == 0 || halvings > 0) {
        J = coefficient_slope(s) * summary_response(paths) - MatrixXd::Identity(q, q);
      } else {
        // Broyden update along the accepted step
        const VectorXd dw = w - w_prev;
        const double dd = dw.squaredNorm();
        if (dd > 0.0) J += ((H - H_prev) - J * dw) * dw.transpose() / dd;
      }
      halvings = 0;
      w_prev = w;
      H_prev = H;
      res_prev = res;
      field_prev = field_;
      step = J.colPivHouseholderQr().solve(-H);
      if (!step.allFinite()) step = H;
      // trust region: the terminal move may be at most twice that of the plain fixed-point step
      const double move = weighted_summary_gradient(penalty_, step, paths.X[sM]).rowwise().norm().mean();
      if (move > 2.0 * res) step *= 2.0 * res / move;
      w += step;
    }
    return false;
  }

  FbsdeSolution run() {
    const int M = grid_.steps;
    const auto sM = static_cast<std::size_t>(M);
    FbsdeSolution sol;
    sol.grid = grid_;
    sol.k = k_;
    sol.noise_id = noise_.id();

    PathSet paths;
    bool converged;
    const Eigen::Index q = static_cast<Eigen::Index>(summary_gradients(penalty_, noise_.initial().topRows(1)).size());
    if (k_ > 0.0 && q > 0) {
      VectorXd w = field_.terminal_weights.size() == q ? field_.terminal_weights : VectorXd::Zero(q);
      converged = outer(paths, w);
      field_.terminal_weights = *weights_;
      // terminal condition from the actual terminal law
      weights_.reset();
      paths.Y[sM] = terminal_rows(penalty_, k_, paths.X[sM], paths.X[sM]);
    } else {
      paths = forward();
      converged = picard(paths, cfg_.tol);
    }

    sol.picard_residuals = residuals_;
    sol.outer_residuals = outer_;
    sol.converged = converged;
    sol.iterations = iterations_;
    sol.X = std::move(paths.X);
    sol.Y = std::move(paths.Y);
    sol.field = field_;

    const double dt = grid_.dt();
    const int d = noise_.noise_dim(), m = spec_.dim;
    sol.Z.resize(sM);
    for (int j = 0; j < M; ++j) {
      const auto sj = static_cast<std::size_t>(j);
      const Points& dW = noise_.increments(j);
      MatrixXd T(dW.rows(), m * d);
      for (Eigen::Index i = 0; i < dW.rows(); ++i)
        for (int c = 0; c < m; ++c)
          for (int e = 0; e < d; ++e) T(i, c * d + e) = (sol.Y[sj + 1](i, c) - sol.Y[sj](i, c)) * dW(i, e) / dt;
      sol.Z[sj] = rowwise_product(paths.design[sj], ridge_solve(paths.design[sj], T, cfg_.ridge));
    }
    sol.control.resize(sM + 1);
    for (int j = 0; j <= M; ++j) {
      const auto sj = static_cast<std::size_t>(j);
      if (std::holds_alternative<QuadraticCost>(spec_.cost.f1)) {
        sol.control[sj] = -sol.Y[sj];
      } else {
        sol.control[sj].resize(sol.Y[sj].rows(), m);
        for (Eigen::Index i = 0; i < sol.Y[sj].rows(); ++i)
          sol.control[sj].row(i) = lambda_min(spec_.cost, grid_.node(j), sol.Y[sj].row(i).transpose()).transpose();
      }
    }
    return sol;
  }

 private:
  const ProblemSpec& spec_;
  double k_;
  const PenaltySpec& penalty_;
  TimeGrid grid_;
  const SolverConfig& cfg_;
  const NoiseBank& noise_;
  std::vector<Points> shock_;
  DecouplingField field_;
  bool scaled_ = false;
  std::optional<VectorXd> weights_;
  std::vector<double> residuals_, outer_;
  int iterations_ = 0;
};

inline void check_inputs(const ProblemSpec& spec, double k, const TimeGrid& grid, const NoiseBank& noise,
                         const SolverConfig& cfg) {
  if (!std::isfinite(k) || k < 0.0) throw SolverError(SolverError::Kind::precondition, "penalty weight k must be finite and >= 0");
  if (noise.particles() < cfg.min_particles)
    throw SolverError(SolverError::Kind::precondition, "particle count " + std::to_string(noise.particles()) +
                                                           " below min_particles " + std::to_string(cfg.min_particles));
  if (noise.steps() != grid.steps) throw SolverError(SolverError::Kind::precondition, "noise bank has wrong step count");
  if (noise.dim() != spec.dim || noise.noise_dim() != spec.noise_dim())
    throw SolverError(SolverError::Kind::precondition, "noise bank dimension mismatch");
  if (std::abs(grid.horizon - spec.horizon) > 1e-12 * spec.horizon)
    throw SolverError(SolverError::Kind::precondition, "time grid horizon differs from the problem horizon");
}

/// Runs the engine in canonical particle order and maps the result back to the bank's order.
inline FbsdeSolution solve_on_bank(const ProblemSpec& spec, double k, const PenaltySpec& penalty, const TimeGrid& grid,
                                   const SolverConfig& cfg, const NoiseBank& noise, const DecouplingField* warm) {
  check_inputs(spec, k, grid, noise, cfg);
  std::vector<int> order = noise.canonical_order();
  NoiseBank canon = noise.select(order);
  FbsdeSolution sol;
  std::optional<SolverError> first_error;
  try {
    PicardEngine engine(spec, k, penalty, grid, cfg, canon, warm);
    sol = engine.run();
  } catch (const SolverError& e) {
    if (e.kind() == SolverError::Kind::precondition) throw;
    first_error = e;
  }
  // Anderson can cycle when the terminal map is close to nonsmooth (sharp penalties at large k);
  // plain damped sweeps from a cold start are slower but settle there.
  if ((first_error || !sol.converged) && cfg.anderson_depth > 0 && cfg.fallback_damping > 0.0) {
    SolverConfig plain = cfg;
    plain.anderson_depth = 0;
    plain.damping = std::min(cfg.damping, cfg.fallback_damping);
    plain.max_picard = 2 * cfg.max_picard;
    std::string why = first_error ? first_error->what() : "no convergence in " + std::to_string(cfg.max_picard) + " iterations";
    try {
      PicardEngine engine(spec, k, penalty, grid, plain, canon, nullptr);
      FbsdeSolution retry = engine.run();
      if (retry.converged || first_error) {
        sol = std::move(retry);
        sol.events.push_back("accelerated solve failed (" + why + "); re-solved with plain damping " +
                             std::to_string(plain.damping));
        first_error.reset();
      }
    } catch (const SolverError&) {
      if (!first_error) sol.events.push_back("plain damped re-solve also failed");
    }
  }
  if (first_error) throw *first_error;
  sol.noise_id = noise.id();
  for (auto* arr : {&sol.X, &sol.Y, &sol.Z, &sol.control})
    for (auto& p : *arr) p = unpermute(p, order);
  return sol;
}

inline double max_row_norm(const Points& p) { return p.rowwise().norm().maxCoeff(); }

}  // namespace detail

/// Mean-field solve on an explicit noise bank. The stiffness guard only reports here, since
/// refining the grid would need a different bank.
inline FbsdeSolution solve_mkv_fbsde(const ProblemSpec& spec, double k, const PenaltySpec& penalty, const TimeGrid& grid,
                                     const SolverConfig& cfg, const NoiseBank& noise,
                                     const DecouplingField* warm = nullptr) {
  FbsdeSolution sol = detail::solve_on_bank(spec, k, penalty, grid, cfg, noise, warm);
  const double stiff = detail::max_row_norm(sol.Y.back()) * grid.dt();
  if (stiff > cfg.stiff_threshold) {
    std::ostringstream msg;
    msg << "warning: stiffness " << stiff << " exceeds threshold " << cfg.stiff_threshold
        << " on a supplied noise bank; grid not refined";
    sol.events.push_back(msg.str());
  }
  return sol;
}

/// Mean-field solve with n particles drawn from the seed. When k * max|dmu g| * dt exceeds
/// cfg.stiff_threshold the step count is doubled and the solve repeated.
inline FbsdeSolution solve_mkv_fbsde(const ProblemSpec& spec, double k, const PenaltySpec& penalty, TimeGrid grid,
                                     int n, const SolverConfig& cfg, std::uint64_t seed,
                                     const DecouplingField* warm = nullptr) {
  spec.validate();
  std::vector<std::string> events;
  for (int refinement = 0;; ++refinement) {
    NoiseBank noise(spec.mu_in, n, grid, spec.noise_dim(), seed);
    FbsdeSolution sol = detail::solve_on_bank(spec, k, penalty, grid, cfg, noise, warm);
    const double stiff = detail::max_row_norm(sol.Y.back()) * grid.dt();
    if (stiff <= cfg.stiff_threshold || refinement >= cfg.max_refinements) {
      if (stiff > cfg.stiff_threshold) {
        std::ostringstream msg;
        msg << "warning: stiffness " << stiff << " still above threshold after " << refinement << " refinements";
        events.push_back(msg.str());
      }
      sol.events.insert(sol.events.begin(), events.begin(), events.end());
      return sol;
    }
    std::ostringstream msg;
    msg << "stiffness " << stiff << " > " << cfg.stiff_threshold << ": steps " << grid.steps << " -> " << 2 * grid.steps;
    events.push_back(msg.str());
    grid = TimeGrid(grid.horizon, 2 * grid.steps);
    warm = nullptr;
  }
}

namespace detail {

// particle mean and standard error of the left-endpoint running-cost integral
// terminal: optional per-particle terminal terms, added to the samples behind std_error only.
inline ValueEstimate running_cost_estimate(const ProblemSpec& spec, const TimeGrid& grid, const std::vector<Points>& X,
                                           const std::vector<Points>& control, const VectorXd* terminal = nullptr) {
  const int n = static_cast<int>(X[0].rows()), M = grid.steps;
  const double dt = grid.dt();
  std::vector<double> run(static_cast<std::size_t>(n), 0.0);
  for (int j = 0; j < M; ++j) {
    const auto sj = static_cast<std::size_t>(j);
    const double t = grid.node(j);
    for (int i = 0; i < n; ++i) {
      VectorXd a = control[sj].row(i).transpose();
      double f = f1_value(spec.cost, t, a);
      if (spec.cost.f2) f += f2_value(spec, t, X[sj].row(i).transpose(), X[sj]);
      run[static_cast<std::size_t>(i)] += f * dt;
    }
  }
  double mean = 0.0;
  for (double v : run) mean += v;
  mean /= n;
  double var = 0.0;
  if (terminal) {
    const double tm = terminal->mean();
    for (int i = 0; i < n; ++i) {
      const double v = run[static_cast<std::size_t>(i)] - mean + (*terminal)(i) - tm;
      var += v * v;
    }
  } else {
    for (double v : run) var += (v - mean) * (v - mean);
  }
  ValueEstimate est;
  est.running = mean;
  est.value = mean;
  est.std_error = n > 1 ? std::sqrt(var / (n - 1) / n) : 0.0;
  return est;
}

}  // namespace detail

/// Left-endpoint quadrature of the running cost plus k * g(terminal law).
inline ValueEstimate estimate_value(const FbsdeSolution& sol, const ProblemSpec& spec, double k,
                                    const PenaltySpec& penalty) {
  const VectorXd infl = k * penalty_influence(penalty, sol.X.back());
  ValueEstimate est = detail::running_cost_estimate(spec, sol.grid, sol.X, sol.control, k == 0.0 ? nullptr : &infl);
  est.penalty = k == 0.0 ? 0.0 : k * penalty_value(penalty, sol.X.back());
  est.value = est.running + est.penalty;
  return est;
}

/// Re-integrates the forward system with a fixed decoupling field. With `frozen_law` the law
/// argument at node j is frozen_law[j] (and the terminal law its last entry); otherwise the
/// replayed cloud is its own law.
inline FbsdeSolution replay_with_field(const ProblemSpec& spec, double k, const PenaltySpec& penalty,
                                       const DecouplingField& field, const TimeGrid& grid, const NoiseBank& noise,
                                       const std::vector<Points>* frozen_law = nullptr) {
  const int M = grid.steps;
  if (field.nodes() != M || noise.steps() != M) throw std::invalid_argument("replay: grid mismatch");
  FbsdeSolution out;
  out.grid = grid;
  out.k = k;
  out.noise_id = noise.id();
  out.field = field;
  out.converged = true;
  out.X.resize(static_cast<std::size_t>(M + 1));
  out.Y.resize(static_cast<std::size_t>(M + 1));
  out.X[0] = noise.initial();
  Points B;
  for (int j = 0; j < M; ++j) {
    const auto sj = static_cast<std::size_t>(j);
    out.Y[sj] = detail::rowwise_product(field.design(j, out.X[sj]), field.coef[sj]);
    const Points& law = frozen_law ? (*frozen_law)[sj] : out.X[sj];
    drift_all(spec, grid.node(j), out.X[sj], out.Y[sj], law, B);
    detail::euler_step(out.X[sj], B, detail::shocks(noise.increments(j), spec.sigma), grid.dt(), out.X[sj + 1]);
  }
  const Points& lawM = frozen_law ? frozen_law->back() : out.X.back();
  out.Y.back() = detail::terminal_rows(penalty, k, out.X.back(), lawM);
  out.control.resize(static_cast<std::size_t>(M + 1));
  for (int j = 0; j <= M; ++j) {
    const auto sj = static_cast<std::size_t>(j);
    out.control[sj].resize(out.Y[sj].rows(), spec.dim);
    for (Eigen::Index i = 0; i < out.Y[sj].rows(); ++i)
      out.control[sj].row(i) = lambda_min(spec.cost, grid.node(j), out.Y[sj].row(i).transpose()).transpose();
  }
  return out;
}

// ---- penalization ladder ----

struct LadderRow {
  double k = 0.0;
  ValueEstimate value;
  double terminal_penalty = 0.0;  // g(L(X_T))
  double terminal_w2 = 0.0;       // W2(terminal cloud, mu_fin sample)
  bool converged = false;
  int iterations = 0;
  int steps = 0;
  std::string error;
};

struct LadderReport {
  std::vector<LadderRow> rows;
  std::vector<std::string> monotonicity_violations;
  std::vector<std::string> weak_duality_violations;
  double decay_slope = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> oracle_value;
};

/// OLS slope of log(y) against log(x) over pairs with x, y > 0.
inline double loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (xs[i] > 0.0 && ys[i] > 0.0 && std::isfinite(ys[i])) {
      lx.push_back(std::log(xs[i]));
      ly.push_back(std::log(ys[i]));
    }
  if (lx.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= lx.size();
  my /= ly.size();
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  return sxy / sxx;
}

/// Solves for each k on common noise, warm-starting each solve from the previous field.
inline LadderReport run_k_ladder(const ProblemSpec& spec, const std::vector<double>& ks, const PenaltySpec& penalty,
                                 const TimeGrid& grid, int n, const SolverConfig& cfg, std::uint64_t seed,
                                 std::optional<double> oracle_value = std::nullopt,
                                 FbsdeSolution* last_solution = nullptr) {
  if (ks.empty()) throw std::invalid_argument("k ladder: need at least one k");
  for (std::size_t i = 1; i < ks.size(); ++i)
    if (!(ks[i] > ks[i - 1])) throw std::invalid_argument("k ladder: ks must be strictly increasing");
  LadderReport rep;
  rep.oracle_value = oracle_value;
  const ParticleCloud target = sample(spec.mu_fin, n, derive_seed(seed, "ladder-target"));
  std::optional<DecouplingField> warm;
  for (double k : ks) {
    LadderRow row;
    row.k = k;
    try {
      FbsdeSolution sol = solve_mkv_fbsde(spec, k, penalty, grid, n, cfg, seed, warm ? &*warm : nullptr);
      row.value = estimate_value(sol, spec, k, penalty);
      row.terminal_penalty = penalty_value(penalty, sol.X.back());
      row.terminal_w2 = wasserstein(2, sol.law(sol.grid.steps), target);
      row.converged = sol.converged;
      row.iterations = sol.iterations;
      row.steps = sol.grid.steps;
      if (!sol.converged) row.error = "not converged after " + std::to_string(sol.iterations) + " iterations";
      if (sol.grid.steps == grid.steps) warm = sol.field;
      if (last_solution && k == ks.back()) *last_solution = std::move(sol);
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rep.rows.push_back(row);
  }
  for (std::size_t i = 1; i < rep.rows.size(); ++i) {
    const auto& a = rep.rows[i - 1];
    const auto& b = rep.rows[i];
    if (!a.error.empty() || !b.error.empty()) continue;
    const double tol = 2.0 * std::hypot(a.value.std_error, b.value.std_error);
    if (b.value.value < a.value.value - tol) {
      std::ostringstream msg;
      msg << "V(k=" << b.k << ") = " << b.value.value << " < V(k=" << a.k << ") = " << a.value.value
          << " beyond 2*se = " << tol;
      rep.monotonicity_violations.push_back(msg.str());
    }
  }
  if (oracle_value) {
    for (const auto& r : rep.rows) {
      if (!r.error.empty()) continue;
      if (r.value.value > *oracle_value + 3.0 * r.value.std_error) {
        std::ostringstream msg;
        msg << "V(k=" << r.k << ") = " << r.value.value << " exceeds constrained value " << *oracle_value;
        rep.weak_duality_violations.push_back(msg.str());
      }
    }
  }
  std::vector<double> kx, gy;
  for (const auto& r : rep.rows)
    if (r.error.empty()) {
      kx.push_back(r.k);
      gy.push_back(r.terminal_penalty);
    }
  rep.decay_slope = loglog_slope(kx, gy);
  return rep;
}

}  // namespace mfsb
