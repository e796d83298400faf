#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mfsb/mkv_solver.hpp"
#include "mfsb/parallel.hpp"
#include "mfsb/particle_solver.hpp"
#include "mfsb/phi_family.hpp"

namespace mfsb {

// ---- synchronous coupling ----

struct ChaosRow {
  int N = 0;
  double h2_error = 0.0;      // mean over replications
  double h2_std_error = 0.0;  // across replications
  int failed = 0;             // replications left out because the N-particle solve did not converge
  double epsilon_n = 0.0;     // mean over replications
  double ratio = 0.0;
  int replications = 0;
  bool converged = false;
  std::string error;
};

struct ChaosReport {
  std::vector<ChaosRow> rows;
  double slope = std::numeric_limits<double>::quiet_NaN();     // log H2-error against log N
  double spearman = std::numeric_limits<double>::quiet_NaN();  // rank correlation of ratio with N
  int reference_particles = 0;
  bool reference_converged = false;
  std::string wasserstein_mode;
};

struct ChaosOptions {
  int n_ref = 0;         // reference particles, 0 gives 4 max N
  int replications = 1;  // independent banks per N
  WassersteinOptions wasserstein;
  int threads = 1;       // workers for the replications
};

/// Spearman rank correlation (average ranks for ties).
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  auto ranks = [](const std::vector<double>& v) {
    std::vector<int> idx(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) idx[i] = static_cast<int>(i);
    std::sort(idx.begin(), idx.end(), [&v](int x, int y) { return v[static_cast<std::size_t>(x)] < v[static_cast<std::size_t>(y)]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[static_cast<std::size_t>(idx[j + 1])] == v[static_cast<std::size_t>(idx[i])]) ++j;
      for (std::size_t q = i; q <= j; ++q) r[static_cast<std::size_t>(idx[q])] = 0.5 * static_cast<double>(i + j) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const std::vector<double> ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

/// Left-endpoint quadrature of W1^2 between the joint clouds and the reference clouds.
/// Node lists may have M or M+1 entries; the last node is not used in the quadrature.
inline double epsilon_n(const std::vector<Points>& joint, const std::vector<Points>& reference, const TimeGrid& grid,
                        const WassersteinOptions& opts = {}, std::string* mode = nullptr) {
  if (joint.size() != reference.size()) throw std::invalid_argument("epsilon_n: node counts differ");
  const std::size_t nodes = std::min(joint.size(), static_cast<std::size_t>(grid.steps));
  double eps = 0.0;
  for (std::size_t j = 0; j < nodes; ++j) {
    WassersteinResult w = wasserstein_detailed(1, joint[j], reference[j], opts);
    if (mode) *mode = to_string(w.mode);
    eps += w.value * w.value * grid.dt();
  }
  return eps;
}

namespace detail {

inline std::vector<Points> joint_clouds(const std::vector<Points>& X, const std::vector<Points>& Y) {
  std::vector<Points> out;
  for (std::size_t j = 0; j < X.size(); ++j) {
    Points p(X[j].rows(), 2 * X[j].cols());
    p << X[j], Y[j];
    out.push_back(std::move(p));
  }
  return out;
}

// mean over particles of sup_j |dX_j|^2 + sum_{j<M} |dY_j|^2 dt
inline double h2_distance(const std::vector<Points>& Xa, const std::vector<Points>& Ya, const std::vector<Points>& Xb,
                          const std::vector<Points>& Yb, double dt) {
  const Eigen::Index n = Xa[0].rows();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double sup = 0.0, integral = 0.0;
    for (std::size_t j = 0; j < Xa.size(); ++j) {
      sup = std::max(sup, (Xa[j].row(i) - Xb[j].row(i)).squaredNorm());
      if (j + 1 < Xa.size()) integral += (Ya[j].row(i) - Yb[j].row(i)).squaredNorm() * dt;
    }
    total += sup + integral;
  }
  return total / static_cast<double>(n);
}

}  // namespace detail

/// For each N: solve the N-particle system on fresh banks and compare it pathwise with the
/// mean-field copies driven by the same rows. The copies share the law flow and decoupling
/// field of one reference solve on n_ref particles. H2-error and epsilon_N are averaged over
/// the replications.
inline ChaosReport synchronous_coupling_error(const ProblemSpec& spec, double k, const ConvexDualPenalty& phi,
                                              const std::vector<int>& Ns, const TimeGrid& grid,
                                              const SolverConfig& cfg, std::uint64_t seed,
                                              const ChaosOptions& opts = {}) {
  if (Ns.empty()) throw std::invalid_argument("chaos: empty N list");
  for (std::size_t i = 1; i < Ns.size(); ++i)
    if (Ns[i] <= Ns[i - 1]) throw std::invalid_argument("chaos: N list must be strictly increasing");
  if (Ns.front() < 1) throw std::invalid_argument("chaos: N must be >= 1");
  if (opts.replications < 1) throw std::invalid_argument("chaos: replications must be >= 1");
  const int n_ref = opts.n_ref > 0 ? opts.n_ref : 4 * Ns.back();
  spec.validate();
  const PenaltySpec penalty = phi;
  ChaosReport rep;
  rep.reference_particles = n_ref;
  NoiseBank ref_bank(spec.mu_in, n_ref, grid, spec.noise_dim(), derive_seed(seed, "chaos-reference"));
  FbsdeSolution ref = solve_mkv_fbsde(spec, k, penalty, grid, cfg, ref_bank);
  rep.reference_converged = ref.converged;
  const std::vector<Points> ref_joint = detail::joint_clouds(ref.X, ref.Y);

  std::vector<double> lx, ly, ratios;
  for (int N : Ns) {
    ChaosRow row;
    row.N = N;
    row.converged = true;
    try {
      struct Rep {
        bool ok = false;
        int iterations = 0;
        double h2 = 0.0, eps = 0.0;
        std::string mode;
      };
      std::vector<Rep> reps(static_cast<std::size_t>(opts.replications));
      parallel_for(opts.replications, opts.threads, [&](int r) {
        const std::uint64_t tag = static_cast<std::uint64_t>(N) * 1000003ULL + static_cast<std::uint64_t>(r);
        NoiseBank bank(spec.mu_in, N, grid, spec.noise_dim(), derive_seed(seed, "chaos", tag));
        NParticleSolution ps = solve_nparticle_fbsde(spec, k, phi, N, grid, cfg, bank);
        Rep& out = reps[static_cast<std::size_t>(r)];
        out.iterations = ps.iterations;
        if (!ps.converged) return;
        FbsdeSolution copies = replay_with_field(spec, k, penalty, ref.field, grid, bank, &ref.X);
        out.ok = true;
        out.h2 = detail::h2_distance(ps.X, ps.Y, copies.X, copies.Y, grid.dt());
        out.eps = epsilon_n(detail::joint_clouds(copies.X, copies.Y), ref_joint, grid, opts.wasserstein, &out.mode);
      });
      std::vector<double> h2;
      double eps = 0.0;
      for (const Rep& r : reps) {
        if (!r.ok) {
          // left out of the averages, the row records it
          row.converged = false;
          ++row.failed;
          row.error = "N-particle solve not converged after " + std::to_string(r.iterations) + " iterations";
          continue;
        }
        h2.push_back(r.h2);
        eps += r.eps;
        rep.wasserstein_mode = r.mode;
      }
      if (h2.empty()) throw SolverError(SolverError::Kind::divergence, "no converged replication at N = " + std::to_string(N));
      const double R = static_cast<double>(h2.size());
      double mean = 0.0;
      for (double v : h2) mean += v;
      mean /= R;
      double var = 0.0;
      for (double v : h2) var += (v - mean) * (v - mean);
      row.replications = static_cast<int>(h2.size());
      row.h2_error = mean;
      row.h2_std_error = h2.size() > 1 ? std::sqrt(var / (R - 1.0) / R) : 0.0;
      row.epsilon_n = eps / R;
      row.ratio = row.epsilon_n > 0.0 ? row.h2_error / row.epsilon_n : std::numeric_limits<double>::infinity();
      lx.push_back(N);
      ly.push_back(row.h2_error);
      ratios.push_back(row.ratio);
    } catch (const std::exception& e) {
      row.converged = false;
      row.error = e.what();
    }
    rep.rows.push_back(row);
  }
  rep.slope = loglog_slope(lx, ly);
  rep.spearman = spearman(lx, ratios);
  return rep;
}

// ---- martingale test ----

struct MartingaleReport {
  std::vector<std::string> features;
  std::vector<double> correlations;  // one per (feature, coordinate of the increment)
  double max_abs_correlation = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

/// Increments dM_j = Y_{j+1} - Y_j + F(t_j, X_j, Y_j, joint law_j) dt, pooled over nodes and
/// particles, tested for orthogonality to {1, X_j, Y_j, X_j^2, Y_j^2, t_j} through the uncentered
/// sample correlation; the threshold is 3 / sqrt(n).
inline MartingaleReport martingale_test(const FbsdeSolution& sol, const ProblemSpec& spec) {
  const int n = sol.particles(), m = sol.dim(), M = sol.grid.steps;
  const double dt = sol.grid.dt();
  std::vector<Points> dM(static_cast<std::size_t>(M));
  Points F;
  for (int j = 0; j < M; ++j) {
    const auto sj = static_cast<std::size_t>(j);
    sensitivity_all(spec, sol.grid.node(j), sol.X[sj], sol.Y[sj], sol.X[sj], sol.Y[sj], F);
    dM[sj] = sol.Y[sj + 1] - sol.Y[sj] + dt * F;
  }
  MartingaleReport rep;
  std::vector<std::function<double(int, int, int)>> feats;  // (node, particle, coordinate)
  auto add = [&rep, &feats](std::string name, std::function<double(int, int, int)> f) {
    rep.features.push_back(std::move(name));
    feats.push_back(std::move(f));
  };
  add("1", [](int, int, int) { return 1.0; });
  for (int c = 0; c < m; ++c) {
    const std::string s = std::to_string(c);
    add("X" + s, [&sol, c](int j, int i, int) { return sol.X[static_cast<std::size_t>(j)](i, c); });
    add("Y" + s, [&sol, c](int j, int i, int) { return sol.Y[static_cast<std::size_t>(j)](i, c); });
    add("X" + s + "^2", [&sol, c](int j, int i, int) { return std::pow(sol.X[static_cast<std::size_t>(j)](i, c), 2); });
    add("Y" + s + "^2", [&sol, c](int j, int i, int) { return std::pow(sol.Y[static_cast<std::size_t>(j)](i, c), 2); });
  }
  add("t", [&sol](int j, int, int) { return sol.grid.node(j); });

  std::vector<std::string> names;
  for (std::size_t f = 0; f < feats.size(); ++f)
    for (int c = 0; c < m; ++c) {
      double sfm = 0.0, sff = 0.0, smm = 0.0;
      for (int j = 0; j < M; ++j)
        for (int i = 0; i < n; ++i) {
          const double fv = feats[f](j, i, c);
          const double mv = dM[static_cast<std::size_t>(j)](i, c);
          sfm += fv * mv;
          sff += fv * fv;
          smm += mv * mv;
        }
      const double corr = (sff > 0.0 && smm > 0.0) ? sfm / std::sqrt(sff * smm) : 0.0;
      rep.correlations.push_back(corr);
      names.push_back(rep.features[f] + "|dM" + std::to_string(c));
      rep.max_abs_correlation = std::max(rep.max_abs_correlation, std::abs(corr));
    }
  rep.features = names;
  rep.threshold = 3.0 / std::sqrt(static_cast<double>(n));
  rep.pass = rep.max_abs_correlation <= rep.threshold;
  return rep;
}

/// Negative control for martingale_test: adds rate * t to every Y component, a drift the
/// backward dynamics do not have.
inline FbsdeSolution with_injected_drift(FbsdeSolution sol, double rate) {
  for (int j = 0; j <= sol.grid.steps; ++j) sol.Y[static_cast<std::size_t>(j)].array() += rate * sol.grid.node(j);
  return sol;
}

// ---- duality grid ----

struct DualityCell {
  double k = 0.0;
  int member = -1;  // index into the family, -1 for the primal softmax penalty, -2 for the mixture member
  ValueEstimate mean_field;
  std::vector<int> Ns;
  std::vector<ValueEstimate> nparticle;
  std::vector<double> nparticle_gap;  // |V^{N,k,phi} - V^{k,phi}|, NaN when the N-particle solve failed
  std::vector<std::string> nparticle_error;
  std::vector<double> mixture_weights;  // member -2 only
  bool converged = false;
  std::string error;
};

struct DualityReport {
  std::vector<double> ks;
  int members = 0;
  std::vector<DualityCell> cells;
  std::vector<double> primal;           // V^k with the softmax sup-penalty, per k
  std::vector<double> primal_se;
  std::vector<double> inner_sup;        // max over {0, members, mixture} of V^{k,phi}, per k
  std::vector<double> inner_sup_se;
  std::vector<std::string> monotonicity_violations;
  std::vector<std::string> weak_duality_violations;
  std::vector<std::string> convergence_violations;
  double temperature = 0.0;

  std::size_t violations() const { return monotonicity_violations.size() + weak_duality_violations.size(); }
};

struct DualityOptions {
  int n = 1000;                 // mean-field particles
  std::vector<int> Ns{100, 400};  // N-particle sizes; empty skips the N-particle solves
  double temperature = 0.02;    // softmax temperature of the primal penalty
  int target_size = 10000;      // mu_fin sample size for the member means
  int mixture_steps = 6;        // ascent steps on the mixture weights, 0 keeps the softmax mixture
  int threads = 1;              // workers for the per-member cells
};

/// Mean-field and N-particle values over the (k, phi) grid. The primal V^k uses the softmax
/// of the member gaps (zero included) as a smooth sup-penalty. The inner sup runs over the
/// convex hull of the family and 0: besides the members it includes mixtures, starting from
/// the primal softmax weights at the terminal law and improved by a few ascent steps.
inline DualityReport duality_checks(const ProblemSpec& spec, const std::vector<double>& ks, const PhiFamily& family,
                                    const TimeGrid& grid, const SolverConfig& cfg, std::uint64_t seed,
                                    const DualityOptions& opts = {}) {
  if (ks.empty() || family.size() == 0) throw std::invalid_argument("duality: need at least one k and one member");
  for (std::size_t i = 1; i < ks.size(); ++i)
    if (!(ks[i] > ks[i - 1])) throw std::invalid_argument("duality: ks must be strictly increasing");
  spec.validate();
  DualityReport rep;
  rep.ks = ks;
  rep.members = static_cast<int>(family.size());
  rep.temperature = opts.temperature;
  const ParticleCloud target = sample(spec.mu_fin, opts.target_size, derive_seed(seed, "duality-target"));
  const NoiseBank bank(spec.mu_in, opts.n, grid, spec.noise_dim(), derive_seed(seed, "duality"));

  // member_means: when given, filled with the member means at the mean-field terminal law
  auto solve_cell = [&](double k, int member, const PenaltySpec& pen, const ConvexDualPenalty* phi,
                        std::vector<double>* member_means = nullptr) {
    DualityCell cell;
    cell.k = k;
    cell.member = member;
    try {
      FbsdeSolution sol = solve_mkv_fbsde(spec, k, pen, grid, cfg, bank);
      cell.mean_field = estimate_value(sol, spec, k, pen);
      cell.converged = sol.converged;
      if (member_means)
        for (const auto& f : family.members) member_means->push_back(f.mean(sol.X.back()));
      if (!sol.converged) cell.error = "not converged after " + std::to_string(sol.iterations) + " iterations";
      if (phi) {
        for (int N : opts.Ns) {
          // the first N rows of the mean-field bank: common noise keeps the gap a finite-N effect
          NoiseBank nb(spec.mu_in, N, grid, spec.noise_dim(), derive_seed(seed, "duality"));
          ValueEstimate v{std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0, 0.0};
          std::string err;
          try {
            NParticleSolution ps = solve_nparticle_fbsde(spec, k, *phi, N, grid, cfg, nb);
            v = nparticle_value(ps, spec, k, *phi);
            if (!ps.converged) err = "not converged after " + std::to_string(ps.iterations) + " iterations";
          } catch (const std::exception& e) {
            err = e.what();
          }
          cell.Ns.push_back(N);
          cell.nparticle.push_back(v);
          cell.nparticle_error.push_back(err);
          cell.nparticle_gap.push_back(err.empty() ? std::abs(v.value - cell.mean_field.value)
                                                   : std::numeric_limits<double>::quiet_NaN());
        }
      }
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
    return cell;
  };

  for (double k : ks) {
    FbsdeSolution primal_sol;
    DualityCell pc;
    pc.k = k;
    pc.member = -1;
    std::vector<double> mix_weights;
    const PenaltySpec primal_penalty = SoftMaxDualPenalty(family, target, opts.temperature);
    try {
      primal_sol = solve_mkv_fbsde(spec, k, primal_penalty, grid, cfg, bank);
      pc.mean_field = estimate_value(primal_sol, spec, k, primal_penalty);
      pc.converged = primal_sol.converged;
      if (!pc.converged) pc.error = "not converged after " + std::to_string(primal_sol.iterations) + " iterations";
      mix_weights = softmax_weights(std::get<SoftMaxDualPenalty>(primal_penalty),
                                    law_summary(primal_penalty, primal_sol.X.back()));
    } catch (const std::exception& e) {
      pc.error = e.what();
    }
    rep.cells.push_back(pc);
    rep.primal.push_back(pc.error.empty() ? pc.mean_field.value : std::numeric_limits<double>::quiet_NaN());
    rep.primal_se.push_back(pc.mean_field.std_error);

    double best = 0.0, best_se = 0.0;  // the zero element
    auto consider = [&](const DualityCell& c) {
      if (!c.error.empty() || !c.converged) return;
      if (c.mean_field.value > best) {
        best = c.mean_field.value;
        best_se = c.mean_field.std_error;
      }
      if (pc.error.empty() && pc.converged) {
        const double tol = 3.0 * std::hypot(pc.mean_field.std_error, c.mean_field.std_error);
        if (c.mean_field.value > pc.mean_field.value + tol) {
          std::ostringstream msg;
          msg << "k=" << k << " member " << c.member << ": V^{k,phi} = " << c.mean_field.value << " > V^k = "
              << pc.mean_field.value << " beyond 3*se = " << tol;
          rep.weak_duality_violations.push_back(msg.str());
        }
      }
    };
    std::vector<DualityCell> member_cells(family.members.size());
    parallel_for(family.size(), opts.threads, [&](int l) {
      const ConvexDualPenalty phi(family.members[static_cast<std::size_t>(l)], target);
      member_cells[static_cast<std::size_t>(l)] = solve_cell(k, l, phi, &phi);
    });
    for (std::size_t l = 0; l < family.members.size(); ++l) {
      DualityCell c = std::move(member_cells[l]);
      consider(c);
      if (!c.Ns.empty() && c.error.empty() && c.converged && c.nparticle_error.back().empty()) {
        const ValueEstimate& last = c.nparticle.back();
        const double tol = 3.0 * std::hypot(last.std_error, c.mean_field.std_error);
        if (c.nparticle_gap.back() > tol) {
          std::ostringstream msg;
          msg << "k=" << k << " member " << l << ": |V^{N,k,phi} - V^{k,phi}| = " << c.nparticle_gap.back()
              << " at N=" << c.Ns.back() << " beyond 3*se = " << tol;
          rep.convergence_violations.push_back(msg.str());
        }
      }
      rep.cells.push_back(std::move(c));
    }
    if (!mix_weights.empty()) {
      // Hull elements sum_l w_l phi_l (the rest on 0), starting from the primal softmax weights and
      // improved by multiplicative steps along dV/dw_l = k (mu(phi_l) - target(phi_l)).
      std::vector<double> target_means;
      for (const auto& f : family.members) target_means.push_back(f.mean(target.points()));
      auto mixture = [&](const std::vector<double>& w) {
        PhiMixture mix;
        for (std::size_t l = 0; l < family.members.size(); ++l) {
          mix.weights.push_back(w[l]);
          const auto& kind = family.members[l].kind();
          if (auto* r = std::get_if<Ridge>(&kind)) mix.parts.push_back(*r);
          else if (auto* sn = std::get_if<SmoothedNorm>(&kind)) mix.parts.push_back(*sn);
          else throw std::invalid_argument("duality: family members must not be mixtures");
        }
        return ConvexDualPenalty(PhiMember(std::move(mix)), target);
      };
      std::vector<double> w = mix_weights, w_best;
      std::vector<double> grad;
      double v_best = -std::numeric_limits<double>::infinity(), eta = 0.0;
      for (int step = 0; step <= opts.mixture_steps; ++step) {
        const ConvexDualPenalty phi = mixture(w);
        std::vector<double> gaps;
        DualityCell c = solve_cell(k, -2, phi, nullptr, &gaps);
        consider(c);
        const bool ok = c.error.empty() && c.converged;
        const double v = c.mean_field.value;
        c.mixture_weights = w;
        rep.cells.push_back(std::move(c));
        if (ok && v > v_best) {
          v_best = v;
          w_best = w;
          grad.clear();
          double top = 0.0;
          for (std::size_t l = 0; l < gaps.size(); ++l) {
            grad.push_back(k * (gaps[l] - target_means[l]));
            top = std::max(top, std::abs(grad.back()));
          }
          if (eta == 0.0) eta = top > 0.0 ? 1.0 / top : 0.0;
        } else {
          eta *= 0.5;
        }
        if (w_best.empty() || eta == 0.0) break;
        // exponentiated step from the best weights; the zero element has gradient 0
        double z = std::max(0.0, 1.0 - std::accumulate(w_best.begin(), w_best.end(), 0.0));
        std::vector<double> next(w_best.size());
        for (std::size_t l = 0; l < w_best.size(); ++l) {
          next[l] = w_best[l] * std::exp(eta * grad[l]);
          z += next[l];
        }
        for (double& x : next) x /= z;
        w = std::move(next);
      }
    }
    rep.inner_sup.push_back(best);
    rep.inner_sup_se.push_back(best_se);
  }
  for (std::size_t i = 1; i < ks.size(); ++i) {
    const double tol = 3.0 * std::hypot(rep.inner_sup_se[i], rep.inner_sup_se[i - 1]);
    if (rep.inner_sup[i] < rep.inner_sup[i - 1] - tol) {
      std::ostringstream msg;
      msg << "inner sup at k=" << ks[i] << " (" << rep.inner_sup[i] << ") below k=" << ks[i - 1] << " ("
          << rep.inner_sup[i - 1] << ") beyond 3*se = " << tol;
      rep.monotonicity_violations.push_back(msg.str());
    }
  }
  return rep;
}

}  // namespace mfsb
