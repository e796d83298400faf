// mfsb_acceptance: one pass/fail line per acceptance criterion, tolerances pinned below.
//   mfsb_acceptance            all criteria
//   mfsb_acceptance 2 7        a subset
// Exit 0 when every selected criterion passes, 1 otherwise.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "mfsb/chaos.hpp"
#include "mfsb/config.hpp"
#include "mfsb/oracle.hpp"
#include "mfsb/runner.hpp"

using namespace mfsb;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

ProblemSpec entropic_1d(bool interacting) {
  ProblemSpec spec;
  spec.mu_in = MeasureSpec::gaussian1d(0.0, 0.5);
  spec.mu_fin = MeasureSpec::gaussian1d(1.0, 0.5);
  if (interacting) spec.interaction.kind = PairwiseQuadratic{};
  return spec;
}

ConvexDualPenalty fixed_ridge() { return ConvexDualPenalty(PhiMember(Ridge{VectorXd::Constant(1, -1.0), -1.0, 0.1}), 0.0); }

// ---- 1: Lambda / H1 ----
Outcome lambda_h1() {
  const CostSpec quad;
  CostSpec asinh;
  asinh.f1 = QuadraticPlusAsinhCost{};
  Rng rng(101);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    VectorXd y(3);
    for (int c = 0; c < 3; ++c) y(c) = 5.0 * rng.normal();
    worst = std::max(worst, (lambda_min(quad, 0.0, y) + y).lpNorm<Eigen::Infinity>());
    worst = std::max(worst, std::abs(h1(quad, 0.0, y) + 0.5 * y.squaredNorm()));
  }
  // (y - y').(Lambda(y) - Lambda(y')) <= -|y - y'|^2 / L, L the curvature bound of f1
  int bad = 0;
  double margin = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 1000; ++i) {
    VectorXd y(2), yp(2);
    for (int c = 0; c < 2; ++c) y(c) = 4.0 * rng.normal(), yp(c) = 4.0 * rng.normal();
    const double lhs = (y - yp).dot(lambda_min(asinh, 0.0, y) - lambda_min(asinh, 0.0, yp));
    const double rhs = -(y - yp).squaredNorm() / asinh.smoothness();
    margin = std::min(margin, rhs - lhs);
    if (lhs > rhs + 1e-12 * (y - yp).squaredNorm()) ++bad;
  }
  return {worst <= 1e-12 && bad == 0,
          "quadratic max error " + fmt("%.3g", worst) + " (tol 1e-12), asinh monotonicity failures " + std::to_string(bad) +
              "/1000, min margin " + fmt("%.3g", margin)};
}

// ---- 2 and 3: oracle agreement and the penalization ladder ----
struct LadderRun {
  LadderReport rep;
  FbsdeSolution last;
  GridBridge bridge;
};

const LadderRun& ladder_run() {
  static const LadderRun run = [] {
    LadderRun r;
    const ProblemSpec spec = entropic_1d(false);
    const int n = 2000, M = 50;
    const std::uint64_t seed = 1234;
    const ParticleCloud target = sample(spec.mu_fin, 10000, 77);
    const PenaltySpec pen = default_feature_penalty(target);
    GridBridgeOptions go;
    go.grid_points = 401;
    go.steps = M;
    go.sinkhorn_tol = 1e-12;
    go.width_sds = 8.0;
    r.bridge = grid_sinkhorn_bridge(spec.mu_in, spec.mu_fin, spec.horizon, 1.0, go);
    r.rep = run_k_ladder(spec, {1, 4, 16, 64, 256}, pen, TimeGrid(spec.horizon, M), n, SolverConfig{}, seed, r.bridge.value,
                         &r.last);
    return r;
  }();
  return run;
}

Outcome oracle_agreement() {
  const LadderRun& r = ladder_run();
  const LadderRow& top = r.rep.rows.back();
  if (!top.error.empty()) return {false, "k=256 solve failed: " + top.error};
  double node_w2 = 0.0;
  int worst_node = 0;
  for (int j = 0; j <= r.last.grid.steps; ++j) {
    const double w = r.bridge.wasserstein_to(j, r.last.law(j));
    if (w > node_w2) node_w2 = w, worst_node = j;
  }
  const bool pass = top.converged && top.terminal_w2 <= 0.05 && node_w2 <= 0.08;
  return {pass, "terminal W2 " + fmt("%.4f", top.terminal_w2) + " (<= 0.05), max node W2 " + fmt("%.4f", node_w2) +
                    " at node " + std::to_string(worst_node) + " (<= 0.08), V(256) " + fmt("%.4f", top.value.value) +
                    " vs grid value " + fmt("%.4f", r.bridge.value)};
}

Outcome penalization_ladder() {
  const LadderRun& r = ladder_run();
  bool all = true;
  std::ostringstream vals;
  for (const auto& row : r.rep.rows) {
    all = all && row.error.empty() && row.converged;
    vals << ' ' << fmt("%.4f", row.value.value);
  }
  const bool pass = all && r.rep.monotonicity_violations.empty() && r.rep.decay_slope <= -0.8;
  std::string d = "values" + vals.str() + ", monotonicity violations " + std::to_string(r.rep.monotonicity_violations.size()) +
                  " (2*se), log g vs log k slope " + fmt("%.3f", r.rep.decay_slope) + " (<= -0.8)";
  if (!all) d += ", some k did not converge";
  return {pass, d};
}

// ---- 4: propagation of chaos ----
Outcome chaos() {
  ChaosOptions o;
  o.replications = 8;
  o.threads = resolve_threads(0);
  const ChaosReport rep =
      synchronous_coupling_error(entropic_1d(true), 8.0, fixed_ridge(), {50, 100, 200, 400}, TimeGrid(1.0, 40), SolverConfig{}, 1, o);
  bool decreasing = rep.reference_converged;
  std::ostringstream h2;
  for (std::size_t i = 0; i < rep.rows.size(); ++i) {
    h2 << ' ' << fmt("%.3g", rep.rows[i].h2_error);
    if (!rep.rows[i].error.empty() || (i > 0 && !(rep.rows[i].h2_error < rep.rows[i - 1].h2_error))) decreasing = false;
  }
  const bool pass = decreasing && rep.slope <= -0.35 && std::abs(rep.spearman) <= 0.9;
  return {pass, "H2 errors" + h2.str() + (decreasing ? " strictly decreasing" : " NOT strictly decreasing") + ", slope " +
                    fmt("%.3f", rep.slope) + " (<= -0.35), Spearman of ratio " + fmt("%.2f", rep.spearman) + " (|.| <= 0.9)"};
}

// ---- 5: duality grid ----
Outcome duality() {
  const ProblemSpec spec = entropic_1d(true);
  const ParticleCloud target = sample(spec.mu_fin, 10000, 5);
  DualityOptions o;
  o.n = 1000;
  o.Ns = {100};
  o.threads = resolve_threads(0);
  const DualityReport rep = duality_checks(spec, {1, 4, 16}, default_phi_family(target, 2, 4), TimeGrid(1.0, 40), SolverConfig{}, 7, o);
  std::ostringstream d;
  d << rep.ks.size() << "x" << rep.members << " grid, inner-sup monotonicity violations " << rep.monotonicity_violations.size()
    << ", weak duality violations " << rep.weak_duality_violations.size() << " (3*se); N-particle gaps flagged "
    << rep.convergence_violations.size() << " (informational)";
  return {rep.members == 8 && rep.ks.size() == 3 && rep.violations() == 0, d.str()};
}

// ---- 6: martingale test ----
Outcome martingale() {
  const ProblemSpec spec = entropic_1d(true);
  const FbsdeSolution sol = solve_mkv_fbsde(spec, 8.0, PenaltySpec(fixed_ridge()), TimeGrid(1.0, 40), 2000, SolverConfig{}, 1);
  const MartingaleReport ok = martingale_test(sol, spec);
  const MartingaleReport bad = martingale_test(with_injected_drift(sol, 1.0), spec);
  return {sol.converged && ok.pass && !bad.pass,
          std::string(sol.converged ? "converged" : "NOT converged") + ", max |corr| " + fmt("%.4f", ok.max_abs_correlation) +
              " vs 3/sqrt(n) = " + fmt("%.4f", ok.threshold) + ", injected drift max |corr| " +
              fmt("%.4f", bad.max_abs_correlation) + (bad.pass ? " (control passed, bad)" : " (control rejected)")};
}

// ---- 7: determinism and factorization ----
std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

Outcome determinism() {
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / "mfsb_acceptance";
  fs::remove_all(root);
  const std::string problem = R"("problem": {"dimension": 1, "interaction": {"kind": "%s"},
      "mu_in": {"kind": "gaussian", "mean": [0.0], "sd": 0.5}, "mu_fin": {"kind": "gaussian", "mean": [1.0], "sd": 0.5}})";
  auto with = [&](const char* inter) {
    char buf[512];
    std::snprintf(buf, sizeof buf, problem.c_str(), inter);
    return std::string(buf);
  };
  const std::vector<std::string> configs = {
      "{\"config_version\": 1, " + with("none") +
          R"(, "run": {"mode": "solve", "k": 4, "particles": 300, "steps": 20, "seed": 3}})",
      "{\"config_version\": 1, " + with("pairwise_quadratic") +
          R"(, "penalty": {"kind": "convex_dual", "direction": [-1], "offset": -1, "smoothing": 0.1},
             "run": {"mode": "chaos_sweep", "k": 8, "N": [20, 40], "steps": 20, "replications": 2, "seed": 3}})"};
  int files = 0, differing = 0;
  std::ostringstream sink;
  for (std::size_t c = 0; c < configs.size(); ++c) {
    ExperimentConfig cfg = parse_config(configs[c]);
    cfg.run.warn_only = true;
    for (const char* rep : {"a", "b"}) {
      cfg.output.directory = root / std::to_string(c) / rep;
      run_experiment(cfg, sink);
    }
    for (const auto& e : fs::directory_iterator(root / std::to_string(c) / "a"))
      if (e.path().extension() == ".csv") {
        ++files;
        if (slurp(e.path()) != slurp(root / std::to_string(c) / "b" / e.path().filename())) ++differing;
      }
  }
  fs::remove_all(root);

  const ProblemSpec spec = entropic_1d(false);
  const TimeGrid grid(1.0, 40);
  const int N = 50;
  const NoiseBank bank(spec.mu_in, N, grid, 1, 11);
  const NParticleSolution sol = solve_nparticle_fbsde(spec, 8.0, fixed_ridge(), N, grid, SolverConfig{}, bank);
  const PenaltySpec pen = fixed_ridge();
  int mismatched = 0;
  for (int i = 0; i < N; ++i) {
    const FbsdeSolution one = replay_with_field(spec, 8.0, pen, sol.field, grid, bank.select({i}));
    bool same = true;
    for (int j = 0; j <= grid.steps; ++j) {
      const auto js = static_cast<std::size_t>(j);
      same = same && one.X[js].row(0) == sol.X[js].row(i) && one.Y[js].row(0) == sol.Y[js].row(i);
    }
    if (!same) ++mismatched;
  }
  return {files > 0 && differing == 0 && sol.converged && mismatched == 0,
          std::to_string(files) + " CSVs compared across reruns, " + std::to_string(differing) +
              " differ; single-particle replays differing from the N=50 system: " + std::to_string(mismatched)};
}

// ---- 8: penalty calculus ----
Outcome penalty_calculus() {
  Rng rng(808);
  auto cloud = [&](int n, int m, double shift) {
    Points p(n, m);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < m; ++c) p(i, c) = shift + rng.normal();
    return ParticleCloud(p);
  };
  const ParticleCloud target1 = cloud(2000, 1, 1.0), target2 = cloud(2000, 2, 0.5);
  SoftMaxDualPenalty soft(default_phi_family(target2, 4, 3), target2, 0.05);
  const std::vector<std::pair<PenaltySpec, int>> smooth = {
      {default_feature_penalty(target1), 1}, {default_feature_penalty(target2), 2}, {soft, 2},
      {ConvexDualPenalty(PhiMember(SmoothedNorm{0.5}), target2), 2}, {fixed_ridge(), 1}};
  double worst = 0.0;
  int probes = 0;
  for (const auto& [p, m] : smooth) {
    const ParticleCloud c = cloud(200, m, 0.3);
    std::vector<int> idx;
    for (int i = 0; i < 20; ++i) idx.push_back(static_cast<int>(rng.uniform() * 200) % 200);
    worst = std::max(worst, lifted_lderiv_check(p, c, idx));
    probes += static_cast<int>(idx.size());
  }

  const ParticleCloud ref2 = cloud(500, 2, 0.0);
  const PhiFamily fam = default_phi_family(ref2, 4, 2);
  std::vector<PenaltySpec> convex;
  for (const auto& mem : fam.members) convex.push_back(ConvexDualPenalty(mem, ref2));
  convex.push_back(ConvexDualPenalty(PhiMember(SmoothedNorm{0.2}), ref2));
  convex.push_back(ConvexDualPenalty(PhiMember(PhiMixture{{0.3, 0.5}, {fam.members[0].atoms()[0], SmoothedNorm{1.0}}}), ref2));
  double lowest = std::numeric_limits<double>::infinity();
  for (int t = 0; t < 100; ++t) {
    const int n = 20 + static_cast<int>(rng.uniform() * 80);
    const ParticleCloud a = cloud(n, 2, 0.0);
    // odd trials couple b tightly to a, so the probe sits near zero
    const ParticleCloud b = t % 2 ? ParticleCloud(a.points() + 0.01 * cloud(n, 2, 0.0).points()) : cloud(n, 2, 2.0 * rng.normal());
    for (const auto& p : convex) lowest = std::min(lowest, displacement_convexity_probe(p, a, b));
  }
  return {probes >= 100 && worst <= 1e-5 && lowest >= -1e-10,
          "lifted FD max error " + fmt("%.3g", worst) + " over " + std::to_string(probes) + " probes (<= 1e-5), min probe " +
              fmt("%.3g", lowest) + " over 100 coupled clouds x " + std::to_string(convex.size()) + " penalties (>= -1e-10)"};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all = {
      {1, "Lambda/H1 correctness", 1, lambda_h1},
      {2, "oracle agreement", 180, oracle_agreement},
      {3, "penalization ladder", 180, penalization_ladder},
      {4, "propagation of chaos", 300, chaos},
      {5, "duality grid", 300, duality},
      {6, "martingale test", 60, martingale},
      {7, "determinism and factorization", 60, determinism},
      {8, "penalty calculus", 30, penalty_calculus},
  };
  std::set<int> wanted;
  for (int a = 1; a < argc; ++a) wanted.insert(std::atoi(argv[a]));

  int failed = 0;
  double shared = 0.0;  // 3 reuses the solves of 2
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.id == 2) shared = secs;
    if (c.id == 3) secs += shared;
    const bool in_time = secs <= c.budget_s;
    const bool pass = out.pass && in_time;
    if (!pass) ++failed;
    std::printf("[%s] %d %s: %s; %.1f s (budget %.0f s%s)\n", pass ? "PASS" : "FAIL", c.id, c.name, out.detail.c_str(), secs,
                c.budget_s, in_time ? "" : ", exceeded");
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
