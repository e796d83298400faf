#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mfsb/chaos.hpp"
#include "mfsb/config.hpp"
#include "mfsb/io.hpp"
#include "mfsb/oracle.hpp"
#include "mfsb/parallel.hpp"

namespace mfsb {

inline constexpr const char* kVersion = "1.0.0";

enum ExitCode : int { exit_ok = 0, exit_violations = 1, exit_config = 2, exit_divergence = 3, exit_io = 4 };

/// Command-line values that take precedence over the config file.
struct RunOverrides {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<bool> charts;
  std::optional<int> threads;
  std::optional<bool> warn_only;
};

inline void apply_overrides(ExperimentConfig& cfg, const RunOverrides& o) {
  if (o.out) cfg.output.directory = *o.out;
  if (o.seed) cfg.run.seed = *o.seed;
  if (o.charts) cfg.output.emit_charts = *o.charts;
  if (o.threads) cfg.run.threads = *o.threads;
  if (o.warn_only) cfg.run.warn_only = *o.warn_only;
}

struct RunResult {
  int exit_code = exit_ok;
  std::filesystem::path directory;
  Json summary;
};

// ---- tables ----

/// ok, not_converged or error (no result at all)
inline std::string row_status(bool has_result, bool converged) {
  if (!has_result) return "error";
  return converged ? "ok" : "not_converged";
}

inline Table ladder_table(const LadderReport& rep) {
  Table t({"k", "value", "std_error", "running", "penalty", "terminal_penalty", "terminal_w2", "oracle_value",
           "iterations", "steps", "status", "message"});
  const double oracle = rep.oracle_value ? *rep.oracle_value : std::numeric_limits<double>::quiet_NaN();
  for (const auto& r : rep.rows) {
    const bool has = r.steps > 0;
    t.row().add(r.k).add(r.value.value).add(r.value.std_error).add(r.value.running).add(r.value.penalty);
    t.add(r.terminal_penalty).add(r.terminal_w2).add(oracle).add(r.iterations).add(r.steps);
    t.add(row_status(has, r.converged)).add(r.error);
  }
  return t;
}

inline Table chaos_table(const ChaosReport& rep) {
  Table t({"N", "h2_error", "h2_std_error", "epsilon_n", "ratio", "replications", "failed", "reference_particles",
           "reference_converged", "status", "message"});
  for (const auto& r : rep.rows) {
    const std::string status = r.replications == 0 ? "error" : (r.failed > 0 ? "partial" : "ok");
    t.row().add(r.N).add(r.h2_error).add(r.h2_std_error).add(r.epsilon_n).add(r.ratio).add(r.replications);
    t.add(r.failed).add(rep.reference_particles).add(rep.reference_converged).add(status).add(r.error);
  }
  return t;
}

/// One row per mean-field cell (N = 0) and per N-particle solve of a cell. member -1 is the
/// softmax primal, -2 a mixture step (`variant` counts the steps).
inline Table duality_table(const DualityReport& rep) {
  Table t({"k", "member", "variant", "N", "value", "std_error", "gap", "status", "message"});
  std::map<double, int> mixture_step;
  for (const auto& c : rep.cells) {
    const int variant = c.member == -2 ? mixture_step[c.k]++ : 0;
    const bool has = c.error.empty() || c.error.rfind("not converged", 0) == 0;
    t.row().add(c.k).add(c.member).add(variant).add(0).add(c.mean_field.value).add(c.mean_field.std_error);
    t.add(0.0).add(row_status(has, c.converged)).add(c.error);
    for (std::size_t q = 0; q < c.Ns.size(); ++q) {
      const std::string& err = c.nparticle_error[q];
      const bool nhas = !std::isnan(c.nparticle[q].value);
      t.row().add(c.k).add(c.member).add(variant).add(c.Ns[q]).add(c.nparticle[q].value).add(c.nparticle[q].std_error);
      t.add(c.nparticle_gap[q]).add(row_status(nhas, err.empty())).add(err);
    }
  }
  return t;
}

// ---- summary, recomputed from the CSVs alone ----

namespace detail {

inline Json ladder_flags(const Table& t, const CheckConfig& chk) {
  Json f;
  int errors = 0, unconverged = 0, mono = 0, weak = 0;
  std::vector<double> kx, gy;
  int prev = -1;
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const std::string st = t.text(r, "status");
    if (st == "error") ++errors;
    if (st == "not_converged") ++unconverged;
    if (st != "ok") continue;
    const double v = t.number(r, "value"), se = t.number(r, "std_error");
    if (prev >= 0) {
      const auto p = static_cast<std::size_t>(prev);
      const double tol = 2.0 * std::hypot(t.number(p, "std_error"), se);
      if (v < t.number(p, "value") - tol) ++mono;
    }
    const double oracle = t.number(r, "oracle_value");
    if (!std::isnan(oracle) && v > oracle + 3.0 * se) ++weak;
    kx.push_back(t.number(r, "k"));
    gy.push_back(t.number(r, "terminal_penalty"));
    prev = static_cast<int>(r);
  }
  const double slope = loglog_slope(kx, gy);
  f["rows"] = static_cast<int>(t.rows());
  f["solver_errors"] = errors;
  f["not_converged"] = unconverged;
  f["monotonicity_violations"] = mono;
  f["weak_duality_violations"] = weak;
  f["decay_slope"] = num(slope);
  f["pass_converged"] = errors == 0 && unconverged == 0;
  f["pass_monotone"] = mono == 0;
  f["pass_weak_duality"] = weak == 0;
  f["pass_decay"] = kx.size() < 2 || slope <= chk.ladder_slope_max;
  return f;
}

inline Json chaos_flags(const Table& t, const CheckConfig& chk) {
  Json f;
  int errors = 0, failed = 0;
  std::vector<double> N, h2, ratio;
  bool ref_ok = true;
  for (std::size_t r = 0; r < t.rows(); ++r) {
    ref_ok = ref_ok && t.number(r, "reference_converged") != 0.0;
    failed += static_cast<int>(t.number(r, "failed"));
    if (t.text(r, "status") == "error") {
      ++errors;
      continue;
    }
    N.push_back(t.number(r, "N"));
    h2.push_back(t.number(r, "h2_error"));
    ratio.push_back(t.number(r, "ratio"));
  }
  bool decreasing = h2.size() >= 2;
  for (std::size_t i = 1; i < h2.size(); ++i) decreasing = decreasing && h2[i] < h2[i - 1];
  const double slope = loglog_slope(N, h2);
  const double rho = spearman(N, ratio);
  f["rows"] = static_cast<int>(t.rows());
  f["solver_errors"] = errors;
  f["failed_replications"] = failed;
  f["slope"] = num(slope);
  f["spearman"] = num(rho);
  f["pass_reference_converged"] = ref_ok;
  f["pass_decreasing"] = decreasing;
  f["pass_slope"] = slope <= chk.chaos_slope_max;
  f["pass_no_trend"] = std::abs(rho) <= chk.spearman_max;
  return f;
}

inline Json duality_flags(const Table& t) {
  struct Row {
    double k;
    int member, N;
    double value, se;
    std::string status;
  };
  std::vector<Row> rows;
  for (std::size_t r = 0; r < t.rows(); ++r)
    rows.push_back({t.number(r, "k"), static_cast<int>(t.number(r, "member")), static_cast<int>(t.number(r, "N")),
                    t.number(r, "value"), t.number(r, "std_error"), t.text(r, "status")});
  std::vector<double> ks;
  for (const auto& r : rows)
    if (std::find(ks.begin(), ks.end(), r.k) == ks.end()) ks.push_back(r.k);
  int errors = 0, weak = 0, mono = 0, unconverged = 0;
  std::vector<double> sup, sup_se;
  for (double k : ks) {
    const Row* primal = nullptr;
    double best = 0.0, best_se = 0.0;
    for (const auto& r : rows)
      if (r.k == k && r.N == 0 && r.member == -1) primal = &r;
    if (!primal || primal->status == "error") ++errors;
    for (const auto& r : rows) {
      if (r.k != k || r.N != 0 || r.member == -1) continue;
      if (r.status == "error") ++errors;
      if (r.status != "ok") {
        ++unconverged;
        continue;
      }
      if (r.value > best) {
        best = r.value;
        best_se = r.se;
      }
      if (primal && primal->status == "ok" && r.value > primal->value + 3.0 * std::hypot(primal->se, r.se)) ++weak;
    }
    sup.push_back(best);
    sup_se.push_back(best_se);
  }
  for (std::size_t i = 1; i < sup.size(); ++i)
    if (sup[i] < sup[i - 1] - 3.0 * std::hypot(sup_se[i], sup_se[i - 1])) ++mono;
  Json f;
  f["ks"] = nums(ks);
  f["inner_sup"] = nums(sup);
  f["solver_errors"] = errors;
  f["cells_not_converged"] = unconverged;
  f["monotonicity_violations"] = mono;
  f["weak_duality_violations"] = weak;
  f["pass_monotone"] = mono == 0;
  f["pass_weak_duality"] = weak == 0;
  return f;
}

inline Json oracle_flags(const Table& t, const CheckConfig& chk) {
  double worst = 0.0;
  for (double w : t.numbers("w2")) worst = std::max(worst, std::isnan(w) ? std::numeric_limits<double>::infinity() : w);
  Json f;
  f["max_node_w2"] = num(worst);
  f["pass_node_w2"] = worst <= chk.oracle_w2_max;
  return f;
}

}  // namespace detail

/// Pass/fail flags from whatever CSVs the directory holds. Only `pass_*` keys count as
/// violations; solver_errors decides the divergence exit code.
inline Json summarize(const std::filesystem::path& dir, const CheckConfig& chk) {
  namespace fs = std::filesystem;
  Json s;
  int errors = 0;
  std::vector<std::string> failed;
  auto collect = [&](const std::string& name, Json f) {
    if (f.contains("solver_errors")) errors += f["solver_errors"].get<int>();
    for (auto it = f.begin(); it != f.end(); ++it)
      if (it.key().rfind("pass_", 0) == 0 && !it.value().get<bool>()) failed.push_back(name + "." + it.key());
    s[name] = std::move(f);
  };
  if (fs::exists(dir / "value.csv")) {
    Table t = Table::read(dir / "value.csv");
    Json f;
    f["value"] = num(t.number(0, "value"));
    f["std_error"] = num(t.number(0, "std_error"));
    const std::string st = t.text(0, "status");
    f["solver_errors"] = st == "error" ? 1 : 0;
    f["pass_converged"] = st == "ok";
    collect("solve", std::move(f));
  }
  if (fs::exists(dir / "ladder.csv")) {
    Json f = detail::ladder_flags(Table::read(dir / "ladder.csv"), chk);
    collect("ladder", std::move(f));
  }
  if (fs::exists(dir / "oracle.csv")) {
    Table t = Table::read(dir / "oracle.csv");
    Json f = detail::oracle_flags(t, chk);
    Table lad = Table::read(dir / "ladder.csv");
    if (lad.rows() > 0) {
      const double w2 = lad.number(lad.rows() - 1, "terminal_w2");
      f["terminal_w2"] = num(w2);
      f["pass_terminal_w2"] = w2 <= chk.terminal_w2_max;
    }
    collect("oracle", std::move(f));
  }
  if (fs::exists(dir / "chaos.csv")) collect("chaos", detail::chaos_flags(Table::read(dir / "chaos.csv"), chk));
  if (fs::exists(dir / "duality.csv")) collect("duality", detail::duality_flags(Table::read(dir / "duality.csv")));
  s["solver_errors"] = errors;
  s["failed_checks"] = failed;
  s["pass"] = errors == 0 && failed.empty();
  return s;
}

// ---- modes ----

namespace detail {

inline Json versions() {
  Json v;
  v["mfsb"] = kVersion;
  v["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
               std::to_string(EIGEN_MINOR_VERSION);
  v["json"] = std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." + std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
              std::to_string(NLOHMANN_JSON_VERSION_PATCH);
#if defined(__clang__)
  v["compiler"] = std::string("clang ") + __clang_version__;
#elif defined(__GNUC__)
  v["compiler"] = std::string("gcc ") + __VERSION__;
#endif
  v["cplusplus"] = static_cast<long>(__cplusplus);
  return v;
}

inline void run_solve(const ExperimentConfig& cfg, const std::filesystem::path& dir, std::vector<std::string>& notes) {
  const RunConfig& run = cfg.run;
  const double k = run.ks.front();
  const PenaltySpec penalty = make_penalty(cfg, run.seed);
  Table value({"k", "value", "std_error", "running", "penalty", "iterations", "steps", "status", "message"});
  try {
    // cold solves stall at large k, so warm-start from k/4, k/16, ... (down to 1)
    std::vector<double> path{k};
    while (path.front() / 4.0 >= 1.0) path.insert(path.begin(), path.front() / 4.0);
    const TimeGrid grid(cfg.problem.horizon, run.steps);
    std::optional<DecouplingField> warm;
    FbsdeSolution sol;
    for (double kk : path) {
      sol = solve_mkv_fbsde(cfg.problem, kk, penalty, grid, run.particles, run.solver, run.seed, warm ? &*warm : nullptr);
      if (kk != k) notes.push_back("continuation k=" + format_double(kk) + ": " + std::to_string(sol.iterations) +
                                   (sol.converged ? " iterations" : " iterations, not converged"));
      if (sol.grid.steps == grid.steps) warm = sol.field;
      else warm.reset();
    }
    const ValueEstimate v = estimate_value(sol, cfg.problem, k, penalty);
    value.row().add(k).add(v.value).add(v.std_error).add(v.running).add(v.penalty).add(sol.iterations);
    value.add(sol.grid.steps).add(row_status(true, sol.converged));
    value.add(sol.converged ? std::string() : "not converged after " + std::to_string(sol.iterations) + " iterations");
    path_table(sol.grid, sol.X, "x").write(dir / "solution_X.csv");
    path_table(sol.grid, sol.Y, "y").write(dir / "solution_Y.csv");
    for (const auto& e : sol.events) notes.push_back(e);
  } catch (const SolverError& e) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    value.row().add(k).add(nan).add(nan).add(nan).add(nan).add(static_cast<int>(e.residual_trace().size()));
    value.add(run.steps).add("error").add(e.what());
  }
  value.write(dir / "value.csv");
}

inline void run_ladder(const ExperimentConfig& cfg, const std::filesystem::path& dir, bool with_oracle,
                       std::vector<std::string>& notes) {
  const RunConfig& run = cfg.run;
  const ProblemSpec& spec = cfg.problem;
  const TimeGrid grid(spec.horizon, run.steps);
  const PenaltySpec penalty = make_penalty(cfg, run.seed);
  std::optional<GridBridge> bridge;
  if (with_oracle) {
    bridge = grid_sinkhorn_bridge(spec.mu_in, spec.mu_fin, spec.horizon, spec.sigma(0, 0), run.oracle);
    notes.push_back("grid bridge: " + std::to_string(bridge->iterations) + " Sinkhorn iterations, value " +
                    format_double(bridge->value));
  }
  FbsdeSolution last;
  const LadderReport rep = run_k_ladder(spec, run.ks, penalty, grid, run.particles, run.solver, run.seed,
                                        bridge ? std::optional<double>(bridge->value) : std::nullopt,
                                        with_oracle ? &last : nullptr);
  ladder_table(rep).write(dir / "ladder.csv");
  if (!with_oracle) return;
  Table w2({"node", "t", "w2", "particle_mean", "grid_mean"});
  Table marg({"node", "t", "x", "particle_mass", "grid_mass"});
  if (last.X.empty() || last.grid.steps != bridge->steps) {
    notes.push_back("oracle comparison skipped: no final solution on the oracle grid");
    w2.write(dir / "oracle.csv");
    marg.write(dir / "marginals.csv");
    return;
  }
  const auto& nodes = bridge->nodes;
  const double lo = nodes.front(), hi = nodes.back();
  const int bins = run.histogram_bins;
  const double h = (hi - lo) / bins;
  for (int j = 0; j <= last.grid.steps; ++j) {
    const ParticleCloud cloud = last.law(j);
    w2.row().add(j).add(last.grid.node(j)).add(bridge->wasserstein_to(j, cloud, 2)).add(cloud.mean()(0));
    w2.add(bridge->marginal_mean(j));
    std::vector<double> pm(static_cast<std::size_t>(bins), 0.0), gm(pm.size(), 0.0);
    for (int i = 0; i < cloud.size(); ++i) {
      const int b = std::clamp(static_cast<int>(std::floor((cloud.points()(i, 0) - lo) / h)), 0, bins - 1);
      pm[static_cast<std::size_t>(b)] += 1.0 / cloud.size();
    }
    for (std::size_t g = 0; g < nodes.size(); ++g) {
      const int b = std::clamp(static_cast<int>(std::floor((nodes[g] - lo) / h)), 0, bins - 1);
      gm[static_cast<std::size_t>(b)] += bridge->marginals[static_cast<std::size_t>(j)][g];
    }
    for (int b = 0; b < bins; ++b)
      marg.row().add(j).add(last.grid.node(j)).add(lo + (b + 0.5) * h).add(pm[static_cast<std::size_t>(b)]).add(
          gm[static_cast<std::size_t>(b)]);
  }
  w2.write(dir / "oracle.csv");
  marg.write(dir / "marginals.csv");
}

inline void run_chaos(const ExperimentConfig& cfg, const std::filesystem::path& dir, int threads) {
  const RunConfig& run = cfg.run;
  const PenaltySpec penalty = make_penalty(cfg, run.seed);
  ChaosOptions opts;
  opts.n_ref = run.reference_particles;
  opts.replications = run.replications;
  opts.threads = threads;
  opts.wasserstein.seed = derive_seed(run.seed, "chaos-wasserstein");
  const ChaosReport rep = synchronous_coupling_error(cfg.problem, run.ks.front(), std::get<ConvexDualPenalty>(penalty),
                                                     run.Ns, TimeGrid(cfg.problem.horizon, run.steps), run.solver,
                                                     run.seed, opts);
  chaos_table(rep).write(dir / "chaos.csv");
}

inline void run_duality(const ExperimentConfig& cfg, const std::filesystem::path& dir, int threads) {
  const RunConfig& run = cfg.run;
  const ParticleCloud target = sample(cfg.problem.mu_fin, cfg.penalty.target_size, derive_seed(run.seed, "penalty-target"));
  const PhiFamily fam = default_phi_family(target, run.family.directions, run.family.offsets,
                                           run.family.smoothing_factor, derive_seed(run.seed, "phi-family"));
  DualityOptions opts;
  opts.n = run.particles;
  opts.Ns = run.Ns;
  opts.temperature = cfg.penalty.temperature;
  opts.target_size = cfg.penalty.target_size;
  opts.mixture_steps = run.mixture_steps;
  opts.threads = threads;
  const DualityReport rep =
      duality_checks(cfg.problem, run.ks, fam, TimeGrid(cfg.problem.horizon, run.steps), run.solver, run.seed, opts);
  duality_table(rep).write(dir / "duality.csv");
}

}  // namespace detail

/// Executes the configured mode into cfg.output.directory. Config errors are the caller's
/// (they happen before this point); I/O failures surface as IoError or filesystem_error.
inline RunResult run_experiment(const ExperimentConfig& cfg, std::ostream& log = std::clog) {
  namespace fs = std::filesystem;
  const auto start = std::chrono::steady_clock::now();
  RunResult res;
  res.directory = cfg.output.directory;
  DirectoryLock lock(res.directory);
  const int threads = resolve_threads(cfg.run.threads);
  std::vector<std::string> notes;
  std::string fatal;
  try {
    switch (cfg.run.mode) {
      case RunMode::solve: detail::run_solve(cfg, res.directory, notes); break;
      case RunMode::k_ladder: detail::run_ladder(cfg, res.directory, false, notes); break;
      case RunMode::oracle_compare: detail::run_ladder(cfg, res.directory, true, notes); break;
      case RunMode::chaos_sweep: detail::run_chaos(cfg, res.directory, threads); break;
      case RunMode::duality_grid: detail::run_duality(cfg, res.directory, threads); break;
    }
  } catch (const SolverError& e) {
    fatal = e.what();
  } catch (const OracleError& e) {
    fatal = e.what();
  }

  res.summary = summarize(res.directory, cfg.run.checks);
  res.summary["mode"] = to_string(cfg.run.mode);
  if (!fatal.empty()) {
    res.summary["fatal_error"] = fatal;
    res.summary["solver_errors"] = res.summary["solver_errors"].get<int>() + 1;
    res.summary["pass"] = false;
  }
  res.summary["warn_only"] = cfg.run.warn_only;
  write_json(res.directory / "summary.json", res.summary);

  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  Json manifest;
  manifest["config"] = cfg.source;
  manifest["mode"] = to_string(cfg.run.mode);
  manifest["seed"] = cfg.run.seed;
  manifest["threads"] = threads;
  manifest["warn_only"] = cfg.run.warn_only;
  manifest["versions"] = detail::versions();
  manifest["wall_time_seconds"] = wall;
  manifest["notes"] = notes;
  write_json(res.directory / "manifest.json", manifest);

  for (const auto& n : notes) log << "note: " << n << '\n';
  if (!fatal.empty()) log << "solver error: " << fatal << '\n';
  for (const auto& f : res.summary["failed_checks"]) log << (cfg.run.warn_only ? "warning" : "violation") << ": " << f.get<std::string>() << '\n';

  if (res.summary["solver_errors"].get<int>() > 0) res.exit_code = exit_divergence;
  else if (!res.summary["failed_checks"].empty() && !cfg.run.warn_only) res.exit_code = exit_violations;
  return res;
}

}  // namespace mfsb
