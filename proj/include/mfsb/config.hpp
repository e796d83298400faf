#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mfsb/mkv_solver.hpp"
#include "mfsb/oracle.hpp"
#include "mfsb/phi_family.hpp"

namespace mfsb {

inline constexpr int kConfigVersion = 1;

/// Raised for any config problem; where() is "line N, key a.b.c" when the key is known.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& where, const std::string& msg)
      : std::runtime_error(where.empty() ? msg : where + ": " + msg) {}
};

enum class RunMode { solve, k_ladder, duality_grid, chaos_sweep, oracle_compare };

inline const char* to_string(RunMode m) {
  switch (m) {
    case RunMode::solve: return "solve";
    case RunMode::k_ladder: return "k_ladder";
    case RunMode::duality_grid: return "duality_grid";
    case RunMode::chaos_sweep: return "chaos_sweep";
    case RunMode::oracle_compare: return "oracle_compare";
  }
  return "?";
}

struct PenaltyConfig {
  std::string kind = "feature_moment";  // feature_moment | convex_dual | softmax_dual
  int degree = 2;                       // feature_moment monomials
  int bumps = 8;                        // feature_moment bumps per coordinate
  std::vector<double> direction;        // convex_dual ridge, empty gives +e_1
  double offset = 0.0;
  double smoothing = 0.1;
  double temperature = 0.02;  // softmax_dual
  int target_size = 10000;    // mu_fin sample for target moments
};

struct FamilyConfig {
  int directions = 2;
  int offsets = 4;
  double smoothing_factor = 0.1;
};

/// Thresholds behind the summary flags.
struct CheckConfig {
  double ladder_slope_max = -0.8;
  double chaos_slope_max = -0.35;
  double spearman_max = 0.9;
  double oracle_w2_max = 0.08;
  double terminal_w2_max = 0.05;
};

struct RunConfig {
  RunMode mode = RunMode::solve;
  std::vector<double> ks{1.0};
  int particles = 1000;
  int steps = 50;
  std::vector<int> Ns;
  std::uint64_t seed = 1;
  int replications = 1;
  int reference_particles = 0;  // chaos reference, 0 gives 4 max N
  int threads = 0;              // 0 defers to MFSB_THREADS
  bool warn_only = false;
  FamilyConfig family;
  SolverConfig solver;
  int mixture_steps = 6;
  GridBridgeOptions oracle;
  int histogram_bins = 60;
  CheckConfig checks;
};

struct OutputConfig {
  std::string directory = "out";
  bool emit_charts = false;
};

struct ExperimentConfig {
  int config_version = kConfigVersion;
  ProblemSpec problem;
  PenaltyConfig penalty;
  RunConfig run;
  OutputConfig output;
  nlohmann::ordered_json source;  // the file as parsed, echoed into the manifest
};

namespace detail {

/// Line of the innermost key of `path`, found by walking the keys in document order.
inline int key_line(const std::string& text, const std::vector<std::string>& path) {
  std::size_t pos = 0;
  bool found = false;
  for (const auto& key : path) {
    if (key.empty() || key[0] == '[') continue;
    const std::string quoted = "\"" + key + "\"";
    std::size_t p = pos;
    while ((p = text.find(quoted, p)) != std::string::npos) {
      std::size_t q = p + quoted.size();
      while (q < text.size() && std::isspace(static_cast<unsigned char>(text[q]))) ++q;
      if (q < text.size() && text[q] == ':') break;
      p += quoted.size();
    }
    if (p == std::string::npos) break;
    pos = p;
    found = true;
  }
  if (!found) return 0;
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
}

/// Object reader that tracks its key path, checks types and rejects keys nobody asked for.
class Node {
 public:
  using Json = nlohmann::ordered_json;

  Node(const Json& j, std::vector<std::string> path, const std::string* text) : j_(&j), path_(std::move(path)), text_(text) {
    if (!j.is_object()) fail("expected an object");
  }

  [[noreturn]] void fail(const std::string& msg, const std::string& key = "") const {
    std::vector<std::string> p = path_;
    if (!key.empty()) p.push_back(key);
    std::string dotted;
    for (const auto& s : p) dotted += (dotted.empty() || s[0] == '[' ? "" : ".") + s;
    std::string where;
    const int line = text_ ? key_line(*text_, p) : 0;
    if (line > 0) where = "line " + std::to_string(line) + ", ";
    where += "key '" + (dotted.empty() ? std::string("<root>") : dotted) + "'";
    throw ConfigError(where, msg);
  }

  bool has(const std::string& key) const { return j_->contains(key); }

  const Json& raw(const std::string& key) {
    used_.insert(key);
    if (!j_->contains(key)) fail("missing required key", key);
    return j_->at(key);
  }

  Node child(const std::string& key) {
    const Json& v = raw(key);
    auto p = path_;
    p.push_back(key);
    if (!v.is_object()) fail("expected an object", key);
    return Node(v, std::move(p), text_);
  }

  double number(const std::string& key) {
    const Json& v = raw(key);
    if (!v.is_number()) fail("expected a number, got " + std::string(v.type_name()), key);
    return v.get<double>();
  }
  double number(const std::string& key, double def) { return has(key) ? number(key) : (used_.insert(key), def); }

  long long integer(const std::string& key) {
    const Json& v = raw(key);
    if (!v.is_number_integer()) fail("expected an integer, got " + std::string(v.type_name()), key);
    return v.get<long long>();
  }
  int integer(const std::string& key, int def, int lo = std::numeric_limits<int>::min()) {
    if (!has(key)) return used_.insert(key), def;
    const long long v = integer(key);
    if (v < lo || v > std::numeric_limits<int>::max()) fail("must be an integer >= " + std::to_string(lo), key);
    return static_cast<int>(v);
  }

  bool boolean(const std::string& key, bool def) {
    if (!has(key)) return used_.insert(key), def;
    const Json& v = raw(key);
    if (!v.is_boolean()) fail("expected true or false, got " + std::string(v.type_name()), key);
    return v.get<bool>();
  }

  std::string text(const std::string& key) {
    const Json& v = raw(key);
    if (!v.is_string()) fail("expected a string, got " + std::string(v.type_name()), key);
    return v.get<std::string>();
  }
  std::string text(const std::string& key, const std::string& def) { return has(key) ? text(key) : (used_.insert(key), def); }

  std::vector<double> numbers(const std::string& key) {
    const Json& v = raw(key);
    if (v.is_number()) return {v.get<double>()};
    if (!v.is_array()) fail("expected a list of numbers", key);
    std::vector<double> out;
    for (const auto& x : v) {
      if (!x.is_number()) fail("expected a list of numbers, found " + std::string(x.type_name()), key);
      out.push_back(x.get<double>());
    }
    return out;
  }

  std::vector<int> integers(const std::string& key) {
    const Json& v = raw(key);
    if (!v.is_array()) fail("expected a list of integers", key);
    std::vector<int> out;
    for (const auto& x : v) {
      if (!x.is_number_integer()) fail("expected a list of integers, found " + std::string(x.type_name()), key);
      out.push_back(x.get<int>());
    }
    return out;
  }

  /// Square or rectangular matrix as a list of rows; a bare number gives number * I(rows).
  MatrixXd matrix(const std::string& key, int rows) {
    const Json& v = raw(key);
    if (v.is_number()) return v.get<double>() * MatrixXd::Identity(rows, rows);
    if (!v.is_array() || v.empty()) fail("expected a number or a list of rows", key);
    const auto cols = v[0].is_array() ? v[0].size() : 0;
    if (cols == 0) fail("expected a list of rows", key);
    MatrixXd m(static_cast<Eigen::Index>(v.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < v.size(); ++r) {
      if (!v[r].is_array() || v[r].size() != cols) fail("ragged matrix", key);
      for (std::size_t c = 0; c < cols; ++c) {
        if (!v[r][c].is_number()) fail("expected numbers in the matrix", key);
        m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v[r][c].get<double>();
      }
    }
    return m;
  }

  /// Rejects keys that were never read.
  void done() const {
    for (auto it = j_->begin(); it != j_->end(); ++it)
      if (!used_.count(it.key())) fail("unknown key", it.key());
  }

  const std::vector<std::string>& path() const { return path_; }
  const std::string* source_text() const { return text_; }

 private:
  const Json* j_;
  std::vector<std::string> path_;
  const std::string* text_;
  std::set<std::string> used_;
};

inline VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline MatrixXd covariance(Node& n, int m) {
  if (n.has("sd") && n.has("cov")) n.fail("give either sd or cov, not both");
  if (n.has("sd")) {
    const double sd = n.number("sd");
    if (!(sd > 0.0)) n.fail("must be > 0", "sd");
    return sd * sd * MatrixXd::Identity(m, m);
  }
  return n.matrix("cov", m);
}

inline VectorXd mean_vector(Node& n, int m) {
  VectorXd mu = to_vector(n.numbers("mean"));
  if (mu.size() == 1 && m > 1) mu = VectorXd::Constant(m, mu(0));
  if (mu.size() != m) n.fail("expected " + std::to_string(m) + " entries", "mean");
  return mu;
}

inline MeasureSpec parse_measure(Node n, int m, const std::filesystem::path& base) {
  const std::string kind = n.text("kind");
  MeasureSpec out;
  if (kind == "gaussian") {
    VectorXd mu = mean_vector(n, m);
    out = MeasureSpec::gaussian(std::move(mu), covariance(n, m));
  } else if (kind == "mixture") {
    const auto& comps = n.raw("components");
    if (!comps.is_array() || comps.empty()) n.fail("expected a non-empty list", "components");
    std::vector<MixtureComponent> cs;
    for (std::size_t i = 0; i < comps.size(); ++i) {
      auto p = n.path();
      p.push_back("components");
      p.push_back("[" + std::to_string(i) + "]");
      Node c(comps[i], p, n.source_text());
      const double w = c.number("weight");
      if (!(w > 0.0)) c.fail("must be > 0", "weight");
      VectorXd mu = mean_vector(c, m);
      cs.push_back({w, std::move(mu), covariance(c, m)});
      c.done();
    }
    out = MeasureSpec::mixture(std::move(cs));
  } else if (kind == "uniform_box") {
    VectorXd lo = to_vector(n.numbers("lo")), hi = to_vector(n.numbers("hi"));
    if (lo.size() != m || hi.size() != m) n.fail("lo and hi need " + std::to_string(m) + " entries");
    out = MeasureSpec::uniform_box(std::move(lo), std::move(hi));
  } else if (kind == "empirical") {
    std::filesystem::path p = n.text("path");
    if (p.is_relative()) p = base / p;
    out = MeasureSpec::empirical(p.string(), m);
  } else {
    n.fail("unknown measure kind '" + kind + "' (gaussian, mixture, uniform_box, empirical)", "kind");
  }
  n.done();
  try {
    validate(out);
  } catch (const std::exception& e) {
    n.fail(e.what());
  }
  return out;
}

/// Psi(x) = scale * sum_c log cosh(x_c): bounded Hessian, linear growth.
inline PairwisePotential log_cosh_potential(double scale) {
  PairwisePotential p;
  p.grad_psi = [scale](const VectorXd& x) -> VectorXd { return scale * x.array().tanh().matrix(); };
  p.hess_psi = [scale](const VectorXd& x) -> MatrixXd {
    return (scale / x.array().cosh().square()).matrix().asDiagonal();
  };
  p.lipschitz = 2.0 * scale;
  return p;
}

inline ProblemSpec parse_problem(Node n, const std::filesystem::path& base) {
  ProblemSpec spec;
  spec.dim = n.integer("dimension", 1, 1);
  spec.horizon = n.number("horizon", 1.0);
  if (!(spec.horizon > 0.0)) n.fail("must be > 0", "horizon");
  spec.sigma = n.has("sigma") ? n.matrix("sigma", spec.dim) : MatrixXd::Identity(spec.dim, spec.dim);
  if (spec.sigma.rows() != spec.dim) n.fail("needs " + std::to_string(spec.dim) + " rows", "sigma");

  if (n.has("cost")) {
    Node c = n.child("cost");
    const std::string kind = c.text("kind");
    if (kind == "quadratic") {
      spec.cost.f1 = QuadraticCost{};
    } else if (kind == "power") {
      PowerCost p;
      p.exponent = c.number("exponent", p.exponent);
      p.scale = c.number("scale", p.scale);
      spec.cost.f1 = p;
    } else if (kind == "quadratic_plus_asinh") {
      spec.cost.f1 = QuadraticPlusAsinhCost{};
    } else {
      c.fail("unknown cost kind '" + kind + "' (quadratic, power, quadratic_plus_asinh)", "kind");
    }
    c.done();
  }
  if (n.has("interaction")) {
    Node c = n.child("interaction");
    const std::string kind = c.text("kind");
    if (kind == "none") {
      spec.interaction.kind = NoInteraction{};
    } else if (kind == "pairwise_quadratic") {
      spec.interaction.kind = PairwiseQuadratic{};
    } else if (kind == "log_cosh") {
      const double s = c.number("scale", 1.0);
      if (!(s > 0.0)) c.fail("must be > 0", "scale");
      spec.interaction.kind = log_cosh_potential(s);
    } else {
      c.fail("unknown interaction kind '" + kind + "' (none, pairwise_quadratic, log_cosh)", "kind");
    }
    c.done();
  }
  spec.mu_in = parse_measure(n.child("mu_in"), spec.dim, base);
  spec.mu_fin = parse_measure(n.child("mu_fin"), spec.dim, base);
  n.done();
  try {
    spec.validate();
  } catch (const std::exception& e) {
    n.fail(e.what());
  }
  return spec;
}

inline PenaltyConfig parse_penalty(Node n, int m) {
  PenaltyConfig p;
  p.kind = n.text("kind", p.kind);
  p.target_size = n.integer("target_size", p.target_size, 1);
  if (p.kind == "feature_moment") {
    p.degree = n.integer("degree", p.degree, 1);
    p.bumps = n.integer("bumps", p.bumps, 0);
  } else if (p.kind == "convex_dual") {
    if (n.has("direction")) {
      p.direction = n.numbers("direction");
      if (static_cast<int>(p.direction.size()) != m) n.fail("expected " + std::to_string(m) + " entries", "direction");
    }
    p.offset = n.number("offset", p.offset);
    p.smoothing = n.number("smoothing", p.smoothing);
    if (!(p.smoothing > 0.0)) n.fail("must be > 0", "smoothing");
  } else if (p.kind == "softmax_dual") {
    p.temperature = n.number("temperature", p.temperature);
    if (!(p.temperature > 0.0)) n.fail("must be > 0", "temperature");
  } else {
    n.fail("unknown penalty kind '" + p.kind + "' (feature_moment, convex_dual, softmax_dual)", "kind");
  }
  n.done();
  return p;
}

inline SolverConfig parse_solver(Node n) {
  SolverConfig s;
  s.tol = n.number("tol", s.tol);
  s.max_picard = n.integer("max_picard", s.max_picard, 1);
  s.damping = n.number("damping", s.damping);
  s.basis_degree = n.integer("basis_degree", s.basis_degree, 1);
  s.min_particles = n.integer("min_particles", s.min_particles, 1);
  s.stiff_threshold = n.number("stiff_threshold", s.stiff_threshold);
  s.divergence_patience = n.integer("divergence_patience", s.divergence_patience, 1);
  s.anderson_depth = n.integer("anderson_depth", s.anderson_depth, 0);
  s.ridge = n.number("ridge", s.ridge);
  s.max_refinements = n.integer("max_refinements", s.max_refinements, 0);
  s.max_outer = n.integer("max_outer", s.max_outer, 1);
  s.inner_tol = n.number("inner_tol", s.inner_tol);
  s.fallback_damping = n.number("fallback_damping", s.fallback_damping);
  if (!(s.tol > 0.0)) n.fail("must be > 0", "tol");
  if (!(s.damping > 0.0 && s.damping <= 1.0)) n.fail("must be in (0, 1]", "damping");
  if (!(s.fallback_damping >= 0.0 && s.fallback_damping <= 1.0)) n.fail("must be in [0, 1]", "fallback_damping");
  if (!(s.ridge >= 0.0)) n.fail("must be >= 0", "ridge");
  n.done();
  return s;
}

inline RunConfig parse_run(Node n, const ProblemSpec& spec) {
  RunConfig r;
  const std::string mode = n.text("mode");
  if (mode == "solve") r.mode = RunMode::solve;
  else if (mode == "k_ladder") r.mode = RunMode::k_ladder;
  else if (mode == "duality_grid") r.mode = RunMode::duality_grid;
  else if (mode == "chaos_sweep") r.mode = RunMode::chaos_sweep;
  else if (mode == "oracle_compare") r.mode = RunMode::oracle_compare;
  else n.fail("unknown mode '" + mode + "' (solve, k_ladder, duality_grid, chaos_sweep, oracle_compare)", "mode");

  if (n.has("k")) r.ks = n.numbers("k");
  for (double k : r.ks)
    if (!(k >= 0.0) || !std::isfinite(k)) n.fail("k values must be finite and >= 0", "k");
  for (std::size_t i = 1; i < r.ks.size(); ++i)
    if (!(r.ks[i] > r.ks[i - 1])) n.fail("k values must be strictly increasing", "k");
  r.particles = n.integer("particles", r.particles, 1);
  r.steps = n.integer("steps", r.steps, 2);
  if (n.has("N")) r.Ns = n.integers("N");
  for (std::size_t i = 0; i < r.Ns.size(); ++i)
    if (r.Ns[i] < 1 || (i > 0 && r.Ns[i] <= r.Ns[i - 1])) n.fail("N values must be >= 1 and strictly increasing", "N");
  const long long seed = n.has("seed") ? n.integer("seed") : 1;
  if (seed < 0) n.fail("must be >= 0", "seed");
  r.seed = static_cast<std::uint64_t>(seed);
  r.replications = n.integer("replications", r.replications, 1);
  r.reference_particles = n.integer("reference_particles", r.reference_particles, 0);
  r.threads = n.integer("threads", r.threads, 0);
  r.warn_only = n.boolean("warn_only", r.warn_only);
  r.mixture_steps = n.integer("mixture_steps", r.mixture_steps, 0);
  r.histogram_bins = n.integer("histogram_bins", r.histogram_bins, 2);
  if (n.has("phi_family")) {
    Node f = n.child("phi_family");
    r.family.directions = f.integer("directions", r.family.directions, 1);
    r.family.offsets = f.integer("offsets", r.family.offsets, 1);
    r.family.smoothing_factor = f.number("smoothing_factor", r.family.smoothing_factor);
    if (!(r.family.smoothing_factor > 0.0)) f.fail("must be > 0", "smoothing_factor");
    f.done();
  }
  if (n.has("solver")) r.solver = parse_solver(n.child("solver"));
  if (n.has("oracle")) {
    Node o = n.child("oracle");
    r.oracle.grid_points = o.integer("grid_points", r.oracle.grid_points, 3);
    r.oracle.sinkhorn_tol = o.number("sinkhorn_tol", r.oracle.sinkhorn_tol);
    r.oracle.max_iterations = o.integer("max_iterations", r.oracle.max_iterations, 1);
    r.oracle.width_sds = o.number("width_sds", r.oracle.width_sds);
    o.done();
  }
  r.oracle.steps = r.steps;
  if (n.has("checks")) {
    Node c = n.child("checks");
    r.checks.ladder_slope_max = c.number("ladder_slope_max", r.checks.ladder_slope_max);
    r.checks.chaos_slope_max = c.number("chaos_slope_max", r.checks.chaos_slope_max);
    r.checks.spearman_max = c.number("spearman_max", r.checks.spearman_max);
    r.checks.oracle_w2_max = c.number("oracle_w2_max", r.checks.oracle_w2_max);
    r.checks.terminal_w2_max = c.number("terminal_w2_max", r.checks.terminal_w2_max);
    c.done();
  }
  n.done();

  if (r.ks.empty()) n.fail("need at least one k value", "k");
  if (r.mode == RunMode::chaos_sweep && r.Ns.size() < 2) n.fail("chaos_sweep needs at least two N values", "N");
  if (r.mode == RunMode::oracle_compare) {
    if (spec.dim != 1 || !spec.interaction.none() || !std::holds_alternative<QuadraticCost>(spec.cost.f1))
      n.fail("oracle_compare needs a 1-D problem with quadratic cost and no interaction", "mode");
    if (spec.sigma.cols() != 1) n.fail("oracle_compare needs scalar noise", "mode");
  }
  return r;
}

}  // namespace detail

/// Parses and validates a config document. `base` resolves relative empirical-measure paths.
inline ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base = ".") {
  using Json = nlohmann::ordered_json;
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    std::string msg = e.what();
    if (auto p = msg.find("parse error"); p != std::string::npos) msg = msg.substr(p);
    throw ConfigError("", msg);
  }
  ExperimentConfig cfg;
  cfg.source = j;
  detail::Node root(j, {}, &text);
  const long long ver = root.integer("config_version");
  if (ver != kConfigVersion)
    root.fail("unsupported version " + std::to_string(ver) + " (expected " + std::to_string(kConfigVersion) + ")",
              "config_version");
  cfg.problem = detail::parse_problem(root.child("problem"), base);
  cfg.penalty = root.has("penalty") ? detail::parse_penalty(root.child("penalty"), cfg.problem.dim) : PenaltyConfig{};
  cfg.run = detail::parse_run(root.child("run"), cfg.problem);
  if (root.has("output")) {
    detail::Node o = root.child("output");
    cfg.output.directory = o.text("directory", cfg.output.directory);
    cfg.output.emit_charts = o.boolean("emit_charts", cfg.output.emit_charts);
    o.done();
  }
  root.done();
  if ((cfg.run.mode == RunMode::chaos_sweep) && cfg.penalty.kind != "convex_dual")
    throw ConfigError("key 'penalty.kind'", "chaos_sweep needs a convex_dual penalty");
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("", "cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return parse_config(ss.str(), path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string(), e.what());
  }
}

/// Builds the terminal penalty from the config against a mu_fin sample.
inline PenaltySpec make_penalty(const ExperimentConfig& cfg, std::uint64_t seed) {
  const ProblemSpec& spec = cfg.problem;
  const ParticleCloud target = sample(spec.mu_fin, cfg.penalty.target_size, derive_seed(seed, "penalty-target"));
  const PenaltyConfig& p = cfg.penalty;
  if (p.kind == "feature_moment") return default_feature_penalty(target, p.degree, p.bumps);
  if (p.kind == "convex_dual") {
    VectorXd u = VectorXd::Zero(spec.dim);
    if (p.direction.empty()) u(0) = 1.0;
    else u = detail::to_vector(p.direction);
    if (!(u.norm() > 0.0)) throw ConfigError("penalty.direction", "direction must be nonzero");
    return ConvexDualPenalty(PhiMember(Ridge{u / u.norm(), p.offset, p.smoothing}), target);
  }
  PhiFamily fam = default_phi_family(target, cfg.run.family.directions, cfg.run.family.offsets,
                                     cfg.run.family.smoothing_factor, derive_seed(seed, "phi-family"));
  return SoftMaxDualPenalty(std::move(fam), target, p.temperature);
}

}  // namespace mfsb
