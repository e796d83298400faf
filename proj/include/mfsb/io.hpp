#pragma once

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mfsb/chaos.hpp"
#include "mfsb/mkv_solver.hpp"

namespace mfsb {

using Json = nlohmann::ordered_json;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- CSV ----

/// Text that reads back to the same double: 17 significant digits, nan / inf / -inf.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw IoError("csv: not a number: '" + s + "'");
  }
  if (used != s.size()) throw IoError("csv: not a number: '" + s + "'");
  return v;
}

/// A table of string cells with a mandatory header. Numbers go in through add(double).
class Table {
 public:
  Table() = default;
  explicit Table(std::vector<std::string> header) : header_(std::move(header)) {}

  const std::vector<std::string>& header() const { return header_; }
  std::size_t rows() const { return cells_.size(); }
  std::size_t cols() const { return header_.size(); }

  Table& row() {
    if (!cells_.empty() && cells_.back().size() != header_.size()) throw std::logic_error("table: short row");
    cells_.emplace_back();
    return *this;
  }
  Table& add(double v) { return add_text(format_double(v)); }
  Table& add(int v) { return add_text(std::to_string(v)); }
  Table& add(bool v) { return add_text(v ? "1" : "0"); }
  Table& add(const std::string& s) { return add_text(quote(s)); }
  Table& add(const char* s) { return add(std::string(s)); }

  int column(const std::string& name) const {
    for (std::size_t c = 0; c < header_.size(); ++c)
      if (header_[c] == name) return static_cast<int>(c);
    throw IoError("csv: no column '" + name + "'");
  }
  const std::string& cell(std::size_t r, const std::string& name) const {
    return cells_.at(r).at(static_cast<std::size_t>(column(name)));
  }
  double number(std::size_t r, const std::string& name) const { return parse_double(cell(r, name)); }
  std::string text(std::size_t r, const std::string& name) const { return unquote(cell(r, name)); }
  std::vector<double> numbers(const std::string& name) const {
    std::vector<double> out;
    for (std::size_t r = 0; r < rows(); ++r) out.push_back(number(r, name));
    return out;
  }

  std::string str() const {
    std::ostringstream os;
    auto line = [&os](const std::vector<std::string>& v) {
      for (std::size_t c = 0; c < v.size(); ++c) os << (c ? "," : "") << v[c];
      os << '\n';
    };
    line(header_);
    for (const auto& r : cells_) {
      if (r.size() != header_.size()) throw std::logic_error("table: short row");
      line(r);
    }
    return os.str();
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << str();
    if (!f) throw IoError("write failed: " + path.string());
  }

  static Table read(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(f, line)) throw IoError("csv: empty file " + path.string());
    Table t(split(line));
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      auto cells = split(line);
      if (cells.size() != t.header_.size())
        throw IoError("csv: " + path.string() + ": row has " + std::to_string(cells.size()) + " cells, header has " +
                      std::to_string(t.header_.size()));
      t.cells_.push_back(std::move(cells));
    }
    return t;
  }

 private:
  Table& add_text(std::string s) {
    if (cells_.empty()) throw std::logic_error("table: add before row()");
    if (cells_.back().size() >= header_.size()) throw std::logic_error("table: too many cells");
    cells_.back().push_back(std::move(s));
    return *this;
  }

  static std::string quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
      if (c == '"') out += '"';
      out += c == '\n' ? ' ' : c;
    }
    return out + "\"";
  }
  static std::string unquote(const std::string& s) {
    if (s.size() < 2 || s.front() != '"') return s;
    std::string out;
    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
      out += s[i];
      if (s[i] == '"') ++i;
    }
    return out;
  }
  // cells stay quoted; text() unquotes
  static std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out(1);
    bool quoted = false;
    for (char c : line) {
      if (c == '"') quoted = !quoted;
      if (c == ',' && !quoted) {
        out.emplace_back();
        continue;
      }
      if (c != '\r') out.back() += c;
    }
    return out;
  }

  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> cells_;
};

/// One row per (node, particle): columns t, node, particle, x0..x{m-1}.
inline Table path_table(const TimeGrid& grid, const std::vector<Points>& arr, const char* prefix) {
  std::vector<std::string> h{"t", "node", "particle"};
  const int m = arr.empty() ? 0 : static_cast<int>(arr[0].cols());
  for (int c = 0; c < m; ++c) h.push_back(prefix + std::to_string(c));
  Table t(std::move(h));
  for (std::size_t j = 0; j < arr.size(); ++j)
    for (Eigen::Index i = 0; i < arr[j].rows(); ++i) {
      t.row().add(grid.node(static_cast<int>(j))).add(static_cast<int>(j)).add(static_cast<int>(i));
      for (int c = 0; c < m; ++c) t.add(arr[j](i, c));
    }
  return t;
}

// ---- JSON with exact doubles ----

/// NaN goes to null, infinities to "inf" / "-inf"; finite values print with 17 digits.
inline Json num(double v) {
  if (std::isnan(v)) return nullptr;
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline double num_of(const Json& j) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw IoError("json: not a number: " + s);
  }
  return j.get<double>();
}

inline Json nums(const std::vector<double>& v) {
  Json a = Json::array();
  for (double x : v) a.push_back(num(x));
  return a;
}

inline std::vector<double> nums_of(const Json& j) {
  std::vector<double> out;
  for (const auto& x : j) out.push_back(num_of(x));
  return out;
}

inline void to_json(Json& j, const ValueEstimate& v) {
  j = Json{{"value", num(v.value)}, {"std_error", num(v.std_error)}, {"running", num(v.running)}, {"penalty", num(v.penalty)}};
}
inline void from_json(const Json& j, ValueEstimate& v) {
  v.value = num_of(j.at("value"));
  v.std_error = num_of(j.at("std_error"));
  v.running = num_of(j.at("running"));
  v.penalty = num_of(j.at("penalty"));
}

inline void to_json(Json& j, const LadderReport& r) {
  Json rows = Json::array();
  for (const auto& x : r.rows)
    rows.push_back({{"k", num(x.k)},
                    {"value", x.value},
                    {"terminal_penalty", num(x.terminal_penalty)},
                    {"terminal_w2", num(x.terminal_w2)},
                    {"converged", x.converged},
                    {"iterations", x.iterations},
                    {"steps", x.steps},
                    {"error", x.error}});
  j = Json{{"rows", rows},
           {"monotonicity_violations", r.monotonicity_violations},
           {"weak_duality_violations", r.weak_duality_violations},
           {"decay_slope", num(r.decay_slope)},
           {"oracle_value", r.oracle_value ? num(*r.oracle_value) : Json()}};
}
inline void from_json(const Json& j, LadderReport& r) {
  r.rows.clear();
  for (const auto& x : j.at("rows")) {
    LadderRow row;
    row.k = num_of(x.at("k"));
    row.value = x.at("value").get<ValueEstimate>();
    row.terminal_penalty = num_of(x.at("terminal_penalty"));
    row.terminal_w2 = num_of(x.at("terminal_w2"));
    row.converged = x.at("converged").get<bool>();
    row.iterations = x.at("iterations").get<int>();
    row.steps = x.at("steps").get<int>();
    row.error = x.at("error").get<std::string>();
    r.rows.push_back(row);
  }
  r.monotonicity_violations = j.at("monotonicity_violations").get<std::vector<std::string>>();
  r.weak_duality_violations = j.at("weak_duality_violations").get<std::vector<std::string>>();
  r.decay_slope = num_of(j.at("decay_slope"));
  if (j.at("oracle_value").is_null()) r.oracle_value.reset();
  else r.oracle_value = num_of(j.at("oracle_value"));
}

inline void to_json(Json& j, const ChaosReport& r) {
  Json rows = Json::array();
  for (const auto& x : r.rows)
    rows.push_back({{"N", x.N},
                    {"h2_error", num(x.h2_error)},
                    {"h2_std_error", num(x.h2_std_error)},
                    {"failed", x.failed},
                    {"epsilon_n", num(x.epsilon_n)},
                    {"ratio", num(x.ratio)},
                    {"replications", x.replications},
                    {"converged", x.converged},
                    {"error", x.error}});
  j = Json{{"rows", rows},
           {"slope", num(r.slope)},
           {"spearman", num(r.spearman)},
           {"reference_particles", r.reference_particles},
           {"reference_converged", r.reference_converged},
           {"wasserstein_mode", r.wasserstein_mode}};
}
inline void from_json(const Json& j, ChaosReport& r) {
  r.rows.clear();
  for (const auto& x : j.at("rows")) {
    ChaosRow row;
    row.N = x.at("N").get<int>();
    row.h2_error = num_of(x.at("h2_error"));
    row.h2_std_error = num_of(x.at("h2_std_error"));
    row.failed = x.at("failed").get<int>();
    row.epsilon_n = num_of(x.at("epsilon_n"));
    row.ratio = num_of(x.at("ratio"));
    row.replications = x.at("replications").get<int>();
    row.converged = x.at("converged").get<bool>();
    row.error = x.at("error").get<std::string>();
    r.rows.push_back(row);
  }
  r.slope = num_of(j.at("slope"));
  r.spearman = num_of(j.at("spearman"));
  r.reference_particles = j.at("reference_particles").get<int>();
  r.reference_converged = j.at("reference_converged").get<bool>();
  r.wasserstein_mode = j.at("wasserstein_mode").get<std::string>();
}

inline void to_json(Json& j, const DualityReport& r) {
  Json cells = Json::array();
  for (const auto& c : r.cells) {
    Json np = Json::array();
    for (const auto& v : c.nparticle) np.push_back(v);
    cells.push_back({{"k", num(c.k)},
                     {"member", c.member},
                     {"mean_field", c.mean_field},
                     {"Ns", c.Ns},
                     {"nparticle", np},
                     {"nparticle_gap", nums(c.nparticle_gap)},
                     {"nparticle_error", c.nparticle_error},
                     {"mixture_weights", nums(c.mixture_weights)},
                     {"converged", c.converged},
                     {"error", c.error}});
  }
  j = Json{{"ks", nums(r.ks)},
           {"members", r.members},
           {"cells", cells},
           {"primal", nums(r.primal)},
           {"primal_se", nums(r.primal_se)},
           {"inner_sup", nums(r.inner_sup)},
           {"inner_sup_se", nums(r.inner_sup_se)},
           {"monotonicity_violations", r.monotonicity_violations},
           {"weak_duality_violations", r.weak_duality_violations},
           {"convergence_violations", r.convergence_violations},
           {"temperature", num(r.temperature)}};
}
inline void from_json(const Json& j, DualityReport& r) {
  r.ks = nums_of(j.at("ks"));
  r.members = j.at("members").get<int>();
  r.cells.clear();
  for (const auto& x : j.at("cells")) {
    DualityCell c;
    c.k = num_of(x.at("k"));
    c.member = x.at("member").get<int>();
    c.mean_field = x.at("mean_field").get<ValueEstimate>();
    c.Ns = x.at("Ns").get<std::vector<int>>();
    for (const auto& v : x.at("nparticle")) c.nparticle.push_back(v.get<ValueEstimate>());
    c.nparticle_gap = nums_of(x.at("nparticle_gap"));
    c.nparticle_error = x.at("nparticle_error").get<std::vector<std::string>>();
    c.mixture_weights = nums_of(x.at("mixture_weights"));
    c.converged = x.at("converged").get<bool>();
    c.error = x.at("error").get<std::string>();
    r.cells.push_back(std::move(c));
  }
  r.primal = nums_of(j.at("primal"));
  r.primal_se = nums_of(j.at("primal_se"));
  r.inner_sup = nums_of(j.at("inner_sup"));
  r.inner_sup_se = nums_of(j.at("inner_sup_se"));
  r.monotonicity_violations = j.at("monotonicity_violations").get<std::vector<std::string>>();
  r.weak_duality_violations = j.at("weak_duality_violations").get<std::vector<std::string>>();
  r.convergence_violations = j.at("convergence_violations").get<std::vector<std::string>>();
  r.temperature = num_of(j.at("temperature"));
}

inline void to_json(Json& j, const MartingaleReport& r) {
  j = Json{{"features", r.features},
           {"correlations", nums(r.correlations)},
           {"max_abs_correlation", num(r.max_abs_correlation)},
           {"threshold", num(r.threshold)},
           {"pass", r.pass}};
}
inline void from_json(const Json& j, MartingaleReport& r) {
  r.features = j.at("features").get<std::vector<std::string>>();
  r.correlations = nums_of(j.at("correlations"));
  r.max_abs_correlation = num_of(j.at("max_abs_correlation"));
  r.threshold = num_of(j.at("threshold"));
  r.pass = j.at("pass").get<bool>();
}

inline void write_json(const std::filesystem::path& path, const Json& j) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << j.dump(2) << '\n';
  if (!f) throw IoError("write failed: " + path.string());
}

inline Json read_json(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  try {
    return Json::parse(f);
  } catch (const Json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// ---- output directory lock ----

/// Exclusive lock file in the output directory; a second run on the same directory fails.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir) : path_(dir / ".mfsb.lock") {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f)
      throw IoError(errno == EEXIST ? "output directory " + dir.string() + " is locked by another run (" + path_.string() + ")"
                                    : "cannot create lock file " + path_.string());
    std::fclose(f);
  }
  ~DirectoryLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

}  // namespace mfsb
