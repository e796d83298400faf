#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "mfsb/runner.hpp"

using namespace mfsb;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mfsb_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const char* kMinimal = R"({
  "config_version": 1,
  "problem": {
    "dimension": 1,
    "mu_in": {"kind": "gaussian", "mean": [0.0], "sd": 0.5},
    "mu_fin": {"kind": "gaussian", "mean": [1.0], "sd": 0.5}
  },
  "run": {"mode": "solve", "k": 2, "particles": 100, "steps": 10}
})";

std::string with(std::string text, const std::string& from, const std::string& to) {
  const auto at = text.find(from);
  EXPECT_NE(at, std::string::npos) << from;
  return text.replace(at, from.size(), to);
}

std::string config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Csv, RoundTripsDoublesExactly) {
  const std::vector<double> vals{0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, std::nextafter(1.0, 2.0), 0.0, -0.0,
                                 std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::infinity(),
                                 -std::numeric_limits<double>::infinity()};
  Table t({"v", "label"});
  for (double v : vals) t.row().add(v).add("a, \"quoted\" cell");
  const fs::path dir = scratch("csv");
  t.write(dir / "t.csv");
  Table back = Table::read(dir / "t.csv");
  ASSERT_EQ(back.rows(), vals.size());
  for (std::size_t r = 0; r < vals.size(); ++r) {
    const double v = back.number(r, "v");
    if (std::isnan(vals[r])) {
      EXPECT_TRUE(std::isnan(v));
    } else {
      EXPECT_EQ(std::memcmp(&v, &vals[r], sizeof v), 0) << r;
    }
    EXPECT_EQ(back.text(r, "label"), "a, \"quoted\" cell");
  }
  EXPECT_EQ(back.str(), t.str());
}

TEST(Csv, Errors) {
  const fs::path dir = scratch("csv_err");
  EXPECT_THROW(Table::read(dir / "missing.csv"), IoError);
  std::ofstream(dir / "bad.csv") << "a,b\n1\n";
  EXPECT_THROW(Table::read(dir / "bad.csv"), IoError);
  std::ofstream(dir / "empty.csv") << "";
  EXPECT_THROW(Table::read(dir / "empty.csv"), IoError);
  Table t({"a"});
  t.row().add(1.0);
  EXPECT_THROW(t.add(2.0), std::logic_error);
  EXPECT_THROW(t.column("b"), IoError);
  EXPECT_THROW(parse_double("1.5x"), IoError);
}

TEST(Csv, PathTableLayout) {
  std::vector<Points> arr(3, Points::Zero(2, 2));
  arr[2](1, 1) = 4.5;
  Table t = path_table(TimeGrid(1.0, 2), arr, "x");
  EXPECT_EQ(t.header(), (std::vector<std::string>{"t", "node", "particle", "x0", "x1"}));
  EXPECT_EQ(t.rows(), 6u);
  EXPECT_EQ(t.number(5, "x1"), 4.5);
  EXPECT_EQ(t.number(5, "t"), 1.0);
}

TEST(Json, ReportsRoundTrip) {
  LadderReport lad;
  lad.rows.resize(2);
  lad.rows[0].k = 1;
  lad.rows[0].value = {0.5, 0.01, 0.4, 0.1};
  lad.rows[1].k = 4;
  lad.rows[1].error = "boom";
  lad.decay_slope = std::numeric_limits<double>::quiet_NaN();
  lad.oracle_value = 0.9;
  lad.monotonicity_violations = {"x"};
  Json j = lad;
  LadderReport back = j.get<LadderReport>();
  EXPECT_EQ(Json(back).dump(), j.dump());
  EXPECT_TRUE(j["decay_slope"].is_null());

  ChaosReport ch;
  ch.rows.resize(1);
  ch.rows[0].N = 50;
  ch.rows[0].ratio = std::numeric_limits<double>::infinity();
  ch.slope = -0.5;
  Json jc = ch;
  EXPECT_EQ(jc["rows"][0]["ratio"], "inf");
  EXPECT_EQ(Json(jc.get<ChaosReport>()).dump(), jc.dump());

  MartingaleReport mt;
  mt.features = {"1|dM0"};
  mt.correlations = {0.01};
  mt.threshold = 0.1;
  mt.pass = true;
  Json jm = mt;
  EXPECT_EQ(Json(jm.get<MartingaleReport>()).dump(), jm.dump());

  const fs::path dir = scratch("json");
  write_json(dir / "r.json", j);
  EXPECT_EQ(read_json(dir / "r.json").dump(), j.dump());
  EXPECT_THROW(read_json(dir / "none.json"), IoError);
}

TEST(DirectoryLockTest, IsExclusiveAndReleased) {
  const fs::path dir = scratch("lock") / "out";
  {
    DirectoryLock a(dir);
    EXPECT_TRUE(fs::exists(dir / ".mfsb.lock"));
    EXPECT_THROW(DirectoryLock b(dir), IoError);
  }
  EXPECT_FALSE(fs::exists(dir / ".mfsb.lock"));
  DirectoryLock again(dir);
}

TEST(Config, MinimalParsesWithDefaults) {
  ExperimentConfig c = parse_config(kMinimal);
  EXPECT_EQ(c.run.mode, RunMode::solve);
  EXPECT_EQ(c.run.ks, std::vector<double>{2.0});
  EXPECT_EQ(c.penalty.kind, "feature_moment");
  EXPECT_EQ(c.output.directory, "out");
  EXPECT_EQ(c.problem.sigma, MatrixXd::Identity(1, 1));
  EXPECT_TRUE(std::holds_alternative<QuadraticCost>(c.problem.cost.f1));
  EXPECT_TRUE(c.problem.interaction.none());
}

TEST(Config, ShippedExamplesParse) {
  for (const auto& e : fs::directory_iterator(fs::path(MFSB_SOURCE_DIR) / "configs"))
    if (e.path().extension() == ".json") EXPECT_NO_THROW(load_config(e.path())) << e.path();
}

TEST(Config, UnknownKeyIsRejectedWithLine) {
  const std::string msg = config_error(with(kMinimal, "\"steps\": 10", "\"steps\": 10, \"stpes\": 3"));
  EXPECT_NE(msg.find("run.stpes"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 8"), std::string::npos) << msg;
}

TEST(Config, WrongTypeNamesLineAndKey) {
  const std::string msg = config_error(with(kMinimal, "\"particles\": 100", "\"particles\": \"many\""));
  EXPECT_NE(msg.find("line 8"), std::string::npos) << msg;
  EXPECT_NE(msg.find("run.particles"), std::string::npos) << msg;
}

TEST(Config, Rejections) {
  EXPECT_NE(config_error(with(kMinimal, "\"config_version\": 1", "\"config_version\": 2")).find("version"), std::string::npos);
  EXPECT_NE(config_error(with(kMinimal, "\"mode\": \"solve\"", "\"mode\": \"fly\"")).find("unknown mode"), std::string::npos);
  EXPECT_NE(config_error(with(kMinimal, "\"sd\": 0.5}", "\"sd\": -1}")).find("> 0"), std::string::npos);
  EXPECT_NE(config_error(with(kMinimal, "\"k\": 2", "\"k\": [4, 2]")).find("increasing"), std::string::npos);
  EXPECT_NE(config_error(with(kMinimal, "\"mode\": \"solve\"", "\"mode\": \"chaos_sweep\", \"N\": [10, 20]")).find("convex_dual"),
            std::string::npos);
  EXPECT_NE(config_error(with(kMinimal, "\"mode\": \"solve\"", "\"mode\": \"chaos_sweep\"")).find("two N"), std::string::npos);
  EXPECT_FALSE(config_error("{ \"config_version\": 1, ").empty());
  // oracle_compare needs the 1-D entropic setting
  const std::string oc = with(with(kMinimal, "\"mode\": \"solve\"", "\"mode\": \"oracle_compare\""), "\"dimension\": 1,",
                              "\"dimension\": 1, \"interaction\": {\"kind\": \"pairwise_quadratic\"},");
  EXPECT_NE(config_error(oc).find("oracle_compare"), std::string::npos);
}

TEST(Config, PenaltyConstruction) {
  ExperimentConfig c = parse_config(kMinimal);
  c.penalty.kind = "convex_dual";
  c.penalty.direction = {-3.0};
  PenaltySpec p = make_penalty(c, 1);
  ASSERT_TRUE(std::holds_alternative<ConvexDualPenalty>(p));
  const auto& r = std::get<Ridge>(std::get<ConvexDualPenalty>(p).phi.kind());
  EXPECT_EQ(r.direction(0), -1.0);
  c.penalty.kind = "softmax_dual";
  EXPECT_TRUE(std::holds_alternative<SoftMaxDualPenalty>(make_penalty(c, 1)));
  c.penalty.kind = "feature_moment";
  EXPECT_TRUE(std::holds_alternative<FeatureMomentPenalty>(make_penalty(c, 1)));
}

TEST(Summary, LadderFlagsMatchLibraryReport) {
  LadderReport rep;
  for (double k : {1.0, 4.0, 16.0}) {
    LadderRow r;
    r.k = k;
    r.converged = true;
    r.steps = 10;
    r.terminal_penalty = 1.0 / k;
    r.value = {k == 4.0 ? 0.2 : 0.5 + 0.01 * k, 0.01, 0.0, 0.0};
    rep.rows.push_back(r);
  }
  rep.monotonicity_violations = {"k=4"};
  const fs::path dir = scratch("summary");
  ladder_table(rep).write(dir / "ladder.csv");
  Json s = summarize(dir, CheckConfig{});
  EXPECT_EQ(s["ladder"]["monotonicity_violations"].get<int>(), static_cast<int>(rep.monotonicity_violations.size()));
  EXPECT_NEAR(s["ladder"]["decay_slope"].get<double>(), -1.0, 1e-12);
  EXPECT_FALSE(s["pass"].get<bool>());
  EXPECT_EQ(s["failed_checks"][0], "ladder.pass_monotone");
  EXPECT_EQ(s["solver_errors"].get<int>(), 0);
}

TEST(Summary, ErrorRowsCountAsSolverErrors) {
  LadderReport rep;
  rep.rows.resize(1);
  rep.rows[0].k = 1;
  rep.rows[0].error = "diverged";
  const fs::path dir = scratch("summary_err");
  ladder_table(rep).write(dir / "ladder.csv");
  Json s = summarize(dir, CheckConfig{});
  EXPECT_EQ(s["solver_errors"].get<int>(), 1);
}

TEST(Summary, DualityFlagsFromTable) {
  DualityReport rep;
  auto cell = [](double k, int member, double v) {
    DualityCell c;
    c.k = k;
    c.member = member;
    c.mean_field = {v, 0.001, 0, 0};
    c.converged = true;
    return c;
  };
  // k = 1: members below the primal; k = 2: member 0 beats the primal and the inner sup drops
  rep.cells = {cell(1, -1, 1.0), cell(1, 0, 0.9), cell(1, 1, 0.5), cell(2, -1, 1.1), cell(2, 0, 1.5), cell(2, 1, 0.1)};
  Table t = duality_table(rep);
  Json f = detail::duality_flags(t);
  EXPECT_EQ(f["weak_duality_violations"].get<int>(), 1);
  EXPECT_EQ(f["monotonicity_violations"].get<int>(), 0);
  rep.cells[4].mean_field.value = 0.2;
  f = detail::duality_flags(duality_table(rep));
  EXPECT_EQ(f["weak_duality_violations"].get<int>(), 0);
  EXPECT_EQ(f["monotonicity_violations"].get<int>(), 1);
}
