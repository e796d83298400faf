#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mfsb/io.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mfsb_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Result cli(const std::string& args, const fs::path& dir) {
  const std::string cmd = std::string("\"") + MFSB_CLI + "\" " + args + " > \"" + (dir / "stdout.txt").string() + "\" 2> \"" +
                          (dir / "stderr.txt").string() + "\"";
  const int raw = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(dir / "stdout.txt");
  r.err = slurp(dir / "stderr.txt");
  return r;
}

fs::path write_config(const fs::path& dir, const std::string& name, const std::string& text) {
  fs::path p = dir / name;
  std::ofstream(p) << text;
  return p;
}

std::string problem(const std::string& interaction = "none") {
  return R"("problem": {
    "dimension": 1,
    "interaction": {"kind": ")" + interaction + R"("},
    "mu_in": {"kind": "gaussian", "mean": [0.0], "sd": 0.5},
    "mu_fin": {"kind": "gaussian", "mean": [1.0], "sd": 0.5}
  })";
}

}  // namespace

TEST(Cli, ValidateAcceptsGoodConfig) {
  const fs::path dir = scratch("validate");
  const fs::path cfg = write_config(dir, "c.json", "{\"config_version\": 1, " + problem() +
                                                       ", \"run\": {\"mode\": \"solve\", \"k\": 1}}");
  Result r = cli("validate " + cfg.string(), dir);
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("ok"), std::string::npos);
}

TEST(Cli, MalformedConfigExitsTwoWithLineAndKey) {
  const fs::path dir = scratch("malformed");
  const fs::path cfg = write_config(dir, "c.json", "{\"config_version\": 1,\n" + problem() +
                                                       ",\n\"run\": {\"mode\": \"solve\",\n \"particles\": \"lots\"}}");
  Result r = cli("run " + cfg.string() + " --out " + (dir / "o").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("line 9"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("run.particles"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "o"));
  const fs::path broken = write_config(dir, "b.json", "{\"config_version\": 1,\n\"problem\": [}");
  r = cli("validate " + broken.string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("line 2"), std::string::npos) << r.err;
  EXPECT_EQ(cli("run " + (dir / "nope.json").string(), dir).code, 2);
  EXPECT_EQ(cli("frobnicate", dir).code, 2);
}

TEST(Cli, TrivialSolve) {
  const fs::path dir = scratch("trivial");
  const fs::path cfg = write_config(dir, "c.json", "{\"config_version\": 1, " + problem() +
                                                       ", \"run\": {\"mode\": \"solve\", \"k\": 0, \"particles\": 100, \"steps\": 10}}");
  Result r = cli("run " + cfg.string() + " --out " + (dir / "o").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  mfsb::Table v = mfsb::Table::read(dir / "o" / "value.csv");
  EXPECT_EQ(v.number(0, "value"), 0.0);
  EXPECT_EQ(v.text(0, "status"), "ok");
  EXPECT_EQ(mfsb::Table::read(dir / "o" / "solution_X.csv").rows(), 11u * 100u);
  EXPECT_TRUE(fs::exists(dir / "o" / "solution_Y.csv"));
  const mfsb::Json summary = mfsb::read_json(dir / "o" / "summary.json");
  EXPECT_TRUE(summary["pass"].get<bool>());
  const mfsb::Json manifest = mfsb::read_json(dir / "o" / "manifest.json");
  EXPECT_EQ(manifest["mode"], "solve");
  EXPECT_EQ(manifest["config"]["run"]["k"], 0);
  EXPECT_FALSE(fs::exists(dir / "o" / ".mfsb.lock"));
}

TEST(Cli, ChartsOnEmptyDirectoryWarn) {
  const fs::path dir = scratch("charts_empty");
  fs::create_directories(dir / "a");
  Result r = cli("charts " + (dir / "a").string(), dir);
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("0 chart(s), 3 warning(s)"), std::string::npos) << r.out;
}

TEST(Cli, OracleCompareWritesTablesAndCharts) {
  const fs::path dir = scratch("oracle");
  const fs::path cfg = write_config(
      dir, "c.json",
      "{\"config_version\": 1, " + problem() +
          R"(, "run": {"mode": "oracle_compare", "k": [1, 4], "particles": 300, "steps": 10, "warn_only": true,
             "oracle": {"grid_points": 121}}, "output": {"emit_charts": true}})");
  Result r = cli("run " + cfg.string() + " --out " + (dir / "o").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"ladder.csv", "oracle.csv", "marginals.csv", "summary.json", "manifest.json", "value_vs_k.svg",
                        "marginals.svg"})
    EXPECT_TRUE(fs::exists(dir / "o" / f)) << f;
  mfsb::Table o = mfsb::Table::read(dir / "o" / "oracle.csv");
  EXPECT_EQ(o.rows(), 11u);
  mfsb::Table lad = mfsb::Table::read(dir / "o" / "ladder.csv");
  EXPECT_EQ(lad.rows(), 2u);
  EXPECT_TRUE(std::isfinite(lad.number(0, "oracle_value")));
  const mfsb::Json s = mfsb::read_json(dir / "o" / "summary.json");
  EXPECT_TRUE(s["oracle"].contains("max_node_w2"));
  EXPECT_TRUE(s["warn_only"].get<bool>());
}

TEST(Cli, RerunsReproduceCsvsBitExactly) {
  const fs::path dir = scratch("determinism");
  const fs::path cfg = write_config(
      dir, "c.json",
      "{\"config_version\": 1, " + problem("pairwise_quadratic") +
          R"(, "penalty": {"kind": "convex_dual", "direction": [-1], "offset": -1, "smoothing": 0.1},
             "run": {"mode": "chaos_sweep", "k": 4, "N": [20, 40], "steps": 10, "replications": 2, "warn_only": true}})");
  ASSERT_EQ(cli("run " + cfg.string() + " --out " + (dir / "a").string(), dir).code, 0);
  ASSERT_EQ(cli("run " + cfg.string() + " --out " + (dir / "b").string() + " --threads 2", dir).code, 0);
  int compared = 0;
  for (const auto& e : fs::directory_iterator(dir / "a"))
    if (e.path().extension() == ".csv") {
      EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / e.path().filename())) << e.path();
      ++compared;
    }
  EXPECT_GE(compared, 1);
  ASSERT_EQ(cli("run " + cfg.string() + " --out " + (dir / "c").string() + " --seed 99", dir).code, 0);
  EXPECT_NE(slurp(dir / "a" / "chaos.csv"), slurp(dir / "c" / "chaos.csv"));
}

TEST(Cli, LockedOrUnwritableOutputExitsFour) {
  const fs::path dir = scratch("lock");
  const fs::path cfg = write_config(dir, "c.json", "{\"config_version\": 1, " + problem() +
                                                       ", \"run\": {\"mode\": \"solve\", \"k\": 0, \"particles\": 64, \"steps\": 4}}");
  fs::create_directories(dir / "o");
  std::ofstream(dir / "o" / ".mfsb.lock") << "";
  Result r = cli("run " + cfg.string() + " --out " + (dir / "o").string(), dir);
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("locked"), std::string::npos) << r.err;
  std::ofstream(dir / "file") << "x";
  EXPECT_EQ(cli("run " + cfg.string() + " --out " + (dir / "file" / "sub").string(), dir).code, 4);
}

TEST(Cli, ViolationsExitOneUnlessWarnOnly) {
  const fs::path dir = scratch("violations");
  // an iteration cap of one leaves the solve unconverged
  const std::string text = "{\"config_version\": 1, " + problem() +
                           R"(, "run": {"mode": "solve", "k": 4, "particles": 64, "steps": 4,
                              "solver": {"max_picard": 1, "max_outer": 1, "fallback_damping": 0}}})";
  const fs::path cfg = write_config(dir, "c.json", text);
  Result r = cli("run " + cfg.string() + " --out " + (dir / "a").string(), dir);
  EXPECT_EQ(r.code, 1) << r.err;
  const mfsb::Json s = mfsb::read_json(dir / "a" / "summary.json");
  EXPECT_EQ(s["failed_checks"][0], "solve.pass_converged");
  EXPECT_EQ(cli("run " + cfg.string() + " --out " + (dir / "b").string() + " --warn-only", dir).code, 0);
}
