#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

// The built binary's path arrives through the environment (set by CMake).
std::string cli_path() {
  const char* p = std::getenv("LFDET_BIN");
  return p ? p : "";
}

struct CommandResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

CommandResult run(const std::string& args) {
  const std::string cmd = cli_path() + " " + args + " 2>&1";
  std::array<char, 4096> buf{};
  std::string output;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return {};
  while (std::fgets(buf.data(), buf.size(), pipe)) output += buf.data();
  const int status = pclose(pipe);
  return {WEXITSTATUS(status), output};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write_tiny_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  std::ofstream f(path);
  f << R"({
  "name": "cli_check",
  "output_dir": ")" << (dir / "out").string() << R"(",
  "seeds": [3],
  "config": {
    "layers": 2, "query_dim": 8, "classes": 2, "queries": 4,
    "grid": 16, "channels": 6, "train_scenes": 2, "val_scenes": 1,
    "epochs": 2, "learning_rate": 0.002, "strategy": "csa", "scheme": "lft",
    "max_objects": 2, "clutter_blobs": 1
  },
  "ablate": {"strategies": ["csa"], "schemes": ["lfo"]}
})";
  return path;
}

}  // namespace

TEST(Cli, GradflowIdentityPattern) {
  ASSERT_FALSE(cli_path().empty()) << "LFDET_BIN not set";
  const auto r = run("gradflow --scheme lfo --layers 3");
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_NE(r.output.find("l,sym_n1,sym_n2,sym_n3,emp_n1,emp_n2,emp_n3"), std::string::npos);
  EXPECT_NE(r.output.find("1,1,0,0,1,0,0"), std::string::npos);
  EXPECT_NE(r.output.find("3,0,0,1,0,0,1"), std::string::npos);
}

TEST(Cli, GradflowUnknownSchemeIsUsageError) {
  const auto r = run("gradflow --scheme banana --layers 3");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("unknown scheme"), std::string::npos);
}

TEST(Cli, MissingSubcommandIsUsageError) {
  EXPECT_EQ(run("").exit_code, 2);
  EXPECT_EQ(run("train").exit_code, 2);            // --manifest required
  EXPECT_EQ(run("train --manifest /nonexistent.json").exit_code, 2);
}

TEST(Cli, SelftestPassesOnCleanBuild) {
  const auto r = run("selftest");
  EXPECT_EQ(r.exit_code, 0) << r.output;
  for (const char* name :
       {"hungarian_optimality", "gradient_check", "metric_oracles", "refinement_identities"}) {
    EXPECT_NE(r.output.find(name), std::string::npos) << name;
  }
  EXPECT_EQ(r.output.find("FAIL"), std::string::npos);
}

TEST(Cli, SelftestFaultInjectionNamesFailingProperty) {
  const auto r = run("selftest --inject-fault hungarian_optimality");
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.output.find("failing property: hungarian_optimality"), std::string::npos);
  EXPECT_EQ(run("selftest --inject-fault bogus").exit_code, 2);
}

TEST(Cli, TrainThenAnalyzeLogsRoundtrip) {
  const fs::path dir = fs::temp_directory_path() / "lfdet_cli_train";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path manifest = write_tiny_manifest(dir);

  const auto r = run("train --manifest " + manifest.string());
  EXPECT_EQ(r.exit_code, 0) << r.output;
  const fs::path seed_dir = dir / "out" / "cli_check" / "seed3";
  ASSERT_TRUE(fs::exists(seed_dir / "metrics.csv"));
  ASSERT_TRUE(fs::exists(seed_dir / "assignments.jsonl"));

  // Byte-identical rerun.
  const std::string metrics_first = slurp(seed_dir / "metrics.csv");
  const auto r2 = run("train --manifest " + manifest.string());
  EXPECT_EQ(r2.exit_code, 0);
  EXPECT_EQ(slurp(seed_dir / "metrics.csv"), metrics_first);

  const auto analyzed = run("analyze-logs --logs " + (seed_dir / "assignments.jsonl").string());
  EXPECT_EQ(analyzed.exit_code, 0) << analyzed.output;
  EXPECT_NE(analyzed.output.find("epoch,IS,FCS,FOS,FIS"), std::string::npos);

  const auto bad = run("analyze-logs --logs " + manifest.string());  // JSON but not a log
  EXPECT_EQ(bad.exit_code, 2);
  EXPECT_NE(bad.output.find("line 1"), std::string::npos);

  // Empty log file errors out.
  const fs::path empty = dir / "empty.jsonl";
  std::ofstream(empty).close();
  EXPECT_EQ(run("analyze-logs --logs " + empty.string()).exit_code, 2);

  fs::remove_all(dir);
}

TEST(Cli, AblateWritesSummary) {
  const fs::path dir = fs::temp_directory_path() / "lfdet_cli_ablate";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path manifest = write_tiny_manifest(dir);

  const auto r = run("ablate --grid " + manifest.string());
  EXPECT_EQ(r.exit_code, 0) << r.output;
  const fs::path summary = dir / "out" / "cli_check" / "summary.csv";
  ASSERT_TRUE(fs::exists(summary));
  const std::string text = slurp(summary);
  EXPECT_NE(text.find("csa,lfo,ok,1,"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, OutputRootEnvironmentOverride) {
  const fs::path dir = fs::temp_directory_path() / "lfdet_cli_env";
  const fs::path redirected = fs::temp_directory_path() / "lfdet_cli_env_redirect";
  fs::remove_all(dir);
  fs::remove_all(redirected);
  fs::create_directories(dir);
  const fs::path manifest = write_tiny_manifest(dir);

  setenv("LFDET_OUTPUT_ROOT", redirected.c_str(), 1);
  const auto r = run("train --manifest " + manifest.string());
  unsetenv("LFDET_OUTPUT_ROOT");
  EXPECT_EQ(r.exit_code, 0) << r.output;
  EXPECT_TRUE(fs::exists(redirected / "cli_check" / "seed3" / "metrics.csv"));
  EXPECT_FALSE(fs::exists(dir / "out" / "cli_check"));
  fs::remove_all(dir);
  fs::remove_all(redirected);
}
