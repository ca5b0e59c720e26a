#include "lfdet/experiment.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lfdet/metrics.hpp"

using namespace lfdet;
namespace fs = std::filesystem;

namespace {

// Desk scale would drown the unit suite; everything here runs a toy grid.
const char* kTinyManifest = R"({
  "name": "tiny",
  "output_dir": "OUTDIR",
  "seeds": [7, 8],
  "config": {
    "layers": 2, "query_dim": 8, "classes": 2, "queries": 4,
    "grid": 16, "channels": 6, "train_scenes": 3, "val_scenes": 2,
    "epochs": 3, "learning_rate": 0.002, "strategy": "csa", "scheme": "lft",
    "max_objects": 2, "clutter_blobs": 1
  },
  "ablate": {"strategies": ["baseline", "csa"], "schemes": ["lfo", "lft"]}
})";

std::string manifest_with_dir(const fs::path& dir) {
  std::string text = kTinyManifest;
  const auto at = text.find("OUTDIR");
  text.replace(at, 6, dir.string());
  return text;
}

fs::path fresh_dir(const char* tag) {
  const fs::path dir = fs::temp_directory_path() / (std::string("lfdet_test_") + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Manifest, ParsesFieldsAndDefaults) {
  const auto m = parse_manifest(manifest_with_dir("somewhere"));
  EXPECT_EQ(m.name, "tiny");
  EXPECT_EQ(m.seeds.size(), 2u);
  EXPECT_EQ(m.config.layers, 2);
  EXPECT_EQ(m.config.strategy, AssignStrategy::CSA);
  EXPECT_EQ(m.config.scheme, RefineScheme::lft());
  EXPECT_EQ(m.grid_strategies.size(), 2u);
  EXPECT_EQ(m.grid_schemes.size(), 2u);

  const auto defaults = parse_manifest(R"({"name":"d","seeds":[1]})");
  EXPECT_EQ(defaults.config.layers, 3);
  EXPECT_EQ(defaults.config.queries, 6);
  EXPECT_EQ(defaults.grid_schemes.size(), 8u);
}

TEST(Manifest, RejectsMalformedInput) {
  EXPECT_THROW(parse_manifest("{"), std::invalid_argument);
  EXPECT_THROW(parse_manifest(R"({"seeds":[1]})"), std::invalid_argument);
  EXPECT_THROW(parse_manifest(R"({"name":"x","seeds":[]})"), std::invalid_argument);
  EXPECT_THROW(parse_manifest(R"({"name":"x","seeds":[1],"config":{"strategy":"zzz"}})"),
               std::invalid_argument);
  EXPECT_THROW(parse_manifest(R"({"name":"x","seeds":[1],"config":{"scheme":"zzz"}})"),
               std::invalid_argument);
  // CSA with queries not divisible by classes fails validation.
  EXPECT_THROW(
      parse_manifest(R"({"name":"x","seeds":[1],"config":{"queries":5,"strategy":"csa"}})"),
      std::invalid_argument);
}

TEST(Manifest, EnvironmentOverridesOutputRoot) {
  const auto m = parse_manifest(manifest_with_dir("manifest_dir"));
  unsetenv("LFDET_OUTPUT_ROOT");
  EXPECT_EQ(resolve_output_root(m), fs::path("manifest_dir"));
  setenv("LFDET_OUTPUT_ROOT", "/tmp/override_root", 1);
  EXPECT_EQ(resolve_output_root(m), fs::path("/tmp/override_root"));
  unsetenv("LFDET_OUTPUT_ROOT");
}

TEST(RunSeed, ArtifactsAreWellFormedAndDeterministic) {
  auto m = parse_manifest(manifest_with_dir("unused"));
  TrainConfig config = m.config;
  config.seed = 7;
  const auto a = run_seed(config);
  const auto b = run_seed(config);
  EXPECT_EQ(a.metrics_csv, b.metrics_csv);
  EXPECT_EQ(a.assignments_jsonl, b.assignments_jsonl);
  EXPECT_EQ(a.queries_csv, b.queries_csv);
  EXPECT_EQ(a.layer_ap_csv, b.layer_ap_csv);

  // Header + one row per epoch; the first row has empty IS/FIS cells.
  std::istringstream metrics(a.metrics_csv);
  std::string line;
  std::getline(metrics, line);
  EXPECT_EQ(line, "epoch,loss,AP,AP50,IS,FIS");
  std::getline(metrics, line);
  EXPECT_TRUE(line.ends_with(",,"));

  // The assignment log parses back and covers epochs x images.
  std::istringstream logs(a.assignments_jsonl);
  const auto parsed = load_assignment_log(logs);
  EXPECT_EQ(parsed.size(), 3u);
  EXPECT_EQ(parsed.at(0).size(), 3u);

  std::istringstream queries(a.queries_csv);
  std::getline(queries, line);
  EXPECT_EQ(line, "image_id,query_id,group,q0,q1,q2,q3,q4,q5,q6,q7");
}

TEST(TrainManifest, WritesPerSeedDirectories) {
  const fs::path dir = fresh_dir("train");
  const auto m = parse_manifest(manifest_with_dir(dir));
  const auto result = run_train_manifest(m);
  ASSERT_EQ(result.seed_dirs.size(), 2u);
  EXPECT_TRUE(fs::exists(dir / "tiny" / "seed7" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(dir / "tiny" / "seed8" / "assignments.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "tiny" / "seed7" / "queries.csv"));
  EXPECT_TRUE(fs::exists(dir / "tiny" / "seed7" / "layer_ap.csv"));
  fs::remove_all(dir);
}

TEST(Ablate, SummaryDerivableFromPerSeedFiles) {
  const fs::path dir = fresh_dir("ablate");
  const auto m = parse_manifest(manifest_with_dir(dir));
  const auto result = run_ablate_manifest(m);
  EXPECT_EQ(result.cells.size(), 4u);  // 2 strategies x 2 schemes
  EXPECT_TRUE(fs::exists(result.summary_path));
  EXPECT_EQ(slurp(result.summary_path), result.summary_csv);

  // Independent re-aggregation: medians in the summary must equal medians
  // recomputed from the written per-seed files.
  std::istringstream summary(result.summary_csv);
  std::string header, line;
  std::getline(summary, header);
  EXPECT_EQ(header,
            "strategy,scheme,status,seeds,ap_median,ap_iqr,ap50_median,fis_final_median,"
            "is_final_median,ap_layer_1,ap_layer_2");
  while (std::getline(summary, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    ASSERT_GE(cells.size(), 10u);
    const std::string& strategy = cells[0];
    const std::string& scheme = cells[1];
    EXPECT_EQ(cells[2], "ok");

    std::vector<double> final_ap, final_fis, layer1_ap;
    for (const auto seed : m.seeds) {
      const fs::path seed_dir =
          dir / "tiny" / (strategy + "-" + scheme) / ("seed" + std::to_string(seed));
      // Final AP and FIS from the last metrics row.
      std::istringstream metrics(slurp(seed_dir / "metrics.csv"));
      std::string row, last;
      std::getline(metrics, row);  // header
      while (std::getline(metrics, row)) last = row;
      std::vector<std::string> mcells;
      std::istringstream ms(last);
      while (std::getline(ms, cell, ',')) mcells.push_back(cell);
      final_ap.push_back(std::stod(mcells[2]));
      final_fis.push_back(mcells.size() > 5 && !mcells[5].empty() ? std::stod(mcells[5]) : 0.0);
      // Layer-1 AP from layer_ap.csv.
      std::istringstream layers(slurp(seed_dir / "layer_ap.csv"));
      std::getline(layers, row);  // header
      std::getline(layers, row);
      std::vector<std::string> lcells;
      std::istringstream lss(row);
      while (std::getline(lss, cell, ',')) lcells.push_back(cell);
      layer1_ap.push_back(std::stod(lcells[1]));
    }
    EXPECT_EQ(cells[4], fmt_double(median(final_ap)));
    EXPECT_EQ(cells[7], fmt_double(median(final_fis)));
    EXPECT_EQ(cells[9], fmt_double(median(layer1_ap)));
  }
  fs::remove_all(dir);
}

TEST(Ablate, SingleCellGridEqualsTrainOutput) {
  const fs::path dir_a = fresh_dir("singlecell_a");
  const fs::path dir_b = fresh_dir("singlecell_b");
  auto text = manifest_with_dir(dir_a);
  const auto replace = [&](const std::string& from, const std::string& to) {
    const auto at = text.find(from);
    ASSERT_NE(at, std::string::npos);
    text.replace(at, from.size(), to);
  };
  replace(R"("strategies": ["baseline", "csa"])", R"("strategies": ["csa"])");
  replace(R"("schemes": ["lfo", "lft"])", R"("schemes": ["lft"])");
  const auto grid = parse_manifest(text);
  run_ablate_manifest(grid);

  auto train_manifest = parse_manifest(manifest_with_dir(dir_b));
  run_train_manifest(train_manifest);

  for (const char* name : {"metrics.csv", "assignments.jsonl", "queries.csv", "layer_ap.csv"}) {
    EXPECT_EQ(slurp(dir_a / "tiny" / "csa-lft" / "seed7" / name),
              slurp(dir_b / "tiny" / "seed7" / name))
        << name;
  }
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST(Gradflow, CsvShapes) {
  const auto lfo = gradflow_csv(RefineScheme::lfo(), 3);
  EXPECT_TRUE(lfo.empirical_matches_symbolic);
  std::istringstream is(lfo.csv);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "l,sym_n1,sym_n2,sym_n3,emp_n1,emp_n2,emp_n3");
  std::getline(is, line);
  EXPECT_EQ(line, "1,1,0,0,1,0,0");  // identity pattern, symbolic and empirical

  const auto count_symbolic_ones = [](const std::string& csv, int layers) {
    std::istringstream rows(csv);
    std::string row, cell;
    std::getline(rows, row);  // header
    int ones = 0;
    while (std::getline(rows, row)) {
      std::istringstream rs(row);
      std::getline(rs, cell, ',');  // layer label
      for (int k = 0; k < layers && std::getline(rs, cell, ','); ++k) {
        if (cell == "1") ++ones;
      }
    }
    return ones;
  };
  EXPECT_EQ(count_symbolic_ones(gradflow_csv(RefineScheme::lft(), 3).csv, 3), 5);
  const auto lfd = gradflow_csv(RefineScheme::lfd(LfdAggregate::Sum, LfdWeighting::Equal), 6);
  EXPECT_TRUE(lfd.empirical_matches_symbolic);
  EXPECT_EQ(count_symbolic_ones(lfd.csv, 6), 21);  // upper triangle of 6
}

TEST(AnalyzeLogs, ReproducesMetricOracle) {
  std::istringstream logs(
      R"({"epoch":0,"image_id":0,"V":[0,1,2,-1],"T":[7,7,5,-1]})"
      "\n"
      R"({"epoch":0,"image_id":1,"V":[0,1],"T":[3,3]})"
      "\n"
      R"({"epoch":1,"image_id":0,"V":[1,0,2,-1],"T":[7,7,5,-1]})"
      "\n"
      R"({"epoch":1,"image_id":1,"V":[0,1],"T":[3,3]})"
      "\n");
  const std::string csv = analyze_logs_csv(logs);
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "epoch,IS,FCS,FOS,FIS");
  std::getline(is, line);
  // Image 0: FIS 0.25, IS 0.5; image 1: all zero. Dataset means halve them.
  EXPECT_EQ(line, "1,0.25,0,1,0.125");
}

TEST(AnalyzeLogs, IdenticalEpochsAreAllZero) {
  std::istringstream logs(
      R"({"epoch":3,"image_id":0,"V":[0,-1],"T":[1,-1]})"
      "\n"
      R"({"epoch":4,"image_id":0,"V":[0,-1],"T":[1,-1]})"
      "\n");
  const std::string csv = analyze_logs_csv(logs);
  EXPECT_NE(csv.find("4,0,0,0,0"), std::string::npos);
}

TEST(FmtDouble, StableFormatting) {
  EXPECT_EQ(fmt_double(0.25), "0.25");
  EXPECT_EQ(fmt_double(1.0), "1");
  EXPECT_EQ(fmt_double(1.0 / 3.0), "0.3333333333333333");
  EXPECT_EQ(std::stod(fmt_double(0.1 + 0.2)), 0.1 + 0.2);
}

TEST(MedianIqr, NearestRankDefinitions) {
  EXPECT_DOUBLE_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_DOUBLE_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_DOUBLE_EQ(iqr({5.0, 1.0, 3.0, 2.0, 4.0}), 2.0);  // sorted[3] - sorted[1]
  EXPECT_THROW(median({}), std::invalid_argument);
}
