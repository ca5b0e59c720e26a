#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>

#include "lfdet/experiment.hpp"
#include "lfdet/selfcheck.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitPropertyFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDivergence = 3;

// Deliberately broken matcher used to exercise the selftest failure path.
lfdet::Assignment greedy_matcher(const Eigen::MatrixXd& cost) {
  lfdet::Assignment out;
  std::vector<char> used(static_cast<std::size_t>(cost.cols()), 0);
  for (int r = 0; r < cost.rows() && static_cast<int>(out.pairs.size()) <
                                         std::min(cost.rows(), cost.cols());
       ++r) {
    int best = -1;
    for (int c = 0; c < cost.cols(); ++c) {
      if (!used[static_cast<std::size_t>(c)] && (best < 0 || cost(r, c) < cost(r, best))) best = c;
    }
    if (best >= 0) {
      used[static_cast<std::size_t>(best)] = 1;
      out.pairs.emplace_back(r, best);
      out.total_cost += cost(r, best);
    }
  }
  return out;
}

int cmd_selftest(const std::string& inject_fault) {
  lfdet::selfcheck::Matcher matcher = [](const Eigen::MatrixXd& m) { return lfdet::hungarian(m); };
  if (inject_fault == "hungarian_optimality") {
    matcher = greedy_matcher;
  } else if (!inject_fault.empty()) {
    std::cerr << "unknown fault name: " << inject_fault << "\n";
    return kExitUsage;
  }

  const auto results = lfdet::selfcheck::run_all(matcher);
  bool all_passed = true;
  for (const auto& r : results) {
    std::printf("[%s] %-24s %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    all_passed = all_passed && r.passed;
  }
  if (!all_passed) {
    for (const auto& r : results) {
      if (!r.passed) std::fprintf(stderr, "failing property: %s\n", r.name.c_str());
    }
    return kExitPropertyFailure;
  }
  return kExitOk;
}

int cmd_gradflow(const std::string& scheme_name, int layers) {
  const auto scheme = lfdet::RefineScheme::parse(scheme_name);
  if (!scheme) {
    std::cerr << "unknown scheme: " << scheme_name << "\n";
    return kExitUsage;
  }
  if (layers < 1) {
    std::cerr << "--layers must be >= 1\n";
    return kExitUsage;
  }
  const auto out = lfdet::gradflow_csv(*scheme, layers);
  std::cout << out.csv;
  if (!out.empirical_matches_symbolic) {
    std::cerr << "failing property: gradient_flow_pattern\n";
    return kExitPropertyFailure;
  }
  return kExitOk;
}

int cmd_train(const std::string& manifest_path) {
  const auto manifest = lfdet::load_manifest(manifest_path);
  const auto result = lfdet::run_train_manifest(manifest);
  for (std::size_t i = 0; i < result.seed_dirs.size(); ++i) {
    std::printf("seed %llu: final AP %s -> %s\n",
                static_cast<unsigned long long>(manifest.seeds[i]),
                lfdet::fmt_double(result.final_ap[i]).c_str(), result.seed_dirs[i].c_str());
  }
  return kExitOk;
}

int cmd_ablate(const std::string& grid_path) {
  const auto manifest = lfdet::load_manifest(grid_path);
  const auto result = lfdet::run_ablate_manifest(manifest);
  std::cout << result.summary_csv;
  std::printf("summary written to %s\n", result.summary_path.c_str());
  return kExitOk;
}

int cmd_analyze_logs(const std::string& logs_path, const std::string& out_path) {
  std::ifstream in(logs_path);
  if (!in) {
    std::cerr << "cannot open log file: " << logs_path << "\n";
    return kExitUsage;
  }
  const std::string csv = lfdet::analyze_logs_csv(in);
  if (out_path.empty()) {
    std::cout << csv;
  } else {
    std::ofstream out(out_path, std::ios::binary);
    if (!out) {
      std::cerr << "cannot write " << out_path << "\n";
      return kExitUsage;
    }
    out << csv;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Category-specific assignment and look-forward box refinement lab"};
  app.require_subcommand(1);

  std::string inject_fault;
  auto* selftest = app.add_subcommand("selftest", "run the built-in property suites");
  selftest->add_option("--inject-fault", inject_fault,
                       "swap in a broken implementation (testing the reporting path)");

  std::string scheme_name;
  int layers = 6;
  auto* gradflow = app.add_subcommand("gradflow", "emit the gradient-flow matrix as CSV");
  gradflow->add_option("--scheme", scheme_name, "lfo, lft, or lfd-<sum|avg>-<equal|amplify|diminish>")
      ->required();
  gradflow->add_option("--layers", layers, "decoder layer count");

  std::string train_manifest;
  auto* train = app.add_subcommand("train", "train per the manifest, one run per seed");
  train->add_option("--manifest", train_manifest, "JSON manifest path")->required();

  std::string grid_manifest;
  auto* ablate = app.add_subcommand("ablate", "run the strategy x scheme grid");
  ablate->add_option("--grid", grid_manifest, "JSON manifest path (ablate section optional)")
      ->required();

  std::string logs_path, out_path;
  auto* analyze = app.add_subcommand("analyze-logs", "per-epoch IS/FIS from an assignment log");
  analyze->add_option("--logs", logs_path, "assignment log (JSON lines)")->required();
  analyze->add_option("--out", out_path, "output CSV path (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (selftest->parsed()) return cmd_selftest(inject_fault);
    if (gradflow->parsed()) return cmd_gradflow(scheme_name, layers);
    if (train->parsed()) return cmd_train(train_manifest);
    if (ablate->parsed()) return cmd_ablate(grid_manifest);
    if (analyze->parsed()) return cmd_analyze_logs(logs_path, out_path);
  } catch (const std::runtime_error& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitPropertyFailure;
  }
  return kExitUsage;
}
