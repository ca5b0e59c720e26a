#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "lfdet/harness.hpp"
#include "lfdet/refinement.hpp"

namespace lfdet {

/// Fixed-format double used in every CSV so reruns are byte-identical.
std::string fmt_double(double v);

struct ExperimentManifest {
  std::string name;
  std::string output_dir = "out";
  std::vector<std::uint64_t> seeds;
  TrainConfig config;
  std::vector<AssignStrategy> grid_strategies;  // ablate cells; defaults to both
  std::vector<RefineScheme> grid_schemes;       // defaults to all eight
};

/// Parses the JSON manifest; throws std::invalid_argument on malformed or
/// missing fields.
ExperimentManifest load_manifest(const std::filesystem::path& path);
ExperimentManifest parse_manifest(const std::string& json_text);

/// Output root: LFDET_OUTPUT_ROOT when set, else the manifest's output_dir.
std::filesystem::path resolve_output_root(const ExperimentManifest& manifest);

/// One full training run plus every artifact file's exact bytes.
struct SeedRunOutput {
  TrainResult result;
  EvalResult eval;
  std::string metrics_csv;        // epoch,loss,AP,AP50,IS,FIS
  std::string assignments_jsonl;  // one record per line
  std::string queries_csv;        // image_id,query_id,group,q0..q{D-1}
  std::string layer_ap_csv;       // layer,AP,AP50,AP75
};

SeedRunOutput run_seed(const TrainConfig& config);

/// Writes the four artifact files into `dir` (created if missing).
void write_seed_run(const std::filesystem::path& dir, const SeedRunOutput& run);

/// cmd_train: one cell (the manifest's config) over every seed, written to
/// <root>/<name>/seed<S>/.
struct TrainCommandResult {
  std::vector<std::filesystem::path> seed_dirs;
  std::vector<double> final_ap;  // one per seed
};
TrainCommandResult run_train_manifest(const ExperimentManifest& manifest);

struct CellSummary {
  AssignStrategy strategy = AssignStrategy::Baseline;
  RefineScheme scheme;
  bool diverged = false;
  std::vector<double> final_ap;       // per completed seed
  std::vector<double> final_ap50;
  std::vector<double> final_fis;      // final-epoch dataset FIS
  std::vector<double> final_is;
  std::vector<std::vector<double>> layer_ap;  // per seed, per layer
};

struct AblateResult {
  std::vector<CellSummary> cells;
  std::string summary_csv;
  std::filesystem::path summary_path;
};

/// cmd_ablate: the strategy x scheme grid over the seed list. A diverging
/// cell is recorded as failed and the run continues.
AblateResult run_ablate_manifest(const ExperimentManifest& manifest);

double median(std::vector<double> values);
double iqr(std::vector<double> values);

/// cmd_gradflow: symbolic columns plus empirically verified columns (tape
/// and finite differences agreeing on the nonzero pattern).
struct GradflowOutput {
  std::string csv;
  bool empirical_matches_symbolic = false;
};
GradflowOutput gradflow_csv(const RefineScheme& scheme, int layers);

/// cmd_analyze_logs: per-epoch dataset IS/FCS/FOS/FIS for consecutive
/// epochs of an assignment log.
std::string analyze_logs_csv(std::istream& log_stream);

}  // namespace lfdet
