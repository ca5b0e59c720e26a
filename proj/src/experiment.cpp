#include "lfdet/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "lfdet/metrics.hpp"

namespace lfdet {

namespace fs = std::filesystem;

std::string fmt_double(double v) {
  // Shortest exactly-roundtripping form, so aggregates recomputed from the
  // written CSVs match the in-memory values bit for bit.
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

namespace {

CostWeights parse_weights(const nlohmann::json& j, CostWeights defaults) {
  CostWeights w = defaults;
  if (j.contains("cls")) w.lambda_cls = j.at("cls").get<double>();
  if (j.contains("l1")) w.lambda_l1 = j.at("l1").get<double>();
  if (j.contains("giou")) w.lambda_giou = j.at("giou").get<double>();
  if (j.contains("focal")) w.focal_cls = j.at("focal").get<bool>();
  return w;
}

TrainConfig parse_config(const nlohmann::json& j, TrainConfig config) {
  const auto get_int = [&](const char* key, int& out) {
    if (j.contains(key)) out = j.at(key).get<int>();
  };
  get_int("layers", config.layers);
  get_int("query_dim", config.query_dim);
  get_int("classes", config.classes);
  get_int("queries", config.queries);
  get_int("grid", config.grid);
  get_int("channels", config.channels);
  get_int("train_scenes", config.train_scenes);
  get_int("val_scenes", config.val_scenes);
  get_int("epochs", config.epochs);
  get_int("max_objects", config.max_objects);
  get_int("clutter_blobs", config.clutter_blobs);
  if (j.contains("learning_rate")) config.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("seed")) config.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("strategy")) {
    const auto s = parse_strategy(j.at("strategy").get<std::string>());
    if (!s) throw std::invalid_argument("manifest: unknown strategy");
    config.strategy = *s;
  }
  if (j.contains("scheme")) {
    const auto s = RefineScheme::parse(j.at("scheme").get<std::string>());
    if (!s) throw std::invalid_argument("manifest: unknown scheme");
    config.scheme = *s;
  }
  if (j.contains("cost_weights")) {
    config.cost_weights = parse_weights(j.at("cost_weights"), config.cost_weights);
  }
  if (j.contains("loss_weights")) {
    config.loss_weights = parse_weights(j.at("loss_weights"), config.loss_weights);
  }
  return config;
}

}  // namespace

ExperimentManifest parse_manifest(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("manifest: invalid JSON: ") + e.what());
  }
  ExperimentManifest m;
  if (!j.contains("name") || !j.at("name").is_string()) {
    throw std::invalid_argument("manifest: missing name");
  }
  m.name = j.at("name").get<std::string>();
  if (j.contains("output_dir")) m.output_dir = j.at("output_dir").get<std::string>();
  if (!j.contains("seeds") || !j.at("seeds").is_array() || j.at("seeds").empty()) {
    throw std::invalid_argument("manifest: seeds must be a nonempty array");
  }
  for (const auto& s : j.at("seeds")) m.seeds.push_back(s.get<std::uint64_t>());
  if (j.contains("config")) m.config = parse_config(j.at("config"), m.config);
  m.config.validate();

  if (j.contains("ablate")) {
    const auto& a = j.at("ablate");
    if (a.contains("strategies")) {
      for (const auto& s : a.at("strategies")) {
        const auto parsed = parse_strategy(s.get<std::string>());
        if (!parsed) throw std::invalid_argument("manifest: unknown strategy in ablate grid");
        m.grid_strategies.push_back(*parsed);
      }
    }
    if (a.contains("schemes")) {
      for (const auto& s : a.at("schemes")) {
        const auto parsed = RefineScheme::parse(s.get<std::string>());
        if (!parsed) throw std::invalid_argument("manifest: unknown scheme in ablate grid");
        m.grid_schemes.push_back(*parsed);
      }
    }
  }
  if (m.grid_strategies.empty()) {
    m.grid_strategies = {AssignStrategy::Baseline, AssignStrategy::CSA};
  }
  if (m.grid_schemes.empty()) m.grid_schemes = RefineScheme::all();
  return m;
}

ExperimentManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("manifest: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str());
}

fs::path resolve_output_root(const ExperimentManifest& manifest) {
  if (const char* env = std::getenv("LFDET_OUTPUT_ROOT"); env && *env) return fs::path(env);
  return fs::path(manifest.output_dir);
}

SeedRunOutput run_seed(const TrainConfig& config) {
  SeedRunOutput out;
  const auto train_scenes = make_scenes(config, config.train_scenes, 1);
  const auto val_scenes = make_scenes(config, config.val_scenes, 2);
  out.result = train(config, train_scenes, val_scenes);
  out.eval = evaluate(out.result.model, val_scenes);

  std::ostringstream metrics;
  metrics << "epoch,loss,AP,AP50,IS,FIS\n";
  for (const auto& row : out.result.rows) {
    metrics << row.epoch << ',' << fmt_double(row.loss) << ',' << fmt_double(row.ap) << ','
            << fmt_double(row.ap50) << ',' << (row.is ? fmt_double(*row.is) : "") << ','
            << (row.fis ? fmt_double(*row.fis) : "") << '\n';
  }
  out.metrics_csv = metrics.str();

  std::ostringstream logs;
  for (const auto& log : out.result.epoch_logs) {
    for (const auto& [image_id, rec] : log) logs << to_json_line(rec) << '\n';
  }
  out.assignments_jsonl = logs.str();

  std::ostringstream queries;
  queries << "image_id,query_id,group";
  for (int d = 0; d < config.query_dim; ++d) queries << ",q" << d;
  queries << '\n';
  for (const auto& row : out.eval.query_rows) {
    queries << row.image_id << ',' << row.query_id << ',' << row.group;
    for (int d = 0; d < row.vec.size(); ++d) queries << ',' << fmt_double(row.vec(d));
    queries << '\n';
  }
  out.queries_csv = queries.str();

  std::ostringstream layer_ap;
  layer_ap << "layer,AP,AP50,AP75\n";
  for (std::size_t l = 0; l < out.eval.per_layer.size(); ++l) {
    const auto& s = out.eval.per_layer[l];
    layer_ap << (l + 1) << ',' << fmt_double(s.ap) << ',' << fmt_double(s.ap50) << ','
             << fmt_double(s.ap75) << '\n';
  }
  out.layer_ap_csv = layer_ap.str();
  return out;
}

void write_seed_run(const fs::path& dir, const SeedRunOutput& run) {
  fs::create_directories(dir);
  const auto write = [&](const char* name, const std::string& content) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
    f << content;
  };
  write("metrics.csv", run.metrics_csv);
  write("assignments.jsonl", run.assignments_jsonl);
  write("queries.csv", run.queries_csv);
  write("layer_ap.csv", run.layer_ap_csv);
}

TrainCommandResult run_train_manifest(const ExperimentManifest& manifest) {
  const fs::path root = resolve_output_root(manifest) / manifest.name;
  TrainCommandResult out;
  for (const std::uint64_t seed : manifest.seeds) {
    TrainConfig config = manifest.config;
    config.seed = seed;
    const SeedRunOutput run = run_seed(config);
    const fs::path dir = root / ("seed" + std::to_string(seed));
    write_seed_run(dir, run);
    out.seed_dirs.push_back(dir);
    out.final_ap.push_back(run.eval.final.ap);
  }
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median: empty");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double iqr(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("iqr: empty");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return values[(3 * (n - 1)) / 4] - values[(n - 1) / 4];
}

AblateResult run_ablate_manifest(const ExperimentManifest& manifest) {
  const fs::path root = resolve_output_root(manifest) / manifest.name;
  AblateResult out;

  std::ostringstream summary;
  summary << "strategy,scheme,status,seeds,ap_median,ap_iqr,ap50_median,fis_final_median,"
             "is_final_median";
  for (int l = 1; l <= manifest.config.layers; ++l) summary << ",ap_layer_" << l;
  summary << '\n';

  for (const AssignStrategy strategy : manifest.grid_strategies) {
    for (const RefineScheme& scheme : manifest.grid_schemes) {
      CellSummary cell;
      cell.strategy = strategy;
      cell.scheme = scheme;
      const std::string cell_name = to_string(strategy) + "-" + scheme.name();

      for (const std::uint64_t seed : manifest.seeds) {
        TrainConfig config = manifest.config;
        config.strategy = strategy;
        config.scheme = scheme;
        config.seed = seed;
        if (strategy == AssignStrategy::CSA && config.queries % config.classes != 0) {
          throw std::invalid_argument("ablate: queries not divisible by classes for CSA cells");
        }
        try {
          const SeedRunOutput run = run_seed(config);
          write_seed_run(root / cell_name / ("seed" + std::to_string(seed)), run);
          cell.final_ap.push_back(run.eval.final.ap);
          cell.final_ap50.push_back(run.eval.final.ap50);
          const auto& last = run.result.rows.back();
          cell.final_fis.push_back(last.fis.value_or(0.0));
          cell.final_is.push_back(last.is.value_or(0.0));
          std::vector<double> per_layer;
          for (const auto& s : run.eval.per_layer) per_layer.push_back(s.ap);
          cell.layer_ap.push_back(std::move(per_layer));
        } catch (const std::runtime_error&) {
          cell.diverged = true;
        }
      }

      summary << to_string(strategy) << ',' << scheme.name() << ','
              << (cell.diverged ? "diverged" : "ok") << ',' << cell.final_ap.size();
      if (cell.final_ap.empty()) {
        summary << ",,,,,";
        for (int l = 0; l < manifest.config.layers; ++l) summary << ',';
      } else {
        summary << ',' << fmt_double(median(cell.final_ap)) << ','
                << fmt_double(iqr(cell.final_ap)) << ',' << fmt_double(median(cell.final_ap50))
                << ',' << fmt_double(median(cell.final_fis)) << ','
                << fmt_double(median(cell.final_is));
        for (int l = 0; l < manifest.config.layers; ++l) {
          std::vector<double> ap_l;
          for (const auto& per_seed : cell.layer_ap) {
            ap_l.push_back(per_seed[static_cast<std::size_t>(l)]);
          }
          summary << ',' << fmt_double(median(ap_l));
        }
      }
      summary << '\n';
      out.cells.push_back(std::move(cell));
    }
  }

  out.summary_csv = summary.str();
  fs::create_directories(root);
  out.summary_path = root / "summary.csv";
  std::ofstream f(out.summary_path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + out.summary_path.string());
  f << out.summary_csv;
  return out;
}

GradflowOutput gradflow_csv(const RefineScheme& scheme, int layers) {
  const FlowCheck check = check_gradient_flow(scheme, layers, 0);
  constexpr double kNonzeroFloor = 1e-8;

  GradflowOutput out;
  out.empirical_matches_symbolic = check.pattern_matches;
  std::ostringstream os;
  os << "l";
  for (int n = 1; n <= layers; ++n) os << ",sym_n" << n;
  for (int n = 1; n <= layers; ++n) os << ",emp_n" << n;
  os << '\n';
  for (int l = 1; l <= layers; ++l) {
    os << l;
    for (int n = 1; n <= layers; ++n) os << ',' << check.symbolic.reach(l - 1, n - 1);
    for (int n = 1; n <= layers; ++n) {
      const bool nonzero = check.tape_mag(l - 1, n - 1) > kNonzeroFloor &&
                           check.fd_mag(l - 1, n - 1) > kNonzeroFloor;
      os << ',' << (nonzero ? 1 : 0);
    }
    os << '\n';
  }
  out.csv = os.str();
  return out;
}

std::string analyze_logs_csv(std::istream& log_stream) {
  const std::map<int, EpochLog> logs = load_assignment_log(log_stream);
  std::ostringstream os;
  os << "epoch,IS,FCS,FOS,FIS\n";
  const EpochLog* prev = nullptr;
  for (const auto& [epoch, log] : logs) {
    if (prev) {
      const StabilityRow row = dataset_stability(log, *prev);
      os << epoch << ',' << fmt_double(row.is) << ',' << fmt_double(row.fcs) << ','
         << fmt_double(row.fos) << ',' << fmt_double(row.fis) << '\n';
    }
    prev = &log;
  }
  return os.str();
}

}  // namespace lfdet
