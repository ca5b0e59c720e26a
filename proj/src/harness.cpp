#include "lfdet/harness.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace lfdet {

double Rng::normal() {
  // Box-Muller on hand-mapped uniforms keeps the stream reproducible.
  const double u1 = static_cast<double>((eng_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
  const double u2 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw std::invalid_argument("Rng::uniform_int: empty range");
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(eng_() % span);
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(base ^ 0x5851f42d4c957f2dULL) + splitmix64(stream) + index);
}

// ---- synthetic scenes -------------------------------------------------------

Eigen::VectorXd class_signature(int class_id, int channels) {
  if (class_id < 0 || class_id + 1 >= channels) {
    throw std::invalid_argument("class_signature: need class_id + 1 < channels");
  }
  Eigen::VectorXd sig(channels);
  for (int c = 0; c < channels; ++c) {
    sig(c) = std::cos(M_PI * (class_id + 1) * (c + 0.5) / channels);
  }
  return sig.normalized();
}

std::pair<SceneFeatures, std::vector<GroundTruth>> generate_scene(const SceneSpec& spec) {
  if (spec.height < 2 || spec.width < 2 || spec.channels < 2) {
    throw std::invalid_argument("generate_scene: grid too small");
  }
  if (spec.classes < 1 || spec.classes + 1 > spec.channels) {
    throw std::invalid_argument("generate_scene: need classes + 1 <= channels");
  }

  SceneFeatures features;
  features.height = spec.height;
  features.width = spec.width;
  features.channels = spec.channels;
  features.data = Eigen::MatrixXd::Zero(spec.height * spec.width, spec.channels);

  const auto render_blob = [&](double cx, double cy, double sx, double sy, double intensity,
                               const Eigen::VectorXd& signature) {
    for (int row = 0; row < spec.height; ++row) {
      const double y = (row + 0.5) / spec.height;
      for (int col = 0; col < spec.width; ++col) {
        const double x = (col + 0.5) / spec.width;
        const double dx = (x - cx) / sx;
        const double dy = (y - cy) / sy;
        const double g = intensity * std::exp(-0.5 * (dx * dx + dy * dy));
        if (g < 1e-12) continue;
        features.data.row(row * spec.width + col) += g * signature.transpose();
      }
    }
  };

  std::vector<GroundTruth> gts;
  gts.reserve(spec.objects.size());
  for (const auto& obj : spec.objects) {
    if (obj.class_id < 0 || obj.class_id >= spec.classes) {
      throw std::invalid_argument("generate_scene: object class out of range");
    }
    const NormalizedBox box{obj.cx, obj.cy, obj.w, obj.h};
    if (!is_valid(box) || obj.cx - obj.w / 2 <= 0.0 || obj.cx + obj.w / 2 >= 1.0 ||
        obj.cy - obj.h / 2 <= 0.0 || obj.cy + obj.h / 2 >= 1.0) {
      throw std::invalid_argument("generate_scene: object falls outside the grid");
    }
    // Box covers the 2-sigma extent of the blob.
    render_blob(obj.cx, obj.cy, obj.w / 4.0, obj.h / 4.0, obj.intensity,
                class_signature(obj.class_id, spec.channels));
    gts.push_back({box, obj.class_id});
  }

  Rng rng(spec.seed);
  for (int b = 0; b < spec.clutter_blobs; ++b) {
    const double cx = rng.uniform(0.1, 0.9);
    const double cy = rng.uniform(0.1, 0.9);
    const double sigma = rng.uniform(0.04, 0.12);
    const double intensity = rng.uniform(0.15, 0.45);
    Eigen::VectorXd dir(spec.channels);
    for (int c = 0; c < spec.channels; ++c) dir(c) = rng.normal();
    render_blob(cx, cy, sigma, sigma, intensity, dir.normalized());
  }

  return {std::move(features), std::move(gts)};
}

Eigen::VectorXd bilinear_sample(const SceneFeatures& features, double x, double y) {
  const int w = features.width, h = features.height;
  const double u = std::clamp(std::clamp(x, 0.0, 1.0) * w - 0.5, 0.0, static_cast<double>(w - 1));
  const double v = std::clamp(std::clamp(y, 0.0, 1.0) * h - 0.5, 0.0, static_cast<double>(h - 1));
  const int x0 = static_cast<int>(u);
  const int y0 = static_cast<int>(v);
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double fx = u - x0;
  const double fy = v - y0;

  Eigen::VectorXd out = (1 - fx) * (1 - fy) * features.data.row(y0 * w + x0) +
                        fx * (1 - fy) * features.data.row(y0 * w + x1) +
                        (1 - fx) * fy * features.data.row(y1 * w + x0) +
                        fx * fy * features.data.row(y1 * w + x1);
  return out;
}

std::vector<Prediction> propose_candidates(const SceneFeatures& features, int classes, int grid,
                                           std::span<const double> sizes) {
  if (classes < 1 || classes + 1 > features.channels) {
    throw std::invalid_argument("propose_candidates: need classes + 1 <= channels");
  }
  if (grid < 1 || sizes.empty()) {
    throw std::invalid_argument("propose_candidates: empty candidate grid");
  }
  std::vector<Eigen::VectorXd> signatures;
  for (int k = 0; k < classes; ++k) signatures.push_back(class_signature(k, features.channels));

  std::vector<Prediction> out;
  out.reserve(sizes.size() * static_cast<std::size_t>(grid) * static_cast<std::size_t>(grid));
  int index = 0;
  for (const double s : sizes) {
    const double lo = s / 2 + 1e-3;
    for (int gy = 0; gy < grid; ++gy) {
      for (int gx = 0; gx < grid; ++gx) {
        const double cx = std::clamp((gx + 0.5) / grid, lo, 1.0 - lo);
        const double cy = std::clamp((gy + 0.5) / grid, lo, 1.0 - lo);

        Eigen::VectorXd pooled = bilinear_sample(features, cx, cy);
        pooled += bilinear_sample(features, cx - s / 4, cy - s / 4);
        pooled += bilinear_sample(features, cx + s / 4, cy - s / 4);
        pooled += bilinear_sample(features, cx - s / 4, cy + s / 4);
        pooled += bilinear_sample(features, cx + s / 4, cy + s / 4);
        pooled /= 5.0;

        Prediction p;
        p.box = {cx, cy, s, s};
        p.source_index = index++;
        p.scores.resize(static_cast<std::size_t>(classes));
        for (int k = 0; k < classes; ++k) {
          p.scores[static_cast<std::size_t>(k)] =
              std::clamp(pooled.dot(signatures[static_cast<std::size_t>(k)]), 0.0, 1.0);
        }
        out.push_back(std::move(p));
      }
    }
  }
  return out;
}

// ---- model ------------------------------------------------------------------

LayerParams LayerParams::init(int query_dim, int channels, int classes, Rng& rng) {
  const int input = query_dim + 5 * channels;
  const auto fill = [&](Eigen::MatrixXd& m, double scale) {
    for (int r = 0; r < m.rows(); ++r) {
      for (int c = 0; c < m.cols(); ++c) m(r, c) = rng.normal() * scale;
    }
  };
  LayerParams p;
  const double scale = 1.0 / std::sqrt(static_cast<double>(input));
  p.w_query.resize(query_dim, input);
  fill(p.w_query, scale);
  p.b_query = Eigen::VectorXd::Zero(query_dim);
  p.w_offset.resize(4, input);
  fill(p.w_offset, 0.1 * scale);  // near-identity chain at the start
  p.b_offset = Eigen::VectorXd::Zero(4);
  p.w_class.resize(classes, input);
  fill(p.w_class, scale);
  p.b_class = Eigen::VectorXd::Constant(classes, -2.0);  // low initial confidence
  return p;
}

std::string to_string(AssignStrategy s) {
  return s == AssignStrategy::Baseline ? "baseline" : "csa";
}

std::optional<AssignStrategy> parse_strategy(std::string_view name) {
  if (name == "baseline") return AssignStrategy::Baseline;
  if (name == "csa") return AssignStrategy::CSA;
  return std::nullopt;
}

void TrainConfig::validate() const {
  const auto fail = [](const std::string& msg) {
    throw std::invalid_argument("TrainConfig: " + msg);
  };
  if (layers < 1) fail("layers must be >= 1");
  if (query_dim < 1) fail("query_dim must be >= 1");
  if (classes < 1) fail("classes must be >= 1");
  if (queries < 1) fail("queries must be >= 1");
  if (grid < 4) fail("grid must be >= 4");
  if (channels <= classes) fail("channels must exceed classes");
  if (train_scenes < 1) fail("train_scenes must be >= 1");
  if (val_scenes < 0) fail("val_scenes must be >= 0");
  if (epochs < 1) fail("epochs must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("bad learning rate");
  if (strategy == AssignStrategy::CSA && queries % classes != 0) {
    fail("queries must be divisible by classes under CSA");
  }
  if (!scheme.valid()) fail("malformed refinement scheme");
  if (max_objects < 1) fail("max_objects must be >= 1");
  if (clutter_blobs < 0) fail("clutter_blobs must be >= 0");
  const auto check_weights = [&](const CostWeights& w, const char* which) {
    if (w.lambda_cls < 0 || w.lambda_l1 < 0 || w.lambda_giou < 0) {
      fail(std::string(which) + " weights must be nonnegative");
    }
    if (w.lambda_cls == 0 && w.lambda_l1 == 0 && w.lambda_giou == 0) {
      fail(std::string(which) + " weights must not all be zero");
    }
  };
  check_weights(cost_weights, "cost");
  check_weights(loss_weights, "loss");
}

Model init_model(const TrainConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, 1000, 0));
  Model m;
  m.config = config;
  for (int l = 0; l < config.layers; ++l) {
    m.layers.push_back(LayerParams::init(config.query_dim, config.channels, config.classes, rng));
  }
  m.free_queries.resize(config.queries, config.query_dim);
  for (int i = 0; i < m.free_queries.rows(); ++i) {
    for (int d = 0; d < m.free_queries.cols(); ++d) m.free_queries(i, d) = rng.normal() * 0.5;
  }
  m.library.prototypes.resize(config.classes, config.query_dim);
  for (int k = 0; k < config.classes; ++k) {
    for (int d = 0; d < config.query_dim; ++d) m.library.prototypes(k, d) = rng.normal() * 0.5;
  }
  if (config.queries % config.classes == 0) {
    const int group = config.queries / config.classes;
    m.library.pos_tags.resize(group, config.query_dim);
    for (int i = 0; i < group; ++i) {
      for (int d = 0; d < config.query_dim; ++d) {
        const double freq = std::pow(10000.0, -2.0 * (d / 2) / config.query_dim);
        m.library.pos_tags(i, d) =
            0.25 * ((d % 2 == 0) ? std::sin((i + 1) * freq) : std::cos((i + 1) * freq));
      }
    }
  }
  return m;
}

std::vector<Scene> make_scenes(const TrainConfig& config, int count, std::uint64_t stream) {
  config.validate();
  std::vector<Scene> scenes;
  scenes.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(config.seed, stream, static_cast<std::uint64_t>(i)));

    SceneSpec spec;
    spec.classes = config.classes;
    spec.height = config.grid;
    spec.width = config.grid;
    spec.channels = config.channels;
    spec.clutter_blobs = config.clutter_blobs;

    const int n_objects = rng.uniform_int(1, std::min(config.max_objects, config.queries));
    std::vector<int> labels(static_cast<std::size_t>(config.queries));
    for (int j = 0; j < config.queries; ++j) labels[static_cast<std::size_t>(j)] = j % config.classes;
    for (int j = config.queries - 1; j > 0; --j) {
      std::swap(labels[static_cast<std::size_t>(j)],
                labels[static_cast<std::size_t>(rng.uniform_int(0, j))]);
    }
    for (int j = 0; j < n_objects; ++j) {
      SceneObject obj;
      obj.class_id = labels[static_cast<std::size_t>(j)];
      obj.w = rng.uniform(0.12, 0.30);
      obj.h = rng.uniform(0.12, 0.30);
      obj.cx = rng.uniform(obj.w / 2 + 0.02, 1.0 - obj.w / 2 - 0.02);
      obj.cy = rng.uniform(obj.h / 2 + 0.02, 1.0 - obj.h / 2 - 0.02);
      obj.intensity = rng.uniform(0.8, 1.2);
      spec.objects.push_back(obj);
    }
    spec.seed = rng.bits();

    Scene scene;
    auto [features, gts] = generate_scene(spec);
    scene.features = std::move(features);
    scene.gts = std::move(gts);
    scene.candidates = propose_candidates(scene.features, config.classes);
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

// ---- decoder ----------------------------------------------------------------

std::array<std::pair<double, double>, 5> box_sample_points(const NormalizedBox& box) {
  return {{{box.cx, box.cy},
           {box.cx - box.w / 2, box.cy - box.h / 2},
           {box.cx + box.w / 2, box.cy - box.h / 2},
           {box.cx - box.w / 2, box.cy + box.h / 2},
           {box.cx + box.w / 2, box.cy + box.h / 2}}};
}

namespace {

// Both decoder paths accumulate dot products left to right so their results
// agree to the last bit.
double seq_dot(const Eigen::MatrixXd& w, int row, const Eigen::VectorXd& x) {
  double acc = w(row, 0) * x(0);
  for (int c = 1; c < x.size(); ++c) acc += w(row, c) * x(c);
  return acc;
}

// The head input is squashed to bounded norm, x / sqrt(1 + |x|^2), so the
// gradient-descent step size stays scale-free across scenes.
Eigen::VectorXd assemble_input(std::span<const double> query, const NormalizedBox& box,
                               const SceneFeatures& features) {
  const int channels = features.channels;
  Eigen::VectorXd x(static_cast<int>(query.size()) + 5 * channels);
  for (std::size_t d = 0; d < query.size(); ++d) x(static_cast<int>(d)) = query[d];
  int at = static_cast<int>(query.size());
  for (const auto& [px, py] : box_sample_points(box)) {
    x.segment(at, channels) = bilinear_sample(features, px, py);
    at += channels;
  }
  double norm2 = x(0) * x(0);
  for (int i = 1; i < x.size(); ++i) norm2 += x(i) * x(i);
  const double scale = 1.0 / std::sqrt(1.0 + norm2);
  for (int i = 0; i < x.size(); ++i) x(i) *= scale;
  return x;
}

}  // namespace

DecoderStep decoder_layer(const Eigen::VectorXd& q_prev, const NormalizedBox& r_prev_detached,
                          const SceneFeatures& features, const LayerParams& params) {
  const Eigen::VectorXd x =
      assemble_input(std::span<const double>(q_prev.data(), static_cast<std::size_t>(q_prev.size())),
                     r_prev_detached, features);
  if (x.size() != params.input_dim()) {
    throw std::invalid_argument("decoder_layer: input dimension mismatch");
  }
  DecoderStep out;
  out.query.resize(q_prev.size());
  for (int j = 0; j < q_prev.size(); ++j) {
    out.query(j) = q_prev(j) + std::tanh(seq_dot(params.w_query, j, x) + params.b_query(j));
  }
  out.offset = {seq_dot(params.w_offset, 0, x) + params.b_offset(0),
                seq_dot(params.w_offset, 1, x) + params.b_offset(1),
                seq_dot(params.w_offset, 2, x) + params.b_offset(2),
                seq_dot(params.w_offset, 3, x) + params.b_offset(3)};
  out.class_logits.resize(params.w_class.rows());
  for (int k = 0; k < params.w_class.rows(); ++k) {
    out.class_logits(k) = seq_dot(params.w_class, k, x) + params.b_class(k);
  }
  return out;
}

DecoderStepAd decoder_layer(std::span<const ad::Value> q_prev,
                            const NormalizedBox& r_prev_detached,
                            const SceneFeatures& features, const LayerParamValues& params,
                            ad::Tape& tape) {
  const int channels = features.channels;
  std::vector<ad::Value> x(q_prev.begin(), q_prev.end());
  x.reserve(q_prev.size() + 5 * static_cast<std::size_t>(channels));
  for (const auto& [px, py] : box_sample_points(r_prev_detached)) {
    const Eigen::VectorXd f = bilinear_sample(features, px, py);
    for (int c = 0; c < channels; ++c) x.push_back(tape.leaf(f(c)));
  }
  if (static_cast<int>(x.size()) != params.input_dim) {
    throw std::invalid_argument("decoder_layer: input dimension mismatch");
  }
  ad::Value norm2 = x[0] * x[0];
  for (std::size_t i = 1; i < x.size(); ++i) norm2 = norm2 + x[i] * x[i];
  const ad::Value scale = 1.0 / ad::sqrt(1.0 + norm2);
  for (auto& xi : x) xi = xi * scale;

  const auto row_span = [&](const std::vector<ad::Value>& w, int row) {
    return std::span<const ad::Value>(w.data() + static_cast<std::size_t>(row) * x.size(),
                                      x.size());
  };
  DecoderStepAd out;
  out.query.reserve(q_prev.size());
  for (std::size_t j = 0; j < q_prev.size(); ++j) {
    out.query.push_back(q_prev[j] + ad::tanh(ad::dot(row_span(params.w_query, static_cast<int>(j)), x) +
                                             params.b_query[j]));
  }
  const auto offset_coord = [&](int c) {
    return ad::dot(row_span(params.w_offset, c), x) + params.b_offset[static_cast<std::size_t>(c)];
  };
  out.offset = {offset_coord(0), offset_coord(1), offset_coord(2), offset_coord(3)};
  out.class_logits.reserve(static_cast<std::size_t>(params.rows_class));
  for (int k = 0; k < params.rows_class; ++k) {
    out.class_logits.push_back(ad::dot(row_span(params.w_class, k), x) +
                               params.b_class[static_cast<std::size_t>(k)]);
  }
  return out;
}

// ---- training ---------------------------------------------------------------

namespace {

struct TapeModel {
  std::vector<LayerParamValues> layers;
  std::vector<std::vector<ad::Value>> query_rows;  // free queries or prototypes
  Eigen::MatrixXd pos_tags;                        // fixed, not lifted
  std::vector<ad::Value> leaves;
  std::vector<double*> slots;
};

void lift_matrix(Eigen::MatrixXd& m, ad::Tape& tape, std::vector<ad::Value>& dst,
                 TapeModel& tm) {
  dst.reserve(static_cast<std::size_t>(m.size()));
  for (int r = 0; r < m.rows(); ++r) {
    for (int c = 0; c < m.cols(); ++c) {
      const ad::Value v = tape.leaf(m(r, c));
      dst.push_back(v);
      tm.leaves.push_back(v);
      tm.slots.push_back(&m(r, c));
    }
  }
}

void lift_vector(Eigen::VectorXd& m, ad::Tape& tape, std::vector<ad::Value>& dst,
                 TapeModel& tm) {
  dst.reserve(static_cast<std::size_t>(m.size()));
  for (int r = 0; r < m.size(); ++r) {
    const ad::Value v = tape.leaf(m(r));
    dst.push_back(v);
    tm.leaves.push_back(v);
    tm.slots.push_back(&m(r));
  }
}

TapeModel lift_model(Model& model, ad::Tape& tape) {
  TapeModel tm;
  tm.pos_tags = model.library.pos_tags;
  for (auto& layer : model.layers) {
    LayerParamValues lv;
    lv.rows_query = static_cast<int>(layer.w_query.rows());
    lv.rows_class = static_cast<int>(layer.w_class.rows());
    lv.input_dim = layer.input_dim();
    lift_matrix(layer.w_query, tape, lv.w_query, tm);
    lift_vector(layer.b_query, tape, lv.b_query, tm);
    lift_matrix(layer.w_offset, tape, lv.w_offset, tm);
    lift_vector(layer.b_offset, tape, lv.b_offset, tm);
    lift_matrix(layer.w_class, tape, lv.w_class, tm);
    lift_vector(layer.b_class, tape, lv.b_class, tm);
    tm.layers.push_back(std::move(lv));
  }
  Eigen::MatrixXd& trained = model.config.strategy == AssignStrategy::CSA
                                 ? model.library.prototypes
                                 : model.free_queries;
  tm.query_rows.resize(static_cast<std::size_t>(trained.rows()));
  for (int r = 0; r < trained.rows(); ++r) {
    std::vector<ad::Value> row;
    row.reserve(static_cast<std::size_t>(trained.cols()));
    for (int c = 0; c < trained.cols(); ++c) {
      const ad::Value v = tape.leaf(trained(r, c));
      row.push_back(v);
      tm.leaves.push_back(v);
      tm.slots.push_back(&trained(r, c));
    }
    tm.query_rows[static_cast<std::size_t>(r)] = std::move(row);
  }
  return tm;
}

struct SceneInit {
  std::vector<NormalizedBox> ref0;
};

SceneInit select_initial(const Scene& scene, const TrainConfig& config) {
  SceneInit init;
  if (config.strategy == AssignStrategy::CSA) {
    const auto [sel, layout] = csm_select(scene.candidates, config.queries, config.classes);
    for (const auto& p : sel) init.ref0.push_back(p.box);
  } else {
    for (const auto& p : baseline_select(scene.candidates, config.queries)) {
      init.ref0.push_back(p.box);
    }
  }
  return init;
}

BoxOffset offset_values(const BoxOffsetT<ad::Value>& d) {
  return {d.dx.value(), d.dy.value(), d.dw.value(), d.dh.value()};
}

BoxT<ad::Value> lift_box(const NormalizedBox& b, ad::Tape& tape) {
  return {tape.leaf(b.cx), tape.leaf(b.cy), tape.leaf(b.w), tape.leaf(b.h)};
}

ad::Value bce_with_logit(const ad::Value& z, bool positive) {
  return positive ? ad::softplus(z) - z : ad::softplus(z);
}

struct SceneStep {
  ad::Value loss;
  std::vector<double> layer_losses;
  std::vector<int> matched_gt;     // V of the final layer
  std::vector<int> matched_class;  // T of the final layer
};

SceneStep forward_scene(ad::Tape& tape, TapeModel& tm, const TrainConfig& config,
                        const Scene& scene, const SceneInit& init,
                        const std::optional<CategoryGroupLayout>& layout) {
  const int n = config.queries;
  const int total_layers = config.layers;
  const int classes = config.classes;

  // Initial queries: free rows under Baseline; prototype + positional tag
  // under CSA (gradient accumulates into the group's shared prototype).
  std::vector<std::vector<ad::Value>> q(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (config.strategy == AssignStrategy::CSA) {
      const int g = layout->group_of(i);
      const int slot = i % layout->group_size();
      std::vector<ad::Value> row;
      row.reserve(static_cast<std::size_t>(config.query_dim));
      for (int d = 0; d < config.query_dim; ++d) {
        row.push_back(tm.query_rows[static_cast<std::size_t>(g)][static_cast<std::size_t>(d)] +
                      tm.pos_tags(slot, d));
      }
      q[static_cast<std::size_t>(i)] = std::move(row);
    } else {
      q[static_cast<std::size_t>(i)] = tm.query_rows[static_cast<std::size_t>(i)];
    }
  }

  std::vector<std::vector<NormalizedBox>> chain(1, init.ref0);  // chain[l][i] = ref after layer l
  std::vector<std::vector<BoxOffsetT<ad::Value>>> offsets(
      static_cast<std::size_t>(n));  // per query, per layer
  std::vector<std::vector<std::vector<ad::Value>>> logits(
      static_cast<std::size_t>(total_layers));  // per layer, per query

  for (int l = 1; l <= total_layers; ++l) {
    std::vector<NormalizedBox> next(static_cast<std::size_t>(n));
    logits[static_cast<std::size_t>(l - 1)].resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const NormalizedBox& ref = chain[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(i)];
      auto step = decoder_layer(q[static_cast<std::size_t>(i)], ref, scene.features,
                                tm.layers[static_cast<std::size_t>(l - 1)], tape);
      q[static_cast<std::size_t>(i)] = std::move(step.query);
      next[static_cast<std::size_t>(i)] = forward_step(ref, offset_values(step.offset));
      offsets[static_cast<std::size_t>(i)].push_back(step.offset);
      logits[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(i)] =
          std::move(step.class_logits);
    }
    chain.push_back(std::move(next));
  }

  SceneStep out{tape.leaf(0.0), {}, {}, {}};
  bool first_term = true;
  for (int l = 1; l <= total_layers; ++l) {
    // Loss-facing boxes of this layer.
    std::vector<BoxT<ad::Value>> reported(static_cast<std::size_t>(n));
    std::vector<Prediction> preds(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const auto ref = lift_box(chain[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(i)], tape);
      reported[static_cast<std::size_t>(i)] = reported_box(
          ref, std::span<const BoxOffsetT<ad::Value>>(offsets[static_cast<std::size_t>(i)]), l,
          config.scheme);
      Prediction p;
      const auto& rb = reported[static_cast<std::size_t>(i)];
      p.box = {rb.cx.value(), rb.cy.value(), rb.w.value(), rb.h.value()};
      p.scores.resize(static_cast<std::size_t>(classes));
      for (int k = 0; k < classes; ++k) {
        p.scores[static_cast<std::size_t>(k)] = sigmoid(
            logits[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]
                .value());
      }
      p.source_index = i;
      preds[static_cast<std::size_t>(i)] = std::move(p);
    }

    const Assignment assigned =
        config.strategy == AssignStrategy::CSA
            ? category_hungarian(preds, *layout, scene.gts, config.cost_weights)
            : hungarian(build_cost_matrix(preds, scene.gts, config.cost_weights));

    std::vector<int> matched(static_cast<std::size_t>(n), -1);
    for (const auto& [p, g] : assigned.pairs) matched[static_cast<std::size_t>(p)] = g;

    // Classification: matched slots target their ground truth's class,
    // everything else is all-negative.
    ad::Value cls_sum = tape.leaf(0.0);
    for (int i = 0; i < n; ++i) {
      const int gt = matched[static_cast<std::size_t>(i)];
      const int target = gt >= 0 ? scene.gts[static_cast<std::size_t>(gt)].class_id : -1;
      for (int k = 0; k < classes; ++k) {
        cls_sum = cls_sum + bce_with_logit(
                                logits[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(i)]
                                      [static_cast<std::size_t>(k)],
                                k == target);
      }
    }

    std::optional<ad::Value> box_sum;
    for (const auto& [p, g] : assigned.pairs) {
      const auto gt_box = lift_box(scene.gts[static_cast<std::size_t>(g)].box, tape);
      const auto& rep = reported[static_cast<std::size_t>(p)];
      const ad::Value term = config.loss_weights.lambda_l1 * l1_box_distance(rep, gt_box) +
                             config.loss_weights.lambda_giou * (1.0 - giou(rep, gt_box));
      box_sum = box_sum ? (*box_sum + term) : term;
    }

    ad::Value layer_loss = config.loss_weights.lambda_cls * cls_sum / static_cast<double>(n);
    if (box_sum) {
      layer_loss = layer_loss + *box_sum / static_cast<double>(assigned.pairs.size());
    }
    out.layer_losses.push_back(layer_loss.value());
    out.loss = first_term ? layer_loss : out.loss + layer_loss;
    first_term = false;

    if (l == total_layers) {
      out.matched_gt = matched;
      out.matched_class.assign(static_cast<std::size_t>(n), -1);
      for (int i = 0; i < n; ++i) {
        const int gt = matched[static_cast<std::size_t>(i)];
        if (gt >= 0) {
          out.matched_class[static_cast<std::size_t>(i)] =
              scene.gts[static_cast<std::size_t>(gt)].class_id;
        }
      }
    }
  }
  return out;
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<Scene>& train_scenes,
                  const std::vector<Scene>& val_scenes) {
  config.validate();
  if (train_scenes.empty()) {
    throw std::invalid_argument("train: no training scenes");
  }

  TrainResult result;
  result.model = init_model(config);
  if (config.strategy == AssignStrategy::CSA) {
    result.layout = CategoryGroupLayout(config.classes, config.queries);
  }

  std::vector<SceneInit> inits;
  inits.reserve(train_scenes.size());
  for (const auto& scene : train_scenes) inits.push_back(select_initial(scene, config));

  ad::Tape tape;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0;
    EpochLog log;
    for (std::size_t s = 0; s < train_scenes.size(); ++s) {
      tape.clear();
      TapeModel tm = lift_model(result.model, tape);
      const SceneStep step =
          forward_scene(tape, tm, config, train_scenes[s], inits[s], result.layout);

      if (!std::isfinite(step.loss.value())) {
        std::ostringstream os;
        os << "training diverged: non-finite loss at epoch " << epoch << ", scene " << s;
        throw std::runtime_error(os.str());
      }
      const auto adj = tape.backward(step.loss);
      for (std::size_t i = 0; i < tm.leaves.size(); ++i) {
        *tm.slots[i] -= config.learning_rate * ad::Tape::grad(adj, tm.leaves[i]);
      }
      loss_sum += step.loss.value();

      AssignmentRecord rec;
      rec.epoch = epoch;
      rec.image_id = static_cast<int>(s);
      rec.matched_gt = step.matched_gt;
      rec.matched_class = step.matched_class;
      log[rec.image_id] = std::move(rec);
    }

    const EvalResult ev = evaluate(result.model, val_scenes);
    EpochRow row;
    row.epoch = epoch;
    row.loss = loss_sum / static_cast<double>(train_scenes.size());
    row.ap = ev.final.ap;
    row.ap50 = ev.final.ap50;
    if (epoch > 0) {
      const StabilityRow st = dataset_stability(log, result.epoch_logs.back());
      row.is = st.is;
      row.fis = st.fis;
    }
    result.rows.push_back(row);
    result.epoch_logs.push_back(std::move(log));
  }
  return result;
}

std::vector<double> scene_layer_losses(const Model& model, const Scene& scene) {
  Model copy = model;  // lifting binds slots into the owning model
  copy.config.validate();
  std::optional<CategoryGroupLayout> layout;
  if (copy.config.strategy == AssignStrategy::CSA) {
    layout = CategoryGroupLayout(copy.config.classes, copy.config.queries);
  }
  ad::Tape tape;
  TapeModel tm = lift_model(copy, tape);
  const SceneInit init = select_initial(scene, copy.config);
  return forward_scene(tape, tm, copy.config, scene, init, layout).layer_losses;
}

EvalResult evaluate(const Model& model, const std::vector<Scene>& scenes) {
  const TrainConfig& config = model.config;
  config.validate();

  EvalResult out;
  out.per_layer.resize(static_cast<std::size_t>(config.layers));
  if (scenes.empty()) return out;

  std::optional<CategoryGroupLayout> layout;
  if (config.strategy == AssignStrategy::CSA) {
    layout = CategoryGroupLayout(config.classes, config.queries);
  }

  std::vector<std::vector<std::vector<DetectionResult>>> dets(
      static_cast<std::size_t>(config.layers),
      std::vector<std::vector<DetectionResult>>(scenes.size()));
  std::vector<std::vector<GroundTruth>> gts;
  gts.reserve(scenes.size());

  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const Scene& scene = scenes[s];
    gts.push_back(scene.gts);
    const SceneInit init = select_initial(scene, config);

    std::vector<Eigen::VectorXd> q(static_cast<std::size_t>(config.queries));
    for (int i = 0; i < config.queries; ++i) {
      if (config.strategy == AssignStrategy::CSA) {
        q[static_cast<std::size_t>(i)] =
            model.library.query(layout->group_of(i), i % layout->group_size());
      } else {
        q[static_cast<std::size_t>(i)] = model.free_queries.row(i).transpose();
      }
    }

    std::vector<NormalizedBox> refs = init.ref0;
    for (int l = 1; l <= config.layers; ++l) {
      for (int i = 0; i < config.queries; ++i) {
        const DecoderStep step =
            decoder_layer(q[static_cast<std::size_t>(i)], refs[static_cast<std::size_t>(i)],
                          scene.features, model.layers[static_cast<std::size_t>(l - 1)]);
        q[static_cast<std::size_t>(i)] = step.query;
        refs[static_cast<std::size_t>(i)] =
            forward_step(refs[static_cast<std::size_t>(i)], step.offset);

        int best_class = 0;
        double best_conf = -1.0;
        for (int k = 0; k < config.classes; ++k) {
          const double conf = sigmoid(step.class_logits(k));
          if (conf > best_conf) {
            best_conf = conf;
            best_class = k;
          }
        }
        dets[static_cast<std::size_t>(l - 1)][s].push_back(
            {refs[static_cast<std::size_t>(i)], best_class, best_conf});
      }
    }

    for (int i = 0; i < config.queries; ++i) {
      QueryExportRow row;
      row.image_id = static_cast<int>(s);
      row.query_id = i;
      row.group = layout ? layout->group_of(i) : -1;
      row.vec = q[static_cast<std::size_t>(i)];
      out.query_rows.push_back(std::move(row));
    }
  }

  const auto thresholds = coco_thresholds();
  for (int l = 0; l < config.layers; ++l) {
    out.per_layer[static_cast<std::size_t>(l)] =
        ap_eval(dets[static_cast<std::size_t>(l)], gts, config.classes, thresholds);
  }
  out.final = out.per_layer.back();
  return out;
}

}  // namespace lfdet
