#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lfdet/assignment.hpp"
#include "lfdet/autodiff.hpp"
#include "lfdet/geometry.hpp"
#include "lfdet/metrics.hpp"
#include "lfdet/refinement.hpp"

namespace lfdet {

/// Deterministic RNG: mt19937_64 with hand-mapped distributions so streams
/// are reproducible independent of the standard library's distribution
/// implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }
  double normal();
  int uniform_int(int lo, int hi);  // inclusive bounds
  std::uint64_t bits() { return eng_(); }

 private:
  std::mt19937_64 eng_;
};

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index);

// ---- synthetic scenes -------------------------------------------------------

struct SceneObject {
  int class_id = 0;
  double cx = 0.5, cy = 0.5, w = 0.2, h = 0.2;
  double intensity = 1.0;
};

struct SceneSpec {
  int classes = 3;
  int height = 32, width = 32, channels = 8;
  std::vector<SceneObject> objects;
  int clutter_blobs = 3;
  std::uint64_t seed = 0;  // drives clutter placement
};

/// Additive feature grid: overlapping objects sum channel-wise, mimicking
/// X-ray transparency. Row y*width+x of data holds the channel vector of
/// cell (x, y); cell centers sit at ((x+0.5)/width, (y+0.5)/height).
struct SceneFeatures {
  int height = 0, width = 0, channels = 0;
  Eigen::MatrixXd data;  // (height*width) x channels

  Eigen::VectorXd cell(int x, int y) const { return data.row(y * width + x); }
};

/// Fixed per-class channel signature (orthonormal DCT rows); requires
/// class_id + 1 < channels.
Eigen::VectorXd class_signature(int class_id, int channels);

/// Renders objects as Gaussian blobs (sigma = size/4, so the box covers the
/// 2-sigma extent) times their class signature, plus clutter blobs with
/// random unit signatures. Deterministic given the spec. Ground truths come
/// back in object order.
std::pair<SceneFeatures, std::vector<GroundTruth>> generate_scene(const SceneSpec& spec);

/// Bilinear interpolation of the four surrounding cells at a normalized
/// point; out-of-range points clamp to the border. Exact cell value at cell
/// centers.
Eigen::VectorXd bilinear_sample(const SceneFeatures& features, double x, double y);

inline constexpr double kCandidateSizesArr[] = {0.15, 0.25, 0.35};
inline constexpr std::span<const double> kCandidateSizes{kCandidateSizesArr};

/// Grid of candidate boxes scored per class by signature correlation of
/// pooled samples; the encoder stand-in that selection operates on.
std::vector<Prediction> propose_candidates(const SceneFeatures& features, int classes,
                                           int grid = 12,
                                           std::span<const double> sizes = kCandidateSizes);

struct Scene {
  SceneFeatures features;
  std::vector<GroundTruth> gts;
  std::vector<Prediction> candidates;
};

// ---- model ------------------------------------------------------------------

/// One decoder layer's dense maps. Inputs are the query concatenated with
/// features sampled at the reference box center and corners (dim
/// query_dim + 5*channels); heads emit the residual query update, the
/// logit-space box offset, and per-class logits.
struct LayerParams {
  Eigen::MatrixXd w_query;   // query_dim x input_dim
  Eigen::VectorXd b_query;   // query_dim
  Eigen::MatrixXd w_offset;  // 4 x input_dim
  Eigen::VectorXd b_offset;  // 4
  Eigen::MatrixXd w_class;   // classes x input_dim
  Eigen::VectorXd b_class;   // classes

  static LayerParams init(int query_dim, int channels, int classes, Rng& rng);
  int input_dim() const { return static_cast<int>(w_query.cols()); }
};

/// K query prototypes plus fixed sinusoidal positional tags; group k's i-th
/// query is prototype k plus tag i.
struct CategoryQueryLibrary {
  Eigen::MatrixXd prototypes;  // classes x query_dim, trained
  Eigen::MatrixXd pos_tags;    // group_size x query_dim, fixed

  Eigen::VectorXd query(int class_id, int slot) const {
    return prototypes.row(class_id).transpose() + pos_tags.row(slot).transpose();
  }
};

enum class AssignStrategy { Baseline, CSA };

std::string to_string(AssignStrategy s);
std::optional<AssignStrategy> parse_strategy(std::string_view name);

struct TrainConfig {
  int layers = 3;        // L
  int query_dim = 32;    // D
  int classes = 3;       // K
  int queries = 6;       // N, defaults to 2K
  int grid = 32;         // feature grid height = width
  int channels = 8;
  int train_scenes = 200;
  int val_scenes = 50;
  int epochs = 60;
  double learning_rate = 0.1;
  std::uint64_t seed = 1;
  AssignStrategy strategy = AssignStrategy::Baseline;
  RefineScheme scheme = RefineScheme::lft();
  CostWeights cost_weights;
  CostWeights loss_weights;
  int max_objects = 4;
  int clutter_blobs = 3;

  void validate() const;  // throws std::invalid_argument
};

struct Model {
  TrainConfig config;
  std::vector<LayerParams> layers;
  Eigen::MatrixXd free_queries;  // queries x query_dim, used by Baseline
  CategoryQueryLibrary library;  // used by CSA
};

Model init_model(const TrainConfig& config);

/// count scenes sampled and rendered from config.seed; `stream` separates
/// train from validation draws.
std::vector<Scene> make_scenes(const TrainConfig& config, int count, std::uint64_t stream);

// ---- decoder ----------------------------------------------------------------

/// Center plus four corner sample locations of a box.
std::array<std::pair<double, double>, 5> box_sample_points(const NormalizedBox& box);

struct DecoderStep {
  Eigen::VectorXd query;
  BoxOffset offset;
  Eigen::VectorXd class_logits;
};

/// Plain-arithmetic decoder layer used at inference time. The reference box
/// enters as a constant, so nothing differentiates through it.
DecoderStep decoder_layer(const Eigen::VectorXd& q_prev, const NormalizedBox& r_prev_detached,
                          const SceneFeatures& features, const LayerParams& params);

/// Tape-lifted layer parameters, leaves aligned with slots into the owning
/// Model so a gradient step can write back.
struct LayerParamValues {
  std::vector<ad::Value> w_query, b_query, w_offset, b_offset, w_class, b_class;
  int rows_query = 0, rows_class = 0, input_dim = 0;
};

struct DecoderStepAd {
  std::vector<ad::Value> query;
  BoxOffsetT<ad::Value> offset;
  std::vector<ad::Value> class_logits;
};

/// Differentiable twin of decoder_layer; identical arithmetic on the tape.
DecoderStepAd decoder_layer(std::span<const ad::Value> q_prev,
                            const NormalizedBox& r_prev_detached,
                            const SceneFeatures& features, const LayerParamValues& params,
                            ad::Tape& tape);

// ---- training ---------------------------------------------------------------

struct EpochRow {
  int epoch = 0;
  double loss = 0.0;
  double ap = 0.0;
  double ap50 = 0.0;
  std::optional<double> is;   // absent for the first epoch
  std::optional<double> fis;
};

struct TrainResult {
  Model model;
  std::vector<EpochLog> epoch_logs;  // one per epoch, keyed by scene index
  std::vector<EpochRow> rows;
  std::optional<CategoryGroupLayout> layout;  // CSA group layout, when used
};

/// Full training loop: per scene, forward all layers on the tape, compute
/// scheme-dependent reported boxes, assign per layer with the configured
/// strategy, sum per-layer losses, and take one gradient step. Logs the
/// final layer's assignment per scene per epoch. Throws std::runtime_error
/// with a diagnostic when the loss stops being finite.
TrainResult train(const TrainConfig& config, const std::vector<Scene>& train_scenes,
                  const std::vector<Scene>& val_scenes);

/// Per-layer auxiliary losses of one scene at the given parameters; the
/// probe behind the end-to-end gradient-reach checks (perturb a layer's
/// parameters, watch which layers' losses move).
std::vector<double> scene_layer_losses(const Model& model, const Scene& scene);

struct QueryExportRow {
  int image_id = 0;
  int query_id = 0;
  int group = -1;  // CSA group, -1 under Baseline
  Eigen::VectorXd vec;
};

struct EvalResult {
  std::vector<ApSummary> per_layer;  // boxes of the detached chain after each layer
  ApSummary final;
  std::vector<QueryExportRow> query_rows;  // final-layer query vectors
};

/// Inference over `scenes` using only the detached single-step chain;
/// detection class is the arg-max class probability, confidence its value.
EvalResult evaluate(const Model& model, const std::vector<Scene>& scenes);

}  // namespace lfdet
