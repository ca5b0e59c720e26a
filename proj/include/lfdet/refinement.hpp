#pragma once

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lfdet/geometry.hpp"

namespace lfdet {

enum class RefineKind { LFO, LFT, LFD };
enum class LfdAggregate { Sum, Average };
enum class LfdWeighting { Equal, Amplify, Diminish };

/// Which offsets feed the loss-facing box of layer l:
///   LFO: the layer's own offset only.
///   LFT: the layer's own offset plus the next layer's.
///   LFD: every offset from layer l through L, combined per aggregate and
///        weighting.
/// aggregate/weighting are present iff kind == LFD.
struct RefineScheme {
  RefineKind kind = RefineKind::LFO;
  std::optional<LfdAggregate> aggregate;
  std::optional<LfdWeighting> weighting;

  static RefineScheme lfo() { return {RefineKind::LFO, {}, {}}; }
  static RefineScheme lft() { return {RefineKind::LFT, {}, {}}; }
  static RefineScheme lfd(LfdAggregate a, LfdWeighting w) { return {RefineKind::LFD, a, w}; }

  /// All eight schemes in grid order: lfo, lft, then lfd sum/avg x e/a/d.
  static const std::vector<RefineScheme>& all();

  /// Parses "lfo", "lft", or "lfd-<sum|avg>-<equal|amplify|diminish>".
  static std::optional<RefineScheme> parse(std::string_view name);

  std::string name() const;
  bool valid() const { return (kind == RefineKind::LFD) == (aggregate && weighting); }
  bool operator==(const RefineScheme&) const = default;
};

/// Weight of the layer-n offset inside an LFD combination over n = l..L:
/// Equal 1, Amplify 2^(n-L) (top layer weighs 1), Diminish 2^(-n).
double lfd_weight(LfdWeighting w, int n, int total_layers);

namespace detail {
template <class S>
BoxOffsetT<S> offset_plus(const BoxOffsetT<S>& a, const BoxOffsetT<S>& b) {
  return {a.dx + b.dx, a.dy + b.dy, a.dw + b.dw, a.dh + b.dh};
}
template <class S>
BoxOffsetT<S> offset_scaled(const BoxOffsetT<S>& a, double s) {
  return {a.dx * s, a.dy * s, a.dw * s, a.dh * s};
}
}  // namespace detail

inline double detach_scalar(double x) { return x; }

/// Value-identical box marked as a differentiation leaf; gradients never
/// propagate through it. Identity on plain doubles.
template <class S>
BoxT<S> detach_reference(const BoxT<S>& r) {
  return {detach_scalar(r.cx), detach_scalar(r.cy), detach_scalar(r.w), detach_scalar(r.h)};
}

/// Single-step box update sigma(sigma^-1(r) + delta); the inference-time
/// chain applies exactly this at every layer regardless of scheme.
template <class S>
BoxT<S> forward_step(const BoxT<S>& r_prev_detached, const BoxOffsetT<S>& delta) {
  return sigmoid_box(inverse_sigmoid_box(r_prev_detached) + delta);
}

/// Loss-facing box of layer l (1-based), given the detached reference of
/// layer l-1 and the offsets of all layers 1..L. Only offsets l..L are read.
template <class S>
BoxT<S> reported_box(const BoxT<S>& detached_ref_prev,
                     std::span<const BoxOffsetT<S>> offsets, int l,
                     const RefineScheme& scheme) {
  const int total = static_cast<int>(offsets.size());
  if (l < 1 || l > total) {
    throw std::invalid_argument("reported_box: layer index out of range");
  }
  if (!scheme.valid()) {
    throw std::invalid_argument("reported_box: malformed scheme");
  }

  BoxOffsetT<S> combined = offsets[static_cast<std::size_t>(l - 1)];
  switch (scheme.kind) {
    case RefineKind::LFO:
      break;
    case RefineKind::LFT:
      if (l < total) {
        combined = detail::offset_plus(combined, offsets[static_cast<std::size_t>(l)]);
      }
      break;
    case RefineKind::LFD: {
      combined = detail::offset_scaled(offsets[static_cast<std::size_t>(l - 1)],
                                       lfd_weight(*scheme.weighting, l, total));
      for (int n = l + 1; n <= total; ++n) {
        combined = detail::offset_plus(
            combined, detail::offset_scaled(offsets[static_cast<std::size_t>(n - 1)],
                                            lfd_weight(*scheme.weighting, n, total)));
      }
      if (*scheme.aggregate == LfdAggregate::Average) {
        combined = detail::offset_scaled(combined, 1.0 / (total - l + 1));
      }
      break;
    }
  }
  return sigmoid_box(inverse_sigmoid_box(detached_ref_prev) + combined);
}

/// Per-query record of one full decoder pass: the detached forward chain
/// (scheme-invariant), the per-layer offsets, and the scheme-dependent
/// loss-facing boxes.
struct RefinementTrace {
  std::vector<NormalizedBox> detached_refs;  // size L+1, index l holds the post-layer-l box
  std::vector<BoxOffset> offsets;            // size L, index l-1 holds layer l's offset
  std::vector<NormalizedBox> reported;       // size L, index l-1 holds layer l's loss box

  int layer_count() const { return static_cast<int>(offsets.size()); }
};

RefinementTrace build_trace(const NormalizedBox& initial_ref,
                            std::span<const BoxOffset> offsets,
                            const RefineScheme& scheme);

/// reach(l-1, n-1) = 1 iff the loss on the layer-l reported box depends on
/// the layer-n offset.
struct GradFlowMatrix {
  Eigen::MatrixXi reach;

  int layers() const { return static_cast<int>(reach.rows()); }
  std::string to_csv() const;
};

/// Symbolic dependence pattern: diagonal for LFO, diagonal + superdiagonal
/// for LFT, upper triangle for LFD.
GradFlowMatrix gradient_flow(const RefineScheme& scheme, int layers);

/// Empirical flow magnitudes at one evaluation point: entry (l-1, n-1) is
/// the largest |d reported_l / d offset_n| over the four coordinates,
/// obtained from the reverse-mode tape (including the detached chain) or
/// from central finite differences on the reported-box formula.
Eigen::MatrixXd empirical_flow_tape(const RefineScheme& scheme,
                                    const NormalizedBox& initial_ref,
                                    std::span<const BoxOffset> offsets);
Eigen::MatrixXd empirical_flow_fd(const RefineScheme& scheme,
                                  const NormalizedBox& initial_ref,
                                  std::span<const BoxOffset> offsets);

struct FlowCheck {
  GradFlowMatrix symbolic;
  Eigen::MatrixXd tape_mag;
  Eigen::MatrixXd fd_mag;
  double max_abs_diff = 0.0;     // tape vs finite differences
  double max_rel_diff = 0.0;
  bool pattern_matches = false;  // both routes nonzero exactly where symbolic says
};

/// Cross-checks symbolic, tape, and finite-difference flow at a
/// deterministic interior point derived from `seed`.
FlowCheck check_gradient_flow(const RefineScheme& scheme, int layers,
                              std::uint64_t seed = 0);

}  // namespace lfdet
