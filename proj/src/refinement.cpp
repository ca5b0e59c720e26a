#include "lfdet/refinement.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "lfdet/autodiff.hpp"

namespace lfdet {

const std::vector<RefineScheme>& RefineScheme::all() {
  static const std::vector<RefineScheme> schemes = [] {
    std::vector<RefineScheme> s{lfo(), lft()};
    for (auto agg : {LfdAggregate::Sum, LfdAggregate::Average}) {
      for (auto w : {LfdWeighting::Equal, LfdWeighting::Amplify, LfdWeighting::Diminish}) {
        s.push_back(lfd(agg, w));
      }
    }
    return s;
  }();
  return schemes;
}

std::optional<RefineScheme> RefineScheme::parse(std::string_view name) {
  if (name == "lfo") return lfo();
  if (name == "lft") return lft();
  std::optional<LfdAggregate> agg;
  std::optional<LfdWeighting> w;
  if (name.starts_with("lfd-sum-")) {
    agg = LfdAggregate::Sum;
    name.remove_prefix(8);
  } else if (name.starts_with("lfd-avg-")) {
    agg = LfdAggregate::Average;
    name.remove_prefix(8);
  } else if (name.starts_with("lfd-average-")) {
    agg = LfdAggregate::Average;
    name.remove_prefix(12);
  } else {
    return std::nullopt;
  }
  if (name == "equal") w = LfdWeighting::Equal;
  else if (name == "amplify") w = LfdWeighting::Amplify;
  else if (name == "diminish") w = LfdWeighting::Diminish;
  else return std::nullopt;
  return lfd(*agg, *w);
}

std::string RefineScheme::name() const {
  switch (kind) {
    case RefineKind::LFO: return "lfo";
    case RefineKind::LFT: return "lft";
    case RefineKind::LFD: break;
  }
  std::string out = "lfd-";
  out += (*aggregate == LfdAggregate::Sum) ? "sum-" : "avg-";
  switch (*weighting) {
    case LfdWeighting::Equal: out += "equal"; break;
    case LfdWeighting::Amplify: out += "amplify"; break;
    case LfdWeighting::Diminish: out += "diminish"; break;
  }
  return out;
}

double lfd_weight(LfdWeighting w, int n, int total_layers) {
  switch (w) {
    case LfdWeighting::Equal: return 1.0;
    case LfdWeighting::Amplify: return std::exp2(static_cast<double>(n - total_layers));
    case LfdWeighting::Diminish: return std::exp2(static_cast<double>(-n));
  }
  return 1.0;
}

RefinementTrace build_trace(const NormalizedBox& initial_ref,
                            std::span<const BoxOffset> offsets,
                            const RefineScheme& scheme) {
  if (!is_valid(initial_ref)) {
    throw std::invalid_argument("build_trace: invalid initial reference box");
  }
  RefinementTrace trace;
  const int total = static_cast<int>(offsets.size());
  trace.offsets.assign(offsets.begin(), offsets.end());
  trace.detached_refs.reserve(static_cast<std::size_t>(total) + 1);
  trace.detached_refs.push_back(initial_ref);
  for (int l = 1; l <= total; ++l) {
    trace.detached_refs.push_back(
        forward_step(trace.detached_refs.back(), offsets[static_cast<std::size_t>(l - 1)]));
  }
  trace.reported.reserve(static_cast<std::size_t>(total));
  for (int l = 1; l <= total; ++l) {
    trace.reported.push_back(
        reported_box(trace.detached_refs[static_cast<std::size_t>(l - 1)], offsets, l, scheme));
  }
  return trace;
}

GradFlowMatrix gradient_flow(const RefineScheme& scheme, int layers) {
  if (layers < 1) throw std::invalid_argument("gradient_flow: layers must be >= 1");
  if (!scheme.valid()) throw std::invalid_argument("gradient_flow: malformed scheme");
  GradFlowMatrix flow;
  flow.reach = Eigen::MatrixXi::Zero(layers, layers);
  for (int l = 1; l <= layers; ++l) {
    switch (scheme.kind) {
      case RefineKind::LFO:
        flow.reach(l - 1, l - 1) = 1;
        break;
      case RefineKind::LFT:
        flow.reach(l - 1, l - 1) = 1;
        if (l < layers) flow.reach(l - 1, l) = 1;
        break;
      case RefineKind::LFD:
        for (int n = l; n <= layers; ++n) flow.reach(l - 1, n - 1) = 1;
        break;
    }
  }
  return flow;
}

std::string GradFlowMatrix::to_csv() const {
  std::ostringstream os;
  os << "l";
  for (int n = 1; n <= layers(); ++n) os << ",n" << n;
  os << "\n";
  for (int l = 1; l <= layers(); ++l) {
    os << l;
    for (int n = 1; n <= layers(); ++n) os << "," << reach(l - 1, n - 1);
    os << "\n";
  }
  return os.str();
}

namespace {

struct FlowPoint {
  NormalizedBox initial_ref;
  std::vector<BoxOffset> offsets;
};

FlowPoint random_interior_point(int layers, std::uint64_t seed) {
  std::mt19937_64 eng(seed * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL);
  const auto uniform = [&](double lo, double hi) {
    const double u = static_cast<double>(eng() >> 11) * 0x1.0p-53;
    return lo + u * (hi - lo);
  };
  FlowPoint p;
  p.initial_ref = {uniform(0.25, 0.75), uniform(0.25, 0.75), uniform(0.2, 0.5), uniform(0.2, 0.5)};
  p.offsets.resize(static_cast<std::size_t>(layers));
  for (auto& d : p.offsets) {
    d = {uniform(-0.4, 0.4), uniform(-0.4, 0.4), uniform(-0.4, 0.4), uniform(-0.4, 0.4)};
  }
  return p;
}

}  // namespace

Eigen::MatrixXd empirical_flow_tape(const RefineScheme& scheme,
                                    const NormalizedBox& initial_ref,
                                    std::span<const BoxOffset> offsets) {
  const int total = static_cast<int>(offsets.size());
  ad::Tape tape;

  std::vector<BoxOffsetT<ad::Value>> off(static_cast<std::size_t>(total));
  for (int n = 0; n < total; ++n) {
    const auto& d = offsets[static_cast<std::size_t>(n)];
    off[static_cast<std::size_t>(n)] = {tape.leaf(d.dx), tape.leaf(d.dy), tape.leaf(d.dw),
                                        tape.leaf(d.dh)};
  }

  // Detached forward chain on the tape: each reference enters the next layer
  // through detach_reference, exactly as training does.
  std::vector<BoxT<ad::Value>> refs;
  refs.push_back({tape.leaf(initial_ref.cx), tape.leaf(initial_ref.cy), tape.leaf(initial_ref.w),
                  tape.leaf(initial_ref.h)});
  for (int l = 1; l <= total; ++l) {
    const auto step = forward_step(refs.back(), off[static_cast<std::size_t>(l - 1)]);
    refs.push_back(detach_reference(step));
  }

  Eigen::MatrixXd mag = Eigen::MatrixXd::Zero(total, total);
  const std::span<const BoxOffsetT<ad::Value>> off_span(off);
  for (int l = 1; l <= total; ++l) {
    const auto rep = reported_box(refs[static_cast<std::size_t>(l - 1)], off_span, l, scheme);
    for (const auto& coord : {rep.cx, rep.cy, rep.w, rep.h}) {
      const auto adj = tape.backward(coord);
      for (int n = 1; n <= total; ++n) {
        const auto& d = off[static_cast<std::size_t>(n - 1)];
        const double g = std::max(
            std::max(std::fabs(ad::Tape::grad(adj, d.dx)), std::fabs(ad::Tape::grad(adj, d.dy))),
            std::max(std::fabs(ad::Tape::grad(adj, d.dw)), std::fabs(ad::Tape::grad(adj, d.dh))));
        mag(l - 1, n - 1) = std::max(mag(l - 1, n - 1), g);
      }
    }
  }
  return mag;
}

Eigen::MatrixXd empirical_flow_fd(const RefineScheme& scheme,
                                  const NormalizedBox& initial_ref,
                                  std::span<const BoxOffset> offsets) {
  const int total = static_cast<int>(offsets.size());

  // The detached references are held fixed at their base values: finite
  // differences probe the reported-box formula itself, with the blocked
  // inputs treated as constants.
  const RefinementTrace base = build_trace(initial_ref, offsets, scheme);

  Eigen::MatrixXd mag = Eigen::MatrixXd::Zero(total, total);
  std::vector<double> flat(static_cast<std::size_t>(total) * 4);
  for (int n = 0; n < total; ++n) {
    const auto& d = offsets[static_cast<std::size_t>(n)];
    flat[static_cast<std::size_t>(n) * 4 + 0] = d.dx;
    flat[static_cast<std::size_t>(n) * 4 + 1] = d.dy;
    flat[static_cast<std::size_t>(n) * 4 + 2] = d.dw;
    flat[static_cast<std::size_t>(n) * 4 + 3] = d.dh;
  }

  for (int l = 1; l <= total; ++l) {
    for (int coord = 0; coord < 4; ++coord) {
      const auto f = [&](std::span<const double> x) {
        std::vector<BoxOffset> off(static_cast<std::size_t>(total));
        for (int n = 0; n < total; ++n) {
          off[static_cast<std::size_t>(n)] = {
              x[static_cast<std::size_t>(n) * 4 + 0], x[static_cast<std::size_t>(n) * 4 + 1],
              x[static_cast<std::size_t>(n) * 4 + 2], x[static_cast<std::size_t>(n) * 4 + 3]};
        }
        const auto rep = reported_box(base.detached_refs[static_cast<std::size_t>(l - 1)],
                                      std::span<const BoxOffset>(off), l, scheme);
        switch (coord) {
          case 0: return rep.cx;
          case 1: return rep.cy;
          case 2: return rep.w;
          default: return rep.h;
        }
      };
      const auto g = ad::finite_difference(f, flat, 1e-5);
      for (int n = 1; n <= total; ++n) {
        for (int c = 0; c < 4; ++c) {
          mag(l - 1, n - 1) =
              std::max(mag(l - 1, n - 1), std::fabs(g[static_cast<std::size_t>(n - 1) * 4 +
                                                      static_cast<std::size_t>(c)]));
        }
      }
    }
  }
  return mag;
}

FlowCheck check_gradient_flow(const RefineScheme& scheme, int layers, std::uint64_t seed) {
  const FlowPoint p = random_interior_point(layers, seed);
  FlowCheck out;
  out.symbolic = gradient_flow(scheme, layers);
  out.tape_mag = empirical_flow_tape(scheme, p.initial_ref, p.offsets);
  out.fd_mag = empirical_flow_fd(scheme, p.initial_ref, p.offsets);

  constexpr double kNonzeroFloor = 1e-8;
  constexpr double kZeroCeil = 1e-10;
  out.pattern_matches = true;
  for (int l = 0; l < layers; ++l) {
    for (int n = 0; n < layers; ++n) {
      const double t = out.tape_mag(l, n);
      const double f = out.fd_mag(l, n);
      const double diff = std::fabs(t - f);
      out.max_abs_diff = std::max(out.max_abs_diff, diff);
      const double scale = std::max(std::fabs(t), std::fabs(f));
      if (scale > 0.0) out.max_rel_diff = std::max(out.max_rel_diff, diff / scale);
      if (out.symbolic.reach(l, n) != 0) {
        if (t < kNonzeroFloor || f < kNonzeroFloor) out.pattern_matches = false;
      } else {
        if (t > kZeroCeil || f > kZeroCeil) out.pattern_matches = false;
      }
    }
  }
  return out;
}

}  // namespace lfdet
