#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lfdet {

/// Clamp applied before the inverse sigmoid so boundary coordinates stay
/// finite in logit space.
inline constexpr double kLogitEps = 1e-5;

/// Box in center-size form, every coordinate a fraction of image extent.
/// Valid boxes have all four coordinates strictly inside (0,1).
template <class S>
struct BoxT {
  S cx, cy, w, h;
};

/// Unbounded logit-space twin of BoxT: sigmoid of each field reproduces a
/// normalized box.
template <class S>
struct LogitBoxT {
  S x, y, w, h;
};

/// Additive update applied in logit space.
template <class S>
struct BoxOffsetT {
  S dx, dy, dw, dh;
};

using NormalizedBox = BoxT<double>;
using LogitBox = LogitBoxT<double>;
using BoxOffset = BoxOffsetT<double>;

inline double sigmoid(double u) {
  if (u >= 0.0) {
    const double e = std::exp(-u);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(u);
  return e / (1.0 + e);
}

/// Inverse sigmoid; input must lie strictly inside (0,1).
inline double logit(double c) { return std::log(c) - std::log1p(-c); }

inline bool finite_scalar(double x) { return std::isfinite(x); }

namespace detail {
template <class S>
S clamp_unit(const S& c) {
  using std::clamp;
  return clamp(c, kLogitEps, 1.0 - kLogitEps);
}
}  // namespace detail

inline bool is_valid(const NormalizedBox& b) {
  const auto in01 = [](double x) { return std::isfinite(x) && x > 0.0 && x < 1.0; };
  return in01(b.cx) && in01(b.cy) && in01(b.w) && in01(b.h);
}

/// Coordinate-wise sigmoid; the result is always a valid normalized box.
template <class S>
BoxT<S> sigmoid_box(const LogitBoxT<S>& u) {
  if (!(finite_scalar(u.x) && finite_scalar(u.y) && finite_scalar(u.w) && finite_scalar(u.h))) {
    throw std::invalid_argument("sigmoid_box: non-finite input");
  }
  return {sigmoid(u.x), sigmoid(u.y), sigmoid(u.w), sigmoid(u.h)};
}

/// Coordinate-wise inverse sigmoid after clamping each coordinate to
/// [kLogitEps, 1 - kLogitEps], so boundary values are absorbed rather than
/// mapped to infinity.
template <class S>
LogitBoxT<S> inverse_sigmoid_box(const BoxT<S>& b) {
  using detail::clamp_unit;
  return {logit(clamp_unit(b.cx)), logit(clamp_unit(b.cy)),
          logit(clamp_unit(b.w)), logit(clamp_unit(b.h))};
}

template <class S>
LogitBoxT<S> operator+(const LogitBoxT<S>& u, const BoxOffsetT<S>& d) {
  return {u.x + d.dx, u.y + d.dy, u.w + d.dw, u.h + d.dh};
}

/// Intersection over union in [0,1]. Corner form is derived on demand from
/// the stored center-size coordinates.
template <class S>
S iou(const BoxT<S>& a, const BoxT<S>& b) {
  using std::max;
  using std::min;
  const S ax1 = a.cx - a.w * 0.5, ax2 = a.cx + a.w * 0.5;
  const S ay1 = a.cy - a.h * 0.5, ay2 = a.cy + a.h * 0.5;
  const S bx1 = b.cx - b.w * 0.5, bx2 = b.cx + b.w * 0.5;
  const S by1 = b.cy - b.h * 0.5, by2 = b.cy + b.h * 0.5;

  const S iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0);
  const S ih = max(min(ay2, by2) - max(ay1, by1), 0.0);
  const S inter = iw * ih;
  const S uni = a.w * a.h + b.w * b.h - inter;
  if (uni <= 0.0) return inter * 0.0;  // degenerate zero-area boxes
  return inter / uni;
}

/// IoU minus the fraction of the smallest enclosing box not covered by the
/// union; range [-1, 1], equal to IoU for identical boxes.
template <class S>
S giou(const BoxT<S>& a, const BoxT<S>& b) {
  using std::max;
  using std::min;
  const S ax1 = a.cx - a.w * 0.5, ax2 = a.cx + a.w * 0.5;
  const S ay1 = a.cy - a.h * 0.5, ay2 = a.cy + a.h * 0.5;
  const S bx1 = b.cx - b.w * 0.5, bx2 = b.cx + b.w * 0.5;
  const S by1 = b.cy - b.h * 0.5, by2 = b.cy + b.h * 0.5;

  const S iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0);
  const S ih = max(min(ay2, by2) - max(ay1, by1), 0.0);
  const S inter = iw * ih;
  const S uni = a.w * a.h + b.w * b.h - inter;

  const S cw = max(ax2, bx2) - min(ax1, bx1);
  const S ch = max(ay2, by2) - min(ay1, by1);
  const S enclose = cw * ch;

  S result = uni > 0.0 ? inter / uni : inter * 0.0;
  if (enclose > 0.0) result = result - (enclose - uni) / enclose;
  return result;
}

/// Sum of absolute coordinate differences in (cx, cy, w, h) form.
template <class S>
S l1_box_distance(const BoxT<S>& a, const BoxT<S>& b) {
  using std::abs;
  return abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.w - b.w) + abs(a.h - b.h);
}

}  // namespace lfdet
