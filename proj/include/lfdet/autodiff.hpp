#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace lfdet::ad {

class Tape;

/// Handle to one recorded scalar. Copies are cheap; the numeric value is
/// cached in the handle so arithmetic never re-reads the tape.
struct Value {
  Tape* tape = nullptr;
  std::int32_t id = -1;
  double v = 0.0;

  double value() const { return v; }
};

/// Recording tape for scalar reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the record is already
/// topologically sorted and a single reverse sweep accumulates adjoints.
/// One tape per thread of execution; values from different tapes must not
/// be mixed (checked on every binary op).
class Tape {
 public:
  /// New independent input (also used for constants and detached values).
  Value leaf(double v) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("ad::Tape::leaf: non-finite value");
    }
    return push(v, -1, -1, 0.0, 0.0);
  }

  Value unary(const Value& a, double val, double da) {
    check(a);
    return push(val, a.id, -1, da, 0.0);
  }

  Value binary(const Value& a, const Value& b, double val, double da, double db) {
    check(a);
    check(b);
    if (a.tape != b.tape) {
      throw std::logic_error("ad: cannot combine values from different tapes");
    }
    return push(val, a.id, b.id, da, db);
  }

  /// Reverse accumulation from `loss`. Returns one adjoint per node id;
  /// nodes that do not reach the loss get 0.
  std::vector<double> backward(const Value& loss) const {
    check(loss);
    std::vector<double> adj(nodes_.size(), 0.0);
    adj[static_cast<std::size_t>(loss.id)] = 1.0;
    for (std::int32_t i = loss.id; i >= 0; --i) {
      const double a = adj[static_cast<std::size_t>(i)];
      if (a == 0.0) continue;
      const Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.p0 >= 0) adj[static_cast<std::size_t>(n.p0)] += n.d0 * a;
      if (n.p1 >= 0) adj[static_cast<std::size_t>(n.p1)] += n.d1 * a;
    }
    return adj;
  }

  static double grad(const std::vector<double>& adjoints, const Value& x) {
    return adjoints.at(static_cast<std::size_t>(x.id));
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }

 private:
  struct Node {
    std::int32_t p0, p1;
    double d0, d1;
  };

  void check(const Value& a) const {
    if (a.tape != this || a.id < 0 || static_cast<std::size_t>(a.id) >= nodes_.size()) {
      throw std::logic_error("ad: value does not belong to this tape");
    }
  }

  Value push(double val, std::int32_t p0, std::int32_t p1, double d0, double d1) {
    nodes_.push_back(Node{p0, p1, d0, d1});
    return Value{this, static_cast<std::int32_t>(nodes_.size() - 1), val};
  }

  std::vector<Node> nodes_;
};

// ---- arithmetic -----------------------------------------------------------

inline Value operator+(const Value& a, const Value& b) {
  return a.tape->binary(a, b, a.v + b.v, 1.0, 1.0);
}
inline Value operator-(const Value& a, const Value& b) {
  return a.tape->binary(a, b, a.v - b.v, 1.0, -1.0);
}
inline Value operator*(const Value& a, const Value& b) {
  return a.tape->binary(a, b, a.v * b.v, b.v, a.v);
}
inline Value operator/(const Value& a, const Value& b) {
  if (b.v == 0.0) throw std::domain_error("ad: division by zero");
  return a.tape->binary(a, b, a.v / b.v, 1.0 / b.v, -a.v / (b.v * b.v));
}
inline Value operator-(const Value& a) { return a.tape->unary(a, -a.v, -1.0); }

inline Value operator+(const Value& a, double c) { return a.tape->unary(a, a.v + c, 1.0); }
inline Value operator+(double c, const Value& a) { return a + c; }
inline Value operator-(const Value& a, double c) { return a.tape->unary(a, a.v - c, 1.0); }
inline Value operator-(double c, const Value& a) { return a.tape->unary(a, c - a.v, -1.0); }
inline Value operator*(const Value& a, double c) { return a.tape->unary(a, a.v * c, c); }
inline Value operator*(double c, const Value& a) { return a * c; }
inline Value operator/(const Value& a, double c) {
  if (c == 0.0) throw std::domain_error("ad: division by zero");
  return a.tape->unary(a, a.v / c, 1.0 / c);
}
inline Value operator/(double c, const Value& a) {
  if (a.v == 0.0) throw std::domain_error("ad: division by zero");
  return a.tape->unary(a, c / a.v, -c / (a.v * a.v));
}

inline bool operator<(const Value& a, const Value& b) { return a.v < b.v; }
inline bool operator>(const Value& a, const Value& b) { return a.v > b.v; }
inline bool operator<=(const Value& a, const Value& b) { return a.v <= b.v; }
inline bool operator>=(const Value& a, const Value& b) { return a.v >= b.v; }
inline bool operator<(const Value& a, double c) { return a.v < c; }
inline bool operator>(const Value& a, double c) { return a.v > c; }
inline bool operator<=(const Value& a, double c) { return a.v <= c; }
inline bool operator>=(const Value& a, double c) { return a.v >= c; }

// ---- elementary functions -------------------------------------------------

namespace detail {
inline double stable_sigmoid(double u) {
  if (u >= 0.0) {
    const double e = std::exp(-u);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(u);
  return e / (1.0 + e);
}
}  // namespace detail

inline Value exp(const Value& a) {
  const double e = std::exp(a.v);
  return a.tape->unary(a, e, e);
}

inline Value log(const Value& a) {
  if (a.v <= 0.0) throw std::domain_error("ad: log of non-positive value");
  return a.tape->unary(a, std::log(a.v), 1.0 / a.v);
}

inline Value sigmoid(const Value& a) {
  const double s = detail::stable_sigmoid(a.v);
  return a.tape->unary(a, s, s * (1.0 - s));
}

/// Inverse sigmoid. Input must already lie strictly inside (0,1); callers
/// clamp first (see geometry::inverse_sigmoid_box).
inline Value logit(const Value& a) {
  if (a.v <= 0.0 || a.v >= 1.0) throw std::domain_error("ad: logit outside (0,1)");
  const double val = std::log(a.v) - std::log1p(-a.v);
  return a.tape->unary(a, val, 1.0 / (a.v * (1.0 - a.v)));
}

inline Value tanh(const Value& a) {
  const double t = std::tanh(a.v);
  return a.tape->unary(a, t, 1.0 - t * t);
}

inline Value sqrt(const Value& a) {
  if (a.v <= 0.0) throw std::domain_error("ad: sqrt of non-positive value");
  const double s = std::sqrt(a.v);
  return a.tape->unary(a, s, 0.5 / s);
}

/// log(1 + e^u), evaluated without overflow. Derivative is sigmoid(u).
inline Value softplus(const Value& a) {
  const double val = std::fmax(a.v, 0.0) + std::log1p(std::exp(-std::fabs(a.v)));
  return a.tape->unary(a, val, detail::stable_sigmoid(a.v));
}

inline Value abs(const Value& a) {
  const double s = a.v > 0.0 ? 1.0 : (a.v < 0.0 ? -1.0 : 0.0);
  return a.tape->unary(a, std::fabs(a.v), s);
}

// min/max select one input; the gradient follows the selected operand.
inline Value min(const Value& a, const Value& b) { return a.v <= b.v ? a : b; }
inline Value max(const Value& a, const Value& b) { return a.v >= b.v ? a : b; }
inline Value min(const Value& a, double c) { return a.v <= c ? a : a.tape->leaf(c); }
inline Value min(double c, const Value& a) { return min(a, c); }
inline Value max(const Value& a, double c) { return a.v >= c ? a : a.tape->leaf(c); }
inline Value max(double c, const Value& a) { return max(a, c); }

inline Value clamp_min(const Value& a, double lo) { return max(a, lo); }
inline Value clamp_max(const Value& a, double hi) { return min(a, hi); }
inline Value clamp(const Value& a, double lo, double hi) { return min(max(a, lo), hi); }

/// Value-identical copy with gradient propagation blocked: reinserted as a
/// fresh leaf, so no upstream partials exist. Idempotent.
inline Value detach(const Value& a) { return a.tape->leaf(a.v); }

// ADL hooks used by the scalar-templated geometry and refinement code.
inline Value detach_scalar(const Value& a) { return detach(a); }
inline bool finite_scalar(const Value& a) { return std::isfinite(a.v); }

inline Value dot(std::span<const Value> x, std::span<const Value> y) {
  if (x.size() != y.size() || x.empty()) {
    throw std::invalid_argument("ad::dot: size mismatch or empty operands");
  }
  Value acc = x[0] * y[0];
  for (std::size_t i = 1; i < x.size(); ++i) acc = acc + x[i] * y[i];
  return acc;
}

// ---- finite-difference oracle ----------------------------------------------

/// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every coordinate.
/// Independent of the tape; used to verify every gradient claim empirically.
inline std::vector<double> finite_difference(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> x, double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference: h must be positive");
  std::vector<double> xs(x.begin(), x.end());
  std::vector<double> g(xs.size(), 0.0);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double orig = xs[i];
    xs[i] = orig + h;
    const double fp = f(xs);
    xs[i] = orig - h;
    const double fm = f(xs);
    xs[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::domain_error("finite_difference: non-finite evaluation");
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace lfdet::ad
