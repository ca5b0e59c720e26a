#include "lfdet/selfcheck.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "lfdet/autodiff.hpp"
#include "lfdet/geometry.hpp"
#include "lfdet/metrics.hpp"
#include "lfdet/refinement.hpp"

namespace lfdet::selfcheck {

namespace {

void enumerate(const Eigen::MatrixXd& cost, int row, int matched, int target,
               std::vector<char>& col_used, std::vector<std::pair<int, int>>& current,
               double running, Assignment& best, bool& has_best) {
  const int rows = static_cast<int>(cost.rows());
  const int cols = static_cast<int>(cost.cols());
  if (matched == target) {
    if (!has_best || running < best.total_cost) {
      best.pairs = current;
      best.total_cost = running;
      has_best = true;
    }
    return;
  }
  if (row == rows) return;

  for (int c = 0; c < cols; ++c) {
    if (col_used[static_cast<std::size_t>(c)]) continue;
    col_used[static_cast<std::size_t>(c)] = 1;
    current.emplace_back(row, c);
    enumerate(cost, row + 1, matched + 1, target, col_used, current, running + cost(row, c),
              best, has_best);
    current.pop_back();
    col_used[static_cast<std::size_t>(c)] = 0;
  }
  if (rows - row - 1 >= target - matched) {
    enumerate(cost, row + 1, matched, target, col_used, current, running, best, has_best);
  }
}

}  // namespace

Assignment brute_force_assignment(const Eigen::MatrixXd& cost) {
  if (cost.rows() == 0 || cost.cols() == 0) {
    throw std::invalid_argument("brute_force_assignment: empty cost matrix");
  }
  const int target = static_cast<int>(std::min(cost.rows(), cost.cols()));
  std::vector<char> col_used(static_cast<std::size_t>(cost.cols()), 0);
  std::vector<std::pair<int, int>> current;
  Assignment best;
  bool has_best = false;
  enumerate(cost, 0, 0, target, col_used, current, 0.0, best, has_best);
  return best;
}

CheckResult check_hungarian_optimality(const Matcher& matcher, int trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dim(1, 6);
  std::uniform_real_distribution<double> cont(0.0, 1.0);
  std::uniform_int_distribution<int> grid(0, 4);

  for (int t = 0; t < trials; ++t) {
    const int rows = dim(rng);
    const int cols = dim(rng);
    const bool integer_costs = (t % 10) < 3;  // ties happen in the integer regime
    Eigen::MatrixXd cost(rows, cols);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        cost(r, c) = integer_costs ? static_cast<double>(grid(rng)) : cont(rng);
      }
    }
    const Assignment got = matcher(cost);
    const Assignment want = brute_force_assignment(cost);
    if (got.total_cost != want.total_cost ||
        got.pairs.size() != static_cast<std::size_t>(std::min(rows, cols))) {
      std::ostringstream os;
      os << "trial " << t << ": matcher cost " << got.total_cost << " vs brute force "
         << want.total_cost << " on " << rows << "x" << cols;
      return {"hungarian_optimality", false, os.str()};
    }
  }
  return {"hungarian_optimality", true,
          std::to_string(trials) + " random matrices up to 6x6 match brute force exactly"};
}

CheckResult check_gradient_consistency() {
  double worst_rel = 0.0;
  for (const auto& scheme : RefineScheme::all()) {
    for (const int layers : {3, 6}) {
      const FlowCheck check = check_gradient_flow(scheme, layers, 17);
      worst_rel = std::max(worst_rel, check.max_rel_diff);
      if (!check.pattern_matches) {
        return {"gradient_check", false,
                "flow pattern mismatch for " + scheme.name() + " at L=" + std::to_string(layers)};
      }
      if (check.max_rel_diff > 1e-4) {
        return {"gradient_check", false,
                "tape vs finite differences rel err " + std::to_string(check.max_rel_diff) +
                    " for " + scheme.name()};
      }
    }
  }

  // A small composite graph through the box measures.
  ad::Tape tape;
  const BoxT<ad::Value> a{tape.leaf(0.4), tape.leaf(0.45), tape.leaf(0.3), tape.leaf(0.25)};
  const BoxT<ad::Value> b{tape.leaf(0.55), tape.leaf(0.52), tape.leaf(0.2), tape.leaf(0.35)};
  const auto loss = giou(a, b) - l1_box_distance(a, b);
  const auto adj = tape.backward(loss);
  const auto f = [](std::span<const double> x) {
    const NormalizedBox pa{x[0], x[1], x[2], x[3]};
    const NormalizedBox pb{x[4], x[5], x[6], x[7]};
    return giou(pa, pb) - l1_box_distance(pa, pb);
  };
  const std::vector<double> x{0.4, 0.45, 0.3, 0.25, 0.55, 0.52, 0.2, 0.35};
  const auto fd = ad::finite_difference(f, x, 1e-6);
  const ad::Value leaves[] = {a.cx, a.cy, a.w, a.h, b.cx, b.cy, b.w, b.h};
  for (int i = 0; i < 8; ++i) {
    const double g = ad::Tape::grad(adj, leaves[i]);
    if (std::fabs(g - fd[static_cast<std::size_t>(i)]) > 1e-5) {
      return {"gradient_check", false, "box-measure gradient mismatch at coordinate " +
                                           std::to_string(i)};
    }
  }
  std::ostringstream os;
  os << "all schemes at L in {3,6}; worst tape-vs-fd rel err " << worst_rel;
  return {"gradient_check", true, os.str()};
}

CheckResult check_metric_oracles() {
  const auto rec = [](std::vector<int> v, std::vector<int> t) {
    AssignmentRecord r;
    r.matched_gt = std::move(v);
    r.matched_class = std::move(t);
    return r;
  };

  const auto prev = rec({0, 1, 2, -1}, {7, 7, 5, -1});
  const auto next = rec({1, 0, 2, -1}, {7, 7, 5, -1});
  if (fcs(next, prev) != 0) return {"metric_oracles", false, "FCS != 0 on the worked example"};
  if (fos(next, prev) != 2) return {"metric_oracles", false, "FOS != 2 on the worked example"};
  if (fis(next, prev) != 0.25) return {"metric_oracles", false, "FIS != 0.25 on the worked example"};

  const auto a = rec({0, -1}, {3, -1});
  const auto b = rec({0, 1}, {3, 4});
  if (is_metric(b, a) != 0.5) return {"metric_oracles", false, "IS != 0.5 on the worked example"};

  const auto c1 = rec({0, -1, 2}, {3, -1, 5});
  const auto c2 = rec({1, -1, 2}, {4, -1, 5});
  if (fcs(c2, c1) != 1) return {"metric_oracles", false, "FCS != 1 on the class-flip example"};

  if (fis(prev, prev) != 0.0 || is_metric(prev, prev) != 0.0) {
    return {"metric_oracles", false, "identical records gave nonzero instability"};
  }
  return {"metric_oracles", true, "hand-constructed FCS/FOS/FIS/IS values reproduced exactly"};
}

CheckResult check_refinement_identities() {
  const NormalizedBox r0{0.5, 0.5, 0.5, 0.5};
  const std::vector<BoxOffset> zero(3, BoxOffset{0, 0, 0, 0});
  for (const auto& scheme : RefineScheme::all()) {
    const auto trace = build_trace(r0, zero, scheme);
    for (const auto& rep : trace.reported) {
      if (rep.cx != 0.5 || rep.cy != 0.5 || rep.w != 0.5 || rep.h != 0.5) {
        return {"refinement_identities", false, "zero offsets are not the identity for " +
                                                    scheme.name()};
      }
    }
  }

  const std::vector<BoxOffset> offsets{
      {0.2, 0.2, 0.2, 0.2}, {0.1, 0.1, 0.1, 0.1}, {0.4, 0.4, 0.4, 0.4}};
  const std::span<const BoxOffset> all(offsets);
  const std::span<const BoxOffset> two = all.subspan(0, 2);
  const std::span<const BoxOffset> one = all.subspan(0, 1);

  const auto lfd_se = RefineScheme::lfd(LfdAggregate::Sum, LfdWeighting::Equal);
  const auto full = reported_box(r0, all, 1, lfd_se);
  if (std::fabs(full.cx - 1.0 / (1.0 + std::exp(-0.7))) > 1e-12 ||
      std::fabs(full.cx - 0.66819) > 1e-5) {
    return {"refinement_identities", false, "worked sigma(0.7) value mismatch"};
  }
  const auto truncated_two = reported_box(r0, two, 1, lfd_se);
  const auto as_lft = reported_box(r0, two, 1, RefineScheme::lft());
  if (truncated_two.cx != as_lft.cx || truncated_two.w != as_lft.w) {
    return {"refinement_identities", false, "two-summand truncation does not reproduce LFT"};
  }
  const auto truncated_one = reported_box(r0, one, 1, lfd_se);
  const auto as_lfo = reported_box(r0, one, 1, RefineScheme::lfo());
  if (truncated_one.cx != as_lfo.cx) {
    return {"refinement_identities", false, "single-summand truncation does not reproduce LFO"};
  }
  const auto last_lfd = reported_box(r0, all, 3, lfd_se);
  const auto last_lfo = reported_box(r0, all, 3, RefineScheme::lfo());
  if (last_lfd.cx != last_lfo.cx) {
    return {"refinement_identities", false, "LFD Sum/Equal differs from LFO at l = L"};
  }
  return {"refinement_identities", true, "identities hold exactly"};
}

std::vector<CheckResult> run_all(const Matcher& matcher) {
  std::vector<CheckResult> results;
  results.push_back(check_hungarian_optimality(matcher));
  results.push_back(check_gradient_consistency());
  results.push_back(check_metric_oracles());
  results.push_back(check_refinement_identities());
  return results;
}

}  // namespace lfdet::selfcheck
