#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lfdet/assignment.hpp"

namespace lfdet::selfcheck {

/// Exhaustive minimum-cost matching found by enumerating every injection of
/// the smaller side into the larger, rows in ascending order and columns in
/// ascending order within a row. Independent oracle for hungarian(); only
/// usable on small matrices.
Assignment brute_force_assignment(const Eigen::MatrixXd& cost);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

using Matcher = std::function<Assignment(const Eigen::MatrixXd&)>;

/// Total cost must equal the brute-force enumeration exactly on random
/// matrices up to 6x6 (mixed continuous and small-integer costs).
CheckResult check_hungarian_optimality(const Matcher& matcher, int trials = 1000,
                                       std::uint64_t seed = 1);

/// Tape gradients vs central finite differences on the refinement formulas,
/// plus the symbolic/tape/finite-difference flow pattern agreement.
CheckResult check_gradient_consistency();

/// The hand-constructed stability-metric examples must reproduce exactly.
CheckResult check_metric_oracles();

/// Zero-offset identity, LFD truncation identities, and the worked
/// sigmoid(0.7) value.
CheckResult check_refinement_identities();

/// All suites in fixed order. `matcher` exists so a deliberately broken
/// matcher can be injected to exercise the failure path.
std::vector<CheckResult> run_all(const Matcher& matcher = [](const Eigen::MatrixXd& m) {
  return hungarian(m);
});

}  // namespace lfdet::selfcheck
