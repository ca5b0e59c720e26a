#include "lfdet/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace lfdet {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Shortest-augmenting-path assignment with potentials for r <= c.
// Returns the matched column per row; optimal total cost, not canonical.
std::vector<int> solve_rows_leq_cols(const Eigen::MatrixXd& a) {
  const int rows = static_cast<int>(a.rows());
  const int cols = static_cast<int>(a.cols());
  std::vector<double> u(static_cast<std::size_t>(rows) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(cols) + 1, 0.0);
  std::vector<int> match(static_cast<std::size_t>(cols) + 1, 0);  // col -> row, 1-based
  std::vector<int> way(static_cast<std::size_t>(cols) + 1, 0);

  for (int i = 1; i <= rows; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(cols) + 1, kInf);
    std::vector<char> used(static_cast<std::size_t>(cols) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = match[static_cast<std::size_t>(j0)];
      int j1 = 0;
      double delta = kInf;
      for (int j = 1; j <= cols; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = a(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                           v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= cols; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int> row_to_col(static_cast<std::size_t>(rows), -1);
  for (int j = 1; j <= cols; ++j) {
    if (match[static_cast<std::size_t>(j)] > 0) {
      row_to_col[static_cast<std::size_t>(match[static_cast<std::size_t>(j)]) - 1] = j - 1;
    }
  }
  return row_to_col;
}

double min_matching_cost(const Eigen::MatrixXd& a) {
  if (a.rows() == 0 || a.cols() == 0) return 0.0;
  double total = 0.0;
  if (a.rows() <= a.cols()) {
    const auto cols = solve_rows_leq_cols(a);
    for (int r = 0; r < a.rows(); ++r) total += a(r, cols[static_cast<std::size_t>(r)]);
  } else {
    const Eigen::MatrixXd t = a.transpose();
    const auto cols = solve_rows_leq_cols(t);
    for (int r = 0; r < t.rows(); ++r) total += t(r, cols[static_cast<std::size_t>(r)]);
  }
  return total;
}

Eigen::MatrixXd submatrix(const Eigen::MatrixXd& a, int first_row,
                          const std::vector<int>& cols) {
  const int rows = static_cast<int>(a.rows()) - first_row;
  Eigen::MatrixXd s(rows, static_cast<int>(cols.size()));
  for (int r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) {
      s(r, static_cast<int>(c)) = a(first_row + r, cols[c]);
    }
  }
  return s;
}

double cls_cost(double score, bool focal) {
  const double miss = 1.0 - score;
  return focal ? miss * miss : miss;
}

int check_class_count(const std::vector<Prediction>& preds,
                      const std::vector<GroundTruth>& gts) {
  const int k = static_cast<int>(preds.front().scores.size());
  if (k == 0) throw std::invalid_argument("build_cost_matrix: prediction with no scores");
  for (const auto& p : preds) {
    if (static_cast<int>(p.scores.size()) != k) {
      throw std::invalid_argument("build_cost_matrix: inconsistent class counts");
    }
  }
  for (const auto& g : gts) {
    if (g.class_id < 0 || g.class_id >= k) {
      throw std::invalid_argument("build_cost_matrix: ground-truth class out of range");
    }
  }
  return k;
}

}  // namespace

CategoryGroupLayout::CategoryGroupLayout(int classes, int queries)
    : classes_(classes), queries_(queries) {
  if (classes < 1 || queries < 1) {
    throw std::invalid_argument("CategoryGroupLayout: classes and queries must be positive");
  }
  if (queries % classes != 0) {
    throw std::invalid_argument("CategoryGroupLayout: query count not divisible by class count");
  }
}

int CategoryGroupLayout::group_of(int query_index) const {
  if (query_index < 0 || query_index >= queries_) {
    throw std::invalid_argument("CategoryGroupLayout: query index out of range");
  }
  return query_index / group_size();
}

std::vector<int> CategoryGroupLayout::members_of(int class_id) const {
  if (class_id < 0 || class_id >= classes_) {
    throw std::invalid_argument("CategoryGroupLayout: class out of range");
  }
  std::vector<int> out(static_cast<std::size_t>(group_size()));
  std::iota(out.begin(), out.end(), class_id * group_size());
  return out;
}

Eigen::MatrixXd build_cost_matrix(const std::vector<Prediction>& preds,
                                  const std::vector<GroundTruth>& gts,
                                  const CostWeights& weights) {
  if (preds.empty() || gts.empty()) {
    throw std::invalid_argument("build_cost_matrix: empty predictions or ground truths");
  }
  check_class_count(preds, gts);

  Eigen::MatrixXd cost(static_cast<int>(preds.size()), static_cast<int>(gts.size()));
  for (std::size_t p = 0; p < preds.size(); ++p) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double c = cls_cost(preds[p].scores[static_cast<std::size_t>(gts[g].class_id)],
                                weights.focal_cls);
      cost(static_cast<int>(p), static_cast<int>(g)) =
          weights.lambda_cls * c +
          weights.lambda_l1 * l1_box_distance(preds[p].box, gts[g].box) +
          weights.lambda_giou * (1.0 - giou(preds[p].box, gts[g].box));
    }
  }
  return cost;
}

Assignment hungarian(const Eigen::MatrixXd& cost) {
  if (cost.rows() == 0 || cost.cols() == 0) {
    throw std::invalid_argument("hungarian: empty cost matrix");
  }
  if (!cost.allFinite()) {
    throw std::invalid_argument("hungarian: non-finite cost entries");
  }

  const int rows = static_cast<int>(cost.rows());
  const int cols = static_cast<int>(cost.cols());
  const int target = std::min(rows, cols);
  const double best = min_matching_cost(cost);
  const double tol = 1e-9 * std::max(1.0, std::fabs(best));

  // Re-derive the matching row by row so equally optimal solutions resolve
  // to the lexicographically smallest one (lowest row, then lowest column).
  std::vector<int> cols_left(static_cast<std::size_t>(cols));
  std::iota(cols_left.begin(), cols_left.end(), 0);

  Assignment out;
  double fixed = 0.0;
  for (int r = 0; r < rows && static_cast<int>(out.pairs.size()) < target; ++r) {
    const int rows_after = rows - r - 1;
    const int need = target - static_cast<int>(out.pairs.size());

    int chosen = -1;
    double best_fallback = kInf;
    int fallback = -1;
    for (std::size_t ci = 0; ci < cols_left.size(); ++ci) {
      std::vector<int> rest = cols_left;
      rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(ci));
      const double cand =
          fixed + cost(r, cols_left[ci]) + min_matching_cost(submatrix(cost, r + 1, rest));
      if (cand <= best + tol) {
        chosen = cols_left[ci];
        break;
      }
      if (cand < best_fallback) {
        best_fallback = cand;
        fallback = cols_left[ci];
      }
    }

    if (chosen < 0 && rows_after >= need) {
      // Leaving row r unmatched must itself be optimal; otherwise fall
      // through to the cheapest column.
      const double skip = fixed + min_matching_cost(submatrix(cost, r + 1, cols_left));
      if (skip <= best + tol) continue;
    }
    if (chosen < 0) chosen = fallback;

    out.pairs.emplace_back(r, chosen);
    fixed += cost(r, chosen);
    cols_left.erase(std::find(cols_left.begin(), cols_left.end(), chosen));
  }

  out.total_cost = 0.0;
  for (const auto& [r, c] : out.pairs) out.total_cost += cost(r, c);
  return out;
}

std::vector<Prediction> baseline_select(const std::vector<Prediction>& preds, int n) {
  if (n < 0 || n > static_cast<int>(preds.size())) {
    throw std::invalid_argument("baseline_select: n exceeds candidate count");
  }
  std::vector<int> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  const auto max_score = [&](int i) {
    const auto& s = preds[static_cast<std::size_t>(i)].scores;
    if (s.empty()) throw std::invalid_argument("baseline_select: prediction with no scores");
    return *std::max_element(s.begin(), s.end());
  };
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const double sa = max_score(a), sb = max_score(b);
    if (sa != sb) return sa > sb;
    return preds[static_cast<std::size_t>(a)].source_index <
           preds[static_cast<std::size_t>(b)].source_index;
  });
  std::vector<Prediction> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(preds[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
  return out;
}

std::pair<std::vector<Prediction>, CategoryGroupLayout> csm_select(
    const std::vector<Prediction>& preds, int n, int classes) {
  if (classes < 1 || n < 1 || n % classes != 0) {
    throw std::invalid_argument("csm_select: query count must be a positive multiple of the class count");
  }
  const int per_class = n / classes;
  if (static_cast<int>(preds.size()) < per_class) {
    throw std::invalid_argument("csm_select: fewer candidates than group size");
  }
  for (const auto& p : preds) {
    if (static_cast<int>(p.scores.size()) != classes) {
      throw std::invalid_argument("csm_select: prediction class count mismatch");
    }
  }

  std::vector<Prediction> out;
  out.reserve(static_cast<std::size_t>(n));
  std::vector<int> order(preds.size());
  for (int k = 0; k < classes; ++k) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      const double sa = preds[static_cast<std::size_t>(a)].scores[static_cast<std::size_t>(k)];
      const double sb = preds[static_cast<std::size_t>(b)].scores[static_cast<std::size_t>(k)];
      if (sa != sb) return sa > sb;
      return preds[static_cast<std::size_t>(a)].source_index <
             preds[static_cast<std::size_t>(b)].source_index;
    });
    for (int i = 0; i < per_class; ++i) {
      out.push_back(preds[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
    }
  }
  return {std::move(out), CategoryGroupLayout(classes, n)};
}

Assignment category_hungarian(const std::vector<Prediction>& preds,
                              const CategoryGroupLayout& layout,
                              const std::vector<GroundTruth>& gts,
                              const CostWeights& weights,
                              int* excess_gts) {
  if (static_cast<int>(preds.size()) != layout.queries()) {
    throw std::invalid_argument("category_hungarian: layout does not match predictions");
  }
  if (excess_gts) *excess_gts = 0;

  Assignment out;
  for (int k = 0; k < layout.classes(); ++k) {
    std::vector<int> gt_idx;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].class_id == k) gt_idx.push_back(static_cast<int>(g));
    }
    if (gt_idx.empty()) continue;

    const std::vector<int> pred_idx = layout.members_of(k);
    std::vector<Prediction> sub_preds;
    sub_preds.reserve(pred_idx.size());
    for (int p : pred_idx) sub_preds.push_back(preds[static_cast<std::size_t>(p)]);
    std::vector<GroundTruth> sub_gts;
    sub_gts.reserve(gt_idx.size());
    for (int g : gt_idx) sub_gts.push_back(gts[static_cast<std::size_t>(g)]);

    if (excess_gts && gt_idx.size() > pred_idx.size()) {
      *excess_gts += static_cast<int>(gt_idx.size() - pred_idx.size());
    }

    const Assignment sub = hungarian(build_cost_matrix(sub_preds, sub_gts, weights));
    for (const auto& [p, g] : sub.pairs) {
      out.pairs.emplace_back(pred_idx[static_cast<std::size_t>(p)],
                             gt_idx[static_cast<std::size_t>(g)]);
    }
    out.total_cost += sub.total_cost;
  }
  return out;
}

}  // namespace lfdet
