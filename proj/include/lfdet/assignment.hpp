#pragma once

#include <Eigen/Dense>

#include <utility>
#include <vector>

#include "lfdet/geometry.hpp"

namespace lfdet {

/// One candidate or decoded prediction: a box plus per-class confidence
/// scores in [0,1]. source_index identifies the originating candidate and is
/// the deterministic tie-breaker everywhere.
struct Prediction {
  NormalizedBox box;
  std::vector<double> scores;
  int source_index = 0;
};

struct GroundTruth {
  NormalizedBox box;
  int class_id = 0;
};

/// Weights of the matching-cost terms. The classification term defaults to
/// the linear form 1 - p; focal_cls switches to the quadratic focal-style
/// down-weighting (1 - p)^2, which keeps every entry nonnegative.
struct CostWeights {
  double lambda_cls = 2.0;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
  bool focal_cls = false;
};

/// One-to-one matching result. pairs holds (prediction_index,
/// ground_truth_index) with rows ascending; total_cost sums the matched cost
/// entries in that order.
struct Assignment {
  std::vector<std::pair<int, int>> pairs;
  double total_cost = 0.0;
};

/// Partition of N query slots into K contiguous groups of N_k = N/K.
/// Group k owns query indices [k*N_k, (k+1)*N_k).
class CategoryGroupLayout {
 public:
  CategoryGroupLayout(int classes, int queries);

  int classes() const { return classes_; }
  int queries() const { return queries_; }
  int group_size() const { return queries_ / classes_; }
  int group_of(int query_index) const;
  std::vector<int> members_of(int class_id) const;

 private:
  int classes_ = 1;
  int queries_ = 1;
};

/// Cost matrix entry (p,g) =
///   lambda_cls * cls(scores_p[class_g]) + lambda_l1 * l1(box_p, box_g)
///   + lambda_giou * (1 - giou(box_p, box_g)).
/// Throws std::invalid_argument on empty inputs or inconsistent class counts.
Eigen::MatrixXd build_cost_matrix(const std::vector<Prediction>& preds,
                                  const std::vector<GroundTruth>& gts,
                                  const CostWeights& weights);

/// Minimum-total-cost one-to-one matching of size min(rows, cols).
/// Among equally optimal matchings, ties break by lowest row index, then
/// lowest column index. Throws std::invalid_argument on an empty or
/// non-finite matrix.
Assignment hungarian(const Eigen::MatrixXd& cost);

/// The n predictions with the largest max-over-classes score, in descending
/// score order; ties break by source_index.
std::vector<Prediction> baseline_select(const std::vector<Prediction>& preds, int n);

/// Category-specific selection: for each class k the N_k = n/k predictions
/// with the largest scores[k], concatenated group-major in descending
/// scores[k] order. The same source prediction may appear in several groups.
std::pair<std::vector<Prediction>, CategoryGroupLayout> csm_select(
    const std::vector<Prediction>& preds, int n, int classes);

/// Per-class Hungarian matching: group-k predictions are matched only against
/// class-k ground truths, and the per-class matchings are unioned. Ground
/// truths of class k in excess of the group size stay unmatched; their count
/// is reported through excess_gts when non-null.
Assignment category_hungarian(const std::vector<Prediction>& preds,
                              const CategoryGroupLayout& layout,
                              const std::vector<GroundTruth>& gts,
                              const CostWeights& weights,
                              int* excess_gts = nullptr);

}  // namespace lfdet
