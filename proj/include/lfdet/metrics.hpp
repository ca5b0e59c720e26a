#pragma once

#include <istream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lfdet/assignment.hpp"
#include "lfdet/geometry.hpp"

namespace lfdet {

/// Final-layer assignment of every query slot for one image in one epoch.
/// matched_gt (V) holds the matched ground-truth index or -1; matched_class
/// (T) holds the matched ground truth's class or -1. The two agree on which
/// slots are background.
struct AssignmentRecord {
  int epoch = 0;
  int image_id = 0;
  std::vector<int> matched_gt;
  std::vector<int> matched_class;
};

/// Throws std::invalid_argument when V/T lengths differ, -1 markers
/// disagree, or a gt index is out of range (checked when num_gts >= 0).
void validate_record(const AssignmentRecord& rec, int num_gts = -1);

/// Count of slots whose assigned foreground CLASS changed between
/// consecutive epochs; slots that are background in either epoch never count.
int fcs(const AssignmentRecord& rec_j, const AssignmentRecord& rec_prev);

/// Count of slots whose assigned foreground OBJECT changed between
/// consecutive epochs; background involvement never counts.
int fos(const AssignmentRecord& rec_j, const AssignmentRecord& rec_prev);

/// (fcs + fos) / (2 * N_pred), in [0,1].
double fis(const AssignmentRecord& rec_j, const AssignmentRecord& rec_prev);

/// Fraction of slots whose assignment changed at all, including
/// foreground<->background flips. Always >= fos / N_pred.
double is_metric(const AssignmentRecord& rec_j, const AssignmentRecord& rec_prev);

/// One epoch's records keyed by image id.
using EpochLog = std::map<int, AssignmentRecord>;

struct StabilityRow {
  double is = 0.0;
  double fcs = 0.0;
  double fos = 0.0;
  double fis = 0.0;
};

/// Per-image metrics averaged over the dataset. Throws when the image id
/// sets differ.
StabilityRow dataset_stability(const EpochLog& log_j, const EpochLog& log_prev);
double dataset_fis(const EpochLog& log_j, const EpochLog& log_prev);

/// One record per line as a flat JSON object with fields epoch, image_id,
/// V, T.
std::string to_json_line(const AssignmentRecord& rec);
AssignmentRecord parse_record_line(const std::string& line);

/// Parses a whole log; throws std::invalid_argument naming the 1-based line
/// number of the first malformed line. Returns epochs in ascending order.
std::map<int, EpochLog> load_assignment_log(std::istream& in);

// ---- average precision ------------------------------------------------------

struct DetectionResult {
  NormalizedBox box;
  int class_id = 0;
  double confidence = 0.0;
};

struct ApSummary {
  double ap = 0.0;    // mean over thresholds
  double ap50 = 0.0;  // threshold 0.5 (NaN when absent from the list)
  double ap75 = 0.0;  // threshold 0.75 (NaN when absent)
};

/// Thresholds 0.5:0.05:0.95.
std::vector<double> coco_thresholds();

/// Per-class, per-threshold 101-point interpolated average precision,
/// averaged over classes that have ground truths, then over thresholds.
/// Detection order is irrelevant: ranking ties resolve on content. Empty
/// inputs yield AP 0.
ApSummary ap_eval(const std::vector<std::vector<DetectionResult>>& detections,
                  const std::vector<std::vector<GroundTruth>>& ground_truths,
                  int num_classes, std::span<const double> thresholds);

}  // namespace lfdet
