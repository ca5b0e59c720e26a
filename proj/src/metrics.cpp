#include "lfdet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include <nlohmann/json.hpp>

namespace lfdet {

namespace {

void check_pair(const AssignmentRecord& rec_j, const AssignmentRecord& rec_prev) {
  validate_record(rec_j);
  validate_record(rec_prev);
  if (rec_j.matched_gt.size() != rec_prev.matched_gt.size()) {
    throw std::invalid_argument("stability metrics: record lengths differ");
  }
}

}  // namespace

void validate_record(const AssignmentRecord& rec, int num_gts) {
  if (rec.matched_gt.size() != rec.matched_class.size()) {
    throw std::invalid_argument("AssignmentRecord: V and T lengths differ");
  }
  for (std::size_t n = 0; n < rec.matched_gt.size(); ++n) {
    const int v = rec.matched_gt[n];
    const int t = rec.matched_class[n];
    if ((v == -1) != (t == -1)) {
      throw std::invalid_argument("AssignmentRecord: V/T background markers disagree");
    }
    if (v < -1 || (num_gts >= 0 && v >= num_gts)) {
      throw std::invalid_argument("AssignmentRecord: gt index out of range");
    }
    if (v != -1 && t < 0) {
      throw std::invalid_argument("AssignmentRecord: negative class on a matched slot");
    }
  }
}

int fcs(const AssignmentRecord& rec_j, const AssignmentRecord& rec_prev) {
  check_pair(rec_j, rec_prev);
  int count = 0;
  for (std::size_t n = 0; n < rec_j.matched_class.size(); ++n) {
    const int t = rec_j.matched_class[n];
    const int tp = rec_prev.matched_class[n];
    if (t != -1 && tp != -1 && t != tp) ++count;
  }
  return count;
}

int fos(const AssignmentRecord& rec_j, const AssignmentRecord& rec_prev) {
  check_pair(rec_j, rec_prev);
  int count = 0;
  for (std::size_t n = 0; n < rec_j.matched_gt.size(); ++n) {
    const int v = rec_j.matched_gt[n];
    const int vp = rec_prev.matched_gt[n];
    if (v != -1 && vp != -1 && v != vp) ++count;
  }
  return count;
}

double fis(const AssignmentRecord& rec_j, const AssignmentRecord& rec_prev) {
  if (rec_j.matched_gt.empty()) {
    throw std::invalid_argument("fis: empty record");
  }
  const double n = static_cast<double>(rec_j.matched_gt.size());
  return (fcs(rec_j, rec_prev) + fos(rec_j, rec_prev)) / (2.0 * n);
}

double is_metric(const AssignmentRecord& rec_j, const AssignmentRecord& rec_prev) {
  check_pair(rec_j, rec_prev);
  if (rec_j.matched_gt.empty()) {
    throw std::invalid_argument("is_metric: empty record");
  }
  int count = 0;
  for (std::size_t n = 0; n < rec_j.matched_gt.size(); ++n) {
    if (rec_j.matched_gt[n] != rec_prev.matched_gt[n]) ++count;
  }
  return static_cast<double>(count) / static_cast<double>(rec_j.matched_gt.size());
}

StabilityRow dataset_stability(const EpochLog& log_j, const EpochLog& log_prev) {
  if (log_j.empty() || log_j.size() != log_prev.size()) {
    throw std::invalid_argument("dataset_stability: image sets differ");
  }
  StabilityRow row;
  for (const auto& [image_id, rec] : log_j) {
    const auto it = log_prev.find(image_id);
    if (it == log_prev.end()) {
      throw std::invalid_argument("dataset_stability: image sets differ");
    }
    row.is += is_metric(rec, it->second);
    row.fcs += fcs(rec, it->second);
    row.fos += fos(rec, it->second);
    row.fis += fis(rec, it->second);
  }
  const double count = static_cast<double>(log_j.size());
  row.is /= count;
  row.fcs /= count;
  row.fos /= count;
  row.fis /= count;
  return row;
}

double dataset_fis(const EpochLog& log_j, const EpochLog& log_prev) {
  return dataset_stability(log_j, log_prev).fis;
}

std::string to_json_line(const AssignmentRecord& rec) {
  nlohmann::json j;
  j["epoch"] = rec.epoch;
  j["image_id"] = rec.image_id;
  j["V"] = rec.matched_gt;
  j["T"] = rec.matched_class;
  return j.dump();
}

AssignmentRecord parse_record_line(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line);  // throws nlohmann parse_error
  AssignmentRecord rec;
  rec.epoch = j.at("epoch").get<int>();
  rec.image_id = j.at("image_id").get<int>();
  rec.matched_gt = j.at("V").get<std::vector<int>>();
  rec.matched_class = j.at("T").get<std::vector<int>>();
  validate_record(rec);
  return rec;
}

std::map<int, EpochLog> load_assignment_log(std::istream& in) {
  std::map<int, EpochLog> logs;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      AssignmentRecord rec = parse_record_line(line);
      logs[rec.epoch][rec.image_id] = std::move(rec);
    } catch (const std::exception& e) {
      throw std::invalid_argument("assignment log line " + std::to_string(line_no) + ": " +
                                  e.what());
    }
  }
  if (logs.empty()) {
    throw std::invalid_argument("assignment log: no records");
  }
  return logs;
}

// ---- average precision ------------------------------------------------------

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace {

struct RankedDetection {
  double confidence;
  int image;
  NormalizedBox box;
};

// Content-based ordering so the ranking is independent of input order.
bool rank_before(const RankedDetection& a, const RankedDetection& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  return std::tie(a.image, a.box.cx, a.box.cy, a.box.w, a.box.h) <
         std::tie(b.image, b.box.cx, b.box.cy, b.box.w, b.box.h);
}

double interpolated_ap(const std::vector<char>& is_tp, int num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (const char t : is_tp) {
    t ? ++tp : ++fp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  // Monotone envelope, then 101-point interpolation.
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) {
    precision[static_cast<std::size_t>(i)] =
        std::max(precision[static_cast<std::size_t>(i)], precision[static_cast<std::size_t>(i) + 1]);
  }
  double ap = 0.0;
  std::size_t j = 0;
  for (int i = 0; i <= 100; ++i) {
    const double r = static_cast<double>(i) / 100.0;
    while (j < recall.size() && recall[j] < r) ++j;
    if (j < recall.size()) ap += precision[j];
  }
  return ap / 101.0;
}

}  // namespace

ApSummary ap_eval(const std::vector<std::vector<DetectionResult>>& detections,
                  const std::vector<std::vector<GroundTruth>>& ground_truths,
                  int num_classes, std::span<const double> thresholds) {
  if (detections.size() != ground_truths.size()) {
    throw std::invalid_argument("ap_eval: detection and ground-truth image counts differ");
  }
  for (const double t : thresholds) {
    if (!(t > 0.0 && t <= 1.0)) {
      throw std::invalid_argument("ap_eval: thresholds must lie in (0, 1]");
    }
  }
  if (thresholds.empty()) {
    throw std::invalid_argument("ap_eval: no thresholds");
  }

  ApSummary summary;
  summary.ap50 = std::numeric_limits<double>::quiet_NaN();
  summary.ap75 = std::numeric_limits<double>::quiet_NaN();
  if (detections.empty()) return summary;

  const int images = static_cast<int>(detections.size());
  double ap_sum = 0.0;
  for (std::size_t ti = 0; ti < thresholds.size(); ++ti) {
    const double thr = thresholds[ti];
    double class_ap_sum = 0.0;
    int classes_with_gt = 0;
    for (int k = 0; k < num_classes; ++k) {
      int num_gt = 0;
      for (const auto& gts : ground_truths) {
        for (const auto& g : gts) num_gt += (g.class_id == k) ? 1 : 0;
      }
      if (num_gt == 0) continue;
      ++classes_with_gt;

      std::vector<RankedDetection> ranked;
      for (int img = 0; img < images; ++img) {
        for (const auto& d : detections[static_cast<std::size_t>(img)]) {
          if (d.class_id == k) ranked.push_back({d.confidence, img, d.box});
        }
      }
      std::sort(ranked.begin(), ranked.end(), rank_before);

      std::vector<std::vector<char>> gt_used(static_cast<std::size_t>(images));
      for (int img = 0; img < images; ++img) {
        gt_used[static_cast<std::size_t>(img)].assign(
            ground_truths[static_cast<std::size_t>(img)].size(), 0);
      }

      std::vector<char> is_tp;
      is_tp.reserve(ranked.size());
      for (const auto& det : ranked) {
        const auto& gts = ground_truths[static_cast<std::size_t>(det.image)];
        int best_gt = -1;
        double best_iou = 0.0;
        for (std::size_t g = 0; g < gts.size(); ++g) {
          if (gts[g].class_id != k || gt_used[static_cast<std::size_t>(det.image)][g]) continue;
          const double overlap = iou(det.box, gts[g].box);
          if (overlap > best_iou) {
            best_iou = overlap;
            best_gt = static_cast<int>(g);
          }
        }
        if (best_gt >= 0 && best_iou >= thr) {
          gt_used[static_cast<std::size_t>(det.image)][static_cast<std::size_t>(best_gt)] = 1;
          is_tp.push_back(1);
        } else {
          is_tp.push_back(0);
        }
      }
      class_ap_sum += interpolated_ap(is_tp, num_gt);
    }

    const double ap_t = classes_with_gt > 0 ? class_ap_sum / classes_with_gt : 0.0;
    ap_sum += ap_t;
    if (std::fabs(thr - 0.5) < 1e-9) summary.ap50 = ap_t;
    if (std::fabs(thr - 0.75) < 1e-9) summary.ap75 = ap_t;
  }
  summary.ap = ap_sum / static_cast<double>(thresholds.size());
  return summary;
}

}  // namespace lfdet
