#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mcblock/model.hpp"

namespace mcblock {

/// Shannon entropy in nats with the 0 * log 0 = 0 convention.
double shannon_entropy(std::span<const double> probs);

/// (1/N) sum_n sum_c (p_nc - y_nc)^2 against one-hot labels.
double brier(std::span<const std::vector<double>> probs, std::span<const int> labels);

/// Arithmetic mean of per-row entropies.
double mean_entropy(std::span<const std::vector<double>> dists);

/// Greedy suppression by descending confidence; ties broken by lexicographic
/// (x, y, w, h). A box is suppressed when its IoU with a kept box exceeds the
/// threshold.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

/// Strict total order used by NMS and MC merging: higher confidence first.
bool confidence_order(const Detection& a, const Detection& b);

struct ApResult {
  std::map<int, double> per_class;  ///< classes with at least one ground truth
  double map = 0.0;
};

/// All-points interpolated AP per class; a detection's class is its argmax
/// and its score its confidence.
ApResult average_precision(std::span<const std::vector<Detection>> dets,
                           std::span<const GroundTruth> gts, double iou_thresh, int num_classes);

/// Per detection, the ground-truth class it matched (or -1), using the same
/// greedy same-class rule as average_precision.
std::vector<std::vector<int>> match_detections(std::span<const std::vector<Detection>> dets,
                                               std::span<const GroundTruth> gts,
                                               double iou_thresh);

/// Brier over (C+1)-way vectors [obj * p_c..., 1 - obj]; matched detections
/// are scored against their ground-truth class, unmatched ones against the
/// background class C. Returns 0 when there are no detections.
double detection_brier(std::span<const std::vector<Detection>> dets,
                       std::span<const GroundTruth> gts, double iou_thresh, int num_classes);

struct MetricsReport {
  double map_50 = 0.0;
  double mean_entropy = 0.0;
  double brier = 0.0;
  std::map<int, double> per_class_ap;
  int n_images = 0;
  /// Resolved experiment config, in key order.
  std::vector<std::pair<std::string, std::string>> config;
  /// Additional named figures (detection counts, per-image entropy, accuracy).
  std::map<std::string, double> extra;
  /// The only non-deterministic field.
  std::string timestamp;
};

/// Rounds to 6 significant digits.
double round6(double v);

/// UTF-8 JSON with keys map_50, brier, mean_entropy, per_class_ap, n_images,
/// config (+ extra, timestamp). Numbers carry at most 6 significant digits.
std::string report_to_json(const MetricsReport& report);
/// Throws ConfigError naming `source` and the first missing or mistyped key.
MetricsReport report_from_json(const std::string& text, const std::string& source);

}  // namespace mcblock
