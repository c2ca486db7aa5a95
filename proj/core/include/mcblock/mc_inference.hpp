#pragma once

#include <vector>

#include "mcblock/model.hpp"
#include "mcblock/random.hpp"

namespace mcblock {

struct McConfig {
  int samples = 30;
  double merge_iou = 0.5;
  double min_support_frac = 0.3;
  Method method = Method::dropblock;
  int block_size = 3;
  double drop_prob = 0.1;
  bool per_channel = false;
  /// Per-sample decode threshold and NMS IoU applied before merging.
  double conf_thresh = 0.05;
  double nms_iou = 0.45;
  /// Worker threads for the S passes; results do not depend on it.
  int threads = 1;

  void validate() const;
  StochasticSite site() const;
  /// Smallest support a merged cluster needs: ceil(min_support_frac * S).
  int min_support() const;
};

struct McClassification {
  std::vector<double> mean_probs;
  double entropy = 0.0;
};

/// Pass s draws its masks from rng.split(s). With method == none a single
/// deterministic pass is returned regardless of S.
McClassification mc_classify(const Tensor& image, const ModelParams& params, const McConfig& cfg,
                             const CounterRng& rng);

/// Per-sample detection lists for one image (decode + per-sample NMS).
std::vector<std::vector<Detection>> mc_sample_detections(const Tensor& image,
                                                         const ModelParams& params,
                                                         const McConfig& cfg,
                                                         const CounterRng& rng);

/// Greedy consensus clustering of S per-sample lists. Members are taken in
/// descending objectness (ties: lexicographic box, then class probabilities);
/// a cluster holds at most one detection per sample, each with IoU >=
/// merge_iou to the leader. Clusters below min_support() are dropped.
std::vector<Detection> merge_samples(const std::vector<std::vector<Detection>>& per_sample,
                                     const McConfig& cfg);

std::vector<Detection> mc_detect(const Tensor& image, const ModelParams& params,
                                 const McConfig& cfg, const CounterRng& rng);

/// Shannon entropy (nats) of the detection's class distribution.
double detection_entropy(const Detection& d);

}  // namespace mcblock
