#include "mcblock/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <json.hpp>

#include "mcblock/error.hpp"

namespace mcblock {

double shannon_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

double brier(std::span<const std::vector<double>> probs, std::span<const int> labels) {
  if (probs.empty()) throw ContractError("brier score of an empty list");
  if (probs.size() != labels.size()) throw ContractError("brier: probs and labels differ in length");
  double total = 0.0;
  for (std::size_t n = 0; n < probs.size(); ++n) {
    const auto& row = probs[n];
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= row.size())
      throw ContractError("brier: label out of range");
    double s = 0.0;
    for (double p : row) s += p;
    if (std::abs(s - 1.0) > 1e-6) throw ContractError("brier: probabilities do not sum to 1");
    for (std::size_t c = 0; c < row.size(); ++c) {
      const double d = row[c] - (static_cast<int>(c) == labels[n] ? 1.0 : 0.0);
      total += d * d;
    }
  }
  return total / static_cast<double>(probs.size());
}

double mean_entropy(std::span<const std::vector<double>> dists) {
  if (dists.empty()) throw ContractError("mean_entropy of an empty list");
  // Sorted summation keeps the result independent of list order.
  std::vector<double> hs;
  hs.reserve(dists.size());
  for (const auto& d : dists) hs.push_back(shannon_entropy(d));
  std::sort(hs.begin(), hs.end());
  double total = 0.0;
  for (double h : hs) total += h;
  return total / static_cast<double>(dists.size());
}

bool confidence_order(const Detection& a, const Detection& b) {
  const double ca = a.confidence(), cb = b.confidence();
  if (ca != cb) return ca > cb;
  if (a.box.x != b.box.x) return a.box.x < b.box.x;
  if (a.box.y != b.box.y) return a.box.y < b.box.y;
  if (a.box.w != b.box.w) return a.box.w < b.box.w;
  if (a.box.h != b.box.h) return a.box.h < b.box.h;
  return a.class_probs < b.class_probs;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0)) throw ContractError("nms threshold must lie in (0, 1)");
  std::sort(dets.begin(), dets.end(), confidence_order);
  std::vector<Detection> kept;
  for (auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (iou(d.box, k.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(std::move(d));
  }
  return kept;
}

namespace {

struct Ranked {
  std::size_t image;
  std::size_t index;
  const Detection* det;
};

// Global ranking of every detection, best first; ties fall back to image
// order and the box order within the image.
std::vector<Ranked> rank_all(std::span<const std::vector<Detection>> dets) {
  std::vector<Ranked> all;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t j = 0; j < dets[i].size(); ++j) all.push_back({i, j, &dets[i][j]});
  std::stable_sort(all.begin(), all.end(), [](const Ranked& a, const Ranked& b) {
    const double ca = a.det->confidence(), cb = b.det->confidence();
    if (ca != cb) return ca > cb;
    if (a.image != b.image) return a.image < b.image;
    return confidence_order(*a.det, *b.det);
  });
  return all;
}

}  // namespace

std::vector<std::vector<int>> match_detections(std::span<const std::vector<Detection>> dets,
                                               std::span<const GroundTruth> gts,
                                               double iou_thresh) {
  if (dets.size() != gts.size()) throw ContractError("detections and ground truth differ in image count");
  std::vector<std::vector<int>> matched(dets.size());
  std::vector<std::vector<char>> taken(gts.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    matched[i].assign(dets[i].size(), -1);
    taken[i].assign(gts[i].size(), 0);
  }
  for (const Ranked& r : rank_all(dets)) {
    const int cls = r.det->best_class();
    const GroundTruth& gt = gts[r.image];
    double best = -1.0;
    int best_g = -1;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (taken[r.image][g] || gt[g].class_id != cls) continue;
      const double v = iou(r.det->box, gt[g].box);
      if (v >= iou_thresh && v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0) {
      taken[r.image][best_g] = 1;
      matched[r.image][r.index] = cls;
    }
  }
  return matched;
}

ApResult average_precision(std::span<const std::vector<Detection>> dets,
                           std::span<const GroundTruth> gts, double iou_thresh, int num_classes) {
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0)) throw ContractError("AP IoU threshold must lie in (0, 1)");
  std::vector<int> n_gt(static_cast<std::size_t>(num_classes), 0);
  for (const auto& g : gts)
    for (const auto& b : g) {
      if (b.class_id < 0 || b.class_id >= num_classes) throw ContractError("ground-truth class out of range");
      ++n_gt[b.class_id];
    }
  if (std::accumulate(n_gt.begin(), n_gt.end(), 0) == 0)
    throw ContractError("average precision is undefined without ground truth");

  const auto matched = match_detections(dets, gts, iou_thresh);
  const auto ranked = rank_all(dets);
  ApResult out;
  double total = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    if (n_gt[c] == 0) continue;
    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (const Ranked& r : ranked) {
      if (r.det->best_class() != c) continue;
      if (matched[r.image][r.index] >= 0) ++tp; else ++fp;
      precision.push_back(static_cast<double>(tp) / (tp + fp));
      recall.push_back(static_cast<double>(tp) / n_gt[c]);
    }
    for (int k = static_cast<int>(precision.size()) - 2; k >= 0; --k)
      precision[k] = std::max(precision[k], precision[k + 1]);
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t k = 0; k < precision.size(); ++k) {
      ap += (recall[k] - prev_recall) * precision[k];
      prev_recall = recall[k];
    }
    out.per_class[c] = ap;
    total += ap;
  }
  out.map = total / static_cast<double>(out.per_class.size());
  return out;
}

double detection_brier(std::span<const std::vector<Detection>> dets,
                       std::span<const GroundTruth> gts, double iou_thresh, int num_classes) {
  const auto matched = match_detections(dets, gts, iou_thresh);
  std::vector<std::vector<double>> probs;
  std::vector<int> labels;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t j = 0; j < dets[i].size(); ++j) {
      const Detection& d = dets[i][j];
      std::vector<double> p(static_cast<std::size_t>(num_classes) + 1);
      for (int c = 0; c < num_classes; ++c) p[c] = d.objectness * d.class_probs.at(c);
      p[num_classes] = 1.0 - d.objectness;
      probs.push_back(std::move(p));
      labels.push_back(matched[i][j] >= 0 ? matched[i][j] : num_classes);
    }
  return probs.empty() ? 0.0 : brier(probs, labels);
}

double round6(double v) {
  if (!std::isfinite(v)) throw NumericError("non-finite metric value");
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return std::strtod(buf, nullptr);
}

std::string report_to_json(const MetricsReport& r) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["timestamp"] = r.timestamp;
  j["map_50"] = round6(r.map_50);
  j["brier"] = round6(r.brier);
  j["mean_entropy"] = round6(r.mean_entropy);
  ordered_json ap = ordered_json::object();
  for (auto [c, v] : r.per_class_ap) ap[std::to_string(c)] = round6(v);
  j["per_class_ap"] = ap;
  j["n_images"] = r.n_images;
  ordered_json extra = ordered_json::object();
  for (const auto& [k, v] : r.extra) extra[k] = round6(v);
  j["extra"] = extra;
  ordered_json cfg = ordered_json::object();
  for (const auto& [k, v] : r.config) cfg[k] = v;
  j["config"] = cfg;
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text, const std::string& source) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(source + ": not valid JSON (" + e.what() + ")");
  }
  if (!j.is_object()) throw ConfigError(source + ": report must be a JSON object");
  auto bad = [&](const std::string& key) {
    return ConfigError(source + ": missing or malformed key '" + key + "'");
  };
  auto number = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_number()) throw bad(key);
    return j[key].get<double>();
  };
  MetricsReport r;
  r.map_50 = number("map_50");
  r.brier = number("brier");
  r.mean_entropy = number("mean_entropy");
  if (!j.contains("per_class_ap") || !j["per_class_ap"].is_object()) throw bad("per_class_ap");
  for (auto& [k, v] : j["per_class_ap"].items()) {
    if (!v.is_number()) throw bad("per_class_ap." + k);
    try {
      r.per_class_ap[std::stoi(k)] = v.get<double>();
    } catch (const std::exception&) {
      throw bad("per_class_ap." + k);
    }
  }
  if (!j.contains("n_images") || !j["n_images"].is_number_integer()) throw bad("n_images");
  r.n_images = j["n_images"].get<int>();
  if (!j.contains("config") || !j["config"].is_object()) throw bad("config");
  for (auto& [k, v] : j["config"].items()) {
    if (!v.is_string()) throw bad("config." + k);
    r.config.emplace_back(k, v.get<std::string>());
  }
  if (j.contains("extra")) {
    if (!j["extra"].is_object()) throw bad("extra");
    for (auto& [k, v] : j["extra"].items()) {
      if (!v.is_number()) throw bad("extra." + k);
      r.extra[k] = v.get<double>();
    }
  }
  if (j.contains("timestamp") && j["timestamp"].is_string()) r.timestamp = j["timestamp"].get<std::string>();
  return r;
}

}  // namespace mcblock
