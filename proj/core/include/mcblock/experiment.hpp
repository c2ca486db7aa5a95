#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mcblock/config.hpp"
#include "mcblock/data_synth.hpp"
#include "mcblock/metrics.hpp"
#include "mcblock/model.hpp"

namespace mcblock {

/// Named rng streams, all split off CounterRng(config.seed).
namespace stream {
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t shuffle = 2;
inline constexpr std::uint64_t train_mask = 3;
inline constexpr std::uint64_t eval = 4;
inline constexpr std::uint64_t initial_loss = 5;
}  // namespace stream

/// Default split sizes written by `gen-data` without --n.
int default_split_count(Split s);

struct EpochLog {
  int epoch = 0;  ///< 0 is the loss before any update
  double lr = 0.0;
  LossBreakdown train;  ///< mean over the epoch's batches
  std::optional<double> val_loss;  ///< deterministic loss on val, when there is one
};

struct TrainOutcome {
  ModelParams last;
  ModelParams best;  ///< lowest val loss (== last without a val split)
  std::vector<EpochLog> log;
};

/// The class a classifier is trained on: the largest object in the image.
int image_label(const LabeledImage& img);

/// SGD with momentum (v = mu v + g; w -= lr v), linear warmup, one 10x decay
/// and optional global-norm clipping. Throws NumericError on a non-finite loss.
TrainOutcome train(const ExperimentConfig& cfg, const std::vector<LabeledImage>& train_set,
                   const std::vector<LabeledImage>& val_set, std::ostream* progress = nullptr);

std::string epoch_log_line(const EpochLog& e);

/// Loads data, trains and writes config.resolved, weights.mcbk,
/// weights.best.mcbk and log.jsonl under cfg.run_dir.
TrainOutcome cmd_train(const ExperimentConfig& cfg, std::ostream* progress = nullptr);

/// MC (or deterministic) detections per image; image i uses stream
/// CounterRng(seed).split(stream::eval).split(i).
std::vector<std::vector<Detection>> predict(const ExperimentConfig& cfg, const ModelParams& params,
                                            const std::vector<LabeledImage>& images, Method method);

struct EntropySummary {
  double per_detection = 0.0;  ///< mean over every retained detection
  double per_image = 0.0;      ///< mean of per-image means, images with detections only
  int detections = 0;
};
EntropySummary summarize_entropy(const std::vector<std::vector<Detection>>& dets);

/// Metrics of `params` on `images` under cfg.mc_method.
MetricsReport evaluate(const ExperimentConfig& cfg, const ModelParams& params,
                       const std::vector<LabeledImage>& images);

/// Loads cfg.weights_path(), evaluates on cfg.eval_split and writes
/// <run.dir>/metrics.json (+ overlays/ when eval.overlays > 0).
MetricsReport cmd_eval(const ExperimentConfig& cfg);

struct OodEntry {
  Method method = Method::none;
  double mean_entropy_id = 0.0;
  double mean_entropy_ood = 0.0;
  double ratio = 0.0;
  double per_image_id = 0.0;
  double per_image_ood = 0.0;
  int detections_id = 0;
  int detections_ood = 0;
};

std::vector<OodEntry> ood_entries(const ExperimentConfig& cfg, const ModelParams& params,
                                  const std::vector<LabeledImage>& id,
                                  const std::vector<LabeledImage>& ood);
std::string ood_to_json(const std::vector<OodEntry>& entries, const ExperimentConfig& cfg,
                        const std::string& timestamp);

/// One entry per eval.sweep method; writes <run.dir>/ood_metrics.json.
std::vector<OodEntry> cmd_ood_eval(const ExperimentConfig& cfg);

struct ReportTable {
  std::string text;
  std::string json;
};
/// Aligned comparison of metrics.json files, ordered by path.
ReportTable cmd_report(std::vector<std::filesystem::path> paths);

/// 4x upscaled copy of the image with boxes and per-detection entropy.
void write_overlay(const std::filesystem::path& path, const Tensor& image,
                   const std::vector<Detection>& dets);

/// UTC, ISO 8601.
std::string utc_timestamp();

}  // namespace mcblock
