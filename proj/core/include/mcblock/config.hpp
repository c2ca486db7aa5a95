#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mcblock/mc_inference.hpp"
#include "mcblock/model.hpp"

namespace mcblock {

/// Every knob of an experiment. Files are line-oriented `key = value` with
/// dotted keys (`dropblock.p = 0.1`), `#` comments; unknown keys are errors.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string data_root = "data";
  std::string run_dir = "run";

  Arch arch = Arch::detector;
  int image_size = 64;

  double dropblock_p = 0.1;
  int dropblock_block_size = 3;
  bool dropblock_per_channel = false;
  double dropout_p = 0.1;

  Method train_method = Method::dropblock;
  int epochs = 20;
  int batch_size = 16;
  int train_limit = 0;  ///< 0 = every training image
  bool log_initial_loss = true;

  double lr = 0.01;
  double momentum = 0.9;
  int warmup_steps = 100;
  double lr_decay_at = 0.8;  ///< fraction of epochs after which lr is multiplied by 0.1
  double clip_norm = 10.0;   ///< global gradient-norm cap; 0 disables

  LossConfig loss;

  Method mc_method = Method::dropblock;
  int mc_samples = 30;
  double mc_merge_iou = 0.5;
  double mc_min_support_frac = 0.3;

  std::string eval_split = "test-id";
  std::string weights;  ///< empty = <run.dir>/weights.mcbk
  double conf_thresh = 0.05;
  double nms_iou = 0.45;
  double iou_thresh = 0.5;
  int overlays = 0;
  int eval_limit = 0;
  std::vector<Method> sweep{Method::none, Method::dropout, Method::dropblock};

  /// Throws ConfigError for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  /// Applies a config file on top of the current values.
  void apply_file(const std::filesystem::path& path);
  /// Parses one `key=value` override.
  void apply_override(const std::string& assignment);
  void validate() const;

  /// Canonical key/value listing; feeding it back through set() reproduces
  /// this config exactly.
  std::vector<std::pair<std::string, std::string>> resolved() const;
  std::string resolved_text() const;

  ModelHyper model_hyper() const;
  McConfig mc_config(Method method, int threads = 1) const;
  StochasticSite train_site() const;

  std::filesystem::path weights_path() const;

  static std::vector<std::string> keys();
};

}  // namespace mcblock
