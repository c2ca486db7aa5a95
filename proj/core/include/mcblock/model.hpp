#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "mcblock/box.hpp"
#include "mcblock/dropblock.hpp"
#include "mcblock/graph.hpp"
#include "mcblock/random.hpp"
#include "mcblock/tensor.hpp"

namespace mcblock {

enum class Arch { detector, classifier };

/// Which stochastic layer sits in front of the prediction head.
enum class Method { none, dropblock, dropout };

const char* to_string(Arch a) noexcept;
const char* to_string(Method m) noexcept;
Method parse_method(const std::string& s);
Arch parse_arch(const std::string& s);

struct Anchor {
  float w = 0.0f;  ///< image-normalized
  float h = 0.0f;
  friend bool operator==(const Anchor&, const Anchor&) = default;
};

/// Architecture hyperparameters. Weight shapes are a pure function of these.
struct ModelHyper {
  Arch arch = Arch::detector;
  int image_size = 64;
  int num_classes = 3;
  std::vector<Anchor> anchors{{0.2f, 0.2f}, {0.5f, 0.5f}};
  int block_size = 3;
  float drop_prob = 0.1f;

  /// Backbone downsamples by 8: three stride-2 blocks and one stride-1 block.
  int grid() const noexcept { return image_size / 8; }
  int num_anchors() const noexcept { return static_cast<int>(anchors.size()); }
  /// 8 Gaussian box outputs + objectness + class logits.
  int per_anchor() const noexcept { return 9 + num_classes; }
  int head_channels() const noexcept { return num_anchors() * per_anchor(); }
  static constexpr int kFeatureChannels = 64;

  void validate() const;
  friend bool operator==(const ModelHyper&, const ModelHyper&) = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Ordered, uniquely named weights for one architecture.
struct ModelParams {
  ModelHyper hyper;
  std::vector<NamedTensor> tensors;

  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  std::size_t weight_count() const;  ///< elements subject to weight decay

  /// Names and shapes implied by `hyper`, zero-filled.
  static ModelParams zeros(const ModelHyper& hyper);
  /// He-normal weights, zero biases.
  static ModelParams init(const ModelHyper& hyper, CounterRng& rng);
};

/// Weight tensors (not biases) are regularized.
bool is_decayed(const std::string& name);

/// The stochastic site in front of the head.
struct StochasticSite {
  Method method = Method::dropblock;
  DropMode mode = DropMode::inference;
  int block_size = 3;
  double drop_prob = 0.1;
  bool per_channel = false;

  bool active() const noexcept { return method != Method::none && mode != DropMode::disabled; }
  DropBlockConfig dropblock_config() const;
  static StochasticSite disabled() { return {Method::none, DropMode::disabled, 3, 0.0, false}; }
};

/// Binds ModelParams into a graph and builds the forward pass.
class Network {
 public:
  Network(Graph& graph, const ModelParams& params, bool trainable);

  /// images [N,3,S,S] -> features [N,64,G,G].
  Var backbone(Var images);
  /// DropBlock / Dropout / identity on the penultimate map.
  Var stochastic(Var features, const StochasticSite& site, CounterRng& rng);
  /// Detector: [N, A*(9+C), G, G]; classifier: [N, C].
  Var head(Var features);
  Var forward(Var images, const StochasticSite& site, CounterRng& rng);

  const std::vector<Var>& vars() const noexcept { return vars_; }
  /// Vars of weights under decay, in parameter order.
  std::vector<Var> decayed() const;

 private:
  Var param(const std::string& name) const;

  Graph& graph_;
  const ModelParams& params_;
  std::vector<Var> vars_;
};

/// Single-image conveniences over Network (no gradients).
Tensor detector_forward(const Tensor& image, const ModelParams& params, const StochasticSite& site,
                        CounterRng& rng);
Tensor classifier_forward(const Tensor& image, const ModelParams& params,
                          const StochasticSite& site, CounterRng& rng);
Tensor backbone_features(const Tensor& images, const ModelParams& params);
Tensor head_forward(const Tensor& features, const ModelParams& params, const StochasticSite& site,
                    CounterRng& rng);

/// Per-coordinate Gaussian over (cell-relative center, log-space size).
struct GaussianBox {
  std::array<double, 4> mu{};
  std::array<double, 4> sigma{1.0, 1.0, 1.0, 1.0};
};

/// Sum over the 4 coordinates of 0.5*log(2*pi*sigma^2) + (t - mu)^2 / (2*sigma^2).
double gaussian_nll(const GaussianBox& pred, const std::array<double, 4>& target);

struct GaussianNllGrad {
  double value = 0.0;
  std::array<double, 4> d_mu{};
  std::array<double, 4> d_sigma{};
};
GaussianNllGrad gaussian_nll_with_grad(const GaussianBox& pred, const std::array<double, 4>& target);

/// softplus(raw) + 1e-4: strictly positive for every finite raw value.
double sigma_from_raw(double raw) noexcept;

struct GroundTruthBox {
  int class_id = 0;
  Box box;
};
using GroundTruth = std::vector<GroundTruthBox>;

/// Grid position responsible for a ground-truth box and its regression targets.
struct Assignment {
  int row = 0;
  int col = 0;
  int anchor = 0;
  std::array<double, 4> target{};  ///< (x offset in cell, y offset, log w/aw, log h/ah)
};

/// Cell containing the box center, anchor with the highest IoU when both are
/// centered there.
Assignment assign_target(const Box& box, const ModelHyper& hyper);

/// One decoded grid prediction (or, after MC merging, one consensus cluster).
struct Detection {
  Box box;
  std::array<double, 4> sigma{};
  std::vector<double> class_probs;
  double objectness = 0.0;
  int support = 1;
  std::array<double, 4> epistemic_box_var{};
  double entropy = 0.0;

  int best_class() const;
  /// objectness * max class probability
  double confidence() const;
};

/// Keeps predictions with confidence >= conf_thresh, in grid order
/// (anchor, row, col). `raw` is [1, A*(9+C), G, G].
std::vector<Detection> decode(const Tensor& raw, const ModelHyper& hyper, double conf_thresh);

/// Raw head values that decode to `box` at the assigned position.
std::array<double, 4> encode_raw(const Box& box, const ModelHyper& hyper, Assignment* where = nullptr);

struct LossConfig {
  double lambda_box = 1.0;
  double lambda_obj = 1.0;
  double lambda_cls = 1.0;
  double lambda_wd = 5e-4;
  bool use_gaussian = true;
  bool use_giou = true;
};

struct LossBreakdown {
  double box = 0.0;
  double obj = 0.0;
  double cls = 0.0;
  double wd = 0.0;
  double total = 0.0;
};

struct DetectionLoss {
  double value = 0.0;
  Tensor d_raw;
  LossBreakdown terms;
};

/// Box, objectness and class terms averaged over the batch, with the analytic
/// gradient with respect to the raw grid.
DetectionLoss detection_loss(const Tensor& raw, std::span<const GroundTruth> targets,
                             const ModelHyper& hyper, const LossConfig& cfg);

/// Detection terms plus lambda_wd * sum of squared decayed weights.
Var total_loss(Graph& graph, Var raw, std::span<const GroundTruth> targets,
               std::span<const Var> decayed, const ModelHyper& hyper, const LossConfig& cfg,
               LossBreakdown* breakdown = nullptr);

/// Softmax cross-entropy plus the same weight-decay term.
Var classifier_loss(Graph& graph, Var logits, std::span<const int> labels,
                    std::span<const Var> decayed, const LossConfig& cfg,
                    LossBreakdown* breakdown = nullptr);

}  // namespace mcblock
