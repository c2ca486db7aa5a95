#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mcblock/graph.hpp"
#include "mcblock/random.hpp"
#include "mcblock/tensor.hpp"

namespace mcblock {

/// When a DropBlock site is active. Training and inference sample from the
/// same distribution; only the caller differs.
enum class DropMode { training, inference, disabled };

struct DropBlockConfig {
  int block_size = 3;       ///< odd, <= min(H, W) of the map it is applied to
  double drop_prob = 0.1;   ///< target fraction of dropped activations, in [0, 1)
  DropMode mode = DropMode::training;
  bool per_channel = false; ///< one independent mask per channel instead of a shared one

  /// Throws ConfigError if the config cannot be applied to an h x w map.
  void validate(int h, int w) const;
};

/// Binary keep-mask over one H x W feature map.
struct DropMask {
  int height = 0;
  int width = 0;
  int block_size = 1;
  double gamma = 0.0;
  std::vector<std::uint8_t> keep;  ///< row-major, 1 = kept
  /// Zero seeds that produced the mask, as (row, col) block centers.
  std::vector<std::pair<int, int>> seeds;
  int retained = 0;
  int total = 0;

  int dropped() const noexcept { return total - retained; }
  /// count(M) / count_ones(M).
  double scale() const noexcept { return static_cast<double>(total) / retained; }
  /// [1,1,H,W] tensor of keep * scale.
  Tensor scaled_tensor() const;
};

/// Seed rate such that each cell is dropped with probability exactly p.
/// Blocks are placed periodically (wrapping at the borders), so every cell is
/// covered by block_size^2 seed sites and P(kept) = (1 - gamma)^(block_size^2).
double gamma_from_drop_prob(double p, int block_size, int feat_h, int feat_w);

/// Zero-region geometry for an explicit seed set (blocks wrap at borders).
DropMask mask_from_seeds(int feat_h, int feat_w, int block_size,
                         std::span<const std::pair<int, int>> seeds);

/// Draws Bernoulli(gamma) seeds over the map and expands each into a
/// block_size^2 zero square centered on it. Resamples if everything was
/// dropped; throws DegenerateConfigError after 100 empty draws.
DropMask sample_mask_gamma(int feat_h, int feat_w, int block_size, double gamma,
                           CounterRng& rng);
DropMask sample_mask(int feat_h, int feat_w, const DropBlockConfig& cfg, CounterRng& rng);

/// features [N,C,H,W] * M * (total / retained); one mask shared over N and C.
Tensor apply_mask(const Tensor& features, const DropMask& mask);
Var apply_mask(Graph& graph, Var features, const DropMask& mask);
/// Per-channel variant; masks.size() must equal C.
Var apply_masks_per_channel(Graph& graph, Var features, std::span<const DropMask> masks);

/// The DropBlock layer: identity when disabled, otherwise sample + apply.
Var dropblock(Graph& graph, Var features, const DropBlockConfig& cfg, CounterRng& rng);

/// Channel dropout mask (MC-Dropout baseline): whole channels kept or dropped.
struct DropoutMask {
  double drop_prob = 0.0;
  std::vector<std::uint8_t> keep;

  int kept() const noexcept;
};

DropoutMask sample_dropout_mask(int channels, double p, CounterRng& rng);
/// features [N,C,H,W] * z[c] / (1 - p).
Tensor apply_dropout_mask(const Tensor& features, const DropoutMask& mask);
Var apply_dropout_mask(Graph& graph, Var features, const DropoutMask& mask);

/// Non-overlapping L x L tile index inside a K x K map.
struct BlockIndex {
  int row = 0;
  int col = 0;
  friend bool operator==(const BlockIndex&, const BlockIndex&) = default;
};

/// Both routes of the DropBlock / block-structured weight equivalence for a
/// single-channel K x K map and L x L kernel at stride L.
struct EquivalenceRoutes {
  /// Convolution of the block-masked features with the kernel.
  Tensor masked_conv;
  /// Per-block product of the unmasked features with the stacked weight
  /// tensor whose dropped blocks are zero.
  Tensor block_weights;
};

EquivalenceRoutes weight_space_equivalence(const Tensor& features, const Tensor& kernel,
                                           std::span<const BlockIndex> dropped);

}  // namespace mcblock
