#include "mcblock/dropblock.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mcblock/error.hpp"
#include "mcblock/kernels.hpp"

namespace mcblock {

void DropBlockConfig::validate(int h, int w) const {
  if (block_size < 1 || block_size % 2 == 0)
    throw ConfigError("dropblock block_size must be a positive odd integer, got " +
                      std::to_string(block_size));
  if (block_size > std::min(h, w))
    throw ConfigError("dropblock block_size " + std::to_string(block_size) +
                      " exceeds feature map " + std::to_string(h) + "x" + std::to_string(w));
  if (!(drop_prob >= 0.0 && drop_prob < 1.0))
    throw ConfigError("dropblock drop probability must lie in [0, 1), got " +
                      std::to_string(drop_prob));
}

Tensor DropMask::scaled_tensor() const {
  Tensor t({1, 1, height, width});
  const float s = static_cast<float>(scale());
  for (std::size_t i = 0; i < keep.size(); ++i) t[i] = keep[i] ? s : 0.0f;
  return t;
}

double gamma_from_drop_prob(double p, int block_size, int feat_h, int feat_w) {
  DropBlockConfig cfg;
  cfg.block_size = block_size;
  cfg.drop_prob = p;
  cfg.validate(feat_h, feat_w);
  if (p == 0.0) return 0.0;
  const double area = static_cast<double>(block_size) * block_size;
  return 1.0 - std::pow(1.0 - p, 1.0 / area);
}

DropMask mask_from_seeds(int feat_h, int feat_w, int block_size,
                         std::span<const std::pair<int, int>> seeds) {
  if (feat_h < 1 || feat_w < 1) throw DimensionError("mask over an empty map");
  if (block_size < 1 || block_size % 2 == 0 || block_size > std::min(feat_h, feat_w))
    throw ConfigError("invalid block size " + std::to_string(block_size) + " for map");
  DropMask m;
  m.height = feat_h;
  m.width = feat_w;
  m.block_size = block_size;
  m.total = feat_h * feat_w;
  m.keep.assign(static_cast<std::size_t>(m.total), 1);
  m.seeds.assign(seeds.begin(), seeds.end());
  const int r = block_size / 2;
  for (auto [si, sj] : seeds) {
    if (si < 0 || si >= feat_h || sj < 0 || sj >= feat_w)
      throw DimensionError("seed outside the feature map");
    for (int di = -r; di <= r; ++di) {
      const int i = (si + di + feat_h) % feat_h;
      for (int dj = -r; dj <= r; ++dj) {
        const int j = (sj + dj + feat_w) % feat_w;
        m.keep[static_cast<std::size_t>(i) * feat_w + j] = 0;
      }
    }
  }
  m.retained = static_cast<int>(std::count(m.keep.begin(), m.keep.end(), std::uint8_t{1}));
  return m;
}

DropMask sample_mask_gamma(int feat_h, int feat_w, int block_size, double gamma,
                           CounterRng& rng) {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("seed rate gamma must lie in [0, 1)");
  std::vector<std::pair<int, int>> seeds;
  for (int attempt = 0; attempt < 100; ++attempt) {
    seeds.clear();
    if (gamma > 0.0) {
      for (int i = 0; i < feat_h; ++i)
        for (int j = 0; j < feat_w; ++j)
          if (rng.bernoulli(gamma)) seeds.emplace_back(i, j);
    }
    DropMask m = mask_from_seeds(feat_h, feat_w, block_size, seeds);
    m.gamma = gamma;
    if (m.retained > 0) return m;
  }
  throw DegenerateConfigError("dropblock mask dropped every cell in 100 consecutive draws");
}

DropMask sample_mask(int feat_h, int feat_w, const DropBlockConfig& cfg, CounterRng& rng) {
  if (cfg.mode == DropMode::disabled)
    throw ContractError("sample_mask called with dropblock disabled");
  const double gamma = gamma_from_drop_prob(cfg.drop_prob, cfg.block_size, feat_h, feat_w);
  return sample_mask_gamma(feat_h, feat_w, cfg.block_size, gamma, rng);
}

namespace {

void check_mask_shape(const Tensor& features, const DropMask& mask) {
  if (features.rank() != 4 || features.dim(2) != mask.height || features.dim(3) != mask.width)
    throw DimensionError("mask " + std::to_string(mask.height) + "x" +
                         std::to_string(mask.width) + " does not match features " +
                         shape_str(features.shape()));
}

}  // namespace

Tensor apply_mask(const Tensor& features, const DropMask& mask) {
  check_mask_shape(features, mask);
  Tensor out(features.shape());
  const std::size_t hw = mask.keep.size();
  const float s = static_cast<float>(mask.scale());
  for (std::size_t i = 0; i < features.size(); ++i)
    out[i] = mask.keep[i % hw] ? features[i] * s : 0.0f;
  return out;
}

Var apply_mask(Graph& graph, Var features, const DropMask& mask) {
  check_mask_shape(graph.value(features), mask);
  return graph.mul(features, graph.constant(mask.scaled_tensor()));
}

Var apply_masks_per_channel(Graph& graph, Var features, std::span<const DropMask> masks) {
  const Tensor& f = graph.value(features);
  if (f.rank() != 4 || masks.size() != static_cast<std::size_t>(f.dim(1)))
    throw DimensionError("per-channel masks must match the channel count of " +
                         shape_str(f.shape()));
  const int C = f.dim(1), H = f.dim(2), W = f.dim(3);
  Tensor m({1, C, H, W});
  for (int c = 0; c < C; ++c) {
    check_mask_shape(f, masks[c]);
    Tensor t = masks[c].scaled_tensor();
    std::copy(t.values().begin(), t.values().end(),
              m.data() + static_cast<std::size_t>(c) * H * W);
  }
  return graph.mul(features, graph.constant(std::move(m)));
}

Var dropblock(Graph& graph, Var features, const DropBlockConfig& cfg, CounterRng& rng) {
  if (cfg.mode == DropMode::disabled) return features;
  const Tensor& f = graph.value(features);
  if (f.rank() != 4) throw DimensionError("dropblock expects [N,C,H,W] features");
  const int H = f.dim(2), W = f.dim(3);
  if (!cfg.per_channel) return apply_mask(graph, features, sample_mask(H, W, cfg, rng));
  std::vector<DropMask> masks;
  masks.reserve(static_cast<std::size_t>(f.dim(1)));
  for (int c = 0; c < f.dim(1); ++c) masks.push_back(sample_mask(H, W, cfg, rng));
  return apply_masks_per_channel(graph, features, masks);
}

int DropoutMask::kept() const noexcept {
  return static_cast<int>(std::count(keep.begin(), keep.end(), std::uint8_t{1}));
}

DropoutMask sample_dropout_mask(int channels, double p, CounterRng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1)");
  DropoutMask m;
  m.drop_prob = p;
  m.keep.resize(static_cast<std::size_t>(channels));
  for (auto& k : m.keep) k = rng.bernoulli(p) ? 0 : 1;
  return m;
}

namespace {

Tensor dropout_scale_tensor(const Tensor& features, const DropoutMask& mask) {
  if (features.rank() != 4 || static_cast<std::size_t>(features.dim(1)) != mask.keep.size())
    throw DimensionError("dropout mask length does not match channels of " +
                         shape_str(features.shape()));
  Tensor z({1, features.dim(1), 1, 1});
  const float s = static_cast<float>(1.0 / (1.0 - mask.drop_prob));
  for (std::size_t c = 0; c < mask.keep.size(); ++c) z[c] = mask.keep[c] ? s : 0.0f;
  return z;
}

}  // namespace

Tensor apply_dropout_mask(const Tensor& features, const DropoutMask& mask) {
  const Tensor z = dropout_scale_tensor(features, mask);
  Tensor out(features.shape());
  const int C = features.dim(1);
  const std::size_t hw = static_cast<std::size_t>(features.dim(2)) * features.dim(3);
  for (std::size_t i = 0; i < features.size(); ++i) out[i] = features[i] * z[(i / hw) % C];
  return out;
}

Var apply_dropout_mask(Graph& graph, Var features, const DropoutMask& mask) {
  return graph.mul(features, graph.constant(dropout_scale_tensor(graph.value(features), mask)));
}

EquivalenceRoutes weight_space_equivalence(const Tensor& features, const Tensor& kernel,
                                           std::span<const BlockIndex> dropped) {
  if (features.rank() != 4 || features.dim(0) != 1 || features.dim(1) != 1 ||
      features.dim(2) != features.dim(3))
    throw ConstructionError("equivalence needs square [1,1,K,K] features");
  if (kernel.rank() != 4 || kernel.dim(0) != 1 || kernel.dim(1) != 1 ||
      kernel.dim(2) != kernel.dim(3))
    throw ConstructionError("equivalence needs a square [1,1,L,L] kernel");
  const int K = features.dim(2), L = kernel.dim(2);
  if (K % L != 0)
    throw ConstructionError("feature size " + std::to_string(K) + " is not divisible by kernel " +
                            std::to_string(L));
  const int B = K / L;
  std::vector<std::uint8_t> block_kept(static_cast<std::size_t>(B) * B, 1);
  for (const BlockIndex& b : dropped) {
    if (b.row < 0 || b.row >= B || b.col < 0 || b.col >= B)
      throw ConstructionError("dropped block index outside the tiling");
    block_kept[static_cast<std::size_t>(b.row) * B + b.col] = 0;
  }

  // Route 1: zero the dropped L x L tiles of the features, then convolve.
  Tensor masked = features;
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j)
      if (!block_kept[static_cast<std::size_t>(i / L) * B + j / L]) masked.at(0, 0, i, j) = 0.0f;
  Tensor conv = kernels::conv2d(masked, kernel, L, 0);

  // Route 2: stack the tiles of the unmasked features and a weight tensor of
  // B*B copies of the kernel (z_i * W), multiply elementwise along the stack.
  const std::size_t tile = static_cast<std::size_t>(L) * L;
  std::vector<float> feature_stack(static_cast<std::size_t>(B) * B * tile);
  std::vector<float> weight_stack(feature_stack.size());
  for (int bi = 0; bi < B; ++bi)
    for (int bj = 0; bj < B; ++bj) {
      const std::size_t b = static_cast<std::size_t>(bi) * B + bj;
      for (int u = 0; u < L; ++u)
        for (int v = 0; v < L; ++v) {
          const std::size_t t = b * tile + static_cast<std::size_t>(u) * L + v;
          feature_stack[t] = features.at(0, 0, bi * L + u, bj * L + v);
          weight_stack[t] = block_kept[b] ? kernel.at(0, 0, u, v) : 0.0f;
        }
    }
  Tensor stacked({1, 1, B, B});
  for (std::size_t b = 0; b < static_cast<std::size_t>(B) * B; ++b) {
    float acc = 0.0f;
    for (std::size_t t = 0; t < tile; ++t) acc += feature_stack[b * tile + t] * weight_stack[b * tile + t];
    stacked[b] = acc;
  }
  return {std::move(conv), std::move(stacked)};
}

}  // namespace mcblock
