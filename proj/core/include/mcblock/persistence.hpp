#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mcblock/model.hpp"

namespace mcblock {

/// Weight file layout (all integers u32 little-endian, floats IEEE-754 f32 LE):
///
///   "MCBK" | version | arch (0 detector, 1 classifier)
///   image_size | num_classes | num_anchors | (anchor w, anchor h) * num_anchors
///   block_size | drop_prob (f32) | tensor_count
///   per tensor: name_len | name (UTF-8) | rank | extents * rank | data (f32 * numel)
inline constexpr std::uint32_t kWeightsVersion = 1;

std::vector<std::uint8_t> serialize_weights(const ModelParams& params);
ModelParams deserialize_weights(std::span<const std::uint8_t> bytes);

void save_weights(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_weights(const std::filesystem::path& path);

/// Throws LoadError naming the first tensor whose name or shape disagrees
/// with what `expected` implies.
void check_compatible(const ModelParams& loaded, const ModelHyper& expected);

}  // namespace mcblock
