#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mcblock/model.hpp"
#include "mcblock/tensor.hpp"

namespace mcblock {

enum class Split { train, val, test_id, test_ood };

const char* split_name(Split s) noexcept;
Split parse_split(const std::string& s);

/// Shape ids: 0-2 are the in-distribution classes, 3-5 appear only in test-ood.
inline constexpr std::array<const char*, 6> kShapeNames{"circle", "square", "triangle",
                                                         "cross",  "ring",   "star"};
inline constexpr int kNumIdClasses = 3;
int shape_id(const std::string& name);

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

struct SceneSpec {
  int image_size = 64;
  int min_objects = 1;
  int max_objects = 3;
  int min_extent = 12;  ///< pixels
  int max_extent = 26;
  double noise_sigma = 8.0;  ///< in 0-255 units (8/255 normalized)
  int background = 128;
  double max_pair_iou = 0.3;
  double min_visible = 0.6;  ///< fraction of an object's raster left unoccluded
};

struct SceneObject {
  int shape = 0;  ///< index into kShapeNames
  Box box;        ///< tight box of the raster, normalized
  int x_min = 0, y_min = 0, x_max = 0, y_max = 0;  ///< inclusive pixel extents
  int raster_pixels = 0;
  std::array<std::uint8_t, 3> color{};
};

struct Scene {
  int size = 0;
  std::vector<std::uint8_t> rgb;  ///< interleaved, row-major
  /// Pre-noise owner of each pixel: object index or -1 for background.
  std::vector<int> owner;
  std::vector<SceneObject> objects;
};

/// Deterministic scene for (split, index, seed); the per-image stream is
/// CounterRng(seed).split(split).split(index). Object classes rotate with the
/// image index so class frequencies stay balanced.
Scene render_scene(Split split, std::uint64_t index, std::uint64_t seed, const SceneSpec& spec = {});

void write_ppm(const std::filesystem::path& path, int width, int height,
               const std::vector<std::uint8_t>& rgb);
/// Returns [1,3,H,W] with values byte/255 - 0.5.
Tensor read_ppm(const std::filesystem::path& path);
Tensor scene_tensor(const Scene& scene);

/// Writes <root>/<split>/images/NNNNNN.ppm and <root>/<split>/labels.jsonl and
/// records the split in <root>/manifest.json.
void generate(const std::filesystem::path& root, Split split, int n, std::uint64_t seed,
              const SceneSpec& spec = {}, int threads = 1);

struct LabeledImage {
  std::string name;
  Tensor image;
  GroundTruth objects;  ///< class_id is the shape id
};

std::vector<LabeledImage> load_split(const std::filesystem::path& root, Split split);

}  // namespace mcblock
