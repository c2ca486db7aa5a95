#include "mcblock/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "mcblock/error.hpp"
#include "mcblock/parallel.hpp"
#include "mcblock/random.hpp"

namespace mcblock {

namespace fs = std::filesystem;

const char* split_name(Split s) noexcept {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test_id: return "test-id";
    case Split::test_ood: return "test-ood";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  for (Split sp : {Split::train, Split::val, Split::test_id, Split::test_ood})
    if (s == split_name(sp)) return sp;
  throw ConfigError("unknown split '" + s + "' (expected train, val, test-id or test-ood)");
}

int shape_id(const std::string& name) {
  for (std::size_t i = 0; i < kShapeNames.size(); ++i)
    if (name == kShapeNames[i]) return static_cast<int>(i);
  return -1;
}

namespace {

constexpr std::array<std::array<std::uint8_t, 3>, 6> kPalette{{{220, 40, 40},
                                                               {40, 180, 60},
                                                               {50, 80, 220},
                                                               {230, 210, 40},
                                                               {200, 50, 200},
                                                               {40, 200, 210}}};

bool inside_polygon(double px, double py, const std::vector<std::pair<double, double>>& poly) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto [xi, yi] = poly[i];
    const auto [xj, yj] = poly[j];
    if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) in = !in;
  }
  return in;
}

// Raster of one shape in an extent x extent local frame, sampled at pixel centers.
std::vector<std::uint8_t> rasterize(int shape, int extent) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(extent) * extent, 0);
  const double c = extent / 2.0;
  const double r = extent / 2.0;
  std::vector<std::pair<double, double>> star;
  if (shape == 5) {
    for (int k = 0; k < 10; ++k) {
      const double ang = -std::numbers::pi / 2 + k * std::numbers::pi / 5;
      const double rad = (k % 2 == 0) ? r : 0.45 * r;
      star.emplace_back(c + rad * std::cos(ang), c + rad * std::sin(ang));
    }
  }
  for (int y = 0; y < extent; ++y)
    for (int x = 0; x < extent; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double dx = px - c, dy = py - c;
      const double d2 = dx * dx + dy * dy;
      bool on = false;
      switch (shape) {
        case 0: on = d2 <= r * r; break;                                  // circle
        case 1: on = true; break;                                         // square
        case 2: on = std::abs(dx) <= 0.5 * py; break;                     // triangle, apex up
        case 3: on = std::abs(dx) <= 0.2 * extent || std::abs(dy) <= 0.2 * extent; break;
        case 4: on = d2 <= r * r && d2 >= 0.55 * 0.55 * r * r; break;     // ring
        case 5: on = inside_polygon(px, py, star); break;                 // star
        default: break;
      }
      m[static_cast<std::size_t>(y) * extent + x] = on ? 1 : 0;
    }
  return m;
}

}  // namespace

Scene render_scene(Split split, std::uint64_t index, std::uint64_t seed, const SceneSpec& spec) {
  const int S = spec.image_size;
  if (spec.max_extent > S || spec.min_extent < 3 || spec.min_extent > spec.max_extent)
    throw ConfigError("invalid scene extents");
  CounterRng rng = CounterRng(seed).split(static_cast<std::uint64_t>(split)).split(index);
  Scene scene;
  scene.size = S;
  scene.owner.assign(static_cast<std::size_t>(S) * S, -1);

  const bool ood = split == Split::test_ood;
  const int count =
      spec.min_objects + static_cast<int>(rng.uniform_int(spec.max_objects - spec.min_objects + 1));

  for (int j = 0; j < count; ++j) {
    const int shape = (ood ? kNumIdClasses : 0) + static_cast<int>((index + j) % kNumIdClasses);
    const auto color = kPalette[rng.uniform_int(kPalette.size())];
    for (int attempt = 0; attempt < 50; ++attempt) {
      const int extent =
          spec.min_extent + static_cast<int>(rng.uniform_int(spec.max_extent - spec.min_extent + 1));
      const int x0 = static_cast<int>(rng.uniform_int(S - extent + 1));
      const int y0 = static_cast<int>(rng.uniform_int(S - extent + 1));
      auto raster = rasterize(shape, extent);

      SceneObject obj;
      obj.shape = shape;
      obj.color = color;
      obj.x_min = obj.y_min = S;
      obj.x_max = obj.y_max = -1;
      for (int y = 0; y < extent; ++y)
        for (int x = 0; x < extent; ++x)
          if (raster[static_cast<std::size_t>(y) * extent + x]) {
            obj.x_min = std::min(obj.x_min, x0 + x);
            obj.x_max = std::max(obj.x_max, x0 + x);
            obj.y_min = std::min(obj.y_min, y0 + y);
            obj.y_max = std::max(obj.y_max, y0 + y);
            ++obj.raster_pixels;
          }
      obj.box = Box::from_corners(static_cast<double>(obj.x_min) / S, static_cast<double>(obj.y_min) / S,
                                  static_cast<double>(obj.x_max + 1) / S,
                                  static_cast<double>(obj.y_max + 1) / S);

      bool ok = true;
      for (const auto& other : scene.objects)
        if (iou(other.box, obj.box) >= spec.max_pair_iou) ok = false;
      if (!ok) continue;

      // Earlier objects must stay mostly visible once this one is painted over them.
      std::vector<int> owner = scene.owner;
      const int id = static_cast<int>(scene.objects.size());
      for (int y = 0; y < extent; ++y)
        for (int x = 0; x < extent; ++x)
          if (raster[static_cast<std::size_t>(y) * extent + x])
            owner[static_cast<std::size_t>(y0 + y) * S + (x0 + x)] = id;
      std::vector<int> visible(scene.objects.size(), 0);
      for (int o : owner)
        if (o >= 0 && o < id) ++visible[o];
      for (std::size_t i = 0; i < scene.objects.size(); ++i)
        if (visible[i] < spec.min_visible * scene.objects[i].raster_pixels) ok = false;
      if (!ok) continue;

      scene.owner = std::move(owner);
      scene.objects.push_back(obj);
      break;
    }
  }

  scene.rgb.resize(static_cast<std::size_t>(S) * S * 3);
  for (std::size_t p = 0; p < scene.owner.size(); ++p)
    for (int ch = 0; ch < 3; ++ch) {
      const int o = scene.owner[p];
      const double base = o < 0 ? spec.background : scene.objects[o].color[ch];
      const double v = std::round(base + spec.noise_sigma * rng.normal());
      scene.rgb[p * 3 + ch] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  return scene;
}

void write_ppm(const fs::path& path, int width, int height, const std::vector<std::uint8_t>& rgb) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << "P6\n" << width << ' ' << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!f) throw IoError("short write to " + path.string());
}

Tensor read_ppm(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open image " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255)
    throw IoError(path.string() + " is not an 8-bit binary PPM");
  f.get();
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!f) throw IoError(path.string() + " is truncated");
  Tensor t({1, 3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        t.at(0, c, y, x) = rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0f - 0.5f;
  return t;
}

Tensor scene_tensor(const Scene& scene) {
  const int S = scene.size;
  Tensor t({1, 3, S, S});
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x)
      for (int c = 0; c < 3; ++c)
        t.at(0, c, y, x) = scene.rgb[(static_cast<std::size_t>(y) * S + x) * 3 + c] / 255.0f - 0.5f;
  return t;
}

namespace {

std::string image_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d.ppm", i);
  return buf;
}

}  // namespace

void generate(const fs::path& root, Split split, int n, std::uint64_t seed, const SceneSpec& spec,
              int threads) {
  if (n < 1) throw ConfigError("dataset size must be >= 1");
  const fs::path dir = root / split_name(split);
  fs::create_directories(dir / "images");
  std::vector<std::string> lines(static_cast<std::size_t>(n));
  parallel_for(lines.size(), threads, [&](std::size_t i) {
    const Scene scene = render_scene(split, i, seed, spec);
    const std::string name = image_name(static_cast<int>(i));
    write_ppm(dir / "images" / name, scene.size, scene.size, scene.rgb);
    std::string block;
    for (const SceneObject& o : scene.objects) {
      nlohmann::ordered_json j;
      j["image"] = name;
      j["class"] = kShapeNames[o.shape];
      j["x"] = o.box.x;
      j["y"] = o.box.y;
      j["w"] = o.box.w;
      j["h"] = o.box.h;
      block += j.dump() + "\n";
    }
    lines[i] = std::move(block);
  });
  {
    std::ofstream f(dir / "labels.jsonl", std::ios::trunc);
    if (!f) throw IoError("cannot write labels for " + dir.string());
    for (const auto& l : lines) f << l;
  }

  nlohmann::ordered_json manifest;
  const fs::path mpath = root / "manifest.json";
  if (fs::exists(mpath)) {
    std::ifstream f(mpath);
    try {
      manifest = nlohmann::ordered_json::parse(f);
    } catch (const nlohmann::json::exception&) {
      manifest = nlohmann::ordered_json();
    }
  }
  manifest["format_version"] = kDatasetFormatVersion;
  manifest["seed"] = seed;
  manifest["image_size"] = spec.image_size;
  manifest["class_names"] = {{"in_distribution", {kShapeNames[0], kShapeNames[1], kShapeNames[2]}},
                             {"out_of_distribution", {kShapeNames[3], kShapeNames[4], kShapeNames[5]}}};
  manifest["splits"][split_name(split)] = {{"count", n}, {"seed", seed}};
  std::ofstream f(mpath, std::ios::trunc);
  f << manifest.dump(2) << "\n";
}

std::vector<LabeledImage> load_split(const fs::path& root, Split split) {
  const fs::path dir = root / split_name(split);
  const fs::path labels = dir / "labels.jsonl";
  std::ifstream f(labels);
  if (!f) throw IoError("missing " + labels.string() + " (run gen-data first)");
  std::map<std::string, GroundTruth> by_image;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      GroundTruthBox b;
      b.class_id = shape_id(j.at("class").get<std::string>());
      if (b.class_id < 0) throw IoError("unknown class");
      b.box = {j.at("x").get<double>(), j.at("y").get<double>(), j.at("w").get<double>(),
               j.at("h").get<double>()};
      by_image[j.at("image").get<std::string>()].push_back(b);
    } catch (const std::exception& e) {
      throw IoError(labels.string() + ":" + std::to_string(lineno) + ": bad label (" + e.what() + ")");
    }
  }
  std::vector<LabeledImage> out;
  for (const auto& entry : fs::directory_iterator(dir / "images")) {
    if (entry.path().extension() != ".ppm") continue;
    LabeledImage li;
    li.name = entry.path().filename().string();
    out.push_back(std::move(li));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  for (auto& li : out) {
    li.image = read_ppm(dir / "images" / li.name);
    if (auto it = by_image.find(li.name); it != by_image.end()) li.objects = it->second;
  }
  return out;
}

}  // namespace mcblock
