#include "mcblock/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "mcblock/error.hpp"
#include "mcblock/graph.hpp"
#include "mcblock/mc_inference.hpp"
#include "mcblock/parallel.hpp"
#include "mcblock/persistence.hpp"

namespace mcblock {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

int default_split_count(Split s) {
  switch (s) {
    case Split::train: return 2000;
    case Split::val: return 200;
    case Split::test_id: return 300;
    case Split::test_ood: return 300;
  }
  return 0;
}

int image_label(const LabeledImage& img) {
  if (img.objects.empty()) throw ContractError("image " + img.name + " has no objects");
  const GroundTruthBox* best = &img.objects[0];
  for (const auto& o : img.objects)
    if (o.box.area() > best->box.area()) best = &o;
  return best->class_id;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw IoError("cannot write " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<LabeledImage> load_limited(const std::string& root, Split split, int limit) {
  auto images = load_split(root, split);
  if (limit > 0 && static_cast<std::size_t>(limit) < images.size()) images.resize(static_cast<std::size_t>(limit));
  return images;
}

// Batch of images [B,3,S,S] from the given indices.
Tensor stack(const std::vector<LabeledImage>& set, std::span<const std::size_t> idx) {
  const Shape& one = set[idx[0]].image.shape();
  Tensor out({static_cast<int>(idx.size()), one[1], one[2], one[3]});
  const std::size_t n = shape_numel(one);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Tensor& img = set[idx[i]].image;
    if (img.shape() != one) throw DimensionError("images in a batch differ in shape");
    std::copy(img.values().begin(), img.values().end(), out.data() + i * n);
  }
  return out;
}

struct BatchResult {
  LossBreakdown terms;
  std::vector<Tensor> grads;
};

// Forward (and optionally backward) on one batch.
BatchResult run_batch(const ExperimentConfig& cfg, const ModelParams& params,
                      const std::vector<LabeledImage>& set, std::span<const std::size_t> idx,
                      const StochasticSite& site, CounterRng rng, bool want_grads) {
  Graph g;
  Network net(g, params, want_grads);
  Var out = net.forward(g.constant(stack(set, idx)), site, rng);
  const std::vector<Var> decayed = net.decayed();
  BatchResult r;
  Var loss;
  if (params.hyper.arch == Arch::detector) {
    std::vector<GroundTruth> targets;
    for (std::size_t i : idx) targets.push_back(set[i].objects);
    loss = total_loss(g, out, targets, decayed, params.hyper, cfg.loss, &r.terms);
  } else {
    std::vector<int> labels;
    for (std::size_t i : idx) labels.push_back(image_label(set[i]));
    loss = classifier_loss(g, out, labels, decayed, cfg.loss, &r.terms);
  }
  r.terms.total = g.value(loss)[0];
  if (want_grads && std::isfinite(r.terms.total)) {
    g.backward(loss);
    for (Var v : net.vars()) r.grads.push_back(g.grad(v));
  }
  return r;
}

void accumulate(LossBreakdown& acc, const LossBreakdown& t, double w) {
  acc.box += w * t.box;
  acc.obj += w * t.obj;
  acc.cls += w * t.cls;
  acc.wd += w * t.wd;
  acc.total += w * t.total;
}

void scale(LossBreakdown& acc, double w) {
  LossBreakdown out;
  accumulate(out, acc, w);
  acc = out;
}

std::string breakdown_text(const LossBreakdown& t) {
  std::ostringstream ss;
  ss << "box=" << t.box << " obj=" << t.obj << " cls=" << t.cls << " wd=" << t.wd
     << " total=" << t.total;
  return ss.str();
}

std::vector<std::vector<std::size_t>> batches(std::vector<std::size_t> order, int batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return out;
}

std::vector<std::size_t> iota_order(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

// Mean loss over a set, weighted by batch size.
LossBreakdown mean_loss(const ExperimentConfig& cfg, const ModelParams& params,
                        const std::vector<LabeledImage>& set, const StochasticSite& site,
                        const CounterRng& rng) {
  LossBreakdown acc;
  const auto bs = batches(iota_order(set.size()), cfg.batch_size);
  for (std::size_t b = 0; b < bs.size(); ++b) {
    const auto r = run_batch(cfg, params, set, bs[b], site, rng.split(b), false);
    accumulate(acc, r.terms, static_cast<double>(bs[b].size()));
  }
  scale(acc, 1.0 / static_cast<double>(set.size()));
  return acc;
}

}  // namespace

std::string epoch_log_line(const EpochLog& e) {
  ordered_json j;
  j["epoch"] = e.epoch;
  j["lr"] = e.lr;
  j["loss"] = e.train.total;
  j["box"] = e.train.box;
  j["obj"] = e.train.obj;
  j["cls"] = e.train.cls;
  j["wd"] = e.train.wd;
  if (e.val_loss) j["val_loss"] = *e.val_loss;
  return j.dump();
}

TrainOutcome train(const ExperimentConfig& cfg, const std::vector<LabeledImage>& train_set,
                   const std::vector<LabeledImage>& val_set, std::ostream* progress) {
  cfg.validate();
  if (train_set.empty()) throw ContractError("training set is empty");
  const CounterRng root(cfg.seed);
  CounterRng init_rng = root.split(stream::init);
  TrainOutcome out;
  out.last = ModelParams::init(cfg.model_hyper(), init_rng);
  const StochasticSite site = cfg.train_site();
  const StochasticSite plain = StochasticSite::disabled();

  auto val_loss = [&](const ModelParams& p) -> std::optional<double> {
    if (val_set.empty()) return std::nullopt;
    return mean_loss(cfg, p, val_set, plain, root).total;
  };
  if (cfg.log_initial_loss) {
    EpochLog e;
    e.train = mean_loss(cfg, out.last, train_set, site, root.split(stream::initial_loss));
    e.val_loss = val_loss(out.last);
    out.log.push_back(e);
    if (progress) *progress << epoch_log_line(e) << std::endl;
  }

  std::vector<Tensor> velocity;
  for (const auto& t : out.last.tensors) velocity.emplace_back(t.tensor.shape());
  out.best = out.last;
  double best_val = std::numeric_limits<double>::infinity();
  std::uint64_t step = 0;
  const int decay_epoch = static_cast<int>(std::ceil(cfg.lr_decay_at * cfg.epochs - 1e-9));

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order = iota_order(train_set.size());
    CounterRng shuffle = root.split(stream::shuffle).split(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle.uniform_int(i)]);

    EpochLog e;
    e.epoch = epoch;
    const auto bs = batches(std::move(order), cfg.batch_size);
    for (std::size_t b = 0; b < bs.size(); ++b, ++step) {
      double lr = cfg.lr;
      if (cfg.warmup_steps > 0)
        lr *= std::min(1.0, static_cast<double>(step + 1) / cfg.warmup_steps);
      if (epoch > decay_epoch) lr *= 0.1;
      e.lr = lr;

      auto r = run_batch(cfg, out.last, train_set, bs[b], site,
                         root.split(stream::train_mask).split(step), true);
      if (!std::isfinite(r.terms.total))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(b) + ": " + breakdown_text(r.terms));
      accumulate(e.train, r.terms, static_cast<double>(bs[b].size()));

      double norm2 = 0.0;
      for (const Tensor& g : r.grads)
        for (float v : g.values()) norm2 += static_cast<double>(v) * v;
      const double norm = std::sqrt(norm2);
      const float clip =
          cfg.clip_norm > 0.0 && norm > cfg.clip_norm ? static_cast<float>(cfg.clip_norm / norm) : 1.0f;
      const float mu = static_cast<float>(cfg.momentum);
      const float rate = static_cast<float>(lr);
      for (std::size_t k = 0; k < r.grads.size(); ++k) {
        float* w = out.last.tensors[k].tensor.data();
        float* v = velocity[k].data();
        const float* g = r.grads[k].data();
        for (std::size_t i = 0; i < velocity[k].size(); ++i) {
          v[i] = mu * v[i] + clip * g[i];
          w[i] -= rate * v[i];
        }
      }
    }
    scale(e.train, 1.0 / static_cast<double>(train_set.size()));
    e.val_loss = val_loss(out.last);
    out.log.push_back(e);
    if (e.val_loss && *e.val_loss < best_val) {
      best_val = *e.val_loss;
      out.best = out.last;
    }
    if (progress) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      *progress << epoch_log_line(e) << "  (" << std::fixed << std::setprecision(1) << secs
                << " s)" << std::defaultfloat << std::endl;
    }
  }
  if (val_set.empty()) out.best = out.last;
  return out;
}

TrainOutcome cmd_train(const ExperimentConfig& cfg, std::ostream* progress) {
  cfg.validate();
  const auto train_set = load_limited(cfg.data_root, Split::train, cfg.train_limit);
  std::vector<LabeledImage> val_set;
  if (fs::exists(fs::path(cfg.data_root) / split_name(Split::val) / "labels.jsonl"))
    val_set = load_split(cfg.data_root, Split::val);
  const fs::path run(cfg.run_dir);
  fs::create_directories(run);
  write_text(run / "config.resolved", cfg.resolved_text());
  TrainOutcome out = train(cfg, train_set, val_set, progress);
  save_weights(out.last, run / "weights.mcbk");
  save_weights(out.best, run / "weights.best.mcbk");
  std::string log;
  for (const auto& e : out.log) log += epoch_log_line(e) + "\n";
  write_text(run / "log.jsonl", log);
  return out;
}

std::vector<std::vector<Detection>> predict(const ExperimentConfig& cfg, const ModelParams& params,
                                            const std::vector<LabeledImage>& images, Method method) {
  const McConfig mc = cfg.mc_config(method);
  mc.validate();
  const CounterRng base = CounterRng(cfg.seed).split(stream::eval);
  std::vector<std::vector<Detection>> out(images.size());
  parallel_for(images.size(), default_threads(), [&](std::size_t i) {
    out[i] = mc_detect(images[i].image, params, mc, base.split(i));
  });
  return out;
}

EntropySummary summarize_entropy(const std::vector<std::vector<Detection>>& dets) {
  std::vector<std::vector<double>> all;
  std::vector<std::vector<double>> image_means;
  for (const auto& img : dets) {
    if (img.empty()) continue;
    std::vector<std::vector<double>> dists;
    for (const Detection& d : img) dists.push_back(d.class_probs);
    image_means.push_back({mean_entropy(dists)});
    all.insert(all.end(), dists.begin(), dists.end());
  }
  EntropySummary s;
  s.detections = static_cast<int>(all.size());
  if (!all.empty()) s.per_detection = mean_entropy(all);
  if (!image_means.empty()) {
    double acc = 0.0;
    for (const auto& m : image_means) acc += m[0];
    s.per_image = acc / static_cast<double>(image_means.size());
  }
  return s;
}

namespace {

std::vector<McClassification> classify_all(const ExperimentConfig& cfg, const ModelParams& params,
                                           const std::vector<LabeledImage>& images, Method method) {
  const McConfig mc = cfg.mc_config(method);
  const CounterRng base = CounterRng(cfg.seed).split(stream::eval);
  std::vector<McClassification> out(images.size());
  parallel_for(images.size(), default_threads(), [&](std::size_t i) {
    out[i] = mc_classify(images[i].image, params, mc, base.split(i));
  });
  return out;
}

std::string overlay_name(const LabeledImage& img) {
  return fs::path(img.name).stem().string() + ".ppm";
}

}  // namespace

MetricsReport evaluate(const ExperimentConfig& cfg, const ModelParams& params,
                       const std::vector<LabeledImage>& images) {
  if (images.empty()) throw ContractError("evaluation split is empty");
  MetricsReport r;
  r.n_images = static_cast<int>(images.size());
  r.config = cfg.resolved();
  const int C = params.hyper.num_classes;
  if (params.hyper.arch == Arch::classifier) {
    const auto res = classify_all(cfg, params, images, cfg.mc_method);
    std::vector<std::vector<double>> probs;
    std::vector<int> labels;
    int correct = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
      probs.push_back(res[i].mean_probs);
      labels.push_back(image_label(images[i]));
      const auto arg = std::max_element(probs.back().begin(), probs.back().end()) - probs.back().begin();
      correct += arg == labels.back();
    }
    r.brier = brier(probs, labels);
    r.mean_entropy = mean_entropy(probs);
    r.extra["accuracy"] = static_cast<double>(correct) / static_cast<double>(images.size());
    return r;
  }
  const auto dets = predict(cfg, params, images, cfg.mc_method);
  std::vector<GroundTruth> gts;
  for (const auto& img : images) gts.push_back(img.objects);
  const ApResult ap = average_precision(dets, gts, cfg.iou_thresh, C);
  r.map_50 = ap.map;
  r.per_class_ap = ap.per_class;
  r.brier = detection_brier(dets, gts, cfg.iou_thresh, C);
  const EntropySummary es = summarize_entropy(dets);
  r.mean_entropy = es.per_detection;
  r.extra["mean_entropy_per_image"] = es.per_image;
  r.extra["detections"] = es.detections;
  return r;
}

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace {

ModelParams load_checked(const ExperimentConfig& cfg) {
  ModelParams p = load_weights(cfg.weights_path());
  check_compatible(p, cfg.model_hyper());
  return p;
}

}  // namespace

MetricsReport cmd_eval(const ExperimentConfig& cfg) {
  cfg.validate();
  const ModelParams params = load_checked(cfg);
  const auto images = load_limited(cfg.data_root, parse_split(cfg.eval_split), cfg.eval_limit);
  MetricsReport r = evaluate(cfg, params, images);
  r.timestamp = utc_timestamp();
  const fs::path run(cfg.run_dir);
  fs::create_directories(run);
  write_text(run / "metrics.json", report_to_json(r) + "\n");
  if (cfg.overlays > 0 && params.hyper.arch == Arch::detector) {
    const std::size_t n = std::min(images.size(), static_cast<std::size_t>(cfg.overlays));
    const std::vector<LabeledImage> subset(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(n));
    const auto dets = predict(cfg, params, subset, cfg.mc_method);
    fs::create_directories(run / "overlays");
    for (std::size_t i = 0; i < n; ++i)
      write_overlay(run / "overlays" / overlay_name(subset[i]), subset[i].image, dets[i]);
  }
  return r;
}

std::vector<OodEntry> ood_entries(const ExperimentConfig& cfg, const ModelParams& params,
                                  const std::vector<LabeledImage>& id,
                                  const std::vector<LabeledImage>& ood) {
  if (id.empty() || ood.empty()) throw ContractError("ood evaluation needs both test splits");
  std::vector<OodEntry> out;
  for (Method m : cfg.sweep) {
    OodEntry e;
    e.method = m;
    if (params.hyper.arch == Arch::detector) {
      const EntropySummary a = summarize_entropy(predict(cfg, params, id, m));
      const EntropySummary b = summarize_entropy(predict(cfg, params, ood, m));
      e.mean_entropy_id = a.per_detection;
      e.mean_entropy_ood = b.per_detection;
      e.per_image_id = a.per_image;
      e.per_image_ood = b.per_image;
      e.detections_id = a.detections;
      e.detections_ood = b.detections;
    } else {
      auto entropy_of = [&](const std::vector<LabeledImage>& set) {
        std::vector<std::vector<double>> probs;
        for (const auto& c : classify_all(cfg, params, set, m)) probs.push_back(c.mean_probs);
        return mean_entropy(probs);
      };
      e.mean_entropy_id = e.per_image_id = entropy_of(id);
      e.mean_entropy_ood = e.per_image_ood = entropy_of(ood);
      e.detections_id = static_cast<int>(id.size());
      e.detections_ood = static_cast<int>(ood.size());
    }
    e.ratio = e.mean_entropy_id > 0.0 ? e.mean_entropy_ood / e.mean_entropy_id
                                      : std::numeric_limits<double>::quiet_NaN();
    out.push_back(e);
  }
  return out;
}

std::string ood_to_json(const std::vector<OodEntry>& entries, const ExperimentConfig& cfg,
                        const std::string& timestamp) {
  ordered_json j;
  j["timestamp"] = timestamp;
  auto num = [](double v) { return std::isfinite(v) ? ordered_json(round6(v)) : ordered_json(nullptr); };
  ordered_json list = ordered_json::array();
  for (const auto& e : entries) {
    ordered_json o;
    o["method"] = to_string(e.method);
    o["mean_entropy_id"] = num(e.mean_entropy_id);
    o["mean_entropy_ood"] = num(e.mean_entropy_ood);
    o["ratio"] = num(e.ratio);
    o["mean_entropy_per_image_id"] = num(e.per_image_id);
    o["mean_entropy_per_image_ood"] = num(e.per_image_ood);
    o["detections_id"] = e.detections_id;
    o["detections_ood"] = e.detections_ood;
    list.push_back(o);
  }
  j["methods"] = list;
  ordered_json c;
  for (const auto& [k, v] : cfg.resolved()) c[k] = v;
  j["config"] = c;
  return j.dump(2);
}

std::vector<OodEntry> cmd_ood_eval(const ExperimentConfig& cfg) {
  cfg.validate();
  const ModelParams params = load_checked(cfg);
  const auto id = load_limited(cfg.data_root, Split::test_id, cfg.eval_limit);
  const auto ood = load_limited(cfg.data_root, Split::test_ood, cfg.eval_limit);
  auto entries = ood_entries(cfg, params, id, ood);
  const fs::path run(cfg.run_dir);
  fs::create_directories(run);
  write_text(run / "ood_metrics.json", ood_to_json(entries, cfg, utc_timestamp()) + "\n");
  return entries;
}

namespace {

std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string config_value(const MetricsReport& r, const std::string& key) {
  for (const auto& [k, v] : r.config)
    if (k == key) return v;
  return "-";
}

}  // namespace

ReportTable cmd_report(std::vector<fs::path> paths) {
  if (paths.empty()) throw ContractError("report needs at least one metrics file");
  std::sort(paths.begin(), paths.end());
  const std::vector<std::string> header{"path", "arch", "method", "split", "map_50", "brier",
                                        "mean_entropy", "n_images"};
  std::vector<std::vector<std::string>> rows;
  ordered_json list = ordered_json::array();
  for (const auto& p : paths) {
    const MetricsReport r = report_from_json(read_text(p), p.string());
    rows.push_back({p.string(), config_value(r, "model.arch"), config_value(r, "mc.method"),
                    config_value(r, "eval.split"), fmt6(r.map_50), fmt6(r.brier),
                    fmt6(r.mean_entropy), std::to_string(r.n_images)});
    ordered_json o;
    o["path"] = p.string();
    o["arch"] = rows.back()[1];
    o["method"] = rows.back()[2];
    o["split"] = rows.back()[3];
    o["map_50"] = r.map_50;
    o["brier"] = r.brier;
    o["mean_entropy"] = r.mean_entropy;
    o["n_images"] = r.n_images;
    ordered_json ap;
    for (const auto& [c, v] : r.per_class_ap) ap[std::to_string(c)] = v;
    o["per_class_ap"] = ap;
    list.push_back(o);
  }
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& row : rows) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream text;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      // Text columns align left, numbers right.
      if (c < 4) text << std::left; else text << std::right;
      text << std::setw(static_cast<int>(width[c])) << cells[c] << (c + 1 < cells.size() ? "  " : "\n");
    }
  };
  line(header);
  for (const auto& row : rows) line(row);
  ordered_json j;
  j["rows"] = list;
  return {text.str(), j.dump(2)};
}

namespace {

// 3x5 glyphs, one bit per pixel, rows top to bottom.
constexpr std::array<std::array<std::uint8_t, 5>, 11> kGlyphs{{
    {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
    {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7},
    {0, 0, 0, 0, 2},
}};

constexpr std::array<std::array<std::uint8_t, 3>, 3> kClassColors{{{230, 40, 40}, {40, 200, 40}, {40, 80, 230}}};

struct Canvas {
  int w, h;
  std::vector<std::uint8_t> rgb;
  void put(int x, int y, const std::array<std::uint8_t, 3>& c) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    std::copy(c.begin(), c.end(), rgb.begin() + (static_cast<std::size_t>(y) * w + x) * 3);
  }
};

void draw_text(Canvas& cv, int x, int y, const std::string& s, const std::array<std::uint8_t, 3>& c) {
  constexpr int k = 2;  // glyph pixel size
  for (char ch : s) {
    const int g = ch == '.' ? 10 : (ch >= '0' && ch <= '9' ? ch - '0' : -1);
    if (g >= 0)
      for (int r = 0; r < 5; ++r)
        for (int b = 0; b < 3; ++b)
          if (kGlyphs[g][r] & (4 >> b))
            for (int dy = 0; dy < k; ++dy)
              for (int dx = 0; dx < k; ++dx) cv.put(x + b * k + dx, y + r * k + dy, c);
    x += 4 * k;
  }
}

}  // namespace

void write_overlay(const fs::path& path, const Tensor& image, const std::vector<Detection>& dets) {
  constexpr int up = 4;
  const int H = image.dim(2), W = image.dim(3);
  Canvas cv{W * up, H * up, std::vector<std::uint8_t>(static_cast<std::size_t>(W) * H * up * up * 3)};
  for (int y = 0; y < cv.h; ++y)
    for (int x = 0; x < cv.w; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = (image.at(0, c, y / up, x / up) + 0.5f) * 255.0f;
        cv.rgb[(static_cast<std::size_t>(y) * cv.w + x) * 3 + c] =
            static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
  for (const Detection& d : dets) {
    if (d.confidence() < 0.25) continue;
    const auto& col = kClassColors[static_cast<std::size_t>(d.best_class()) % kClassColors.size()];
    const int x1 = static_cast<int>(std::lround(d.box.x1() * cv.w));
    const int x2 = static_cast<int>(std::lround(d.box.x2() * cv.w)) - 1;
    const int y1 = static_cast<int>(std::lround(d.box.y1() * cv.h));
    const int y2 = static_cast<int>(std::lround(d.box.y2() * cv.h)) - 1;
    for (int x = x1; x <= x2; ++x) cv.put(x, y1, col), cv.put(x, y2, col);
    for (int y = y1; y <= y2; ++y) cv.put(x1, y, col), cv.put(x2, y, col);
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.2f", d.entropy);
    draw_text(cv, x1 + 2, y1 + 2, buf, col);
  }
  write_ppm(path, cv.w, cv.h, cv.rgb);
}

}  // namespace mcblock
