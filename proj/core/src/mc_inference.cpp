#include "mcblock/mc_inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mcblock/error.hpp"
#include "mcblock/metrics.hpp"
#include "mcblock/parallel.hpp"

namespace mcblock {

void McConfig::validate() const {
  if (samples < 1) throw ConfigError("mc.samples must be >= 1");
  if (!(merge_iou > 0.0 && merge_iou < 1.0)) throw ConfigError("mc.merge_iou must lie in (0, 1)");
  if (!(min_support_frac >= 0.0 && min_support_frac <= 1.0))
    throw ConfigError("mc.min_support_frac must lie in [0, 1]");
  if (!(conf_thresh >= 0.0 && conf_thresh <= 1.0)) throw ConfigError("conf_thresh must lie in [0, 1]");
  if (!(nms_iou > 0.0 && nms_iou < 1.0)) throw ConfigError("nms_iou must lie in (0, 1)");
  if (!(drop_prob >= 0.0 && drop_prob < 1.0)) throw ConfigError("drop probability must lie in [0, 1)");
}

StochasticSite McConfig::site() const {
  StochasticSite s;
  s.method = method;
  s.mode = method == Method::none ? DropMode::disabled : DropMode::inference;
  s.block_size = block_size;
  s.drop_prob = drop_prob;
  s.per_channel = per_channel;
  return s;
}

int McConfig::min_support() const {
  // The epsilon absorbs representation error in products like 0.3 * 30.
  return std::max(1, static_cast<int>(std::ceil(min_support_frac * samples - 1e-9)));
}

namespace {

// Mean shifted by the first element so identical inputs reproduce exactly.
double shifted_mean(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x - v[0];
  return v[0] + acc / static_cast<double>(v.size());
}

double population_variance(const std::vector<double>& v, double mean) {
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return acc / static_cast<double>(v.size());
}

std::vector<double> softmax_row(const Tensor& logits) {
  std::vector<double> p(logits.size());
  const double mx = *std::max_element(logits.values().begin(), logits.values().end());
  double total = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) total += (p[c] = std::exp(logits[c] - mx));
  for (double& x : p) x /= total;
  return p;
}

int pass_count(const McConfig& cfg) { return cfg.method == Method::none ? 1 : cfg.samples; }

// Runs the stochastic head once per pass on shared backbone features. The
// backbone is deterministic, so this equals S full forward passes.
std::vector<Tensor> head_passes(const Tensor& image, const ModelParams& params, const McConfig& cfg,
                                const CounterRng& rng) {
  cfg.validate();
  const Tensor features = backbone_features(image, params);
  const StochasticSite site = cfg.site();
  const int S = pass_count(cfg);
  std::vector<Tensor> out(static_cast<std::size_t>(S));
  parallel_for(out.size(), cfg.threads, [&](std::size_t s) {
    CounterRng stream = rng.split(s);
    out[s] = head_forward(features, params, site, stream);
  });
  return out;
}

}  // namespace

McClassification mc_classify(const Tensor& image, const ModelParams& params, const McConfig& cfg,
                             const CounterRng& rng) {
  if (params.hyper.arch != Arch::classifier) throw ContractError("mc_classify needs classifier weights");
  const auto logits = head_passes(image, params, cfg, rng);
  McClassification out;
  out.mean_probs.assign(static_cast<std::size_t>(params.hyper.num_classes), 0.0);
  for (const Tensor& l : logits) {
    const auto p = softmax_row(l);
    for (std::size_t c = 0; c < p.size(); ++c) out.mean_probs[c] += p[c];
  }
  for (double& p : out.mean_probs) p /= static_cast<double>(logits.size());
  out.entropy = shannon_entropy(out.mean_probs);
  return out;
}

std::vector<std::vector<Detection>> mc_sample_detections(const Tensor& image,
                                                         const ModelParams& params,
                                                         const McConfig& cfg,
                                                         const CounterRng& rng) {
  if (params.hyper.arch != Arch::detector) throw ContractError("mc_detect needs detector weights");
  const auto raws = head_passes(image, params, cfg, rng);
  std::vector<std::vector<Detection>> out;
  out.reserve(raws.size());
  for (const Tensor& raw : raws) out.push_back(nms(decode(raw, params.hyper, cfg.conf_thresh), cfg.nms_iou));
  return out;
}

namespace {

struct Member {
  std::size_t sample;
  const Detection* det;
};

bool member_order(const Member& a, const Member& b) {
  const Detection& x = *a.det;
  const Detection& y = *b.det;
  if (x.objectness != y.objectness) return x.objectness > y.objectness;
  if (x.box.x != y.box.x) return x.box.x < y.box.x;
  if (x.box.y != y.box.y) return x.box.y < y.box.y;
  if (x.box.w != y.box.w) return x.box.w < y.box.w;
  if (x.box.h != y.box.h) return x.box.h < y.box.h;
  return x.class_probs < y.class_probs;
}

}  // namespace

std::vector<Detection> merge_samples(const std::vector<std::vector<Detection>>& per_sample,
                                     const McConfig& cfg) {
  cfg.validate();
  const int S = static_cast<int>(per_sample.size());
  if (S < 1) throw ContractError("merge_samples needs at least one sample");
  std::vector<Member> all;
  for (std::size_t s = 0; s < per_sample.size(); ++s)
    for (const Detection& d : per_sample[s]) all.push_back({s, &d});
  std::stable_sort(all.begin(), all.end(), member_order);

  McConfig effective = cfg;
  effective.samples = S;
  const int min_support = effective.min_support();

  std::vector<char> used(all.size(), 0);
  std::vector<Detection> out;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (used[i]) continue;
    used[i] = 1;
    std::vector<const Detection*> members{all[i].det};
    std::vector<char> sample_taken(per_sample.size(), 0);
    sample_taken[all[i].sample] = 1;
    for (std::size_t j = i + 1; j < all.size(); ++j) {
      if (used[j] || sample_taken[all[j].sample]) continue;
      if (iou(all[i].det->box, all[j].det->box) >= cfg.merge_iou) {
        used[j] = 1;
        sample_taken[all[j].sample] = 1;
        members.push_back(all[j].det);
      }
    }
    const int support = static_cast<int>(members.size());
    if (support < min_support) continue;

    Detection merged;
    merged.support = support;
    auto stat = [&](auto get, double& mean, double* var) {
      std::vector<double> v;
      v.reserve(members.size());
      for (const Detection* m : members) v.push_back(get(*m));
      mean = shifted_mean(v);
      if (var) *var = population_variance(v, mean);
    };
    stat([](const Detection& d) { return d.box.x; }, merged.box.x, &merged.epistemic_box_var[0]);
    stat([](const Detection& d) { return d.box.y; }, merged.box.y, &merged.epistemic_box_var[1]);
    stat([](const Detection& d) { return d.box.w; }, merged.box.w, &merged.epistemic_box_var[2]);
    stat([](const Detection& d) { return d.box.h; }, merged.box.h, &merged.epistemic_box_var[3]);
    for (int k = 0; k < 4; ++k)
      stat([k](const Detection& d) { return d.sigma[k]; }, merged.sigma[k], nullptr);
    const std::size_t C = members[0]->class_probs.size();
    merged.class_probs.assign(C, 0.0);
    for (std::size_t c = 0; c < C; ++c)
      stat([c](const Detection& d) { return d.class_probs.at(c); }, merged.class_probs[c], nullptr);
    // Samples without a member vote objectness 0.
    double mean_obj = 0.0;
    stat([](const Detection& d) { return d.objectness; }, mean_obj, nullptr);
    merged.objectness = support == S ? mean_obj : mean_obj * support / S;
    merged.entropy = shannon_entropy(merged.class_probs);
    out.push_back(std::move(merged));
  }
  std::sort(out.begin(), out.end(), confidence_order);
  return out;
}

std::vector<Detection> mc_detect(const Tensor& image, const ModelParams& params,
                                 const McConfig& cfg, const CounterRng& rng) {
  const auto samples = mc_sample_detections(image, params, cfg, rng);
  if (cfg.method != Method::none) return merge_samples(samples, cfg);
  // Deterministic: one pass stands for all S identical samples.
  std::vector<Detection> out = samples[0];
  for (Detection& d : out) {
    d.support = cfg.samples;
    d.epistemic_box_var = {};
    d.entropy = shannon_entropy(d.class_probs);
  }
  return out;
}

double detection_entropy(const Detection& d) {
  double s = 0.0;
  for (double p : d.class_probs) {
    if (p < 0.0) throw ContractError("class distribution has a negative entry");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-6) throw ContractError("class distribution does not sum to 1");
  return shannon_entropy(d.class_probs);
}

}  // namespace mcblock
