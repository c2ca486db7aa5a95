#include "mcblock/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "mcblock/error.hpp"
#include "mcblock/kernels.hpp"

namespace mcblock {

const char* to_string(Arch a) noexcept { return a == Arch::detector ? "detector" : "classifier"; }

const char* to_string(Method m) noexcept {
  switch (m) {
    case Method::none: return "none";
    case Method::dropblock: return "dropblock";
    case Method::dropout: return "dropout";
  }
  return "none";
}

Method parse_method(const std::string& s) {
  if (s == "none") return Method::none;
  if (s == "dropblock") return Method::dropblock;
  if (s == "dropout") return Method::dropout;
  throw ConfigError("unknown method '" + s + "' (expected none, dropout or dropblock)");
}

Arch parse_arch(const std::string& s) {
  if (s == "detector") return Arch::detector;
  if (s == "classifier") return Arch::classifier;
  throw ConfigError("unknown architecture '" + s + "' (expected detector or classifier)");
}

void ModelHyper::validate() const {
  if (image_size < 8 || image_size % 8 != 0)
    throw ConfigError("image size must be a positive multiple of 8");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (arch == Arch::detector && anchors.empty()) throw ConfigError("detector needs anchors");
  for (const Anchor& a : anchors)
    if (!(a.w > 0.0f && a.h > 0.0f)) throw ConfigError("anchor sizes must be positive");
  DropBlockConfig cfg;
  cfg.block_size = block_size;
  cfg.drop_prob = drop_prob;
  cfg.validate(grid(), grid());
}

namespace {

struct ConvSpec {
  const char* name;
  int in, out, stride;
};

constexpr ConvSpec kBackbone[] = {
    {"conv1", 3, 16, 2}, {"conv2", 16, 32, 2}, {"conv3", 32, 64, 2}, {"conv4", 64, 64, 1}};

constexpr float kLeakySlope = 0.1f;

std::vector<std::pair<std::string, Shape>> layout(const ModelHyper& h) {
  std::vector<std::pair<std::string, Shape>> out;
  for (const ConvSpec& c : kBackbone) {
    out.push_back({std::string(c.name) + ".weight", {c.out, c.in, 3, 3}});
    out.push_back({std::string(c.name) + ".bias", {c.out}});
  }
  if (h.arch == Arch::detector) {
    out.push_back({"head.weight", {h.head_channels(), ModelHyper::kFeatureChannels, 1, 1}});
    out.push_back({"head.bias", {h.head_channels()}});
  } else {
    out.push_back({"fc.weight", {ModelHyper::kFeatureChannels * h.grid() * h.grid(), h.num_classes}});
    out.push_back({"fc.bias", {h.num_classes}});
  }
  return out;
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

double softplus(double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }

}  // namespace

bool is_decayed(const std::string& name) {
  return name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
}

const Tensor& ModelParams::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.tensor;
  throw ContractError("no parameter named '" + name + "'");
}

Tensor& ModelParams::get(const std::string& name) {
  return const_cast<Tensor&>(std::as_const(*this).get(name));
}

std::size_t ModelParams::weight_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors)
    if (is_decayed(t.name)) n += t.tensor.size();
  return n;
}

ModelParams ModelParams::zeros(const ModelHyper& hyper) {
  hyper.validate();
  ModelParams p;
  p.hyper = hyper;
  for (auto& [name, shape] : layout(hyper)) p.tensors.push_back({name, Tensor(shape)});
  return p;
}

ModelParams ModelParams::init(const ModelHyper& hyper, CounterRng& rng) {
  ModelParams p = zeros(hyper);
  for (auto& [name, t] : p.tensors) {
    if (!is_decayed(name)) continue;
    const bool is_head = name == "head.weight" || name == "fc.weight";
    const std::size_t fan_in = t.rank() == 4
                                   ? static_cast<std::size_t>(t.dim(1)) * t.dim(2) * t.dim(3)
                                   : static_cast<std::size_t>(t.dim(0));
    const double std = is_head ? 0.01 : std::sqrt(2.0 / static_cast<double>(fan_in));
    for (float& v : t.values()) v = static_cast<float>(std * rng.normal());
  }
  if (hyper.arch == Arch::detector) {
    // Objectness prior of ~2% keeps the initial negative term from swamping the rest.
    Tensor& b = p.get("head.bias");
    for (int a = 0; a < hyper.num_anchors(); ++a) b[a * hyper.per_anchor() + 8] = -4.0f;
  }
  return p;
}

DropBlockConfig StochasticSite::dropblock_config() const {
  DropBlockConfig cfg;
  cfg.block_size = block_size;
  cfg.drop_prob = drop_prob;
  cfg.mode = mode;
  cfg.per_channel = per_channel;
  return cfg;
}

Network::Network(Graph& graph, const ModelParams& params, bool trainable)
    : graph_(graph), params_(params) {
  vars_.reserve(params.tensors.size());
  for (const auto& t : params.tensors)
    vars_.push_back(trainable ? graph.parameter(t.tensor) : graph.constant(t.tensor));
}

Var Network::param(const std::string& name) const {
  for (std::size_t i = 0; i < params_.tensors.size(); ++i)
    if (params_.tensors[i].name == name) return vars_[i];
  throw ContractError("no parameter named '" + name + "'");
}

std::vector<Var> Network::decayed() const {
  std::vector<Var> out;
  for (std::size_t i = 0; i < params_.tensors.size(); ++i)
    if (is_decayed(params_.tensors[i].name)) out.push_back(vars_[i]);
  return out;
}

Var Network::backbone(Var images) {
  const Tensor& x = graph_.value(images);
  const int S = params_.hyper.image_size;
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != S || x.dim(3) != S)
    throw DimensionError("expected images [N,3," + std::to_string(S) + "," + std::to_string(S) +
                         "], got " + shape_str(x.shape()));
  Var h = images;
  for (const ConvSpec& c : kBackbone) {
    h = graph_.conv2d(h, param(std::string(c.name) + ".weight"), c.stride, 1);
    h = graph_.add_channel_bias(h, param(std::string(c.name) + ".bias"));
    h = graph_.leaky_relu(h, kLeakySlope);
  }
  return h;
}

Var Network::stochastic(Var features, const StochasticSite& site, CounterRng& rng) {
  if (!site.active()) return features;
  if (site.method == Method::dropblock) return dropblock(graph_, features, site.dropblock_config(), rng);
  const int C = graph_.value(features).dim(1);
  return apply_dropout_mask(graph_, features, sample_dropout_mask(C, site.drop_prob, rng));
}

Var Network::head(Var features) {
  if (params_.hyper.arch == Arch::detector) {
    Var out = graph_.conv2d(features, param("head.weight"), 1, 0);
    return graph_.add_channel_bias(out, param("head.bias"));
  }
  const Tensor& f = graph_.value(features);
  Var flat = graph_.reshape(features, {f.dim(0), static_cast<int>(f.size() / f.dim(0))});
  return graph_.dense(flat, param("fc.weight"), param("fc.bias"));
}

Var Network::forward(Var images, const StochasticSite& site, CounterRng& rng) {
  return head(stochastic(backbone(images), site, rng));
}

namespace {

Tensor single_forward(const Tensor& image, const ModelParams& params, const StochasticSite& site,
                      CounterRng& rng, Arch expected) {
  if (params.hyper.arch != expected)
    throw ContractError(std::string("parameters are for a ") + to_string(params.hyper.arch));
  Graph g;
  Network net(g, params, false);
  return g.value(net.forward(g.constant(image), site, rng));
}

}  // namespace

Tensor detector_forward(const Tensor& image, const ModelParams& params, const StochasticSite& site,
                        CounterRng& rng) {
  return single_forward(image, params, site, rng, Arch::detector);
}

Tensor classifier_forward(const Tensor& image, const ModelParams& params,
                          const StochasticSite& site, CounterRng& rng) {
  return single_forward(image, params, site, rng, Arch::classifier);
}

Tensor backbone_features(const Tensor& images, const ModelParams& params) {
  Graph g;
  Network net(g, params, false);
  return g.value(net.backbone(g.constant(images)));
}

Tensor head_forward(const Tensor& features, const ModelParams& params, const StochasticSite& site,
                    CounterRng& rng) {
  Graph g;
  Network net(g, params, false);
  return g.value(net.head(net.stochastic(g.constant(features), site, rng)));
}

double sigma_from_raw(double raw) noexcept { return softplus(raw) + 1e-4; }

GaussianNllGrad gaussian_nll_with_grad(const GaussianBox& pred, const std::array<double, 4>& target) {
  static const double kHalfLog2Pi = 0.5 * std::log(2.0 * 3.14159265358979323846);
  GaussianNllGrad out;
  for (int k = 0; k < 4; ++k) {
    const double s = pred.sigma[k];
    const double r = target[k] - pred.mu[k];
    const double s2 = s * s;
    out.value += kHalfLog2Pi + std::log(s) + r * r / (2.0 * s2);
    out.d_mu[k] = -r / s2;
    out.d_sigma[k] = 1.0 / s - r * r / (s2 * s);
  }
  return out;
}

double gaussian_nll(const GaussianBox& pred, const std::array<double, 4>& target) {
  for (double s : pred.sigma)
    if (!(s > 0.0)) throw ContractError("gaussian_nll requires positive sigma");
  return gaussian_nll_with_grad(pred, target).value;
}

Assignment assign_target(const Box& box, const ModelHyper& hyper) {
  const int G = hyper.grid();
  Assignment a;
  a.col = std::clamp(static_cast<int>(std::floor(box.x * G)), 0, G - 1);
  a.row = std::clamp(static_cast<int>(std::floor(box.y * G)), 0, G - 1);
  double best = -1.0;
  for (int k = 0; k < hyper.num_anchors(); ++k) {
    const Anchor& an = hyper.anchors[k];
    const double v = iou(box, Box{box.x, box.y, an.w, an.h});
    if (v > best) {
      best = v;
      a.anchor = k;
    }
  }
  const Anchor& an = hyper.anchors[a.anchor];
  a.target = {box.x * G - a.col, box.y * G - a.row, std::log(box.w / an.w), std::log(box.h / an.h)};
  return a;
}

int Detection::best_class() const {
  return static_cast<int>(std::max_element(class_probs.begin(), class_probs.end()) -
                          class_probs.begin());
}

double Detection::confidence() const {
  return class_probs.empty() ? objectness
                             : objectness * *std::max_element(class_probs.begin(), class_probs.end());
}

std::vector<Detection> decode(const Tensor& raw, const ModelHyper& hyper, double conf_thresh) {
  const int G = hyper.grid(), A = hyper.num_anchors(), P = hyper.per_anchor(),
            C = hyper.num_classes;
  if (raw.shape() != Shape{1, A * P, G, G})
    throw DimensionError("decode expects raw grid [1," + std::to_string(A * P) + "," +
                         std::to_string(G) + "," + std::to_string(G) + "], got " +
                         shape_str(raw.shape()));
  std::vector<Detection> out;
  std::vector<double> logits(static_cast<std::size_t>(C));
  for (int a = 0; a < A; ++a)
    for (int r = 0; r < G; ++r)
      for (int c = 0; c < G; ++c) {
        auto v = [&](int k) { return static_cast<double>(raw.at(0, a * P + k, r, c)); };
        Detection d;
        d.box = {(c + sigmoid(v(0))) / G, (r + sigmoid(v(1))) / G,
                 hyper.anchors[a].w * std::exp(v(2)), hyper.anchors[a].h * std::exp(v(3))};
        for (int k = 0; k < 4; ++k) d.sigma[k] = sigma_from_raw(v(4 + k));
        d.objectness = sigmoid(v(8));
        for (int k = 0; k < C; ++k) logits[k] = v(9 + k);
        const double mx = *std::max_element(logits.begin(), logits.end());
        double total = 0.0;
        d.class_probs.resize(static_cast<std::size_t>(C));
        for (int k = 0; k < C; ++k) total += (d.class_probs[k] = std::exp(logits[k] - mx));
        for (double& p : d.class_probs) p /= total;
        if (d.confidence() >= conf_thresh) out.push_back(std::move(d));
      }
  return out;
}

std::array<double, 4> encode_raw(const Box& box, const ModelHyper& hyper, Assignment* where) {
  const Assignment a = assign_target(box, hyper);
  if (where) *where = a;
  auto logit = [](double p) { return std::log(p / (1.0 - p)); };
  return {logit(a.target[0]), logit(a.target[1]), a.target[2], a.target[3]};
}

DetectionLoss detection_loss(const Tensor& raw, std::span<const GroundTruth> targets,
                             const ModelHyper& hyper, const LossConfig& cfg) {
  const int G = hyper.grid(), A = hyper.num_anchors(), P = hyper.per_anchor(),
            C = hyper.num_classes;
  const int N = raw.rank() == 4 ? raw.dim(0) : 0;
  if (raw.shape() != Shape{N, A * P, G, G} || static_cast<std::size_t>(N) != targets.size())
    throw DimensionError("detection_loss: raw grid " + shape_str(raw.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  DetectionLoss out;
  out.d_raw = Tensor(raw.shape());
  const double inv_n = 1.0 / N;
  auto idx = [&](int n, int ch, int r, int c) {
    return ((static_cast<std::size_t>(n) * A * P + ch) * G + r) * G + c;
  };

  for (int n = 0; n < N; ++n) {
    // (anchor, row, col) -> ground-truth index; the first box claiming a slot keeps it.
    std::vector<int> owner(static_cast<std::size_t>(A) * G * G, -1);
    std::vector<Assignment> assigned(targets[n].size());
    for (std::size_t g = 0; g < targets[n].size(); ++g) {
      const GroundTruthBox& gt = targets[n][g];
      if (gt.class_id < 0 || gt.class_id >= C) throw ContractError("ground-truth class out of range");
      assigned[g] = assign_target(gt.box, hyper);
      int& slot = owner[(static_cast<std::size_t>(assigned[g].anchor) * G + assigned[g].row) * G +
                        assigned[g].col];
      if (slot < 0) slot = static_cast<int>(g);
    }

    for (int a = 0; a < A; ++a)
      for (int r = 0; r < G; ++r)
        for (int c = 0; c < G; ++c) {
          const int g = owner[(static_cast<std::size_t>(a) * G + r) * G + c];
          const double o = raw[idx(n, a * P + 8, r, c)];
          const double y = g >= 0 ? 1.0 : 0.0;
          out.terms.obj += cfg.lambda_obj * inv_n * (softplus(o) - y * o);
          out.d_raw[idx(n, a * P + 8, r, c)] +=
              static_cast<float>(cfg.lambda_obj * inv_n * (sigmoid(o) - y));
          if (g < 0) continue;

          const GroundTruthBox& gt = targets[n][g];
          const Assignment& as = assigned[g];
          double t[4];
          for (int k = 0; k < 4; ++k) t[k] = raw[idx(n, a * P + k, r, c)];
          const double sx = sigmoid(t[0]), sy = sigmoid(t[1]);
          const std::array<double, 4> mu{sx, sy, t[2], t[3]};
          const std::array<double, 4> dmu_draw{sx * (1.0 - sx), sy * (1.0 - sy), 1.0, 1.0};
          std::array<double, 4> d_mu{};
          const double wbox = cfg.lambda_box * inv_n;

          if (cfg.use_gaussian) {
            GaussianBox pred;
            pred.mu = mu;
            std::array<double, 4> sraw{};
            for (int k = 0; k < 4; ++k) {
              sraw[k] = raw[idx(n, a * P + 4 + k, r, c)];
              pred.sigma[k] = sigma_from_raw(sraw[k]);
            }
            const GaussianNllGrad nll = gaussian_nll_with_grad(pred, as.target);
            out.terms.box += wbox * nll.value;
            for (int k = 0; k < 4; ++k) {
              d_mu[k] += nll.d_mu[k];
              out.d_raw[idx(n, a * P + 4 + k, r, c)] +=
                  static_cast<float>(wbox * nll.d_sigma[k] * sigmoid(sraw[k]));
            }
          } else {
            for (int k = 0; k < 4; ++k) {
              const double e = mu[k] - as.target[k];
              out.terms.box += wbox * e * e;
              d_mu[k] += 2.0 * e;
            }
          }

          if (cfg.use_giou) {
            const Anchor& an = hyper.anchors[a];
            const Box pred{(c + sx) / G, (r + sy) / G, an.w * std::exp(t[2]), an.h * std::exp(t[3])};
            if (!(pred.w > 0.0 && pred.h > 0.0 && std::isfinite(pred.w * pred.h * pred.x * pred.y))) {
              // Diverged prediction: surface it as a non-finite loss term.
              out.terms.box = std::numeric_limits<double>::quiet_NaN();
              continue;
            }
            const GiouWithGrad gg = giou_with_grad(pred, gt.box);
            out.terms.box += wbox * (1.0 - gg.value);
            // d box / d mu: x = (c + mu_x)/G, w = anchor_w * exp(mu_w).
            d_mu[0] -= gg.d_a[0] / G;
            d_mu[1] -= gg.d_a[1] / G;
            d_mu[2] -= gg.d_a[2] * pred.w;
            d_mu[3] -= gg.d_a[3] * pred.h;
          }
          for (int k = 0; k < 4; ++k)
            out.d_raw[idx(n, a * P + k, r, c)] += static_cast<float>(wbox * d_mu[k] * dmu_draw[k]);

          double mx = -std::numeric_limits<double>::infinity();
          for (int k = 0; k < C; ++k) mx = std::max(mx, static_cast<double>(raw[idx(n, a * P + 9 + k, r, c)]));
          double se = 0.0;
          for (int k = 0; k < C; ++k) se += std::exp(raw[idx(n, a * P + 9 + k, r, c)] - mx);
          const double lse = mx + std::log(se);
          out.terms.cls += cfg.lambda_cls * inv_n * (lse - raw[idx(n, a * P + 9 + gt.class_id, r, c)]);
          for (int k = 0; k < C; ++k) {
            const double p = std::exp(raw[idx(n, a * P + 9 + k, r, c)] - lse);
            out.d_raw[idx(n, a * P + 9 + k, r, c)] +=
                static_cast<float>(cfg.lambda_cls * inv_n * (p - (k == gt.class_id ? 1.0 : 0.0)));
          }
        }
  }
  out.value = out.terms.box + out.terms.obj + out.terms.cls;
  out.terms.total = out.value;
  return out;
}

namespace {

Var add_weight_decay(Graph& graph, Var loss, std::span<const Var> decayed, double lambda_wd,
                     LossBreakdown* breakdown) {
  if (lambda_wd == 0.0 || decayed.empty()) return loss;
  Var acc{};
  for (Var w : decayed) {
    Var sq = graph.sum(graph.mul(w, w));
    acc = acc.valid() ? graph.add(acc, sq) : sq;
  }
  Var wd = graph.scale(acc, static_cast<float>(lambda_wd));
  if (breakdown) breakdown->wd = graph.value(wd)[0];
  return graph.add(loss, wd);
}

}  // namespace

Var total_loss(Graph& graph, Var raw, std::span<const GroundTruth> targets,
               std::span<const Var> decayed, const ModelHyper& hyper, const LossConfig& cfg,
               LossBreakdown* breakdown) {
  DetectionLoss det = detection_loss(graph.value(raw), targets, hyper, cfg);
  if (breakdown) *breakdown = det.terms;
  const Var inputs[] = {raw};
  Var det_var = graph.custom(inputs, Tensor::scalar(static_cast<float>(det.value)),
                             [d_raw = std::move(det.d_raw)](const Tensor& d_out,
                                                            std::span<Tensor* const> slots) {
                               if (!slots[0]) return;
                               Tensor& d = *slots[0];
                               for (std::size_t i = 0; i < d.size(); ++i) d[i] += d_out[0] * d_raw[i];
                             });
  Var total = add_weight_decay(graph, det_var, decayed, cfg.lambda_wd, breakdown);
  if (breakdown) breakdown->total = graph.value(total)[0];
  return total;
}

Var classifier_loss(Graph& graph, Var logits, std::span<const int> labels,
                    std::span<const Var> decayed, const LossConfig& cfg, LossBreakdown* breakdown) {
  Var ce = graph.scale(graph.softmax_cross_entropy(logits, labels), static_cast<float>(cfg.lambda_cls));
  if (breakdown) {
    *breakdown = {};
    breakdown->cls = graph.value(ce)[0];
  }
  Var total = add_weight_decay(graph, ce, decayed, cfg.lambda_wd, breakdown);
  if (breakdown) breakdown->total = graph.value(total)[0];
  return total;
}

}  // namespace mcblock
