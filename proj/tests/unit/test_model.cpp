#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "checks.hpp"
#include "mcblock/error.hpp"
#include "mcblock/kernels.hpp"
#include "mcblock/model.hpp"

using namespace mcblock;
using checks::random_tensor;

namespace {

ModelHyper small_detector() {
  ModelHyper h;
  h.image_size = 16;  // G = 2
  h.block_size = 1;
  return h;
}

ModelParams random_params(const ModelHyper& h, std::uint64_t seed) {
  CounterRng rng(seed);
  ModelParams p = ModelParams::init(h, rng);
  // Larger head weights than init so the outputs actually depend on the mask.
  for (auto& t : p.tensors)
    if (t.name == "head.weight" || t.name == "fc.weight")
      for (float& v : t.tensor.values()) v = static_cast<float>(rng.uniform(-0.3, 0.3));
  return p;
}

StochasticSite site(Method m, double p) {
  StochasticSite s;
  s.method = m;
  s.mode = DropMode::inference;
  s.drop_prob = p;
  return s;
}

}  // namespace

TEST(Params, LayoutAndInit) {
  ModelHyper h;
  CounterRng rng(1);
  const ModelParams p = ModelParams::init(h, rng);
  std::set<std::string> names;
  for (const auto& t : p.tensors) EXPECT_TRUE(names.insert(t.name).second) << t.name;
  EXPECT_EQ(p.get("conv1.weight").shape(), (Shape{16, 3, 3, 3}));
  EXPECT_EQ(p.get("head.weight").shape(), (Shape{h.head_channels(), 64, 1, 1}));
  EXPECT_EQ(h.head_channels(), 2 * 12);
  EXPECT_EQ(h.grid(), 8);
  for (int a = 0; a < h.num_anchors(); ++a) EXPECT_EQ(p.get("head.bias")[a * h.per_anchor() + 8], -4.0f);
  EXPECT_THROW(p.get("nope"), ContractError);
  EXPECT_TRUE(is_decayed("conv2.weight"));
  EXPECT_FALSE(is_decayed("conv2.bias"));

  ModelHyper c = h;
  c.arch = Arch::classifier;
  EXPECT_EQ(ModelParams::zeros(c).get("fc.weight").shape(), (Shape{64 * 64, 3}));
  ModelHyper bad = h;
  bad.image_size = 20;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(DetectorForward, DisabledIsDeterministic) {
  const ModelHyper h = small_detector();
  const ModelParams p = random_params(h, 2);
  CounterRng rng(3);
  const Tensor x = random_tensor({1, 3, 16, 16}, rng, -0.5, 0.5);
  CounterRng r1(4), r2(5);
  const Tensor a = detector_forward(x, p, StochasticSite::disabled(), r1);
  const Tensor b = detector_forward(x, p, StochasticSite::disabled(), r2);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.shape(), (Shape{1, 24, 2, 2}));
}

TEST(DetectorForward, InferenceModeIsStochastic) {
  ModelHyper h;
  const ModelParams p = random_params(h, 6);
  CounterRng rng(7);
  const Tensor x = random_tensor({1, 3, 64, 64}, rng, -0.5, 0.5);
  CounterRng r1(8), r2(9);
  const Tensor a = detector_forward(x, p, site(Method::dropblock, 0.3), r1);
  const Tensor b = detector_forward(x, p, site(Method::dropblock, 0.3), r2);
  EXPECT_NE(a, b);
  CounterRng r3(8);
  EXPECT_EQ(detector_forward(x, p, site(Method::dropblock, 0.3), r3), a);
}

TEST(DetectorForward, ZeroModelHasHalfObjectness) {
  const ModelHyper h = small_detector();
  const ModelParams p = ModelParams::zeros(h);
  CounterRng rng(1);
  const Tensor raw = detector_forward(Tensor({1, 3, 16, 16}), p, StochasticSite::disabled(), rng);
  const auto dets = decode(raw, h, 0.0);
  ASSERT_EQ(dets.size(), 2u * 2 * 2);
  for (const auto& d : dets) EXPECT_EQ(d.objectness, 0.5);
}

TEST(DetectorForward, ShapeErrors) {
  const ModelHyper h = small_detector();
  const ModelParams p = ModelParams::zeros(h);
  CounterRng rng(1);
  EXPECT_THROW(detector_forward(Tensor({1, 3, 8, 8}), p, StochasticSite::disabled(), rng), DimensionError);
  EXPECT_THROW(classifier_forward(Tensor({1, 3, 16, 16}), p, StochasticSite::disabled(), rng), ContractError);
}

TEST(ClassifierForward, ZeroWeightsAreUniform) {
  ModelHyper h = small_detector();
  h.arch = Arch::classifier;
  CounterRng rng(1);
  const Tensor logits =
      classifier_forward(Tensor({1, 3, 16, 16}, 0.3f), ModelParams::zeros(h), StochasticSite::disabled(), rng);
  const Tensor p = kernels::softmax_lastdim(logits);
  for (float v : p.values()) EXPECT_FLOAT_EQ(v, 1.0f / 3.0f);
}

TEST(ClassifierForward, SmallDropRateMeanMatchesDeterministic) {
  ModelHyper h;
  h.arch = Arch::classifier;
  h.image_size = 32;
  const ModelParams p = random_params(h, 10);
  CounterRng rng(11);
  const Tensor x = random_tensor({1, 3, 32, 32}, rng, -0.5, 0.5);
  const Tensor det = kernels::softmax_lastdim(classifier_forward(x, p, StochasticSite::disabled(), rng));
  std::vector<double> mean(3, 0.0);
  const CounterRng root(12);
  for (int s = 0; s < 1000; ++s) {
    CounterRng r = root.split(s);
    const Tensor q = kernels::softmax_lastdim(classifier_forward(x, p, site(Method::dropblock, 1e-4), r));
    for (int c = 0; c < 3; ++c) mean[c] += q[c] / 1000.0;
  }
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(mean[c], det[c], 1e-3);
}

TEST(GaussianNll, Examples) {
  GaussianBox unit;
  const std::array<double, 4> t{0.3, -0.2, 0.1, 0.7};
  unit.mu = t;
  EXPECT_NEAR(gaussian_nll(unit, t), 2.0 * std::log(2.0 * std::numbers::pi), 1e-12);
  EXPECT_NEAR(gaussian_nll(unit, t), 3.6758, 1e-4);
  GaussianBox tight = unit;
  tight.sigma.fill(1.0 / std::sqrt(2.0 * std::numbers::pi));
  EXPECT_NEAR(gaussian_nll(tight, t), 0.0, 1e-12);
  GaussianBox bad = unit;
  bad.sigma[2] = 0.0;
  EXPECT_THROW(gaussian_nll(bad, t), ContractError);
}

TEST(GaussianNll, GradientsMatchFiniteDifferences) {
  CounterRng rng(5);
  for (int i = 0; i < 10; ++i) {
    GaussianBox p;
    std::array<double, 4> t{};
    for (int k = 0; k < 4; ++k) {
      p.mu[k] = rng.uniform(-1, 1);
      p.sigma[k] = rng.uniform(0.2, 2);
      t[k] = rng.uniform(-1, 1);
    }
    const auto g = gaussian_nll_with_grad(p, t);
    for (int k = 0; k < 4; ++k) {
      GaussianBox a = p, b = p;
      a.mu[k] += 1e-3;
      b.mu[k] -= 1e-3;
      const double dmu = (gaussian_nll(a, t) - gaussian_nll(b, t)) / 2e-3;
      EXPECT_LT(std::abs(dmu - g.d_mu[k]), 1e-3 * std::max(1.0, std::abs(dmu)));
      a = p, b = p;
      a.sigma[k] += 1e-3;
      b.sigma[k] -= 1e-3;
      const double ds = (gaussian_nll(a, t) - gaussian_nll(b, t)) / 2e-3;
      EXPECT_LT(std::abs(ds - g.d_sigma[k]), 1e-3 * std::max(1.0, std::abs(ds)));
    }
  }
}

TEST(Sigma, PositiveForAllFiniteRaw) {
  for (double r : {-1e300, -1e4, -50.0, 0.0, 50.0, 1e4}) {
    const double s = sigma_from_raw(r);
    EXPECT_GT(s, 0.0) << r;
    EXPECT_TRUE(std::isfinite(s)) << r;
  }
  EXPECT_NEAR(sigma_from_raw(0.0), std::log(2.0) + 1e-4, 1e-15);
}

TEST(Decode, ZeroRawAtFirstCell) {
  ModelHyper h = small_detector();
  h.anchors = {{0.25f, 0.25f}};
  const auto dets = decode(Tensor({1, h.head_channels(), 2, 2}), h, 0.0);
  ASSERT_EQ(dets.size(), 4u);
  EXPECT_DOUBLE_EQ(dets[0].box.x, 0.25);
  EXPECT_DOUBLE_EQ(dets[0].box.y, 0.25);
  EXPECT_DOUBLE_EQ(dets[0].box.w, 0.25);
  EXPECT_DOUBLE_EQ(dets[0].box.h, 0.25);
  EXPECT_DOUBLE_EQ(dets[1].box.x, 0.75);  // grid order: anchor, row, col
  EXPECT_TRUE(decode(Tensor({1, h.head_channels(), 2, 2}), h, 0.5).empty());
  EXPECT_THROW(decode(Tensor({1, 5, 2, 2}), h, 0.0), DimensionError);
}

TEST(Decode, ZeroThresholdKeepsEveryPrediction) {
  ModelHyper h;
  CounterRng rng(3);
  const Tensor raw = random_tensor({1, h.head_channels(), 8, 8}, rng, -3, 3);
  EXPECT_EQ(decode(raw, h, 0.0).size(), static_cast<std::size_t>(h.num_anchors() * 64));
}

TEST(Decode, RoundTripsEncode) {
  ModelHyper h;
  CounterRng rng(4);
  for (int t = 0; t < 200; ++t) {
    const double w = rng.uniform(0.1, 0.6), hh = rng.uniform(0.1, 0.6);
    const Box b{rng.uniform(w / 2, 1 - w / 2), rng.uniform(hh / 2, 1 - hh / 2), w, hh};
    Assignment where;
    const auto raw4 = encode_raw(b, h, &where);
    Tensor raw({1, h.head_channels(), 8, 8});
    for (int k = 0; k < 4; ++k)
      raw.at(0, where.anchor * h.per_anchor() + k, where.row, where.col) = static_cast<float>(raw4[k]);
    const auto dets = decode(raw, h, 0.0);
    const Detection& d = dets[(where.anchor * 8 + where.row) * 8 + where.col];
    EXPECT_NEAR(d.box.x, b.x, 1e-5);
    EXPECT_NEAR(d.box.y, b.y, 1e-5);
    EXPECT_NEAR(d.box.w, b.w, 1e-5);
    EXPECT_NEAR(d.box.h, b.h, 1e-5);
  }
}

TEST(AssignTarget, CellAndAnchor) {
  ModelHyper h;
  const Assignment a = assign_target(Box{0.30, 0.90, 0.18, 0.22}, h);
  EXPECT_EQ(a.col, 2);
  EXPECT_EQ(a.row, 7);
  EXPECT_EQ(a.anchor, 0);
  EXPECT_NEAR(a.target[0], 0.4, 1e-12);
  EXPECT_NEAR(a.target[1], 0.2, 1e-12);
  EXPECT_EQ(assign_target(Box{0.5, 0.5, 0.45, 0.5}, h).anchor, 1);
}

TEST(TotalLoss, WeightDecayOnly) {
  const ModelHyper h = small_detector();
  ModelParams p = ModelParams::zeros(h);
  for (auto& t : p.tensors)
    if (is_decayed(t.name)) t.tensor.fill(1.0f);
  LossConfig cfg;
  cfg.lambda_box = cfg.lambda_obj = cfg.lambda_cls = 0.0;
  cfg.lambda_wd = 1e-3;
  Graph g;
  Network net(g, p, true);
  CounterRng rng(1);
  Var raw = net.forward(g.constant(Tensor({1, 3, 16, 16}, 0.0f)), StochasticSite::disabled(), rng);
  const std::vector<GroundTruth> targets{{{1, {0.5, 0.5, 0.3, 0.3}}}};
  LossBreakdown br;
  const Var loss = total_loss(g, raw, targets, net.decayed(), h, cfg, &br);
  EXPECT_NEAR(g.value(loss)[0], 1e-3 * static_cast<double>(p.weight_count()), 1e-3);
  EXPECT_NEAR(br.wd, 1e-3 * static_cast<double>(p.weight_count()), 1e-3);
  EXPECT_EQ(br.box, 0.0);
}

TEST(TotalLoss, PerfectPredictionHasZeroNll) {
  const ModelHyper h = small_detector();
  const Box b{0.3, 0.6, 0.25, 0.2};
  Assignment where;
  const auto raw4 = encode_raw(b, h, &where);
  Tensor raw({1, h.head_channels(), 2, 2});
  const double s = 1.0 / std::sqrt(2.0 * std::numbers::pi) - 1e-4;
  const double sraw = std::log(std::expm1(s));
  for (int k = 0; k < 4; ++k) {
    raw.at(0, where.anchor * h.per_anchor() + k, where.row, where.col) = static_cast<float>(raw4[k]);
    raw.at(0, where.anchor * h.per_anchor() + 4 + k, where.row, where.col) = static_cast<float>(sraw);
  }
  LossConfig cfg;
  cfg.lambda_wd = 0.0;
  cfg.use_giou = false;
  const std::vector<GroundTruth> targets{{{0, b}}};
  EXPECT_NEAR(detection_loss(raw, targets, h, cfg).terms.box, 0.0, 1e-5);
  cfg.use_giou = true;
  EXPECT_NEAR(detection_loss(raw, targets, h, cfg).terms.box, 0.0, 1e-5);
}

// Without the Gaussian head the box term is squared error on the
// (sigmoid offset, log size) parameters plus 1 - GIoU; sigma channels are ignored.
TEST(TotalLoss, SquaredErrorReduction) {
  const ModelHyper h = small_detector();
  const Box b{0.3, 0.6, 0.25, 0.2};
  Assignment where;
  encode_raw(b, h, &where);
  CounterRng rng(2);
  Tensor raw = random_tensor({1, h.head_channels(), 2, 2}, rng);
  LossConfig cfg;
  cfg.use_gaussian = false;
  const std::vector<GroundTruth> targets{{{2, b}}};
  const double base = detection_loss(raw, targets, h, cfg).terms.box;

  auto v = [&](int k) { return static_cast<double>(raw.at(0, where.anchor * h.per_anchor() + k, where.row, where.col)); };
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  const std::array<double, 4> mu{sig(v(0)), sig(v(1)), v(2), v(3)};
  double se = 0.0;
  for (int k = 0; k < 4; ++k) se += (mu[k] - where.target[k]) * (mu[k] - where.target[k]);
  const Anchor an = h.anchors[where.anchor];
  const Box pred{(where.col + mu[0]) / 2, (where.row + mu[1]) / 2, an.w * std::exp(mu[2]), an.h * std::exp(mu[3])};
  EXPECT_NEAR(base, se + 1.0 - giou(pred, b), 1e-6);

  for (int k = 4; k < 8; ++k) raw.at(0, where.anchor * h.per_anchor() + k, where.row, where.col) += 5.0f;
  EXPECT_EQ(detection_loss(raw, targets, h, cfg).terms.box, base);
}

TEST(TotalLoss, NoTargetsLeavesObjectnessOnly) {
  const ModelHyper h = small_detector();
  CounterRng rng(3);
  const Tensor raw = random_tensor({2, h.head_channels(), 2, 2}, rng);
  const std::vector<GroundTruth> targets(2);
  const auto l = detection_loss(raw, targets, h, LossConfig{});
  EXPECT_EQ(l.terms.box, 0.0);
  EXPECT_EQ(l.terms.cls, 0.0);
  EXPECT_GT(l.terms.obj, 0.0);
  EXPECT_TRUE(std::isfinite(l.value));
}
