#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "mcblock/error.hpp"
#include "mcblock/experiment.hpp"
#include "mcblock/persistence.hpp"

using namespace mcblock;
namespace fs = std::filesystem;

namespace {

std::vector<LabeledImage> scenes(Split split, int n, std::uint64_t seed) {
  std::vector<LabeledImage> out;
  for (int i = 0; i < n; ++i) {
    const Scene s = render_scene(split, static_cast<std::uint64_t>(i), seed);
    LabeledImage img{std::to_string(i), scene_tensor(s), {}};
    for (const auto& o : s.objects) img.objects.push_back({o.shape, o.box});
    out.push_back(std::move(img));
  }
  return out;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mcblock_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

bool bit_equal(const ModelParams& a, const ModelParams& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    const Tensor& x = a.tensors[i].tensor;
    const Tensor& y = b.tensors[i].tensor;
    if (x.shape() != y.shape() || std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0)
      return false;
  }
  return true;
}

std::vector<std::string> log_lines(const TrainOutcome& t) {
  std::vector<std::string> out;
  for (const auto& e : t.log) out.push_back(epoch_log_line(e));
  return out;
}

// Shared by the tests that need a model with real detections.
struct Trained {
  ExperimentConfig cfg;
  TrainOutcome outcome;
};

const Trained& trained() {
  static const Trained t = [] {
    Trained r;
    r.cfg.seed = 3;
    r.cfg.epochs = 30;
    r.outcome = train(r.cfg, scenes(Split::train, 200, 3), {});
    return r;
  }();
  return t;
}

std::string without_config(MetricsReport r) {
  r.config.clear();
  return report_to_json(r);
}

}  // namespace

TEST(Train, ZeroLearningRateLeavesWeightsUntouched) {
  ExperimentConfig cfg;
  cfg.epochs = 1;
  cfg.lr = 0.0;
  const auto out = train(cfg, scenes(Split::train, 32, 1), {});
  CounterRng init = CounterRng(cfg.seed).split(stream::init);
  EXPECT_TRUE(bit_equal(out.last, ModelParams::init(cfg.model_hyper(), init)));
  ASSERT_EQ(out.log.size(), 2u);
  EXPECT_EQ(out.log[0].epoch, 0);
}

TEST(Train, SameSeedSameLog) {
  ExperimentConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 9;
  const auto data = scenes(Split::train, 32, 2);
  const auto val = scenes(Split::val, 8, 2);
  const auto a = train(cfg, data, val);
  const auto b = train(cfg, data, val);
  EXPECT_EQ(log_lines(a), log_lines(b));
  EXPECT_TRUE(bit_equal(a.last, b.last));
  EXPECT_TRUE(bit_equal(a.best, b.best));
  ASSERT_TRUE(a.log.back().val_loss.has_value());

  cfg.seed = 10;
  EXPECT_NE(log_lines(train(cfg, data, val)), log_lines(a));
}

TEST(Train, LossHalvesOnSmallSet) {
  const auto& log = trained().outcome.log;
  ASSERT_EQ(log.size(), 31u);
  EXPECT_LT(log.back().train.total, 0.5 * log.front().train.total)
      << epoch_log_line(log.front()) << "\n" << epoch_log_line(log.back());
}

TEST(Train, NonFiniteLossAborts) {
  ExperimentConfig cfg;
  cfg.epochs = 2;
  cfg.lr = 1e30;
  cfg.warmup_steps = 0;
  cfg.clip_norm = 0.0;
  try {
    train(cfg, scenes(Split::train, 48, 4), {});
    FAIL() << "training diverged silently";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.code(), "non_finite");
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch"), std::string::npos) << msg;
    EXPECT_NE(msg.find("box="), std::string::npos) << msg;
  }
}

TEST(Train, CommandWritesRunDirectory) {
  const fs::path root = scratch("cmd_train");
  ExperimentConfig cfg;
  cfg.data_root = (root / "data").string();
  cfg.run_dir = (root / "run").string();
  cfg.epochs = 1;
  generate(cfg.data_root, Split::train, 16, cfg.seed);
  const auto out = cmd_train(cfg);
  for (const char* f : {"config.resolved", "weights.mcbk", "weights.best.mcbk", "log.jsonl"})
    EXPECT_TRUE(fs::exists(root / "run" / f)) << f;
  EXPECT_TRUE(bit_equal(load_weights(root / "run/weights.mcbk"), out.last));

  ExperimentConfig echoed;
  echoed.apply_file(root / "run/config.resolved");
  EXPECT_EQ(echoed.resolved(), cfg.resolved());

  std::ifstream log(root / "run/log.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(log, line)) {
    EXPECT_EQ(nlohmann::json::parse(line)["epoch"], n);
    ++n;
  }
  EXPECT_EQ(n, 2);
  fs::remove_all(root);
}

TEST(Eval, NoneMatchesDropBlockAtZeroRate) {
  ExperimentConfig cfg = trained().cfg;
  const auto images = scenes(Split::test_id, 20, 5);
  cfg.mc_method = Method::none;
  const MetricsReport a = evaluate(cfg, trained().outcome.last, images);
  cfg.mc_method = Method::dropblock;
  cfg.dropblock_p = 0.0;
  const MetricsReport b = evaluate(cfg, trained().outcome.last, images);
  EXPECT_GT(a.extra.at("detections"), 0.0);
  EXPECT_EQ(without_config(a), without_config(b));
}

TEST(Eval, RepeatsExactly) {
  ExperimentConfig cfg = trained().cfg;
  cfg.mc_samples = 10;
  const auto images = scenes(Split::test_id, 12, 6);
  const std::string a = report_to_json(evaluate(cfg, trained().outcome.last, images));
  EXPECT_EQ(a, report_to_json(evaluate(cfg, trained().outcome.last, images)));
}

TEST(Eval, TrainedModelFindsObjects) {
  const MetricsReport r = evaluate(trained().cfg, trained().outcome.last, scenes(Split::test_id, 30, 7));
  EXPECT_GT(r.map_50, 0.3);
  EXPECT_EQ(r.n_images, 30);
  EXPECT_EQ(r.per_class_ap.size(), 3u);
}

TEST(OodEval, OneEntryPerSweptMethod) {
  ExperimentConfig cfg = trained().cfg;
  cfg.mc_samples = 5;
  cfg.sweep = {Method::dropblock, Method::none};
  const auto entries =
      ood_entries(cfg, trained().outcome.last, scenes(Split::test_id, 6, 8), scenes(Split::test_ood, 6, 8));
  ASSERT_EQ(entries.size(), 2u);
  EXPECT_EQ(entries[0].method, Method::dropblock);
  EXPECT_EQ(entries[1].method, Method::none);
  const auto j = nlohmann::json::parse(ood_to_json(entries, cfg, "T"));
  ASSERT_EQ(j["methods"].size(), 2u);
  EXPECT_EQ(j["methods"][1]["method"], "none");
  EXPECT_EQ(j["timestamp"], "T");
}

TEST(OodEval, UntrainedModelDoesNotSeparate) {
  ExperimentConfig cfg;
  cfg.mc_samples = 10;
  cfg.sweep = {Method::none, Method::dropblock};
  CounterRng rng(21);
  ModelParams p = ModelParams::init(cfg.model_hyper(), rng);
  // Lift objectness to 0.5 so every anchor yields a detection.
  p.get("head.bias").fill(0.0f);
  const auto entries = ood_entries(cfg, p, scenes(Split::test_id, 20, 9), scenes(Split::test_ood, 20, 9));
  for (const auto& e : entries) {
    EXPECT_GT(e.detections_id, 0);
    EXPECT_NEAR(e.ratio, 1.0, 0.05) << to_string(e.method);
  }
}

TEST(Report, EchoesAndOrdersByPath) {
  const fs::path dir = scratch("report");
  MetricsReport r;
  r.map_50 = 0.812345;
  r.brier = 0.25;
  r.mean_entropy = 0.5;
  r.per_class_ap = {{0, 0.9}, {1, 0.8}, {2, 0.7}};
  r.n_images = 300;
  r.config = {{"model.arch", "detector"}, {"mc.method", "dropblock"}, {"eval.split", "test-id"}};
  {
    std::ofstream(dir / "b.json") << report_to_json(r);
  }
  const ReportTable one = cmd_report({dir / "b.json"});
  for (const char* s : {"0.812345", "0.25", "0.5", "300", "dropblock", "test-id"})
    EXPECT_NE(one.text.find(s), std::string::npos) << s << "\n" << one.text;
  const auto j1 = nlohmann::json::parse(one.json);
  ASSERT_EQ(j1["rows"].size(), 1u);
  EXPECT_EQ(j1["rows"][0]["map_50"], 0.812345);
  EXPECT_EQ(j1["rows"][0]["per_class_ap"]["2"], 0.7);

  r.config[1].second = "none";
  {
    std::ofstream(dir / "a.json") << report_to_json(r);
  }
  const ReportTable two = cmd_report({dir / "b.json", dir / "a.json"});
  const auto j2 = nlohmann::json::parse(two.json);
  ASSERT_EQ(j2["rows"].size(), 2u);
  EXPECT_EQ(j2["rows"][0]["method"], "none");
  EXPECT_EQ(j2["rows"][1]["method"], "dropblock");
  EXPECT_LT(two.text.find("a.json"), two.text.find("b.json"));
  EXPECT_EQ(two.text, cmd_report({dir / "a.json", dir / "b.json"}).text);
  fs::remove_all(dir);
}

TEST(Report, MalformedFileNamesFileAndKey) {
  const fs::path dir = scratch("report_bad");
  auto j = nlohmann::json::parse(report_to_json(MetricsReport{}));
  j["brier"] = "high";
  {
    std::ofstream(dir / "bad.json") << j.dump();
  }
  try {
    cmd_report({dir / "bad.json"});
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("bad.json"), std::string::npos) << msg;
    EXPECT_NE(msg.find("brier"), std::string::npos) << msg;
  }
  EXPECT_THROW(cmd_report({}), ContractError);
  fs::remove_all(dir);
}

#ifdef MCBLOCK_CLI_PATH
namespace {

struct CliResult {
  int status;
  std::string stderr_text;
};

CliResult run_cli(const std::string& args) {
  const fs::path err = fs::temp_directory_path() / "mcblock_test_cli.err";
  const std::string cmd = std::string(MCBLOCK_CLI_PATH) + " " + args + " >/dev/null 2>" + err.string();
  const int raw = std::system(cmd.c_str());
  CliResult r{WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(err)};
  fs::remove(err);
  return r;
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

}  // namespace

TEST(Cli, ErrorsAreMachineReadable) {
  const fs::path dir = scratch("cli");
  const std::string run = " --run-dir " + (dir / "run").string() + " --data " + (dir / "data").string();
  const std::vector<std::pair<std::string, std::string>> cases{
      {"train --set dropblok.p=0.2" + run, "config_error"},
      {"train --set dropblock.p=1.5" + run, "config_error"},
      {"eval" + run, "load_error"},
      {"train" + run, "io_error"},
      {"report " + (dir / "missing.json").string(), "io_error"},
      {"frobnicate", "usage_error"},
  };
  for (const auto& [args, code] : cases) {
    const CliResult r = run_cli(args);
    EXPECT_EQ(r.status, 2) << args;
    EXPECT_EQ(first_line(r.stderr_text), "MCBLOCK_ERROR " + code) << args << "\n" << r.stderr_text;
  }
  fs::remove_all(dir);
}
#endif
