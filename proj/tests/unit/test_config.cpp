#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mcblock/config.hpp"
#include "mcblock/error.hpp"

using namespace mcblock;
namespace fs = std::filesystem;

namespace {

std::string config_error(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "no error";
}

}  // namespace

TEST(Config, ResolvedRoundTrip) {
  ExperimentConfig c;
  c.set("seed", "18446744073709551615");
  c.set("dropblock.p", "0.1");
  c.set("optim.lr", "0.0030000000000000001");
  c.set("mc.method", "dropout");
  c.set("loss.use_giou", "0");
  c.set("eval.sweep", "dropblock,none");
  c.set("data.root", "some dir/with spaces");

  ExperimentConfig back;
  for (const auto& [k, v] : c.resolved()) back.set(k, v);
  EXPECT_EQ(back.resolved(), c.resolved());
  EXPECT_EQ(back.seed, 18446744073709551615ull);
  EXPECT_EQ(back.lr, 0.003);
  EXPECT_FALSE(back.loss.use_giou);
  EXPECT_EQ(back.sweep, (std::vector<Method>{Method::dropblock, Method::none}));
  EXPECT_EQ(back.data_root, "some dir/with spaces");

  std::vector<std::string> keys;
  for (const auto& kv : c.resolved()) keys.push_back(kv.first);
  EXPECT_EQ(keys, ExperimentConfig::keys());
}

TEST(Config, FileThenOverrides) {
  const fs::path path = fs::temp_directory_path() / "mcblock_test_config.cfg";
  {
    std::ofstream f(path);
    f << "# experiment\n\ndropblock.p = 0.2   # trailing comment\ntrain.epochs=3\n";
  }
  ExperimentConfig c;
  c.apply_file(path);
  EXPECT_EQ(c.dropblock_p, 0.2);
  EXPECT_EQ(c.epochs, 3);
  c.apply_override("train.epochs=5");
  EXPECT_EQ(c.epochs, 5);

  ExperimentConfig again;
  {
    std::ofstream f(path);
    f << c.resolved_text();
  }
  again.apply_file(path);
  EXPECT_EQ(again.resolved(), c.resolved());

  {
    std::ofstream f(path);
    f << "seed = 1\ndropblok.p = 0.2\n";
  }
  const std::string msg = config_error([&] { ExperimentConfig().apply_file(path); });
  EXPECT_NE(msg.find(":2:"), std::string::npos) << msg;
  EXPECT_NE(msg.find("dropblok.p"), std::string::npos) << msg;
  fs::remove(path);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  ExperimentConfig c;
  EXPECT_NE(config_error([&] { c.set("mc.smaples", "3"); }).find("unknown config key"), std::string::npos);
  EXPECT_THROW(c.set("train.epochs", "3.5"), ConfigError);
  EXPECT_THROW(c.set("dropblock.p", "abc"), ConfigError);
  EXPECT_THROW(c.set("loss.use_gaussian", "yes"), ConfigError);
  EXPECT_THROW(c.set("mc.method", "ensemble"), ConfigError);
  EXPECT_THROW(c.apply_override("train.epochs"), ConfigError);
  EXPECT_THROW(c.apply_file("/nonexistent/cfg"), ConfigError);
}

TEST(Config, Validation) {
  ExperimentConfig c;
  EXPECT_NO_THROW(c.validate());
  auto invalid = [](auto mutate) {
    ExperimentConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  invalid([](ExperimentConfig& c) { c.dropblock_p = 1.0; });
  invalid([](ExperimentConfig& c) { c.dropblock_block_size = 9; });
  invalid([](ExperimentConfig& c) { c.dropblock_block_size = 2; });
  invalid([](ExperimentConfig& c) { c.batch_size = 0; });
  invalid([](ExperimentConfig& c) { c.momentum = 1.0; });
  invalid([](ExperimentConfig& c) { c.mc_samples = 0; });
  invalid([](ExperimentConfig& c) { c.image_size = 60; });
  invalid([](ExperimentConfig& c) { c.iou_thresh = 0.0; });
}

TEST(Config, DerivedSettings) {
  ExperimentConfig c;
  c.dropblock_p = 0.15;
  c.dropout_p = 0.25;
  EXPECT_EQ(c.mc_config(Method::dropblock).drop_prob, 0.15);
  EXPECT_EQ(c.mc_config(Method::dropout).drop_prob, 0.25);
  EXPECT_EQ(c.mc_config(Method::none, 3).threads, 3);
  EXPECT_EQ(c.train_site().mode, DropMode::training);
  EXPECT_EQ(c.weights_path(), fs::path("run") / "weights.mcbk");
  c.weights = "elsewhere.mcbk";
  EXPECT_EQ(c.weights_path(), fs::path("elsewhere.mcbk"));
  EXPECT_EQ(c.model_hyper().grid(), 8);
}
