// mcblock: experiment driver for Monte-Carlo DropBlock.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mcblock/config.hpp"
#include "mcblock/data_synth.hpp"
#include "mcblock/error.hpp"
#include "mcblock/experiment.hpp"
#include "mcblock/parallel.hpp"

namespace {

using namespace mcblock;

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string run_dir;
  std::string data_root;
  std::string weights;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_file, "config file (key = value lines)");
  cmd->add_option("-s,--set", c.overrides, "override, key=value (repeatable)");
  cmd->add_option("--run-dir", c.run_dir, "output directory (run.dir)");
  cmd->add_option("--data", c.data_root, "dataset root (data.root)");
}

// File first, then dedicated flags, then --set in order.
ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg;
  if (!c.config_file.empty()) cfg.apply_file(c.config_file);
  if (!c.run_dir.empty()) cfg.run_dir = c.run_dir;
  if (!c.data_root.empty()) cfg.data_root = c.data_root;
  if (!c.weights.empty()) cfg.weights = c.weights;
  for (const auto& o : c.overrides) cfg.apply_override(o);
  cfg.validate();
  return cfg;
}

int fail(const std::string& code, const std::string& message) {
  std::cerr << "MCBLOCK_ERROR " << code << "\n" << message << "\n";
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Monte-Carlo DropBlock toy detector"};
  app.require_subcommand(1);

  Common c;
  std::vector<std::string> splits;
  int count = 0;
  auto* gen = app.add_subcommand("gen-data", "write synthetic train/val/test-id/test-ood splits");
  add_common(gen, c);
  gen->add_option("--split", splits, "split(s) to write (default: all)");
  gen->add_option("-n,--count", count, "images per split (default depends on split)");

  auto* train = app.add_subcommand("train", "train a model");
  add_common(train, c);

  std::string split, method;
  auto* eval = app.add_subcommand("eval", "evaluate weights and write metrics.json");
  add_common(eval, c);
  eval->add_option("--weights", c.weights, "weights file (default <run-dir>/weights.mcbk)");
  eval->add_option("--split", split, "evaluation split (eval.split)");
  eval->add_option("--method", method, "none | dropout | dropblock (mc.method)");

  auto* ood = app.add_subcommand("ood-eval", "entropy on test-id vs test-ood per method");
  add_common(ood, c);
  ood->add_option("--weights", c.weights, "weights file (default <run-dir>/weights.mcbk)");

  std::vector<std::string> paths;
  std::string json_out;
  auto* report = app.add_subcommand("report", "compare metrics.json files");
  report->add_option("paths", paths, "metrics files")->required();
  report->add_option("--json", json_out, "also write the table as JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage_error", e.what());
  }

  try {
    if (gen->parsed()) {
      ExperimentConfig cfg = resolve(c);
      std::vector<Split> todo;
      if (splits.empty())
        todo = {Split::train, Split::val, Split::test_id, Split::test_ood};
      for (const auto& s : splits) todo.push_back(parse_split(s));
      SceneSpec spec;
      spec.image_size = cfg.image_size;
      for (Split s : todo) {
        const int n = count > 0 ? count : default_split_count(s);
        generate(cfg.data_root, s, n, cfg.seed, spec, default_threads());
        std::cout << split_name(s) << ": " << n << " images\n";
      }
    } else if (train->parsed()) {
      const ExperimentConfig cfg = resolve(c);
      cmd_train(cfg, &std::cout);
      std::cout << "wrote " << (std::filesystem::path(cfg.run_dir) / "weights.mcbk").string() << "\n";
    } else if (eval->parsed()) {
      if (!split.empty()) c.overrides.insert(c.overrides.begin(), "eval.split=" + split);
      if (!method.empty()) c.overrides.insert(c.overrides.begin(), "mc.method=" + method);
      const ExperimentConfig cfg = resolve(c);
      std::cout << report_to_json(cmd_eval(cfg)) << "\n";
    } else if (ood->parsed()) {
      const ExperimentConfig cfg = resolve(c);
      std::cout << ood_to_json(cmd_ood_eval(cfg), cfg, utc_timestamp()) << "\n";
    } else if (report->parsed()) {
      std::vector<std::filesystem::path> ps(paths.begin(), paths.end());
      const ReportTable t = cmd_report(ps);
      std::cout << t.text;
      if (!json_out.empty()) {
        std::ofstream f(json_out);
        f << t.json << "\n";
        if (!f) throw IoError("cannot write " + json_out);
      }
    }
  } catch (const Error& e) {
    return fail(e.code(), e.what());
  } catch (const std::exception& e) {
    return fail("internal_error", e.what());
  }
  return 0;
}
