// Runs the acceptance criteria end to end and prints one PASS/FAIL line each.
// Exit status is 0 when every criterion ran (whatever its verdict); --strict
// also turns any FAIL into status 1.
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "checks.hpp"
#include "mcblock/error.hpp"
#include "mcblock/experiment.hpp"
#include "mcblock/persistence.hpp"

namespace fs = std::filesystem;
using namespace mcblock;

namespace {

struct Verdict {
  int id;
  bool pass;
  std::string detail;
};

std::vector<Verdict> verdicts;
std::ofstream report_file;  // same lines as stdout, kept in the work dir

void emit(const std::string& line) {
  std::cout << line << std::endl;
  report_file << line << std::endl;
}

void report(int id, bool pass, const std::string& detail) {
  verdicts.push_back({id, pass, detail});
  emit(std::string(pass ? "PASS" : "FAIL") + " criterion " + std::to_string(id) + ": " + detail);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

// ---------------------------------------------------------------------------
// Pure property checks.

void gradients() {
  const double t0 = cpu_seconds();
  const auto cases = checks::gradient_suite(2024, 10, 1e-3);
  const double secs = cpu_seconds() - t0;
  double worst = 0.0;
  std::string worst_name;
  bool ok = !cases.empty() && secs < 60.0;
  for (const auto& c : cases) {
    ok = ok && c.instances >= 10 && c.worst < 1e-3;
    if (c.worst >= worst) worst = c.worst, worst_name = c.name;
  }
  report(1, ok,
         std::to_string(cases.size()) + " operations x 10 instances, worst rel err " + fmt("%.2e", worst) +
             " (" + worst_name + "), " + fmt("%.2f", secs) + " s CPU");
}

void equivalence() {
  const auto r = checks::equivalence_suite(77, 100);
  report(2, r.instances == 100 && r.worst_abs <= 1e-6,
         std::to_string(r.instances) + " instances, max |conv - dense| " + fmt("%.2e", r.worst_abs));
}

void drop_rates() {
  bool ok = true;
  std::ostringstream d;
  for (const auto& r : checks::drop_rate_grid(31, 10000)) {
    ok = ok && std::abs(r.empirical - r.p) < 0.02;
    d << "p=" << r.p << "/b" << r.block << ":" << fmt("%.4f", r.empirical) << " ";
  }
  report(3, ok, d.str() + "(10000 masks, 14x14)");
}

void unbiased() {
  DropBlockConfig cfg;
  const auto r = checks::unbiasedness(404, 10000, cfg, 14, 14, true);
  // Each cell is an independent 3-sigma test, so an exactly unbiased mask
  // still puts about 0.27% of cells outside the band by chance.
  report(4, r.cells == 196 && r.beyond_3se == 0,
         std::to_string(r.beyond_3se) + "/" + std::to_string(r.cells) + " cells beyond 3 standard errors (" +
             fmt("%.2f", 0.0027 * r.cells) + " expected by chance), worst " + fmt("%.2f", r.max_z) +
             " (p=0.1, block 3, 10000 masks)");
}

void metric_oracles() {
  using checks::make_detection;
  using Rows = std::vector<std::vector<double>>;
  int failed = 0, total = 0;
  auto check = [&](bool ok) { ++total, failed += !ok; };
  auto near = [&](double a, double b) { check(std::abs(a - b) <= 1e-9); };

  near(brier(Rows{{1, 0, 0}, {0, 0, 1}}, std::vector<int>{0, 2}), 0.0);
  near(brier(Rows{{0.5, 0.5}}, std::vector<int>{1}), 0.5);
  near(brier(Rows{{0.7, 0.2, 0.1}, {0.1, 0.1, 0.8}}, std::vector<int>{0, 2}), 0.10);
  near(brier(Rows{{0, 1, 0}}, std::vector<int>{2}), 2.0);

  near(mean_entropy(Rows{{1, 0}, {0, 1}}), 0.0);
  near(mean_entropy(Rows(4, std::vector<double>(10, 0.1))), std::log(10.0));
  near(mean_entropy(Rows{{0.5, 0.5}}), std::log(2.0));

  const std::vector<GroundTruth> gts{{{0, {0.25, 0.25, 0.2, 0.2}}}, {{0, {0.75, 0.75, 0.2, 0.2}}}};
  const std::vector<std::vector<Detection>> dets{
      {make_detection({0.25, 0.25, 0.2, 0.2}, {1.0}, 0.9), make_detection({0.6, 0.2, 0.1, 0.1}, {1.0}, 0.8)},
      {make_detection({0.76, 0.75, 0.2, 0.2}, {1.0}, 0.7)}};
  near(average_precision(dets, gts, 0.5, 1).map, 5.0 / 6.0);
  const std::vector<std::vector<Detection>> perfect{{make_detection({0.25, 0.25, 0.2, 0.2}, {1.0}, 0.9)},
                                                    {make_detection({0.75, 0.75, 0.2, 0.2}, {1.0}, 0.9)}};
  near(average_precision(perfect, gts, 0.5, 1).map, 1.0);

  const std::vector<GroundTruth> one{{{1, {0.5, 0.5, 0.3, 0.3}}}};
  const std::vector<std::vector<Detection>> two{
      {make_detection({0.5, 0.5, 0.3, 0.3}, {0.1, 0.9}, 0.8), make_detection({0.1, 0.1, 0.1, 0.1}, {1, 0}, 0.5)}};
  near(detection_brier(two, one, 0.5, 2),
       (0.08 * 0.08 + 0.28 * 0.28 + 0.2 * 0.2 + 0.5 * 0.5 + 0.5 * 0.5) / 2);

  CounterRng rng(4);
  int nms_cases = 0;
  for (int t = 0; t < 300; ++t, ++nms_cases) {
    std::vector<Detection> ds;
    const int n = 1 + static_cast<int>(rng.uniform_int(9));
    for (int i = 0; i < n; ++i)
      ds.push_back(make_detection({0.3 + 0.05 * static_cast<double>(rng.uniform_int(8)), 0.5,
                                   0.2 + 0.05 * static_cast<double>(rng.uniform_int(3)), 0.2},
                                  {1}, 0.1 * static_cast<double>(1 + rng.uniform_int(5))));
    const auto want = checks::nms_oracle(ds, 0.45);
    const auto got = nms(ds, 0.45);
    bool same = got.size() == want.size();
    for (std::size_t i = 0; same && i < got.size(); ++i)
      same = got[i].box == want[i].box && got[i].objectness == want[i].objectness;
    check(same);
  }
  report(7, failed == 0,
         std::to_string(total - failed) + "/" + std::to_string(total) + " micro-cases (Brier, entropy, AP, " +
             "detection Brier, " + std::to_string(nms_cases) + " NMS oracle sets)");
}

// ---------------------------------------------------------------------------
// Experiments on generated data.

struct Workspace {
  fs::path root;
  fs::path data;
};

ExperimentConfig base_config(const Workspace& w) {
  ExperimentConfig c;
  c.seed = 1;
  c.data_root = w.data.string();
  return c;
}

struct TrainedRun {
  ExperimentConfig cfg;
  ModelParams params;
  double cpu = 0.0;
};

TrainedRun train_run(const Workspace& w, Method method, const std::string& name) {
  TrainedRun r;
  r.cfg = base_config(w);
  r.cfg.train_method = method;
  r.cfg.dropblock_p = 0.1;
  r.cfg.dropblock_block_size = 3;
  r.cfg.run_dir = (w.root / name).string();
  std::ofstream progress(w.root / (name + ".progress"));
  const double t0 = cpu_seconds();
  r.params = cmd_train(r.cfg, &progress).last;
  r.cpu = cpu_seconds() - t0;
  return r;
}

void generalization(const TrainedRun& db, const TrainedRun& plain, const std::vector<LabeledImage>& test) {
  ExperimentConfig a = db.cfg;
  a.mc_method = Method::dropblock;
  ExperimentConfig b = plain.cfg;
  b.mc_method = Method::none;
  const double map_db = evaluate(a, db.params, test).map_50;
  const double map_plain = evaluate(b, plain.params, test).map_50;
  const bool ok = map_db >= 0.8 && map_plain >= 0.8 && db.cpu <= 900.0 && plain.cpu <= 900.0;
  report(5, ok,
         "mAP@0.5 on test-id: dropblock-trained (MC, S=30) " + fmt("%.4f", map_db) + " in " +
             fmt("%.0f", db.cpu) + " s CPU; baseline " + fmt("%.4f", map_plain) + " in " +
             fmt("%.0f", plain.cpu) + " s CPU");
}

void ood_gap(const Workspace& w, const TrainedRun& db) {
  bool ok = true;
  std::ostringstream d;
  for (std::uint64_t seed : {1, 2, 3}) {
    fs::path data = w.data;
    if (seed != 1) {
      data = w.root / ("ood_data_" + std::to_string(seed));
      generate(data, Split::test_id, default_split_count(Split::test_id), seed);
      generate(data, Split::test_ood, default_split_count(Split::test_ood), seed);
    }
    ExperimentConfig cfg = db.cfg;
    cfg.seed = seed;
    cfg.mc_samples = 30;
    cfg.sweep = {Method::none, Method::dropblock};
    const auto entries =
        ood_entries(cfg, db.params, load_split(data, Split::test_id), load_split(data, Split::test_ood));
    const OodEntry& none = entries[0];
    const OodEntry& mc = entries[1];
    const bool ratio_ok = mc.ratio >= 1.2;
    const bool above_none = mc.mean_entropy_ood >= none.mean_entropy_ood;
    ok = ok && ratio_ok && above_none;
    d << "seed " << seed << ": ratio " << fmt("%.3f", mc.ratio) << (ratio_ok ? "" : " (<1.2)")
      << ", ood entropy dropblock " << fmt("%.4f", mc.mean_entropy_ood) << " vs none "
      << fmt("%.4f", none.mean_entropy_ood) << (above_none ? "" : " (below none)") << "; ";
  }
  report(6, ok, d.str());
}

void estimator(const Workspace& w) {
  ExperimentConfig cfg = base_config(w);
  cfg.arch = Arch::classifier;
  cfg.epochs = 5;
  cfg.train_limit = 400;
  cfg.run_dir = (w.root / "classifier").string();
  const ModelParams p = cmd_train(cfg).last;
  const auto e = checks::mc_estimator(p, 8, 5);
  report(8, e.none_exact && e.shrinking >= 4,
         std::string("method=none ") + (e.none_exact ? "equals" : "differs from") +
             " the deterministic forward; |m1000-m100| < |m100-m10| in " + std::to_string(e.shrinking) + "/" +
             std::to_string(e.repetitions) + " repetitions");
}

// Raw file text with the timestamp value blanked; everything else byte for byte.
std::string metrics_without_timestamp(const fs::path& p) {
  std::string text = slurp(p);
  const std::string key = "\"timestamp\": \"";
  const std::size_t at = text.find(key);
  if (at == std::string::npos) return text;
  const std::size_t from = at + key.size();
  text.erase(from, text.find('"', from) - from);
  return text;
}

void determinism(const Workspace& w) {
  // Both repetitions use the same paths: they are part of the echoed config.
  std::vector<std::string> runs;
  const fs::path root = w.root / "pipeline";
  for (int rep = 0; rep < 2; ++rep) {
    fs::remove_all(root);
    ExperimentConfig cfg;
    cfg.seed = 5;
    cfg.data_root = (root / "data").string();
    cfg.run_dir = (root / "run").string();
    cfg.epochs = 2;
    for (Split s : {Split::train, Split::val, Split::test_id, Split::test_ood})
      generate(cfg.data_root, s, default_split_count(s), cfg.seed);
    cmd_train(cfg);
    cmd_eval(cfg);
    runs.push_back(metrics_without_timestamp(root / "run/metrics.json"));
  }
  const bool same = runs[0] == runs[1];
  report(9, same,
         std::string("gen-data -> train (2 epochs) -> eval, twice: metrics.json ") +
             (same ? "identical" : "differs") + " apart from the timestamp");
}

std::string reader_dump(const ModelParams& p) {
  auto hexu = [](std::uint32_t v) {
    char buf[12];
    std::snprintf(buf, sizeof buf, "%08x", v);
    return std::string(buf);
  };
  auto hex = [&](float v) { return hexu(std::bit_cast<std::uint32_t>(v)); };
  std::ostringstream out;
  out << kWeightsVersion << " " << (p.hyper.arch == Arch::detector ? 0 : 1) << " " << p.hyper.image_size << " "
      << p.hyper.num_classes << " " << p.hyper.anchors.size();
  for (const Anchor& a : p.hyper.anchors) out << " " << hex(a.w) << " " << hex(a.h);
  out << " " << hexu(static_cast<std::uint32_t>(p.hyper.block_size)) << " " << hex(p.hyper.drop_prob) << " "
      << p.tensors.size() << "\n";
  for (const NamedTensor& t : p.tensors) {
    out << t.name;
    for (int d : t.tensor.shape()) out << " " << d;
    for (float v : t.tensor.values()) out << " " << hex(v);
    out << "\n";
  }
  return out.str();
}

void persistence(const Workspace& w, const TrainedRun& db) {
  const fs::path file = fs::path(db.cfg.run_dir) / "weights.mcbk";
  const ModelParams back = load_weights(file);
  const auto bytes = serialize_weights(db.params);
  const std::string on_disk = slurp(file);
  bool exact = serialize_weights(back) == bytes && on_disk == std::string(bytes.begin(), bytes.end());
  for (std::size_t i = 0; exact && i < back.tensors.size(); ++i) {
    const auto& a = back.tensors[i].tensor.values();
    const auto& b = db.params.tensors[i].tensor.values();
    exact = a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](float x, float y) {
              return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
            });
  }
  std::string reader = "independent reader unavailable";
  bool reader_ok = false;
#if defined(MCBLOCK_PYTHON) && defined(MCBLOCK_READER)
  const fs::path out = w.root / "reader_dump.txt";
  const std::string cmd = std::string("\"") + MCBLOCK_PYTHON + "\" \"" + MCBLOCK_READER + "\" \"" + file.string() +
                          "\" > \"" + out.string() + "\"";
  if (std::system(cmd.c_str()) == 0) {
    reader_ok = slurp(out) == reader_dump(db.params);
    reader = reader_ok ? "independent reader agrees" : "independent reader disagrees";
  } else {
    reader = "independent reader failed to run";
  }
#else
  (void)w;
#endif
  report(10, exact && reader_ok,
         std::string("trained weights (") + std::to_string(bytes.size()) + " bytes) " +
             (exact ? "round-trip bit-exactly" : "do NOT round-trip") + "; " + reader);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance runner"};
  std::string work = "acceptance_work";
  bool strict = false;
  app.add_option("--work", work, "scratch directory for data and runs");
  app.add_flag("--strict", strict, "exit 1 when any criterion fails");
  CLI11_PARSE(app, argc, argv);

  try {
    const Workspace w{fs::path(work), fs::path(work) / "data"};
    fs::create_directories(w.root);
    report_file.open(w.root / "acceptance_report.txt");

    gradients();
    equivalence();
    drop_rates();
    unbiased();

    for (Split s : {Split::train, Split::val, Split::test_id, Split::test_ood})
      generate(w.data, s, default_split_count(s), 1);
    const TrainedRun db = train_run(w, Method::dropblock, "train_dropblock");
    const TrainedRun plain = train_run(w, Method::none, "train_none");
    generalization(db, plain, load_split(w.data, Split::test_id));
    ood_gap(w, db);

    metric_oracles();
    estimator(w);
    determinism(w);
    persistence(w, db);
  } catch (const std::exception& e) {
    emit(std::string("ERROR acceptance run aborted: ") + e.what());
    return 2;
  }

  int failed = 0;
  for (const auto& v : verdicts) failed += !v.pass;
  emit(std::to_string(verdicts.size() - failed) + "/" + std::to_string(verdicts.size()) + " criteria passed");
  return strict && failed > 0 ? 1 : 0;
}
