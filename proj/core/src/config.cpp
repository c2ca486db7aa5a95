#include "mcblock/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "mcblock/data_synth.hpp"
#include "mcblock/error.hpp"

namespace mcblock {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size())
    throw ConfigError("bad value '" + v + "' for " + key);
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean '" + v + "' for " + key);
}

struct Field {
  const char* key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define MCB_DOUBLE(KEY, MEMBER)                                                              \
  Field {                                                                                    \
    KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = parse_number<double>(KEY, v); }, \
        [](const ExperimentConfig& c) { return fmt(c.MEMBER); }                              \
  }
#define MCB_INT(KEY, MEMBER)                                                                 \
  Field {                                                                                    \
    KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = parse_number<int>(KEY, v); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.MEMBER); }                  \
  }
#define MCB_BOOL(KEY, MEMBER)                                                                \
  Field {                                                                                    \
    KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = parse_bool(KEY, v); },   \
        [](const ExperimentConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }   \
  }
#define MCB_STRING(KEY, MEMBER)                                                              \
  Field {                                                                                    \
    KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = v; },                    \
        [](const ExperimentConfig& c) { return c.MEMBER; }                                   \
  }
#define MCB_METHOD(KEY, MEMBER)                                                              \
  Field {                                                                                    \
    KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = parse_method(v); },      \
        [](const ExperimentConfig& c) { return std::string(to_string(c.MEMBER)); }           \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      Field{"seed",
            [](ExperimentConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); },
            [](const ExperimentConfig& c) { return std::to_string(c.seed); }},
      MCB_STRING("data.root", data_root),
      MCB_STRING("run.dir", run_dir),
      Field{"model.arch", [](ExperimentConfig& c, const std::string& v) { c.arch = parse_arch(v); },
            [](const ExperimentConfig& c) { return std::string(to_string(c.arch)); }},
      MCB_INT("model.image_size", image_size),
      MCB_DOUBLE("dropblock.p", dropblock_p),
      MCB_INT("dropblock.block_size", dropblock_block_size),
      MCB_BOOL("dropblock.per_channel", dropblock_per_channel),
      MCB_DOUBLE("dropout.p", dropout_p),
      MCB_METHOD("train.method", train_method),
      MCB_INT("train.epochs", epochs),
      MCB_INT("train.batch_size", batch_size),
      MCB_INT("train.limit", train_limit),
      MCB_BOOL("train.log_initial_loss", log_initial_loss),
      MCB_DOUBLE("optim.lr", lr),
      MCB_DOUBLE("optim.momentum", momentum),
      MCB_INT("optim.warmup_steps", warmup_steps),
      MCB_DOUBLE("optim.lr_decay_at", lr_decay_at),
      MCB_DOUBLE("optim.clip_norm", clip_norm),
      MCB_DOUBLE("loss.lambda_box", loss.lambda_box),
      MCB_DOUBLE("loss.lambda_obj", loss.lambda_obj),
      MCB_DOUBLE("loss.lambda_cls", loss.lambda_cls),
      MCB_DOUBLE("loss.lambda_wd", loss.lambda_wd),
      MCB_BOOL("loss.use_gaussian", loss.use_gaussian),
      MCB_BOOL("loss.use_giou", loss.use_giou),
      MCB_METHOD("mc.method", mc_method),
      MCB_INT("mc.samples", mc_samples),
      MCB_DOUBLE("mc.merge_iou", mc_merge_iou),
      MCB_DOUBLE("mc.min_support_frac", mc_min_support_frac),
      MCB_STRING("eval.split", eval_split),
      MCB_STRING("eval.weights", weights),
      MCB_DOUBLE("eval.conf_thresh", conf_thresh),
      MCB_DOUBLE("eval.nms_iou", nms_iou),
      MCB_DOUBLE("eval.iou_thresh", iou_thresh),
      MCB_INT("eval.overlays", overlays),
      MCB_INT("eval.limit", eval_limit),
      Field{"eval.sweep",
            [](ExperimentConfig& c, const std::string& v) {
              c.sweep.clear();
              std::stringstream ss(v);
              std::string item;
              while (std::getline(ss, item, ',')) c.sweep.push_back(parse_method(trim(item)));
              if (c.sweep.empty()) throw ConfigError("eval.sweep needs at least one method");
            },
            [](const ExperimentConfig& c) {
              std::string s;
              for (Method m : c.sweep) s += (s.empty() ? "" : ",") + std::string(to_string(m));
              return s;
            }},
  };
  return table;
}

#undef MCB_DOUBLE
#undef MCB_INT
#undef MCB_BOOL
#undef MCB_STRING
#undef MCB_METHOD

}  // namespace

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  for (const Field& f : fields())
    if (key == f.key) {
      f.set(*this, trim(value));
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

void ExperimentConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void ExperimentConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      apply_override(line);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void ExperimentConfig::validate() const {
  model_hyper().validate();
  DropBlockConfig db;
  db.block_size = dropblock_block_size;
  db.drop_prob = dropblock_p;
  db.validate(image_size / 8, image_size / 8);
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout.p must lie in [0, 1)");
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (train_limit < 0 || eval_limit < 0) throw ConfigError("limits must be >= 0");
  if (!(lr >= 0.0)) throw ConfigError("optim.lr must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optim.momentum must lie in [0, 1)");
  if (warmup_steps < 0) throw ConfigError("optim.warmup_steps must be >= 0");
  if (!(lr_decay_at > 0.0)) throw ConfigError("optim.lr_decay_at must be > 0");
  if (!(clip_norm >= 0.0)) throw ConfigError("optim.clip_norm must be >= 0");
  for (double l : {loss.lambda_box, loss.lambda_obj, loss.lambda_cls, loss.lambda_wd})
    if (!(l >= 0.0)) throw ConfigError("loss weights must be >= 0");
  mc_config(mc_method).validate();
  parse_split(eval_split);
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0)) throw ConfigError("eval.iou_thresh must lie in (0, 1)");
  if (overlays < 0) throw ConfigError("eval.overlays must be >= 0");
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::resolved() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const Field& f : fields()) out.emplace_back(f.key, f.get(*this));
  return out;
}

std::string ExperimentConfig::resolved_text() const {
  std::string s;
  for (const auto& [k, v] : resolved()) s += k + " = " + v + "\n";
  return s;
}

std::filesystem::path ExperimentConfig::weights_path() const {
  return weights.empty() ? std::filesystem::path(run_dir) / "weights.mcbk"
                         : std::filesystem::path(weights);
}

std::vector<std::string> ExperimentConfig::keys() {
  std::vector<std::string> out;
  for (const Field& f : fields()) out.emplace_back(f.key);
  return out;
}

ModelHyper ExperimentConfig::model_hyper() const {
  ModelHyper h;
  h.arch = arch;
  h.image_size = image_size;
  h.num_classes = kNumIdClasses;
  h.block_size = dropblock_block_size;
  h.drop_prob = static_cast<float>(dropblock_p);
  return h;
}

McConfig ExperimentConfig::mc_config(Method method, int threads) const {
  McConfig m;
  m.samples = mc_samples;
  m.merge_iou = mc_merge_iou;
  m.min_support_frac = mc_min_support_frac;
  m.method = method;
  m.block_size = dropblock_block_size;
  m.drop_prob = method == Method::dropout ? dropout_p : dropblock_p;
  m.per_channel = dropblock_per_channel;
  m.conf_thresh = conf_thresh;
  m.nms_iou = nms_iou;
  m.threads = threads;
  return m;
}

StochasticSite ExperimentConfig::train_site() const {
  StochasticSite s;
  s.method = train_method;
  s.mode = train_method == Method::none ? DropMode::disabled : DropMode::training;
  s.block_size = dropblock_block_size;
  s.drop_prob = train_method == Method::dropout ? dropout_p : dropblock_p;
  s.per_channel = dropblock_per_channel;
  return s;
}

}  // namespace mcblock
