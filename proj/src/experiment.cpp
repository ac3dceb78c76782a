#include "nowcast/experiment.hpp"

#include <yaml-cpp/yaml.h>

#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#include "nowcast/binary_io.hpp"
#include "nowcast/error.hpp"

namespace nowcast {

namespace {

// Reads typed values out of one YAML mapping and rejects keys nobody asked for.
class Section {
 public:
  Section(const YAML::Node& node, std::string name) : node_(node), name_(std::move(name)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) throw ConfigError("section '" + name_ + "' must be a mapping");
  }

  Section child(const std::string& key) {
    const auto n = take(key);
    return Section(n ? *n : YAML::Node(), where(key));
  }

  void get(const std::string& key, std::uint64_t& out) {
    if (auto n = take(key)) {
      if (n->IsScalar() && !n->Scalar().empty() && n->Scalar()[0] == '-') {
        throw ConfigError(where(key) + " must be non-negative");
      }
      out = scalar<std::uint64_t>(*n, key);
    }
  }
  void get(const std::string& key, int& out) {
    if (auto n = take(key)) out = scalar<int>(*n, key);
  }
  void get(const std::string& key, double& out) {
    if (auto n = take(key)) out = scalar<double>(*n, key);
  }
  void get(const std::string& key, std::string& out) {
    if (auto n = take(key)) out = scalar<std::string>(*n, key);
  }
  void get(const std::string& key, std::array<std::size_t, 4>& out) {
    const auto node = take(key);
    if (!node) return;
    const YAML::Node& n = *node;
    if (!n.IsSequence() || n.size() != 4) throw ConfigError(where(key) + " must be a list of four integers");
    for (std::size_t i = 0; i < 4; ++i) {
      const auto v = scalar<long long>(n[i], key);
      if (v <= 0) throw ConfigError(where(key) + " entries must be positive");
      out[i] = static_cast<std::size_t>(v);
    }
  }

  /// Throws for any key that was not read.
  void finish() const {
    if (!node_ || node_.IsNull()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) throw ConfigError("unknown key '" + where(key) + "'");
    }
  }

 private:
  std::string where(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }

  // Absent and null keys keep their defaults.
  std::optional<YAML::Node> take(const std::string& key) {
    seen_.insert(key);
    if (!node_ || node_.IsNull()) return std::nullopt;
    const YAML::Node& map = node_;
    YAML::Node n = map[key];
    if (!n || n.IsNull()) return std::nullopt;
    return n;
  }

  template <class T>
  T scalar(const YAML::Node& n, const std::string& key) const {
    if (!n.IsScalar()) throw ConfigError(where(key) + " must be a scalar");
    try {
      return n.as<T>();
    } catch (const YAML::Exception&) {
      throw ConfigError(where(key) + " has an invalid value '" + n.Scalar() + "'");
    }
  }

  YAML::Node node_;
  std::string name_;
  std::set<std::string> seen_;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string quad(const std::array<std::size_t, 4>& a) {
  return "[" + std::to_string(a[0]) + ", " + std::to_string(a[1]) + ", " + std::to_string(a[2]) + ", " +
         std::to_string(a[3]) + "]";
}

std::string synth_section(const ExperimentConfig& c) {
  const auto& s = c.synth;
  std::ostringstream os;
  os << "synth:\n"
     << "  events: " << c.events << "\n"
     << "  rows: " << s.rows << "\n"
     << "  cols: " << s.cols << "\n"
     << "  levels: " << s.levels << "\n"
     << "  frames: " << s.frames << "\n"
     << "  storms_min: " << s.storms_min << "\n"
     << "  storms_max: " << s.storms_max << "\n"
     << "  peak_dbz_min: " << num(s.peak_dbz_min) << "\n"
     << "  peak_dbz_max: " << num(s.peak_dbz_max) << "\n"
     << "  sigma_xy_min: " << num(s.sigma_xy_min) << "\n"
     << "  sigma_xy_max: " << num(s.sigma_xy_max) << "\n"
     << "  sigma_z_min: " << num(s.sigma_z_min) << "\n"
     << "  sigma_z_max: " << num(s.sigma_z_max) << "\n"
     << "  core_level_min: " << num(s.core_level_min) << "\n"
     << "  core_level_max: " << num(s.core_level_max) << "\n"
     << "  speed_min: " << num(s.speed_min) << "\n"
     << "  speed_max: " << num(s.speed_max) << "\n"
     << "  grow_min: " << s.grow_min << "\n"
     << "  grow_max: " << s.grow_max << "\n"
     << "  plateau_min: " << s.plateau_min << "\n"
     << "  plateau_max: " << s.plateau_max << "\n"
     << "  decay_min: " << s.decay_min << "\n"
     << "  decay_max: " << s.decay_max << "\n"
     << "  initiation_lead: " << s.initiation_lead << "\n"
     << "  w_gain_min: " << num(s.w_gain_min) << "\n"
     << "  w_gain_max: " << num(s.w_gain_max) << "\n"
     << "  pt_gain_min: " << num(s.pt_gain_min) << "\n"
     << "  pt_gain_max: " << num(s.pt_gain_max) << "\n"
     << "  noise_dbz: " << num(s.noise_dbz) << "\n"
     << "  noise_w: " << num(s.noise_w) << "\n"
     << "  noise_pt: " << num(s.noise_pt) << "\n";
  return os.str();
}

std::string pipeline_section(const ExperimentConfig& c) {
  std::ostringstream os;
  os << "pipeline:\n"
     << "  n_train: " << c.pipeline.n_train << "\n"
     << "  n_test: " << c.pipeline.n_test << "\n"
     << "  validation_fraction: " << num(c.pipeline.validation_fraction) << "\n"
     << "  k: " << c.oversample_k << "\n";
  return os.str();
}

std::string train_section(const ExperimentConfig& c) {
  const auto& t = c.train;
  std::ostringstream os;
  os << "train:\n"
     << "  epochs: " << t.epochs << "\n"
     << "  batch_size: " << t.batch_size << "\n"
     << "  optimizer: " << (t.optimizer == OptimizerKind::adam ? "adam" : "sgd") << "\n"
     << "  learning_rate: " << num(t.learning_rate) << "\n"
     << "  patience: " << t.patience << "\n"
     << "  track_chunk: " << t.track_chunk << "\n"
     << "  conv_channels: " << quad(t.model.conv_channels) << "\n"
     << "  kernels: " << quad(t.model.kernels) << "\n"
     << "  fc_hidden: " << t.model.fc_hidden << "\n"
     << "  feature_dim: " << t.model.feature_dim << "\n"
     << "  lstm_hidden: " << t.model.lstm_hidden << "\n";
  return os.str();
}

std::string eval_section(const ExperimentConfig& c) { return "eval:\n  threshold: " + num(c.threshold) + "\n"; }

}  // namespace

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t stage_seed(std::uint64_t global_seed, std::string_view stage) {
  std::uint64_t x = bin::fnv1a(stage, 0xcbf29ce484222325ULL ^ global_seed);
  // splitmix64 finalizer
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

ExperimentConfig ExperimentConfig::parse(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config is not valid YAML: ") + e.what());
  }
  ExperimentConfig c;
  Section top(root, "");
  top.get("seed", c.seed);

  Section paths = top.child("paths");
  paths.get("out", c.paths.out);
  paths.get("data_dir", c.paths.data_dir);
  paths.get("sample_dir", c.paths.sample_dir);
  paths.get("model_path", c.paths.model_path);
  paths.get("report_dir", c.paths.report_dir);
  paths.finish();

  auto& s = c.synth;
  Section synth = top.child("synth");
  synth.get("events", c.events);
  synth.get("rows", s.rows);
  synth.get("cols", s.cols);
  synth.get("levels", s.levels);
  synth.get("frames", s.frames);
  synth.get("storms_min", s.storms_min);
  synth.get("storms_max", s.storms_max);
  synth.get("peak_dbz_min", s.peak_dbz_min);
  synth.get("peak_dbz_max", s.peak_dbz_max);
  synth.get("sigma_xy_min", s.sigma_xy_min);
  synth.get("sigma_xy_max", s.sigma_xy_max);
  synth.get("sigma_z_min", s.sigma_z_min);
  synth.get("sigma_z_max", s.sigma_z_max);
  synth.get("core_level_min", s.core_level_min);
  synth.get("core_level_max", s.core_level_max);
  synth.get("speed_min", s.speed_min);
  synth.get("speed_max", s.speed_max);
  synth.get("grow_min", s.grow_min);
  synth.get("grow_max", s.grow_max);
  synth.get("plateau_min", s.plateau_min);
  synth.get("plateau_max", s.plateau_max);
  synth.get("decay_min", s.decay_min);
  synth.get("decay_max", s.decay_max);
  synth.get("initiation_lead", s.initiation_lead);
  synth.get("w_gain_min", s.w_gain_min);
  synth.get("w_gain_max", s.w_gain_max);
  synth.get("pt_gain_min", s.pt_gain_min);
  synth.get("pt_gain_max", s.pt_gain_max);
  synth.get("noise_dbz", s.noise_dbz);
  synth.get("noise_w", s.noise_w);
  synth.get("noise_pt", s.noise_pt);
  synth.finish();

  Section pipe = top.child("pipeline");
  pipe.get("n_train", c.pipeline.n_train);
  pipe.get("n_test", c.pipeline.n_test);
  pipe.get("validation_fraction", c.pipeline.validation_fraction);
  pipe.get("k", c.oversample_k);
  pipe.finish();

  auto& t = c.train;
  Section train = top.child("train");
  train.get("epochs", t.epochs);
  train.get("batch_size", t.batch_size);
  std::string opt = t.optimizer == OptimizerKind::adam ? "adam" : "sgd";
  train.get("optimizer", opt);
  if (opt == "adam") {
    t.optimizer = OptimizerKind::adam;
  } else if (opt == "sgd") {
    t.optimizer = OptimizerKind::sgd;
  } else {
    throw ConfigError("train.optimizer must be 'adam' or 'sgd', got '" + opt + "'");
  }
  train.get("learning_rate", t.learning_rate);
  train.get("patience", t.patience);
  train.get("track_chunk", t.track_chunk);
  train.get("conv_channels", t.model.conv_channels);
  train.get("kernels", t.model.kernels);
  train.get("fc_hidden", t.model.fc_hidden);
  train.get("feature_dim", t.model.feature_dim);
  train.get("lstm_hidden", t.model.lstm_hidden);
  train.finish();

  Section eval = top.child("eval");
  eval.get("threshold", c.threshold);
  eval.finish();
  top.finish();

  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string ExperimentConfig::canonical() const {
  return "seed: " + std::to_string(seed) + "\n" + synth_section(*this) + pipeline_section(*this) + train_section(*this) +
         eval_section(*this);
}

void ExperimentConfig::validate() const {
  synth.validate();
  if (oversample_k != 1 && oversample_k != 2) throw ConfigError("pipeline.k must be 1 or 2");
  if (!(pipeline.validation_fraction >= 0 && pipeline.validation_fraction < 1)) {
    throw ConfigError("pipeline.validation_fraction must lie in [0, 1)");
  }
  if (events > 0 && pipeline.n_train + pipeline.n_test != events) {
    throw ConfigError("pipeline.n_train + pipeline.n_test (" + std::to_string(pipeline.n_train + pipeline.n_test) +
                      ") must equal synth.events (" + std::to_string(events) + ")");
  }
  train.validate();
  if (!(threshold >= 0 && threshold <= 1)) throw ConfigError("eval.threshold must lie in [0, 1]");
  if (paths.out.empty()) throw ConfigError("paths.out must not be empty");
}

std::uint64_t ExperimentConfig::synth_hash() const {
  return bin::fnv1a("seed: " + std::to_string(seed) + "\n" + synth_section(*this));
}
std::uint64_t ExperimentConfig::prepare_hash() const { return bin::fnv1a(pipeline_section(*this), synth_hash()); }
std::uint64_t ExperimentConfig::train_hash() const { return bin::fnv1a(train_section(*this), prepare_hash()); }
std::uint64_t ExperimentConfig::eval_hash() const { return bin::fnv1a(eval_section(*this), train_hash()); }

std::filesystem::path ExperimentConfig::resolve(const std::string& p) const {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : std::filesystem::path(paths.out) / path;
}

}  // namespace nowcast
