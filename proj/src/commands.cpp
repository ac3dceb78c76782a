#include "nowcast/commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "nowcast/binary_io.hpp"
#include "nowcast/report.hpp"
#include "nowcast/sample_io.hpp"
#include "nowcast/storm_synth.hpp"
#include "nowcast/trainer.hpp"
#include "nowcast/verification.hpp"

namespace fs = std::filesystem;

namespace nowcast {

namespace {

fs::path manifest_path(const ExperimentConfig& cfg, const std::string& stage) {
  return fs::path(cfg.paths.out) / ".stages" / (stage + ".json");
}

void ensure_parent(const fs::path& p) {
  std::error_code ec;
  if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
  if (ec) throw IoError("cannot create directory " + p.parent_path().string() + ": " + ec.message());
}

void write_text(const fs::path& p, const std::string& text) {
  ensure_parent(p);
  bin::write_file(p.string(), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string percent(double f) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * f);
  return buf;
}

// Decides whether a stage runs, and clears its manifest when it does.
class StageGuard {
 public:
  StageGuard(const ExperimentConfig& cfg, std::string stage, std::uint64_t hash, std::vector<fs::path> outputs)
      : cfg_(cfg), stage_(std::move(stage)), hash_(hex64(hash)), outputs_(std::move(outputs)) {}

  /// True when the stage's recorded outputs are current.
  bool up_to_date(bool force) const {
    const auto mpath = manifest_path(cfg_, stage_);
    if (force || !fs::exists(mpath)) return false;
    nlohmann::json m;
    try {
      std::ifstream in(mpath);
      m = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception&) {
      return false;
    }
    const std::string recorded = m.value("config_hash", "");
    if (recorded != hash_) {
      throw StaleOutputError("outputs of stage '" + stage_ + "' in " + cfg_.paths.out + " were produced with config hash " +
                             recorded + " but the current config hashes to " + hash_ +
                             "; rerun with --force to overwrite them");
    }
    for (const auto& p : outputs_) {
      if (!fs::exists(p)) return false;
    }
    return true;
  }

  void begin() const {
    std::error_code ec;
    fs::remove(manifest_path(cfg_, stage_), ec);
  }

  void commit() const {
    nlohmann::json m;
    m["stage"] = stage_;
    m["config_hash"] = hash_;
    std::vector<std::string> files;
    for (const auto& p : outputs_) files.push_back(p.string());
    m["outputs"] = files;
    write_text(manifest_path(cfg_, stage_), m.dump(2) + "\n");
  }

 private:
  const ExperimentConfig& cfg_;
  std::string stage_;
  std::string hash_;
  std::vector<fs::path> outputs_;
};

std::vector<fs::path> event_paths(const ExperimentConfig& cfg) {
  std::vector<fs::path> out;
  for (std::size_t k = 0; k < cfg.events; ++k) out.push_back(event_path(cfg, k));
  return out;
}

std::vector<GridSequence> load_events(const ExperimentConfig& cfg) {
  std::vector<GridSequence> grids;
  for (const auto& p : event_paths(cfg)) {
    if (!fs::exists(p)) throw DataError("missing event file " + p.string() + "; run synth first");
    grids.push_back(read_grid(p.string()));
    if (grids.back().provenance() != 0 && grids.back().provenance() != cfg.synth_hash()) {
      throw DataError("event file " + p.string() + " was produced by a different configuration; rerun synth");
    }
  }
  return grids;
}

SampleSet load_samples(const ExperimentConfig& cfg, Split split) {
  const auto p = sample_path(cfg, split);
  if (!fs::exists(p)) throw DataError("missing sample set " + p.string() + "; run prepare first");
  SampleSet set = read_sample_set(p.string());
  if (set.provenance != cfg.prepare_hash()) {
    throw DataError("sample set " + p.string() + " was produced by a different configuration; rerun prepare");
  }
  return set;
}

void describe(std::ostream& log, const char* what, const SampleSet& s) {
  log << "  " << what << ": " << s.target_count() << " targets (" << s.samples.size() << " records), "
      << s.positive_count() << " positive = " << percent(s.positive_fraction()) << "\n";
}

std::vector<fs::path> report_paths(const ExperimentConfig& cfg) {
  const auto dir = cfg.report_dir();
  std::vector<fs::path> out{dir / "report.csv", dir / "frames.csv", dir / "roc.csv", dir / "roc_persistence.csv",
                            dir / "predictions.csv"};
  return out;
}

}  // namespace

fs::path event_path(const ExperimentConfig& cfg, std::size_t k) {
  return cfg.data_dir() / ("event_" + std::to_string(k) + ".nwc");
}

fs::path sample_path(const ExperimentConfig& cfg, Split split) {
  return cfg.sample_dir() / (std::string(split_name(split)) + ".nws");
}

fs::path training_log_path(const ExperimentConfig& cfg) { return cfg.model_path().parent_path() / "train_log.csv"; }

ExperimentConfig resolve_config(const CommandOptions& opts) {
  ExperimentConfig cfg = ExperimentConfig::load(opts.config);
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.out) cfg.paths.out = *opts.out;
  if (opts.k) cfg.oversample_k = *opts.k;
  if (opts.threshold) cfg.threshold = *opts.threshold;
  cfg.validate();
  return cfg;
}

StageStatus cmd_synth(const ExperimentConfig& cfg, bool force, std::ostream& log) {
  if (cfg.events == 0) {
    log << "synth: warning: zero events requested, nothing written\n";
    return StageStatus::ran;
  }
  StageGuard guard(cfg, "synth", cfg.synth_hash(), event_paths(cfg));
  if (guard.up_to_date(force)) {
    log << "synth: up to date (config hash " << hex64(cfg.synth_hash()) << "), skipped\n";
    return StageStatus::skipped;
  }
  guard.begin();
  const std::uint64_t seed = stage_seed(cfg.seed, "synth");
  for (std::size_t k = 0; k < cfg.events; ++k) {
    const auto path = event_path(cfg, k);
    GridSequence g = synth_event(cfg.synth, seed + k, "event_" + std::to_string(k));
    g.set_provenance(cfg.synth_hash());
    ensure_parent(path);
    write_grid(g, path.string());

    std::size_t stormy = 0, frames_with_storm = 0;
    const std::size_t pixels = g.rows() * g.cols();
    for (std::size_t t = 0; t < g.frames(); ++t) {
      std::size_t here = 0;
      for (std::size_t y = 0; y < g.rows(); ++y) {
        for (std::size_t x = 0; x < g.cols(); ++x) {
          float m = 0;
          for (std::size_t z = 0; z < g.levels(); ++z) m = std::max(m, g.at(t, GridVar::R, z, y, x));
          if (m >= kStormThresholdDbz) ++here;
        }
      }
      stormy += here;
      if (here) ++frames_with_storm;
    }
    log << "synth: wrote " << path.string() << ": composite R >= 35 dBZ on "
        << percent(static_cast<double>(stormy) / static_cast<double>(pixels * g.frames())) << " of pixels, "
        << frames_with_storm << "/" << g.frames() << " frames with storms\n";
  }
  guard.commit();
  return StageStatus::ran;
}

StageStatus cmd_prepare(const ExperimentConfig& cfg, bool force, std::ostream& log) {
  const std::vector<fs::path> outputs{sample_path(cfg, Split::train), sample_path(cfg, Split::validation),
                                      sample_path(cfg, Split::test)};
  StageGuard guard(cfg, "prepare", cfg.prepare_hash(), outputs);
  if (guard.up_to_date(force)) {
    log << "prepare: up to date (config hash " << hex64(cfg.prepare_hash()) << "), skipped\n";
    return StageStatus::skipped;
  }
  if (cfg.events == 0) throw DataError("no events configured");
  guard.begin();

  const auto grids = load_events(cfg);
  PipelineOptions opts = cfg.pipeline;
  opts.seed = stage_seed(cfg.seed, "prepare");
  PreparedSplits splits = build_splits(grids, opts);

  // Every scored cell of every frame must be accounted for.
  const std::size_t per_event = valid_cells(cfg.synth.rows, cfg.synth.cols).size() *
                                (cfg.synth.frames >= 5 ? cfg.synth.frames - 5 : 0);
  const std::size_t expected = per_event * grids.size();
  const std::size_t produced = splits.train.target_count() + splits.validation.target_count() + splits.test.target_count();
  log << "prepare: " << produced << " scored samples (" << valid_cells(cfg.synth.rows, cfg.synth.cols).size()
      << " valid cells x " << (cfg.synth.frames - 5) << " frames x " << grids.size() << " events = " << expected << ")\n";
  if (produced != expected) {
    throw DataError("sample count " + std::to_string(produced) + " disagrees with enumeration " + std::to_string(expected));
  }

  const double test_before = splits.test.positive_fraction();
  log << "prepare: class balance before oversampling\n";
  describe(log, "train", splits.train);
  describe(log, "validation", splits.validation);
  describe(log, "test", splits.test);

  std::vector<EventFields> fields;
  fields.reserve(grids.size());
  for (std::size_t i = 0; i < grids.size(); ++i) fields.emplace_back(grids[i], static_cast<std::uint32_t>(i));
  const double train_before = splits.train.positive_fraction();
  splits.train = oversample_positives(splits.train, cfg.oversample_k, fields);
  log << "prepare: after oversampling with K = " << cfg.oversample_k << "\n";
  describe(log, "train", splits.train);
  if (splits.train.positive_fraction() < train_before) throw DataError("oversampling lowered the positive fraction");

  for (SampleSet* s : {&splits.train, &splits.validation, &splits.test}) {
    s->provenance = cfg.prepare_hash();
    const auto p = sample_path(cfg, s->split);
    ensure_parent(p);
    write_sample_set(*s, p.string());
  }

  // The test split as written must keep its original class balance.
  const SampleSet written = read_sample_set(sample_path(cfg, Split::test).string());
  for (const auto& s : written.samples) {
    if (s.meta.oversampled) throw DataError("test split contains oversampled records");
  }
  if (written.positive_fraction() != test_before) {
    throw DataError("test positive fraction changed from " + percent(test_before) + " to " +
                    percent(written.positive_fraction()));
  }
  log << "prepare: test positive fraction unchanged at " << percent(test_before) << "\n";
  guard.commit();
  return StageStatus::ran;
}

StageStatus cmd_train(const ExperimentConfig& cfg, bool force, std::ostream& log) {
  StageGuard guard(cfg, "train", cfg.train_hash(), {cfg.model_path(), training_log_path(cfg)});
  if (guard.up_to_date(force)) {
    log << "train: up to date (config hash " << hex64(cfg.train_hash()) << "), skipped\n";
    return StageStatus::skipped;
  }
  guard.begin();
  const SampleSet train_set = load_samples(cfg, Split::train);
  const SampleSet val_set = load_samples(cfg, Split::validation);

  TrainConfig tc = cfg.train;
  tc.seed = stage_seed(cfg.seed, "train");
  log << "train: " << train_set.target_count() << " training / " << val_set.target_count()
      << " validation instances, up to " << tc.epochs << " epochs\n";
  TrainResult result = train(train_set, val_set, tc, [&](const EpochLog& e) {
    log << "train: epoch " << e.epoch << " loss " << format_number(e.loss) << " validation CSI "
        << format_optional(e.val_csi) << "\n";
    log.flush();
  });
  log << "train: best epoch " << result.best_epoch << " of " << result.log.size() << "\n";

  result.model.provenance = cfg.train_hash();
  ensure_parent(cfg.model_path());
  save_model(result.model, cfg.model_path().string());
  write_text(training_log_path(cfg), training_log_csv(result.log, hex64(cfg.train_hash())));
  log << "train: wrote " << cfg.model_path().string() << "\n";
  guard.commit();
  return StageStatus::ran;
}

StageStatus cmd_eval(const ExperimentConfig& cfg, bool force, std::ostream& log) {
  StageGuard guard(cfg, "eval", cfg.eval_hash(), report_paths(cfg));
  if (guard.up_to_date(force)) {
    log << "eval: up to date (config hash " << hex64(cfg.eval_hash()) << "), skipped\n";
    return StageStatus::skipped;
  }
  if (!fs::exists(cfg.model_path())) throw DataError("missing model " + cfg.model_path().string() + "; run train first");
  guard.begin();
  const NowcastModel model = load_model(cfg.model_path().string());
  if (model.provenance != cfg.train_hash()) {
    throw DataError("model " + cfg.model_path().string() + " was produced by a different configuration; rerun train");
  }
  const SampleSet test = load_samples(cfg, Split::test);
  if (model.normalizer.fingerprint() != test.normalizer.fingerprint()) {
    throw DataError("model and test set were normalized with different statistics");
  }

  const auto instances = index_instances(test);
  const auto model_probs = predict_instances(model, test, instances);
  const auto persistence = persistence_baseline(test);
  std::vector<int> labels;
  std::vector<FrameKey> frames;
  std::vector<PredictionRow> rows;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& m = test.samples[instances[i].target].meta;
    labels.push_back(m.label);
    frames.push_back({m.event_index, m.frame});
    rows.push_back({m, model_probs[i], persistence[i]});
  }
  std::vector<FrameKey> all_frames;
  for (const auto& ev : test.events) {
    for (std::size_t t = kHistorySteps; t + kLabelLeadFrames < cfg.synth.frames; ++t) {
      all_frames.push_back({ev.index, static_cast<std::uint32_t>(t)});
    }
  }

  std::vector<SkillReport> reports;
  reports.push_back(make_report("cnn_lstm", model_probs, labels, frames, all_frames, cfg.threshold));
  reports.push_back(make_report("persistence", persistence, labels, frames, all_frames, cfg.threshold));

  const std::string hash = hex64(cfg.eval_hash());
  const auto dir = cfg.report_dir();
  write_text(dir / "report.csv", report_csv(reports, hash));
  write_text(dir / "frames.csv", frames_csv(reports, hash));
  write_text(dir / "roc.csv", reports[0].roc ? roc_csv(*reports[0].roc, hash) : std::string("threshold,fpr,tpr,config_hash\r\n"));
  write_text(dir / "roc_persistence.csv",
             reports[1].roc ? roc_csv(*reports[1].roc, hash) : std::string("threshold,fpr,tpr,config_hash\r\n"));
  write_text(dir / "predictions.csv", predictions_csv(rows, hash));

  // One outcome map per test frame.
  std::map<FrameKey, std::vector<std::size_t>> by_frame;
  for (std::size_t i = 0; i < frames.size(); ++i) by_frame[frames[i]].push_back(i);
  const std::size_t cell_rows = cfg.synth.rows / kCellPixels, cell_cols = cfg.synth.cols / kCellPixels;
  for (const auto& [key, idx] : by_frame) {
    std::vector<double> p;
    std::vector<int> l;
    std::vector<CellIndex> cells;
    for (std::size_t i : idx) {
      if (rows[i].meta.shift_y != 0 || rows[i].meta.shift_x != 0) continue;
      p.push_back(model_probs[i]);
      l.push_back(labels[i]);
      cells.push_back({rows[i].meta.row, rows[i].meta.col});
    }
    OutcomeMap map = outcome_map(p, l, cells, cfg.threshold, key.event_index, key.frame, cell_rows, cell_cols);
    map.config_hash = hash;
    const std::string stem = "outcome_e" + std::to_string(key.event_index) + "_f" + std::to_string(key.frame);
    write_text(dir / (stem + ".csv"), map.to_csv());
    write_text(dir / (stem + ".svg"), map.to_svg());
  }

  log << "eval: " << labels.size() << " test instances at threshold " << format_number(cfg.threshold) << "\n";
  for (const auto& r : reports) {
    log << "  " << r.method << ": POD " << format_optional(r.scores.pod) << "  FAR " << format_optional(r.scores.far)
        << "  CSI " << format_optional(r.scores.csi) << "  AUC "
        << (r.roc ? format_number(r.roc->auc) : std::string("undefined")) << "\n";
  }
  log << "eval: wrote reports to " << dir.string() << "\n";
  guard.commit();
  return StageStatus::ran;
}

void cmd_all(const ExperimentConfig& cfg, bool force, std::ostream& log) {
  using Stage = StageStatus (*)(const ExperimentConfig&, bool, std::ostream&);
  const std::pair<const char*, Stage> stages[] = {
      {"synth", cmd_synth}, {"prepare", cmd_prepare}, {"train", cmd_train}, {"eval", cmd_eval}};
  for (const auto& [name, fn] : stages) {
    const auto start = std::chrono::steady_clock::now();
    try {
      fn(cfg, force, log);
    } catch (const std::exception& e) {
      throw StageError(name, e.what(), exit_code_for(e));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f", secs);
    log << name << ": " << buf << " s\n";
  }
}

int exit_code_for(const std::exception& e) {
  if (auto* s = dynamic_cast<const StageError*>(&e)) return s->exit_code();
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const StaleOutputError*>(&e)) return 3;
  if (dynamic_cast<const DataError*>(&e)) return 4;
  if (dynamic_cast<const IoError*>(&e)) return 5;
  if (dynamic_cast<const FormatError*>(&e)) return 6;
  if (dynamic_cast<const DivergenceError*>(&e)) return 7;
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return 5;
  return 1;
}

int run_command(const std::string& name, const CommandOptions& opts, std::ostream& log, std::ostream& err) {
  try {
    const ExperimentConfig cfg = resolve_config(opts);
    log << name << ": config hash " << hex64(cfg.hash()) << ", output " << cfg.paths.out << "\n";
    if (name == "synth") {
      cmd_synth(cfg, opts.force, log);
    } else if (name == "prepare") {
      cmd_prepare(cfg, opts.force, log);
    } else if (name == "train") {
      cmd_train(cfg, opts.force, log);
    } else if (name == "eval") {
      cmd_eval(cfg, opts.force, log);
    } else if (name == "all") {
      cmd_all(cfg, opts.force, log);
    } else {
      throw UsageError("unknown command '" + name + "'");
    }
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace nowcast
