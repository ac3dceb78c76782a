// Acceptance run: one PASS/FAIL line per criterion, details indented below.
// Usage: nowcast_acceptance [--work DIR] [--seeds N]

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "nowcast/commands.hpp"
#include "nowcast/error.hpp"
#include "nowcast/sample_io.hpp"
#include "nowcast/verification.hpp"
#include "support/oracles.hpp"

using namespace nowcast;
namespace fs = std::filesystem;

namespace {

// Tolerances and thresholds.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradStep = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr double kAucTolerance = 1e-9;
constexpr double kIdentityTolerance = 1e-12;
constexpr std::size_t kMinLabelChecks = 50000;
constexpr double kCsiMargin = 0.05;
constexpr double kMinAuc = 0.80;
constexpr double kRunMinutes = 30.0;

struct Criterion {
  explicit Criterion(std::string n) : name(std::move(n)) {}

  std::string name;
  bool pass = true;
  std::vector<std::string> details;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    details.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
  void note(const std::string& what) { details.push_back("     " + what); }
};

void print(const Criterion& c) {
  std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << "\n";
  for (const auto& d : c.details) std::cout << "    " << d << "\n";
  std::cout.flush();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

// ---- gradient fidelity ------------------------------------------------------

Criterion gradient_fidelity() {
  Criterion c{"gradient fidelity: tiny model, central differences, max relative error < 1e-4 in every group, < 60 s"};
  const auto t0 = std::chrono::steady_clock::now();
  const auto groups = oracle::model_gradient_check(1, 24, 64, kGradStep);
  const double secs = seconds_since(t0);
  std::size_t checked = 0, screened = 0;
  for (const auto& g : groups) {
    checked += g.checked;
    screened += g.screened;
    c.check(g.checked > 0 && g.max_rel < kGradTolerance,
            g.name + ": " + std::to_string(g.checked) + " entries, max rel err " + fmt("%.3g", g.max_rel));
  }
  c.note(std::to_string(screened) + " of " + std::to_string(checked + screened) +
         " entries skipped because their difference quotient straddled a ReLU/max-pool kink");
  c.check(secs < kGradSeconds, "runtime " + fmt("%.1f", secs) + " s");
  return c;
}

// ---- metric oracles -----------------------------------------------------------

Criterion metric_oracles() {
  Criterion c{"metric oracles: POD/FAR/CSI exact on 1000 confusion matrices, AUC within 1e-9 of pairwise on 100 sets"};
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::uint64_t> count(0, 60);
  std::size_t exact = 0;
  for (int i = 0; i < 1000; ++i) {
    ConfusionMatrix m{count(rng), count(rng), count(rng), count(rng)};
    if (i % 10 == 0) m.tp = 0;
    if (i % 25 == 0) m.fp = 0;
    const auto s = skill_scores(m);
    auto direct = [](std::uint64_t a, std::uint64_t b) -> std::optional<double> {
      if (b == 0) return std::nullopt;
      return static_cast<double>(a) / static_cast<double>(b);
    };
    if (s.pod == direct(m.tp, m.tp + m.fn) && s.far == direct(m.fp, m.tp + m.fp) &&
        s.csi == direct(m.tp, m.tp + m.fn + m.fp)) {
      ++exact;
    }
  }
  c.check(exact == 1000, std::to_string(exact) + "/1000 confusion matrices match direct substitution exactly");

  double worst = 0;
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 20 + static_cast<std::size_t>(u(rng) * 400);
    std::vector<double> p(n);
    std::vector<int> y(n);
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = u(rng) < 0.2 ? 1 : 0;
      p[j] = u(rng) + 0.4 * y[j];
      if (i % 2 == 0) p[j] = std::round(p[j] * 8) / 8;  // ties
    }
    y[0] = 1;
    y[1] = 0;
    worst = std::max(worst, std::abs(roc_auc(p, y).auc - oracle::auc_pairwise(p, y)));
  }
  c.check(worst <= kAucTolerance, "100 score sets, max |AUC - pairwise| = " + fmt("%.3g", worst));
  return c;
}

// ---- pipeline oracles ---------------------------------------------------------

struct LabelTally {
  std::size_t checked = 0, mismatches = 0;
};

void check_labels(const SampleSet& set, std::span<const GridSequence> grids, LabelTally& t) {
  for (const auto& s : set.samples) {
    const auto& m = s.meta;
    const auto& g = grids[m.event_index];
    const auto y0 = static_cast<std::size_t>(m.window_y() + 6), x0 = static_cast<std::size_t>(m.window_x() + 6);
    const int expect = oracle::region_max(g, m.frame + 2, y0, x0) >= 35.0 ? 1 : 0;
    ++t.checked;
    if (m.label != expect) ++t.mismatches;
  }
}

Criterion pipeline_oracles(const ExperimentConfig& base) {
  Criterion c{"pipeline oracles: labels match brute force over >= 50,000 samples, crafted oversampling count, "
              "differencing/normalization identities"};
  // Labels of every record (targets, history, oversampled copies) over many
  // default-sized synthetic events.
  LabelTally tally;
  std::size_t events = 0;
  for (std::uint64_t e = 0; tally.checked < kMinLabelChecks; ++e, ++events) {
    const std::vector<GridSequence> grids{synth_event(base.synth, 9000 + e)};
    const std::vector<EventFields> fields{EventFields(grids[0], 0)};
    const auto norm = fit_normalizer(fields);
    const auto set = materialize(enumerate_instances(fields[0]), fields, norm, Split::train);
    check_labels(oversample_positives(set, e % 2 == 0 ? 1 : 2, fields), grids, tally);
  }
  c.check(tally.mismatches == 0 && tally.checked >= kMinLabelChecks,
          std::to_string(tally.mismatches) + " label mismatches over " + std::to_string(tally.checked) +
              " records from " + std::to_string(events) + " events");

  // 40x40 grid, 6 frames, one 4x4-pixel storm at pixels [13,17): only cell
  // (2,2) is positive and all 8 of its shifted copies stay positive.
  GridSequence g("crafted", 6, kLevels, 40, 40);
  for (std::size_t t = 0; t < 6; ++t) {
    for (std::size_t y = 13; y < 17; ++y) {
      for (std::size_t x = 13; x < 17; ++x) g.at(t, GridVar::R, 8, y, x) = 50.0f;
    }
  }
  const std::vector<EventFields> crafted{EventFields(g, 0)};
  const auto train = materialize(enumerate_instances(crafted[0]), crafted, fit_normalizer(crafted), Split::train);
  for (int k : {1, 2}) {
    const auto out = oversample_positives(train, k, crafted);
    const std::size_t added = out.target_count() - train.target_count();
    c.check(train.positive_count() == 1 && added == 8,
            "K=" + std::to_string(k) + ": " + std::to_string(train.target_count()) + " targets, " +
                std::to_string(train.positive_count()) + " positive, " + std::to_string(added) + " added (expected 8)");
  }

  // dR(t) + R(t-1) == R(t) and normalization endpoints/midpoint/affinity.
  std::mt19937_64 rng(77);
  const auto ev = synth_event(base.synth, 4242);
  double diff_err = 0;
  for (GridVar v : {GridVar::R, GridVar::w, GridVar::pt}) {
    const auto d = time_difference(ev, v);
    for (std::size_t t = 1; t < ev.frames(); ++t) {
      const auto now = ev.volume(t, static_cast<std::size_t>(v)), before = ev.volume(t - 1, static_cast<std::size_t>(v));
      const auto dv = d.at(t);
      for (std::size_t i = 0; i < dv.size(); ++i) {
        diff_err = std::max(diff_err, std::abs(dv[i] + double{before[i]} - double{now[i]}));
      }
    }
  }
  c.check(diff_err <= kIdentityTolerance, "differencing: max |dX(t) + X(t-1) - X(t)| = " + fmt("%.3g", diff_err));
  const std::vector<EventFields> evf{EventFields(ev, 0)};
  const auto norm = fit_normalizer(evf);
  double norm_err = 0;
  std::uniform_real_distribution<double> u(0, 1);
  for (std::size_t v = 0; v < kSampleVariables; ++v) {
    const auto var = static_cast<SampleVar>(v);
    const double lo = norm.min[v], hi = norm.max[v];
    norm_err = std::max(norm_err, std::abs(normalize(lo, norm, var) + 1.0));
    norm_err = std::max(norm_err, std::abs(normalize(hi, norm, var) - 1.0));
    norm_err = std::max(norm_err, std::abs(normalize((lo + hi) / 2, norm, var)));
    for (int i = 0; i < 1000; ++i) {
      const double x = lo + u(rng) * (hi - lo);
      norm_err = std::max(norm_err, std::abs(normalize(x, norm, var) - ((x - lo) / (hi - lo) * 2 - 1)));
    }
  }
  c.check(norm_err <= kIdentityTolerance, "normalization: max deviation from the affine map = " + fmt("%.3g", norm_err));
  return c;
}

// ---- shape contract -----------------------------------------------------------

Criterion shape_contract() {
  Criterion c{"shape contract: 50-dim CNN features, 18->14->12->10->8->4 chain checked at every layer"};
  const ModelConfig cfg;
  NowcastModel model(cfg, 1);
  std::mt19937_64 rng(5);
  c.check(cfg.spatial_chain() == std::vector<std::size_t>{18, 14, 12, 10, 8, 4}, "configured spatial chain");
  std::vector<Shape> trace;
  const Tensor f = model.cnn_forward(
      Tensor::from({3, 120, 18, 18}, oracle::random_values(3 * 120 * 18 * 18, rng)), Mode::infer, &trace);
  c.check(f.shape() == Shape{3, 50}, "batched output " + shape_str(f.shape()));
  const std::vector<Shape> expect{{3, 120, 18, 18}, {3, 80, 14, 14}, {3, 64, 12, 12}, {3, 48, 10, 10},
                                  {3, 32, 8, 8},    {3, 32, 4, 4},    {3, 50}};
  c.check(trace == expect, "per-layer trace has " + std::to_string(trace.size()) + " checked activations");
  const Tensor one = model.cnn_forward(Tensor::zeros({120, 18, 18}), Mode::infer);
  c.check(one.shape() == Shape{50}, "single block output " + shape_str(one.shape()));
  auto rejects = [&](Shape s) {
    try {
      model.cnn_forward(Tensor::zeros(s), Mode::infer);
    } catch (const DimensionError&) {
      return true;
    }
    return false;
  };
  c.check(rejects({1, 120, 17, 18}) && rejects({1, 119, 18, 18}) && rejects({120, 20, 20}),
          "malformed inputs raise DimensionError");
  return c;
}

// ---- end-to-end runs ----------------------------------------------------------

struct RunResult {
  bool ok = false;
  std::string error;
  double minutes = 0;
  std::optional<double> model_csi, persistence_csi, model_auc;
  LabelTally labels;
  bool test_pure = false;
  std::string purity_note;
};

std::optional<double> parse_opt(const std::string& s) {
  if (s == "undefined" || s.empty()) return std::nullopt;
  return std::stod(s);
}

// Positive fraction of the test split recomputed from the raw grids.
double brute_force_test_fraction(const ExperimentConfig& cfg, std::span<const GridSequence> grids) {
  std::size_t pos = 0, n = 0;
  for (std::size_t e = cfg.pipeline.n_train; e < grids.size(); ++e) {
    for (const auto& cell : valid_cells(cfg.synth.rows, cfg.synth.cols)) {
      for (std::size_t t = 3; t + 2 < cfg.synth.frames; ++t) {
        ++n;
        if (oracle::region_max(grids[e], t + 2, cell.row * 6, cell.col * 6) >= 35.0) ++pos;
      }
    }
  }
  return n ? static_cast<double>(pos) / static_cast<double>(n) : 0.0;
}

RunResult run_seed(ExperimentConfig cfg, std::uint64_t seed, const fs::path& out, bool keep_samples) {
  RunResult r;
  cfg.seed = seed;
  cfg.paths.out = out.string();
  fs::remove_all(out);
  fs::create_directories(out);
  std::ofstream log(out / "run.log");
  const auto t0 = std::chrono::steady_clock::now();
  try {
    cmd_all(cfg, false, log);
  } catch (const std::exception& e) {
    r.error = e.what();
    return r;
  }
  r.minutes = seconds_since(t0) / 60.0;
  r.ok = true;

  const auto report = read_csv(cfg.report_dir() / "report.csv");
  for (std::size_t i = 1; i < report.size(); ++i) {
    if (report[i][0] == "cnn_lstm") {
      r.model_csi = parse_opt(report[i][8]);
      r.model_auc = parse_opt(report[i][9]);
    } else if (report[i][0] == "persistence") {
      r.persistence_csi = parse_opt(report[i][8]);
    }
  }

  std::vector<GridSequence> grids;
  for (std::size_t k = 0; k < cfg.events; ++k) grids.push_back(read_grid(event_path(cfg, k).string()));
  for (Split s : {Split::train, Split::validation, Split::test}) {
    const auto set = read_sample_set(sample_path(cfg, s).string());
    check_labels(set, grids, r.labels);
    if (s == Split::test) {
      bool oversampled = false;
      for (const auto& x : set.samples) oversampled |= x.meta.oversampled;
      const double expect = brute_force_test_fraction(cfg, grids);
      r.test_pure = !oversampled && set.positive_fraction() == expect &&
                    slurp(out / "run.log").find("test positive fraction unchanged") != std::string::npos;
      r.purity_note = "test positives " + fmt("%.4f", set.positive_fraction()) + " vs brute force " + fmt("%.4f", expect) +
                      (oversampled ? ", contains oversampled records" : "");
    }
  }
  if (!keep_samples) fs::remove_all(cfg.sample_dir());
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "nowcast_acceptance";
  int seeds = 5;
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string a = argv[i];
    if (a == "--work") work = argv[i + 1];
    if (a == "--seeds") seeds = std::stoi(argv[i + 1]);
  }
  const ExperimentConfig base = ExperimentConfig::load(fs::path(NOWCAST_SOURCE_DIR) / "configs" / "default.yaml");

  std::vector<Criterion> results;
  auto run = [&](Criterion c) {
    print(c);
    results.push_back(std::move(c));
  };
  run(gradient_fidelity());
  run(metric_oracles());
  run(pipeline_oracles(base));
  run(shape_contract());

  Criterion learn{"learnability: model CSI >= persistence CSI + 0.05 and AUC >= 0.80 for >= 4 of 5 seeds, "
                  "each run < 30 min"};
  Criterion purity{"test-set purity: test positive fraction unchanged by preparation"};
  LabelTally run_labels;
  int good = 0;
  std::vector<RunResult> runs;
  for (int s = 1; s <= seeds; ++s) {
    auto r = run_seed(base, static_cast<std::uint64_t>(s), work / ("seed_" + std::to_string(s)), false);
    std::string line = "seed " + std::to_string(s) + ": ";
    if (!r.ok) {
      learn.check(false, line + "run failed: " + r.error);
      purity.check(false, line + "run failed");
      runs.push_back(r);
      continue;
    }
    const bool beat = r.model_csi && r.persistence_csi && *r.model_csi >= *r.persistence_csi + kCsiMargin;
    const bool auc = r.model_auc && *r.model_auc >= kMinAuc;
    const bool fast = r.minutes < kRunMinutes;
    if (beat && auc && fast) ++good;
    auto show = [](const std::optional<double>& v) { return v ? fmt("%.3f", *v) : std::string("undefined"); };
    learn.note(line + "CSI " + show(r.model_csi) + " vs persistence " + show(r.persistence_csi) + ", AUC " +
               show(r.model_auc) + ", " + fmt("%.1f", r.minutes) + " min" + (beat && auc && fast ? "" : "  (miss)"));
    if (!fast) learn.check(false, line + "run exceeded 30 min");
    purity.check(r.test_pure, line + r.purity_note);
    run_labels.checked += r.labels.checked;
    run_labels.mismatches += r.labels.mismatches;
    runs.push_back(r);
  }
  learn.check(good >= 4 * seeds / 5 && seeds > 0, std::to_string(good) + "/" + std::to_string(seeds) + " seeds meet both bars");
  purity.check(run_labels.mismatches == 0, std::to_string(run_labels.mismatches) + " label mismatches over " +
                                               std::to_string(run_labels.checked) + " records written by prepare");
  run(learn);

  Criterion det{"determinism: two runs with the same config give byte-identical model and metric CSVs"};
  if (seeds >= 1 && runs[0].ok) {
    const auto a = work / "seed_1", b = work / "seed_1_again";
    auto rerun = run_seed(base, 1, b, false);
    if (!rerun.ok) {
      det.check(false, "rerun failed: " + rerun.error);
    } else {
      ExperimentConfig ca = base, cb = base;
      ca.paths.out = a.string();
      cb.paths.out = b.string();
      std::vector<std::pair<fs::path, fs::path>> files{{ca.model_path(), cb.model_path()},
                                                       {training_log_path(ca), training_log_path(cb)}};
      for (const auto& e : fs::directory_iterator(ca.report_dir())) {
        if (e.path().extension() == ".csv") files.push_back({e.path(), cb.report_dir() / e.path().filename()});
      }
      std::size_t same = 0;
      for (const auto& [x, y] : files) {
        if (fs::exists(y) && slurp(x) == slurp(y)) {
          ++same;
        } else {
          det.check(false, "differs: " + x.filename().string());
        }
      }
      det.check(same == files.size() && files.size() > 2,
                std::to_string(same) + "/" + std::to_string(files.size()) + " files byte-identical");
    }
  } else {
    det.check(false, "no completed seed-1 run to compare");
  }
  run(det);
  run(purity);

  int failed = 0;
  for (const auto& c : results) failed += c.pass ? 0 : 1;
  std::cout << (failed ? "acceptance: " + std::to_string(failed) + " criteria failed" : std::string("acceptance: all criteria passed"))
            << "\n";
  fs::remove_all(work);
  return failed ? 1 : 0;
}
