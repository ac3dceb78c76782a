#pragma once

// CSV renderings of verification results. Every file carries a config_hash
// column; undefined scores are written as "undefined".

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nowcast/trainer.hpp"
#include "nowcast/verification.hpp"

namespace nowcast {

struct SkillReport {
  std::string method;
  double threshold = 0.5;
  ConfusionMatrix matrix;
  SkillScores scores;
  std::optional<RocCurve> roc;  // empty when the labels hold one class
  /// Set when the ROC is degenerate (binary predictions).
  std::string auc_caveat;
  std::vector<FrameSkill> frames;
};

/// Scores, ROC and per-frame series for one method over one sample set.
SkillReport make_report(std::string method, std::span<const double> preds, std::span<const int> labels,
                        std::span<const FrameKey> sample_frames, std::span<const FrameKey> all_frames,
                        double threshold);

/// Shortest decimal that reads back to the same double.
std::string format_number(double v);
std::string format_optional(const std::optional<double>& v);

std::string report_csv(std::span<const SkillReport> reports, const std::string& config_hash);
std::string frames_csv(std::span<const SkillReport> reports, const std::string& config_hash);
std::string roc_csv(const RocCurve& roc, const std::string& config_hash);
std::string training_log_csv(std::span<const EpochLog> log, const std::string& config_hash);

struct PredictionRow {
  SampleMeta meta;
  double model = 0;
  double persistence = 0;
};
std::string predictions_csv(std::span<const PredictionRow> rows, const std::string& config_hash);

}  // namespace nowcast
