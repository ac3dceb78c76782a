#pragma once

// Categorical verification of binary nowcasts: confusion counts, POD / FAR /
// CSI, ROC and AUC, a persistence reference forecast and per-cell outcome maps.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nowcast/sample_pipeline.hpp"

namespace nowcast {

struct ConfusionMatrix {
  std::uint64_t tp = 0, fn = 0, fp = 0, tn = 0;

  std::uint64_t total() const { return tp + fn + fp + tn; }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    tp += o.tp;
    fn += o.fn;
    fp += o.fp;
    tn += o.tn;
    return *this;
  }
  bool operator==(const ConfusionMatrix&) const = default;
};

/// A prediction counts as positive iff probability >= threshold.
ConfusionMatrix confusion(std::span<const double> preds, std::span<const int> labels, double threshold);

/// Scores with a zero denominator are empty rather than NaN or 0.
struct SkillScores {
  std::optional<double> pod;  // TP / (TP + FN)
  std::optional<double> far;  // FP / (TP + FP)
  std::optional<double> csi;  // TP / (TP + FN + FP)
};

SkillScores skill_scores(const ConfusionMatrix& m);

struct RocPoint {
  double threshold;  // +inf for the leading (0, 0) sentinel
  double fpr;
  double tpr;
};

struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0;
};

/// ROC over every distinct prediction value (descending) after a leading
/// sentinel; AUC by the trapezoid rule, which equals the Mann-Whitney
/// statistic with ties counted one half. Throws UndefinedAucError unless both
/// classes are present.
RocCurve roc_auc(std::span<const double> preds, std::span<const int> labels);

/// 1 when the cell is already at or above 35 dBZ at forecast time, else 0,
/// for each target record of the set in record order.
std::vector<double> persistence_baseline(const SampleSet& set);

enum class Outcome { hit, miss, false_alarm, correct_null };
const char* outcome_name(Outcome o);

struct CellOutcome {
  CellIndex cell;
  Outcome outcome;
};

struct OutcomeMap {
  std::uint32_t event_index = 0;
  std::uint32_t frame = 0;
  std::size_t cell_rows = 0;  // extent of the cell lattice for drawing
  std::size_t cell_cols = 0;
  std::vector<CellOutcome> cells;  // sorted by (row, col)
  /// Written into the CSV and SVG when non-empty.
  std::string config_hash;

  ConfusionMatrix counts() const;
  std::string to_csv() const;
  /// Hits black, false alarms red, misses white with an outline.
  std::string to_svg(double cell_px = 12.0) const;
};

/// All inputs belong to one frame. Throws DataError on duplicate cells or
/// length mismatch.
OutcomeMap outcome_map(std::span<const double> preds, std::span<const int> labels, std::span<const CellIndex> cells,
                       double threshold, std::uint32_t event_index, std::uint32_t frame, std::size_t cell_rows,
                       std::size_t cell_cols);

struct FrameKey {
  std::uint32_t event_index = 0;
  std::uint32_t frame = 0;
  auto operator<=>(const FrameKey&) const = default;
};

struct FrameSkill {
  FrameKey key;
  ConfusionMatrix matrix;
  SkillScores scores;
};

/// Skill per frame in chronological (event, frame) order. Frames listed in
/// all_frames but without samples are reported with undefined scores.
std::vector<FrameSkill> per_frame_series(std::span<const double> preds, std::span<const int> labels,
                                         std::span<const FrameKey> sample_frames, double threshold,
                                         std::span<const FrameKey> all_frames = {});

}  // namespace nowcast
