#include "nowcast/verification.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "nowcast/error.hpp"

namespace nowcast {

namespace {

void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw DataError(std::string(what) + ": " + std::to_string(a) + " predictions vs " + std::to_string(b) + " labels");
  }
}

void check_label(int label, std::size_t i) {
  if (label != 0 && label != 1) {
    throw DataError("label " + std::to_string(label) + " at index " + std::to_string(i) + " is not 0 or 1");
  }
}

}  // namespace

ConfusionMatrix confusion(std::span<const double> preds, std::span<const int> labels, double threshold) {
  check_lengths(preds.size(), labels.size(), "confusion");
  ConfusionMatrix m;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    check_label(labels[i], i);
    const bool predicted = preds[i] >= threshold;
    if (labels[i] == 1) {
      ++(predicted ? m.tp : m.fn);
    } else {
      ++(predicted ? m.fp : m.tn);
    }
  }
  return m;
}

SkillScores skill_scores(const ConfusionMatrix& m) {
  auto ratio = [](std::uint64_t num, std::uint64_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  return {ratio(m.tp, m.tp + m.fn), ratio(m.fp, m.tp + m.fp), ratio(m.tp, m.tp + m.fn + m.fp)};
}

RocCurve roc_auc(std::span<const double> preds, std::span<const int> labels) {
  check_lengths(preds.size(), labels.size(), "roc_auc");
  std::uint64_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    check_label(labels[i], i);
    ++(labels[i] == 1 ? pos : neg);
  }
  if (pos == 0 || neg == 0) throw UndefinedAucError("AUC needs both positive and negative labels");

  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return preds[a] > preds[b]; });

  RocCurve roc;
  roc.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::uint64_t tp = 0, fp = 0;
  const double np = static_cast<double>(pos), nn = static_cast<double>(neg);
  for (std::size_t i = 0; i < order.size();) {
    const double v = preds[order[i]];
    // Every sample tied at v crosses the threshold together.
    for (; i < order.size() && preds[order[i]] == v; ++i) ++(labels[order[i]] == 1 ? tp : fp);
    const RocPoint& prev = roc.points.back();
    const RocPoint next{v, static_cast<double>(fp) / nn, static_cast<double>(tp) / np};
    roc.auc += (next.fpr - prev.fpr) * (next.tpr + prev.tpr) / 2.0;
    roc.points.push_back(next);
  }
  return roc;
}

std::vector<double> persistence_baseline(const SampleSet& set) {
  std::vector<double> out;
  for (const auto& s : set.samples) {
    if (s.meta.target) out.push_back(s.meta.currently_stormy ? 1.0 : 0.0);
  }
  return out;
}

const char* outcome_name(Outcome o) {
  switch (o) {
    case Outcome::hit:
      return "hit";
    case Outcome::miss:
      return "miss";
    case Outcome::false_alarm:
      return "false_alarm";
    case Outcome::correct_null:
      return "correct_null";
  }
  return "unknown";
}

ConfusionMatrix OutcomeMap::counts() const {
  ConfusionMatrix m;
  for (const auto& c : cells) {
    switch (c.outcome) {
      case Outcome::hit:
        ++m.tp;
        break;
      case Outcome::miss:
        ++m.fn;
        break;
      case Outcome::false_alarm:
        ++m.fp;
        break;
      case Outcome::correct_null:
        ++m.tn;
        break;
    }
  }
  return m;
}

std::string OutcomeMap::to_csv() const {
  std::ostringstream os;
  const bool tagged = !config_hash.empty();
  os << "event,frame,row,col,outcome" << (tagged ? ",config_hash" : "") << "\r\n";
  for (const auto& c : cells) {
    os << event_index << ',' << frame << ',' << c.cell.row << ',' << c.cell.col << ',' << outcome_name(c.outcome);
    if (tagged) os << ',' << config_hash;
    os << "\r\n";
  }
  return os.str();
}

std::string OutcomeMap::to_svg(double cell_px) const {
  std::ostringstream os;
  const double w = static_cast<double>(cell_cols) * cell_px, h = static_cast<double>(cell_rows) * cell_px;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
     << ' ' << h << "\">\n";
  os << "<title>event " << event_index << " frame " << frame << "</title>\n";
  if (!config_hash.empty()) os << "<desc>config_hash " << config_hash << "</desc>\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << w << "\" height=\"" << h << "\" fill=\"#d9d9d9\"/>\n";
  for (const auto& c : cells) {
    const double x = static_cast<double>(c.cell.col) * cell_px, y = static_cast<double>(c.cell.row) * cell_px;
    const char* fill = "#f2f2f2";
    const char* stroke = "none";
    switch (c.outcome) {
      case Outcome::hit:
        fill = "#000000";
        break;
      case Outcome::false_alarm:
        fill = "#d62728";
        break;
      case Outcome::miss:
        fill = "#ffffff";
        stroke = "#000000";
        break;
      case Outcome::correct_null:
        break;
    }
    os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell_px << "\" height=\"" << cell_px << "\" fill=\""
       << fill << "\" stroke=\"" << stroke << "\" class=\"" << outcome_name(c.outcome) << "\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

OutcomeMap outcome_map(std::span<const double> preds, std::span<const int> labels, std::span<const CellIndex> cells,
                       double threshold, std::uint32_t event_index, std::uint32_t frame, std::size_t cell_rows,
                       std::size_t cell_cols) {
  check_lengths(preds.size(), labels.size(), "outcome_map");
  if (cells.size() != preds.size()) throw DataError("outcome_map: cell list length differs from predictions");
  OutcomeMap map;
  map.event_index = event_index;
  map.frame = frame;
  map.cell_rows = cell_rows;
  map.cell_cols = cell_cols;
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    check_label(labels[i], i);
    if (!seen.insert({cells[i].row, cells[i].col}).second) {
      throw DataError("outcome_map: duplicate cell (" + std::to_string(cells[i].row) + "," + std::to_string(cells[i].col) +
                      ")");
    }
    const bool p = preds[i] >= threshold;
    const Outcome o = labels[i] == 1 ? (p ? Outcome::hit : Outcome::miss) : (p ? Outcome::false_alarm : Outcome::correct_null);
    map.cells.push_back({cells[i], o});
    map.cell_rows = std::max(map.cell_rows, cells[i].row + 1);
    map.cell_cols = std::max(map.cell_cols, cells[i].col + 1);
  }
  std::sort(map.cells.begin(), map.cells.end(), [](const CellOutcome& a, const CellOutcome& b) {
    return std::tie(a.cell.row, a.cell.col) < std::tie(b.cell.row, b.cell.col);
  });
  return map;
}

std::vector<FrameSkill> per_frame_series(std::span<const double> preds, std::span<const int> labels,
                                         std::span<const FrameKey> sample_frames, double threshold,
                                         std::span<const FrameKey> all_frames) {
  check_lengths(preds.size(), labels.size(), "per_frame_series");
  if (sample_frames.size() != preds.size()) throw DataError("per_frame_series: frame list length differs from predictions");
  std::map<FrameKey, ConfusionMatrix> by_frame;
  for (const auto& f : all_frames) by_frame[f];
  for (std::size_t i = 0; i < preds.size(); ++i) {
    by_frame[sample_frames[i]] += confusion(preds.subspan(i, 1), labels.subspan(i, 1), threshold);
  }
  std::vector<FrameSkill> out;
  for (const auto& [key, m] : by_frame) out.push_back({key, m, skill_scores(m)});
  return out;
}

}  // namespace nowcast
