#include "nowcast/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "nowcast/error.hpp"

namespace nowcast {

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string format_optional(const std::optional<double>& v) { return v ? format_number(*v) : "undefined"; }

SkillReport make_report(std::string method, std::span<const double> preds, std::span<const int> labels,
                        std::span<const FrameKey> sample_frames, std::span<const FrameKey> all_frames,
                        double threshold) {
  SkillReport r;
  r.method = std::move(method);
  r.threshold = threshold;
  r.matrix = confusion(preds, labels, threshold);
  r.scores = skill_scores(r.matrix);
  try {
    r.roc = roc_auc(preds, labels);
  } catch (const UndefinedAucError&) {
    r.roc.reset();
  }
  if (r.roc && std::all_of(preds.begin(), preds.end(), [](double p) { return p == 0.0 || p == 1.0; })) {
    r.auc_caveat = "binary_forecast_two_point_roc";
  }
  r.frames = per_frame_series(preds, labels, sample_frames, threshold, all_frames);
  return r;
}

std::string report_csv(std::span<const SkillReport> reports, const std::string& config_hash) {
  std::ostringstream os;
  os << "method,threshold,tp,fn,fp,tn,pod,far,csi,auc,auc_caveat,config_hash\r\n";
  for (const auto& r : reports) {
    const auto& m = r.matrix;
    os << r.method << ',' << format_number(r.threshold) << ',' << m.tp << ',' << m.fn << ',' << m.fp << ',' << m.tn << ','
       << format_optional(r.scores.pod) << ',' << format_optional(r.scores.far) << ','
       << format_optional(r.scores.csi) << ',' << (r.roc ? format_number(r.roc->auc) : "undefined") << ','
       << r.auc_caveat << ',' << config_hash << "\r\n";
  }
  return os.str();
}

std::string frames_csv(std::span<const SkillReport> reports, const std::string& config_hash) {
  std::ostringstream os;
  os << "method,event,frame,tp,fn,fp,tn,csi,pod,far,config_hash\r\n";
  for (const auto& r : reports) {
    for (const auto& f : r.frames) {
      os << r.method << ',' << f.key.event_index << ',' << f.key.frame << ',' << f.matrix.tp << ',' << f.matrix.fn
         << ',' << f.matrix.fp << ',' << f.matrix.tn << ',' << format_optional(f.scores.csi) << ','
         << format_optional(f.scores.pod) << ',' << format_optional(f.scores.far) << ',' << config_hash << "\r\n";
    }
  }
  return os.str();
}

std::string roc_csv(const RocCurve& roc, const std::string& config_hash) {
  std::ostringstream os;
  os << "threshold,fpr,tpr,config_hash\r\n";
  for (const auto& p : roc.points) {
    os << (std::isinf(p.threshold) ? std::string("inf") : format_number(p.threshold)) << ',' << format_number(p.fpr)
       << ',' << format_number(p.tpr) << ',' << config_hash << "\r\n";
  }
  return os.str();
}

std::string training_log_csv(std::span<const EpochLog> log, const std::string& config_hash) {
  std::ostringstream os;
  os << "epoch,loss,val_csi,config_hash\r\n";
  for (const auto& e : log) {
    os << e.epoch << ',' << format_number(e.loss) << ',' << format_optional(e.val_csi) << ',' << config_hash << "\r\n";
  }
  return os.str();
}

std::string predictions_csv(std::span<const PredictionRow> rows, const std::string& config_hash) {
  std::ostringstream os;
  os << "event,frame,row,col,label,model,persistence,config_hash\r\n";
  for (const auto& r : rows) {
    os << r.meta.event_index << ',' << r.meta.frame << ',' << r.meta.row << ',' << r.meta.col << ','
       << static_cast<int>(r.meta.label) << ',' << format_number(r.model) << ',' << format_number(r.persistence) << ','
       << config_hash << "\r\n";
  }
  return os.str();
}

}  // namespace nowcast
