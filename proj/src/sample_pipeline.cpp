#include "nowcast/sample_pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <tuple>

#include "nowcast/binary_io.hpp"
#include "nowcast/error.hpp"

namespace nowcast {

// ---- time differencing ----------------------------------------------------

std::span<const double> TimeDifference::at(std::size_t t) const {
  if (t < first_frame || t >= frames()) throw InsufficientHistoryError("no time difference at frame " + std::to_string(t));
  return std::span<const double>(data_).subspan((t - 1) * voxels_, voxels_);
}

std::span<double> TimeDifference::at(std::size_t t) {
  if (t < first_frame || t >= frames()) throw InsufficientHistoryError("no time difference at frame " + std::to_string(t));
  return std::span<double>(data_).subspan((t - 1) * voxels_, voxels_);
}

TimeDifference time_difference(const GridSequence& seq, GridVar var) {
  if (seq.frames() < 2) {
    throw InsufficientHistoryError("time difference needs at least two frames, " + seq.event_id() + " has " +
                                   std::to_string(seq.frames()));
  }
  const std::size_t v = static_cast<std::size_t>(var);
  const std::size_t voxels = seq.levels() * seq.rows() * seq.cols();
  TimeDifference diff(seq.frames(), voxels);
  for (std::size_t t = 1; t < seq.frames(); ++t) {
    const auto now = seq.volume(t, v);
    const auto before = seq.volume(t - 1, v);
    auto out = diff.at(t);
    for (std::size_t i = 0; i < voxels; ++i) out[i] = static_cast<double>(now[i]) - static_cast<double>(before[i]);
  }
  return diff;
}

EventFields::EventFields(const GridSequence& grid, std::uint32_t event_index)
    : grid_(&grid),
      event_index_(event_index),
      r_(grid.variable_index("R")),
      w_(grid.variable_index("w")),
      pt_(grid.variable_index("pt")) {
  if (grid.levels() != kLevels) {
    throw DimensionError("event " + grid.event_id() + " has " + std::to_string(grid.levels()) + " levels, need " +
                         std::to_string(kLevels));
  }
  diffs_[0] = time_difference(grid, GridVar::R);
  diffs_[1] = time_difference(grid, GridVar::w);
  diffs_[2] = time_difference(grid, GridVar::pt);
}

double EventFields::value(std::size_t t, SampleVar var, std::size_t z, std::size_t y, std::size_t x) const {
  const std::size_t voxel = (z * grid_->rows() + y) * grid_->cols() + x;
  switch (var) {
    case SampleVar::R:
      return grid_->at(t, r_, z, y, x);
    case SampleVar::w:
      return grid_->at(t, w_, z, y, x);
    case SampleVar::pt:
      return grid_->at(t, pt_, z, y, x);
    case SampleVar::dR:
      return diffs_[0].at(t)[voxel];
    case SampleVar::dw:
      return diffs_[1].at(t)[voxel];
    case SampleVar::dpt:
      return diffs_[2].at(t)[voxel];
  }
  return 0.0;
}

// ---- normalization --------------------------------------------------------

double Normalizer::span(std::size_t var) const { return std::max(max[var] - min[var], kMinSpan); }

std::uint64_t Normalizer::fingerprint() const {
  std::uint64_t h = bin::fnv1a("normalizer");
  for (std::size_t v = 0; v < kSampleVariables; ++v) {
    h = bin::fnv1a(names[v], h);
    for (double d : {min[v], max[v]}) {
      const auto bits = std::bit_cast<std::uint64_t>(d);
      h = bin::fnv1a(std::string_view(reinterpret_cast<const char*>(&bits), sizeof bits), h);
    }
  }
  return h;
}

Normalizer fit_normalizer(std::span<const EventFields> events) {
  if (events.empty()) throw DataError("fit_normalizer: no training events");
  Normalizer norm;
  norm.min.fill(std::numeric_limits<double>::infinity());
  norm.max.fill(-std::numeric_limits<double>::infinity());

  auto absorb = [&](std::size_t var, double x) {
    norm.min[var] = std::min(norm.min[var], x);
    norm.max[var] = std::max(norm.max[var], x);
  };
  for (const auto& ev : events) {
    const auto& g = ev.grid();
    const std::pair<SampleVar, std::size_t> raw[] = {{SampleVar::R, g.variable_index("R")},
                                                     {SampleVar::w, g.variable_index("w")},
                                                     {SampleVar::pt, g.variable_index("pt")}};
    for (std::size_t t = 0; t < g.frames(); ++t) {
      for (auto [var, idx] : raw) {
        for (float x : g.volume(t, idx)) absorb(static_cast<std::size_t>(var), x);
      }
    }
    const SampleVar diffs[] = {SampleVar::dR, SampleVar::dw, SampleVar::dpt};
    for (std::size_t t = 1; t < g.frames(); ++t) {
      for (SampleVar var : diffs) {
        for (std::size_t z = 0; z < g.levels(); ++z) {
          for (std::size_t y = 0; y < g.rows(); ++y) {
            for (std::size_t x = 0; x < g.cols(); ++x) absorb(static_cast<std::size_t>(var), ev.value(t, var, z, y, x));
          }
        }
      }
    }
  }
  for (std::size_t v = 0; v < kSampleVariables; ++v) {
    if (!std::isfinite(norm.min[v]) || !std::isfinite(norm.max[v])) {
      throw DataError("fit_normalizer: no finite data for variable " + norm.names[v]);
    }
  }
  return norm;
}

double normalize(double x, const Normalizer& norm, SampleVar var) {
  const std::size_t v = static_cast<std::size_t>(var);
  const double y = (x - norm.min[v]) / norm.span(v) * 2.0 - 1.0;
  return std::clamp(y, -Normalizer::kClamp, Normalizer::kClamp);
}

// ---- cells and labels -----------------------------------------------------

std::vector<CellIndex> valid_cells(std::size_t rows, std::size_t cols) {
  std::vector<CellIndex> cells;
  for (std::size_t r = 1; r * kCellPixels + 2 * kCellPixels <= rows; ++r) {
    for (std::size_t c = 1; c * kCellPixels + 2 * kCellPixels <= cols; ++c) cells.push_back({r, c});
  }
  return cells;
}

double cell_composite_max(const GridSequence& grid, std::size_t t, std::size_t y0, std::size_t x0) {
  if (t >= grid.frames()) throw InsufficientHistoryError("frame " + std::to_string(t) + " does not exist");
  if (y0 + kCellPixels > grid.rows() || x0 + kCellPixels > grid.cols()) {
    throw DimensionError("cell region at (" + std::to_string(y0) + "," + std::to_string(x0) + ") leaves the grid");
  }
  const std::size_t r = grid.variable_index("R");
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t z = 0; z < grid.levels(); ++z) {
    for (std::size_t y = y0; y < y0 + kCellPixels; ++y) {
      for (std::size_t x = x0; x < x0 + kCellPixels; ++x) best = std::max(best, double{grid.at(t, r, z, y, x)});
    }
  }
  return best;
}

int label_cell(const GridSequence& grid, std::size_t t, std::size_t y0, std::size_t x0) {
  return cell_composite_max(grid, t, y0, x0) >= kStormThresholdDbz ? 1 : 0;
}

std::uint32_t SampleMeta::pack_flags() const {
  return (oversampled ? 1u : 0u) | (target ? 2u : 0u) | (currently_stormy ? 4u : 0u) |
         (static_cast<std::uint32_t>(static_cast<std::uint8_t>(shift_y)) << 8) |
         (static_cast<std::uint32_t>(static_cast<std::uint8_t>(shift_x)) << 16);
}

void SampleMeta::unpack_flags(std::uint32_t flags) {
  oversampled = flags & 1u;
  target = flags & 2u;
  currently_stormy = flags & 4u;
  shift_y = static_cast<std::int8_t>(static_cast<std::uint8_t>(flags >> 8));
  shift_x = static_cast<std::int8_t>(static_cast<std::uint8_t>(flags >> 16));
}

std::vector<float> extract_block(const EventFields& ev, const Normalizer& norm, std::size_t t, std::size_t wy,
                                 std::size_t wx) {
  const auto& g = ev.grid();
  if (t < 1 || t >= g.frames()) throw InsufficientHistoryError("block at frame " + std::to_string(t) + " needs frame t-1");
  if (wy + kWindowPixels > g.rows() || wx + kWindowPixels > g.cols()) {
    throw DimensionError("window at (" + std::to_string(wy) + "," + std::to_string(wx) + ") leaves the grid");
  }
  std::vector<float> block(kBlockValues);
  for (std::size_t v = 0; v < kSampleVariables; ++v) {
    const auto var = static_cast<SampleVar>(v);
    for (std::size_t y = 0; y < kWindowPixels; ++y) {
      for (std::size_t x = 0; x < kWindowPixels; ++x) {
        for (std::size_t z = 0; z < kLevels; ++z) {
          block[block_index(v, y, x, z)] = static_cast<float>(normalize(ev.value(t, var, z, wy + y, wx + x), norm, var));
        }
      }
    }
  }
  return block;
}

namespace {

// Window origin for a cell and shift, or nullopt when it leaves the grid.
std::optional<std::pair<std::size_t, std::size_t>> window_origin(const GridSequence& g, CellIndex cell, int sy,
                                                                 int sx) {
  const auto wy = static_cast<std::int64_t>(cell.row * kCellPixels) - static_cast<std::int64_t>(kCellPixels) + sy;
  const auto wx = static_cast<std::int64_t>(cell.col * kCellPixels) - static_cast<std::int64_t>(kCellPixels) + sx;
  if (wy < 0 || wx < 0) return std::nullopt;
  if (wy + static_cast<std::int64_t>(kWindowPixels) > static_cast<std::int64_t>(g.rows())) return std::nullopt;
  if (wx + static_cast<std::int64_t>(kWindowPixels) > static_cast<std::int64_t>(g.cols())) return std::nullopt;
  return std::make_pair(static_cast<std::size_t>(wy), static_cast<std::size_t>(wx));
}

// Builds the record at frame t without checking the history requirement.
std::optional<CellSample> make_record(const EventFields& ev, const Normalizer& norm, std::size_t t, CellIndex cell,
                                      int sy, int sx) {
  const auto& g = ev.grid();
  if (t + kLabelLeadFrames >= g.frames()) {
    throw InsufficientHistoryError("label frame " + std::to_string(t + kLabelLeadFrames) + " does not exist in " +
                                   g.event_id());
  }
  const auto origin = window_origin(g, cell, sy, sx);
  if (!origin) return std::nullopt;
  const auto [wy, wx] = *origin;
  CellSample s;
  s.meta.event_index = ev.event_index();
  s.meta.frame = static_cast<std::uint32_t>(t);
  s.meta.row = static_cast<std::uint32_t>(cell.row);
  s.meta.col = static_cast<std::uint32_t>(cell.col);
  s.meta.shift_y = static_cast<std::int8_t>(sy);
  s.meta.shift_x = static_cast<std::int8_t>(sx);
  s.meta.label = static_cast<std::uint8_t>(label_cell(g, t + kLabelLeadFrames, wy + kCellPixels, wx + kCellPixels));
  s.meta.currently_stormy = label_cell(g, t, wy + kCellPixels, wx + kCellPixels) == 1;
  s.values = extract_block(ev, norm, t, wy, wx);
  return s;
}

const EventFields& find_event(std::span<const EventFields> events, std::uint32_t index) {
  for (const auto& ev : events) {
    if (ev.event_index() == index) return ev;
  }
  throw DataError("event index " + std::to_string(index) + " is not available");
}

using RecordKey = std::tuple<std::uint32_t, std::uint32_t, std::uint32_t, int, int, std::uint32_t>;

RecordKey record_key(const SampleMeta& m) {
  return {m.event_index, m.row, m.col, m.shift_y, m.shift_x, m.frame};
}

// Accumulates records, sharing history between instances of the same track.
class SetBuilder {
 public:
  explicit SetBuilder(SampleSet set) : set_(std::move(set)) {
    for (std::size_t i = 0; i < set_.samples.size(); ++i) index_[record_key(set_.samples[i].meta)] = i;
  }

  void add(const InstanceKey& key, std::span<const EventFields> events) {
    const auto& ev = find_event(events, key.event_index);
    if (key.frame < kHistorySteps || key.frame + kLabelLeadFrames >= ev.frames()) {
      throw InsufficientHistoryError("instance at frame " + std::to_string(key.frame) + " of " + ev.grid().event_id() +
                                     " needs frames t-3 .. t+2");
    }
    for (std::size_t back = kHistorySteps; back-- > 0;) {
      const std::uint32_t t = key.frame - static_cast<std::uint32_t>(back);
      const RecordKey rk{key.event_index, static_cast<std::uint32_t>(key.cell.row),
                         static_cast<std::uint32_t>(key.cell.col), key.shift_y, key.shift_x, t};
      auto it = index_.find(rk);
      if (it == index_.end()) {
        auto rec = make_record(ev, set_.normalizer, t, key.cell, key.shift_y, key.shift_x);
        if (!rec) throw DimensionError("instance window leaves the grid");
        rec->meta.oversampled = key.oversampled;
        it = index_.emplace(rk, set_.samples.size()).first;
        set_.samples.push_back(std::move(*rec));
      }
      if (back == 0) set_.samples[it->second].meta.target = true;
    }
  }

  SampleSet take() { return std::move(set_); }

 private:
  SampleSet set_;
  std::map<RecordKey, std::size_t> index_;
};

std::vector<EventRef> event_refs(std::span<const EventFields> events, std::span<const InstanceKey> keys) {
  std::vector<EventRef> refs;
  for (const auto& ev : events) {
    const bool used = std::any_of(keys.begin(), keys.end(), [&](const auto& k) { return k.event_index == ev.event_index(); });
    if (used) refs.push_back({ev.event_index(), ev.grid().event_id()});
  }
  return refs;
}

}  // namespace

std::optional<CellSample> assemble_sample(const EventFields& ev, const Normalizer& norm, std::size_t t, CellIndex cell,
                                          int shift_y, int shift_x) {
  if (t < kHistorySteps || t + kLabelLeadFrames >= ev.frames()) {
    throw InsufficientHistoryError("sample at frame " + std::to_string(t) + " of " + ev.grid().event_id() +
                                   " needs frames t-3 .. t+2 (have " + std::to_string(ev.frames()) + ")");
  }
  auto rec = make_record(ev, norm, t, cell, shift_y, shift_x);
  if (rec) rec->meta.target = true;
  return rec;
}

// ---- sample sets ----------------------------------------------------------

const char* split_name(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::validation:
      return "validation";
    case Split::test:
      return "test";
  }
  return "unknown";
}

std::size_t SampleSet::target_count() const {
  return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(), [](const auto& s) { return s.meta.target; }));
}

std::size_t SampleSet::positive_count() const {
  return static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [](const auto& s) { return s.meta.target && s.meta.label == 1; }));
}

double SampleSet::positive_fraction() const {
  const std::size_t n = target_count();
  return n == 0 ? 0.0 : static_cast<double>(positive_count()) / static_cast<double>(n);
}

std::vector<Instance> index_instances(const SampleSet& set) {
  std::map<RecordKey, std::size_t> index;
  for (std::size_t i = 0; i < set.samples.size(); ++i) index[record_key(set.samples[i].meta)] = i;

  std::vector<Instance> out;
  for (std::size_t i = 0; i < set.samples.size(); ++i) {
    const auto& m = set.samples[i].meta;
    if (!m.target) continue;
    Instance inst;
    inst.target = i;
    for (std::size_t step = 0; step < kHistorySteps; ++step) {
      const std::size_t back = kHistorySteps - 1 - step;
      if (m.frame < back) throw DataError("target at frame " + std::to_string(m.frame) + " has no history");
      auto key = record_key(m);
      std::get<5>(key) = m.frame - static_cast<std::uint32_t>(back);
      auto it = index.find(key);
      if (it == index.end()) {
        throw DataError("history record for frame " + std::to_string(std::get<5>(key)) + " of cell (" +
                        std::to_string(m.row) + "," + std::to_string(m.col) + ") is missing");
      }
      inst.steps[step] = it->second;
    }
    out.push_back(inst);
  }
  return out;
}

SampleSet materialize(std::span<const InstanceKey> keys, std::span<const EventFields> events, const Normalizer& norm,
                      Split split) {
  SampleSet base;
  base.split = split;
  base.normalizer = norm;
  SetBuilder builder(std::move(base));
  for (const auto& k : keys) builder.add(k, events);
  auto set = builder.take();
  set.events = event_refs(events, keys);
  return set;
}

EventSplit split_events(std::size_t event_count, std::size_t n_train, std::size_t n_test) {
  if (n_train + n_test != event_count) {
    throw ConfigError("split: " + std::to_string(n_train) + " train + " + std::to_string(n_test) +
                      " test events != " + std::to_string(event_count) + " available");
  }
  if (n_train == 0 || n_test == 0) throw ConfigError("split: need at least one train and one test event");
  EventSplit s;
  for (std::size_t i = 0; i < event_count; ++i) (i < n_train ? s.train : s.test).push_back(i);
  return s;
}

std::vector<InstanceKey> enumerate_instances(const EventFields& ev) {
  std::vector<InstanceKey> keys;
  const auto cells = valid_cells(ev.grid().rows(), ev.grid().cols());
  if (ev.frames() < kHistorySteps + kLabelLeadFrames + 1) return keys;
  for (const auto& cell : cells) {
    for (std::size_t t = kHistorySteps; t + kLabelLeadFrames < ev.frames(); ++t) {
      keys.push_back({ev.event_index(), static_cast<std::uint32_t>(t), cell});
    }
  }
  return keys;
}

PreparedSplits build_splits(std::span<const GridSequence> grids, const PipelineOptions& opts) {
  if (!(opts.validation_fraction >= 0 && opts.validation_fraction < 1)) {
    throw ConfigError("validation fraction must lie in [0, 1)");
  }
  const auto split = split_events(grids.size(), opts.n_train, opts.n_test);
  std::vector<EventFields> fields;
  fields.reserve(grids.size());
  for (std::size_t i = 0; i < grids.size(); ++i) fields.emplace_back(grids[i], static_cast<std::uint32_t>(i));

  // Splits are contiguous in input order.
  const std::span<const EventFields> train_fields = std::span<const EventFields>(fields).first(split.train.size());
  const std::span<const EventFields> test_fields = std::span<const EventFields>(fields).last(split.test.size());

  PreparedSplits out;
  out.normalizer = fit_normalizer(train_fields);

  std::vector<InstanceKey> train_keys, test_keys;
  for (const auto& ev : train_fields) {
    auto k = enumerate_instances(ev);
    train_keys.insert(train_keys.end(), k.begin(), k.end());
  }
  for (const auto& ev : test_fields) {
    auto k = enumerate_instances(ev);
    test_keys.insert(test_keys.end(), k.begin(), k.end());
  }
  if (train_keys.empty()) throw DataError("train events produce no samples");
  if (test_keys.empty()) throw DataError("test events produce no samples");

  std::mt19937_64 rng(opts.seed);
  std::shuffle(train_keys.begin(), train_keys.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(opts.validation_fraction * static_cast<double>(train_keys.size())));
  std::vector<InstanceKey> val_keys(train_keys.end() - static_cast<std::ptrdiff_t>(n_val), train_keys.end());
  train_keys.resize(train_keys.size() - n_val);

  // Canonical order keeps each cell track's records adjacent.
  auto by_track = [](const InstanceKey& a, const InstanceKey& b) {
    return std::tie(a.event_index, a.cell.row, a.cell.col, a.frame) < std::tie(b.event_index, b.cell.row, b.cell.col, b.frame);
  };
  std::sort(train_keys.begin(), train_keys.end(), by_track);
  std::sort(val_keys.begin(), val_keys.end(), by_track);

  out.train = materialize(train_keys, fields, out.normalizer, Split::train);
  out.validation = materialize(val_keys, fields, out.normalizer, Split::validation);
  out.test = materialize(test_keys, fields, out.normalizer, Split::test);
  return out;
}

std::vector<std::pair<int, int>> oversample_shifts(int k) {
  return {{-k, 0}, {k, 0}, {0, -k}, {0, k}, {-k, -k}, {-k, k}, {k, -k}, {k, k}};
}

SampleSet oversample_positives(const SampleSet& train, int k, std::span<const EventFields> events) {
  if (train.split != Split::train) {
    throw UsageError(std::string("oversampling applies to the train split only, got ") + split_name(train.split));
  }
  if (k != 1 && k != 2) throw ConfigError("oversampling shift K must be 1 or 2, got " + std::to_string(k));

  std::vector<InstanceKey> extra;
  for (const auto& s : train.samples) {
    const auto& m = s.meta;
    if (!m.target || m.label != 1 || m.oversampled) continue;
    const auto& ev = find_event(events, m.event_index);
    const CellIndex cell{m.row, m.col};
    for (auto [dy, dx] : oversample_shifts(k)) {
      const int sy = m.shift_y + dy, sx = m.shift_x + dx;
      const auto origin = window_origin(ev.grid(), cell, sy, sx);
      if (!origin) continue;
      const auto [wy, wx] = *origin;
      if (label_cell(ev.grid(), m.frame + kLabelLeadFrames, wy + kCellPixels, wx + kCellPixels) != 1) continue;
      extra.push_back({m.event_index, m.frame, cell, sy, sx, true});
    }
  }
  SetBuilder builder(train);
  for (const auto& key : extra) builder.add(key, events);
  return builder.take();
}

}  // namespace nowcast
