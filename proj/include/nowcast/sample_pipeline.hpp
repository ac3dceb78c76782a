#pragma once

// Turns grid sequences into labeled cell samples.
//
// A cell is a 6x6 pixel tile; its sample is the 18x18 pixel window centered
// on it, over all 20 levels, for six variables (R, dR, w, dw, pt, dpt). A
// record holds one such block at frame t plus the label for frame t + 2
// (30 minutes ahead). The model consumes three consecutive records of the
// same cell track (t-2, t-1, t); a record that is only needed as history is
// stored with its target flag cleared.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nowcast/storm_synth.hpp"

namespace nowcast {

inline constexpr std::size_t kCellPixels = 6;
inline constexpr std::size_t kWindowPixels = 18;
inline constexpr std::size_t kLevels = 20;
inline constexpr std::size_t kSampleVariables = 6;
inline constexpr std::size_t kBlockValues = kSampleVariables * kWindowPixels * kWindowPixels * kLevels;
inline constexpr std::size_t kLabelLeadFrames = 2;
inline constexpr std::size_t kHistorySteps = 3;
inline constexpr double kStormThresholdDbz = 35.0;

/// Sample variable order inside a block.
enum class SampleVar : std::size_t { R = 0, dR = 1, w = 2, dw = 3, pt = 4, dpt = 5 };
inline const std::array<std::string, kSampleVariables> kSampleVarNames = {"R", "dR", "w", "dw", "pt", "dpt"};

/// Offset of (variable, y, x, z) inside a flattened block.
constexpr std::size_t block_index(std::size_t var, std::size_t y, std::size_t x, std::size_t z) {
  return ((var * kWindowPixels + y) * kWindowPixels + x) * kLevels + z;
}

// ---- time differencing ----------------------------------------------------

/// var(t) - var(t-1) for t >= 1; frame 0 has no difference.
class TimeDifference {
 public:
  TimeDifference() = default;
  TimeDifference(std::size_t frames, std::size_t voxels) : voxels_(voxels), data_((frames - 1) * voxels) {}

  static constexpr std::size_t first_frame = 1;
  std::size_t frames() const { return data_.empty() ? 0 : data_.size() / voxels_ + 1; }

  std::span<const double> at(std::size_t t) const;
  std::span<double> at(std::size_t t);

 private:
  std::size_t voxels_ = 0;
  std::vector<double> data_;
};

/// Throws InsufficientHistoryError for sequences shorter than two frames.
TimeDifference time_difference(const GridSequence& seq, GridVar var);

/// Raw (unnormalized) six-variable view of one event: the grid's R, w, pt
/// plus their time differences. Borrows the grid, which must outlive it.
class EventFields {
 public:
  EventFields(const GridSequence& grid, std::uint32_t event_index);

  const GridSequence& grid() const { return *grid_; }
  std::uint32_t event_index() const { return event_index_; }
  std::size_t frames() const { return grid_->frames(); }

  /// Value at frame t >= 1 (differenced variables are undefined at frame 0).
  double value(std::size_t t, SampleVar var, std::size_t z, std::size_t y, std::size_t x) const;

 private:
  const GridSequence* grid_;
  std::uint32_t event_index_;
  std::size_t r_, w_, pt_;
  std::array<TimeDifference, 3> diffs_;  // dR, dw, dpt
};

// ---- normalization --------------------------------------------------------

struct Normalizer {
  std::array<std::string, kSampleVariables> names = kSampleVarNames;
  std::array<double, kSampleVariables> min{};
  std::array<double, kSampleVariables> max{};

  static constexpr double kMinSpan = 1e-6;
  static constexpr double kClamp = 1.5;

  double span(std::size_t var) const;
  bool operator==(const Normalizer&) const = default;
  /// Stable hash of names and extrema, used for provenance checks.
  std::uint64_t fingerprint() const;
};

/// Per-variable min/max over every frame and voxel of the given events.
/// Differenced variables start at frame 1. Throws DataError when empty.
Normalizer fit_normalizer(std::span<const EventFields> events);

/// Maps [min, max] affinely onto [-1, 1]; values outside are clamped to [-1.5, 1.5].
double normalize(double x, const Normalizer& norm, SampleVar var);

// ---- cells and labels -----------------------------------------------------

struct CellIndex {
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const CellIndex&) const = default;
};

/// Cells whose unshifted 18x18 window lies inside a rows x cols grid.
std::vector<CellIndex> valid_cells(std::size_t rows, std::size_t cols);

/// Composite (max over levels) reflectivity over the 6x6 region at pixel
/// origin (y0, x0), frame t.
double cell_composite_max(const GridSequence& grid, std::size_t t, std::size_t y0, std::size_t x0);

/// 1 iff any of the 36 region pixels, at any level, is >= 35 dBZ.
int label_cell(const GridSequence& grid, std::size_t t, std::size_t y0, std::size_t x0);

struct SampleMeta {
  std::uint32_t event_index = 0;
  std::uint32_t frame = 0;
  std::uint32_t row = 0;  // cell row / col (unshifted)
  std::uint32_t col = 0;
  std::uint8_t label = 0;
  bool oversampled = false;
  /// Scored instance (false for history-only records).
  bool target = false;
  /// Current (frame t) composite reflectivity in the labeled region is >= 35 dBZ.
  bool currently_stormy = false;
  std::int8_t shift_y = 0;
  std::int8_t shift_x = 0;

  /// Top-left pixel of the (possibly shifted) 18x18 window.
  std::int64_t window_y() const { return static_cast<std::int64_t>(row) * 6 - 6 + shift_y; }
  std::int64_t window_x() const { return static_cast<std::int64_t>(col) * 6 - 6 + shift_x; }

  std::uint32_t pack_flags() const;
  void unpack_flags(std::uint32_t flags);

  bool operator==(const SampleMeta&) const = default;
};

struct CellSample {
  SampleMeta meta;
  /// kBlockValues normalized values in (variable, y, x, z) order.
  std::vector<float> values;
};

/// Normalized block for the window with top-left pixel (wy, wx) at frame t.
/// Needs 1 <= t and the window inside the grid.
std::vector<float> extract_block(const EventFields& ev, const Normalizer& norm, std::size_t t, std::size_t wy,
                                 std::size_t wx);

/// Builds the labeled record for a cell at frame t, or nullopt when the
/// (shifted) window leaves the domain. Requires frames t-3 .. t+2 to exist.
std::optional<CellSample> assemble_sample(const EventFields& ev, const Normalizer& norm, std::size_t t, CellIndex cell,
                                          int shift_y = 0, int shift_x = 0);

// ---- sample sets ----------------------------------------------------------

enum class Split : std::uint32_t { train = 0, validation = 1, test = 2 };
const char* split_name(Split s);

struct EventRef {
  std::uint32_t index = 0;
  std::string id;
  bool operator==(const EventRef&) const = default;
};

struct SampleSet {
  Split split = Split::train;
  std::vector<CellSample> samples;
  std::vector<EventRef> events;
  Normalizer normalizer;
  std::uint64_t provenance = 0;

  std::size_t target_count() const;
  std::size_t positive_count() const;
  /// Positives among targets; 0 for an empty set.
  double positive_fraction() const;
};

/// One model input: the target record and the records for t-2, t-1, t.
struct Instance {
  std::size_t target = 0;
  std::array<std::size_t, kHistorySteps> steps{};
};

/// Resolves every target's history inside the set. Throws DataError when a
/// history record is missing.
std::vector<Instance> index_instances(const SampleSet& set);

struct InstanceKey {
  std::uint32_t event_index;
  std::uint32_t frame;
  CellIndex cell;
  int shift_y = 0, shift_x = 0;
  bool oversampled = false;
};

/// Materializes target records and their history into a set.
SampleSet materialize(std::span<const InstanceKey> keys, std::span<const EventFields> events,
                      const Normalizer& norm, Split split);

struct EventSplit {
  std::vector<std::size_t> train;  // train + validation events
  std::vector<std::size_t> test;
};

/// Whole events in input order: the first n_train train, the last n_test test.
EventSplit split_events(std::size_t event_count, std::size_t n_train, std::size_t n_test);

/// All scored (event, t, cell) keys of one event: t in [3, T-3], every valid cell.
std::vector<InstanceKey> enumerate_instances(const EventFields& ev);

struct PipelineOptions {
  std::size_t n_train = 5;
  std::size_t n_test = 2;
  double validation_fraction = 0.1;
  std::uint64_t seed = 1;
};

struct PreparedSplits {
  SampleSet train, validation, test;
  Normalizer normalizer;
};

/// Fits the normalizer on the train events, enumerates instances, moves the
/// last validation_fraction of a seeded shuffle of train instances to the
/// validation split. No oversampling.
PreparedSplits build_splits(std::span<const GridSequence> grids, const PipelineOptions& opts);

/// Cell-moving oversampling: every positive original target spawns up to 8
/// candidates whose window and labeled region move by (+-K, 0), (0, +-K),
/// (+-K, +-K); a candidate is kept iff its window stays in the domain and its
/// recomputed label is 1. Throws UsageError for non-train splits.
SampleSet oversample_positives(const SampleSet& train, int k, std::span<const EventFields> events);

/// Shifts tried by oversample_positives, in generation order.
std::vector<std::pair<int, int>> oversample_shifts(int k);

}  // namespace nowcast
