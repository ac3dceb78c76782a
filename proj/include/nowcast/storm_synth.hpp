#pragma once

// Synthetic convective events: radar reflectivity plus thermodynamic
// precursor fields on a regular grid with 1 km pixels and 15-minute frames.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace nowcast {

/// Index of each synthesized variable inside a GridSequence.
enum class GridVar : std::size_t { R = 0, pt = 1, w = 2 };

/// Time-ordered stack of 3D fields for one event, stored as 32-bit floats in
/// [frame][variable][level][row][col] order (the on-disk payload order).
class GridSequence {
 public:
  GridSequence() = default;
  GridSequence(std::string event_id, std::size_t frames, std::size_t levels, std::size_t rows, std::size_t cols,
               std::vector<std::string> variables = {"R", "pt", "w"});

  const std::string& event_id() const { return event_id_; }
  void set_event_id(std::string id) { event_id_ = std::move(id); }

  std::size_t frames() const { return frames_; }
  std::size_t levels() const { return levels_; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  const std::vector<std::string>& variables() const { return variables_; }
  std::size_t variable_index(const std::string& name) const;
  static constexpr int frame_interval_minutes = 15;

  float& at(std::size_t t, GridVar v, std::size_t z, std::size_t y, std::size_t x) {
    return data_[offset(t, static_cast<std::size_t>(v), z, y, x)];
  }
  float at(std::size_t t, GridVar v, std::size_t z, std::size_t y, std::size_t x) const {
    return data_[offset(t, static_cast<std::size_t>(v), z, y, x)];
  }
  float at(std::size_t t, std::size_t v, std::size_t z, std::size_t y, std::size_t x) const {
    return data_[offset(t, v, z, y, x)];
  }

  /// Contiguous [level][row][col] volume of one variable at one frame.
  std::span<const float> volume(std::size_t t, std::size_t v) const;
  std::span<float> volume(std::size_t t, std::size_t v);

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  /// Config hash of the run that produced the sequence (0 when unknown).
  std::uint64_t provenance() const { return provenance_; }
  void set_provenance(std::uint64_t h) { provenance_ = h; }

  bool operator==(const GridSequence& other) const;

 private:
  std::size_t offset(std::size_t t, std::size_t v, std::size_t z, std::size_t y, std::size_t x) const {
    return (((t * variables_.size() + v) * levels_ + z) * rows_ + y) * cols_ + x;
  }

  std::string event_id_;
  std::size_t frames_ = 0, levels_ = 0, rows_ = 0, cols_ = 0;
  std::vector<std::string> variables_;
  std::vector<float> data_;
  std::uint64_t provenance_ = 0;
};

struct SynthConfig {
  std::size_t rows = 48;
  std::size_t cols = 48;
  std::size_t levels = 20;
  std::size_t frames = 24;

  std::size_t storms_min = 3;
  std::size_t storms_max = 6;

  double peak_dbz_min = 42.0;
  double peak_dbz_max = 60.0;
  /// Horizontal Gaussian sigma in pixels.
  double sigma_xy_min = 2.5;
  double sigma_xy_max = 4.5;
  /// Vertical Gaussian sigma in levels and the range of core levels.
  double sigma_z_min = 3.0;
  double sigma_z_max = 6.0;
  double core_level_min = 4.0;
  double core_level_max = 10.0;
  /// Advection speed in pixels per frame; direction is uniform.
  double speed_min = 0.5;
  double speed_max = 2.0;

  std::size_t grow_min = 2, grow_max = 4;
  std::size_t plateau_min = 1, plateau_max = 5;
  std::size_t decay_min = 2, decay_max = 4;

  /// Frames by which the pt and w anomalies lead the reflectivity.
  std::size_t initiation_lead = 2;

  /// Precursor amplitude per dBZ of the storm's future reflectivity.
  double w_gain_min = 0.10, w_gain_max = 0.20;   // m/s per dBZ
  double pt_gain_min = 0.03, pt_gain_max = 0.06;  // K per dBZ

  double noise_dbz = 2.0;
  double noise_w = 0.25;
  double noise_pt = 0.1;

  std::uint64_t seed = 1;

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
};

/// One storm's life: a Gaussian blob advecting at constant velocity with a
/// linear grow / plateau / decay envelope. Frame times may be fractional.
struct Storm {
  double y0 = 0, x0 = 0;  // center at the birth frame, pixels
  double vy = 0, vx = 0;  // pixels per frame
  double birth = 0;       // frame index at which growth starts
  double grow = 0, plateau = 0, decay = 0;
  double peak_dbz = 50;
  double sigma_xy = 3, sigma_z = 4, core_level = 6;
  double w_gain = 0.15, pt_gain = 0.05;

  /// Peak reflectivity at time t (0 before birth and after decay).
  double envelope(double t) const;
  double center_y(double t) const { return y0 + vy * (t - birth); }
  double center_x(double t) const { return x0 + vx * (t - birth); }
  /// Noise-free reflectivity contribution at a voxel.
  double reflectivity(double t, double z, double y, double x) const;
};

/// Storm parameters drawn for one event.
std::vector<Storm> draw_storms(const SynthConfig& cfg, std::uint64_t seed);

/// Renders storms into a sequence. R takes the maximum over storms; w and pt
/// mirror each storm's reflectivity initiation_lead frames in the future.
/// Noise is Gaussian clamped at three sigma; R is clamped to [0, 70].
GridSequence render_event(const SynthConfig& cfg, std::span<const Storm> storms, std::uint64_t seed,
                          std::string event_id = "event");

/// Deterministic for a given (cfg, seed).
GridSequence synth_event(const SynthConfig& cfg, std::uint64_t seed, std::string event_id = "event");

/// Grid file: "NWC1" | u32 T, Z, Y, X, V | V null-terminated names |
/// T*V*Z*Y*X little-endian f32, followed by an optional "NWCH" u64 provenance trailer.
void write_grid(const GridSequence& seq, const std::string& path);
GridSequence read_grid(const std::string& path);

std::vector<std::uint8_t> encode_grid(const GridSequence& seq);
GridSequence decode_grid(std::span<const std::uint8_t> bytes);

inline constexpr double kMaxDbz = 70.0;

}  // namespace nowcast
