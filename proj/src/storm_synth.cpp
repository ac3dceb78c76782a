#include "nowcast/storm_synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "nowcast/error.hpp"

namespace nowcast {

GridSequence::GridSequence(std::string event_id, std::size_t frames, std::size_t levels, std::size_t rows,
                           std::size_t cols, std::vector<std::string> variables)
    : event_id_(std::move(event_id)),
      frames_(frames),
      levels_(levels),
      rows_(rows),
      cols_(cols),
      variables_(std::move(variables)),
      data_(frames * variables_.size() * levels * rows * cols, 0.0f) {}

std::size_t GridSequence::variable_index(const std::string& name) const {
  for (std::size_t i = 0; i < variables_.size(); ++i) {
    if (variables_[i] == name) return i;
  }
  throw DataError("grid sequence " + event_id_ + " has no variable \"" + name + "\"");
}

std::span<const float> GridSequence::volume(std::size_t t, std::size_t v) const {
  return std::span<const float>(data_).subspan(offset(t, v, 0, 0, 0), levels_ * rows_ * cols_);
}

std::span<float> GridSequence::volume(std::size_t t, std::size_t v) {
  return std::span<float>(data_).subspan(offset(t, v, 0, 0, 0), levels_ * rows_ * cols_);
}

bool GridSequence::operator==(const GridSequence& other) const {
  return frames_ == other.frames_ && levels_ == other.levels_ && rows_ == other.rows_ && cols_ == other.cols_ &&
         variables_ == other.variables_ && data_ == other.data_;
}

void SynthConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("synth config: " + msg); };
  if (rows < 18 || cols < 18) fail("grid must be at least 18x18 pixels");
  if (rows % 6 || cols % 6) fail("grid rows and cols must be divisible by 6");
  if (levels != 20) fail("levels must be 20");
  if (frames < 5) fail("need at least 5 frames");
  if (storms_min > storms_max) fail("storms_min > storms_max");
  if (initiation_lead < 1 || initiation_lead > 3) fail("initiation_lead must be 1, 2 or 3");
  auto range = [&](double lo, double hi, const char* name, bool positive) {
    if (!(lo <= hi)) fail(std::string(name) + " range is empty");
    if (positive && !(lo > 0)) fail(std::string(name) + " must be positive");
  };
  range(peak_dbz_min, peak_dbz_max, "peak_dbz", true);
  if (peak_dbz_max > kMaxDbz) fail("peak_dbz_max exceeds 70 dBZ");
  range(sigma_xy_min, sigma_xy_max, "sigma_xy", true);
  range(sigma_z_min, sigma_z_max, "sigma_z", true);
  range(core_level_min, core_level_max, "core_level", false);
  range(speed_min, speed_max, "speed", false);
  if (speed_min < 0) fail("speed must be non-negative");
  range(w_gain_min, w_gain_max, "w_gain", true);
  range(pt_gain_min, pt_gain_max, "pt_gain", true);
  if (grow_min > grow_max || plateau_min > plateau_max || decay_min > decay_max) fail("lifecycle range is empty");
  if (decay_min < 1) fail("decay must last at least one frame");
  if (noise_dbz < 0 || noise_w < 0 || noise_pt < 0) fail("noise amplitudes must be non-negative");
}

double Storm::envelope(double t) const {
  const double tau = t - birth;
  if (tau < 0) return 0.0;
  if (tau < grow) return peak_dbz * tau / grow;
  if (tau < grow + plateau) return peak_dbz;
  const double into_decay = tau - grow - plateau;
  if (into_decay < decay) return peak_dbz * (1.0 - into_decay / decay);
  return 0.0;
}

double Storm::reflectivity(double t, double z, double y, double x) const {
  const double a = envelope(t);
  if (a <= 0) return 0.0;
  const double dy = y - center_y(t), dx = x - center_x(t), dz = z - core_level;
  return a * std::exp(-(dy * dy + dx * dx) / (2 * sigma_xy * sigma_xy) - dz * dz / (2 * sigma_z * sigma_z));
}

std::vector<Storm> draw_storms(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto integer = [&](std::size_t lo, std::size_t hi) {
    return static_cast<double>(std::uniform_int_distribution<std::size_t>(lo, hi)(rng));
  };

  const std::size_t count = std::uniform_int_distribution<std::size_t>(cfg.storms_min, cfg.storms_max)(rng);
  std::vector<Storm> storms(count);
  for (auto& s : storms) {
    s.y0 = uniform(0, static_cast<double>(cfg.rows));
    s.x0 = uniform(0, static_cast<double>(cfg.cols));
    const double speed = uniform(cfg.speed_min, cfg.speed_max);
    const double heading = uniform(0, 2 * std::numbers::pi);
    s.vy = speed * std::sin(heading);
    s.vx = speed * std::cos(heading);
    s.grow = integer(cfg.grow_min, cfg.grow_max);
    s.plateau = integer(cfg.plateau_min, cfg.plateau_max);
    s.decay = integer(cfg.decay_min, cfg.decay_max);
    // Some storms are already mature at the first frame, most develop inside the window.
    s.birth = integer(0, cfg.frames - 3) - static_cast<double>(cfg.grow_max);
    s.peak_dbz = uniform(cfg.peak_dbz_min, cfg.peak_dbz_max);
    s.sigma_xy = uniform(cfg.sigma_xy_min, cfg.sigma_xy_max);
    s.sigma_z = uniform(cfg.sigma_z_min, cfg.sigma_z_max);
    s.core_level = uniform(cfg.core_level_min, cfg.core_level_max);
    s.w_gain = uniform(cfg.w_gain_min, cfg.w_gain_max);
    s.pt_gain = uniform(cfg.pt_gain_min, cfg.pt_gain_max);
  }
  return storms;
}

GridSequence render_event(const SynthConfig& cfg, std::span<const Storm> storms, std::uint64_t seed,
                          std::string event_id) {
  cfg.validate();
  GridSequence seq(std::move(event_id), cfg.frames, cfg.levels, cfg.rows, cfg.cols);
  const double lead = static_cast<double>(cfg.initiation_lead);

  for (std::size_t t = 0; t < cfg.frames; ++t) {
    const double now = static_cast<double>(t);
    for (const auto& s : storms) {
      const bool active_now = s.envelope(now) > 0;
      const bool active_ahead = s.envelope(now + lead) > 0;
      if (!active_now && !active_ahead) continue;
      for (std::size_t z = 0; z < cfg.levels; ++z) {
        for (std::size_t y = 0; y < cfg.rows; ++y) {
          for (std::size_t x = 0; x < cfg.cols; ++x) {
            const double zz = static_cast<double>(z), yy = static_cast<double>(y), xx = static_cast<double>(x);
            if (active_now) {
              float& r = seq.at(t, GridVar::R, z, y, x);
              r = std::max(r, static_cast<float>(s.reflectivity(now, zz, yy, xx)));
            }
            if (active_ahead) {
              const double future = s.reflectivity(now + lead, zz, yy, xx);
              float& w = seq.at(t, GridVar::w, z, y, x);
              float& pt = seq.at(t, GridVar::pt, z, y, x);
              w = std::max(w, static_cast<float>(s.w_gain * future));
              pt = std::max(pt, static_cast<float>(s.pt_gain * future));
            }
          }
        }
      }
    }
  }

  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto clamped_noise = [&](double sigma) {
    if (sigma == 0) return 0.0;
    return sigma * std::clamp(normal(rng), -3.0, 3.0);
  };
  const double sigma[3] = {cfg.noise_dbz, cfg.noise_pt, cfg.noise_w};
  for (std::size_t t = 0; t < cfg.frames; ++t) {
    for (std::size_t v = 0; v < 3; ++v) {
      for (float& value : seq.volume(t, v)) {
        double noisy = value + clamped_noise(sigma[v]);
        if (v == static_cast<std::size_t>(GridVar::R)) noisy = std::clamp(noisy, 0.0, kMaxDbz);
        value = static_cast<float>(noisy);
      }
    }
  }
  return seq;
}

GridSequence synth_event(const SynthConfig& cfg, std::uint64_t seed, std::string event_id) {
  const auto storms = draw_storms(cfg, seed);
  return render_event(cfg, storms, seed, std::move(event_id));
}

}  // namespace nowcast
