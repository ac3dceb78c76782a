#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nowcast/sample_pipeline.hpp"

namespace nowcast {

/// Sample-set file:
///   "NWS1" | u32 record count |
///   per record: u32 event index, frame, cell row, cell col, label, flags | 38,880 f32
/// followed by a provenance trailer:
///   "NWSP" | u32 split | u64 config hash | normalizer (u32 V, V x {name\0, f64 min, f64 max}) |
///   u32 event count | per event: u32 index, id\0
/// Flags: bit 0 oversampled, bit 1 target, bit 2 currently stormy,
/// bits 8-15 / 16-23 the signed window shift in rows / cols.
std::vector<std::uint8_t> encode_sample_set(const SampleSet& set);
SampleSet decode_sample_set(std::span<const std::uint8_t> bytes);

void write_sample_set(const SampleSet& set, const std::string& path);
SampleSet read_sample_set(const std::string& path);

}  // namespace nowcast
