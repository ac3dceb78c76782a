#include "nowcast/sample_io.hpp"

#include "nowcast/binary_io.hpp"
#include "nowcast/error.hpp"

namespace nowcast {

namespace {

constexpr std::string_view kSetMagic = "NWS1";
constexpr std::string_view kTrailerTag = "NWSP";
constexpr std::uint64_t kRecordBytes = 6 * sizeof(std::uint32_t) + kBlockValues * sizeof(float);

}  // namespace

std::vector<std::uint8_t> encode_sample_set(const SampleSet& set) {
  bin::Writer w;
  w.buffer().reserve(12 + set.samples.size() * kRecordBytes + 512);
  w.tag(kSetMagic);
  w.u32(static_cast<std::uint32_t>(set.samples.size()));
  for (const auto& s : set.samples) {
    if (s.values.size() != kBlockValues) throw DataError("sample block has " + std::to_string(s.values.size()) + " values");
    w.u32(s.meta.event_index);
    w.u32(s.meta.frame);
    w.u32(s.meta.row);
    w.u32(s.meta.col);
    w.u32(s.meta.label);
    w.u32(s.meta.pack_flags());
    w.f32_array(s.values);
  }
  w.tag(kTrailerTag);
  w.u32(static_cast<std::uint32_t>(set.split));
  w.u64(set.provenance);
  w.u32(static_cast<std::uint32_t>(kSampleVariables));
  for (std::size_t v = 0; v < kSampleVariables; ++v) {
    w.cstring(set.normalizer.names[v]);
    w.f64(set.normalizer.min[v]);
    w.f64(set.normalizer.max[v]);
  }
  w.u32(static_cast<std::uint32_t>(set.events.size()));
  for (const auto& e : set.events) {
    w.u32(e.index);
    w.cstring(e.id);
  }
  return std::move(w.buffer());
}

SampleSet decode_sample_set(std::span<const std::uint8_t> bytes) {
  bin::Reader r(bytes);
  r.expect_tag(kSetMagic);
  const std::uint64_t count_at = r.offset();
  const std::uint32_t count = r.u32();
  if (static_cast<std::uint64_t>(count) * kRecordBytes > r.remaining()) {
    throw FormatError("truncated sample set: header declares " + std::to_string(count) + " records", count_at);
  }

  SampleSet set;
  set.samples.resize(count);
  for (auto& s : set.samples) {
    s.meta.event_index = r.u32();
    s.meta.frame = r.u32();
    s.meta.row = r.u32();
    s.meta.col = r.u32();
    const std::uint64_t label_at = r.offset();
    const std::uint32_t label = r.u32();
    if (label > 1) throw FormatError("label " + std::to_string(label) + " is not 0 or 1", label_at);
    s.meta.label = static_cast<std::uint8_t>(label);
    s.meta.unpack_flags(r.u32());
    s.values.resize(kBlockValues);
    r.f32_array(s.values);
  }

  r.expect_tag(kTrailerTag);
  const std::uint64_t split_at = r.offset();
  const std::uint32_t split = r.u32();
  if (split > 2) throw FormatError("unknown split tag " + std::to_string(split), split_at);
  set.split = static_cast<Split>(split);
  set.provenance = r.u64();
  const std::uint64_t vars_at = r.offset();
  if (r.u32() != kSampleVariables) throw FormatError("normalizer must cover 6 variables", vars_at);
  for (std::size_t v = 0; v < kSampleVariables; ++v) {
    set.normalizer.names[v] = r.cstring(64);
    set.normalizer.min[v] = r.f64();
    set.normalizer.max[v] = r.f64();
  }
  const std::uint32_t events = r.u32();
  for (std::uint32_t i = 0; i < events; ++i) {
    EventRef e;
    e.index = r.u32();
    e.id = r.cstring(256);
    set.events.push_back(std::move(e));
  }
  if (!r.at_end()) throw FormatError("unexpected bytes after sample-set trailer", r.offset());
  return set;
}

void write_sample_set(const SampleSet& set, const std::string& path) { bin::write_file(path, encode_sample_set(set)); }

SampleSet read_sample_set(const std::string& path) { return decode_sample_set(bin::read_file(path)); }

}  // namespace nowcast
