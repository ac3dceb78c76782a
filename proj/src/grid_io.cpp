#include <limits>

#include "nowcast/binary_io.hpp"
#include "nowcast/error.hpp"
#include "nowcast/storm_synth.hpp"

namespace nowcast {

namespace {

constexpr std::string_view kGridMagic = "NWC1";
constexpr std::string_view kProvenanceTag = "NWCH";
constexpr std::uint32_t kMaxVariables = 64;

}  // namespace

std::vector<std::uint8_t> encode_grid(const GridSequence& seq) {
  bin::Writer w;
  w.tag(kGridMagic);
  for (std::size_t d : {seq.frames(), seq.levels(), seq.rows(), seq.cols(), seq.variables().size()}) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw DataError("grid dimension does not fit the file header");
    w.u32(static_cast<std::uint32_t>(d));
  }
  for (const auto& name : seq.variables()) w.cstring(name);
  w.f32_array(seq.data());
  w.tag(kProvenanceTag);
  w.u64(seq.provenance());
  return std::move(w.buffer());
}

GridSequence decode_grid(std::span<const std::uint8_t> bytes) {
  bin::Reader r(bytes);
  r.expect_tag(kGridMagic);
  const std::uint64_t dims_at = r.offset();
  const std::uint32_t t = r.u32(), z = r.u32(), y = r.u32(), x = r.u32(), v = r.u32();
  if (t == 0 || z == 0 || y == 0 || x == 0 || v == 0) throw FormatError("zero grid dimension in header", dims_at);
  if (v > kMaxVariables) throw FormatError("variable count " + std::to_string(v) + " is implausible", dims_at + 16);

  std::vector<std::string> names;
  for (std::uint32_t i = 0; i < v; ++i) names.push_back(r.cstring(256));

  // Each factor is below 2^32; check the running product against the bytes on hand.
  unsigned __int128 count = 1;
  for (std::uint32_t d : {t, v, z, y, x}) count *= d;
  const unsigned __int128 payload = count * sizeof(float);
  if (payload > std::numeric_limits<std::uint64_t>::max() || payload > std::numeric_limits<std::size_t>::max() / 2) {
    throw FormatError("grid dimensions overflow", dims_at);
  }
  r.require(static_cast<std::uint64_t>(payload), "grid payload");

  GridSequence seq("event", t, z, y, x, std::move(names));
  r.f32_array(seq.data());
  if (!r.at_end()) {
    r.expect_tag(kProvenanceTag);
    seq.set_provenance(r.u64());
    if (!r.at_end()) throw FormatError("unexpected bytes after grid trailer", r.offset());
  }
  return seq;
}

void write_grid(const GridSequence& seq, const std::string& path) { bin::write_file(path, encode_grid(seq)); }

GridSequence read_grid(const std::string& path) {
  auto seq = decode_grid(bin::read_file(path));
  // Event id comes from the file stem: <dir>/event_3.nwc -> event_3.
  std::string stem = path.substr(path.find_last_of('/') + 1);
  if (auto dot = stem.rfind('.'); dot != std::string::npos) stem.resize(dot);
  seq.set_event_id(stem);
  return seq;
}

}  // namespace nowcast
