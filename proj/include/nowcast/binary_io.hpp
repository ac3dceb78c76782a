#pragma once

// Little-endian primitives shared by the grid, sample-set and model file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nowcast/error.hpp"

namespace nowcast::bin {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void tag(std::string_view magic) { bytes(magic.data(), magic.size()); }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void f32(float v) { bytes(&v, sizeof v); }
  void f64(double v) { bytes(&v, sizeof v); }
  void cstring(std::string_view s) {
    bytes(s.data(), s.size());
    u8(0);
  }
  void f32_array(std::span<const float> v) { bytes(v.data(), v.size_bytes()); }
  void f64_array(std::span<const double> v) { bytes(v.data(), v.size_bytes()); }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked cursor over an in-memory file image. Every failure is a
/// FormatError naming the offset where the read was attempted.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }

  void require(std::uint64_t n, const char* what) const {
    if (n > remaining()) {
      throw FormatError(std::string("truncated ") + what + ": need " + std::to_string(n) + " bytes, have " +
                            std::to_string(remaining()),
                        pos_);
    }
  }

  void expect_tag(std::string_view magic) {
    require(magic.size(), "magic");
    if (std::memcmp(data_.data() + pos_, magic.data(), magic.size()) != 0) {
      throw FormatError("bad magic, expected \"" + std::string(magic) + "\"", pos_);
    }
    pos_ += magic.size();
  }
  bool peek_tag(std::string_view magic) const {
    return remaining() >= magic.size() && std::memcmp(data_.data() + pos_, magic.data(), magic.size()) == 0;
  }

  std::uint8_t u8() { return scalar<std::uint8_t>("u8"); }
  std::uint32_t u32() { return scalar<std::uint32_t>("u32"); }
  std::uint64_t u64() { return scalar<std::uint64_t>("u64"); }
  float f32() { return scalar<float>("f32"); }
  double f64() { return scalar<double>("f64"); }

  std::string cstring(std::size_t max_len = 4096) {
    const std::uint64_t start = pos_;
    for (std::size_t i = 0; i < max_len && pos_ + i < data_.size(); ++i) {
      if (data_[pos_ + i] == 0) {
        std::string s(reinterpret_cast<const char*>(data_.data() + pos_), i);
        pos_ += i + 1;
        return s;
      }
    }
    throw FormatError("unterminated string", start);
  }

  void f32_array(std::span<float> out) { array(out.data(), out.size_bytes(), "float payload"); }
  void f64_array(std::span<double> out) { array(out.data(), out.size_bytes(), "double payload"); }

 private:
  template <typename T>
  T scalar(const char* what) {
    T v;
    array(&v, sizeof v, what);
    return v;
  }
  void array(void* dst, std::size_t n, const char* what) {
    require(n, what);
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }

  std::span<const std::uint8_t> data_;
  std::uint64_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> data);

/// CRC-32 (zlib polynomial).
std::uint32_t crc32(std::span<const std::uint8_t> data);

/// 64-bit FNV-1a, used for config and provenance hashes.
std::uint64_t fnv1a(std::string_view text, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace nowcast::bin
