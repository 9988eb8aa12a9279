#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mad/common.hpp"

// Byte-level plumbing: CRC32, little-endian packing, whole-file reads and
// atomic writes. File formats in this project are defined little-endian and
// the build targets little-endian hosts only.

namespace mad {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

// CRC-32 (IEEE 802.3 / zlib polynomial 0xEDB88320).
inline uint32_t crc32(const uint8_t* p, size_t n) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t c = 0xFFFFFFFFu;
  for (size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

inline uint32_t crc32(const std::vector<uint8_t>& b) { return crc32(b.data(), b.size()); }

// FNV-1a, for short content fingerprints in reports.
inline uint64_t fnv1a64(const void* data, size_t n) {
  const auto* p = static_cast<const uint8_t*>(data);
  uint64_t h = 0xCBF29CE484222325ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

namespace detail {

template <typename T>
void put_raw(std::vector<uint8_t>& b, T v) {
  uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  b.insert(b.end(), buf, buf + sizeof(T));
}

}  // namespace detail

inline void put_u32(std::vector<uint8_t>& b, uint32_t v) { detail::put_raw(b, v); }
inline void put_i32(std::vector<uint8_t>& b, int32_t v) { detail::put_raw(b, v); }
inline void put_u64(std::vector<uint8_t>& b, uint64_t v) { detail::put_raw(b, v); }
inline void put_f32(std::vector<uint8_t>& b, float v) { detail::put_raw(b, v); }
inline void put_f64(std::vector<uint8_t>& b, double v) { detail::put_raw(b, v); }

// Cursor over a byte buffer; reads fail with kCorrupt when data runs out.
class ByteReader {
 public:
  ByteReader(const std::vector<uint8_t>& b, std::string origin)
      : b_(b), origin_(std::move(origin)) {}

  template <typename T>
  T get() {
    check(pos_ + sizeof(T) <= b_.size(), errkind::kCorrupt,
          "truncated data in " + origin_ + " at offset " + std::to_string(pos_));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  uint32_t get_u32() { return get<uint32_t>(); }
  int32_t get_i32() { return get<int32_t>(); }
  uint64_t get_u64() { return get<uint64_t>(); }
  float get_f32() { return get<float>(); }
  double get_f64() { return get<double>(); }

  size_t pos() const { return pos_; }
  size_t remaining() const { return b_.size() - pos_; }
  const std::string& origin() const { return origin_; }

 private:
  const std::vector<uint8_t>& b_;
  std::string origin_;
  size_t pos_ = 0;
};

inline std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    if (!std::filesystem::exists(path))
      fail(errkind::kDatasetNotFound, "no such file: " + path);
    fail(errkind::kIo, "cannot open " + path);
  }
  f.seekg(0, std::ios::end);
  const auto n = static_cast<size_t>(f.tellg());
  f.seekg(0);
  std::vector<uint8_t> b(n);
  if (n) f.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(n));
  check(static_cast<bool>(f), errkind::kIo, "short read on " + path);
  return b;
}

// Writes through a sibling temp file and renames, so readers never observe a
// half-written file.
inline void write_file(const std::string& path, const void* data, size_t n) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    check(static_cast<bool>(f), errkind::kIo, "cannot create " + tmp);
    if (n) f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    f.flush();
    check(static_cast<bool>(f), errkind::kIo, "write failed on " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  check(!ec, errkind::kIo, "rename failed for " + path + ": " + ec.message());
}

inline void write_file(const std::string& path, const std::vector<uint8_t>& b) {
  write_file(path, b.data(), b.size());
}

inline void write_text_file(const std::string& path, const std::string& s) {
  write_file(path, s.data(), s.size());
}

inline std::string read_text_file(const std::string& path) {
  auto b = read_file(path);
  return std::string(b.begin(), b.end());
}

// Shortest decimal form that round-trips a double exactly.
inline std::string fmt_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace mad
