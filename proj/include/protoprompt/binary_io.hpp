// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "protoprompt/error.hpp"

// Little-endian primitive I/O shared by the backbone, store and stream containers.
namespace protoprompt::binio {

static_assert(std::endian::native == std::endian::little, "only little-endian hosts are supported");

inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), 4); }

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::array<char, 4> buf{};
  is.read(buf.data(), 4);
  require(is.good() && std::string_view(buf.data(), 4) == magic, ErrorKind::FormatError,
          "bad magic, expected " + std::string(magic));
}

template <typename T>
void write_pod(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  require(is.good(), ErrorKind::FormatError, "truncated file");
  return value;
}

inline void write_u32(std::ostream& os, std::uint32_t v) { write_pod(os, v); }
inline std::uint32_t read_u32(std::istream& is) { return read_pod<std::uint32_t>(is); }
inline void write_i32(std::ostream& os, std::int32_t v) { write_pod(os, v); }
inline std::int32_t read_i32(std::istream& is) { return read_pod<std::int32_t>(is); }
inline void write_f64(std::ostream& os, double v) { write_pod(os, v); }
inline double read_f64(std::istream& is) { return read_pod<double>(is); }

inline void write_f64s(std::ostream& os, std::span<const double> values) {
  os.write(reinterpret_cast<const char*>(values.data()),
           static_cast<std::streamsize>(values.size() * sizeof(double)));
}

inline void read_f64s(std::istream& is, std::span<double> out) {
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size() * sizeof(double)));
  require(is.good(), ErrorKind::FormatError, "truncated tensor payload");
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, std::uint32_t max_len = 1u << 20) {
  const auto n = read_u32(is);
  require(n <= max_len, ErrorKind::FormatError, "string length out of range");
  std::string s(n, '\0');
  is.read(s.data(), n);
  require(is.good() || n == 0, ErrorKind::FormatError, "truncated string");
  return s;
}

/// FNV-1a over raw bytes.
inline std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(std::span<const double> values, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a(std::as_bytes(values), h);
}

}  // namespace protoprompt::binio
