#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "deepfv/error.hpp"

namespace deepfv::io {

// Little-endian primitives, independent of host byte order.

template <class UInt>
void write_uint(std::ostream& out, UInt value) {
  std::array<char, sizeof(UInt)> bytes{};
  for (std::size_t i = 0; i < sizeof(UInt); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <class UInt>
UInt read_uint(std::istream& in, std::string_view what) {
  std::array<unsigned char, sizeof(UInt)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw Error(ErrorKind::ParseError, std::string("truncated ") + std::string(what));
  UInt value = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) value |= static_cast<UInt>(bytes[i]) << (8 * i);
  return value;
}

inline void write_u8(std::ostream& out, std::uint8_t v) { write_uint<std::uint8_t>(out, v); }
inline void write_u16(std::ostream& out, std::uint16_t v) { write_uint<std::uint16_t>(out, v); }
inline void write_u32(std::ostream& out, std::uint32_t v) { write_uint<std::uint32_t>(out, v); }
inline void write_u64(std::ostream& out, std::uint64_t v) { write_uint<std::uint64_t>(out, v); }
inline void write_f32(std::ostream& out, float v) { write_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline void write_f64(std::ostream& out, double v) { write_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline std::uint8_t read_u8(std::istream& in, std::string_view what) { return read_uint<std::uint8_t>(in, what); }
inline std::uint16_t read_u16(std::istream& in, std::string_view what) { return read_uint<std::uint16_t>(in, what); }
inline std::uint32_t read_u32(std::istream& in, std::string_view what) { return read_uint<std::uint32_t>(in, what); }
inline std::uint64_t read_u64(std::istream& in, std::string_view what) { return read_uint<std::uint64_t>(in, what); }
inline float read_f32(std::istream& in, std::string_view what) { return std::bit_cast<float>(read_u32(in, what)); }
inline double read_f64(std::istream& in, std::string_view what) { return std::bit_cast<double>(read_u64(in, what)); }

inline void write_magic(std::ostream& out, std::string_view magic) { out.write(magic.data(), magic.size()); }

inline void expect_magic(std::istream& in, std::string_view magic, const std::string& source) {
  std::string got(magic.size(), '\0');
  in.read(got.data(), got.size());
  if (!in || got != magic) {
    throw Error(ErrorKind::ParseError, source + ": bad magic (expected \"" + std::string(magic) + "\")");
  }
}

/// u32 length prefix followed by raw UTF-8 bytes.
inline void write_string(std::ostream& out, std::string_view s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), s.size());
}

inline std::string read_string(std::istream& in, std::string_view what) {
  const auto n = read_u32(in, what);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw Error(ErrorKind::ParseError, std::string("truncated ") + std::string(what));
  return s;
}

}  // namespace deepfv::io
