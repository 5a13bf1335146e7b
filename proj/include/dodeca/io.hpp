#pragma once

// Little-endian binary helpers shared by the feature store and checkpoints.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dodeca/error.hpp"

namespace dodeca::io {

template <typename U>
void write_le(std::ostream& out, U value) {
  static_assert(std::is_integral_v<U>);
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U read_le(std::istream& in, std::string_view what) {
  static_assert(std::is_integral_v<U>);
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw ParseError("truncated file while reading " + std::string(what));
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return static_cast<U>(v);
}

inline void write_f32(std::ostream& out, std::span<const float> values) {
  for (const float f : values) write_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
}

inline void read_f32(std::istream& in, std::span<float> values, std::string_view what) {
  for (float& f : values) f = std::bit_cast<float>(read_le<std::uint32_t>(in, what));
}

inline void write_string(std::ostream& out, std::string_view s) {
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, std::string_view what, std::size_t max_len = 1u << 26) {
  const auto n = read_le<std::uint32_t>(in, what);
  if (n > max_len) throw ParseError("implausible string length while reading " + std::string(what));
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), n)) throw ParseError("truncated file while reading " + std::string(what));
  return s;
}

}  // namespace dodeca::io
