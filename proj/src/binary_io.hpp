#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "nmt/tensor.hpp"

namespace nmt::binio {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b, 8);
}

inline void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void put_bytes(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void need(std::istream& is, const std::string& what) {
  if (!is) throw ParseError("truncated file while reading " + what);
}

inline std::uint32_t get_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  need(is, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is, const std::string& what) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  need(is, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline float get_f32(std::istream& is, const std::string& what) {
  return std::bit_cast<float>(get_u32(is, what));
}

inline double get_f64(std::istream& is, const std::string& what) {
  return std::bit_cast<double>(get_u64(is, what));
}

inline std::string get_bytes(std::istream& is, const std::string& what, std::uint32_t limit = 1u << 26) {
  const std::uint32_t n = get_u32(is, what + " length");
  if (n > limit) throw ParseError("implausible length for " + what);
  std::string s(n, '\0');
  is.read(s.data(), n);
  need(is, what);
  return s;
}

}  // namespace nmt::binio
