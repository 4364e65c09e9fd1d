#pragma once

// Fixed little-endian binary encoding shared by id streams and checkpoints.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace bnce::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename U>
void write_le(std::ostream& out, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U read_le(std::istream& in) {
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(U))) throw FormatError("unexpected end of stream");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

inline void write_u32(std::ostream& out, std::uint32_t v) { write_le(out, v); }
inline void write_u64(std::ostream& out, std::uint64_t v) { write_le(out, v); }
inline std::uint32_t read_u32(std::istream& in) { return read_le<std::uint32_t>(in); }
inline std::uint64_t read_u64(std::istream& in) { return read_le<std::uint64_t>(in); }

inline void write_f64(std::ostream& out, double v) { write_u64(out, std::bit_cast<std::uint64_t>(v)); }
inline double read_f64(std::istream& in) { return std::bit_cast<double>(read_u64(in)); }
inline void write_f32(std::ostream& out, float v) { write_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline float read_f32(std::istream& in) { return std::bit_cast<float>(read_u32(in)); }

inline void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, std::uint64_t limit = (1ULL << 32)) {
  const std::uint64_t n = read_u64(in);
  if (n > limit) throw FormatError("string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  if (n && !in.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError("unexpected end of stream");
  return s;
}

}  // namespace bnce::io
