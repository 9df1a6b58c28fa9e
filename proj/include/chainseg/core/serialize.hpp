#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "chainseg/core/tensor.hpp"

namespace chainseg::io {

// Explicit little-endian packing, independent of host byte order. Floats
// travel as their IEEE bit patterns, so round-trips are bitwise exact for
// every value including NaNs and denormals.

inline void write_u8(std::ostream& os, uint8_t v) { os.put(static_cast<char>(v)); }

template <typename U>
void write_le(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void write_u32(std::ostream& os, uint32_t v) { write_le(os, v); }
inline void write_u64(std::ostream& os, uint64_t v) { write_le(os, v); }
inline void write_i64(std::ostream& os, int64_t v) { write_le(os, static_cast<uint64_t>(v)); }
inline void write_f32(std::ostream& os, float v) { write_le(os, std::bit_cast<uint32_t>(v)); }
inline void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<uint64_t>(v)); }

inline void write_str(std::ostream& os, const std::string& s) {
  CS_CHECK(s.size() < (uint64_t(1) << 32), "serialize: string too long");
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline uint8_t read_u8(std::istream& is) {
  const int c = is.get();
  CS_CHECK(c != EOF, "serialize: unexpected end of stream");
  return static_cast<uint8_t>(c);
}

template <typename U>
U read_le(std::istream& is) {
  static_assert(std::is_unsigned_v<U>);
  U v = 0;
  for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(read_u8(is)) << (8 * i);
  return v;
}

inline uint32_t read_u32(std::istream& is) { return read_le<uint32_t>(is); }
inline uint64_t read_u64(std::istream& is) { return read_le<uint64_t>(is); }
inline int64_t read_i64(std::istream& is) { return static_cast<int64_t>(read_le<uint64_t>(is)); }
inline float read_f32(std::istream& is) { return std::bit_cast<float>(read_le<uint32_t>(is)); }
inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_le<uint64_t>(is)); }

inline std::string read_str(std::istream& is) {
  const uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  CS_CHECK(is.gcount() == static_cast<std::streamsize>(n),
           "serialize: truncated string (wanted " << n << " bytes)");
  return s;
}

template <typename T>
void write_scalar(std::ostream& os, T v) {
  if constexpr (std::is_same_v<T, float>)
    write_f32(os, v);
  else
    write_f64(os, v);
}

template <typename T>
T read_scalar(std::istream& is) {
  if constexpr (std::is_same_v<T, float>)
    return read_f32(is);
  else
    return read_f64(is);
}

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  write_u32(os, static_cast<uint32_t>(t.rank()));
  for (int64_t d = 0; d < t.rank(); ++d) write_i64(os, t.dim(d));
  for (int64_t i = 0; i < t.numel(); ++i) write_scalar<T>(os, t[i]);
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  const uint32_t rank = read_u32(is);
  CS_CHECK(rank <= 8, "serialize: implausible tensor rank " << rank);
  std::vector<int64_t> shape(rank);
  for (auto& d : shape) {
    d = read_i64(is);
    CS_CHECK(d >= 0 && d < (int64_t(1) << 40), "serialize: implausible dimension " << d);
  }
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = read_scalar<T>(is);
  return t;
}

}  // namespace chainseg::io
