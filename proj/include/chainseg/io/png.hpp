#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "chainseg/core/tensor.hpp"

namespace chainseg::io {

namespace detail {

inline void png_be32(std::vector<unsigned char>& out, uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

inline void png_chunk(std::vector<unsigned char>& out, const char type[4],
                      const std::vector<unsigned char>& body) {
  png_be32(out, static_cast<uint32_t>(body.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), body.begin(), body.end());
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0, out.data() + start, static_cast<uInt>(out.size() - start)));
  png_be32(out, crc);
}

}  // namespace detail

// Writes an 8-bit grayscale PNG. `pixels` is (rows, cols) with values already
// in [0, 255].
inline void write_png_gray(const std::string& path, const Tensor<uint8_t>& pixels) {
  check_rank(pixels, 2, "write_png_gray");
  const int64_t h = pixels.dim(0), w = pixels.dim(1);
  CS_CHECK(h >= 1 && w >= 1, "write_png_gray: empty image");

  // Filter byte 0 in front of every scanline, then one zlib stream.
  std::vector<unsigned char> raw;
  raw.reserve(static_cast<size_t>(h * (w + 1)));
  for (int64_t y = 0; y < h; ++y) {
    raw.push_back(0);
    for (int64_t x = 0; x < w; ++x) raw.push_back(pixels.at(y, x));
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> idat(bound);
  CS_CHECK(compress2(idat.data(), &bound, raw.data(), static_cast<uLong>(raw.size()),
                     Z_DEFAULT_COMPRESSION) == Z_OK,
           "write_png_gray: deflate failed");
  idat.resize(bound);

  std::vector<unsigned char> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<unsigned char> ihdr;
  detail::png_be32(ihdr, static_cast<uint32_t>(w));
  detail::png_be32(ihdr, static_cast<uint32_t>(h));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(0);  // grayscale
  ihdr.push_back(0);  // deflate
  ihdr.push_back(0);  // filter method
  ihdr.push_back(0);  // no interlace
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", idat);
  detail::png_chunk(out, "IEND", {});

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  CS_CHECK(os.good(), "write_png_gray: cannot open '" << path << "'");
  os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  CS_CHECK(os.good(), "write_png_gray: write failed on '" << path << "'");
}

// Maps a real-valued map to 8-bit by min-max scaling (flat input becomes 0).
inline Tensor<uint8_t> to_gray8(const Tensor<double>& t) {
  double lo = t.numel() ? t[0] : 0.0, hi = lo;
  for (int64_t i = 0; i < t.numel(); ++i) {
    lo = std::min(lo, t[i]);
    hi = std::max(hi, t[i]);
  }
  Tensor<uint8_t> out(t.shape());
  const double span = hi - lo;
  if (span > 0)
    for (int64_t i = 0; i < t.numel(); ++i)
      out[i] = static_cast<uint8_t>(llround((t[i] - lo) / span * 255.0));
  return out;
}

}  // namespace chainseg::io
