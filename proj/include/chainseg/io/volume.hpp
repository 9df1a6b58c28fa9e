#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "chainseg/core/tensor.hpp"

namespace chainseg::io {

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  CS_CHECK(is.good(), "volume: cannot open '" << path << "'");
  is.seekg(0, std::ios::end);
  const auto n = is.tellg();
  is.seekg(0, std::ios::beg);
  std::vector<unsigned char> bytes(static_cast<size_t>(n));
  is.read(reinterpret_cast<char*>(bytes.data()), n);
  CS_CHECK(is.good(), "volume: short read on '" << path << "'");
  return bytes;
}

inline bool is_gzip(const std::vector<unsigned char>& b) {
  return b.size() >= 2 && b[0] == 0x1f && b[1] == 0x8b;
}

// Inflates a whole gzip (or zlib) stream held in memory.
inline std::vector<unsigned char> gunzip(const std::vector<unsigned char>& in) {
  z_stream zs;
  std::memset(&zs, 0, sizeof(zs));
  // 15+32: accept both zlib and gzip wrappers.
  CS_CHECK(inflateInit2(&zs, 15 + 32) == Z_OK, "gunzip: inflateInit failed");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  std::vector<unsigned char> out;
  std::vector<unsigned char> chunk(1 << 18);
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk.data();
    zs.avail_out = static_cast<uInt>(chunk.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      CS_CHECK(false, "gunzip: corrupt stream (zlib code " << rc << ")");
    }
    out.insert(out.end(), chunk.data(), chunk.data() + (chunk.size() - zs.avail_out));
  }
  inflateEnd(&zs);
  return out;
}

// Compresses bytes with a gzip wrapper (used by tests to build .nii.gz inputs).
inline std::vector<unsigned char> gzip(const std::vector<unsigned char>& in) {
  z_stream zs;
  std::memset(&zs, 0, sizeof(zs));
  CS_CHECK(deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8,
                        Z_DEFAULT_STRATEGY) == Z_OK,
           "gzip: deflateInit failed");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  std::vector<unsigned char> out;
  std::vector<unsigned char> chunk(1 << 18);
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk.data();
    zs.avail_out = static_cast<uInt>(chunk.size());
    rc = deflate(&zs, Z_FINISH);
    out.insert(out.end(), chunk.data(), chunk.data() + (chunk.size() - zs.avail_out));
  }
  deflateEnd(&zs);
  return out;
}

namespace detail {

template <typename U>
U load_le(const unsigned char* p, bool swap) {
  std::array<unsigned char, sizeof(U)> b;
  std::memcpy(b.data(), p, sizeof(U));
  if (swap) std::reverse(b.begin(), b.end());
  U v;
  std::memcpy(&v, b.data(), sizeof(U));
  return v;
}

}  // namespace detail

// A parsed 3D medical volume: voxels indexed (depth, row, column), spacing in
// millimetres per axis in the same order.
struct RawVolume {
  Tensor<double> voxels;
  std::array<double, 3> spacing = {1.0, 1.0, 1.0};
};

// Minimal NIfTI-1 reader: 348-byte header at fixed offsets, optional gzip,
// either byte order, the five common scalar dtypes, slope/intercept scaling.
// The file's x-fastest voxel order matches a row-major (z,y,x) tensor, so the
// body is copied straight through.
inline RawVolume read_nifti_bytes(std::vector<unsigned char> bytes, const std::string& who) {
  if (is_gzip(bytes)) bytes = gunzip(bytes);
  CS_CHECK(bytes.size() >= 352, who << ": file too small for a NIfTI-1 header ("
                                    << bytes.size() << " bytes)");
  const unsigned char* h = bytes.data();
  int32_t sizeof_hdr = detail::load_le<int32_t>(h + 0, false);
  bool swap = false;
  if (sizeof_hdr != 348) {
    swap = true;
    sizeof_hdr = detail::load_le<int32_t>(h + 0, true);
  }
  CS_CHECK(sizeof_hdr == 348, who << ": bad header size field " << sizeof_hdr);
  const char* magic = reinterpret_cast<const char*>(h + 344);
  CS_CHECK(std::strncmp(magic, "n+1", 3) == 0 || std::strncmp(magic, "ni1", 3) == 0,
           who << ": missing NIfTI magic");

  const int16_t ndim = detail::load_le<int16_t>(h + 40, swap);
  CS_CHECK(ndim >= 3 && ndim <= 7, who << ": expected a 3D volume, header says ndim=" << ndim);
  int64_t nx = detail::load_le<int16_t>(h + 42, swap);
  int64_t ny = detail::load_le<int16_t>(h + 44, swap);
  int64_t nz = detail::load_le<int16_t>(h + 46, swap);
  CS_CHECK(nx >= 1 && ny >= 1 && nz >= 1,
           who << ": non-positive dimension (" << nx << "," << ny << "," << nz << ")");
  for (int i = 4; i <= ndim; ++i) {
    const int16_t d = detail::load_le<int16_t>(h + 40 + 2 * i, swap);
    CS_CHECK(d <= 1, who << ": multi-volume files are not supported (dim[" << i
                         << "]=" << d << ")");
  }
  const int16_t datatype = detail::load_le<int16_t>(h + 70, swap);
  const int16_t bitpix = detail::load_le<int16_t>(h + 72, swap);
  const float sx = detail::load_le<float>(h + 76 + 4, swap);
  const float sy = detail::load_le<float>(h + 76 + 8, swap);
  const float sz = detail::load_le<float>(h + 76 + 12, swap);
  const float vox_offset = detail::load_le<float>(h + 108, swap);
  const float scl_slope = detail::load_le<float>(h + 112, swap);
  const float scl_inter = detail::load_le<float>(h + 116, swap);

  int elem = 0;
  switch (datatype) {
    case 2: elem = 1; break;    // uint8
    case 4: elem = 2; break;    // int16
    case 8: elem = 4; break;    // int32
    case 16: elem = 4; break;   // float32
    case 64: elem = 8; break;   // float64
    case 512: elem = 2; break;  // uint16
    default: CS_CHECK(false, who << ": unsupported NIfTI datatype code " << datatype);
  }
  CS_CHECK(bitpix == elem * 8, who << ": bitpix " << bitpix << " disagrees with datatype "
                                   << datatype);
  const size_t offset = static_cast<size_t>(vox_offset);
  const size_t count = static_cast<size_t>(nx * ny * nz);
  CS_CHECK(offset >= 348 && bytes.size() >= offset + count * static_cast<size_t>(elem),
           who << ": voxel body truncated (need " << count * static_cast<size_t>(elem)
               << " bytes at offset " << offset << ", file has " << bytes.size() << ")");

  RawVolume v;
  v.voxels = Tensor<double>({nz, ny, nx});
  const unsigned char* p = bytes.data() + offset;
  for (size_t i = 0; i < count; ++i, p += elem) {
    double x = 0;
    switch (datatype) {
      case 2: x = *p; break;
      case 4: x = detail::load_le<int16_t>(p, swap); break;
      case 8: x = detail::load_le<int32_t>(p, swap); break;
      case 16: x = detail::load_le<float>(p, swap); break;
      case 64: x = detail::load_le<double>(p, swap); break;
      case 512: x = detail::load_le<uint16_t>(p, swap); break;
    }
    v.voxels[static_cast<int64_t>(i)] = x;
  }
  if (scl_slope != 0.0f && !(scl_slope == 1.0f && scl_inter == 0.0f)) {
    for (int64_t i = 0; i < v.voxels.numel(); ++i)
      v.voxels[i] = v.voxels[i] * static_cast<double>(scl_slope) + static_cast<double>(scl_inter);
  }
  v.spacing = {static_cast<double>(sz), static_cast<double>(sy), static_cast<double>(sx)};
  for (double& s : v.spacing)
    if (!(s > 0.0)) s = 1.0;  // headers frequently leave pixdim zeroed
  return v;
}

inline RawVolume read_nifti(const std::string& path) {
  return read_nifti_bytes(read_file_bytes(path), "nifti '" + path + "'");
}

}  // namespace chainseg::io
