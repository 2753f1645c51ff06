// Copyright 2026 The difftrack Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Single-file NIfTI-1 (.nii), little-endian, uncompressed.
//
// FOD volumes: dim[0] = 4, dim[4] = number of SH coefficients, float32.
// Masks: 3-D (or 4-D with dim[4] = 1), uint8/int16/int32/float32/float64,
// nonzero = set. Orientation comes from the sform rows; without an sform the
// voxel sizes in pixdim give a diagonal transform.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "difftrack/fod_volume.hpp"
#include "difftrack/sh_basis.hpp"
#include "difftrack/types.hpp"

namespace difftrack::io {

inline constexpr std::size_t kNiftiHeaderSize = 348;
inline constexpr std::size_t kNiftiDataOffset = 352;

namespace nifti {

enum Datatype : std::int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
};

template <class T>
T get(const std::vector<std::uint8_t>& buf, std::size_t offset) {
  T v;
  std::memcpy(&v, buf.data() + offset, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    auto* p = reinterpret_cast<std::uint8_t*>(&v);
    std::reverse(p, p + sizeof(T));
  }
  return v;
}

template <class T>
void put(std::vector<std::uint8_t>& buf, std::size_t offset, T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto* p = reinterpret_cast<std::uint8_t*>(&v);
    std::reverse(p, p + sizeof(T));
  }
  std::memcpy(buf.data() + offset, &v, sizeof(T));
}

struct Header {
  std::array<std::int64_t, 8> dim{};
  std::int16_t datatype = 0;
  std::int16_t bitpix = 0;
  std::array<float, 8> pixdim{};
  std::size_t vox_offset = 0;
  float scl_slope = 0.0f;
  float scl_inter = 0.0f;
  Affine affine;
  Vec3d voxel_size{};
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path + ": cannot open file for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(path + ": write failed");
}

inline int bytes_per_voxel(std::int16_t datatype) {
  switch (datatype) {
    case kUint8: return 1;
    case kInt16: return 2;
    case kInt32: return 4;
    case kFloat32: return 4;
    case kFloat64: return 8;
    default: return 0;
  }
}

inline Header parse_header(const std::vector<std::uint8_t>& buf, const std::string& path) {
  auto fail = [&](std::size_t offset, const std::string& what) {
    return FormatError(path + ": " + what + " (byte offset " + std::to_string(offset) + ")");
  };
  if (buf.size() < kNiftiHeaderSize) {
    throw fail(0, "file is " + std::to_string(buf.size()) +
                      " bytes, too small for a 348-byte NIfTI-1 header");
  }
  const auto sizeof_hdr = get<std::int32_t>(buf, 0);
  if (sizeof_hdr != 348) {
    if (sizeof_hdr == 0x5c010000) {
      throw fail(0, "big-endian NIfTI files are not supported");
    }
    throw fail(0, "sizeof_hdr is " + std::to_string(sizeof_hdr) + ", expected 348");
  }
  if (std::memcmp(buf.data() + 344, "n+1\0", 4) != 0) {
    if (std::memcmp(buf.data() + 344, "ni1\0", 4) == 0) {
      throw fail(344, "two-file NIfTI (.hdr/.img) is not supported");
    }
    throw fail(344, "bad magic, expected \"n+1\"");
  }
  Header h;
  for (int i = 0; i < 8; ++i) h.dim[i] = get<std::int16_t>(buf, 40 + 2 * i);
  if (h.dim[0] < 3 || h.dim[0] > 7) {
    throw fail(40, "dim[0] is " + std::to_string(h.dim[0]) + ", expected 3 or 4");
  }
  for (int i = 1; i <= 3; ++i) {
    if (h.dim[i] < 1) throw fail(40 + 2 * i, "non-positive spatial dimension");
  }
  h.datatype = get<std::int16_t>(buf, 70);
  h.bitpix = get<std::int16_t>(buf, 72);
  for (int i = 0; i < 8; ++i) h.pixdim[i] = get<float>(buf, 76 + 4 * i);
  const float vox_offset = get<float>(buf, 108);
  if (!(vox_offset >= static_cast<float>(kNiftiHeaderSize)) || vox_offset != std::floor(vox_offset) ||
      vox_offset > 1e9f) {
    throw fail(108, "invalid vox_offset");
  }
  h.vox_offset = static_cast<std::size_t>(vox_offset);
  h.scl_slope = get<float>(buf, 112);
  h.scl_inter = get<float>(buf, 116);
  if (!std::isfinite(h.scl_slope) || !std::isfinite(h.scl_inter)) {
    throw fail(112, "non-finite intensity scaling");
  }
  for (int i = 1; i <= 3; ++i) {
    if (!(h.pixdim[i] > 0.0f) || !std::isfinite(h.pixdim[i])) {
      throw fail(76 + 4 * i, "voxel size pixdim[" + std::to_string(i) + "] must be positive");
    }
    h.voxel_size[i - 1] = h.pixdim[i];
  }
  const auto qform_code = get<std::int16_t>(buf, 252);
  const auto sform_code = get<std::int16_t>(buf, 254);
  try {
    if (sform_code > 0) {
      Affine::Rows rows{};
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 4; ++c) {
          const float v = get<float>(buf, 280 + 16 * r + 4 * c);
          if (!std::isfinite(v)) throw fail(280 + 16 * r + 4 * c, "non-finite sform entry");
          rows[r][c] = v;
        }
      }
      h.affine = Affine(rows);
    } else if (qform_code > 0) {
      throw fail(252, "qform-only orientation is not supported; an sform is required");
    } else {
      h.affine = Affine::scaling(h.voxel_size);
    }
  } catch (const InvalidParameter& e) {
    throw fail(280, e.what());
  }
  return h;
}

inline std::vector<std::uint8_t> header_bytes(const std::array<std::int16_t, 8>& dim,
                                              std::int16_t datatype, std::int16_t bitpix,
                                              const Vec3d& voxel_size, const Affine& affine) {
  std::vector<std::uint8_t> buf(kNiftiDataOffset, 0);
  put<std::int32_t>(buf, 0, 348);
  buf[38] = 'r';
  for (int i = 0; i < 8; ++i) put<std::int16_t>(buf, 40 + 2 * i, dim[i]);
  put<std::int16_t>(buf, 70, datatype);
  put<std::int16_t>(buf, 72, bitpix);
  put<float>(buf, 76, 1.0f);
  for (int i = 0; i < 3; ++i) put<float>(buf, 80 + 4 * i, static_cast<float>(voxel_size[i]));
  for (int i = 4; i < 8; ++i) put<float>(buf, 76 + 4 * i, 1.0f);
  put<float>(buf, 108, static_cast<float>(kNiftiDataOffset));
  put<float>(buf, 112, 1.0f);
  buf[123] = 2;  // xyzt_units: mm
  put<std::int16_t>(buf, 254, 1);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) {
      put<float>(buf, 280 + 16 * r + 4 * c, static_cast<float>(affine.rows()[r][c]));
    }
  }
  std::memcpy(buf.data() + 344, "n+1\0", 4);
  return buf;
}

inline double read_sample(const std::vector<std::uint8_t>& buf, std::size_t offset,
                          std::int16_t datatype) {
  switch (datatype) {
    case kUint8: return buf[offset];
    case kInt16: return get<std::int16_t>(buf, offset);
    case kInt32: return get<std::int32_t>(buf, offset);
    case kFloat32: return get<float>(buf, offset);
    case kFloat64: return get<double>(buf, offset);
    default: return 0.0;
  }
}

inline void require_data(const std::vector<std::uint8_t>& buf, const Header& h,
                         std::size_t expected, const std::string& path) {
  const std::size_t available = buf.size() > h.vox_offset ? buf.size() - h.vox_offset : 0;
  if (available < expected) {
    throw FormatError(path + ": truncated data block: expected " + std::to_string(expected) +
                      " bytes from byte offset " + std::to_string(h.vox_offset) + ", found " +
                      std::to_string(available));
  }
}

}  // namespace nifti

inline FodVolume load_volume(const std::string& path) {
  using namespace nifti;
  const std::vector<std::uint8_t> buf = read_file(path);
  const Header h = parse_header(buf, path);
  if (h.dim[0] != 4) {
    throw FormatError(path + ": FOD volume needs dim[0] = 4, got " + std::to_string(h.dim[0]) +
                      " (byte offset 40)");
  }
  if (h.datatype != kFloat32) {
    throw FormatError(path + ": unsupported datatype " + std::to_string(h.datatype) +
                      ", only float32 (16) is accepted (byte offset 70)");
  }
  if (h.bitpix != 32) throw FormatError(path + ": bitpix must be 32 (byte offset 72)");
  int lmax = 0;
  try {
    lmax = sh::lmax_for_count(static_cast<int>(h.dim[4]));
  } catch (const Error&) {
    throw FormatError(path + ": dim[4] = " + std::to_string(h.dim[4]) +
                      " is not an even-order SH coefficient count (byte offset 48)");
  }
  const Dims dims{static_cast<int>(h.dim[1]), static_cast<int>(h.dim[2]),
                  static_cast<int>(h.dim[3])};
  const std::int64_t nvox = voxel_count(dims);
  const std::int64_t K = h.dim[4];
  require_data(buf, h, static_cast<std::size_t>(nvox * K * 4), path);
  const bool scaled = h.scl_slope != 0.0f && (h.scl_slope != 1.0f || h.scl_inter != 0.0f);
  std::vector<double> coeffs(static_cast<std::size_t>(nvox * K));
  for (std::int64_t c = 0; c < K; ++c) {
    for (std::int64_t v = 0; v < nvox; ++v) {
      double x = get<float>(buf, h.vox_offset + 4 * static_cast<std::size_t>(v + nvox * c));
      if (scaled) x = x * h.scl_slope + h.scl_inter;
      if (!std::isfinite(x)) {
        throw FormatError(path + ": non-finite coefficient at byte offset " +
                          std::to_string(h.vox_offset + 4 * (v + nvox * c)));
      }
      coeffs[v * K + c] = x;
    }
  }
  return FodVolume(dims, lmax, std::move(coeffs), h.affine, h.voxel_size);
}

// Coefficients, affine and voxel sizes are written as float32.
inline void save_volume(const std::string& path, const FodVolume& volume) {
  using namespace nifti;
  const Dims& d = volume.dims();
  const std::int64_t nvox = volume.voxel_count();
  const int K = volume.num_coeffs();
  std::vector<std::uint8_t> buf = header_bytes(
      {4, static_cast<std::int16_t>(d[0]), static_cast<std::int16_t>(d[1]),
       static_cast<std::int16_t>(d[2]), static_cast<std::int16_t>(K), 1, 1, 1},
      kFloat32, 32, volume.voxel_size(), volume.affine());
  buf.resize(kNiftiDataOffset + static_cast<std::size_t>(nvox * K) * 4);
  for (std::int64_t c = 0; c < K; ++c) {
    for (std::int64_t v = 0; v < nvox; ++v) {
      put<float>(buf, kNiftiDataOffset + 4 * static_cast<std::size_t>(v + nvox * c),
                 static_cast<float>(volume.coefficients(v)[c]));
    }
  }
  write_file(path, buf);
}

inline BinaryMask load_mask(const std::string& path) {
  using namespace nifti;
  const std::vector<std::uint8_t> buf = read_file(path);
  const Header h = parse_header(buf, path);
  for (int i = 4; i <= h.dim[0]; ++i) {
    if (h.dim[i] != 1) {
      throw FormatError(path + ": mask must be 3-D (byte offset " + std::to_string(40 + 2 * i) +
                        ")");
    }
  }
  const int bpv = bytes_per_voxel(h.datatype);
  if (bpv == 0) {
    throw FormatError(path + ": unsupported datatype " + std::to_string(h.datatype) +
                      " for a mask (byte offset 70)");
  }
  if (h.bitpix != 8 * bpv) throw FormatError(path + ": bitpix does not match datatype (byte offset 72)");
  const Dims dims{static_cast<int>(h.dim[1]), static_cast<int>(h.dim[2]),
                  static_cast<int>(h.dim[3])};
  const std::int64_t nvox = voxel_count(dims);
  require_data(buf, h, static_cast<std::size_t>(nvox * bpv), path);
  std::vector<std::uint8_t> values(static_cast<std::size_t>(nvox));
  for (std::int64_t v = 0; v < nvox; ++v) {
    const double x = read_sample(buf, h.vox_offset + static_cast<std::size_t>(v * bpv), h.datatype);
    values[v] = (x != 0.0 && !std::isnan(x)) ? 1 : 0;
  }
  return BinaryMask(dims, std::move(values), h.affine);
}

inline void save_mask(const std::string& path, const BinaryMask& mask,
                      const Vec3d& voxel_size) {
  using namespace nifti;
  const Dims& d = mask.dims();
  std::vector<std::uint8_t> buf = header_bytes(
      {3, static_cast<std::int16_t>(d[0]), static_cast<std::int16_t>(d[1]),
       static_cast<std::int16_t>(d[2]), 1, 1, 1, 1},
      kUint8, 8, voxel_size, mask.affine());
  buf.insert(buf.end(), mask.values().begin(), mask.values().end());
  write_file(path, buf);
}

inline void save_mask(const std::string& path, const BinaryMask& mask) {
  save_mask(path, mask, mask.affine().column_norms());
}

}  // namespace difftrack::io
