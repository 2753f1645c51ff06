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

// MRtrix .tck track files.
//
//   mrtrix tracks
//   datatype: Float32LE
//   count: <N>
//   data_crc32: <8 hex digits>
//   file: . <offset>
//   END
//
// followed at <offset> by float32 xyz triplets. Each streamline ends with a
// NaN triplet; the stream ends with an Inf triplet. data_crc32 covers every
// byte from <offset> to the end of the file and is checked when present.
// Files from other writers may pad the header; strict decoding accepts only
// the layout written here, with the checksum present and no padding.

#pragma once

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "difftrack/io/nifti.hpp"
#include "difftrack/propagator.hpp"
#include "difftrack/types.hpp"

namespace difftrack::io {

namespace tck {

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = ::crc32(crc, bytes.data() + pos, n);
    pos += n;
  }
  return static_cast<std::uint32_t>(crc);
}

inline void append_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

inline float read_f32(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

inline std::string hex8(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

}  // namespace tck

inline std::vector<std::uint8_t> encode_tracks(std::span<const Streamline> streamlines) {
  std::vector<std::uint8_t> body;
  const float nan = std::numeric_limits<float>::quiet_NaN();
  const float inf = std::numeric_limits<float>::infinity();
  for (std::size_t s = 0; s < streamlines.size(); ++s) {
    if (streamlines[s].empty()) {
      throw InvalidInput("streamline " + std::to_string(s) + " has no points");
    }
    for (const Vec3d& p : streamlines[s]) {
      for (double c : p) {
        const auto f = static_cast<float>(c);
        if (!std::isfinite(f)) {
          throw InvalidInput("streamline " + std::to_string(s) +
                             " has a coordinate that is not finite in float32");
        }
        tck::append_f32(body, f);
      }
    }
    for (int a = 0; a < 3; ++a) tck::append_f32(body, nan);
  }
  for (int a = 0; a < 3; ++a) tck::append_f32(body, inf);

  const std::string head = "mrtrix tracks\ndatatype: Float32LE\ncount: " +
                           std::to_string(streamlines.size()) +
                           "\ndata_crc32: " + tck::hex8(tck::crc32_of(body)) + "\nfile: . ";
  const std::string tail = "\nEND\n";
  // The offset counts its own digits.
  std::size_t offset = head.size() + tail.size() + 1;
  while (head.size() + std::to_string(offset).size() + tail.size() != offset) {
    offset = head.size() + std::to_string(offset).size() + tail.size();
  }
  const std::string text = head + std::to_string(offset) + tail;
  std::vector<std::uint8_t> out(text.begin(), text.end());
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

inline std::vector<Streamline> decode_tracks(std::span<const std::uint8_t> bytes,
                                             const std::string& path = "<memory>",
                                             bool strict = false) {
  auto fail = [&](const std::string& what) { return FormatError(path + ": " + what); };

  std::size_t pos = 0;
  auto next_line = [&](std::string& line) {
    const std::size_t start = pos;
    while (pos < bytes.size() && bytes[pos] != '\n') {
      if (pos - start > 4096) throw fail("header line too long at byte " + std::to_string(start));
      ++pos;
    }
    if (pos >= bytes.size()) throw fail("header ends without END line");
    line.assign(reinterpret_cast<const char*>(bytes.data()) + start, pos - start);
    ++pos;
  };

  std::string line;
  next_line(line);
  if (line != "mrtrix tracks") throw fail("missing \"mrtrix tracks\" magic line");
  std::map<std::string, std::string> keys;
  while (true) {
    next_line(line);
    if (line == "END") break;
    const std::size_t colon = line.find(": ");
    if (colon == std::string::npos || colon == 0) {
      throw fail("malformed header line \"" + line + "\"");
    }
    const std::string key = line.substr(0, colon);
    if (key.find_first_of("\r\t") != std::string::npos) throw fail("malformed header key");
    if (!keys.emplace(key, line.substr(colon + 2)).second) {
      if (key == "datatype" || key == "count" || key == "file" || key == "data_crc32") {
        throw fail("duplicate header key \"" + key + "\"");
      }
    }
  }
  const std::size_t header_end = pos;

  auto require = [&](const std::string& key) -> const std::string& {
    const auto it = keys.find(key);
    if (it == keys.end()) throw fail("missing header key \"" + key + "\"");
    return it->second;
  };
  auto parse_uint = [&](const std::string& s, const std::string& what) {
    if (s.empty() || s.size() > 18 || s.find_first_not_of("0123456789") != std::string::npos) {
      throw fail("invalid " + what + " \"" + s + "\"");
    }
    return static_cast<std::size_t>(std::stoull(s));
  };

  if (require("datatype") != "Float32LE") {
    throw fail("unsupported datatype \"" + keys["datatype"] + "\", only Float32LE");
  }
  const std::size_t count = parse_uint(require("count"), "count");
  const std::string& file = require("file");
  if (file.rfind(". ", 0) != 0) throw fail("file key must reference the same file (\". <offset>\")");
  const std::size_t offset = parse_uint(file.substr(2), "data offset");
  if (offset < header_end || offset > bytes.size() || (strict && offset != header_end)) {
    throw fail("data offset " + std::to_string(offset) + " is invalid for a header ending at byte " +
               std::to_string(header_end));
  }
  const std::span<const std::uint8_t> body = bytes.subspan(offset);
  if (strict && !keys.count("data_crc32")) throw fail("missing header key \"data_crc32\"");
  if (const auto it = keys.find("data_crc32"); it != keys.end()) {
    if (it->second.size() != 8 ||
        it->second.find_first_not_of("0123456789abcdef") != std::string::npos) {
      throw fail("malformed data_crc32 \"" + it->second + "\"");
    }
    const std::string actual = tck::hex8(tck::crc32_of(body));
    if (actual != it->second) {
      throw fail("data checksum mismatch: header " + it->second + ", data " + actual);
    }
  }
  if (body.size() % 12 != 0) {
    throw fail("data block of " + std::to_string(body.size()) +
               " bytes is not a whole number of float32 triplets");
  }

  std::vector<Streamline> out;
  Streamline current;
  bool terminated = false;
  for (std::size_t off = 0; off < body.size(); off += 12) {
    const std::size_t at = offset + off;
    if (terminated) throw fail("data after the terminator triplet at byte " + std::to_string(at));
    const float x = tck::read_f32(body.data() + off);
    const float y = tck::read_f32(body.data() + off + 4);
    const float z = tck::read_f32(body.data() + off + 8);
    if (std::isnan(x) && std::isnan(y) && std::isnan(z)) {
      if (current.empty()) throw fail("empty streamline at byte " + std::to_string(at));
      out.push_back(std::move(current));
      current.clear();
    } else if (std::isinf(x) && std::isinf(y) && std::isinf(z) && x > 0 && y > 0 && z > 0) {
      terminated = true;
    } else if (std::isfinite(x) && std::isfinite(y) && std::isfinite(z)) {
      current.push_back({x, y, z});
    } else {
      throw fail("invalid triplet at byte " + std::to_string(at));
    }
  }
  if (!terminated) throw fail("missing (Inf, Inf, Inf) terminator triplet");
  if (!current.empty()) throw fail("last streamline is not closed by a NaN triplet");
  if (out.size() != count) {
    throw fail("header count " + std::to_string(count) + " but data holds " +
               std::to_string(out.size()) + " streamlines");
  }
  return out;
}

inline void save_tracks(const std::string& path, std::span<const Streamline> streamlines) {
  nifti::write_file(path, encode_tracks(streamlines));
}

inline std::vector<Streamline> load_tracks(const std::string& path, bool strict = false) {
  const std::vector<std::uint8_t> bytes = nifti::read_file(path);
  return decode_tracks(bytes, path, strict);
}

}  // namespace difftrack::io
