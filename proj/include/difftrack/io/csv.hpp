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

#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "difftrack/types.hpp"

namespace difftrack::io {

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(std::string_view s, const std::string& context) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw FormatError(context + ": cannot parse number \"" + std::string(s) + "\"");
  }
  return v;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

struct SeedTable {
  std::vector<Vec3d> positions;   // world mm
  std::vector<Vec3d> directions;  // unit vectors
};

inline constexpr std::string_view kSeedHeader = "index,x,y,z,dx,dy,dz";

inline std::string format_seeds(const SeedTable& seeds) {
  if (seeds.positions.size() != seeds.directions.size()) {
    throw DimensionError("seed table position and direction counts differ");
  }
  std::string out(kSeedHeader);
  out += '\n';
  for (std::size_t i = 0; i < seeds.positions.size(); ++i) {
    out += std::to_string(i);
    for (double v : seeds.positions[i]) out += ',' + format_double(v);
    for (double v : seeds.directions[i]) out += ',' + format_double(v);
    out += '\n';
  }
  return out;
}

inline SeedTable parse_seeds(const std::string& text, const std::string& path = "<memory>") {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty seed table");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kSeedHeader) {
    throw FormatError(path + ": seed table header must be \"" + std::string(kSeedHeader) + "\"");
  }
  SeedTable seeds;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const std::string ctx = path + " line " + std::to_string(row);
    const auto f = split_fields(line);
    if (f.size() != 7) throw FormatError(ctx + ": expected 7 fields, got " + std::to_string(f.size()));
    const double index = parse_double(f[0], ctx);
    if (index != static_cast<double>(seeds.positions.size())) {
      throw FormatError(ctx + ": seed index out of sequence");
    }
    Vec3d p, d;
    for (int a = 0; a < 3; ++a) {
      p[a] = parse_double(f[1 + a], ctx);
      d[a] = parse_double(f[4 + a], ctx);
    }
    if (!all_finite(p) || !all_finite(d)) throw FormatError(ctx + ": non-finite value");
    if (std::fabs(norm(d) - 1.0) > 1e-6) {
      throw FormatError(ctx + ": direction is not unit length within 1e-6");
    }
    seeds.positions.push_back(p);
    seeds.directions.push_back(d);
  }
  return seeds;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path + ": cannot open file for writing");
  out << text;
  if (!out) throw FormatError(path + ": write failed");
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_seeds(const std::string& path, const SeedTable& seeds) {
  write_text(path, format_seeds(seeds));
}

inline SeedTable load_seeds(const std::string& path) { return parse_seeds(read_text(path), path); }

}  // namespace difftrack::io
