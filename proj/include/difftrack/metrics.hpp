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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "difftrack/propagator.hpp"
#include "difftrack/types.hpp"

namespace difftrack {

// Vertex-based: max over p in a of min over q in b of |p - q|.
// The inner scan stops as soon as it finds a point closer than the running
// maximum, since such a p cannot raise the result.
inline double directed_hausdorff(std::span<const Vec3d> a, std::span<const Vec3d> b) {
  if (a.empty() || b.empty()) throw InvalidInput("Hausdorff distance of an empty streamline");
  double best_sq = 0.0;
  for (const Vec3d& p : a) {
    double min_sq = std::numeric_limits<double>::infinity();
    for (const Vec3d& q : b) {
      const Vec3d diff = p - q;
      const double d2 = dot(diff, diff);
      if (d2 < min_sq) {
        min_sq = d2;
        if (min_sq <= best_sq) break;
      }
    }
    best_sq = std::max(best_sq, min_sq);
  }
  return std::sqrt(best_sq);
}

inline double hausdorff(std::span<const Vec3d> a, std::span<const Vec3d> b) {
  return std::max(directed_hausdorff(a, b), directed_hausdorff(b, a));
}

inline constexpr std::array<int, 4> kReportRanks = {10, 50, 95, 99};

struct DistanceReport {
  std::vector<double> pair_distances;  // mm
  std::map<int, double> percentiles;   // rank -> mm
  std::size_t count_below_1mm = 0;
};

// Nearest-rank percentile: the ceil(p/100 * n)-th smallest value.
inline double nearest_rank(std::span<const double> sorted, double rank) {
  if (sorted.empty()) throw InvalidInput("percentile of an empty distance list");
  const auto n = static_cast<double>(sorted.size());
  auto idx = static_cast<std::size_t>(std::ceil(rank / 100.0 * n));
  idx = std::clamp<std::size_t>(idx, 1, sorted.size());
  return sorted[idx - 1];
}

inline DistanceReport percentile_report(std::vector<double> distances,
                                        std::span<const int> ranks = kReportRanks) {
  if (distances.empty()) throw InvalidInput("percentile report needs at least one distance");
  DistanceReport report;
  report.pair_distances = distances;
  std::sort(distances.begin(), distances.end());
  for (int r : ranks) report.percentiles[r] = nearest_rank(distances, r);
  report.count_below_1mm = static_cast<std::size_t>(
      std::lower_bound(distances.begin(), distances.end(), 1.0) - distances.begin());
  return report;
}

// Pairs streamlines by index. With crop_to_shorter, the longer polyline of
// each pair is truncated to the shorter one's point count.
inline std::vector<double> paired_hausdorff(std::span<const Streamline> a,
                                            std::span<const Streamline> b,
                                            bool crop_to_shorter) {
  const std::size_t n = std::min(a.size(), b.size());
  std::vector<double> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const Vec3d> pa(a[i]), pb(b[i]);
    if (crop_to_shorter) {
      const std::size_t m = std::min(pa.size(), pb.size());
      pa = pa.first(m);
      pb = pb.first(m);
    }
    out.push_back(hausdorff(pa, pb));
  }
  return out;
}

}  // namespace difftrack
