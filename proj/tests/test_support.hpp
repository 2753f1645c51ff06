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

// Oracles and fixtures shared by the unit tests and the acceptance runner.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "difftrack/difftrack.hpp"

namespace testing_support {

using difftrack::Vec3d;

inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  std::random_device rd;
  const auto dir = std::filesystem::temp_directory_path() /
                   ("difftrack_" + tag + "_" + std::to_string(rd()) + "_" +
                    std::to_string(counter++));
  std::filesystem::create_directories(dir);
  return dir;
}

inline Vec3d unit(const Vec3d& v) {
  const double n = difftrack::norm(v);
  return {v[0] / n, v[1] / n, v[2] / n};
}

inline Vec3d random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  while (true) {
    const Vec3d v{n(rng), n(rng), n(rng)};
    if (difftrack::norm(v) > 1e-6) return unit(v);
  }
}

inline Vec3d cross(const Vec3d& a, const Vec3d& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

inline double angle_deg(const Vec3d& a, const Vec3d& b) {
  const double c = std::clamp(difftrack::dot(unit(a), unit(b)), -1.0, 1.0);
  return std::acos(c) * 180.0 / difftrack::kPi;
}

// Any two unit vectors orthogonal to c.
inline void tangent_frame(const Vec3d& c, Vec3d& e1, Vec3d& e2) {
  const Vec3d helper = std::fabs(c[0]) < 0.9 ? Vec3d{1, 0, 0} : Vec3d{0, 1, 0};
  e1 = unit(cross(c, helper));
  e2 = cross(c, e1);
}

// Unit vector at angle `deg` from c, rotated by `phi` about c.
inline Vec3d tilt(const Vec3d& c, double deg, double phi) {
  Vec3d e1, e2;
  tangent_frame(c, e1, e2);
  const double r = deg * difftrack::kPi / 180.0;
  Vec3d v;
  for (int a = 0; a < 3; ++a) {
    v[a] = std::cos(r) * c[a] + std::sin(r) * (std::cos(phi) * e1[a] + std::sin(phi) * e2[a]);
  }
  return unit(v);
}

inline double eval_amplitude(const std::vector<double>& c, int lmax, const Vec3d& d) {
  const std::vector<double> y =
      difftrack::sh::eval_basis(difftrack::sh::cartesian_to_angles(d), lmax);
  double s = 0.0;
  for (std::size_t k = 0; k < c.size(); ++k) s += y[k] * c[k];
  return s;
}

struct GridPeak {
  Vec3d direction{};
  double amplitude = 0.0;
  bool interior = false;  // best sample was not on the first-stage patch border
};

// Exhaustive search of a square gnomonic patch around `center`, followed by
// successively finer patches around the best sample.
inline GridPeak grid_peak_near(const std::vector<double>& c, int lmax, const Vec3d& center,
                               double radius_deg, double step_deg, double final_step_deg) {
  GridPeak best;
  best.amplitude = -std::numeric_limits<double>::infinity();
  Vec3d mid = unit(center);
  double radius = radius_deg, step = step_deg;
  bool first = true;
  while (true) {
    Vec3d e1, e2;
    tangent_frame(mid, e1, e2);
    const int n = static_cast<int>(std::ceil(radius / step));
    GridPeak stage;
    stage.amplitude = -std::numeric_limits<double>::infinity();
    int best_i = 0, best_j = 0;
    for (int i = -n; i <= n; ++i) {
      for (int j = -n; j <= n; ++j) {
        const double a = std::tan(i * step * difftrack::kPi / 180.0);
        const double b = std::tan(j * step * difftrack::kPi / 180.0);
        const Vec3d d = unit({mid[0] + a * e1[0] + b * e2[0], mid[1] + a * e1[1] + b * e2[1],
                              mid[2] + a * e1[2] + b * e2[2]});
        const double v = eval_amplitude(c, lmax, d);
        if (v > stage.amplitude) {
          stage.amplitude = v;
          stage.direction = d;
          best_i = i;
          best_j = j;
        }
      }
    }
    if (first) {
      best.interior = std::abs(best_i) < n && std::abs(best_j) < n;
      first = false;
    }
    best.direction = stage.direction;
    best.amplitude = stage.amplitude;
    if (step <= final_step_deg) break;
    mid = stage.direction;
    radius = 2.0 * step;
    step = std::max(step / 10.0, final_step_deg);
  }
  return best;
}

// Full-sphere 1 degree (el, az) grid, then patch refinement around the winner.
inline GridPeak grid_peak_global(const std::vector<double>& c, int lmax, double final_step_deg) {
  GridPeak best;
  best.amplitude = -std::numeric_limits<double>::infinity();
  for (int ie = 0; ie <= 180; ++ie) {
    for (int ia = 0; ia < 360; ++ia) {
      const double el = ie * difftrack::kPi / 180.0, az = ia * difftrack::kPi / 180.0;
      const Vec3d d{std::sin(el) * std::cos(az), std::sin(el) * std::sin(az), std::cos(el)};
      const double v = eval_amplitude(c, lmax, d);
      if (v > best.amplitude) {
        best.amplitude = v;
        best.direction = d;
      }
    }
  }
  return grid_peak_near(c, lmax, best.direction, 2.0, 0.1, final_step_deg);
}

// O(n^2) double loop without early exit.
inline double brute_directed(const std::vector<Vec3d>& a, const std::vector<Vec3d>& b) {
  double worst = 0.0;
  for (const auto& p : a) {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& q : b) {
      const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
      m = std::min(m, std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    worst = std::max(worst, m);
  }
  return worst;
}

inline double brute_hausdorff(const std::vector<Vec3d>& a, const std::vector<Vec3d>& b) {
  return std::max(brute_directed(a, b), brute_directed(b, a));
}

inline std::vector<Vec3d> random_polyline(std::mt19937_64& rng, int n, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<Vec3d> p(n);
  for (auto& v : p) v = {u(rng), u(rng), u(rng)};
  return p;
}

// FOD with lobes of random weight along the given axes plus small noise.
inline std::vector<double> lobes_with_noise(int lmax, const std::vector<Vec3d>& axes,
                                            const std::vector<double>& weights, double noise,
                                            std::mt19937_64& rng) {
  std::vector<double> c(difftrack::sh::num_coefficients(lmax), 0.0);
  for (std::size_t i = 0; i < axes.size(); ++i) {
    const std::vector<double> l = difftrack::synth::lobe(lmax, axes[i]);
    for (std::size_t k = 0; k < c.size(); ++k) c[k] += weights[i] * l[k];
  }
  std::normal_distribution<double> n(0.0, noise);
  for (double& v : c) v += n(rng);
  return c;
}

// Volume with one fixed coefficient vector at every voxel, unrounded.
inline difftrack::FodVolume constant_volume(difftrack::Dims dims, int lmax,
                                            const std::vector<double>& c,
                                            const Vec3d& voxel_size = {1, 1, 1}) {
  const std::int64_t nvox = difftrack::voxel_count(dims);
  std::vector<double> all;
  all.reserve(static_cast<std::size_t>(nvox) * c.size());
  for (std::int64_t v = 0; v < nvox; ++v) all.insert(all.end(), c.begin(), c.end());
  return difftrack::FodVolume(dims, lmax, std::move(all), difftrack::Affine::scaling(voxel_size),
                              voxel_size);
}

struct TerminationCase {
  std::string name;
  difftrack::FodVolume volume;
  difftrack::BinaryMask mask;
  Vec3d seed;
  Vec3d direction;
  difftrack::TrackingParams params;
  difftrack::Termination reason;
  int valid_length;  // predicted; the deactivation step is valid_length - 1
};

// One fixture per termination reason on a 1 mm identity grid with unit steps.
// Seeds sit on grid lines along +x so every visited position is predictable.
inline std::vector<TerminationCase> termination_cases() {
  using namespace difftrack;
  std::vector<TerminationCase> cases;
  synth::Spec spec;
  spec.kind = synth::Kind::kSingleLobe;
  spec.axis = {1, 0, 0};
  spec.dims = {12, 9, 9};
  const FodVolume straight = synth::make_volume(spec);
  const BinaryMask full = synth::full_mask(straight);
  TrackingParams base;
  base.step_size = 1.0;
  base.amplitude_threshold = 0.1;
  base.angle_threshold = 10.0 * kPi / 180.0;
  base.max_points = 40;

  {
    // Omega spans x in [0, 9]; 9.3 is written (its nearest mask voxel is 9)
    // and rejected as out of the domain on the next iteration.
    synth::Spec s = spec;
    s.dims = {10, 9, 9};
    const FodVolume v = synth::make_volume(s);
    cases.push_back({"ExitImage", v, synth::full_mask(v), {0.3, 4, 4}, {1, 0, 0}, base,
                     Termination::kExitImage, 10});
  }
  {
    // Voxel column i carries amplitude 1 - 0.1 i; with cutoff 0.55 the point
    // at x = 5 (amplitude 0.5) is the first below threshold.
    std::vector<double> coeffs;
    const std::vector<double> lobe = synth::lobe(8, {1, 0, 0});
    for (int v = 0; v < voxel_count(spec.dims); ++v) {
      const double scale = 1.0 - 0.1 * (v % spec.dims[0]);
      for (double c : lobe) coeffs.push_back(scale * c);
    }
    const FodVolume v(spec.dims, 8, std::move(coeffs));
    TrackingParams p = base;
    p.amplitude_threshold = 0.55;
    cases.push_back({"Model", v, synth::full_mask(v), {0, 4, 4}, {1, 0, 0}, p,
                     Termination::kModel, 6});
  }
  {
    // The lobe axis turns 15 degrees per voxel column, above the 10 degree
    // threshold, so the first direction change stops the streamline.
    synth::Spec s = spec;
    s.kind = synth::Kind::kBentLobe;
    s.bend_degrees = 15.0;
    const FodVolume v = synth::make_volume(s);
    cases.push_back({"HighCurvature", v, synth::full_mask(v), {0, 4, 4}, {1, 0, 0}, base,
                     Termination::kHighCurvature, 2});
  }
  {
    // Mask keeps columns 0..6; x = 7 is the first position outside it.
    BinaryMask cropped = BinaryMask::filled(spec.dims, straight.affine(), false);
    for (int i = 0; i <= 6; ++i) {
      for (int j = 0; j < spec.dims[1]; ++j) {
        for (int k = 0; k < spec.dims[2]; ++k) cropped.set(i, j, k, true);
      }
    }
    cases.push_back({"ExitMask", straight, cropped, {1, 4, 4}, {1, 0, 0}, base,
                     Termination::kExitMask, 6});
  }
  {
    TrackingParams p = base;
    p.max_points = 5;
    cases.push_back({"LengthExceed", straight, full, {1, 4, 4}, {1, 0, 0}, p,
                     Termination::kLengthExceed, 5});
  }
  {
    TrackingParams p = base;
    p.amplitude_threshold = 1.5;
    cases.push_back({"SeedRejected", straight, full, {1, 4, 4}, {1, 0, 0}, p,
                     Termination::kSeedRejected, 1});
  }
  return cases;
}

// Small noisy volume with a holed mask, random seeds and random tracking
// parameters.
struct RandomScene {
  difftrack::FodVolume volume;
  difftrack::BinaryMask mask;
  std::vector<Vec3d> pos, dir;
  difftrack::TrackingParams params;
};

inline RandomScene random_scene(std::mt19937_64& rng, int n) {
  using namespace difftrack;
  std::uniform_int_distribution<int> kind(0, 3);
  synth::Spec s;
  s.dims = {10, 9, 8};
  s.lmax = 4;
  s.voxel_size = {1.0, 1.5, 1.25};
  s.axis = random_unit(rng);
  Vec3d e1, e2;
  tangent_frame(s.axis, e1, e2);
  s.second_axis = e1;
  s.bend_degrees = std::uniform_real_distribution<double>(2.0, 30.0)(rng);
  s.kind = static_cast<synth::Kind>(kind(rng));
  FodVolume v = synth::make_volume(s);
  std::normal_distribution<double> noise(0.0, 0.02);
  for (std::int64_t vox = 0; vox < v.voxel_count(); ++vox) {
    for (double& c : v.coefficients(vox)) c += noise(rng);
  }
  BinaryMask m = synth::full_mask(v);
  std::bernoulli_distribution hole(0.05);
  for (int k = 0; k < s.dims[2]; ++k) {
    for (int j = 0; j < s.dims[1]; ++j) {
      for (int i = 0; i < s.dims[0]; ++i) {
        if (hole(rng)) m.set(i, j, k, false);
      }
    }
  }
  TrackingParams p;
  p.step_size = std::uniform_real_distribution<double>(0.2, 1.5)(rng);
  p.amplitude_threshold = std::uniform_real_distribution<double>(0.0, 0.6)(rng);
  p.angle_threshold = std::uniform_real_distribution<double>(0.1, 1.2)(rng);
  p.max_points = std::uniform_int_distribution<int>(2, 25)(rng);
  p.bidirectional = std::bernoulli_distribution(0.3)(rng);
  const std::uint64_t seed = rng();
  return {v, m, sample_seeds(m, n, seed), sample_directions(n, seed), p};
}

}  // namespace testing_support
