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

// Synthetic FOD fields with known peak directions.
//
// A lobe along unit axis a is the band-limited projection of the antipodal
// delta pair at +-a, c_k = Y_k(a), scaled so that its amplitude at a is 1.
// Coefficients are rounded to float32 so the fields survive a NIfTI round
// trip unchanged.

#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "difftrack/fod_volume.hpp"
#include "difftrack/sh_basis.hpp"
#include "difftrack/types.hpp"

namespace difftrack::synth {

enum class Kind { kIsotropic, kSingleLobe, kBentLobe, kTwoCrossing };

inline Kind parse_kind(std::string_view s) {
  if (s == "isotropic") return Kind::kIsotropic;
  if (s == "single-lobe") return Kind::kSingleLobe;
  if (s == "bent-lobe") return Kind::kBentLobe;
  if (s == "two-crossing") return Kind::kTwoCrossing;
  throw InvalidParameter("unknown synthetic kind \"" + std::string(s) +
                         "\" (isotropic, single-lobe, bent-lobe, two-crossing)");
}

struct Spec {
  Kind kind = Kind::kSingleLobe;
  Dims dims{8, 8, 8};
  int lmax = 8;
  Vec3d axis{0.0, 0.0, 1.0};
  Vec3d second_axis{1.0, 0.0, 0.0};  // two-crossing only; must be orthogonal to axis
  double bend_degrees = 15.0;        // bent-lobe: rotation about z per voxel step in x
  Vec3d voxel_size{1.0, 1.0, 1.0};
  Vec3d origin{0.0, 0.0, 0.0};
};

inline Vec3d unit(const Vec3d& v) {
  const double n = norm(v);
  if (!(n > 0.0) || !std::isfinite(n)) throw InvalidDirection("axis must be finite and nonzero");
  return {v[0] / n, v[1] / n, v[2] / n};
}

// Unrounded lobe coefficients with unit peak amplitude.
inline std::vector<double> lobe(int lmax, const Vec3d& axis) {
  std::vector<double> c = sh::eval_basis(sh::cartesian_to_angles(unit(axis)), lmax);
  double peak = 0.0;
  for (int l = 0; l <= lmax; l += 2) peak += (2.0 * l + 1.0) / (4.0 * kPi);
  for (double& v : c) v /= peak;
  return c;
}

inline std::vector<double> isotropic(int lmax) {
  std::vector<double> c(sh::num_coefficients(lmax), 0.0);
  c[0] = std::sqrt(4.0 * kPi);
  return c;
}

inline Vec3d rotate_z(const Vec3d& v, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]};
}

// Peak axis of the bent-lobe field in voxel column i.
inline Vec3d bent_axis(const Spec& spec, int i) {
  return rotate_z(unit(spec.axis), i * spec.bend_degrees * kPi / 180.0);
}

inline FodVolume make_volume(const Spec& spec) {
  validate_dims(spec.dims);
  const int K = sh::num_coefficients(spec.lmax);
  std::vector<double> fixed;
  switch (spec.kind) {
    case Kind::kIsotropic: fixed = isotropic(spec.lmax); break;
    case Kind::kSingleLobe: fixed = lobe(spec.lmax, spec.axis); break;
    case Kind::kTwoCrossing: {
      const Vec3d a = unit(spec.axis), b = unit(spec.second_axis);
      if (std::fabs(dot(a, b)) > 1e-9) {
        throw InvalidParameter("two-crossing axes must be orthogonal");
      }
      fixed = lobe(spec.lmax, a);
      const std::vector<double> second = lobe(spec.lmax, b);
      for (int k = 0; k < K; ++k) fixed[k] += second[k];
      break;
    }
    case Kind::kBentLobe: break;
  }
  std::vector<std::vector<double>> columns;
  if (spec.kind == Kind::kBentLobe) {
    for (int i = 0; i < spec.dims[0]; ++i) columns.push_back(lobe(spec.lmax, bent_axis(spec, i)));
  }
  const std::int64_t nvox = voxel_count(spec.dims);
  std::vector<double> coeffs(static_cast<std::size_t>(nvox * K));
  for (std::int64_t v = 0; v < nvox; ++v) {
    const std::vector<double>& src =
        spec.kind == Kind::kBentLobe ? columns[v % spec.dims[0]] : fixed;
    for (int k = 0; k < K; ++k) coeffs[v * K + k] = static_cast<float>(src[k]);
  }
  const Vec3d vs = spec.voxel_size;
  return FodVolume(spec.dims, spec.lmax, std::move(coeffs), Affine::scaling(vs, spec.origin), vs);
}

inline BinaryMask full_mask(const FodVolume& volume) {
  return BinaryMask::filled(volume.dims(), volume.affine(), true);
}

}  // namespace difftrack::synth
