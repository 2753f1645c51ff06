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

// Newton-Raphson ascent of an SH expansion on the unit sphere.
//
// Each step measures the spherical gradient of the amplitude at u, moves
// along the great circle in the gradient direction by the Newton angle
// |(dA/dt) / (d2A/dt2)| (clamped to max_dir_change), and renormalizes.
//
// The batched finder always runs max_iterations passes. An element whose step
// falls below angle_tolerance has its update mask cleared and its direction
// frozen for the rest of the call; the scalar reference instead returns on
// the first converged step and reports failure after max_iterations.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <type_traits>
#include <vector>

#include "difftrack/autodiff.hpp"
#include "difftrack/fod_volume.hpp"
#include "difftrack/sh_basis.hpp"
#include "difftrack/types.hpp"

namespace difftrack {

struct PoisonedDirection : Error {
  using Error::Error;
};

struct NewtonConstants {
  int max_iterations = 50;
  double angle_tolerance = 1e-4;  // rad
  double max_dir_change = 0.2;    // rad

  void validate() const {
    if (max_iterations < 1) throw InvalidParameter("max_iterations must be >= 1");
    if (!(angle_tolerance > 0.0 && angle_tolerance < max_dir_change &&
          max_dir_change < kPi / 2)) {
      throw InvalidParameter("require 0 < angle_tolerance < max_dir_change < pi/2");
    }
  }
};

// sin(el) is clamped to this value in the azimuthal metric factor.
inline constexpr double kPoleEpsilon = 1e-6;
// Added to the gradient norm before normalizing the ascent direction.
inline constexpr double kGradientEpsilon = 1e-12;
// Below this |d2A/dt2| the Newton step is undefined and the clamp is used.
inline constexpr double kDegenerateCurvature = 1e-12;

template <class T>
struct NewtonStep {
  Vec3<T> direction;  // updated unit direction
  T dt;               // angle moved (rad)
  T amplitude;        // A at the input direction
  T slope;            // dA/dt, the spherical gradient norm
  T curvature;        // d2A/dt2 along the ascent great circle
  Vec3<T> tangent;    // ascent tangent at the input direction
};

template <class T>
NewtonStep<T> newton_step(std::span<const T> coeffs, int lmax, const Vec3<T>& u,
                          const NewtonConstants& constants,
                          ad::BranchPattern* pattern = nullptr) {
  using ad::BranchKind;
  if (static_cast<int>(coeffs.size()) != sh::num_coefficients(lmax)) {
    throw DimensionError("coefficient count does not match lmax");
  }
  const sh::SphericalAngles<T> ang = sh::cartesian_to_angles(u);
  thread_local sh::BasisDerivatives<T> basis;
  sh::eval_basis_derivatives_into(ang, lmax, basis);

  auto contract = [&](const std::vector<T>& y) {
    return ad::dot(std::span<const T>(y), coeffs);
  };
  const T amp = contract(basis.value);
  const T a_el = contract(basis.d_el);
  const T a_az = contract(basis.d_az);
  const T a_elel = contract(basis.d2_el);
  const T a_azaz = contract(basis.d2_az);
  const T a_elaz = contract(basis.d_el_az);

  const T sin_el = ad::sin(ang.el);
  const T cos_el = ad::cos(ang.el);
  const T sin_az = ad::sin(ang.az);
  const T cos_az = ad::cos(ang.az);
  const T s = value_of(sin_el) < kPoleEpsilon ? T(kPoleEpsilon) : sin_el;

  // Spherical gradient in the orthonormal (e_el, e_az) frame.
  const T g_el = a_el;
  const T g_az = a_az / s;
  const T g2 = g_el * g_el + g_az * g_az;
  const bool flat = value_of(g2) == 0.0;
  const T g = flat ? T(0.0) : ad::sqrt(g2);
  const T d_el = g_el / (g + kGradientEpsilon);
  const T d_az = g_az / (g + kGradientEpsilon);

  // Covariant Hessian along the ascent direction, including the connection
  // terms of the (el, az) chart so that it equals the second derivative along
  // the great circle. The quadratic form is divided by g^2 rather than taken
  // on the epsilon-normalized direction, which would shrink as g vanishes.
  const T cot = cos_el / s;
  const T h_elaz = (a_elaz - cot * a_az) / s;
  const T h_azaz = a_azaz / (s * s) + cot * a_el;
  const T curv = flat ? T(0.0)
                      : (g_el * g_el * a_elel + 2.0 * (g_el * g_az * h_elaz) +
                         g_az * g_az * h_azaz) /
                            g2;

  const Vec3<T> e_el{cos_el * cos_az, cos_el * sin_az, -sin_el};
  const Vec3<T> e_az{-sin_az, cos_az, T(0.0)};
  Vec3<T> tangent;
  for (int i = 0; i < 3; ++i) tangent[i] = d_el * e_el[i] + d_az * e_az[i];

  T dt;
  Vec3<T> next;
  bool newton = false;
  const bool degenerate = ad::decide(pattern, std::fabs(value_of(curv)) < kDegenerateCurvature,
                                     BranchKind::kConvergence);
  if (degenerate) {
    const bool moving = ad::decide(pattern, value_of(g) > 0.0, BranchKind::kConvergence);
    dt = T(moving ? constants.max_dir_change : 0.0);
  } else {
    dt = ad::abs(-(g / curv));
    if (ad::decide(pattern, value_of(dt) > constants.max_dir_change, BranchKind::kConvergence)) {
      dt = T(constants.max_dir_change);
    } else {
      newton = true;
    }
  }
  const T cdt = ad::cos(dt);
  if (newton) {
    // sin(dt) * t written as sinc(dt) / |H| * grad, which stays smooth as the
    // gradient vanishes.
    const T sinc = value_of(dt) < 1e-4 ? T(1.0) - dt * dt / 6.0 : ad::sin(dt) / dt;
    const T scale = sinc / ad::abs(curv);
    for (int i = 0; i < 3; ++i) next[i] = cdt * u[i] + scale * (g_el * e_el[i] + g_az * e_az[i]);
  } else {
    const T sdt = ad::sin(dt);
    for (int i = 0; i < 3; ++i) next[i] = cdt * u[i] + sdt * tangent[i];
  }
  const T n = ad::sqrt(next[0] * next[0] + next[1] * next[1] + next[2] * next[2]);
  for (int i = 0; i < 3; ++i) next[i] = next[i] / n;

  if constexpr (std::is_same_v<T, double>) {
    if (!all_finite(next) || !std::isfinite(dt) || !std::isfinite(amp)) {
      throw PoisonedDirection("non-finite Newton step");
    }
  }
  return {next, dt, amp, g, curv, tangent};
}

template <class T>
struct PeakBatch {
  std::vector<Vec3<T>> directions;
  std::vector<T> amplitudes;
  std::vector<std::uint8_t> update_mask;
  std::vector<std::uint8_t> poisoned;
  int iterations_run = 0;
  std::int64_t basis_evaluations = 0;
};

// Per-iteration snapshot, for inspection in tests.
struct PeakIteration {
  std::vector<std::uint8_t> mask;
  std::vector<Vec3d> directions;
};

namespace detail {

template <class T>
std::vector<double> coefficient_values(const std::vector<T>& c) {
  std::vector<double> v(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) v[i] = value_of(c[i]);
  return v;
}

}  // namespace detail

// Batched ascent over pre-interpolated coefficient vectors.
template <class T>
PeakBatch<T> find_peaks_coeffs(std::span<const std::vector<T>> coeffs, int lmax,
                               std::span<const Vec3<T>> init, const NewtonConstants& constants,
                               ad::BranchPattern* pattern = nullptr,
                               std::vector<PeakIteration>* history = nullptr) {
  constants.validate();
  if (coeffs.size() != init.size()) throw DimensionError("batch size mismatch");
  const std::size_t B = init.size();
  PeakBatch<T> out;
  out.directions.assign(init.begin(), init.end());
  out.update_mask.assign(B, 1);
  out.poisoned.assign(B, 0);

  std::vector<std::vector<double>> frozen_values;
  if constexpr (!std::is_same_v<T, double>) frozen_values.resize(B);

  for (int it = 0; it < constants.max_iterations; ++it) {
    for (std::size_t b = 0; b < B; ++b) {
      ++out.basis_evaluations;
      if (out.update_mask[b]) {
        try {
          const NewtonStep<T> step =
              newton_step<T>(coeffs[b], lmax, out.directions[b], constants, pattern);
          out.directions[b] = step.direction;
          out.update_mask[b] = ad::decide(pattern, value_of(step.dt) >= constants.angle_tolerance,
                                          ad::BranchKind::kConvergence)
                                   ? 1
                                   : 0;
        } catch (const Error&) {
          out.poisoned[b] = 1;
          out.update_mask[b] = 0;
        }
      } else {
        // Frozen elements still run the loop body; the result is discarded.
        try {
          if constexpr (std::is_same_v<T, double>) {
            (void)newton_step<double>(coeffs[b], lmax, out.directions[b], constants);
          } else {
            if (frozen_values[b].empty()) frozen_values[b] = detail::coefficient_values(coeffs[b]);
            (void)newton_step<double>(frozen_values[b], lmax, values_of(out.directions[b]),
                                      constants);
          }
        } catch (const Error&) {
        }
      }
    }
    ++out.iterations_run;
    if (history) {
      PeakIteration rec;
      rec.mask = out.update_mask;
      for (const auto& d : out.directions) rec.directions.push_back(values_of(d));
      history->push_back(std::move(rec));
    }
  }
  out.amplitudes.resize(B);
  for (std::size_t b = 0; b < B; ++b) {
    out.amplitudes[b] = sh::amplitude<T>(coeffs[b], lmax, out.directions[b]);
    ++out.basis_evaluations;
  }
  return out;
}

template <class T>
PeakBatch<T> find_peaks_batch(const FodVolume& volume, std::span<const Vec3<T>> positions,
                              std::span<const Vec3<T>> init, const NewtonConstants& constants,
                              ad::Tape* tape = nullptr, ad::BranchPattern* pattern = nullptr) {
  if (positions.size() != init.size()) throw DimensionError("batch size mismatch");
  for (const auto& p : positions) {
    if (!volume.world_in_bounds(values_of(p))) {
      throw DomainError("peak search position " + to_string(values_of(p)) +
                        " mm is outside the image domain");
    }
  }
  std::vector<std::vector<T>> coeffs(positions.size());
  for (std::size_t b = 0; b < positions.size(); ++b) {
    interpolate_coeffs_into<T>(volume, positions[b], tape, coeffs[b]);
  }
  return find_peaks_coeffs<T>(coeffs, volume.lmax(), init, constants, pattern);
}

struct SequentialPeak {
  Vec3d direction;
  double amplitude;
  bool converged;
  int iterations;
};

// Single-direction ascent with early return, used as an oracle for the batch.
inline SequentialPeak find_peaks_sequential_coeffs(std::span<const double> coeffs, int lmax,
                                                   Vec3d u, const NewtonConstants& constants) {
  constants.validate();
  for (int i = 1; i <= constants.max_iterations; ++i) {
    NewtonStep<double> step;
    try {
      step = newton_step<double>(coeffs, lmax, u, constants);
    } catch (const Error&) {
      break;
    }
    u = step.direction;
    if (step.dt < constants.angle_tolerance) return {u, step.amplitude, true, i};
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  return {{nan, nan, nan}, nan, false, constants.max_iterations};
}

inline SequentialPeak find_peaks_sequential_reference(const FodVolume& volume,
                                                      const Vec3d& position,
                                                      const Vec3d& init_direction,
                                                      const NewtonConstants& constants) {
  const sh::ShCoefficients c = interpolate_coeffs(volume, position);
  return find_peaks_sequential_coeffs(c.values, c.lmax, init_direction, constants);
}

}  // namespace difftrack
