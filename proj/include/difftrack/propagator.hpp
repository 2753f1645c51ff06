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

// Batched SD_Stream propagation.
//
// Streamlines advance in lock step for exactly max_points iterations. A
// per-streamline active flag replaces early exit: once a termination
// criterion fires the streamline is frozen, its remaining slots stay zero and
// its valid length is recorded. Per iteration t, in order:
//
//   1. x_t outside the image domain            -> ExitImage
//   2. A_t < amplitude_threshold               -> Model
//   3. t > 0 and angle(d_{t-1}, d_t) > thresh  -> HighCurvature
//      (t == max_points - 1 and still active   -> LengthExceed)
//   4. x_{t+1} = x_t + step_size * d_t
//   5. peak search at x_{t+1} warm-started from d_t gives d_{t+1}, A_{t+1}
//   6. x_{t+1} outside the tracking mask       -> ExitMask
//   7. write x_{t+1}
//
// A streamline deactivated during iteration t has valid length t + 1.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "difftrack/autodiff.hpp"
#include "difftrack/fod_volume.hpp"
#include "difftrack/peak_finder.hpp"
#include "difftrack/sh_basis.hpp"
#include "difftrack/types.hpp"

namespace difftrack {

enum class Termination : std::uint8_t {
  kExitImage,
  kModel,
  kHighCurvature,
  kExitMask,
  kLengthExceed,
  kSeedRejected,
};

inline constexpr std::array<Termination, 6> kAllTerminations = {
    Termination::kExitImage,     Termination::kModel,        Termination::kHighCurvature,
    Termination::kExitMask,      Termination::kLengthExceed, Termination::kSeedRejected};

inline std::string_view termination_name(Termination t) {
  switch (t) {
    case Termination::kExitImage: return "ExitImage";
    case Termination::kModel: return "Model";
    case Termination::kHighCurvature: return "HighCurvature";
    case Termination::kExitMask: return "ExitMask";
    case Termination::kLengthExceed: return "LengthExceed";
    case Termination::kSeedRejected: return "SeedRejected";
  }
  return "Unknown";
}

struct TrackingParams {
  double step_size = 1.0;                // mm
  double amplitude_threshold = 0.1;
  double angle_threshold = kPi / 4.0;    // rad, between consecutive directions
  int max_points = 0;                    // 0: ceil(max_length / step_size) + 1
  double min_length = 0.0;               // mm
  double max_length = 100.0;             // mm
  bool bidirectional = false;
  std::uint64_t rng_seed = 0;

  int resolved_max_points() const {
    if (max_points > 0) return max_points;
    return static_cast<int>(std::ceil(max_length / step_size - 1e-9)) + 1;
  }

  void validate() const {
    if (!(step_size > 0.0) || !std::isfinite(step_size)) {
      throw InvalidParameter("step size must be positive");
    }
    if (max_points != 0 && max_points < 2) throw InvalidParameter("max_points must be >= 2");
    if (!(min_length >= 0.0 && min_length <= max_length)) {
      throw InvalidParameter("require 0 <= min_length <= max_length");
    }
    if (!(angle_threshold > 0.0 && angle_threshold < kPi)) {
      throw InvalidParameter("angle threshold must lie in (0, pi)");
    }
    if (!std::isfinite(amplitude_threshold)) {
      throw InvalidParameter("amplitude threshold must be finite");
    }
    if (resolved_max_points() < 2) throw InvalidParameter("max_points must be >= 2");
  }
};

// Seed positions: a set voxel is drawn uniformly, then a uniform offset within
// that voxel's extent.
inline std::vector<Vec3d> sample_seeds(const BinaryMask& mask, std::size_t n,
                                       std::uint64_t rng_seed) {
  const std::vector<std::int64_t> voxels = mask.set_voxels();
  if (voxels.empty()) throw InvalidInput("seed mask has no set voxels");
  std::mt19937_64 rng(rng_seed);
  std::uniform_int_distribution<std::size_t> pick(0, voxels.size() - 1);
  std::uniform_real_distribution<double> offset(-0.5, 0.5);
  const Dims& dims = mask.dims();
  std::vector<Vec3d> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const std::int64_t v = voxels[pick(rng)];
    const double i = static_cast<double>(v % dims[0]);
    const double j = static_cast<double>((v / dims[0]) % dims[1]);
    const double k = static_cast<double>(v / (std::int64_t{dims[0]} * dims[1]));
    const double ox = offset(rng), oy = offset(rng), oz = offset(rng);
    out.push_back(mask.affine().apply(Vec3d{i + ox, j + oy, k + oz}));
  }
  return out;
}

// Uniform on the sphere: normalized 3-D standard normals.
inline std::vector<Vec3d> sample_directions(std::size_t n, std::uint64_t rng_seed) {
  std::mt19937_64 rng(rng_seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Vec3d> out;
  out.reserve(n);
  while (out.size() < n) {
    Vec3d v{normal(rng), normal(rng), normal(rng)};
    const double r = norm(v);
    if (r < 1e-12) continue;
    out.push_back({v[0] / r, v[1] / r, v[2] / r});
  }
  return out;
}

template <class T>
struct BasicSeedBatch {
  std::vector<Vec3<T>> positions;
  std::vector<Vec3<T>> directions;        // refined for accepted seeds
  std::vector<Vec3d> initial_directions;  // as supplied
  std::vector<T> amplitudes;
  std::vector<std::uint8_t> accepted;
  std::vector<Termination> reasons;       // meaningful for rejected seeds

  std::size_t size() const { return positions.size(); }
};
using SeedBatch = BasicSeedBatch<double>;

template <class T>
struct BasicStreamlineBatch {
  std::size_t count = 0;
  int max_points = 0;
  std::vector<T> points;  // [count][max_points][3], zero beyond valid length
  std::vector<int> valid_lengths;
  std::vector<Termination> reasons;
  std::vector<Termination> backward_reasons;  // bidirectional only
  std::vector<int> seed_indices;              // slot holding the seed point

  std::size_t offset(std::size_t i, int t) const {
    return (i * static_cast<std::size_t>(max_points) + static_cast<std::size_t>(t)) * 3;
  }
  T& at(std::size_t i, int t, int axis) { return points[offset(i, t) + axis]; }
  const T& at(std::size_t i, int t, int axis) const { return points[offset(i, t) + axis]; }
  Vec3d point(std::size_t i, int t) const {
    const std::size_t o = offset(i, t);
    return {value_of(points[o]), value_of(points[o + 1]), value_of(points[o + 2])};
  }
};
using StreamlineBatch = BasicStreamlineBatch<double>;

namespace detail {

inline double angle_between(const Vec3d& a, const Vec3d& b) {
  return std::acos(std::clamp(dot(a, b), -1.0, 1.0));
}

template <class T>
Vec3<T> advance(const Vec3<T>& x, const Vec3<T>& d, double step) {
  return {x[0] + step * d[0], x[1] + step * d[1], x[2] + step * d[2]};
}

template <class T>
Vec3<T> constant_vec(const Vec3d& v) {
  return {T(v[0]), T(v[1]), T(v[2])};
}

}  // namespace detail

// Refines the initial directions at the seed positions and applies the
// amplitude test. Seeds outside the image domain are rejected as ExitImage,
// weak ones as SeedRejected.
template <class T>
BasicSeedBatch<T> accept_seeds(const FodVolume& volume, std::span<const Vec3d> positions,
                               std::span<const Vec3d> directions, const TrackingParams& params,
                               const NewtonConstants& constants, ad::Tape* tape = nullptr,
                               ad::BranchPattern* pattern = nullptr) {
  using ad::BranchKind;
  if (positions.size() != directions.size()) throw DimensionError("seed batch size mismatch");
  const std::size_t N = positions.size();
  BasicSeedBatch<T> seeds;
  seeds.initial_directions.assign(directions.begin(), directions.end());
  seeds.accepted.assign(N, 0);
  seeds.reasons.assign(N, Termination::kSeedRejected);
  seeds.amplitudes.assign(N, T(0.0));
  std::vector<std::size_t> inside;
  std::vector<std::vector<T>> coeffs;
  std::vector<Vec3<T>> init;
  for (std::size_t i = 0; i < N; ++i) {
    if (!all_finite(positions[i]) || !all_finite(directions[i]) || norm(directions[i]) == 0.0) {
      throw InvalidInput("seed " + std::to_string(i) + " has a non-finite position or direction");
    }
    seeds.positions.push_back(detail::constant_vec<T>(positions[i]));
    seeds.directions.push_back(detail::constant_vec<T>(directions[i]));
    if (ad::decide(pattern, volume.world_in_bounds(positions[i]), BranchKind::kTermination)) {
      inside.push_back(i);
      coeffs.emplace_back();
      interpolate_coeffs_into<T>(volume, seeds.positions[i], tape, coeffs.back());
      init.push_back(seeds.directions[i]);
    } else {
      seeds.reasons[i] = Termination::kExitImage;
    }
  }
  const PeakBatch<T> peaks = find_peaks_coeffs<T>(coeffs, volume.lmax(), init, constants, pattern);
  for (std::size_t j = 0; j < inside.size(); ++j) {
    const std::size_t i = inside[j];
    seeds.amplitudes[i] = peaks.amplitudes[j];
    if (ad::decide(pattern, value_of(peaks.amplitudes[j]) > params.amplitude_threshold,
                   BranchKind::kTermination)) {
      seeds.accepted[i] = 1;
      seeds.directions[i] = peaks.directions[j];
    }
  }
  return seeds;
}

// One propagation pass from the seeds. With `reverse` set every seed starts
// along the opposite of its refined direction.
template <class T>
BasicStreamlineBatch<T> propagate_batch(const FodVolume& volume, const BinaryMask& mask,
                                        const BasicSeedBatch<T>& seeds,
                                        const TrackingParams& params,
                                        const NewtonConstants& constants,
                                        ad::Tape* tape = nullptr,
                                        ad::BranchPattern* pattern = nullptr,
                                        bool reverse = false) {
  using ad::BranchKind;
  params.validate();
  constants.validate();
  require_compatible(mask, volume);
  const std::size_t N = seeds.size();
  const int Tm = params.resolved_max_points();

  BasicStreamlineBatch<T> out;
  out.count = N;
  out.max_points = Tm;
  out.points.assign(N * static_cast<std::size_t>(Tm) * 3, T(0.0));
  out.valid_lengths.assign(N, -1);
  out.reasons.assign(N, Termination::kLengthExceed);
  out.seed_indices.assign(N, 0);

  std::vector<Vec3<T>> x(N), d(N), d_prev(N), x_next(N), d_next(N);
  std::vector<T> A(N), A_next(N);
  std::vector<std::uint8_t> active(N, 0);

  for (std::size_t i = 0; i < N; ++i) {
    x[i] = seeds.positions[i];
    d[i] = seeds.directions[i];
    if (reverse) d[i] = {-d[i][0], -d[i][1], -d[i][2]};
    A[i] = seeds.amplitudes[i];
    for (int a = 0; a < 3; ++a) out.at(i, 0, a) = x[i][a];
    if (seeds.accepted[i]) {
      active[i] = 1;
    } else {
      out.valid_lengths[i] = 1;
      out.reasons[i] = seeds.reasons[i];
    }
  }

  auto deactivate = [&](std::size_t i, int t, Termination why) {
    active[i] = 0;
    out.valid_lengths[i] = t + 1;
    out.reasons[i] = why;
  };

  std::vector<std::size_t> searching;
  std::vector<std::vector<T>> coeffs;
  std::vector<Vec3<T>> init;
  for (int t = 0; t < Tm; ++t) {
    for (std::size_t i = 0; i < N; ++i) {
      if (!active[i]) continue;
      const Vec3d xv = values_of(x[i]);
      if (ad::decide(pattern, !volume.world_in_bounds(xv), BranchKind::kTermination)) {
        deactivate(i, t, Termination::kExitImage);
      } else if (ad::decide(pattern, value_of(A[i]) < params.amplitude_threshold,
                            BranchKind::kTermination)) {
        deactivate(i, t, Termination::kModel);
      } else if (t > 0 &&
                 ad::decide(pattern,
                            detail::angle_between(values_of(d_prev[i]), values_of(d[i])) >
                                params.angle_threshold,
                            BranchKind::kTermination)) {
        deactivate(i, t, Termination::kHighCurvature);
      }
    }
    if (t == Tm - 1) {
      for (std::size_t i = 0; i < N; ++i) {
        if (active[i]) deactivate(i, t, Termination::kLengthExceed);
      }
      break;
    }

    searching.clear();
    coeffs.clear();
    init.clear();
    for (std::size_t i = 0; i < N; ++i) {
      if (!active[i]) continue;
      x_next[i] = detail::advance(x[i], d[i], params.step_size);
      d_next[i] = d[i];
      A_next[i] = A[i];
      if (ad::decide(pattern, volume.world_in_bounds(values_of(x_next[i])),
                     BranchKind::kTermination)) {
        searching.push_back(i);
        coeffs.emplace_back();
        interpolate_coeffs_into<T>(volume, x_next[i], tape, coeffs.back());
        init.push_back(d[i]);
      }
    }
    if (!searching.empty()) {
      const PeakBatch<T> peaks =
          find_peaks_coeffs<T>(coeffs, volume.lmax(), init, constants, pattern);
      for (std::size_t j = 0; j < searching.size(); ++j) {
        d_next[searching[j]] = peaks.directions[j];
        A_next[searching[j]] = peaks.amplitudes[j];
      }
    }
    for (std::size_t i = 0; i < N; ++i) {
      if (!active[i]) continue;
      if (ad::decide(pattern, !mask.contains(values_of(x_next[i])), BranchKind::kTermination)) {
        deactivate(i, t, Termination::kExitMask);
        continue;
      }
      for (int a = 0; a < 3; ++a) out.at(i, t + 1, a) = x_next[i][a];
      d_prev[i] = d[i];
      x[i] = x_next[i];
      d[i] = d_next[i];
      A[i] = A_next[i];
    }
  }
  return out;
}

// Forward pass along d0 and backward pass along -d0, joined at the seed:
// {x_N, ..., x_0, ..., x_M}.
template <class T>
BasicStreamlineBatch<T> propagate_bidirectional(const FodVolume& volume, const BinaryMask& mask,
                                                const BasicSeedBatch<T>& seeds,
                                                const TrackingParams& params,
                                                const NewtonConstants& constants,
                                                ad::Tape* tape = nullptr,
                                                ad::BranchPattern* pattern = nullptr) {
  const BasicStreamlineBatch<T> fwd =
      propagate_batch<T>(volume, mask, seeds, params, constants, tape, pattern, false);
  const BasicStreamlineBatch<T> bwd =
      propagate_batch<T>(volume, mask, seeds, params, constants, tape, pattern, true);
  const int Tm = fwd.max_points;
  BasicStreamlineBatch<T> out;
  out.count = fwd.count;
  out.max_points = 2 * Tm - 1;
  out.points.assign(out.count * static_cast<std::size_t>(out.max_points) * 3, T(0.0));
  out.valid_lengths.assign(out.count, 0);
  out.reasons = fwd.reasons;
  out.backward_reasons = bwd.reasons;
  out.seed_indices.assign(out.count, 0);
  for (std::size_t i = 0; i < out.count; ++i) {
    const int lb = bwd.valid_lengths[i];
    const int lf = fwd.valid_lengths[i];
    int slot = 0;
    for (int t = lb - 1; t >= 0; --t, ++slot) {
      for (int a = 0; a < 3; ++a) out.at(i, slot, a) = bwd.at(i, t, a);
    }
    for (int t = 1; t < lf; ++t, ++slot) {
      for (int a = 0; a < 3; ++a) out.at(i, slot, a) = fwd.at(i, t, a);
    }
    if (slot != lb + lf - 1 || slot > out.max_points) {
      throw Error("bidirectional concatenation overflow");
    }
    out.valid_lengths[i] = slot;
    out.seed_indices[i] = lb - 1;
  }
  return out;
}

// Seed acceptance followed by uni- or bidirectional propagation.
template <class T>
BasicStreamlineBatch<T> track(const FodVolume& volume, const BinaryMask& mask,
                              std::span<const Vec3d> positions, std::span<const Vec3d> directions,
                              const TrackingParams& params, const NewtonConstants& constants,
                              ad::Tape* tape = nullptr, ad::BranchPattern* pattern = nullptr) {
  params.validate();
  const BasicSeedBatch<T> seeds =
      accept_seeds<T>(volume, positions, directions, params, constants, tape, pattern);
  return params.bidirectional
             ? propagate_bidirectional<T>(volume, mask, seeds, params, constants, tape, pattern)
             : propagate_batch<T>(volume, mask, seeds, params, constants, tape, pattern);
}

// Splits the batch into contiguous sub-batches tracked on separate threads.
// Output is independent of the thread count.
inline StreamlineBatch track_parallel(const FodVolume& volume, const BinaryMask& mask,
                                      std::span<const Vec3d> positions,
                                      std::span<const Vec3d> directions,
                                      const TrackingParams& params,
                                      const NewtonConstants& constants, int threads) {
  params.validate();
  constants.validate();
  require_compatible(mask, volume);
  if (positions.size() != directions.size()) throw DimensionError("seed batch size mismatch");
  const std::size_t N = positions.size();
  const std::size_t parts =
      std::max<std::size_t>(1, std::min<std::size_t>(threads > 0 ? threads : 1, N));
  const std::size_t chunk = N == 0 ? 0 : (N + parts - 1) / parts;
  std::vector<StreamlineBatch> results(parts);
  std::vector<std::exception_ptr> errors(parts);
  auto work = [&](std::size_t p) {
    try {
      const std::size_t begin = std::min(N, p * chunk);
      const std::size_t end = std::min(N, begin + chunk);
      results[p] = track<double>(volume, mask, positions.subspan(begin, end - begin),
                                 directions.subspan(begin, end - begin), params, constants);
    } catch (...) {
      errors[p] = std::current_exception();
    }
  };
  if (parts == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t p = 0; p < parts; ++p) pool.emplace_back(work, p);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  StreamlineBatch out;
  out.count = N;
  out.max_points = results[0].max_points;
  for (auto& r : results) {
    out.points.insert(out.points.end(), r.points.begin(), r.points.end());
    out.valid_lengths.insert(out.valid_lengths.end(), r.valid_lengths.begin(),
                             r.valid_lengths.end());
    out.reasons.insert(out.reasons.end(), r.reasons.begin(), r.reasons.end());
    out.backward_reasons.insert(out.backward_reasons.end(), r.backward_reasons.begin(),
                                r.backward_reasons.end());
    out.seed_indices.insert(out.seed_indices.end(), r.seed_indices.begin(),
                            r.seed_indices.end());
  }
  return out;
}

using Streamline = std::vector<Vec3d>;

// Strips padding and keeps streamlines with at least two points whose arc
// length (L - 1) * step lies in [min_length, max_length]. Rejected seeds have
// a single point and are always dropped. `kept`, if given, receives the
// source indices.
inline std::vector<Streamline> crop_to_valid(const StreamlineBatch& batch,
                                             const TrackingParams& params,
                                             std::vector<std::size_t>* kept = nullptr) {
  std::vector<Streamline> out;
  for (std::size_t i = 0; i < batch.count; ++i) {
    const int L = batch.valid_lengths[i];
    const double arc = (L - 1) * params.step_size;
    if (L < 2 || arc < params.min_length || arc > params.max_length) continue;
    Streamline s;
    s.reserve(L);
    for (int t = 0; t < L; ++t) s.push_back(batch.point(i, t));
    out.push_back(std::move(s));
    if (kept) kept->push_back(i);
  }
  return out;
}

struct ReferenceStreamline {
  Streamline points;
  Termination reason = Termination::kLengthExceed;
  bool peak_failed = false;  // a peak search did not converge
};

// Single-streamline tracker with early exit, built on the early-returning
// peak search. The seed refinement doubles as the first peak evaluation;
// the point-count limit is checked after the per-point criteria.
inline ReferenceStreamline track_sequential_reference(const FodVolume& volume,
                                                      const BinaryMask& mask, const Vec3d& seed,
                                                      const Vec3d& init_direction,
                                                      const TrackingParams& params,
                                                      const NewtonConstants& constants) {
  ReferenceStreamline out;
  out.points.push_back(seed);
  if (!volume.world_in_bounds(seed)) {
    out.reason = Termination::kExitImage;
    return out;
  }
  auto peak_at = [&](const Vec3d& x, const Vec3d& from, Vec3d& dir, double& amp) {
    const sh::ShCoefficients c = interpolate_coeffs(volume, x);
    const SequentialPeak pk = find_peaks_sequential_coeffs(c.values, c.lmax, from, constants);
    if (!pk.converged) return false;
    dir = pk.direction;
    amp = sh::amplitude(c, dir);
    return true;
  };
  Vec3d d{}, d_prev{};
  double A = 0.0;
  if (!peak_at(seed, init_direction, d, A)) {
    out.peak_failed = true;
    out.reason = Termination::kSeedRejected;
    return out;
  }
  if (!(A > params.amplitude_threshold)) {
    out.reason = Termination::kSeedRejected;
    return out;
  }
  const int max_points = params.resolved_max_points();
  Vec3d x = seed;
  bool first = true;
  while (true) {
    if (!volume.world_in_bounds(x)) {
      out.reason = Termination::kExitImage;
      break;
    }
    if (!first) {
      d_prev = d;
      if (!peak_at(x, d_prev, d, A)) {
        out.peak_failed = true;
        out.reason = Termination::kModel;
        break;
      }
    }
    if (A < params.amplitude_threshold) {
      out.reason = Termination::kModel;
      break;
    }
    if (!first && detail::angle_between(d_prev, d) > params.angle_threshold) {
      out.reason = Termination::kHighCurvature;
      break;
    }
    if (static_cast<int>(out.points.size()) >= max_points) {
      out.reason = Termination::kLengthExceed;
      break;
    }
    x = detail::advance(x, d, params.step_size);
    if (!mask.contains(x)) {
      out.reason = Termination::kExitMask;
      break;
    }
    out.points.push_back(x);
    first = false;
  }
  return out;
}

}  // namespace difftrack
