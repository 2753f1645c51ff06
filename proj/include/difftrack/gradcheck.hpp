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

// Central finite-difference check of streamline coordinate gradients.
//
// The taped run records every branch outcome. Each perturbed run replays that
// pattern, so Newton iteration counts, clamps and termination steps are the
// same as in the taped run and the two sides differentiate the same function.
// A perturbed run whose own termination tests would have disagreed with the
// recording is reported and its coefficient is excluded.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "difftrack/autodiff.hpp"
#include "difftrack/fod_volume.hpp"
#include "difftrack/io/csv.hpp"
#include "difftrack/peak_finder.hpp"
#include "difftrack/propagator.hpp"
#include "difftrack/types.hpp"

namespace difftrack {

// Denominator floor for the relative error, in mm per coefficient unit.
inline constexpr double kRelErrFloor = 1e-6;

inline double relative_error(double analytic, double numeric, double floor = kRelErrFloor) {
  return std::fabs(analytic - numeric) /
         std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

struct GradCheckConfig {
  Vec3d seed{};
  Vec3d direction{};
  int step = 0;  // point index along the streamline
  int axis = 0;  // 0, 1, 2 for x, y, z
  double fd_step = 1e-4;
  TrackingParams params;
  NewtonConstants constants;
};

struct PartialCheck {
  ad::InputKey key;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
  bool excluded = false;  // perturbation changed the termination pattern
};

struct GradCheckReport {
  double output_value = 0.0;
  int valid_length = 0;
  Termination reason = Termination::kLengthExceed;
  std::vector<PartialCheck> rows;
  double max_rel_err = 0.0;
  std::size_t excluded = 0;
  std::size_t tape_nodes = 0;
  std::size_t tape_bytes = 0;
  double forward_seconds = 0.0;
  double backward_seconds = 0.0;
  double check_seconds = 0.0;
};

namespace detail {

inline double replayed_coordinate(const FodVolume& volume, const BinaryMask& mask,
                                  const GradCheckConfig& cfg, const ad::BranchPattern& recorded,
                                  bool& flipped) {
  ad::BranchPattern pattern = recorded.replay();
  const Vec3d seeds[1] = {cfg.seed};
  const Vec3d dirs[1] = {cfg.direction};
  const StreamlineBatch b =
      track<double>(volume, mask, seeds, dirs, cfg.params, cfg.constants, nullptr, &pattern);
  flipped = pattern.termination_flips() > 0 || !pattern.fully_consumed();
  return b.at(0, cfg.step, cfg.axis);
}

}  // namespace detail

inline GradCheckReport gradcheck(const FodVolume& volume, const BinaryMask& mask,
                                 const GradCheckConfig& cfg) {
  using clock = std::chrono::steady_clock;
  if (cfg.axis < 0 || cfg.axis > 2) throw InvalidParameter("axis must be 0, 1 or 2");
  if (!(cfg.fd_step > 0.0) || !std::isfinite(cfg.fd_step)) {
    throw InvalidParameter("finite-difference step must be positive");
  }
  GradCheckReport report;

  auto t0 = clock::now();
  ad::Tape tape;
  ad::BranchPattern recorded = ad::BranchPattern::recorder();
  const Vec3d seeds[1] = {cfg.seed};
  const Vec3d dirs[1] = {cfg.direction};
  const BasicStreamlineBatch<ad::Var> batch =
      track<ad::Var>(volume, mask, seeds, dirs, cfg.params, cfg.constants, &tape, &recorded);
  report.forward_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  report.valid_length = batch.valid_lengths[0];
  report.reason = batch.reasons[0];
  if (cfg.step < 0 || cfg.step >= report.valid_length) {
    throw InvalidParameter("coordinate step " + std::to_string(cfg.step) +
                           " is outside the streamline's valid length " +
                           std::to_string(report.valid_length));
  }
  const ad::Var output = batch.at(0, cfg.step, cfg.axis);
  report.output_value = output.value();
  report.tape_nodes = tape.node_count();
  report.tape_bytes = tape.memory_bytes();
  if (output.is_constant()) return report;

  t0 = clock::now();
  const ad::GradientResult grad = tape.backward(output);
  report.backward_seconds = std::chrono::duration<double>(clock::now() - t0).count();

  t0 = clock::now();
  FodVolume work = volume;
  const double h = cfg.fd_step;
  for (const auto& [key, analytic] : grad.partials) {
    double& c = work.coefficients(static_cast<std::int64_t>(key.voxel))[key.coeff];
    const double original = c;
    bool flip_plus = false, flip_minus = false;
    c = original + h;
    const double f_plus = detail::replayed_coordinate(work, mask, cfg, recorded, flip_plus);
    c = original - h;
    const double f_minus = detail::replayed_coordinate(work, mask, cfg, recorded, flip_minus);
    c = original;
    PartialCheck row;
    row.key = key;
    row.analytic = analytic;
    row.numeric = (f_plus - f_minus) / (2.0 * h);
    row.rel_err = relative_error(row.analytic, row.numeric);
    row.excluded = flip_plus || flip_minus;
    if (row.excluded) {
      ++report.excluded;
    } else {
      report.max_rel_err = std::max(report.max_rel_err, row.rel_err);
    }
    report.rows.push_back(row);
  }
  report.check_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  return report;
}

inline std::string format_gradcheck_csv(const GradCheckReport& report) {
  std::string out = "voxel,coeff,analytic,numeric,rel_err\n";
  for (const auto& r : report.rows) {
    if (r.excluded) continue;
    out += std::to_string(r.key.voxel) + ',' + std::to_string(r.key.coeff) + ',' +
           io::format_double(r.analytic) + ',' + io::format_double(r.numeric) + ',' +
           io::format_double(r.rel_err) + '\n';
  }
  return out;
}

}  // namespace difftrack
