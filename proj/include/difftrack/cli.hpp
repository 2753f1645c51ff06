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

// Command-line front end: track, gradcheck, compare, synth.
// Lengths are in mm and angles in degrees. Exit status is 0 on success and 1
// on any failure.

#pragma once

#include <CLI11.hpp>

#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "difftrack/fod_volume.hpp"
#include "difftrack/gradcheck.hpp"
#include "difftrack/io/csv.hpp"
#include "difftrack/io/nifti.hpp"
#include "difftrack/io/tck.hpp"
#include "difftrack/metrics.hpp"
#include "difftrack/propagator.hpp"
#include "difftrack/synth.hpp"
#include "difftrack/types.hpp"

namespace difftrack::cli {

inline Vec3d parse_vec3(const std::string& s, const std::string& flag) {
  const auto f = io::split_fields(s);
  if (f.size() != 3) throw InvalidParameter(flag + " expects three comma-separated numbers");
  Vec3d v;
  for (int a = 0; a < 3; ++a) v[a] = io::parse_double(f[a], flag);
  if (!all_finite(v)) throw InvalidParameter(flag + " must be finite");
  return v;
}

inline Dims parse_dims(const std::string& s) {
  const Vec3d v = parse_vec3(s, "--dims");
  Dims d;
  for (int a = 0; a < 3; ++a) {
    if (v[a] != std::floor(v[a]) || v[a] < 1 || v[a] > 4096) {
      throw InvalidParameter("--dims entries must be integers in [1, 4096]");
    }
    d[a] = static_cast<int>(v[a]);
  }
  return d;
}

inline int resolve_threads(int requested) {
  if (const char* env = std::getenv("DIFFTRACK_THREADS"); env && *env) {
    int n = 0;
    const std::string s(env);
    const auto r = std::from_chars(s.data(), s.data() + s.size(), n);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size() || n < 1) {
      throw InvalidParameter("DIFFTRACK_THREADS must be a positive integer, got \"" + s + "\"");
    }
    return n;
  }
  if (requested > 0) return requested;
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

struct TrackArgs {
  std::string fod, mask, seeds, seed_mask, out, save_seeds;
  std::size_t n = 0;
  double step = 1.0;
  double cutoff = 0.1;
  double angle = 45.0;
  double minlen = 0.0;
  double maxlen = 100.0;
  bool bidirectional = false;
  std::uint64_t rng = 0;
  bool retry_until_n = false;
  int threads = 0;
};

struct TrackOutcome {
  std::vector<Streamline> streamlines;
  io::SeedTable seeds;  // seeds actually tracked
  std::map<Termination, std::size_t> reasons;
};

inline TrackingParams tracking_params(double step, double cutoff, double angle_deg, double minlen,
                                      double maxlen, bool bidirectional, std::uint64_t rng) {
  TrackingParams p;
  p.step_size = step;
  p.amplitude_threshold = cutoff;
  p.angle_threshold = angle_deg * kPi / 180.0;
  p.min_length = minlen;
  p.max_length = maxlen;
  p.bidirectional = bidirectional;
  p.rng_seed = rng;
  p.validate();
  return p;
}

inline TrackOutcome run_track(const TrackArgs& a) {
  const FodVolume volume = io::load_volume(a.fod);
  const BinaryMask mask = io::load_mask(a.mask);
  require_compatible(mask, volume);
  const TrackingParams params =
      tracking_params(a.step, a.cutoff, a.angle, a.minlen, a.maxlen, a.bidirectional, a.rng);
  const NewtonConstants constants;
  const int threads = resolve_threads(a.threads);

  TrackOutcome outcome;
  auto run_batch = [&](const io::SeedTable& batch, std::size_t limit) {
    const StreamlineBatch result = track_parallel(volume, mask, batch.positions, batch.directions,
                                                  params, constants, threads);
    std::vector<std::size_t> kept;
    std::vector<Streamline> cropped = crop_to_valid(result, params, &kept);
    std::size_t next_kept = 0;
    for (std::size_t i = 0; i < batch.positions.size(); ++i) {
      if (outcome.streamlines.size() >= limit) break;
      outcome.seeds.positions.push_back(batch.positions[i]);
      outcome.seeds.directions.push_back(batch.directions[i]);
      ++outcome.reasons[result.reasons[i]];
      if (next_kept < kept.size() && kept[next_kept] == i) {
        outcome.streamlines.push_back(std::move(cropped[next_kept]));
        ++next_kept;
      }
    }
  };

  if (!a.seeds.empty()) {
    if (!a.seed_mask.empty() || a.n != 0 || a.retry_until_n) {
      throw InvalidParameter("--seeds cannot be combined with --n, --seed-mask or --retry-until-n");
    }
    run_batch(io::load_seeds(a.seeds), SIZE_MAX);
  } else {
    if (a.seed_mask.empty() || a.n == 0) {
      throw InvalidParameter("either --seeds or both --n and --seed-mask are required");
    }
    const BinaryMask seed_mask = io::load_mask(a.seed_mask);
    if (!a.retry_until_n) {
      run_batch({sample_seeds(seed_mask, a.n, a.rng), sample_directions(a.n, a.rng)}, SIZE_MAX);
    } else {
      const std::size_t max_attempts = std::max<std::size_t>(1000, 100 * a.n);
      std::uint64_t round = 0;
      while (outcome.streamlines.size() < a.n) {
        if (outcome.seeds.positions.size() >= max_attempts) {
          throw Error("--retry-until-n gave up after " + std::to_string(max_attempts) +
                      " seeds with " + std::to_string(outcome.streamlines.size()) + " of " +
                      std::to_string(a.n) + " streamlines kept");
        }
        const std::size_t m = a.n - outcome.streamlines.size();
        const std::uint64_t s = a.rng + 0x632be59bd9b4e019ULL * round++;
        run_batch({sample_seeds(seed_mask, m, s), sample_directions(m, s)}, a.n);
      }
    }
  }
  return outcome;
}

inline void add_tracking_flags(CLI::App* cmd, double& step, double& cutoff, double& angle,
                               double& minlen, double& maxlen) {
  cmd->add_option("--step", step, "step size (mm)")->capture_default_str();
  cmd->add_option("--cutoff", cutoff, "FOD amplitude threshold")->capture_default_str();
  cmd->add_option("--angle", angle, "maximum angle between steps (degrees)")
      ->capture_default_str();
  cmd->add_option("--minlen", minlen, "minimum streamline length (mm)")->capture_default_str();
  cmd->add_option("--maxlen", maxlen, "maximum streamline length (mm)")->capture_default_str();
}

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"Batched deterministic FOD streamline tractography"};
  app.require_subcommand(1);

  TrackArgs ta;
  CLI::App* track_cmd = app.add_subcommand("track", "generate streamlines");
  track_cmd->add_option("--fod", ta.fod, "FOD volume (.nii)")->required();
  track_cmd->add_option("--mask", ta.mask, "tracking mask (.nii)")->required();
  track_cmd->add_option("--seeds", ta.seeds, "seed table (.csv)");
  track_cmd->add_option("--n", ta.n, "number of seeds to sample");
  track_cmd->add_option("--seed-mask", ta.seed_mask, "seeding mask (.nii)");
  add_tracking_flags(track_cmd, ta.step, ta.cutoff, ta.angle, ta.minlen, ta.maxlen);
  track_cmd->add_flag("--bidirectional", ta.bidirectional, "track both ways from each seed");
  track_cmd->add_option("--rng", ta.rng, "random seed")->capture_default_str();
  track_cmd->add_option("--out", ta.out, "output tracks (.tck)")->required();
  track_cmd->add_option("--save-seeds", ta.save_seeds, "write the tracked seeds (.csv)");
  track_cmd->add_flag("--retry-until-n", ta.retry_until_n,
                      "draw new seeds until --n streamlines are kept");
  track_cmd->add_option("--threads", ta.threads, "worker threads (default: all cores)");

  std::string g_fod, g_mask, g_seed, g_dir, g_coord, g_out;
  double g_h = 1e-4, g_step = 1.0, g_cutoff = 0.1, g_angle = 45.0, g_minlen = 0.0,
         g_maxlen = 100.0;
  bool g_bidirectional = false;
  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "check coordinate gradients");
  grad_cmd->add_option("--fod", g_fod, "FOD volume (.nii)")->required();
  grad_cmd->add_option("--mask", g_mask, "tracking mask (.nii)")->required();
  grad_cmd->add_option("--seed", g_seed, "seed position \"x,y,z\" (mm)")->required();
  grad_cmd->add_option("--dir", g_dir, "initial direction \"dx,dy,dz\"")->required();
  grad_cmd->add_option("--coordinate", g_coord, "output coordinate \"step,axis\"")->required();
  grad_cmd->add_option("--fd-step", g_h, "finite-difference step")->capture_default_str();
  add_tracking_flags(grad_cmd, g_step, g_cutoff, g_angle, g_minlen, g_maxlen);
  grad_cmd->add_flag("--bidirectional", g_bidirectional, "track both ways from the seed");
  grad_cmd->add_option("--out", g_out, "per-coefficient report (.csv)")->required();

  std::string c_a, c_b, c_out;
  bool c_crop = false;
  CLI::App* cmp_cmd = app.add_subcommand("compare", "pairwise Hausdorff distances");
  cmp_cmd->add_option("--a", c_a, "first track file")->required();
  cmp_cmd->add_option("--b", c_b, "second track file")->required();
  cmp_cmd->add_flag("--crop-to-shorter", c_crop,
                    "truncate each pair to the shorter length; compare min(count) pairs");
  cmp_cmd->add_option("--out", c_out, "per-pair distances (.csv)")->required();

  std::string s_kind, s_dims = "8,8,8", s_axis = "0,0,1", s_axis2 = "1,0,0", s_vox = "1,1,1",
                      s_out, s_mask_out;
  int s_lmax = 8;
  double s_bend = 15.0;
  CLI::App* synth_cmd = app.add_subcommand("synth", "write a synthetic FOD volume");
  synth_cmd->add_option("--kind", s_kind, "isotropic, single-lobe, bent-lobe or two-crossing")
      ->required();
  synth_cmd->add_option("--dims", s_dims, "\"nx,ny,nz\"")->capture_default_str();
  synth_cmd->add_option("--lmax", s_lmax, "SH order")->capture_default_str();
  synth_cmd->add_option("--axis", s_axis, "lobe axis")->capture_default_str();
  synth_cmd->add_option("--axis2", s_axis2, "second lobe axis (two-crossing)")
      ->capture_default_str();
  synth_cmd->add_option("--bend", s_bend, "bent-lobe rotation per voxel in x (degrees)")
      ->capture_default_str();
  synth_cmd->add_option("--voxel-size", s_vox, "\"sx,sy,sz\" (mm)")->capture_default_str();
  synth_cmd->add_option("--out", s_out, "output volume (.nii)")->required();
  synth_cmd->add_option("--mask-out", s_mask_out, "all-ones mask (.nii)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (*track_cmd) {
      const TrackOutcome r = run_track(ta);
      io::save_tracks(ta.out, r.streamlines);
      if (!ta.save_seeds.empty()) io::save_seeds(ta.save_seeds, r.seeds);
      out << "seeds: " << r.seeds.positions.size() << '\n';
      out << "streamlines: " << r.streamlines.size() << '\n';
      for (Termination t : kAllTerminations) {
        const auto it = r.reasons.find(t);
        out << termination_name(t) << ": " << (it == r.reasons.end() ? 0 : it->second) << '\n';
      }
      return 0;
    }
    if (*grad_cmd) {
      const FodVolume volume = io::load_volume(g_fod);
      const BinaryMask mask = io::load_mask(g_mask);
      GradCheckConfig cfg;
      cfg.seed = parse_vec3(g_seed, "--seed");
      const Vec3d d = parse_vec3(g_dir, "--dir");
      const double n = norm(d);
      if (!(n > 0.0)) throw InvalidParameter("--dir must be nonzero");
      cfg.direction = {d[0] / n, d[1] / n, d[2] / n};
      const auto parts = io::split_fields(g_coord);
      if (parts.size() != 2) throw InvalidParameter("--coordinate expects \"step,axis\"");
      const double step = io::parse_double(parts[0], "--coordinate");
      if (step != std::floor(step) || step < 0 || step > 1e7) {
        throw InvalidParameter("--coordinate step must be a non-negative integer");
      }
      cfg.step = static_cast<int>(step);
      std::string axis(parts[1]);
      std::erase(axis, ' ');
      if (axis == "x" || axis == "0") cfg.axis = 0;
      else if (axis == "y" || axis == "1") cfg.axis = 1;
      else if (axis == "z" || axis == "2") cfg.axis = 2;
      else throw InvalidParameter("--coordinate axis must be x, y, z or 0, 1, 2");
      cfg.fd_step = g_h;
      cfg.params = tracking_params(g_step, g_cutoff, g_angle, g_minlen, g_maxlen, g_bidirectional, 0);
      const auto t0 = std::chrono::steady_clock::now();
      const GradCheckReport rep = gradcheck(volume, mask, cfg);
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      io::write_text(g_out, format_gradcheck_csv(rep));
      out << "valid length: " << rep.valid_length << " (" << termination_name(rep.reason) << ")\n";
      out << "partials: " << rep.rows.size() - rep.excluded << '\n';
      for (const auto& row : rep.rows) {
        if (row.excluded) {
          err << "warning: termination pattern changed when perturbing voxel " << row.key.voxel
              << " coefficient " << row.key.coeff << "; excluded\n";
        }
      }
      out << "excluded: " << rep.excluded << '\n';
      out << "max rel_err: " << io::format_double(rep.max_rel_err) << '\n';
      out << "tape nodes: " << rep.tape_nodes << ", tape memory: " << rep.tape_bytes << " bytes\n";
      out << "forward: " << rep.forward_seconds << " s, backward: " << rep.backward_seconds
          << " s, wall: " << wall << " s\n";
      return rep.max_rel_err <= 1e-4 ? 0 : 1;
    }
    if (*cmp_cmd) {
      const std::vector<Streamline> a = io::load_tracks(c_a);
      const std::vector<Streamline> b = io::load_tracks(c_b);
      if (a.size() != b.size() && !c_crop) {
        throw InvalidInput("track counts differ: " + c_a + " has " + std::to_string(a.size()) +
                           ", " + c_b + " has " + std::to_string(b.size()));
      }
      const std::vector<double> d = paired_hausdorff(a, b, c_crop);
      std::string csv = "pair,distance_mm\n";
      for (std::size_t i = 0; i < d.size(); ++i) {
        csv += std::to_string(i) + ',' + io::format_double(d[i]) + '\n';
      }
      io::write_text(c_out, csv);
      out << "pairs: " << d.size() << '\n';
      if (!d.empty()) {
        const DistanceReport rep = percentile_report(d);
        for (const auto& [rank, value] : rep.percentiles) {
          out << "p" << rank << ": " << io::format_double(value) << " mm\n";
        }
        out << "below 1 mm: " << rep.count_below_1mm << '\n';
      }
      return 0;
    }
    if (*synth_cmd) {
      synth::Spec spec;
      spec.kind = synth::parse_kind(s_kind);
      spec.dims = parse_dims(s_dims);
      spec.lmax = s_lmax;
      spec.axis = parse_vec3(s_axis, "--axis");
      spec.second_axis = parse_vec3(s_axis2, "--axis2");
      spec.bend_degrees = s_bend;
      spec.voxel_size = parse_vec3(s_vox, "--voxel-size");
      const FodVolume volume = synth::make_volume(spec);
      io::save_volume(s_out, volume);
      if (!s_mask_out.empty()) io::save_mask(s_mask_out, synth::full_mask(volume), spec.voxel_size);
      out << "wrote " << s_out << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace difftrack::cli
