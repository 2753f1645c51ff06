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

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <set>

#include "difftrack/autodiff.hpp"
#include "difftrack/gradcheck.hpp"
#include "difftrack/peak_finder.hpp"
#include "difftrack/propagator.hpp"
#include "difftrack/synth.hpp"
#include "test_support.hpp"

namespace {

using namespace difftrack;
using ad::Var;

// Registers x as the coefficients of voxel 0 and returns the leaves.
std::vector<Var> leaves(ad::Tape& tape, const std::vector<double>& x) {
  const std::uint32_t base = tape.register_voxel(0, x);
  std::vector<Var> v;
  for (std::size_t k = 0; k < x.size(); ++k) v.push_back(tape.input(base, k, x[k]));
  return v;
}

std::vector<double> gradient_of(const Var& out, std::size_t n) {
  std::vector<double> g(n, 0.0);
  for (const auto& [key, v] : out.tape()->backward(out).partials) g[key.coeff] = v;
  return g;
}

double rel_err(double a, double b, double floor) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

struct Primitive {
  std::string name;
  std::function<Var(const std::vector<Var>&)> taped;
  std::function<double(const std::vector<double>&)> plain;
  std::function<std::vector<double>(std::mt19937_64&)> sample;
};

std::vector<Primitive> primitives() {
  auto uni = [](double lo, double hi, int n) {
    return [=](std::mt19937_64& rng) {
      std::uniform_real_distribution<double> u(lo, hi);
      std::vector<double> x(n);
      for (double& v : x) v = u(rng);
      return x;
    };
  };
  auto away_from_zero = [](int n) {
    return [=](std::mt19937_64& rng) {
      std::uniform_real_distribution<double> u(0.2, 3.0);
      std::bernoulli_distribution sign(0.5);
      std::vector<double> x(n);
      for (double& v : x) v = sign(rng) ? u(rng) : -u(rng);
      return x;
    };
  };
  return {
      {"add", [](auto& x) { return x[0] + x[1]; }, [](auto& x) { return x[0] + x[1]; },
       uni(-3, 3, 2)},
      {"sub", [](auto& x) { return x[0] - x[1]; }, [](auto& x) { return x[0] - x[1]; },
       uni(-3, 3, 2)},
      {"mul", [](auto& x) { return x[0] * x[1]; }, [](auto& x) { return x[0] * x[1]; },
       uni(-3, 3, 2)},
      {"div", [](auto& x) { return x[0] / x[1]; }, [](auto& x) { return x[0] / x[1]; },
       away_from_zero(2)},
      {"neg", [](auto& x) { return -x[0]; }, [](auto& x) { return -x[0]; }, uni(-3, 3, 1)},
      {"sin", [](auto& x) { return ad::sin(x[0]); }, [](auto& x) { return std::sin(x[0]); },
       uni(-3, 3, 1)},
      {"cos", [](auto& x) { return ad::cos(x[0]); }, [](auto& x) { return std::cos(x[0]); },
       uni(-3, 3, 1)},
      {"sqrt", [](auto& x) { return ad::sqrt(x[0]); }, [](auto& x) { return std::sqrt(x[0]); },
       uni(0.1, 4, 1)},
      {"atan2", [](auto& x) { return ad::atan2(x[0], x[1]); },
       [](auto& x) { return std::atan2(x[0], x[1]); }, away_from_zero(2)},
      {"acos", [](auto& x) { return ad::acos(x[0]); }, [](auto& x) { return std::acos(x[0]); },
       uni(-0.95, 0.95, 1)},
      {"abs", [](auto& x) { return ad::abs(x[0]); }, [](auto& x) { return std::fabs(x[0]); },
       away_from_zero(1)},
      {"clamp", [](auto& x) { return ad::clamp(x[0], -1.0, 1.0); },
       [](auto& x) { return std::clamp(x[0], -1.0, 1.0); }, away_from_zero(1)},
      {"dot",
       [](auto& x) {
         return ad::dot(std::span<const Var>(x.data(), 3), std::span<const Var>(x.data() + 3, 3));
       },
       [](auto& x) { return x[0] * x[3] + x[1] * x[4] + x[2] * x[5]; }, uni(-2, 2, 6)},
  };
}

TEST(Autodiff, ProductRecordsBothPartials) {
  ad::Tape tape;
  const auto x = leaves(tape, {2.0, 3.0});
  const Var y = x[0] * x[1];
  EXPECT_EQ(y.value(), 6.0);
  const auto g = gradient_of(y, 2);
  EXPECT_EQ(g[0], 3.0);
  EXPECT_EQ(g[1], 2.0);
}

TEST(Autodiff, AcosAtDomainBoundaryIsFinite) {
  ad::Tape tape;
  const auto x = leaves(tape, {1.0, -1.0});
  const Var a = ad::acos(x[0]);
  const Var b = ad::acos(x[1]);
  EXPECT_EQ(a.value(), 0.0);
  EXPECT_DOUBLE_EQ(b.value(), kPi);
  const auto ga = gradient_of(a, 2), gb = gradient_of(b, 2);
  EXPECT_TRUE(std::isfinite(ga[0]));
  EXPECT_LT(ga[0], 0.0);
  EXPECT_TRUE(std::isfinite(gb[1]));
}

TEST(Autodiff, AbsAndClampConventions) {
  ad::Tape tape;
  const auto x = leaves(tape, {0.0, 2.0, 0.5});
  const Var a = ad::abs(x[0]) + x[0] * 0.0;
  EXPECT_EQ(gradient_of(a, 3)[0], 0.0);
  EXPECT_EQ(gradient_of(ad::clamp(x[1], -1.0, 1.0) + x[1] * 0.0, 3)[1], 0.0);
  EXPECT_EQ(gradient_of(ad::clamp(x[2], -1.0, 1.0), 3)[2], 1.0);
}

TEST(Autodiff, PrimitivesMatchFiniteDifferences) {
  std::mt19937_64 rng(21);
  const double h = 1e-5;
  for (const auto& p : primitives()) {
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
      const std::vector<double> x = p.sample(rng);
      ad::Tape tape;
      const auto v = leaves(tape, x);
      const Var y = p.taped(v);
      EXPECT_EQ(y.value(), p.plain(x)) << p.name;
      const auto g = gradient_of(y, x.size());
      for (std::size_t i = 0; i < x.size(); ++i) {
        auto xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        const double fd = (p.plain(xp) - p.plain(xm)) / (2 * h);
        worst = std::max(worst, rel_err(g[i], fd, 1e-6));
      }
    }
    EXPECT_LE(worst, 1e-7) << p.name;
  }
}

// Every primitive, chained through one Newton step and an amplitude.
TEST(Autodiff, CompositeMatchesFiniteDifferences) {
  std::mt19937_64 rng(22);
  std::normal_distribution<double> n(0.0, 1.0);
  const int lmax = 4;
  const NewtonConstants constants;
  const Vec3d u = testing_support::unit({0.3, 0.4, 0.8});
  const double h = 1e-5;
  auto f_plain = [&](const std::vector<double>& c) {
    const NewtonStep<double> s = newton_step<double>(c, lmax, u, constants);
    return s.direction[0] + sh::amplitude<double>(c, lmax, s.direction);
  };
  int checked = 0;
  double worst = 0.0;
  while (checked < 50) {
    std::vector<double> c(15);
    for (double& v : c) v = n(rng);
    ad::Tape tape;
    const auto cv = leaves(tape, c);
    ad::BranchPattern rec = ad::BranchPattern::recorder();
    const Vec3<Var> uv{u[0], u[1], u[2]};
    const NewtonStep<Var> s = newton_step<Var>(cv, lmax, uv, constants, &rec);
    const Var out = s.direction[0] + sh::amplitude<Var>(cv, lmax, s.direction);
    const auto g = gradient_of(out, c.size());
    bool stable = true;
    std::vector<double> fd(c.size());
    for (std::size_t k = 0; k < c.size(); ++k) {
      auto cp = c, cm = c;
      cp[k] += h;
      cm[k] -= h;
      for (const auto* cc : {&cp, &cm}) {
        ad::BranchPattern rp = rec.replay();
        (void)newton_step<double>(*cc, lmax, u, constants, &rp);
        stable = stable && rp.convergence_flips() == 0;
      }
      fd[k] = (f_plain(cp) - f_plain(cm)) / (2 * h);
    }
    if (!stable) continue;  // clamp boundary straddled; not a smooth point
    for (std::size_t k = 0; k < c.size(); ++k) {
      worst = std::max(worst, rel_err(g[k], fd[k], 1e-6));
    }
    ++checked;
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(Autodiff, StopGradient) {
  ad::Tape tape;
  const auto x = leaves(tape, {1.75});
  const Var s = ad::stop_gradient(x[0]);
  EXPECT_EQ(s.value(), 1.75);
  EXPECT_TRUE(s.is_constant());
  EXPECT_EQ(gradient_of(s * x[0], 1)[0], 1.75);
}

TEST(Autodiff, ConstantOutputHasNoGradient) {
  ad::Tape tape;
  const Var c = Var(2.0) * Var(3.0);
  EXPECT_TRUE(c.is_constant());
  EXPECT_THROW(tape.backward(c), ad::NoGradient);
}

TEST(Autodiff, NonFiniteResultPoisonsTape) {
  ad::Tape tape;
  const auto x = leaves(tape, {-1.0, 0.0});
  EXPECT_THROW(ad::sqrt(x[0]), ad::TapeError);
  EXPECT_THROW(Var(1.0) / x[1], ad::TapeError);
  EXPECT_THROW(ad::sqrt(x[1]), ad::TapeError);  // infinite partial
}

TEST(Autodiff, ParentsPrecedeChildren) {
  ad::Tape tape;
  const auto x = leaves(tape, {0.5, 0.25});
  Var y = x[0];
  for (int i = 0; i < 10; ++i) y = ad::sin(y) * x[1] + y;
  EXPECT_LT(x[0].node(), y.node());
  EXPECT_EQ(tape.node_count(), static_cast<std::size_t>(y.node()) + 1);
}

TEST(Autodiff, VoxelCenterCoefficient) {
  const FodVolume v = synth::make_volume({synth::Kind::kSingleLobe, {4, 4, 4}, 2});
  ad::Tape tape;
  std::vector<Var> c;
  interpolate_coeffs_into<Var>(v, Vec3<Var>{1.0, 2.0, 3.0}, &tape, c);
  const auto g = tape.backward(c[3]);
  ASSERT_EQ(g.partials.size(), 1u);
  const ad::InputKey key{static_cast<std::uint64_t>(v.voxel_index(1, 2, 3)), 3};
  EXPECT_EQ(g.partials.at(key), 1.0);
}

struct TrackSetup {
  FodVolume volume;
  BinaryMask mask;
  Vec3d seed;
  Vec3d dir;
  TrackingParams params;
};

TrackSetup tilted_setup() {
  synth::Spec spec;
  spec.kind = synth::Kind::kSingleLobe;
  spec.dims = {12, 12, 12};
  spec.lmax = 6;
  spec.axis = {1.0, 0.35, 0.2};
  FodVolume v = synth::make_volume(spec);
  // Deterministic perturbation so the field is not exactly constant.
  std::mt19937_64 rng(31);
  std::normal_distribution<double> n(0.0, 0.01);
  for (std::int64_t vox = 0; vox < v.voxel_count(); ++vox) {
    for (double& c : v.coefficients(vox)) c += n(rng) * 0.1;
  }
  TrackingParams p;
  p.max_points = 9;
  p.angle_threshold = kPi / 3;
  return {v, synth::full_mask(v), {1.2, 2.1, 3.3}, {1, 0.3, 0.2}, p};
}

TEST(Autodiff, SeedCoordinateIsIndependentOfField) {
  const TrackSetup s = tilted_setup();
  GradCheckConfig cfg{s.seed, s.dir, 0, 1, 1e-4, s.params, {}};
  const GradCheckReport r = gradcheck(s.volume, s.mask, cfg);
  EXPECT_TRUE(r.rows.empty());
  EXPECT_EQ(r.output_value, s.seed[1]);
}

TEST(Autodiff, StreamlineCoordinateMatchesFiniteDifferences) {
  const TrackSetup s = tilted_setup();
  for (int axis = 0; axis < 3; ++axis) {
    GradCheckConfig cfg{s.seed, s.dir, 8, axis, 1e-4, s.params, {}};
    const GradCheckReport r = gradcheck(s.volume, s.mask, cfg);
    ASSERT_EQ(r.valid_length, 9);
    EXPECT_FALSE(r.rows.empty());
    EXPECT_EQ(r.excluded, 0u);
    EXPECT_LE(r.max_rel_err, 1e-4) << "axis " << axis;
  }
}

TEST(Autodiff, GradientSupportIsBounded) {
  const TrackSetup s = tilted_setup();
  ad::Tape tape;
  const Vec3d seeds[1] = {s.seed}, dirs[1] = {s.dir};
  const auto b = track<Var>(s.volume, s.mask, seeds, dirs, s.params, {}, &tape);
  const int L = b.valid_lengths[0];
  const int V = L - 1;
  EXPECT_LE(tape.input_voxel_count(), static_cast<std::size_t>(8 * (V + 1)));
  const auto g = tape.backward(b.at(0, L - 1, 0));
  std::set<std::uint64_t> voxels;
  for (const auto& [key, value] : g.partials) voxels.insert(key.voxel);
  EXPECT_LE(voxels.size(), static_cast<std::size_t>(8 * (V + 1)));
  EXPECT_GT(voxels.size(), 0u);
}

TEST(Autodiff, IdenticalRunsGiveIdenticalTapes) {
  const TrackSetup s = tilted_setup();
  const Vec3d seeds[1] = {s.seed}, dirs[1] = {s.dir};
  ad::Tape t1, t2;
  const auto b1 = track<Var>(s.volume, s.mask, seeds, dirs, s.params, {}, &t1);
  const auto b2 = track<Var>(s.volume, s.mask, seeds, dirs, s.params, {}, &t2);
  EXPECT_TRUE(t1 == t2);
  const int L = b1.valid_lengths[0];
  EXPECT_EQ(t1.backward(b1.at(0, L - 1, 2)).partials, t2.backward(b2.at(0, L - 1, 2)).partials);
  // The untaped run produces the same forward values.
  const auto plain = track<double>(s.volume, s.mask, seeds, dirs, s.params, {});
  for (int t = 0; t < L; ++t) {
    for (int a = 0; a < 3; ++a) EXPECT_EQ(plain.at(0, t, a), b1.at(0, t, a).value());
  }
}

TEST(Autodiff, ReplayOfSameInputsHasNoFlips) {
  const TrackSetup s = tilted_setup();
  const Vec3d seeds[1] = {s.seed}, dirs[1] = {s.dir};
  ad::BranchPattern rec = ad::BranchPattern::recorder();
  (void)track<double>(s.volume, s.mask, seeds, dirs, s.params, {}, nullptr, &rec);
  EXPECT_GT(rec.size(), 0u);
  ad::BranchPattern rp = rec.replay();
  (void)track<double>(s.volume, s.mask, seeds, dirs, s.params, {}, nullptr, &rp);
  EXPECT_EQ(rp.convergence_flips(), 0u);
  EXPECT_EQ(rp.termination_flips(), 0u);
  EXPECT_TRUE(rp.fully_consumed());
}

// With the branch pattern held fixed the coordinate is a smooth function of
// each coefficient, so the central-difference error falls as h^2.
TEST(Autodiff, FiniteDifferenceErrorConvergesQuadratically) {
  const TrackSetup s = tilted_setup();
  const Vec3d seeds[1] = {s.seed}, dirs[1] = {s.dir};
  ad::Tape tape;
  ad::BranchPattern rec = ad::BranchPattern::recorder();
  const auto b = track<Var>(s.volume, s.mask, seeds, dirs, s.params, {}, &tape, &rec);
  const int t = b.valid_lengths[0] - 1;
  const auto g = tape.backward(b.at(0, t, 1));
  std::vector<std::pair<double, ad::InputKey>> ranked;
  for (const auto& [key, value] : g.partials) ranked.push_back({-std::fabs(value), key});
  std::sort(ranked.begin(), ranked.end());
  FodVolume work = s.volume;
  auto coordinate = [&](const ad::InputKey& key, double delta) {
    double& c = work.coefficients(static_cast<std::int64_t>(key.voxel))[key.coeff];
    const double orig = c;
    c = orig + delta;
    ad::BranchPattern rp = rec.replay();
    const auto r = track<double>(work, s.mask, seeds, dirs, s.params, {}, nullptr, &rp);
    c = orig;
    EXPECT_EQ(rp.termination_flips(), 0u);
    return r.at(0, t, 1);
  };
  for (int i = 0; i < 5; ++i) {
    const ad::InputKey key = ranked[i].second;
    const double analytic = g.partials.at(key);
    auto error = [&](double h) {
      return std::fabs((coordinate(key, h) - coordinate(key, -h)) / (2 * h) - analytic);
    };
    const double e1 = error(2e-2), e2 = error(1e-2);
    const double ratio = e1 / e2;
    EXPECT_GT(ratio, 3.0) << "coefficient " << key.voxel << "/" << key.coeff;
    EXPECT_LT(ratio, 5.5) << "coefficient " << key.voxel << "/" << key.coeff;
  }
}

}  // namespace
