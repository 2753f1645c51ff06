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

// Reverse-mode automatic differentiation over scalars.
//
// All numeric code in difftrack is templated on its scalar type. Instantiated
// with `double` it is the plain forward path; instantiated with `ad::Var` every
// operation on a non-constant operand appends a node to a Tape. Value
// computations are the same double expressions in both cases, so forward
// results are bit-identical with and without recording.
//
// Comparisons never carry adjoints: branch outcomes (masks, thresholds,
// bounds) are evaluated on values, and gradients are those of the
// piecewise-smooth function selected by the observed branch pattern.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "difftrack/types.hpp"

namespace difftrack::ad {

struct TapeError : Error {
  using Error::Error;
};
struct NoGradient : Error {
  using Error::Error;
};

inline constexpr std::uint32_t kConstantNode = std::numeric_limits<std::uint32_t>::max();

// Inputs to acos are clamped to this margin inside [-1, 1] when computing the
// local partial, so poles produce large but finite derivatives.
inline constexpr double kAcosMargin = 1e-12;

class Tape;

class Var {
 public:
  Var() = default;
  Var(double value) : value_(value) {}  // NOLINT: constants convert implicitly

  double value() const { return value_; }
  std::uint32_t node() const { return node_; }
  Tape* tape() const { return tape_; }
  bool is_constant() const { return tape_ == nullptr; }

 private:
  friend class Tape;
  Var(double value, std::uint32_t node, Tape* tape) : value_(value), node_(node), tape_(tape) {}

  double value_ = 0.0;
  std::uint32_t node_ = kConstantNode;
  Tape* tape_ = nullptr;
};

inline double value_of(const Var& v) { return v.value(); }
using difftrack::value_of;

// (voxel linear index, coefficient index)
struct InputKey {
  std::uint64_t voxel = 0;
  std::uint32_t coeff = 0;
  friend auto operator<=>(const InputKey&, const InputKey&) = default;
};

// Identifies the scalar that was differentiated.
struct OutputId {
  std::int64_t streamline = -1;
  std::int64_t step = -1;
  int axis = -1;
};

struct GradientResult {
  OutputId seed_output;
  std::map<InputKey, double> partials;  // mm per coefficient unit
};

class Tape {
 public:
  Tape() { edge_offsets_.push_back(0); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  std::size_t node_count() const { return edge_offsets_.size() - 1; }
  std::size_t edge_count() const { return edge_parents_.size(); }
  std::size_t memory_bytes() const {
    return edge_offsets_.capacity() * sizeof(std::uint32_t) +
           edge_parents_.capacity() * sizeof(std::uint32_t) +
           edge_partials_.capacity() * sizeof(double) + blocks_.capacity() * sizeof(InputBlock);
  }

  // Appends a node. Parents that are constants are skipped; if every parent is
  // constant no node is created and a constant is returned.
  Var record(double value, std::span<const Var> parents, std::span<const double> partials) {
    if (!std::isfinite(value)) {
      throw TapeError("tape poisoned: non-finite value at node " + std::to_string(node_count()));
    }
    const std::size_t begin = edge_parents_.size();
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (parents[i].is_constant()) continue;
      if (parents[i].tape() != this) throw InvalidInput("operands recorded on different tapes");
      if (!std::isfinite(partials[i])) {
        edge_parents_.resize(begin);
        edge_partials_.resize(begin);
        throw TapeError("tape poisoned: non-finite partial at node " +
                        std::to_string(node_count()));
      }
      edge_parents_.push_back(parents[i].node());
      edge_partials_.push_back(partials[i]);
    }
    if (edge_parents_.size() == begin) return Var(value);
    edge_offsets_.push_back(static_cast<std::uint32_t>(edge_parents_.size()));
    return Var(value, static_cast<std::uint32_t>(node_count() - 1), this);
  }

  // Registers the coefficient vector of one voxel as tape inputs. Repeated
  // calls for the same voxel return the same leaves. Returns the node index of
  // the first coefficient; coefficient k lives at base + k.
  std::uint32_t register_voxel(std::uint64_t voxel, std::span<const double> values) {
    auto it = voxel_base_.find(voxel);
    if (it != voxel_base_.end()) return it->second;
    const auto base = static_cast<std::uint32_t>(node_count());
    for (std::size_t k = 0; k < values.size(); ++k) {
      edge_offsets_.push_back(static_cast<std::uint32_t>(edge_parents_.size()));
    }
    blocks_.push_back({base, static_cast<std::uint32_t>(values.size()), voxel});
    voxel_base_.emplace(voxel, base);
    return base;
  }

  Var input(std::uint32_t base, std::size_t k, double value) {
    return Var(value, base + static_cast<std::uint32_t>(k), this);
  }

  std::size_t input_voxel_count() const { return blocks_.size(); }

  // Single reverse sweep from `output`. Only inputs with a nonzero adjoint
  // appear in the result.
  GradientResult backward(const Var& output) const {
    if (output.is_constant()) throw NoGradient("output is a constant; it has no gradient");
    if (output.tape() != this) throw InvalidInput("output was not recorded on this tape");
    const std::uint32_t out = output.node();
    std::vector<double> adjoint(static_cast<std::size_t>(out) + 1, 0.0);
    adjoint[out] = 1.0;
    for (std::size_t i = out + 1; i-- > 0;) {
      const double a = adjoint[i];
      if (a == 0.0) continue;
      for (std::uint32_t e = edge_offsets_[i]; e < edge_offsets_[i + 1]; ++e) {
        adjoint[edge_parents_[e]] += a * edge_partials_[e];
      }
    }
    GradientResult result;
    for (const auto& block : blocks_) {
      for (std::uint32_t k = 0; k < block.count && block.base + k <= out; ++k) {
        const double g = adjoint[block.base + k];
        if (g != 0.0) result.partials[{block.voxel, k}] = g;
      }
    }
    return result;
  }

  friend bool operator==(const Tape& a, const Tape& b) {
    return a.edge_offsets_ == b.edge_offsets_ && a.edge_parents_ == b.edge_parents_ &&
           a.edge_partials_ == b.edge_partials_ && a.blocks_ == b.blocks_;
  }

 private:
  struct InputBlock {
    std::uint32_t base;
    std::uint32_t count;
    std::uint64_t voxel;
    friend bool operator==(const InputBlock&, const InputBlock&) = default;
  };

  std::vector<std::uint32_t> edge_offsets_;  // node i owns edges [off[i], off[i+1])
  std::vector<std::uint32_t> edge_parents_;
  std::vector<double> edge_partials_;
  std::vector<InputBlock> blocks_;
  std::unordered_map<std::uint64_t, std::uint32_t> voxel_base_;
};

namespace detail {

inline Tape* tape_of(const Var& a, const Var& b) {
  Tape* t = a.tape() ? a.tape() : b.tape();
  if (a.tape() && b.tape() && a.tape() != b.tape()) {
    throw InvalidInput("operands recorded on different tapes");
  }
  return t;
}

inline Var unary(double value, const Var& a, double da) {
  if (a.is_constant()) return Var(value);
  const Var parents[1] = {a};
  const double partials[1] = {da};
  return a.tape()->record(value, parents, partials);
}

inline Var binary(double value, const Var& a, double da, const Var& b, double db) {
  Tape* t = tape_of(a, b);
  if (!t) return Var(value);
  const Var parents[2] = {a, b};
  const double partials[2] = {da, db};
  return t->record(value, parents, partials);
}

}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  return detail::binary(a.value() + b.value(), a, 1.0, b, 1.0);
}
inline Var operator-(const Var& a, const Var& b) {
  return detail::binary(a.value() - b.value(), a, 1.0, b, -1.0);
}
inline Var operator*(const Var& a, const Var& b) {
  return detail::binary(a.value() * b.value(), a, b.value(), b, a.value());
}
inline Var operator/(const Var& a, const Var& b) {
  const double q = a.value() / b.value();
  return detail::binary(q, a, 1.0 / b.value(), b, -q / b.value());
}
inline Var operator-(const Var& a) { return detail::unary(-a.value(), a, -1.0); }

inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }

// Elementary functions. Each has a double overload with the same value
// semantics so templated code can call ad::f(x) for either scalar type.

inline double sin(double x) { return std::sin(x); }
inline double cos(double x) { return std::cos(x); }
inline double sqrt(double x) { return std::sqrt(x); }
inline double atan2(double y, double x) { return std::atan2(y, x); }
inline double acos(double x) { return std::acos(std::clamp(x, -1.0, 1.0)); }
inline double abs(double x) { return std::fabs(x); }
inline double clamp(double x, double lo, double hi) { return std::clamp(x, lo, hi); }
inline double stop_gradient(double x) { return x; }

inline Var sin(const Var& a) { return detail::unary(std::sin(a.value()), a, std::cos(a.value())); }
inline Var cos(const Var& a) { return detail::unary(std::cos(a.value()), a, -std::sin(a.value())); }
inline Var sqrt(const Var& a) {
  const double r = std::sqrt(a.value());
  return detail::unary(r, a, 0.5 / r);
}

// At the origin the angle is undefined; both partials are taken as zero.
inline Var atan2(const Var& y, const Var& x) {
  const double r2 = x.value() * x.value() + y.value() * y.value();
  const double dy = r2 > 0.0 ? x.value() / r2 : 0.0;
  const double dx = r2 > 0.0 ? -y.value() / r2 : 0.0;
  return detail::binary(std::atan2(y.value(), x.value()), y, dy, x, dx);
}

inline Var acos(const Var& a) {
  const double xc = std::clamp(a.value(), -1.0 + kAcosMargin, 1.0 - kAcosMargin);
  return detail::unary(acos(a.value()), a, -1.0 / std::sqrt(1.0 - xc * xc));
}

inline Var abs(const Var& a) {
  const double s = a.value() > 0.0 ? 1.0 : (a.value() < 0.0 ? -1.0 : 0.0);
  return detail::unary(std::fabs(a.value()), a, s);
}

inline Var clamp(const Var& a, double lo, double hi) {
  const bool inside = a.value() >= lo && a.value() <= hi;
  return detail::unary(std::clamp(a.value(), lo, hi), a, inside ? 1.0 : 0.0);
}

inline Var stop_gradient(const Var& a) { return Var(a.value()); }

// Sequential sum of products, accumulated left to right from 0.
inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline Var dot(std::span<const Var> a, std::span<const Var> b) {
  double acc = 0.0;
  Tape* tape = nullptr;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += a[i].value() * b[i].value();
    if (!tape) tape = detail::tape_of(a[i], b[i]);
  }
  if (!tape) return Var(acc);
  thread_local std::vector<Var> parents;
  thread_local std::vector<double> partials;
  parents.clear();
  partials.clear();
  for (std::size_t i = 0; i < a.size(); ++i) {
    parents.push_back(a[i]);
    partials.push_back(b[i].value());
    parents.push_back(b[i]);
    partials.push_back(a[i].value());
  }
  return tape->record(acc, parents, partials);
}

// Branch outcomes observed during a forward run. A recorder stores every
// decision; a replayer forces a later run down the recorded path and counts
// how many decisions would have gone the other way.
enum class BranchKind : std::uint8_t { kConvergence, kTermination };

class BranchPattern {
 public:
  static BranchPattern recorder() { return BranchPattern(false); }
  BranchPattern replay() const {
    BranchPattern p(true);
    p.bits_ = bits_;
    p.kinds_ = kinds_;
    return p;
  }

  bool decide(bool computed, BranchKind kind) {
    if (!replaying_) {
      bits_.push_back(computed ? 1 : 0);
      kinds_.push_back(kind);
      return computed;
    }
    if (cursor_ >= bits_.size()) {
      ++termination_flips_;
      exhausted_ = true;
      return computed;
    }
    const bool forced = bits_[cursor_] != 0;
    if (kinds_[cursor_] != kind) ++termination_flips_;
    ++cursor_;
    if (forced != computed) {
      if (kind == BranchKind::kConvergence) {
        ++convergence_flips_;
      } else {
        ++termination_flips_;
      }
    }
    return forced;
  }

  bool replaying() const { return replaying_; }
  std::size_t size() const { return bits_.size(); }
  std::size_t convergence_flips() const { return convergence_flips_; }
  std::size_t termination_flips() const { return termination_flips_; }
  bool fully_consumed() const { return !exhausted_ && cursor_ == bits_.size(); }

 private:
  explicit BranchPattern(bool replaying) : replaying_(replaying) {}

  bool replaying_;
  std::vector<std::uint8_t> bits_;
  std::vector<BranchKind> kinds_;
  std::size_t cursor_ = 0;
  std::size_t convergence_flips_ = 0;
  std::size_t termination_flips_ = 0;
  bool exhausted_ = false;
};

inline bool decide(BranchPattern* pattern, bool computed, BranchKind kind) {
  return pattern ? pattern->decide(computed, kind) : computed;
}

}  // namespace difftrack::ad

namespace difftrack {
using ad::value_of;
}  // namespace difftrack
