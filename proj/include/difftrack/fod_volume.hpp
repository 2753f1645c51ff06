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

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "difftrack/autodiff.hpp"
#include "difftrack/sh_basis.hpp"
#include "difftrack/types.hpp"

namespace difftrack {

using Dims = std::array<int, 3>;

// Voxel-index -> world-mm transform (last row implicitly 0 0 0 1).
class Affine {
 public:
  using Rows = std::array<std::array<double, 4>, 3>;

  Affine() : Affine(Rows{{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}}}) {}

  explicit Affine(const Rows& rows) : rows_(rows) {
    const auto& a = rows_;
    const double c00 = a[1][1] * a[2][2] - a[1][2] * a[2][1];
    const double c01 = a[1][2] * a[2][0] - a[1][0] * a[2][2];
    const double c02 = a[1][0] * a[2][1] - a[1][1] * a[2][0];
    const double det = a[0][0] * c00 + a[0][1] * c01 + a[0][2] * c02;
    double scale = 0.0;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) scale = std::max(scale, std::fabs(a[i][j]));
    }
    if (!std::isfinite(det) || std::fabs(det) <= 1e-12 * scale * scale * scale || scale == 0.0) {
      throw InvalidParameter("affine 3x3 block is not invertible");
    }
    std::array<std::array<double, 3>, 3> inv{};
    inv[0][0] = c00 / det;
    inv[1][0] = c01 / det;
    inv[2][0] = c02 / det;
    inv[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) / det;
    inv[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) / det;
    inv[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) / det;
    inv[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) / det;
    inv[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) / det;
    inv[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) / det;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) inverse_[i][j] = inv[i][j];
      inverse_[i][3] = -(inv[i][0] * a[0][3] + inv[i][1] * a[1][3] + inv[i][2] * a[2][3]);
    }
  }

  static Affine scaling(const Vec3d& voxel_size, const Vec3d& origin = {0, 0, 0}) {
    return Affine(Rows{{{voxel_size[0], 0, 0, origin[0]},
                        {0, voxel_size[1], 0, origin[1]},
                        {0, 0, voxel_size[2], origin[2]}}});
  }

  const Rows& rows() const { return rows_; }
  const Rows& inverse_rows() const { return inverse_; }

  template <class T>
  Vec3<T> apply(const Vec3<T>& p) const {
    return apply_rows(rows_, p);
  }
  template <class T>
  Vec3<T> apply_inverse(const Vec3<T>& p) const {
    return apply_rows(inverse_, p);
  }

  // Column norms of the 3x3 block.
  Vec3d column_norms() const {
    Vec3d n{};
    for (int j = 0; j < 3; ++j) {
      n[j] = std::sqrt(rows_[0][j] * rows_[0][j] + rows_[1][j] * rows_[1][j] +
                       rows_[2][j] * rows_[2][j]);
    }
    return n;
  }

  bool approx_equal(const Affine& other, double tol) const {
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 4; ++j) {
        if (std::fabs(rows_[i][j] - other.rows_[i][j]) > tol) return false;
      }
    }
    return true;
  }

  friend bool operator==(const Affine& a, const Affine& b) { return a.rows_ == b.rows_; }

 private:
  template <class T>
  static Vec3<T> apply_rows(const Rows& r, const Vec3<T>& p) {
    Vec3<T> out;
    for (int i = 0; i < 3; ++i) {
      out[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + r[i][3];
    }
    return out;
  }

  Rows rows_;
  Rows inverse_{};
};

inline std::int64_t voxel_count(const Dims& dims) {
  return std::int64_t{dims[0]} * dims[1] * dims[2];
}

inline void validate_dims(const Dims& dims) {
  for (int d : dims) {
    if (d <= 0) throw InvalidParameter("volume dimensions must be positive");
  }
}

// Continuous voxel coordinate lies where a full trilinear stencil exists.
inline bool in_bounds(const Dims& dims, const Vec3d& p) {
  for (int i = 0; i < 3; ++i) {
    if (!(p[i] >= 0.0 && p[i] <= dims[i] - 1.0)) return false;
  }
  return true;
}

class FodVolume {
 public:
  FodVolume(Dims dims, int lmax, std::vector<double> coeffs, Affine affine = {})
      : FodVolume(dims, lmax, std::move(coeffs), affine, affine.column_norms()) {}

  FodVolume(Dims dims, int lmax, std::vector<double> coeffs, Affine affine, Vec3d voxel_size)
      : dims_(dims),
        lmax_(lmax),
        num_coeffs_(sh::num_coefficients(lmax)),
        coeffs_(std::move(coeffs)),
        affine_(affine),
        voxel_size_(voxel_size) {
    validate_dims(dims_);
    if (static_cast<std::int64_t>(coeffs_.size()) != difftrack::voxel_count(dims_) * num_coeffs_) {
      throw DimensionError("expected " + std::to_string(difftrack::voxel_count(dims_) * num_coeffs_) +
                           " coefficient values, got " + std::to_string(coeffs_.size()));
    }
    for (double v : voxel_size_) {
      if (!(v > 0.0) || !std::isfinite(v)) throw InvalidParameter("voxel sizes must be positive");
    }
    for (double c : coeffs_) {
      if (!std::isfinite(c)) throw InvalidInput("volume contains non-finite coefficients");
    }
  }

  const Dims& dims() const { return dims_; }
  int lmax() const { return lmax_; }
  int num_coeffs() const { return num_coeffs_; }
  std::int64_t voxel_count() const { return difftrack::voxel_count(dims_); }
  const Affine& affine() const { return affine_; }
  const Vec3d& voxel_size() const { return voxel_size_; }

  std::int64_t voxel_index(int i, int j, int k) const {
    return i + std::int64_t{dims_[0]} * (j + std::int64_t{dims_[1]} * k);
  }
  std::array<int, 3> voxel_ijk(std::int64_t index) const {
    const int i = static_cast<int>(index % dims_[0]);
    const std::int64_t rest = index / dims_[0];
    return {i, static_cast<int>(rest % dims_[1]), static_cast<int>(rest / dims_[1])};
  }

  std::span<const double> coefficients(std::int64_t voxel) const {
    return {coeffs_.data() + voxel * num_coeffs_, static_cast<std::size_t>(num_coeffs_)};
  }
  std::span<double> coefficients(std::int64_t voxel) {
    return {coeffs_.data() + voxel * num_coeffs_, static_cast<std::size_t>(num_coeffs_)};
  }
  const std::vector<double>& data() const { return coeffs_; }

  template <class T>
  Vec3<T> world_to_voxel(const Vec3<T>& pos) const {
    return affine_.apply_inverse(pos);
  }
  Vec3d voxel_to_world(const Vec3d& p) const { return affine_.apply(p); }

  bool in_bounds(const Vec3d& voxel_pos) const { return difftrack::in_bounds(dims_, voxel_pos); }
  bool world_in_bounds(const Vec3d& pos) const { return in_bounds(world_to_voxel(pos)); }

  friend bool operator==(const FodVolume& a, const FodVolume& b) {
    return a.dims_ == b.dims_ && a.lmax_ == b.lmax_ && a.coeffs_ == b.coeffs_ &&
           a.affine_ == b.affine_ && a.voxel_size_ == b.voxel_size_;
  }

 private:
  Dims dims_;
  int lmax_;
  int num_coeffs_;
  std::vector<double> coeffs_;  // voxel-major: coeffs_[voxel * K + k]
  Affine affine_;
  Vec3d voxel_size_;
};

class BinaryMask {
 public:
  BinaryMask(Dims dims, std::vector<std::uint8_t> values, Affine affine = {})
      : dims_(dims), values_(std::move(values)), affine_(affine) {
    validate_dims(dims_);
    if (static_cast<std::int64_t>(values_.size()) != difftrack::voxel_count(dims_)) {
      throw DimensionError("mask value count does not match its dimensions");
    }
    for (auto& v : values_) v = v ? 1 : 0;
  }

  static BinaryMask filled(Dims dims, const Affine& affine, bool value = true) {
    return BinaryMask(dims,
                      std::vector<std::uint8_t>(difftrack::voxel_count(dims), value ? 1 : 0),
                      affine);
  }

  const Dims& dims() const { return dims_; }
  const Affine& affine() const { return affine_; }
  const std::vector<std::uint8_t>& values() const { return values_; }

  bool at(int i, int j, int k) const {
    if (i < 0 || j < 0 || k < 0 || i >= dims_[0] || j >= dims_[1] || k >= dims_[2]) return false;
    return values_[i + std::int64_t{dims_[0]} * (j + std::int64_t{dims_[1]} * k)] != 0;
  }
  void set(int i, int j, int k, bool value) {
    values_.at(i + std::int64_t{dims_[0]} * (j + std::int64_t{dims_[1]} * k)) = value ? 1 : 0;
  }

  // Nearest-neighbour lookup at a world position.
  bool contains(const Vec3d& pos) const {
    const Vec3d p = affine_.apply_inverse(pos);
    std::array<int, 3> idx{};
    for (int a = 0; a < 3; ++a) {
      const double r = std::floor(p[a] + 0.5);
      if (!(r >= 0.0 && r < dims_[a])) return false;
      idx[a] = static_cast<int>(r);
    }
    return at(idx[0], idx[1], idx[2]);
  }

  std::vector<std::int64_t> set_voxels() const {
    std::vector<std::int64_t> out;
    for (std::size_t v = 0; v < values_.size(); ++v) {
      if (values_[v]) out.push_back(static_cast<std::int64_t>(v));
    }
    return out;
  }

  bool compatible_with(const FodVolume& volume, double tol = 1e-5) const {
    return dims_ == volume.dims() && affine_.approx_equal(volume.affine(), tol);
  }

 private:
  Dims dims_;
  std::vector<std::uint8_t> values_;
  Affine affine_;
};

inline bool mask_contains(const BinaryMask& mask, const Vec3d& pos) { return mask.contains(pos); }

inline void require_compatible(const BinaryMask& mask, const FodVolume& volume) {
  if (!mask.compatible_with(volume)) {
    throw InvalidInput("mask grid (dims/affine) does not match the FOD volume");
  }
}

template <class T>
struct InterpolationStencil {
  std::array<std::array<int, 3>, 8> corners{};
  std::array<T, 8> weights{};
};

// Corner order: x fastest, then y, then z.
template <class T>
InterpolationStencil<T> trilinear_stencil(const Dims& dims, const Vec3<T>& voxel_pos) {
  const Vec3d p = values_of(voxel_pos);
  if (!in_bounds(dims, p)) {
    throw DomainError("interpolation outside the image domain at voxel position " + to_string(p));
  }
  std::array<int, 3> base{};
  std::array<T, 3> frac{};
  for (int a = 0; a < 3; ++a) {
    int b = static_cast<int>(std::floor(p[a]));
    b = std::min(b, std::max(dims[a] - 2, 0));
    base[a] = b;
    frac[a] = voxel_pos[a] - double(b);
  }
  InterpolationStencil<T> st;
  for (int c = 0; c < 8; ++c) {
    const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
    st.corners[c] = {std::min(base[0] + dx, dims[0] - 1), std::min(base[1] + dy, dims[1] - 1),
                     std::min(base[2] + dz, dims[2] - 1)};
    const T wx = dx ? frac[0] : T(1.0) - frac[0];
    const T wy = dy ? frac[1] : T(1.0) - frac[1];
    const T wz = dz ? frac[2] : T(1.0) - frac[2];
    st.weights[c] = wx * wy * wz;
  }
  return st;
}

template <class T>
InterpolationStencil<T> trilinear_stencil(const FodVolume& volume, const Vec3<T>& voxel_pos) {
  return trilinear_stencil(volume.dims(), voxel_pos);
}

// Coefficients at a world position: c(x) = sum over the 8 corners of w * c_corner.
// With T = ad::Var and a tape, the touched voxel coefficients become tape inputs.
template <class T>
void interpolate_coeffs_into(const FodVolume& volume, const Vec3<T>& pos, ad::Tape* tape,
                             std::vector<T>& out) {
  const Vec3<T> vp = volume.world_to_voxel(pos);
  if (!volume.in_bounds(values_of(vp))) {
    throw DomainError("position " + to_string(values_of(pos)) + " mm is outside the image domain");
  }
  const InterpolationStencil<T> st = trilinear_stencil(volume, vp);
  const int K = volume.num_coeffs();
  std::array<std::int64_t, 8> voxels{};
  for (int c = 0; c < 8; ++c) {
    voxels[c] = volume.voxel_index(st.corners[c][0], st.corners[c][1], st.corners[c][2]);
  }
  out.resize(K);
  if constexpr (std::is_same_v<T, ad::Var>) {
    std::array<std::uint32_t, 8> base{};
    if (tape) {
      for (int c = 0; c < 8; ++c) {
        base[c] = tape->register_voxel(static_cast<std::uint64_t>(voxels[c]),
                                       volume.coefficients(voxels[c]));
      }
    }
    std::array<ad::Var, 8> corner{};
    for (int k = 0; k < K; ++k) {
      for (int c = 0; c < 8; ++c) {
        const double v = volume.coefficients(voxels[c])[k];
        corner[c] = tape ? tape->input(base[c], k, v) : ad::Var(v);
      }
      out[k] = ad::dot(std::span<const ad::Var>(st.weights), std::span<const ad::Var>(corner));
    }
  } else {
    std::array<double, 8> corner{};
    for (int k = 0; k < K; ++k) {
      for (int c = 0; c < 8; ++c) corner[c] = volume.coefficients(voxels[c])[k];
      out[k] = ad::dot(std::span<const double>(st.weights), std::span<const double>(corner));
    }
  }
}

inline sh::ShCoefficients interpolate_coeffs(const FodVolume& volume, const Vec3d& pos) {
  std::vector<double> c;
  interpolate_coeffs_into<double>(volume, pos, nullptr, c);
  return sh::ShCoefficients(volume.lmax(), std::move(c));
}

}  // namespace difftrack
