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

// Real, even-order spherical harmonic basis in the MRtrix convention.
//
// Coefficient k = l(l+1)/2 + m for even l and -l <= m <= l. With P the
// orthonormal associated Legendre function (Condon-Shortley phase included):
//
//   m > 0:  sqrt(2) P_l^m(cos el) cos(m az)
//   m = 0:          P_l^0(cos el)
//   m < 0:  sqrt(2) P_l^|m|(cos el) sin(|m| az)
//
// Elevation derivatives are obtained by differentiating the three-term
// Legendre recurrence in closed form, term by term, so they stay exact at the
// poles without any division by sin(el).

#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "difftrack/autodiff.hpp"
#include "difftrack/types.hpp"

namespace difftrack::sh {

inline constexpr int kMaxLmax = 16;

inline int num_coefficients(int lmax) {
  if (lmax < 0 || lmax > kMaxLmax || lmax % 2 != 0) {
    throw InvalidParameter("lmax must be even and within [0, 16], got " + std::to_string(lmax));
  }
  return (lmax / 2 + 1) * (lmax + 1);
}

inline int lmax_for_count(int count) {
  for (int l = 0; l <= kMaxLmax; l += 2) {
    if (num_coefficients(l) == count) return l;
  }
  throw DimensionError(std::to_string(count) + " is not a valid even-order SH coefficient count");
}

// Flat index of (l, m) for even l.
constexpr int index(int l, int m) { return l * (l + 1) / 2 + m; }

struct ShCoefficients {
  int lmax = 0;
  std::vector<double> values;

  ShCoefficients() : values(1, 0.0) {}
  ShCoefficients(int lmax_, std::vector<double> values_) : lmax(lmax_), values(std::move(values_)) {
    if (static_cast<int>(values.size()) != num_coefficients(lmax)) {
      throw DimensionError("expected " + std::to_string(num_coefficients(lmax)) +
                           " coefficients for lmax " + std::to_string(lmax) + ", got " +
                           std::to_string(values.size()));
    }
  }
};

template <class T>
struct SphericalAngles {
  T el{};  // [0, pi]
  T az{};  // (-pi, pi]
};

template <class T>
struct BasisDerivatives {
  std::vector<T> value;
  std::vector<T> d_el;
  std::vector<T> d_az;
  std::vector<T> d2_el;
  std::vector<T> d2_az;
  std::vector<T> d_el_az;
};

// Recurrence factors for one band limit, computed once and shared.
class LegendreTable {
 public:
  explicit LegendreTable(int lmax) : lmax_(lmax) {
    const int n = full_index(lmax, lmax) + 1;
    a_.assign(n, 0.0);
    b_.assign(n, 0.0);
    seed_.assign(lmax + 1, 0.0);
    seed_[0] = 1.0 / std::sqrt(4.0 * kPi);
    for (int m = 1; m <= lmax; ++m) {
      seed_[m] = -std::sqrt((2.0 * m + 1.0) / (2.0 * m)) * seed_[m - 1];
    }
    for (int m = 0; m <= lmax; ++m) {
      if (m + 1 <= lmax) a_[full_index(m + 1, m)] = std::sqrt(2.0 * m + 3.0);
      for (int l = m + 2; l <= lmax; ++l) {
        const double ll = l, mm = m;
        a_[full_index(l, m)] = std::sqrt((4.0 * ll * ll - 1.0) / (ll * ll - mm * mm));
        b_[full_index(l, m)] =
            std::sqrt(((ll - 1.0) * (ll - 1.0) - mm * mm) / (4.0 * (ll - 1.0) * (ll - 1.0) - 1.0));
      }
    }
  }

  static constexpr int full_index(int l, int m) { return l * (l + 1) / 2 + m; }

  int lmax() const { return lmax_; }
  double seed(int m) const { return seed_[m]; }
  double a(int l, int m) const { return a_[full_index(l, m)]; }
  double b(int l, int m) const { return b_[full_index(l, m)]; }

  static const LegendreTable& get(int lmax) {
    static const std::array<LegendreTable, kMaxLmax / 2 + 1> tables = [] {
      return std::array<LegendreTable, kMaxLmax / 2 + 1>{
          LegendreTable(0),  LegendreTable(2),  LegendreTable(4),
          LegendreTable(6),  LegendreTable(8),  LegendreTable(10),
          LegendreTable(12), LegendreTable(14), LegendreTable(16)};
    }();
    num_coefficients(lmax);
    return tables[lmax / 2];
  }

 private:
  int lmax_;
  std::vector<double> seed_;
  std::vector<double> a_;
  std::vector<double> b_;
};

template <class T>
SphericalAngles<T> cartesian_to_angles(const Vec3<T>& d) {
  const Vec3d v = values_of(d);
  if (!all_finite(v) || norm(v) == 0.0) {
    throw InvalidDirection("direction must be finite and non-zero, got " + to_string(v));
  }
  return {ad::acos(d[2]), ad::atan2(d[1], d[0])};
}

namespace detail {

// Orthonormal associated Legendre values for all 0 <= m <= l <= lmax at
// x = cos(el), s = sin(el); optionally with first and second el-derivatives.
template <class T, bool kDerivs>
void legendre(const LegendreTable& tab, const T& x, const T& s, std::vector<T>& p,
              std::vector<T>& dp, std::vector<T>& d2p, std::vector<T>& spow) {
  const int lmax = tab.lmax();
  const std::size_t n = LegendreTable::full_index(lmax, lmax) + 1;
  p.assign(n, T(0.0));
  if constexpr (kDerivs) {
    dp.assign(n, T(0.0));
    d2p.assign(n, T(0.0));
  }
  spow.assign(lmax + 1, T(1.0));
  for (int k = 1; k <= lmax; ++k) spow[k] = spow[k - 1] * s;

  for (int m = 0; m <= lmax; ++m) {
    const double c = tab.seed(m);
    const int mm = LegendreTable::full_index(m, m);
    p[mm] = c * spow[m];
    if constexpr (kDerivs) {
      if (m == 1) {
        dp[mm] = c * x;
        d2p[mm] = -c * s;
      } else if (m >= 2) {
        dp[mm] = (c * m) * spow[m - 1] * x;
        d2p[mm] = c * (double(m * (m - 1)) * spow[m - 2] * x * x - double(m) * spow[m]);
      }
    }
    if (m + 1 > lmax) continue;
    {
      const int i1 = LegendreTable::full_index(m + 1, m);
      const double a = tab.a(m + 1, m);
      p[i1] = a * (x * p[mm]);
      if constexpr (kDerivs) {
        dp[i1] = a * (x * dp[mm] - s * p[mm]);
        d2p[i1] = a * (x * d2p[mm] - 2.0 * (s * dp[mm]) - x * p[mm]);
      }
    }
    for (int l = m + 2; l <= lmax; ++l) {
      const int i0 = LegendreTable::full_index(l, m);
      const int i1 = LegendreTable::full_index(l - 1, m);
      const int i2 = LegendreTable::full_index(l - 2, m);
      const double a = tab.a(l, m);
      const double b = tab.b(l, m);
      p[i0] = a * (x * p[i1] - b * p[i2]);
      if constexpr (kDerivs) {
        dp[i0] = a * (x * dp[i1] - s * p[i1] - b * dp[i2]);
        d2p[i0] = a * (x * d2p[i1] - 2.0 * (s * dp[i1]) - x * p[i1] - b * d2p[i2]);
      }
    }
  }
}

template <class T>
struct Workspace {
  std::vector<T> p, dp, d2p, spow, cosm, sinm;
};

template <class T>
Workspace<T>& workspace() {
  thread_local Workspace<T> ws;
  return ws;
}

template <class T>
void azimuth_harmonics(const T& az, int lmax, std::vector<T>& cosm, std::vector<T>& sinm) {
  cosm.assign(lmax + 1, T(1.0));
  sinm.assign(lmax + 1, T(0.0));
  for (int m = 1; m <= lmax; ++m) {
    const T angle = double(m) * az;
    cosm[m] = ad::cos(angle);
    sinm[m] = ad::sin(angle);
  }
}

inline constexpr double kSqrt2 = 1.41421356237309504880;

}  // namespace detail

// Basis values at `angles`, in coefficient order.
template <class T>
void eval_basis_into(const SphericalAngles<T>& angles, int lmax, std::vector<T>& out) {
  const LegendreTable& tab = LegendreTable::get(lmax);
  auto& ws = detail::workspace<T>();
  const T x = ad::cos(angles.el);
  const T s = ad::sin(angles.el);
  detail::legendre<T, false>(tab, x, s, ws.p, ws.dp, ws.d2p, ws.spow);
  detail::azimuth_harmonics(angles.az, lmax, ws.cosm, ws.sinm);
  out.resize(num_coefficients(lmax));
  for (int l = 0; l <= lmax; l += 2) {
    out[index(l, 0)] = ws.p[LegendreTable::full_index(l, 0)];
    for (int m = 1; m <= l; ++m) {
      const T sp = detail::kSqrt2 * ws.p[LegendreTable::full_index(l, m)];
      out[index(l, m)] = sp * ws.cosm[m];
      out[index(l, -m)] = sp * ws.sinm[m];
    }
  }
}

template <class T>
std::vector<T> eval_basis(const SphericalAngles<T>& angles, int lmax) {
  std::vector<T> out;
  eval_basis_into(angles, lmax, out);
  return out;
}

template <class T>
void eval_basis_derivatives_into(const SphericalAngles<T>& angles, int lmax,
                                 BasisDerivatives<T>& out) {
  const LegendreTable& tab = LegendreTable::get(lmax);
  auto& ws = detail::workspace<T>();
  const T x = ad::cos(angles.el);
  const T s = ad::sin(angles.el);
  detail::legendre<T, true>(tab, x, s, ws.p, ws.dp, ws.d2p, ws.spow);
  detail::azimuth_harmonics(angles.az, lmax, ws.cosm, ws.sinm);

  const std::size_t n = num_coefficients(lmax);
  for (auto* v : {&out.value, &out.d_el, &out.d_az, &out.d2_el, &out.d2_az, &out.d_el_az}) {
    v->assign(n, T(0.0));
  }
  for (int l = 0; l <= lmax; l += 2) {
    const int f0 = LegendreTable::full_index(l, 0);
    const int k0 = index(l, 0);
    out.value[k0] = ws.p[f0];
    out.d_el[k0] = ws.dp[f0];
    out.d2_el[k0] = ws.d2p[f0];
    for (int m = 1; m <= l; ++m) {
      const int f = LegendreTable::full_index(l, m);
      const T p = detail::kSqrt2 * ws.p[f];
      const T dp = detail::kSqrt2 * ws.dp[f];
      const T d2p = detail::kSqrt2 * ws.d2p[f];
      const T& c = ws.cosm[m];
      const T& sn = ws.sinm[m];
      const double md = m;
      const double m2 = md * md;
      const int kp = index(l, m);
      const int kn = index(l, -m);

      out.value[kp] = p * c;
      out.d_el[kp] = dp * c;
      out.d2_el[kp] = d2p * c;
      out.d_az[kp] = -md * (p * sn);
      out.d2_az[kp] = -m2 * (p * c);
      out.d_el_az[kp] = -md * (dp * sn);

      out.value[kn] = p * sn;
      out.d_el[kn] = dp * sn;
      out.d2_el[kn] = d2p * sn;
      out.d_az[kn] = md * (p * c);
      out.d2_az[kn] = -m2 * (p * sn);
      out.d_el_az[kn] = md * (dp * c);
    }
  }
}

template <class T>
BasisDerivatives<T> eval_basis_derivatives(const SphericalAngles<T>& angles, int lmax) {
  BasisDerivatives<T> out;
  eval_basis_derivatives_into(angles, lmax, out);
  return out;
}

// FOD amplitude sum_k Y_k(dir) c_k.
template <class T>
T amplitude(std::span<const T> coeffs, int lmax, const Vec3<T>& direction) {
  if (static_cast<int>(coeffs.size()) != num_coefficients(lmax)) {
    throw DimensionError("coefficient count " + std::to_string(coeffs.size()) +
                         " does not match lmax " + std::to_string(lmax));
  }
  thread_local std::vector<T> basis;
  eval_basis_into(cartesian_to_angles(direction), lmax, basis);
  return ad::dot(std::span<const T>(basis), coeffs);
}

inline double amplitude(const ShCoefficients& coeffs, const Vec3d& direction) {
  return amplitude<double>(coeffs.values, coeffs.lmax, direction);
}

}  // namespace difftrack::sh
