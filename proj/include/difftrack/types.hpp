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
#include <stdexcept>
#include <string>

namespace difftrack {

// Error hierarchy. Everything thrown by the library derives from Error.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InvalidParameter : Error {
  using Error::Error;
};
struct InvalidDirection : Error {
  using Error::Error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct InvalidInput : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};

template <class T>
using Vec3 = std::array<T, 3>;
using Vec3d = Vec3<double>;

inline double value_of(double x) { return x; }

template <class T>
Vec3d values_of(const Vec3<T>& v) {
  return {value_of(v[0]), value_of(v[1]), value_of(v[2])};
}

inline double norm(const Vec3d& v) {
  return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
}

inline double dot(const Vec3d& a, const Vec3d& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

inline Vec3d operator+(const Vec3d& a, const Vec3d& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}

inline Vec3d operator-(const Vec3d& a, const Vec3d& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}

inline Vec3d operator*(double s, const Vec3d& a) {
  return {s * a[0], s * a[1], s * a[2]};
}

inline bool all_finite(const Vec3d& v) {
  return std::isfinite(v[0]) && std::isfinite(v[1]) && std::isfinite(v[2]);
}

inline std::string to_string(const Vec3d& v) {
  return "(" + std::to_string(v[0]) + ", " + std::to_string(v[1]) + ", " +
         std::to_string(v[2]) + ")";
}

inline constexpr double kPi = 3.14159265358979323846;

}  // namespace difftrack
