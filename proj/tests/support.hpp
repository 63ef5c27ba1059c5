// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the unit and acceptance tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "sfpn/rng.hpp"
#include "sfpn/sparse_tensor.hpp"

namespace sfpn::test {

/// Random occupancy of the [0, extent)^3 cells at `stride`, at least one voxel.
inline std::vector<VoxelCoord> random_coords(Rng& rng, std::int32_t extent, double occupancy, std::int32_t stride = 1) {
  std::vector<VoxelCoord> out;
  for (std::int32_t x = 0; x < extent; ++x)
    for (std::int32_t y = 0; y < extent; ++y)
      for (std::int32_t z = 0; z < extent; ++z)
        if (rng.uniform01() < occupancy) out.push_back({x * stride, y * stride, z * stride});
  if (out.empty()) {
    const auto pick = [&] { return static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(extent))) * stride; };
    out.push_back({pick(), pick(), pick()});
  }
  // Shuffle so row order is not the lattice order.
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
  return out;
}

inline FeatureMatrix random_features(Rng& rng, std::size_t rows, std::size_t cols, double lo = -1.0, double hi = 1.0) {
  FeatureMatrix m(rows, cols);
  for (float& v : m.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return m;
}

inline SparseTensor random_tensor(Rng& rng, std::int32_t extent, double occupancy, std::size_t channels,
                                  std::int32_t stride = 1) {
  auto coords = CoordSet::create(random_coords(rng, extent, occupancy, stride), stride);
  const std::size_t n = coords->size();
  return SparseTensor(coords, random_features(rng, n, channels), 0.02);
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("sfpn_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Solves pose * c = world for c in double precision (Cramer's rule on the
/// stored f32 entries, no orthonormality assumed).
inline Point3 solve_pose(const std::array<float, 16>& pose, const Point3& world) {
  double m[3][3];
  double b[3];
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) m[i][j] = pose[static_cast<std::size_t>(4 * i + j)];
    b[i] = world[static_cast<std::size_t>(i)] - static_cast<double>(pose[static_cast<std::size_t>(4 * i + 3)]);
  }
  auto det = [](const double a[3][3]) {
    return a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
           a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
  };
  const double d = det(m);
  Point3 out{};
  for (int k = 0; k < 3; ++k) {
    double mk[3][3];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) mk[i][j] = j == k ? b[i] : m[i][j];
    out[static_cast<std::size_t>(k)] = det(mk) / d;
  }
  return out;
}

inline double max_abs(const FeatureMatrix& a, const FeatureMatrix& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
  return worst;
}

}  // namespace sfpn::test
