// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "sfpn/sparse_conv.hpp"

namespace sfpn::oracle {

inline constexpr std::int32_t kMaxDenseExtent = 32;

/// Dense X x Y x Z x C grid in double precision; cell (x,y,z) is lattice
/// point (x,y,z) * stride.
struct DenseGrid {
  std::array<std::int32_t, 3> dims{0, 0, 0};
  std::int32_t channels = 0;
  std::int32_t stride = 1;
  std::vector<double> data;
  std::vector<std::uint8_t> occupied;

  DenseGrid() = default;
  DenseGrid(std::array<std::int32_t, 3> d, std::int32_t c, std::int32_t s = 1);

  std::size_t cell(std::int32_t x, std::int32_t y, std::int32_t z) const {
    return (static_cast<std::size_t>(x) * dims[1] + y) * dims[2] + z;
  }
  bool inside(std::int32_t x, std::int32_t y, std::int32_t z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] && z < dims[2];
  }
  double& at(std::size_t cell_index, std::int32_t c) { return data[cell_index * channels + c]; }
  double at(std::size_t cell_index, std::int32_t c) const { return data[cell_index * channels + c]; }
};

/// Textbook dense 3D convolution with the same offset/stride semantics as the
/// sparse modes. Strided output extent is ceil(D/2); transposed is 2D.
/// Every cell is computed; `occupied` is not consulted. Throws
/// TestScaleExceeded for extents above kMaxDenseExtent.
DenseGrid dense_oracle_conv(const DenseGrid& grid, const ConvParams& params);

/// Scatters a sparse tensor (coords >= 0) into a grid of the given extents.
DenseGrid densify(const SparseTensor& t, std::array<std::int32_t, 3> dims);

/// Zeroes every cell that is not occupied by `t`.
void mask_to(DenseGrid& grid, const SparseTensor& t);

/// Largest |dense - sparse| over t's rows.
double max_abs_diff(const DenseGrid& grid, const SparseTensor& t);

}  // namespace sfpn::oracle
