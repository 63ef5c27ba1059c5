// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#include "sfpn/dense_oracle.hpp"

#include <algorithm>
#include <cmath>

#include "sfpn/error.hpp"

namespace sfpn::oracle {

DenseGrid::DenseGrid(std::array<std::int32_t, 3> d, std::int32_t c, std::int32_t s)
    : dims(d), channels(c), stride(s) {
  for (std::int32_t e : dims) {
    if (e < 1 || e > kMaxDenseExtent) {
      fail(ErrorCode::TestScaleExceeded, "dense oracle extent " + std::to_string(e) + " outside [1, 32]");
    }
  }
  const std::size_t cells = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  data.assign(cells * static_cast<std::size_t>(c), 0.0);
  occupied.assign(cells, 0);
}

DenseGrid dense_oracle_conv(const DenseGrid& in, const ConvParams& p) {
  p.check();
  if (p.in_channels != in.channels) fail(ErrorCode::ShapeError, "dense oracle channel mismatch");
  for (std::int32_t e : in.dims) {
    if (e > kMaxDenseExtent) fail(ErrorCode::TestScaleExceeded, "dense oracle grid too large");
  }

  std::array<std::int32_t, 3> od = in.dims;
  std::int32_t os = in.stride;
  if (p.mode == ConvMode::Strided) {
    for (auto& e : od) e = (e + 1) / 2;
    os *= 2;
  } else if (p.mode == ConvMode::Transposed) {
    for (auto& e : od) e *= 2;
    os /= 2;
  }
  DenseGrid out(od, p.out_channels, std::max(os, 1));
  const auto offsets = kernel_offsets(p.kernel_size);
  const std::int32_t cin = p.in_channels;
  const std::int32_t cout = p.out_channels;

  for (std::int32_t x = 0; x < od[0]; ++x)
    for (std::int32_t y = 0; y < od[1]; ++y)
      for (std::int32_t z = 0; z < od[2]; ++z) {
        const std::size_t oc = out.cell(x, y, z);
        for (std::int32_t c = 0; c < cout; ++c) out.at(oc, c) = p.bias.empty() ? 0.0 : p.bias[c];
        for (std::size_t o = 0; o < offsets.size(); ++o) {
          std::int32_t sx, sy, sz;
          if (p.mode == ConvMode::Submanifold) {
            sx = x + offsets[o].x;
            sy = y + offsets[o].y;
            sz = z + offsets[o].z;
          } else if (p.mode == ConvMode::Strided) {
            sx = 2 * x + offsets[o].x;
            sy = 2 * y + offsets[o].y;
            sz = 2 * z + offsets[o].z;
          } else {
            // out fine cell p receives coarse cell q where p = 2q + o.
            const std::int32_t tx = x - offsets[o].x, ty = y - offsets[o].y, tz = z - offsets[o].z;
            if (tx % 2 != 0 || ty % 2 != 0 || tz % 2 != 0) continue;
            sx = tx / 2;
            sy = ty / 2;
            sz = tz / 2;
          }
          if (!in.inside(sx, sy, sz)) continue;
          const std::size_t ic = in.cell(sx, sy, sz);
          for (std::int32_t a = 0; a < cin; ++a) {
            const double v = in.at(ic, a);
            for (std::int32_t c = 0; c < cout; ++c) {
              out.at(oc, c) += v * p.weights[(o * cin + a) * cout + c];
            }
          }
        }
      }
  return out;
}

DenseGrid densify(const SparseTensor& t, std::array<std::int32_t, 3> dims) {
  DenseGrid g(dims, static_cast<std::int32_t>(t.channels()), t.stride());
  const std::int32_t s = t.stride();
  for (std::size_t i = 0; i < t.size(); ++i) {
    const VoxelCoord c = t.coords()[i];
    const std::int32_t x = c.x / s, y = c.y / s, z = c.z / s;
    if (c.x < 0 || c.y < 0 || c.z < 0 || !g.inside(x, y, z)) {
      fail(ErrorCode::TestScaleExceeded, "sparse coordinate outside dense grid");
    }
    const std::size_t cell = g.cell(x, y, z);
    g.occupied[cell] = 1;
    for (std::size_t k = 0; k < t.channels(); ++k) g.at(cell, static_cast<std::int32_t>(k)) = t.features().at(i, k);
  }
  return g;
}

void mask_to(DenseGrid& grid, const SparseTensor& t) {
  std::vector<std::uint8_t> keep(grid.occupied.size(), 0);
  for (const VoxelCoord& c : t.coords()) {
    const std::int32_t s = t.stride();
    if (grid.inside(c.x / s, c.y / s, c.z / s)) keep[grid.cell(c.x / s, c.y / s, c.z / s)] = 1;
  }
  for (std::size_t cell = 0; cell < keep.size(); ++cell) {
    grid.occupied[cell] = keep[cell];
    if (!keep[cell]) std::fill_n(grid.data.begin() + static_cast<std::ptrdiff_t>(cell * grid.channels), grid.channels, 0.0);
  }
}

double max_abs_diff(const DenseGrid& grid, const SparseTensor& t) {
  if (static_cast<std::size_t>(grid.channels) != t.channels()) fail(ErrorCode::ShapeError, "channel mismatch");
  double worst = 0.0;
  const std::int32_t s = t.stride();
  for (std::size_t i = 0; i < t.size(); ++i) {
    const VoxelCoord c = t.coords()[i];
    if (!grid.inside(c.x / s, c.y / s, c.z / s)) return INFINITY;
    const std::size_t cell = grid.cell(c.x / s, c.y / s, c.z / s);
    for (std::size_t k = 0; k < t.channels(); ++k) {
      worst = std::max(worst, std::abs(grid.at(cell, static_cast<std::int32_t>(k)) - t.features().at(i, k)));
    }
  }
  return worst;
}

}  // namespace sfpn::oracle
