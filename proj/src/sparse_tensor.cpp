// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#include "sfpn/sparse_tensor.hpp"

#include <bit>
#include <cmath>
#include <string>

#include "sfpn/error.hpp"

namespace sfpn {
namespace {

std::string describe(VoxelCoord c) {
  return "(" + std::to_string(c.x) + "," + std::to_string(c.y) + "," + std::to_string(c.z) + ")";
}

bool is_power_of_two(std::int32_t v) { return v > 0 && std::has_single_bit(static_cast<std::uint32_t>(v)); }

bool on_lattice(VoxelCoord c, std::int32_t stride) {
  return c.x % stride == 0 && c.y % stride == 0 && c.z % stride == 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// CoordIndex

bool CoordIndex::representable(VoxelCoord c) noexcept {
  auto ok = [](std::int32_t v) { return v >= -kCoordLimit && v < kCoordLimit; };
  return ok(c.x) && ok(c.y) && ok(c.z);
}

std::uint64_t CoordIndex::pack(VoxelCoord c) noexcept {
  constexpr std::uint64_t m = (1ull << 21) - 1;
  const auto ux = static_cast<std::uint64_t>(c.x + kCoordLimit) & m;
  const auto uy = static_cast<std::uint64_t>(c.y + kCoordLimit) & m;
  const auto uz = static_cast<std::uint64_t>(c.z + kCoordLimit) & m;
  return (ux << 42) | (uy << 21) | uz;
}

std::uint64_t CoordIndex::hash(std::uint64_t key) noexcept {
  key ^= key >> 33;
  key *= 0xFF51AFD7ED558CCDull;
  key ^= key >> 33;
  key *= 0xC4CEB9FE1A85EC53ull;
  key ^= key >> 33;
  return key;
}

void CoordIndex::reserve(std::size_t n) {
  std::size_t capacity = 16;
  while (capacity < 2 * n) capacity <<= 1;
  if (capacity > keys_.size()) rehash(capacity);
}

void CoordIndex::rehash(std::size_t capacity) {
  std::vector<std::uint64_t> old_keys = std::move(keys_);
  std::vector<std::int32_t> old_rows = std::move(rows_);
  keys_.assign(capacity, kEmpty);
  rows_.assign(capacity, -1);
  mask_ = capacity - 1;
  for (std::size_t i = 0; i < old_keys.size(); ++i) {
    if (old_keys[i] == kEmpty) continue;
    std::uint64_t slot = hash(old_keys[i]) & mask_;
    while (keys_[slot] != kEmpty) slot = (slot + 1) & mask_;
    keys_[slot] = old_keys[i];
    rows_[slot] = old_rows[i];
  }
}

std::int32_t CoordIndex::insert(VoxelCoord c, std::int32_t row) {
  if (!representable(c)) fail(ErrorCode::InvalidPoint, "voxel coordinate out of range " + describe(c));
  if (2 * (size_ + 1) > keys_.size()) reserve(size_ + 1 > 8 ? 2 * (size_ + 1) : 8);
  const std::uint64_t key = pack(c);
  std::uint64_t slot = hash(key) & mask_;
  while (keys_[slot] != kEmpty) {
    if (keys_[slot] == key) return rows_[slot];
    slot = (slot + 1) & mask_;
  }
  keys_[slot] = key;
  rows_[slot] = row;
  ++size_;
  return row;
}

std::int32_t CoordIndex::lookup(VoxelCoord c) const noexcept {
  if (size_ == 0 || !representable(c)) return -1;
  const std::uint64_t key = pack(c);
  std::uint64_t slot = hash(key) & mask_;
  while (true) {
    const std::uint64_t k = keys_[slot];
    if (k == key) return rows_[slot];
    if (k == kEmpty) return -1;
    slot = (slot + 1) & mask_;
  }
}

CoordIndex::CoordIndex(std::span<const VoxelCoord> coords) {
  reserve(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const auto row = static_cast<std::int32_t>(i);
    if (insert(coords[i], row) != row) {
      fail(ErrorCode::DuplicateCoord, "coordinate " + describe(coords[i]) + " appears twice");
    }
  }
}

CoordIndex build_index(std::span<const VoxelCoord> coords) { return CoordIndex(coords); }

// ---------------------------------------------------------------------------
// CoordSet / FeatureMatrix / SparseTensor

std::shared_ptr<const CoordSet> CoordSet::create(std::vector<VoxelCoord> coords, std::int32_t stride) {
  if (!is_power_of_two(stride)) {
    fail(ErrorCode::StrideViolation, "stride must be a positive power of two, got " + std::to_string(stride));
  }
  for (const VoxelCoord& c : coords) {
    if (!on_lattice(c, stride)) {
      fail(ErrorCode::StrideViolation, describe(c) + " is off the stride-" + std::to_string(stride) + " lattice");
    }
  }
  CoordIndex index(coords);
  return std::shared_ptr<const CoordSet>(new CoordSet(std::move(coords), stride, std::move(index)));
}

FeatureMatrix::FeatureMatrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    fail(ErrorCode::ShapeError, "feature buffer holds " + std::to_string(data_.size()) + " values, expected " +
                                    std::to_string(rows * cols));
  }
}

SparseTensor::SparseTensor(std::shared_ptr<const CoordSet> coords, FeatureMatrix features, double voxel_size)
    : coords_(std::move(coords)), features_(std::move(features)), voxel_size_(voxel_size) {
  if (!coords_) fail(ErrorCode::ShapeError, "null coordinate set");
  if (features_.rows() != coords_->size()) {
    fail(ErrorCode::ShapeError, "feature rows " + std::to_string(features_.rows()) + " != coordinate count " +
                                    std::to_string(coords_->size()));
  }
  if (!(voxel_size_ > 0.0)) fail(ErrorCode::ShapeError, "voxel_size must be positive");
#ifndef NDEBUG
  validate(*this);
#endif
}

SparseTensor SparseTensor::with_features(FeatureMatrix features) const {
  return SparseTensor(coords_, std::move(features), voxel_size_);
}

void validate(const SparseTensor& t) {
  const CoordSet& set = *t.coord_set();
  if (!is_power_of_two(set.stride())) fail(ErrorCode::StrideViolation, "invalid stride");
  if (t.features().rows() != set.size()) fail(ErrorCode::ShapeError, "feature/coord row mismatch");
  if (set.index().size() != set.size()) fail(ErrorCode::DuplicateCoord, "index size differs from coord count");
  for (std::size_t i = 0; i < set.size(); ++i) {
    const VoxelCoord c = set[i];
    if (!on_lattice(c, set.stride())) fail(ErrorCode::StrideViolation, describe(c) + " off lattice");
    if (set.index().lookup(c) != static_cast<std::int32_t>(i)) {
      fail(ErrorCode::DuplicateCoord, "index does not map " + describe(c) + " to row " + std::to_string(i));
    }
  }
}

// ---------------------------------------------------------------------------
// Voxelization and lattice operations

VoxelizeResult voxelize(std::span<const Point3> points, double voxel_size, const FeatureMatrix* point_features) {
  if (points.empty()) fail(ErrorCode::EmptyCloud, "voxelize called with no points");
  if (!(voxel_size > 0.0) || !std::isfinite(voxel_size)) {
    fail(ErrorCode::RangeError, "voxel_size must be positive and finite");
  }
  if (point_features && point_features->rows() != points.size()) {
    fail(ErrorCode::ShapeError, "point feature rows do not match point count");
  }

  const std::size_t width = point_features ? point_features->cols() : 1;
  std::vector<VoxelCoord> coords;
  PointToVoxelMap point_map(points.size());
  CoordIndex index;
  index.reserve(points.size());

  for (std::size_t i = 0; i < points.size(); ++i) {
    const Point3& p = points[i];
    VoxelCoord c;
    std::int32_t* dst[3] = {&c.x, &c.y, &c.z};
    for (int a = 0; a < 3; ++a) {
      if (!std::isfinite(p[a])) fail(ErrorCode::InvalidPoint, "point " + std::to_string(i) + " is not finite");
      const double q = std::floor(p[a] / voxel_size);
      if (q < -kCoordLimit || q >= kCoordLimit) {
        fail(ErrorCode::InvalidPoint, "point " + std::to_string(i) + " lies outside the voxel grid range");
      }
      *dst[a] = static_cast<std::int32_t>(q);
    }
    const auto next = static_cast<std::int32_t>(coords.size());
    const std::int32_t row = index.insert(c, next);
    if (row == next) coords.push_back(c);
    point_map[i] = row;
  }

  const std::size_t n = coords.size();
  FeatureMatrix features(n, width, 1.0f);
  if (point_features) {
    std::vector<double> sums(n * width, 0.0);
    std::vector<std::uint32_t> counts(n, 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
      const std::size_t r = static_cast<std::size_t>(point_map[i]);
      ++counts[r];
      auto src = point_features->row(i);
      for (std::size_t c = 0; c < width; ++c) sums[r * width + c] += src[c];
    }
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < width; ++c) {
        features.at(r, c) = static_cast<float>(sums[r * width + c] / counts[r]);
      }
    }
  }

  auto set = CoordSet::create(std::move(coords), 1);
  return VoxelizeResult{SparseTensor(std::move(set), std::move(features), voxel_size), std::move(point_map)};
}

std::vector<VoxelCoord> downsample_coords(std::span<const VoxelCoord> coords, std::int32_t stride_in,
                                          std::int32_t factor) {
  if (!is_power_of_two(stride_in)) fail(ErrorCode::StrideViolation, "input stride must be a power of two");
  if (factor < 2 || !is_power_of_two(factor)) fail(ErrorCode::StrideViolation, "factor must be a power of two >= 2");
  const std::int32_t out_stride = stride_in * factor;
  std::vector<VoxelCoord> out;
  CoordIndex seen;
  seen.reserve(coords.size() / 2 + 1);
  for (const VoxelCoord& c : coords) {
    if (!on_lattice(c, stride_in)) {
      fail(ErrorCode::StrideViolation, describe(c) + " is off the stride-" + std::to_string(stride_in) + " lattice");
    }
    const VoxelCoord d{floor_div(c.x, out_stride) * out_stride, floor_div(c.y, out_stride) * out_stride,
                       floor_div(c.z, out_stride) * out_stride};
    const auto next = static_cast<std::int32_t>(out.size());
    if (seen.insert(d, next) == next) out.push_back(d);
  }
  return out;
}

SparseTensor concat_features(const SparseTensor& a, const SparseTensor& b) {
  if (a.coord_set() != b.coord_set()) {
    bool same = a.size() == b.size() && a.stride() == b.stride();
    for (std::size_t i = 0; same && i < a.size(); ++i) same = a.coords()[i] == b.coords()[i];
    if (!same) fail(ErrorCode::ShapeError, "concat requires identical coordinate sets");
  }
  const std::size_t ca = a.channels();
  const std::size_t cb = b.channels();
  FeatureMatrix out(a.size(), ca + cb);
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto dst = out.row(i);
    auto ra = a.features().row(i);
    auto rb = b.features().row(i);
    std::copy(ra.begin(), ra.end(), dst.begin());
    std::copy(rb.begin(), rb.end(), dst.begin() + static_cast<std::ptrdiff_t>(ca));
  }
  return a.with_features(std::move(out));
}

}  // namespace sfpn
