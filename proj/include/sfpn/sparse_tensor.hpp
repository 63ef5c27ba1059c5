// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace sfpn {

/// Integer voxel index. At stride s every component is a multiple of s.
struct VoxelCoord {
  std::int32_t x = 0;
  std::int32_t y = 0;
  std::int32_t z = 0;

  auto operator<=>(const VoxelCoord&) const = default;
};

/// Point in meters.
using Point3 = std::array<double, 3>;

/// Row index of the voxel each input point fell into.
using PointToVoxelMap = std::vector<std::int32_t>;

inline constexpr std::int32_t kCoordLimit = 1 << 20;  // |component| < 2^20

inline std::int32_t floor_div(std::int32_t a, std::int32_t b) {
  std::int32_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

/// Exact coordinate -> row lookup. Open addressing with linear probing over
/// coordinates packed into 63 bits.
class CoordIndex {
 public:
  CoordIndex() = default;

  /// Throws DuplicateCoord if a coordinate repeats, InvalidPoint if one is
  /// outside the representable range.
  explicit CoordIndex(std::span<const VoxelCoord> coords);

  /// Row of `c`, or -1 when absent.
  std::int32_t lookup(VoxelCoord c) const noexcept;

  std::optional<std::int32_t> find(VoxelCoord c) const {
    const std::int32_t row = lookup(c);
    if (row < 0) return std::nullopt;
    return row;
  }

  bool contains(VoxelCoord c) const noexcept { return lookup(c) >= 0; }
  std::size_t size() const noexcept { return size_; }

  /// Inserts `c` with `row` unless present; returns the row stored for `c`.
  std::int32_t insert(VoxelCoord c, std::int32_t row);
  void reserve(std::size_t n);

  static bool representable(VoxelCoord c) noexcept;

 private:
  static constexpr std::uint64_t kEmpty = ~0ull;
  static std::uint64_t pack(VoxelCoord c) noexcept;
  static std::uint64_t hash(std::uint64_t key) noexcept;
  void rehash(std::size_t capacity);

  std::vector<std::uint64_t> keys_;
  std::vector<std::int32_t> rows_;
  std::uint64_t mask_ = 0;
  std::size_t size_ = 0;
};

CoordIndex build_index(std::span<const VoxelCoord> coords);

/// Immutable, duplicate-free coordinate list on one stride lattice together
/// with its index. Shared between every tensor living on the same support.
class CoordSet {
 public:
  static std::shared_ptr<const CoordSet> create(std::vector<VoxelCoord> coords, std::int32_t stride);

  std::span<const VoxelCoord> coords() const noexcept { return coords_; }
  const VoxelCoord& operator[](std::size_t i) const { return coords_[i]; }
  std::int32_t stride() const noexcept { return stride_; }
  const CoordIndex& index() const noexcept { return index_; }
  std::size_t size() const noexcept { return coords_.size(); }

 private:
  CoordSet(std::vector<VoxelCoord> coords, std::int32_t stride, CoordIndex index)
      : coords_(std::move(coords)), stride_(stride), index_(std::move(index)) {}

  std::vector<VoxelCoord> coords_;
  std::int32_t stride_;
  CoordIndex index_;
};

/// Row-major N x C float matrix.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;
  FeatureMatrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  FeatureMatrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  std::span<float> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const float> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }
  float& at(std::size_t i, std::size_t c) { return data_[i * cols_ + c]; }
  float at(std::size_t i, std::size_t c) const { return data_[i * cols_ + c]; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  bool operator==(const FeatureMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

/// Occupied voxels at one stride plus an N x C feature matrix.
class SparseTensor {
 public:
  SparseTensor(std::shared_ptr<const CoordSet> coords, FeatureMatrix features, double voxel_size);

  const std::shared_ptr<const CoordSet>& coord_set() const noexcept { return coords_; }
  std::span<const VoxelCoord> coords() const noexcept { return coords_->coords(); }
  const FeatureMatrix& features() const noexcept { return features_; }
  std::int32_t stride() const noexcept { return coords_->stride(); }
  double voxel_size() const noexcept { return voxel_size_; }
  std::size_t size() const noexcept { return coords_->size(); }
  std::size_t channels() const noexcept { return features_.cols(); }

  std::optional<std::int32_t> find(VoxelCoord c) const { return coords_->index().find(c); }

  /// Same support, new features.
  SparseTensor with_features(FeatureMatrix features) const;

 private:
  std::shared_ptr<const CoordSet> coords_;
  FeatureMatrix features_;
  double voxel_size_;
};

/// Checks every SparseTensor invariant; throws on the first violation.
void validate(const SparseTensor& t);

struct VoxelizeResult {
  SparseTensor tensor;
  PointToVoxelMap point_map;
};

/// Floors each point to its voxel and averages per-point features per voxel
/// (constant 1 when `point_features` is null). Rows follow first occurrence.
VoxelizeResult voxelize(std::span<const Point3> points, double voxel_size,
                        const FeatureMatrix* point_features = nullptr);

/// Unique floor(c / (stride_in * factor)) * (stride_in * factor), in order of
/// first occurrence.
std::vector<VoxelCoord> downsample_coords(std::span<const VoxelCoord> coords, std::int32_t stride_in,
                                          std::int32_t factor = 2);

/// Concatenates feature columns of tensors sharing one coordinate set.
SparseTensor concat_features(const SparseTensor& a, const SparseTensor& b);

}  // namespace sfpn
