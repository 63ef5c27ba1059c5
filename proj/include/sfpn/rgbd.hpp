// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "sfpn/rng.hpp"
#include "sfpn/sparse_tensor.hpp"

namespace sfpn {

struct Intrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
};

/// 4x4 camera-to-world transform, row-major.
using Pose = std::array<float, 16>;

Pose identity_pose();
Pose pose_from(const std::array<std::array<double, 3>, 3>& rotation, const std::array<double, 3>& translation);
/// Throws RangeError unless the rotation block is orthonormal within 1e-4 and
/// the bottom row is exactly (0, 0, 0, 1).
void validate_pose(const Pose& pose);
Pose compose(const Pose& a, const Pose& b);
Pose rigid_inverse(const Pose& p);
Point3 transform(const Pose& p, const Point3& x);

inline bool valid_depth(float d) { return d > 0.0f && std::isfinite(d); }

struct FrameRecord {
  std::int32_t width = 0;
  std::int32_t height = 0;
  std::vector<float> depth;  // row-major meters, 0 = invalid
  Intrinsics intrinsics;
  Pose pose = identity_pose();
  std::int64_t frame_id = 0;

  float depth_at(std::int32_t u, std::int32_t v) const { return depth[static_cast<std::size_t>(v) * width + u]; }
  void validate() const;
};

/// World-frame points of the valid-depth pixels in row-major pixel order.
/// Throws EmptyFrame when no pixel has depth.
std::vector<Point3> project_depth(const FrameRecord& frame);

struct SceneState {
  std::vector<Point3> points;
  std::vector<std::int64_t> point_frame;
  std::int64_t frames = 0;
};

/// Appends P_t; returns the index of its first point in the scene.
std::size_t accumulate(SceneState& state, std::span<const Point3> frame_points, std::int64_t frame_id);

inline constexpr double kPoseNoiseScale = 1.0;  // meters

/// Uniform translation jitter of +-noise_ratio * 1 m per axis, composed with a
/// rotation about a uniformly random axis by an angle uniform in
/// +-noise_ratio * pi/2. A zero ratio returns the pose unchanged.
Pose perturb_pose(const Pose& pose, double noise_ratio, Rng& rng);

// ---------------------------------------------------------------------------
// Sequence directory:
//   intrinsics.json   {fx, fy, cx, cy, width, height}
//   poses.txt         one row-major 4x4 pose per line (16 floats)
//   depth/NNNNNN.f32  H x W little-endian f32 meters
//   masks/NNNNNN.u16  H x W little-endian u16 mask ids, 0 = background

struct SequenceInfo {
  Intrinsics intrinsics;
  std::int32_t width = 0;
  std::int32_t height = 0;
  std::vector<Pose> poses;
};

struct MaskImage {
  std::int32_t width = 0;
  std::int32_t height = 0;
  std::vector<std::uint16_t> ids;
};

std::string frame_file_stem(std::int64_t index);
SequenceInfo read_sequence_info(const std::filesystem::path& dir);
FrameRecord read_frame(const std::filesystem::path& dir, const SequenceInfo& info, std::int64_t index);
std::optional<MaskImage> read_masks(const std::filesystem::path& dir, const SequenceInfo& info, std::int64_t index);

void write_sequence_info(const std::filesystem::path& dir, const SequenceInfo& info);
void write_depth(const std::filesystem::path& dir, std::int64_t index, const FrameRecord& frame);
void write_masks(const std::filesystem::path& dir, std::int64_t index, const MaskImage& masks);

}  // namespace sfpn
