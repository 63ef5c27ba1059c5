// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "sfpn/rgbd.hpp"
#include "sfpn/segmentation.hpp"

namespace sfpn {

struct RoomOptions {
  std::size_t points = 20000;
  double width = 2.0;   // x extent, meters
  double depth = 2.0;   // y extent
  double height = 0.0;  // wall height; 0 = no walls
  std::int32_t min_boxes = 3;
  std::int32_t max_boxes = 6;
};

/// Floor, optional walls and random boxes resting on the floor,
/// surface-sampled with area-proportional density. The default extent gives
/// roughly the surface density of a single RGB-D frame at 2 cm voxels.
/// Deterministic per seed.
std::vector<Point3> synthetic_room(std::uint64_t seed, const RoomOptions& options = {});

/// Axis-aligned object in a ray-cast scene; mask id is its index + 1.
struct SceneObject {
  Box3 box;
};

struct SyntheticSequence {
  std::int32_t width = 64;
  std::int32_t height = 48;
  Intrinsics intrinsics{60.0, 60.0, 31.5, 23.5};
  double floor_extent = 3.0;  // floor spans [-extent, extent]^2 at z = 0
  std::vector<SceneObject> objects;
  std::vector<Pose> poses;
};

/// Camera-to-world pose at `eye` looking at `target`, z up in the world.
Pose look_at(const Point3& eye, const Point3& target);

/// Renders depth (camera z) and object masks by ray casting; pixels that hit
/// nothing get depth 0.
void render_frame(const SyntheticSequence& seq, const Pose& pose, std::vector<float>& depth, MaskImage& masks);

/// Writes a sequence directory readable by read_sequence_info/read_frame/read_masks.
void write_synthetic_sequence(const std::filesystem::path& dir, const SyntheticSequence& seq);

/// Random boxes on the floor and `frames` cameras orbiting the scene center.
SyntheticSequence random_sequence(std::uint64_t seed, std::int32_t frames, std::int32_t objects);

}  // namespace sfpn
