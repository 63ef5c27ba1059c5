// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sfpn/rgbd.hpp"
#include "sfpn/segmentation.hpp"
#include "sfpn/sfpn.hpp"

namespace sfpn {

struct SegmentOptions {
  double voxel_size = 0.02;
  std::int32_t rounds = 1;
  std::int32_t classes = 1;
  MergeConfig merge;
  double noise = 0.0;      // pose noise ratio, 0 = off
  std::uint64_t seed = 0;  // query decoder weights and the pose-noise stream
};

struct FrameTiming {
  std::int64_t frame_id = 0;
  double project_ms = 0.0;
  double voxelize_ms = 0.0;
  double forward_ms = 0.0;
  double lift_ms = 0.0;
  double refine_ms = 0.0;
  double merge_ms = 0.0;
  std::size_t points = 0;
  std::size_t voxels = 0;
  std::size_t queries = 0;
  std::size_t instances = 0;
};

struct SequenceResult {
  InstanceStore store;
  SceneState scene;
  std::vector<FrameTiming> timing;
  std::vector<std::vector<std::int64_t>> assignments;  // instance id per retained query, per frame
};

/// Processes every frame of a sequence directory in order:
/// project, accumulate, voxelize, backbone, lift, refine, merge.
/// When `out_dir` is non-empty it receives, per frame t,
///   instances_t.jsonl  one {"id","class","point_count","bbox_min","bbox_max","feature_checksum"} per instance
///   points_t.u32       u32 instance count, then per instance: u32 id, u32 n, n u32 scene point indices
/// and a final timing.csv.
SequenceResult run_sequence(const std::filesystem::path& dir, const SFPNModel& model, const SegmentOptions& options,
                            const std::filesystem::path& out_dir = {});

/// FNV-1a over the little-endian bytes of the feature.
std::uint64_t feature_checksum(std::span<const float> feature);

std::string instances_jsonl(const InstanceStore& store, const SceneState& scene);
std::vector<std::uint8_t> instance_points_u32(const InstanceStore& store);
std::string timing_csv(std::span<const FrameTiming> timing);

}  // namespace sfpn
