// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#include "sfpn/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstdio>
#include <cstring>

#include "json.hpp"
#include "sfpn/error.hpp"
#include "sfpn/io.hpp"

namespace sfpn {
namespace {

using Clock = std::chrono::steady_clock;

template <class F>
auto timed(double& ms, F&& f) {
  const auto t0 = Clock::now();
  if constexpr (std::is_void_v<decltype(f())>) {
    f();
    ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  } else {
    auto r = f();
    ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    return r;
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace

std::uint64_t feature_checksum(std::span<const float> feature) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (float v : feature) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
    for (int b = 0; b < 4; ++b) {
      h ^= (bits >> (8 * b)) & 0xffu;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string instances_jsonl(const InstanceStore& store, const SceneState& scene) {
  std::string out;
  for (const Instance& inst : store.instances) {
    Point3 lo{0, 0, 0}, hi{0, 0, 0};
    for (std::size_t k = 0; k < inst.points.size(); ++k) {
      const Point3& p = scene.points.at(inst.points[k]);
      for (int a = 0; a < 3; ++a) {
        lo[a] = k == 0 ? p[a] : std::min(lo[a], p[a]);
        hi[a] = k == 0 ? p[a] : std::max(hi[a], p[a]);
      }
    }
    nlohmann::ordered_json j;
    j["id"] = inst.id;
    j["class"] = inst.class_id;
    j["point_count"] = inst.points.size();
    j["bbox_min"] = lo;
    j["bbox_max"] = hi;
    char hex[20];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(feature_checksum(inst.feature)));
    j["feature_checksum"] = hex;
    out += j.dump() + '\n';
  }
  return out;
}

std::vector<std::uint8_t> instance_points_u32(const InstanceStore& store) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(store.instances.size()));
  for (const Instance& inst : store.instances) {
    w.u32(static_cast<std::uint32_t>(inst.id));
    w.u32(static_cast<std::uint32_t>(inst.points.size()));
    for (std::uint32_t p : inst.points) w.u32(p);
  }
  return std::move(w).bytes();
}

std::string timing_csv(std::span<const FrameTiming> timing) {
  std::string out = "frame,project_ms,voxelize_ms,forward_ms,lift_ms,refine_ms,merge_ms,points,voxels,queries,instances\n";
  char buf[256];
  for (const FrameTiming& t : timing) {
    std::snprintf(buf, sizeof buf, "%lld,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%zu,%zu,%zu,%zu\n",
                  static_cast<long long>(t.frame_id), t.project_ms, t.voxelize_ms, t.forward_ms, t.lift_ms,
                  t.refine_ms, t.merge_ms, t.points, t.voxels, t.queries, t.instances);
    out += buf;
  }
  return out;
}

SequenceResult run_sequence(const std::filesystem::path& dir, const SFPNModel& model, const SegmentOptions& options,
                            const std::filesystem::path& out_dir) {
  if (options.rounds < 0) fail(ErrorCode::RangeError, "refinement rounds must be non-negative");
  const SequenceInfo info = read_sequence_info(dir);
  const QueryDecoderParams decoder = QueryDecoderParams::make(model.config.output_dim, options.classes, options.seed);
  Rng noise_rng = Rng::derive(options.seed, "pose-noise");
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  SequenceResult result;
  for (std::size_t t = 0; t < info.poses.size(); ++t) {
    const auto index = static_cast<std::int64_t>(t);
    FrameRecord frame = read_frame(dir, info, index);
    const std::optional<MaskImage> mask_image = read_masks(dir, info, index);
    if (!mask_image)
      fail(ErrorCode::IoError, "frame " + std::to_string(index) + ": missing mask file " +
                                   (dir / "masks" / (frame_file_stem(index) + ".u16")).string());
    if (options.noise > 0.0) frame.pose = perturb_pose(frame.pose, options.noise, noise_rng);

    FrameTiming timing;
    timing.frame_id = frame.frame_id;
    const std::vector<Point3> points = timed(timing.project_ms, [&] { return project_depth(frame); });
    const std::size_t first = accumulate(result.scene, points, frame.frame_id);
    const VoxelizeResult vox = timed(timing.voxelize_ms, [&] { return voxelize(points, options.voxel_size); });
    const SparseTensor fp = timed(timing.forward_ms, [&] { return forward(model, vox.tensor).features; });

    const MaskSet2D masks = MaskSet2D::from_image(*mask_image);
    CurrentMasks current;
    current.frame_id = frame.frame_id;
    if (masks.count > 0) {
      const QuerySet queries = timed(timing.lift_ms, [&] { return lift_masks(masks, frame, fp, vox.point_map); });
      Prediction pred = timed(timing.refine_ms, [&] { return refine_and_predict(queries, fp, options.rounds, decoder); });
      normalize_rows(pred.queries);
      current.features = std::move(pred.queries);
      for (std::size_t q = 0; q < queries.size(); ++q) {
        std::vector<std::uint32_t> global;
        global.reserve(queries.points[q].size());
        for (std::uint32_t k : queries.points[q]) global.push_back(static_cast<std::uint32_t>(first + k));
        current.points.push_back(std::move(global));
        const auto logits = pred.class_logits.row(q);
        current.class_ids.push_back(static_cast<std::int32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin()));
      }
    }

    std::vector<std::int64_t> assignment;
    result.store = timed(timing.merge_ms, [&] { return merge(current, std::move(result.store), options.merge, &assignment); });
    timing.points = points.size();
    timing.voxels = vox.tensor.size();
    timing.queries = current.points.size();
    timing.instances = result.store.instances.size();
    result.timing.push_back(timing);
    result.assignments.push_back(std::move(assignment));

    if (!out_dir.empty()) {
      const std::string stem = frame_file_stem(index);
      write_text(out_dir / ("instances_" + stem + ".jsonl"), instances_jsonl(result.store, result.scene));
      write_file(out_dir / ("points_" + stem + ".u32"), instance_points_u32(result.store));
    }
  }
  if (!out_dir.empty()) write_text(out_dir / "timing.csv", timing_csv(result.timing));
  return result;
}

}  // namespace sfpn
