// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#include "sfpn/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "sfpn/error.hpp"

namespace sfpn {
namespace {

struct Patch {
  Point3 origin;
  Point3 u;
  Point3 v;
};

double length(const Point3& a) { return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]); }

Point3 cross(const Point3& a, const Point3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

Point3 normalized(const Point3& a) {
  const double n = length(a);
  return {a[0] / n, a[1] / n, a[2] / n};
}

void add_box_patches(std::vector<Patch>& patches, const Box3& b) {
  const double dx = b.max[0] - b.min[0], dy = b.max[1] - b.min[1], dz = b.max[2] - b.min[2];
  patches.push_back({{b.min[0], b.min[1], b.max[2]}, {dx, 0, 0}, {0, dy, 0}});
  patches.push_back({{b.min[0], b.min[1], b.min[2]}, {dx, 0, 0}, {0, 0, dz}});
  patches.push_back({{b.min[0], b.max[1], b.min[2]}, {dx, 0, 0}, {0, 0, dz}});
  patches.push_back({{b.min[0], b.min[1], b.min[2]}, {0, dy, 0}, {0, 0, dz}});
  patches.push_back({{b.max[0], b.min[1], b.min[2]}, {0, dy, 0}, {0, 0, dz}});
}

// Entry distance of the ray into `b`, or +inf.
double ray_box(const Point3& o, const Point3& d, const Box3& b) {
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < b.min[a] || o[a] > b.max[a]) return std::numeric_limits<double>::infinity();
      continue;
    }
    double lo = (b.min[a] - o[a]) / d[a];
    double hi = (b.max[a] - o[a]) / d[a];
    if (lo > hi) std::swap(lo, hi);
    t0 = std::max(t0, lo);
    t1 = std::min(t1, hi);
    if (t0 > t1) return std::numeric_limits<double>::infinity();
  }
  return t0 > 0.0 ? t0 : std::numeric_limits<double>::infinity();
}

}  // namespace

std::vector<Point3> synthetic_room(std::uint64_t seed, const RoomOptions& options) {
  if (options.points == 0) fail(ErrorCode::EmptyCloud, "synthetic room needs at least one point");
  if (options.min_boxes < 0 || options.max_boxes < options.min_boxes)
    fail(ErrorCode::ConfigError, "invalid box count range");
  Rng rng = Rng::derive(seed, "synthetic-room");
  const double W = options.width, D = options.depth, H = options.height;

  std::vector<Patch> patches;
  patches.push_back({{0, 0, 0}, {W, 0, 0}, {0, D, 0}});
  if (H > 0.0) {
    patches.push_back({{0, 0, 0}, {W, 0, 0}, {0, 0, H}});
    patches.push_back({{0, D, 0}, {W, 0, 0}, {0, 0, H}});
    patches.push_back({{0, 0, 0}, {0, D, 0}, {0, 0, H}});
    patches.push_back({{W, 0, 0}, {0, D, 0}, {0, 0, H}});
  }

  const auto boxes = static_cast<std::int32_t>(options.min_boxes + rng.below(static_cast<std::uint64_t>(options.max_boxes - options.min_boxes + 1)));
  for (std::int32_t i = 0; i < boxes; ++i) {
    const double sx = rng.uniform(0.3, 1.2), sy = rng.uniform(0.3, 1.2), sz = rng.uniform(0.3, 1.5);
    const double x = rng.uniform(0.1, std::max(0.1, W - sx - 0.1));
    const double y = rng.uniform(0.1, std::max(0.1, D - sy - 0.1));
    add_box_patches(patches, Box3{{x, y, 0.0}, {x + sx, y + sy, sz}});
  }

  std::vector<double> cdf;
  double total = 0.0;
  for (const Patch& p : patches) {
    total += length(cross(p.u, p.v));
    cdf.push_back(total);
  }
  std::vector<Point3> out;
  out.reserve(options.points);
  for (std::size_t i = 0; i < options.points; ++i) {
    const double pick = rng.uniform01() * total;
    const auto idx = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), pick) - cdf.begin());
    const Patch& p = patches[std::min(idx, patches.size() - 1)];
    const double a = rng.uniform01(), b = rng.uniform01();
    out.push_back({p.origin[0] + a * p.u[0] + b * p.v[0], p.origin[1] + a * p.u[1] + b * p.v[1],
                   p.origin[2] + a * p.u[2] + b * p.v[2]});
  }
  return out;
}

Pose look_at(const Point3& eye, const Point3& target) {
  const Point3 f = normalized({target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]});
  Point3 side = cross(f, {0.0, 0.0, 1.0});
  // Looking straight up or down: image right follows world +x.
  if (length(side) < 1e-9) side = cross(f, {0.0, f[2] > 0.0 ? 1.0 : -1.0, 0.0});
  const Point3 r = normalized(side);
  const Point3 down = cross(f, r);
  std::array<std::array<double, 3>, 3> R{};
  for (int i = 0; i < 3; ++i) R[i] = {r[i], down[i], f[i]};
  return pose_from(R, {eye[0], eye[1], eye[2]});
}

void render_frame(const SyntheticSequence& seq, const Pose& pose, std::vector<float>& depth, MaskImage& masks) {
  const std::size_t n = static_cast<std::size_t>(seq.width) * static_cast<std::size_t>(seq.height);
  depth.assign(n, 0.0f);
  masks.width = seq.width;
  masks.height = seq.height;
  masks.ids.assign(n, 0);
  const Point3 o{pose[3], pose[7], pose[11]};
  const Intrinsics& k = seq.intrinsics;
  for (std::int32_t v = 0; v < seq.height; ++v) {
    for (std::int32_t u = 0; u < seq.width; ++u) {
      const double cam[3] = {(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0};
      Point3 d{};
      for (int i = 0; i < 3; ++i) d[i] = pose[i * 4] * cam[0] + pose[i * 4 + 1] * cam[1] + pose[i * 4 + 2] * cam[2];
      double best = std::numeric_limits<double>::infinity();
      std::uint16_t id = 0;
      if (d[2] < 0.0) {
        const double t = -o[2] / d[2];
        const double x = o[0] + t * d[0], y = o[1] + t * d[1];
        if (t > 0.0 && std::abs(x) <= seq.floor_extent && std::abs(y) <= seq.floor_extent) best = t;
      }
      for (std::size_t b = 0; b < seq.objects.size(); ++b) {
        const double t = ray_box(o, d, seq.objects[b].box);
        if (t < best) {
          best = t;
          id = static_cast<std::uint16_t>(b + 1);
        }
      }
      if (std::isfinite(best)) {
        const std::size_t p = static_cast<std::size_t>(v) * seq.width + u;
        depth[p] = static_cast<float>(best);
        masks.ids[p] = id;
      }
    }
  }
}

void write_synthetic_sequence(const std::filesystem::path& dir, const SyntheticSequence& seq) {
  SequenceInfo info;
  info.intrinsics = seq.intrinsics;
  info.width = seq.width;
  info.height = seq.height;
  info.poses = seq.poses;
  write_sequence_info(dir, info);
  for (std::size_t i = 0; i < seq.poses.size(); ++i) {
    FrameRecord frame;
    frame.width = seq.width;
    frame.height = seq.height;
    frame.intrinsics = seq.intrinsics;
    frame.pose = seq.poses[i];
    frame.frame_id = static_cast<std::int64_t>(i);
    MaskImage masks;
    render_frame(seq, frame.pose, frame.depth, masks);
    write_depth(dir, frame.frame_id, frame);
    write_masks(dir, frame.frame_id, masks);
  }
}

SyntheticSequence random_sequence(std::uint64_t seed, std::int32_t frames, std::int32_t objects) {
  if (frames < 1 || objects < 0) fail(ErrorCode::ConfigError, "sequence needs at least one frame");
  Rng rng = Rng::derive(seed, "synthetic-sequence");
  SyntheticSequence seq;
  auto separated = [&](const Box3& b) {
    for (const SceneObject& o : seq.objects)
      if (b.min[0] < o.box.max[0] + 0.1 && o.box.min[0] < b.max[0] + 0.1 && b.min[1] < o.box.max[1] + 0.1 &&
          o.box.min[1] < b.max[1] + 0.1)
        return false;
    return true;
  };
  for (std::int32_t i = 0; i < objects; ++i) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double sx = rng.uniform(0.3, 0.8), sy = rng.uniform(0.3, 0.8), sz = rng.uniform(0.3, 1.0);
      const double x = rng.uniform(-1.5, 1.5 - sx), y = rng.uniform(-1.5, 1.5 - sy);
      const Box3 b{{x, y, 0.0}, {x + sx, y + sy, sz}};
      if (!separated(b)) continue;
      seq.objects.push_back({b});
      break;
    }
  }
  if (seq.objects.size() != static_cast<std::size_t>(objects))
    fail(ErrorCode::ConfigError, "could not place " + std::to_string(objects) + " separated objects");
  const double start = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::int32_t f = 0; f < frames; ++f) {
    const double a = start + 0.15 * f;
    seq.poses.push_back(look_at({2.5 * std::cos(a), 2.5 * std::sin(a), 1.5}, {0.0, 0.0, 0.3}));
  }
  return seq;
}

}  // namespace sfpn
