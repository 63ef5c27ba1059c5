// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#include "sfpn/rgbd.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "sfpn/error.hpp"
#include "sfpn/io.hpp"

namespace sfpn {
namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 rotation_of(const Pose& p) {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i][j] = p[static_cast<std::size_t>(4 * i + j)];
  return r;
}

Mat3 matmul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Mat3 axis_angle(const std::array<double, 3>& axis, double angle) {
  const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
  const double x = axis[0], y = axis[1], z = axis[2];
  return Mat3{{{t * x * x + c, t * x * y - s * z, t * x * z + s * y},
               {t * x * y + s * z, t * y * y + c, t * y * z - s * x},
               {t * x * z - s * y, t * y * z + s * x, t * z * z + c}}};
}

}  // namespace

Pose identity_pose() { return Pose{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1}; }

Pose pose_from(const Mat3& r, const std::array<double, 3>& t) {
  Pose p = identity_pose();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) p[static_cast<std::size_t>(4 * i + j)] = static_cast<float>(r[i][j]);
    p[static_cast<std::size_t>(4 * i + 3)] = static_cast<float>(t[static_cast<std::size_t>(i)]);
  }
  return p;
}

void validate_pose(const Pose& p) {
  if (p[12] != 0.0f || p[13] != 0.0f || p[14] != 0.0f || p[15] != 1.0f) {
    fail(ErrorCode::RangeError, "pose bottom row must be (0,0,0,1)");
  }
  const Mat3 r = rotation_of(p);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) dot += r[i][k] * r[j][k];
      if (std::abs(dot - (i == j ? 1.0 : 0.0)) > 1e-4) fail(ErrorCode::RangeError, "pose rotation is not orthonormal");
    }
  for (float v : p)
    if (!std::isfinite(v)) fail(ErrorCode::RangeError, "pose has non-finite entries");
}

Pose compose(const Pose& a, const Pose& b) {
  Pose c{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += static_cast<double>(a[static_cast<std::size_t>(4 * i + k)]) * b[static_cast<std::size_t>(4 * k + j)];
      c[static_cast<std::size_t>(4 * i + j)] = static_cast<float>(s);
    }
  return c;
}

Pose rigid_inverse(const Pose& p) {
  const Mat3 r = rotation_of(p);
  Mat3 rt;
  std::array<double, 3> t{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) rt[i][j] = r[j][i];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) t[static_cast<std::size_t>(i)] -= rt[i][j] * p[static_cast<std::size_t>(4 * j + 3)];
  return pose_from(rt, t);
}

Point3 transform(const Pose& p, const Point3& x) {
  Point3 y;
  for (int i = 0; i < 3; ++i) {
    const auto row = static_cast<std::size_t>(4 * i);
    y[static_cast<std::size_t>(i)] = static_cast<double>(p[row]) * x[0] + static_cast<double>(p[row + 1]) * x[1] +
                                     static_cast<double>(p[row + 2]) * x[2] + static_cast<double>(p[row + 3]);
  }
  return y;
}

void FrameRecord::validate() const {
  if (width < 1 || height < 1) fail(ErrorCode::ShapeError, "frame dimensions must be positive");
  if (depth.size() != static_cast<std::size_t>(width) * height) fail(ErrorCode::ShapeError, "depth buffer size mismatch");
  if (!(intrinsics.fx > 0.0) || !(intrinsics.fy > 0.0)) fail(ErrorCode::RangeError, "focal lengths must be positive");
  validate_pose(pose);
}

std::vector<Point3> project_depth(const FrameRecord& frame) {
  frame.validate();
  const Intrinsics& k = frame.intrinsics;
  std::vector<Point3> out;
  for (std::int32_t v = 0; v < frame.height; ++v) {
    for (std::int32_t u = 0; u < frame.width; ++u) {
      const float raw = frame.depth_at(u, v);
      if (!valid_depth(raw)) continue;
      const double d = raw;
      const Point3 cam{d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d};
      out.push_back(transform(frame.pose, cam));
    }
  }
  if (out.empty()) fail(ErrorCode::EmptyFrame, "frame " + std::to_string(frame.frame_id) + " has no valid depth");
  return out;
}

std::size_t accumulate(SceneState& state, std::span<const Point3> frame_points, std::int64_t frame_id) {
  const std::size_t first = state.points.size();
  state.points.insert(state.points.end(), frame_points.begin(), frame_points.end());
  state.point_frame.insert(state.point_frame.end(), frame_points.size(), frame_id);
  ++state.frames;
  return first;
}

Pose perturb_pose(const Pose& pose, double noise_ratio, Rng& rng) {
  if (!(noise_ratio >= 0.0 && noise_ratio <= 1.0)) fail(ErrorCode::RangeError, "noise ratio must lie in [0, 1]");
  if (noise_ratio == 0.0) return pose;
  validate_pose(pose);

  const double t_bound = noise_ratio * kPoseNoiseScale;
  std::array<double, 3> t{};
  for (int i = 0; i < 3; ++i) {
    t[static_cast<std::size_t>(i)] =
        static_cast<double>(pose[static_cast<std::size_t>(4 * i + 3)]) + rng.uniform(-t_bound, t_bound);
  }
  const double z = rng.uniform(-1.0, 1.0);
  const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double rxy = std::sqrt(std::max(0.0, 1.0 - z * z));
  const std::array<double, 3> axis{rxy * std::cos(phi), rxy * std::sin(phi), z};
  const double half_range = noise_ratio * std::numbers::pi / 2.0;
  const double angle = rng.uniform(-half_range, half_range);

  Pose out = pose_from(matmul(axis_angle(axis, angle), rotation_of(pose)), t);
  // Keep the translation jitter inside its bound after rounding to f32.
  for (int i = 0; i < 3; ++i) {
    const auto idx = static_cast<std::size_t>(4 * i + 3);
    const double base = pose[idx];
    while (static_cast<double>(out[idx]) - base > t_bound) out[idx] = std::nextafter(out[idx], -INFINITY);
    while (base - static_cast<double>(out[idx]) > t_bound) out[idx] = std::nextafter(out[idx], INFINITY);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequence directory I/O

std::string frame_file_stem(std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06lld", static_cast<long long>(index));
  return buf;
}

SequenceInfo read_sequence_info(const std::filesystem::path& dir) {
  SequenceInfo info;
  const auto json_bytes = read_file(dir / "intrinsics.json");
  try {
    const auto j = nlohmann::json::parse(json_bytes.begin(), json_bytes.end());
    info.intrinsics = {j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(),
                       j.at("cy").get<double>()};
    info.width = j.at("width").get<std::int32_t>();
    info.height = j.at("height").get<std::int32_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, (dir / "intrinsics.json").string() + ": " + e.what());
  }
  std::ifstream poses(dir / "poses.txt");
  if (!poses) fail(ErrorCode::IoError, "cannot open " + (dir / "poses.txt").string());
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(poses, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    Pose p{};
    for (float& v : p) {
      if (!(ss >> v)) fail(ErrorCode::FormatError, "poses.txt line " + std::to_string(line_no + 1) + " needs 16 floats");
    }
    info.poses.push_back(p);
    ++line_no;
  }
  if (info.poses.empty()) fail(ErrorCode::FormatError, "poses.txt lists no frames");
  return info;
}

FrameRecord read_frame(const std::filesystem::path& dir, const SequenceInfo& info, std::int64_t index) {
  if (index < 0 || static_cast<std::size_t>(index) >= info.poses.size()) {
    fail(ErrorCode::RangeError, "frame " + std::to_string(index) + " has no pose");
  }
  const auto path = dir / "depth" / (frame_file_stem(index) + ".f32");
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const Error&) {
    fail(ErrorCode::IoError, "frame " + std::to_string(index) + ": missing depth file " + path.string());
  }
  const std::size_t pixels = static_cast<std::size_t>(info.width) * info.height;
  if (bytes.size() != pixels * 4) {
    fail(ErrorCode::FormatError, "frame " + std::to_string(index) + ": depth file has wrong size");
  }
  FrameRecord f;
  f.width = info.width;
  f.height = info.height;
  f.intrinsics = info.intrinsics;
  f.pose = info.poses[static_cast<std::size_t>(index)];
  f.frame_id = index;
  f.depth.resize(pixels);
  ByteReader r(bytes);
  for (float& d : f.depth) d = r.f32();
  return f;
}

std::optional<MaskImage> read_masks(const std::filesystem::path& dir, const SequenceInfo& info, std::int64_t index) {
  const auto path = dir / "masks" / (frame_file_stem(index) + ".u16");
  if (!std::filesystem::exists(path)) return std::nullopt;
  const auto bytes = read_file(path);
  const std::size_t pixels = static_cast<std::size_t>(info.width) * info.height;
  if (bytes.size() != pixels * 2) {
    fail(ErrorCode::FormatError, "frame " + std::to_string(index) + ": mask file has wrong size");
  }
  MaskImage m{info.width, info.height, std::vector<std::uint16_t>(pixels)};
  ByteReader r(bytes);
  for (auto& id : m.ids) id = r.u16();
  return m;
}

void write_sequence_info(const std::filesystem::path& dir, const SequenceInfo& info) {
  std::filesystem::create_directories(dir / "depth");
  nlohmann::ordered_json j;
  j["fx"] = info.intrinsics.fx;
  j["fy"] = info.intrinsics.fy;
  j["cx"] = info.intrinsics.cx;
  j["cy"] = info.intrinsics.cy;
  j["width"] = info.width;
  j["height"] = info.height;
  const std::string text = j.dump(2) + "\n";
  write_file(dir / "intrinsics.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  std::ofstream poses(dir / "poses.txt", std::ios::trunc);
  if (!poses) fail(ErrorCode::IoError, "cannot write poses.txt");
  for (const Pose& p : info.poses) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(p[i]));
      poses << buf << (i + 1 < p.size() ? ' ' : '\n');
    }
  }
}

void write_depth(const std::filesystem::path& dir, std::int64_t index, const FrameRecord& frame) {
  std::filesystem::create_directories(dir / "depth");
  ByteWriter w;
  for (float d : frame.depth) w.f32(d);
  write_file(dir / "depth" / (frame_file_stem(index) + ".f32"), w.bytes());
}

void write_masks(const std::filesystem::path& dir, std::int64_t index, const MaskImage& masks) {
  std::filesystem::create_directories(dir / "masks");
  ByteWriter w;
  for (std::uint16_t id : masks.ids) w.u16(id);
  write_file(dir / "masks" / (frame_file_stem(index) + ".u16"), w.bytes());
}

}  // namespace sfpn
