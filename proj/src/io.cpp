// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#include "sfpn/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "sfpn/error.hpp"

namespace sfpn {

void ByteWriter::u16(std::uint16_t v) {
  u8(static_cast<std::uint8_t>(v));
  u8(static_cast<std::uint8_t>(v >> 8));
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

std::span<const std::uint8_t> ByteReader::take(std::size_t n) {
  if (remaining() < n) fail(ErrorCode::FormatError, "unexpected end of data");
  auto s = bytes_.subspan(pos_, n);
  pos_ += n;
  return s;
}

std::uint8_t ByteReader::u8() { return take(1)[0]; }

std::uint16_t ByteReader::u16() {
  auto b = take(2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t ByteReader::u32() {
  auto b = take(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

std::string ByteReader::text(std::size_t n) {
  auto b = take(n);
  return std::string(b.begin(), b.end());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoError, "short write to " + path.string());
}

// ---------------------------------------------------------------------------
// SFPW

std::size_t WeightRecord::element_count() const {
  std::size_t n = 1;
  for (std::uint32_t d : dims) n *= d;
  return n;
}

const WeightRecord* WeightFile::find(std::string_view name) const {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

std::vector<std::uint8_t> encode_weights(const WeightFile& file) {
  ByteWriter w;
  w.text("SFPW");
  w.u32(file.version);
  w.u32(static_cast<std::uint32_t>(file.records.size()));
  for (const WeightRecord& r : file.records) {
    if (r.dims.size() > 255) fail(ErrorCode::FormatError, "rank too large for " + r.name);
    if (r.element_count() != r.data.size()) fail(ErrorCode::ShapeError, "dims do not match payload for " + r.name);
    w.u32(static_cast<std::uint32_t>(r.name.size()));
    w.text(r.name);
    w.u8(0);
    w.u8(static_cast<std::uint8_t>(r.dims.size()));
    for (std::uint32_t d : r.dims) w.u32(d);
    for (float v : r.data) w.f32(v);
  }
  return std::move(w).bytes();
}

WeightFile decode_weights(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.text(4) != "SFPW") fail(ErrorCode::FormatError, "bad weight file magic");
  WeightFile file;
  file.version = r.u32();
  if (file.version != kWeightFormatVersion) {
    fail(ErrorCode::FormatError, "unsupported weight file version " + std::to_string(file.version));
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    WeightRecord rec;
    const std::uint32_t len = r.u32();
    rec.name = r.text(len);
    const std::uint8_t dtype = r.u8();
    if (dtype != 0) fail(ErrorCode::FormatError, "unsupported dtype tag " + std::to_string(dtype) + " in " + rec.name);
    const std::uint8_t rank = r.u8();
    for (std::uint8_t d = 0; d < rank; ++d) rec.dims.push_back(r.u32());
    const std::size_t n = rec.element_count();
    if (n > r.remaining() / 4) fail(ErrorCode::FormatError, "payload of " + rec.name + " exceeds file size");
    rec.data.resize(n);
    for (float& v : rec.data) v = r.f32();
    file.records.push_back(std::move(rec));
  }
  if (r.remaining() != 0) fail(ErrorCode::FormatError, "trailing bytes after weight records");
  return file;
}

void save_weights(const std::filesystem::path& path, const WeightFile& file) { write_file(path, encode_weights(file)); }

WeightFile load_weights(const std::filesystem::path& path) { return decode_weights(read_file(path)); }

// ---------------------------------------------------------------------------
// SPC1

std::vector<std::uint8_t> encode_point_cloud(const PointCloud& cloud) {
  ByteWriter w;
  w.text("SPC1");
  w.u8(cloud.features ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(cloud.points.size()));
  if (cloud.features) {
    if (cloud.features->rows() != cloud.points.size()) fail(ErrorCode::ShapeError, "feature rows != point count");
    w.u32(static_cast<std::uint32_t>(cloud.features->cols()));
  }
  for (const Point3& p : cloud.points)
    for (double v : p) w.f32(static_cast<float>(v));
  if (cloud.features)
    for (float v : cloud.features->data()) w.f32(v);
  return std::move(w).bytes();
}

PointCloud decode_point_cloud(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.text(4) != "SPC1") fail(ErrorCode::FormatError, "bad point cloud magic");
  const std::uint8_t flags = r.u8();
  if (flags & ~1u) fail(ErrorCode::FormatError, "unknown point cloud flag bits");
  const std::uint32_t n = r.u32();
  std::uint32_t width = 0;
  if (flags & 1u) width = r.u32();
  if (static_cast<std::size_t>(n) * (3 + width) > r.remaining() / 4) {
    fail(ErrorCode::FormatError, "point cloud payload shorter than declared");
  }
  PointCloud cloud;
  cloud.points.resize(n);
  for (Point3& p : cloud.points)
    for (double& v : p) v = r.f32();
  if (flags & 1u) {
    FeatureMatrix f(n, width);
    for (float& v : f.data()) v = r.f32();
    cloud.features = std::move(f);
  }
  if (r.remaining() != 0) fail(ErrorCode::FormatError, "trailing bytes after point cloud");
  return cloud;
}

void save_point_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  write_file(path, encode_point_cloud(cloud));
}

PointCloud load_point_cloud(const std::filesystem::path& path) { return decode_point_cloud(read_file(path)); }

}  // namespace sfpn
