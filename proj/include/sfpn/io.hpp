// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sfpn/sparse_tensor.hpp"

namespace sfpn {

// ---------------------------------------------------------------------------
// Little-endian byte helpers shared by the binary formats.

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void f32(float v);
  void raw(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  void text(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  const std::vector<std::uint8_t>& bytes() const& { return bytes_; }
  std::vector<std::uint8_t> bytes() && { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  float f32();
  std::string text(std::size_t n);
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> take(std::size_t n);

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// SFPW weight container:
//   "SFPW" | u32 version | u32 record count |
//   per record: u32 name length | name bytes | u8 dtype (0 = f32) | u8 rank |
//               rank x u32 dims | little-endian payload

inline constexpr std::uint32_t kWeightFormatVersion = 1;

struct WeightRecord {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  std::size_t element_count() const;
  bool operator==(const WeightRecord&) const = default;
};

struct WeightFile {
  std::uint32_t version = kWeightFormatVersion;
  std::vector<WeightRecord> records;

  const WeightRecord* find(std::string_view name) const;
  bool operator==(const WeightFile&) const = default;
};

std::vector<std::uint8_t> encode_weights(const WeightFile& file);
WeightFile decode_weights(std::span<const std::uint8_t> bytes);
void save_weights(const std::filesystem::path& path, const WeightFile& file);
WeightFile load_weights(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// SPC1 point cloud:
//   "SPC1" | u8 flags (bit 0: feature block present) | u32 point count |
//   [u32 feature width, if flagged] | N x 3 f32 xyz | [N x F f32 features]

struct PointCloud {
  std::vector<Point3> points;
  std::optional<FeatureMatrix> features;
};

std::vector<std::uint8_t> encode_point_cloud(const PointCloud& cloud);
PointCloud decode_point_cloud(std::span<const std::uint8_t> bytes);
void save_point_cloud(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud load_point_cloud(const std::filesystem::path& path);

}  // namespace sfpn
