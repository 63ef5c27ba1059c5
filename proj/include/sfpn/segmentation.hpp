// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "sfpn/rgbd.hpp"
#include "sfpn/sfpn.hpp"

namespace sfpn {

/// Disjoint 2D masks as an index map: 0 = none, k in 1..count = mask k.
struct MaskSet2D {
  std::int32_t width = 0;
  std::int32_t height = 0;
  std::vector<std::uint16_t> ids;
  std::uint16_t count = 0;

  /// Uses the largest id present as the mask count.
  static MaskSet2D from_image(const MaskImage& image);
  void validate() const;
};

/// One query per lifted mask.
struct QuerySet {
  FeatureMatrix features;                        // L x C
  std::vector<std::vector<std::int32_t>> support;  // voxel rows of F_p per query
  std::vector<std::vector<std::uint32_t>> points;  // frame-local point rows per query
  std::vector<std::uint16_t> mask_ids;
  std::vector<std::uint16_t> skipped;            // masks without valid-depth pixels

  std::size_t size() const { return mask_ids.size(); }
};

/// Pools F_p over the distinct voxels hit by each mask's valid-depth pixels.
/// `point_map[k]` is the F_p row of the frame's k-th valid-depth pixel (row-major).
QuerySet lift_masks(const MaskSet2D& masks, const FrameRecord& frame, const SparseTensor& features,
                    std::span<const std::int32_t> point_map);

struct QueryDecoderParams {
  std::int32_t dim = 0;
  std::int32_t classes = 1;
  Linear ffn1;  // C -> 2C
  Linear ffn2;  // 2C -> C
  Linear cls;   // C -> K

  static QueryDecoderParams make(std::int32_t dim, std::int32_t classes, std::uint64_t seed);
};

struct Box3 {
  std::array<double, 3> min{0, 0, 0};
  std::array<double, 3> max{0, 0, 0};

  bool operator==(const Box3&) const = default;
};

struct Prediction {
  FeatureMatrix queries;        // L x C after refinement
  FeatureMatrix context;        // L x C attention context of the last round (empty for 0 rounds)
  FeatureMatrix mask_logits;    // N x L
  std::vector<Box3> boxes;      // per query
  FeatureMatrix class_logits;   // L x K
};

/// Each round: single-head scaled dot-product attention of the queries over
/// F_p (q += context), then a residual feed-forward update. Mask logits are
/// queries . F_p^T.
Prediction refine_and_predict(const QuerySet& queries, const SparseTensor& features, std::int32_t rounds,
                              const QueryDecoderParams& params);

/// rows(a) x rows(b) matrix of dot products, float accumulation in channel order.
FeatureMatrix dot_products(const FeatureMatrix& a, const FeatureMatrix& b);

void normalize_rows(FeatureMatrix& m);

struct Instance {
  std::int64_t id = 0;
  std::vector<float> feature;          // unit norm
  std::vector<std::uint32_t> points;   // sorted scene point indices
  std::int64_t last_seen = 0;
  std::int32_t class_id = 0;
};

struct InstanceStore {
  std::vector<Instance> instances;
  std::int64_t next_id = 0;

  std::size_t total_points() const;
};

struct CurrentMasks {
  FeatureMatrix features;                          // unit-norm rows
  std::vector<std::vector<std::uint32_t>> points;  // sorted scene point indices per query
  std::vector<std::int32_t> class_ids;
  std::int64_t frame_id = 0;
};

struct MergeConfig {
  double threshold = 0.7;
  double alpha = 0.5;
};

/// Greedy one-to-one matching in descending cosine similarity; pairs at or
/// above the threshold merge, the remaining current masks open new instances.
/// `assignment`, when given, receives the instance id of each current mask.
InstanceStore merge(const CurrentMasks& current, InstanceStore store, const MergeConfig& config = {},
                    std::vector<std::int64_t>* assignment = nullptr);

}  // namespace sfpn
