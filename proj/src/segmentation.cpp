// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#include "sfpn/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

#include "sfpn/error.hpp"

namespace sfpn {
namespace {

constexpr double kUnitTolerance = 1e-4;

void check_unit_rows(const FeatureMatrix& m, const char* what) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double sq = 0.0;
    for (float v : m.row(i)) sq += static_cast<double>(v) * v;
    if (std::abs(std::sqrt(sq) - 1.0) > kUnitTolerance)
      fail(ErrorCode::NormalizationError, std::string(what) + " row " + std::to_string(i) + " is not unit norm");
  }
}

void check_unit(std::span<const float> v, std::int64_t id) {
  double sq = 0.0;
  for (float x : v) sq += static_cast<double>(x) * x;
  if (std::abs(std::sqrt(sq) - 1.0) > kUnitTolerance)
    fail(ErrorCode::NormalizationError, "instance " + std::to_string(id) + " feature is not unit norm");
}

void extend_box(Box3& box, bool& empty, const VoxelCoord& c, std::int32_t stride, double voxel_size) {
  const std::array<double, 3> lo{c.x * voxel_size, c.y * voxel_size, c.z * voxel_size};
  const double span = stride * voxel_size;
  for (int a = 0; a < 3; ++a) {
    if (empty) {
      box.min[a] = lo[a];
      box.max[a] = lo[a] + span;
    } else {
      box.min[a] = std::min(box.min[a], lo[a]);
      box.max[a] = std::max(box.max[a], lo[a] + span);
    }
  }
  empty = false;
}

}  // namespace

MaskSet2D MaskSet2D::from_image(const MaskImage& image) {
  MaskSet2D m;
  m.width = image.width;
  m.height = image.height;
  m.ids = image.ids;
  m.count = m.ids.empty() ? 0 : *std::max_element(m.ids.begin(), m.ids.end());
  return m;
}

void MaskSet2D::validate() const {
  if (count == 0) fail(ErrorCode::NoMasks, "mask set is empty");
  if (width <= 0 || height <= 0 || ids.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
    fail(ErrorCode::ShapeError, "mask image size does not match its dimensions");
  for (std::uint16_t id : ids)
    if (id > count) fail(ErrorCode::FormatError, "mask id " + std::to_string(id) + " exceeds mask count");
}

QuerySet lift_masks(const MaskSet2D& masks, const FrameRecord& frame, const SparseTensor& features,
                    std::span<const std::int32_t> point_map) {
  masks.validate();
  if (masks.width != frame.width || masks.height != frame.height)
    fail(ErrorCode::ShapeError, "mask image and depth frame differ in size");

  const std::size_t L = masks.count;
  std::vector<std::vector<std::int32_t>> voxels(L);
  std::vector<std::vector<std::uint32_t>> points(L);
  std::uint32_t k = 0;
  const std::size_t n_pixels = masks.ids.size();
  for (std::size_t p = 0; p < n_pixels; ++p) {
    if (!valid_depth(frame.depth[p])) continue;
    if (k >= point_map.size()) fail(ErrorCode::ShapeError, "point map shorter than the frame's valid pixels");
    const std::uint16_t id = masks.ids[p];
    if (id != 0) {
      const std::int32_t row = point_map[k];
      if (row < 0 || static_cast<std::size_t>(row) >= features.size())
        fail(ErrorCode::ShapeError, "point map row outside the feature tensor");
      voxels[id - 1].push_back(row);
      points[id - 1].push_back(k);
    }
    ++k;
  }
  if (k != point_map.size()) fail(ErrorCode::ShapeError, "point map longer than the frame's valid pixels");

  QuerySet q;
  const std::size_t C = features.channels();
  std::vector<float> pooled;
  for (std::size_t m = 0; m < L; ++m) {
    auto& v = voxels[m];
    if (v.empty()) {
      q.skipped.push_back(static_cast<std::uint16_t>(m + 1));
      continue;
    }
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    std::vector<double> acc(C, 0.0);
    for (std::int32_t row : v) {
      auto f = features.features().row(static_cast<std::size_t>(row));
      for (std::size_t c = 0; c < C; ++c) acc[c] += f[c];
    }
    for (std::size_t c = 0; c < C; ++c) pooled.push_back(static_cast<float>(acc[c] / static_cast<double>(v.size())));
    q.support.push_back(std::move(v));
    q.points.push_back(std::move(points[m]));
    q.mask_ids.push_back(static_cast<std::uint16_t>(m + 1));
  }
  q.features = FeatureMatrix(q.mask_ids.size(), C, std::move(pooled));
  return q;
}

QueryDecoderParams QueryDecoderParams::make(std::int32_t dim, std::int32_t classes, std::uint64_t seed) {
  if (dim <= 0 || classes <= 0) fail(ErrorCode::ConfigError, "query decoder needs positive width and class count");
  QueryDecoderParams p;
  p.dim = dim;
  p.classes = classes;
  p.ffn1 = make_linear(dim, 2 * dim, Rng::derive(seed, "query.ffn1"));
  p.ffn2 = make_linear(2 * dim, dim, Rng::derive(seed, "query.ffn2"));
  p.cls = make_linear(dim, classes, Rng::derive(seed, "query.cls"));
  return p;
}

FeatureMatrix dot_products(const FeatureMatrix& a, const FeatureMatrix& b) {
  if (a.cols() != b.cols()) fail(ErrorCode::ShapeError, "dot products need equal widths");
  const std::size_t C = a.cols();
  FeatureMatrix out(a.rows(), b.rows());
#pragma omp parallel for schedule(static) if (a.rows() * b.rows() * C > 65536)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(a.rows()); ++i) {
    auto ai = a.row(static_cast<std::size_t>(i));
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto bj = b.row(j);
      float s = 0.0f;
      for (std::size_t c = 0; c < C; ++c) s += ai[c] * bj[c];
      out.at(static_cast<std::size_t>(i), j) = s;
    }
  }
  return out;
}

void normalize_rows(FeatureMatrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    double sq = 0.0;
    for (float v : r) sq += static_cast<double>(v) * v;
    if (!(sq > 0.0)) fail(ErrorCode::ZeroVector, "cannot normalize zero row " + std::to_string(i));
    const double inv = 1.0 / std::sqrt(sq);
    for (float& v : r) v = static_cast<float>(v * inv);
  }
}

Prediction refine_and_predict(const QuerySet& queries, const SparseTensor& features, std::int32_t rounds,
                              const QueryDecoderParams& params) {
  if (rounds < 0) fail(ErrorCode::RangeError, "refinement rounds must be non-negative");
  const FeatureMatrix& fp = features.features();
  const std::size_t C = fp.cols();
  const std::size_t N = fp.rows();
  const std::size_t L = queries.size();
  if (queries.features.cols() != C) fail(ErrorCode::ShapeError, "query width differs from point features");
  if (params.dim != static_cast<std::int32_t>(C)) fail(ErrorCode::ShapeError, "query decoder width mismatch");

  Prediction out;
  out.queries = queries.features;
  const double scale = 1.0 / std::sqrt(static_cast<double>(C));
  for (std::int32_t r = 0; r < rounds; ++r) {
    FeatureMatrix ctx(L, C);
#pragma omp parallel for schedule(static) if (L * N * C > 65536)
    for (std::int64_t l = 0; l < static_cast<std::int64_t>(L); ++l) {
      auto q = out.queries.row(static_cast<std::size_t>(l));
      std::vector<double> score(N);
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t n = 0; n < N; ++n) {
        auto f = fp.row(n);
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += static_cast<double>(q[c]) * f[c];
        score[n] = s * scale;
        peak = std::max(peak, score[n]);
      }
      double total = 0.0;
      for (double& s : score) total += (s = std::exp(s - peak));
      std::vector<double> acc(C, 0.0);
      for (std::size_t n = 0; n < N; ++n) {
        const double w = score[n] / total;
        auto f = fp.row(n);
        for (std::size_t c = 0; c < C; ++c) acc[c] += w * f[c];
      }
      auto out_row = ctx.row(static_cast<std::size_t>(l));
      for (std::size_t c = 0; c < C; ++c) out_row[c] = static_cast<float>(acc[c]);
    }
    for (std::size_t i = 0; i < L * C; ++i) out.queries.data()[i] += ctx.data()[i];
    const FeatureMatrix update = linear_forward(linear_forward(out.queries, params.ffn1, true), params.ffn2, false);
    for (std::size_t i = 0; i < L * C; ++i) out.queries.data()[i] += update.data()[i];
    out.context = std::move(ctx);
  }

  out.mask_logits = dot_products(fp, out.queries);
  out.class_logits = linear_forward(out.queries, params.cls, false);

  const auto coords = features.coords();
  out.boxes.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    bool empty = true;
    for (std::size_t n = 0; n < N; ++n)
      if (out.mask_logits.at(n, l) > 0.0f) extend_box(out.boxes[l], empty, coords[n], features.stride(), features.voxel_size());
    if (empty)
      for (std::int32_t row : queries.support[l])
        extend_box(out.boxes[l], empty, coords[static_cast<std::size_t>(row)], features.stride(), features.voxel_size());
  }
  return out;
}

std::size_t InstanceStore::total_points() const {
  std::size_t n = 0;
  for (const auto& inst : instances) n += inst.points.size();
  return n;
}

InstanceStore merge(const CurrentMasks& current, InstanceStore store, const MergeConfig& config,
                    std::vector<std::int64_t>* assignment) {
  const std::size_t L = current.features.rows();
  if (current.points.size() != L) fail(ErrorCode::ShapeError, "one point set per current mask is required");
  if (!current.class_ids.empty() && current.class_ids.size() != L)
    fail(ErrorCode::ShapeError, "class ids must match the current masks");
  if (assignment) assignment->assign(L, -1);
  if (L == 0) return store;

  const std::size_t C = current.features.cols();
  check_unit_rows(current.features, "current mask feature");
  for (const auto& inst : store.instances) {
    if (inst.feature.size() != C) fail(ErrorCode::ShapeError, "stored feature width differs from current masks");
    check_unit(inst.feature, inst.id);
  }

  const std::size_t A = store.instances.size();
  FeatureMatrix acc(A, C);
  for (std::size_t j = 0; j < A; ++j) std::copy(store.instances[j].feature.begin(), store.instances[j].feature.end(), acc.row(j).begin());
  const FeatureMatrix sim = dot_products(current.features, acc);

  std::vector<std::tuple<float, std::size_t, std::size_t>> candidates;
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < A; ++j)
      if (sim.at(i, j) >= config.threshold) candidates.emplace_back(sim.at(i, j), i, j);
  std::sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
    if (std::get<1>(a) != std::get<1>(b)) return std::get<1>(a) < std::get<1>(b);
    return std::get<2>(a) < std::get<2>(b);
  });

  std::vector<std::int64_t> match(L, -1);
  std::vector<bool> taken(A, false);
  for (const auto& [s, i, j] : candidates) {
    if (match[i] >= 0 || taken[j]) continue;
    match[i] = static_cast<std::int64_t>(j);
    taken[j] = true;
  }

  const double alpha = config.alpha;
  for (std::size_t i = 0; i < L; ++i) {
    std::vector<std::uint32_t> pts = current.points[i];
    std::sort(pts.begin(), pts.end());
    const std::int32_t cls = current.class_ids.empty() ? 0 : current.class_ids[i];
    auto feat = current.features.row(i);
    if (match[i] >= 0) {
      Instance& inst = store.instances[static_cast<std::size_t>(match[i])];
      std::vector<double> mix(C);
      double sq = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        mix[c] = alpha * feat[c] + (1.0 - alpha) * inst.feature[c];
        sq += mix[c] * mix[c];
      }
      if (sq > 0.0) {
        const double inv = 1.0 / std::sqrt(sq);
        for (std::size_t c = 0; c < C; ++c) inst.feature[c] = static_cast<float>(mix[c] * inv);
      }
      std::vector<std::uint32_t> joined;
      joined.reserve(inst.points.size() + pts.size());
      std::set_union(inst.points.begin(), inst.points.end(), pts.begin(), pts.end(), std::back_inserter(joined));
      inst.points = std::move(joined);
      inst.last_seen = current.frame_id;
      if (assignment) (*assignment)[i] = inst.id;
    } else {
      Instance inst;
      inst.id = store.next_id++;
      inst.feature.assign(feat.begin(), feat.end());
      inst.points = std::move(pts);
      inst.last_seen = current.frame_id;
      inst.class_id = cls;
      if (assignment) (*assignment)[i] = inst.id;
      store.instances.push_back(std::move(inst));
    }
  }
  return store;
}

}  // namespace sfpn
