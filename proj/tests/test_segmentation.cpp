// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "doctest.h"
#include "sfpn/error.hpp"
#include "sfpn/segmentation.hpp"
#include "support.hpp"

using namespace sfpn;

namespace {

ErrorCode code_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::IoError;
}

struct Scene {
  FrameRecord frame;
  SparseTensor features;
  PointToVoxelMap point_map;
};

Scene random_scene(Rng& rng, std::int32_t w, std::int32_t h, std::size_t channels, double valid = 0.8) {
  FrameRecord frame;
  frame.width = w;
  frame.height = h;
  frame.intrinsics = {20.0, 20.0, w / 2.0, h / 2.0};
  frame.depth.resize(static_cast<std::size_t>(w) * h);
  for (float& d : frame.depth) d = rng.uniform01() < valid ? static_cast<float>(rng.uniform(0.5, 1.5)) : 0.0f;
  frame.depth[0] = 1.0f;
  auto vox = voxelize(project_depth(frame), 0.05);
  SparseTensor features = vox.tensor.with_features(test::random_features(rng, vox.tensor.size(), channels));
  return {std::move(frame), std::move(features), std::move(vox.point_map)};
}

MaskSet2D random_masks(Rng& rng, std::int32_t w, std::int32_t h, std::uint16_t count) {
  MaskSet2D m;
  m.width = w;
  m.height = h;
  m.count = count;
  m.ids.resize(static_cast<std::size_t>(w) * h);
  for (auto& id : m.ids) id = static_cast<std::uint16_t>(rng.below(count + 1u));
  return m;
}

std::vector<float> unit(Rng& rng, std::size_t dim) {
  std::vector<float> v(dim);
  double sq = 0.0;
  for (float& x : v) {
    x = static_cast<float>(rng.normal());
    sq += static_cast<double>(x) * x;
  }
  for (float& x : v) x = static_cast<float>(x / std::sqrt(sq));
  return v;
}

FeatureMatrix rows_of(const std::vector<std::vector<float>>& rows) {
  FeatureMatrix m(rows.size(), rows.empty() ? 0 : rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < rows[i].size(); ++c) m.at(i, c) = rows[i][c];
  return m;
}

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

InstanceStore store_of(const std::vector<std::vector<float>>& features) {
  InstanceStore s;
  for (const auto& f : features) {
    Instance inst;
    inst.id = s.next_id++;
    inst.feature = f;
    inst.points = {static_cast<std::uint32_t>(1000 + inst.id)};
    s.instances.push_back(inst);
  }
  return s;
}

CurrentMasks current_of(const std::vector<std::vector<float>>& features, std::uint32_t first_point = 0) {
  CurrentMasks c;
  c.features = rows_of(features);
  for (std::size_t i = 0; i < features.size(); ++i) {
    c.points.push_back({first_point + static_cast<std::uint32_t>(2 * i), first_point + static_cast<std::uint32_t>(2 * i + 1)});
    c.class_ids.push_back(0);
  }
  c.frame_id = 1;
  return c;
}

// Best total similarity over every one-to-one partial matching with S >= threshold.
double best_matching(const std::vector<std::vector<double>>& s, double threshold, std::vector<int>& best) {
  const std::size_t n = s.size(), m = s[0].size();
  std::vector<int> cur(n, -1);
  double best_total = -1.0;
  std::vector<bool> used(m, false);
  auto rec = [&](auto&& self, std::size_t i, double total) -> void {
    if (i == n) {
      if (total > best_total) {
        best_total = total;
        best = cur;
      }
      return;
    }
    cur[i] = -1;
    self(self, i + 1, total);
    for (std::size_t j = 0; j < m; ++j) {
      if (used[j] || s[i][j] < threshold) continue;
      used[j] = true;
      cur[i] = static_cast<int>(j);
      self(self, i + 1, total + s[i][j]);
      used[j] = false;
      cur[i] = -1;
    }
  };
  rec(rec, 0, 0.0);
  return best_total;
}

}  // namespace

TEST_CASE("MaskSet2D: validation") {
  MaskImage img{2, 2, {0, 3, 1, 0}};
  MaskSet2D m = MaskSet2D::from_image(img);
  CHECK(m.count == 3);
  CHECK_NOTHROW(m.validate());
  m.count = 2;
  CHECK(code_of([&] { m.validate(); }) == ErrorCode::FormatError);
  m.count = 0;
  CHECK(code_of([&] { m.validate(); }) == ErrorCode::NoMasks);
  CHECK(MaskSet2D::from_image({2, 1, {0, 0}}).count == 0);
  m.count = 3;
  m.ids.pop_back();
  CHECK(code_of([&] { m.validate(); }) == ErrorCode::ShapeError);
}

TEST_CASE("lift_masks: one full-frame mask over constant features") {
  Rng rng(1);
  Scene s = random_scene(rng, 8, 6, 4, 1.0);
  FeatureMatrix constant(s.features.size(), 4);
  for (std::size_t i = 0; i < constant.rows(); ++i)
    for (std::size_t c = 0; c < 4; ++c) constant.at(i, c) = static_cast<float>(c) - 1.5f;
  s.features = s.features.with_features(constant);
  MaskSet2D m{8, 6, std::vector<std::uint16_t>(48, 1), 1};
  const QuerySet q = lift_masks(m, s.frame, s.features, s.point_map);
  REQUIRE(q.size() == 1);
  for (std::size_t c = 0; c < 4; ++c) CHECK(q.features.at(0, c) == constant.at(0, c));
  CHECK(q.points[0].size() == 48);
}

TEST_CASE("lift_masks: disjoint halves with distinct features") {
  // Left and right halves sit at different depths far apart, so no voxel is shared.
  FrameRecord f;
  f.width = 4;
  f.height = 2;
  f.intrinsics = {10.0, 10.0, 1.5, 0.5};
  f.depth = {1.0f, 1.0f, 5.0f, 5.0f, 1.0f, 1.0f, 5.0f, 5.0f};
  auto vox = voxelize(project_depth(f), 0.5);
  FeatureMatrix feats(vox.tensor.size(), 2);
  for (std::size_t k = 0; k < vox.point_map.size(); ++k) {
    const bool left = (k % 4) < 2;
    feats.at(static_cast<std::size_t>(vox.point_map[k]), 0) = left ? 1.0f : 0.0f;
    feats.at(static_cast<std::size_t>(vox.point_map[k]), 1) = left ? 0.0f : 2.0f;
  }
  const MaskSet2D m{4, 2, {1, 1, 2, 2, 1, 1, 2, 2}, 2};
  const QuerySet q = lift_masks(m, f, vox.tensor.with_features(feats), vox.point_map);
  REQUIRE(q.size() == 2);
  CHECK(q.features.at(0, 0) == 1.0f);
  CHECK(q.features.at(0, 1) == 0.0f);
  CHECK(q.features.at(1, 0) == 0.0f);
  CHECK(q.features.at(1, 1) == 2.0f);
}

TEST_CASE("lift_masks: matches a per-pixel gather-and-mean oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Scene s = random_scene(rng, 24, 18, 6, 0.7);
    const auto count = static_cast<std::uint16_t>(1 + rng.below(8));
    const MaskSet2D m = random_masks(rng, 24, 18, count);
    const QuerySet q = lift_masks(m, s.frame, s.features, s.point_map);

    std::map<std::uint16_t, std::set<std::int32_t>> touched;
    std::size_t k = 0;
    for (std::size_t px = 0; px < s.frame.depth.size(); ++px) {
      if (!valid_depth(s.frame.depth[px])) continue;
      const std::int32_t row = s.point_map[k++];
      if (m.ids[px] != 0) touched[m.ids[px]].insert(row);
    }
    std::vector<std::uint16_t> expected_ids;
    for (std::uint16_t id = 1; id <= count; ++id)
      if (touched.count(id)) expected_ids.push_back(id);
    REQUIRE(q.mask_ids == expected_ids);
    CHECK(q.skipped.size() + q.size() == count);
    for (std::size_t l = 0; l < q.size(); ++l) {
      const auto& rows = touched[q.mask_ids[l]];
      CHECK(q.support[l].size() == rows.size());
      for (std::size_t c = 0; c < 6; ++c) {
        double mean = 0.0;
        for (std::int32_t r : rows) mean += s.features.features().at(static_cast<std::size_t>(r), c);
        mean /= static_cast<double>(rows.size());
        CHECK(std::abs(q.features.at(l, c) - mean) <= 1e-6);
      }
    }
  }
}

TEST_CASE("lift_masks: errors and skipped masks") {
  Rng rng(3);
  Scene s = random_scene(rng, 4, 4, 3, 1.0);
  MaskSet2D none{4, 4, std::vector<std::uint16_t>(16, 0), 0};
  CHECK(code_of([&] { (void)lift_masks(none, s.frame, s.features, s.point_map); }) == ErrorCode::NoMasks);
  s.frame.depth[5] = 0.0f;
  s.frame.depth[0] = 1.0f;
  MaskSet2D m{4, 4, std::vector<std::uint16_t>(16, 1), 2};
  m.ids[5] = 2;  // only pixel of mask 2 has no depth
  auto vox = voxelize(project_depth(s.frame), 0.05);
  const auto t = vox.tensor.with_features(test::random_features(rng, vox.tensor.size(), 3));
  const QuerySet q = lift_masks(m, s.frame, t, vox.point_map);
  CHECK(q.mask_ids == std::vector<std::uint16_t>{1});
  CHECK(q.skipped == std::vector<std::uint16_t>{2});
  std::vector<std::int32_t> short_map(vox.point_map.begin(), vox.point_map.end() - 1);
  CHECK(code_of([&] { (void)lift_masks(m, s.frame, t, short_map); }) == ErrorCode::ShapeError);
}

TEST_CASE("refine_and_predict: zero rounds is a pure matrix product") {
  Rng rng(4);
  const Scene s = random_scene(rng, 16, 12, 8);
  const QuerySet q = lift_masks(random_masks(rng, 16, 12, 5), s.frame, s.features, s.point_map);
  const auto params = QueryDecoderParams::make(8, 3, 1);
  const Prediction p = refine_and_predict(q, s.features, 0, params);
  CHECK(p.queries == q.features);
  CHECK(p.mask_logits == dot_products(s.features.features(), q.features));
  CHECK(p.class_logits.rows() == q.size());
  CHECK(p.class_logits.cols() == 3);
  for (std::size_t n = 0; n < s.features.size(); ++n) {
    for (std::size_t l = 0; l < q.size(); ++l) {
      float acc = 0.0f;
      for (std::size_t c = 0; c < 8; ++c) acc += s.features.features().at(n, c) * q.features.at(l, c);
      CHECK(p.mask_logits.at(n, l) == acc);
    }
  }
  CHECK(code_of([&] { (void)refine_and_predict(q, s.features, -1, params); }) == ErrorCode::RangeError);
}

TEST_CASE("refine_and_predict: one round matches a double-precision oracle") {
  Rng rng(5);
  const Scene s = random_scene(rng, 12, 10, 6);
  const QuerySet q = lift_masks(random_masks(rng, 12, 10, 3), s.frame, s.features, s.point_map);
  const auto params = QueryDecoderParams::make(6, 2, 9);
  const Prediction p = refine_and_predict(q, s.features, 1, params);
  const auto& fp = s.features.features();
  const std::size_t N = fp.rows(), C = 6;
  auto linear = [](const Linear& l, const std::vector<double>& x, bool relu) {
    std::vector<double> y(static_cast<std::size_t>(l.out));
    for (std::int32_t o = 0; o < l.out; ++o) {
      double v = l.bias[static_cast<std::size_t>(o)];
      for (std::int32_t i = 0; i < l.in; ++i) v += x[static_cast<std::size_t>(i)] * l.weight[static_cast<std::size_t>(i * l.out + o)];
      y[static_cast<std::size_t>(o)] = relu ? std::max(0.0, v) : v;
    }
    return y;
  };
  for (std::size_t l = 0; l < q.size(); ++l) {
    std::vector<double> qv(C), scores(N), ctx(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) qv[c] = q.features.at(l, c);
    double hi = -1e300;
    for (std::size_t n = 0; n < N; ++n) {
      double d = 0.0;
      for (std::size_t c = 0; c < C; ++c) d += qv[c] * fp.at(n, c);
      scores[n] = d / std::sqrt(static_cast<double>(C));
      hi = std::max(hi, scores[n]);
    }
    double z = 0.0;
    for (double& sc : scores) z += (sc = std::exp(sc - hi));
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) ctx[c] += scores[n] / z * fp.at(n, c);
    for (std::size_t c = 0; c < C; ++c) {
      CHECK(std::abs(p.context.at(l, c) - ctx[c]) <= 1e-5);
      qv[c] += ctx[c];
    }
    const auto upd = linear(params.ffn2, linear(params.ffn1, qv, true), false);
    for (std::size_t c = 0; c < C; ++c) CHECK(std::abs(p.queries.at(l, c) - (qv[c] + upd[c])) <= 1e-5);
    for (std::size_t c = 0; c < C; ++c) qv[c] += upd[c];
    const auto cls = linear(params.cls, qv, false);
    for (std::size_t k = 0; k < 2; ++k) CHECK(std::abs(p.class_logits.at(l, k) - cls[k]) <= 1e-5);
  }
}

TEST_CASE("refine_and_predict: attention over a single point returns that point") {
  auto set = CoordSet::create({{3, 4, 5}}, 1);
  FeatureMatrix f(1, 4);
  for (std::size_t c = 0; c < 4; ++c) f.at(0, c) = 0.5f * static_cast<float>(c + 1);
  const SparseTensor fp(set, f, 0.1);
  QuerySet q;
  q.features = FeatureMatrix(2, 4);
  q.features.at(0, 0) = 3.0f;
  q.features.at(1, 3) = -1.0f;
  q.support = {{0}, {0}};
  q.points = {{0}, {0}};
  q.mask_ids = {1, 2};
  const Prediction p = refine_and_predict(q, fp, 1, QueryDecoderParams::make(4, 1, 3));
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t c = 0; c < 4; ++c) CHECK(p.context.at(l, c) == f.at(0, c));
}

TEST_CASE("refine_and_predict: orthogonal queries recover the generating assignment") {
  Rng rng(6);
  constexpr std::size_t kL = 5, kC = 8, kN = 300;
  std::vector<VoxelCoord> coords;
  for (std::size_t n = 0; n < kN; ++n) coords.push_back({static_cast<std::int32_t>(n), 0, 0});
  auto set = CoordSet::create(coords, 1);
  FeatureMatrix f(kN, kC);
  std::vector<std::size_t> truth(kN);
  for (std::size_t n = 0; n < kN; ++n) {
    truth[n] = rng.below(kL);
    for (std::size_t c = 0; c < kC; ++c) f.at(n, c) = static_cast<float>(0.1 * rng.normal());
    f.at(n, truth[n]) += static_cast<float>(rng.uniform(1.0, 2.0));
  }
  QuerySet q;
  q.features = FeatureMatrix(kL, kC);
  for (std::size_t l = 0; l < kL; ++l) {
    q.features.at(l, l) = 1.0f;
    q.support.push_back({static_cast<std::int32_t>(l)});
    q.points.push_back({static_cast<std::uint32_t>(l)});
    q.mask_ids.push_back(static_cast<std::uint16_t>(l + 1));
  }
  const Prediction p = refine_and_predict(q, SparseTensor(set, f, 0.1), 0, QueryDecoderParams::make(kC, 1, 1));
  for (std::size_t n = 0; n < kN; ++n) {
    std::size_t best = 0;
    for (std::size_t l = 1; l < kL; ++l)
      if (p.mask_logits.at(n, l) > p.mask_logits.at(n, best)) best = l;
    CHECK(best == truth[n]);
  }
  // Boxes span the voxel cells of each query's positive points.
  for (std::size_t l = 0; l < kL; ++l) {
    double lo = 1e300, hi = -1e300;
    for (std::size_t n = 0; n < kN; ++n) {
      if (p.mask_logits.at(n, l) <= 0.0f) continue;
      lo = std::min(lo, n * 0.1);
      hi = std::max(hi, (n + 1) * 0.1);
    }
    CHECK(p.boxes[l].min[0] == doctest::Approx(lo));
    CHECK(p.boxes[l].max[0] == doctest::Approx(hi));
    CHECK(p.boxes[l].min[1] == 0.0);
    CHECK(p.boxes[l].max[1] == doctest::Approx(0.1));
  }
}

TEST_CASE("refine_and_predict: queries without positive logits fall back to their support") {
  auto set = CoordSet::create({{0, 0, 0}, {4, 0, 0}}, 1);
  FeatureMatrix f(2, 2);
  f.at(0, 0) = 1.0f;
  f.at(1, 0) = 1.0f;
  QuerySet q;
  q.features = FeatureMatrix(1, 2);
  q.features.at(0, 0) = -1.0f;
  q.support = {{1}};
  q.points = {{0}};
  q.mask_ids = {1};
  const Prediction p = refine_and_predict(q, SparseTensor(set, f, 0.5), 0, QueryDecoderParams::make(2, 1, 1));
  CHECK(p.boxes[0] == Box3{{2.0, 0.0, 0.0}, {2.5, 0.5, 0.5}});
}

TEST_CASE("dot_products and normalize_rows") {
  Rng rng(7);
  FeatureMatrix q = test::random_features(rng, 20, 16);
  normalize_rows(q);
  const FeatureMatrix s = dot_products(q, q);
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(std::abs(s.at(i, i) - 1.0f) <= 1e-5);
    for (std::size_t j = 0; j < 20; ++j) CHECK(std::abs(s.at(i, j)) <= 1.0f + 1e-5f);
  }
  FeatureMatrix z(2, 3);
  z.at(0, 0) = 1.0f;
  CHECK(code_of([&] { normalize_rows(z); }) == ErrorCode::ZeroVector);
}

TEST_CASE("merge: empty store opens every query") {
  Rng rng(8);
  const CurrentMasks cur = current_of({unit(rng, 8), unit(rng, 8), unit(rng, 8)});
  std::vector<std::int64_t> assignment;
  const InstanceStore out = merge(cur, {}, {}, &assignment);
  CHECK(out.instances.size() == 3);
  CHECK(assignment == std::vector<std::int64_t>{0, 1, 2});
  CHECK(out.next_id == 3);
  CHECK(out.total_points() == 6);
}

TEST_CASE("merge: identical feature across frames unions the points") {
  Rng rng(9);
  const auto v = unit(rng, 16);
  InstanceStore store = merge(current_of({v}, 0), {});
  store = merge(current_of({v}, 10), std::move(store), {0.9, 0.5});
  REQUIRE(store.instances.size() == 1);
  CHECK(store.instances[0].points == std::vector<std::uint32_t>{0, 1, 10, 11});
  CHECK(store.instances[0].last_seen == 1);
  for (std::size_t c = 0; c < 16; ++c) CHECK(std::abs(store.instances[0].feature[c] - v[c]) <= 1e-6);
}

TEST_CASE("merge: empty current frame leaves the store unchanged") {
  Rng rng(10);
  const InstanceStore store = store_of({unit(rng, 4), unit(rng, 4)});
  CurrentMasks empty;
  empty.features = FeatureMatrix(0, 4);
  const InstanceStore out = merge(empty, store);
  CHECK(out.next_id == store.next_id);
  REQUIRE(out.instances.size() == store.instances.size());
  for (std::size_t i = 0; i < out.instances.size(); ++i) {
    CHECK(out.instances[i].feature == store.instances[i].feature);
    CHECK(out.instances[i].points == store.instances[i].points);
  }
}

TEST_CASE("merge: feature update is the normalized convex mix") {
  std::vector<float> old_f{1.0f, 0.0f, 0.0f};
  std::vector<float> new_f{0.8f, 0.6f, 0.0f};
  const InstanceStore out = merge(current_of({new_f}), store_of({old_f}), {0.7, 0.25});
  REQUIRE(out.instances.size() == 1);
  const double x = 0.25 * 0.8 + 0.75, y = 0.25 * 0.6;
  const double n = std::hypot(x, y);
  CHECK(out.instances[0].feature[0] == doctest::Approx(x / n).epsilon(1e-6));
  CHECK(out.instances[0].feature[1] == doctest::Approx(y / n).epsilon(1e-6));
}

TEST_CASE("merge: threshold boundary and one-to-one matching") {
  // Two current masks both identical to one stored instance: only one can merge.
  std::vector<float> e0{1.0f, 0.0f};
  std::vector<std::int64_t> assignment;
  const InstanceStore out = merge(current_of({e0, e0}), store_of({e0}), {}, &assignment);
  CHECK(out.instances.size() == 2);
  CHECK(assignment == std::vector<std::int64_t>{0, 1});
  // Similarity exactly at the threshold merges.
  std::vector<float> diag{0.6f, 0.8f};
  const double s = static_cast<double>(0.6f);
  CHECK(merge(current_of({diag}), store_of({e0}), {s, 0.5}).instances.size() == 1);
  CHECK(merge(current_of({diag}), store_of({e0}), {std::nextafter(s, 1.0), 0.5}).instances.size() == 2);
}

TEST_CASE("merge: greedy equals exhaustive matching on diagonally dominant similarities") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<float>> stored{unit(rng, 12), unit(rng, 12), unit(rng, 12)};
    std::vector<int> perm{0, 1, 2};
    for (int i = 2; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[rng.below(static_cast<std::uint64_t>(i) + 1)]);
    std::vector<std::vector<float>> current;
    for (int i = 0; i < 3; ++i) {
      auto v = stored[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
      const auto noise = unit(rng, 12);
      const double eps = rng.uniform(0.0, 0.6);
      double sq = 0.0;
      for (std::size_t c = 0; c < 12; ++c) sq += std::pow(v[c] += static_cast<float>(eps * noise[c]), 2);
      for (float& x : v) x = static_cast<float>(x / std::sqrt(sq));
      current.push_back(v);
    }
    std::vector<std::vector<double>> s(3, std::vector<double>(3));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) s[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = dot(current[static_cast<std::size_t>(i)], stored[static_cast<std::size_t>(j)]);
    // Keep instances where each row's match is strictly dominant in both its row and its column.
    bool dominant = true;
    for (int i = 0; i < 3; ++i) {
      const auto pi = static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]);
      for (int k = 0; k < 3; ++k) {
        if (static_cast<std::size_t>(k) != pi && s[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] >= s[static_cast<std::size_t>(i)][pi]) dominant = false;
        if (k != i && s[static_cast<std::size_t>(k)][pi] >= s[static_cast<std::size_t>(i)][pi]) dominant = false;
      }
    }
    if (!dominant) continue;
    std::vector<int> best;
    best_matching(s, 0.7, best);
    std::vector<std::int64_t> assignment;
    const InstanceStore out = merge(current_of(current), store_of(stored), {0.7, 0.5}, &assignment);
    std::int64_t next = 3;
    for (int i = 0; i < 3; ++i) {
      const int b = best[static_cast<std::size_t>(i)];
      CHECK(assignment[static_cast<std::size_t>(i)] == (b >= 0 ? b : next++));
    }
    CHECK(out.instances.size() == static_cast<std::size_t>(next));
  }
}

TEST_CASE("merge: count and point conservation over random frames") {
  Rng rng(12);
  for (int run = 0; run < 50; ++run) {
    InstanceStore store;
    std::uint32_t next_point = 0;
    const MergeConfig cfg{rng.uniform(0.2, 0.95), rng.uniform(0.1, 0.9)};
    for (int t = 0; t < 6; ++t) {
      const std::size_t L = rng.below(5);
      std::vector<std::vector<float>> feats;
      for (std::size_t i = 0; i < L; ++i) feats.push_back(unit(rng, 6));
      CurrentMasks cur;
      cur.features = L ? rows_of(feats) : FeatureMatrix(0, 6);
      cur.frame_id = t;
      for (std::size_t i = 0; i < L; ++i) {
        std::vector<std::uint32_t> pts(1 + rng.below(10));
        std::iota(pts.begin(), pts.end(), next_point);
        next_point += static_cast<std::uint32_t>(pts.size());
        cur.points.push_back(pts);
        cur.class_ids.push_back(0);
      }
      const std::size_t before_points = store.total_points();
      const std::size_t before_count = store.instances.size();
      std::vector<std::int64_t> assignment;
      store = merge(cur, std::move(store), cfg, &assignment);
      std::size_t added = 0;
      for (const auto& p : cur.points) added += p.size();
      CHECK(store.total_points() == before_points + added);
      std::size_t opened = 0;
      for (std::int64_t a : assignment) opened += a >= static_cast<std::int64_t>(before_count) ? 1 : 0;
      CHECK(store.instances.size() == before_count + opened);
      for (const auto& inst : store.instances) {
        CHECK(std::abs(std::sqrt(dot(inst.feature, inst.feature)) - 1.0) <= 1e-5);
        CHECK(std::is_sorted(inst.points.begin(), inst.points.end()));
      }
    }
  }
}

TEST_CASE("merge: rejects non-normalized inputs") {
  std::vector<float> e0{1.0f, 0.0f};
  CHECK(code_of([&] { (void)merge(current_of({{2.0f, 0.0f}}), {}); }) == ErrorCode::NormalizationError);
  InstanceStore bad = store_of({e0});
  bad.instances[0].feature = {0.5f, 0.0f};
  CHECK(code_of([&] { (void)merge(current_of({e0}), bad); }) == ErrorCode::NormalizationError);
}
