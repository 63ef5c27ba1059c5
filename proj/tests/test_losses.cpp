// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#include <cmath>
#include <numeric>

#include "doctest.h"
#include "sfpn/error.hpp"
#include "sfpn/losses.hpp"
#include "sfpn/rng.hpp"

using namespace sfpn;

namespace {

constexpr double kFdTolerance = 1e-4;

ErrorCode code_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::IoError;
}

std::vector<double> normals(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

std::vector<double> bits(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = static_cast<double>(rng.below(2));
  return v;
}

Box3 random_box(Rng& rng) {
  Box3 b;
  for (int a = 0; a < 3; ++a) {
    b.min[a] = rng.uniform(-1.0, 1.0);
    b.max[a] = b.min[a] + rng.uniform(0.2, 1.5);
  }
  return b;
}

std::vector<double> corners(const Box3& b) { return {b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]}; }

Box3 from_corners(std::span<const double> c) { return {{c[0], c[1], c[2]}, {c[3], c[4], c[5]}}; }

FeatureSet random_set(Rng& rng, std::size_t z, std::size_t dim) {
  FeatureSet s;
  for (std::size_t i = 0; i < z; ++i) s.push_back(normals(rng, dim));
  return s;
}

std::vector<double> flatten(const FeatureSet& s) {
  std::vector<double> out;
  for (const auto& v : s) out.insert(out.end(), v.begin(), v.end());
  return out;
}

FeatureSet unflatten(std::span<const double> x, std::size_t z) {
  const std::size_t dim = x.size() / z;
  FeatureSet s(z);
  for (std::size_t i = 0; i < z; ++i) s[i].assign(x.begin() + static_cast<std::ptrdiff_t>(i * dim), x.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
  return s;
}

QuerySupervision random_query(Rng& rng, std::size_t points, std::int32_t classes) {
  QuerySupervision q;
  q.class_logit = rng.normal();
  q.gt_class = static_cast<std::int32_t>(rng.below(2));
  q.mask_logits = normals(rng, points, 2.0);
  q.gt_mask = bits(rng, points);
  q.pred_box = random_box(rng);
  q.gt_box = random_box(rng);
  q.sem_logits = normals(rng, static_cast<std::size_t>(classes));
  q.gt_sem = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(classes)));
  return q;
}

FrameSupervision random_frame(Rng& rng) {
  FrameSupervision f;
  const std::size_t n = 1 + rng.below(4);
  for (std::size_t i = 0; i < n; ++i) f.queries.push_back(random_query(rng, 5 + rng.below(20), 4));
  return f;
}

}  // namespace

TEST_CASE("fd_gradient: quadratic, affine and non-finite evaluations") {
  const std::vector<double> x{3.0};
  const auto g = fd_gradient([](std::span<const double> v) { return v[0] * v[0]; }, x);
  CHECK(std::abs(g[0] - 6.0) <= 1e-6);
  const std::vector<double> y{0.3, -2.0, 7.0};
  for (double h : {1e-2, 1e-4, 0.5}) {
    const auto a = fd_gradient([](std::span<const double> v) { return 2.0 * v[0] - 0.5 * v[1] + 4.0 * v[2] + 1.0; }, y, h);
    CHECK(a[0] == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(a[1] == doctest::Approx(-0.5).epsilon(1e-9));
    CHECK(a[2] == doctest::Approx(4.0).epsilon(1e-9));
  }
  CHECK(code_of([&] { (void)fd_gradient([](std::span<const double> v) { return std::log(v[0]); }, std::vector<double>{0.0}); }) ==
        ErrorCode::NumericalError);
}

TEST_CASE("bce_loss: closed-form values") {
  const std::vector<double> zeros(4, 0.0);
  const std::vector<double> t{0, 1, 1, 0};
  CHECK(bce_loss(zeros, t).value == doctest::Approx(std::log(2.0)));
  const std::vector<double> sat(3, 50.0), ones(3, 1.0);
  CHECK(bce_loss(sat, ones).value <= 1e-20);
  const std::vector<double> huge{-800.0, 800.0};
  const std::vector<double> wrong{1.0, 0.0};
  CHECK(bce_loss(huge, wrong).value == doctest::Approx(800.0));
  CHECK(code_of([&] { (void)bce_loss(zeros, ones); }) == ErrorCode::ShapeError);
}

TEST_CASE("bce_loss: gradient matches finite differences") {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto x = normals(rng, 1 + rng.below(30), 3.0);
    const auto y = bits(rng, x.size());
    const auto r = bce_loss(x, y);
    CHECK(r.value >= 0.0);
    const auto fd = fd_gradient([&](std::span<const double> v) { return bce_loss(v, y).value; }, x);
    CHECK(relative_error(r.grad, fd) <= kFdTolerance);
  }
}

TEST_CASE("dice_loss: closed-form values and range") {
  Rng rng(2);
  const auto y = bits(rng, 50);
  CHECK(std::abs(dice_loss(y, y).value) <= 1e-6);
  std::vector<double> t(1000), p(1000);
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<double>(i % 2);
    p[i] = 1.0 - t[i];
  }
  CHECK(dice_loss(p, t).value >= 0.99);
  const std::vector<double> bad{0.5, 1.2}, two{0.0, 1.0};
  CHECK(code_of([&] { (void)dice_loss(bad, two); }) == ErrorCode::RangeError);
  const std::vector<double> one{1.0};
  CHECK(code_of([&] { (void)dice_loss(one, two); }) == ErrorCode::ShapeError);
}

TEST_CASE("dice_loss: gradient matches finite differences") {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 1 + rng.below(30);
    std::vector<double> p(n);
    for (double& v : p) v = rng.uniform(0.01, 0.99);
    const auto y = bits(rng, n);
    const auto r = dice_loss(p, y);
    CHECK(r.value >= 0.0);
    CHECK(r.value <= 1.0 + 1e-12);
    const auto fd = fd_gradient([&](std::span<const double> v) { return dice_loss(v, y).value; }, p, 1e-5);
    CHECK(relative_error(r.grad, fd) <= kFdTolerance);
  }
}

TEST_CASE("iou_loss: closed-form values") {
  const Box3 unit{{0, 0, 0}, {1, 1, 1}};
  CHECK(iou_loss(unit, unit).value == 0.0);
  CHECK(iou_loss(unit, Box3{{2, 0, 0}, {3, 1, 1}}).value == 1.0);
  CHECK(iou_loss(unit, Box3{{1, 0, 0}, {2, 1, 1}}).value == 1.0);
  const Box3 shifted{{0.5, 0, 0}, {1.5, 1, 1}};
  CHECK(box_iou(unit, shifted) == doctest::Approx(1.0 / 3.0));
  CHECK(iou_loss(unit, shifted).value == doctest::Approx(2.0 / 3.0));
  CHECK(code_of([&] { (void)iou_loss(Box3{{0, 0, 0}, {-1, 1, 1}}, unit); }) == ErrorCode::InvalidBox);
  CHECK(code_of([&] { (void)iou_loss(unit, Box3{{0, 2, 0}, {1, 1, 1}}); }) == ErrorCode::InvalidBox);
}

TEST_CASE("iou_loss: shifted-cube value confirmed by Monte Carlo sampling") {
  const Box3 a{{0, 0, 0}, {1, 1, 1}};
  const Box3 b{{0.5, 0, 0}, {1.5, 1, 1}};
  Rng rng(4);
  std::size_t in_union = 0, in_both = 0;
  auto inside = [](const Box3& box, const std::array<double, 3>& p) {
    for (int k = 0; k < 3; ++k)
      if (p[k] < box.min[k] || p[k] > box.max[k]) return false;
    return true;
  };
  for (int i = 0; i < 400000; ++i) {
    const std::array<double, 3> p{rng.uniform(0.0, 1.5), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)};
    const bool ia = inside(a, p), ib = inside(b, p);
    in_union += (ia || ib) ? 1 : 0;
    in_both += (ia && ib) ? 1 : 0;
  }
  const double mc = static_cast<double>(in_both) / static_cast<double>(in_union);
  CHECK(std::abs(mc - box_iou(a, b)) <= 0.005);
}

TEST_CASE("iou_loss: gradient matches finite differences away from ties") {
  Rng rng(5);
  int checked = 0;
  for (int i = 0; i < 2000 && checked < 100; ++i) {
    const Box3 pred = random_box(rng), gt = random_box(rng);
    if (iou_at_tie(pred, gt) || box_iou(pred, gt) == 0.0) continue;
    const auto r = iou_loss(pred, gt);
    CHECK(r.value >= 0.0);
    CHECK(r.value <= 1.0);
    const auto fd = fd_gradient([&](std::span<const double> c) { return iou_loss(from_corners(c), gt).value; }, corners(pred), 1e-6);
    CHECK(relative_error(r.grad, fd) <= kFdTolerance);
    ++checked;
  }
  CHECK(checked == 100);
  CHECK(iou_at_tie(Box3{{0, 0, 0}, {1, 1, 1}}, Box3{{0, 0.2, 0.2}, {2, 2, 2}}));
  const auto disjoint = iou_loss(Box3{{0, 0, 0}, {1, 1, 1}}, Box3{{3, 3, 3}, {4, 4, 4}});
  CHECK(disjoint.grad == std::vector<double>(6, 0.0));
}

TEST_CASE("sem_loss: values and gradient") {
  const std::vector<double> zero{0.0};
  CHECK(sem_loss(zero, 0).value == doctest::Approx(std::log(2.0)));
  const std::vector<double> confident{-50.0, 50.0, -50.0};
  CHECK(sem_loss(confident, 1).value <= 1e-20);
  CHECK(code_of([&] { (void)sem_loss(confident, 3); }) == ErrorCode::RangeError);
  CHECK(code_of([&] { (void)sem_loss(confident, -1); }) == ErrorCode::RangeError);
  Rng rng(6);
  for (int i = 0; i < 100; ++i) {
    const auto x = normals(rng, 1 + rng.below(10), 2.0);
    const auto label = static_cast<std::int32_t>(rng.below(x.size()));
    const auto r = sem_loss(x, label);
    const auto fd = fd_gradient([&](std::span<const double> v) { return sem_loss(v, label).value; }, x);
    CHECK(relative_error(r.grad, fd) <= kFdTolerance);
  }
}

TEST_CASE("per_frame_loss: weighted combination") {
  LossBreakdown c;
  c.cls = 2;
  c.bce = 3;
  c.dice = 1;
  c.iou = 4;
  c.sem = 5;
  CHECK(combine_components(c, {}) == 12.0);
  CHECK(combine_components(LossBreakdown{}, {}) == 0.0);

  // A frame whose queries hit every component's zero exactly.
  QuerySupervision q;
  q.class_logit = 60.0;
  q.gt_class = 1;
  q.mask_logits = {60.0, -60.0};
  q.gt_mask = {1.0, 0.0};
  q.pred_box = q.gt_box = Box3{{0, 0, 0}, {1, 1, 1}};
  q.sem_logits = {60.0, -60.0};
  q.gt_sem = 0;
  const std::vector<FrameSupervision> frames{{{q}}};
  CHECK(per_frame_loss(frames).total <= 1e-12);
  CHECK(code_of([] { (void)per_frame_loss(std::span<const FrameSupervision>{}); }) == ErrorCode::EmptyBatch);
}

TEST_CASE("per_frame_loss: mean of single-frame evaluations and permutation invariant") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<FrameSupervision> frames{random_frame(rng), random_frame(rng), random_frame(rng)};
    const LossWeights w{rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0), 0.5, 0.5, 0.07};
    double sum = 0.0;
    for (const auto& f : frames) sum += per_frame_loss(std::span(&f, 1), w).total;
    const auto all = per_frame_loss(frames, w);
    CHECK(all.total == doctest::Approx(sum / 3.0).epsilon(1e-12));
    std::swap(frames[0], frames[2]);
    CHECK(per_frame_loss(frames, w).total == doctest::Approx(all.total).epsilon(1e-12));
    CHECK(all.total >= 0.0);
  }
}

TEST_CASE("per_frame_loss: components follow their definitions") {
  Rng rng(8);
  const FrameSupervision f = random_frame(rng);
  const auto c = frame_components(f);
  double cls = 0, bce = 0, dice = 0, iou = 0, sem = 0;
  for (const auto& q : f.queries) {
    const std::vector<double> logit{q.class_logit}, target{static_cast<double>(q.gt_class)};
    cls += bce_loss(logit, target).value;
    bce += bce_loss(q.mask_logits, q.gt_mask).value;
    std::vector<double> p(q.mask_logits.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = 1.0 / (1.0 + std::exp(-q.mask_logits[i]));
    dice += dice_loss(p, q.gt_mask).value;
    iou += iou_loss(q.pred_box, q.gt_box).value;
    sem += sem_loss(q.sem_logits, q.gt_sem).value;
  }
  const double n = static_cast<double>(f.queries.size());
  CHECK(c.cls == doctest::Approx(cls / n));
  CHECK(c.bce == doctest::Approx(bce / n));
  CHECK(c.dice == doctest::Approx(dice / n));
  CHECK(c.iou == doctest::Approx(iou / n));
  CHECK(c.sem == doctest::Approx(sem / n));
}

TEST_CASE("contrastive_loss: closed form with orthogonal negatives") {
  const double tau = 0.07;
  const FeatureSet f{{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}};
  const auto r = contrastive_loss(f, f, tau);
  const double expected = -std::log(std::exp(1.0 / tau) / (std::exp(1.0 / tau) + std::exp(0.0)));
  CHECK(r.value == doctest::Approx(expected).epsilon(1e-9));
  CHECK_FALSE(r.degenerate_pairs);
}

TEST_CASE("contrastive_loss: single pair and zero vectors") {
  const FeatureSet one{{1.0, 2.0}};
  const auto r = contrastive_loss(one, one, 0.07);
  CHECK(r.value == 0.0);
  CHECK(r.degenerate_pairs);
  const FeatureSet with_zero{{1.0, 0.0}, {0.0, 0.0}};
  CHECK(code_of([&] { (void)contrastive_loss(with_zero, with_zero, 0.07); }) == ErrorCode::ZeroVector);
}

TEST_CASE("contrastive_loss: invariant to positive rescaling") {
  Rng rng(9);
  for (int i = 0; i < 50; ++i) {
    FeatureSet a = random_set(rng, 4, 6), b = random_set(rng, 4, 6);
    const double base = contrastive_loss(a, b, 0.1).value;
    for (double& x : a[rng.below(4)]) x *= 37.5;
    for (double& x : b[rng.below(4)]) x *= 0.02;
    CHECK(std::abs(contrastive_loss(a, b, 0.1).value - base) <= 1e-6);
  }
}

TEST_CASE("contrastive_loss: gradients match finite differences") {
  Rng rng(10);
  for (int i = 0; i < 100; ++i) {
    const std::size_t z = 5, dim = 8;
    const FeatureSet a = random_set(rng, z, dim), b = random_set(rng, z, dim);
    const double tau = rng.uniform(0.05, 1.0);
    const auto r = contrastive_loss(a, b, tau);
    const auto fa = fd_gradient([&](std::span<const double> x) { return contrastive_loss(unflatten(x, z), b, tau).value; }, flatten(a), 1e-6);
    const auto fb = fd_gradient([&](std::span<const double> x) { return contrastive_loss(a, unflatten(x, z), tau).value; }, flatten(b), 1e-6);
    CHECK(relative_error(flatten(r.grad_anchor), fa) <= kFdTolerance);
    CHECK(relative_error(flatten(r.grad_other), fb) <= kFdTolerance);
    CHECK(r.value >= 0.0);
  }
}

TEST_CASE("cross_frame_loss: boundary terms, symmetry and enumeration") {
  Rng rng(11);
  const double tau = 0.2;
  const std::vector<FeatureSet> single{random_set(rng, 3, 4)};
  CHECK(cross_frame_loss(single, tau) == 0.0);

  const FeatureSet s = random_set(rng, 4, 5);
  const std::vector<FeatureSet> twin{s, s};
  const double fwd = contrastive_loss(s, s, tau).value;
  CHECK(cross_frame_loss(twin, tau) == doctest::Approx(0.5 * (fwd + fwd)).epsilon(1e-12));

  std::vector<FeatureSet> seq;
  for (int t = 0; t < 4; ++t) seq.push_back(random_set(rng, 4, 5));
  double sum = 0.0;
  for (std::size_t t = 0; t + 1 < 4; ++t) sum += contrastive_loss(seq[t], seq[t + 1], tau).value;
  for (std::size_t t = 1; t < 4; ++t) sum += contrastive_loss(seq[t], seq[t - 1], tau).value;
  CHECK(cross_frame_loss(seq, tau) == doctest::Approx(sum / 4.0).epsilon(1e-12));

  std::vector<FeatureSet> reversed(seq.rbegin(), seq.rend());
  CHECK(cross_frame_loss(reversed, tau) == doctest::Approx(sum / 4.0).epsilon(1e-12));

  bool degenerate = false;
  const std::vector<FeatureSet> lonely{{{1.0, 0.0}}, {{0.0, 1.0}}};
  CHECK(cross_frame_loss(lonely, tau, &degenerate) == 0.0);
  CHECK(degenerate);
}

TEST_CASE("total_loss: linear combination") {
  CHECK(total_loss(0.0, 0.0) == 0.0);
  CHECK(total_loss(2.0, 4.0) == 3.0);
  Rng rng(12);
  for (int i = 0; i < 50; ++i) {
    const LossWeights w{0.5, 0.5, rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0), 0.07};
    const double a = rng.uniform(0, 10), b = rng.uniform(0, 10), c = rng.uniform(0, 10);
    CHECK(total_loss(a + c, b, w) == doctest::Approx(total_loss(a, b, w) + w.lambda1 * c));
    CHECK(total_loss(a, b + c, w) == doctest::Approx(total_loss(a, b, w) + w.lambda2 * c));
  }
}

TEST_CASE("LossWeights: all weights must be positive") {
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  w.tau = 0.0;
  CHECK(code_of([&] { w.validate(); }) == ErrorCode::ConfigError);
}

TEST_CASE("supervision bundle: parse and evaluate") {
  const std::string text = R"(# regression bundle
{"weights": {"alpha": 0.5, "beta": 0.5, "lambda1": 0.5, "lambda2": 0.5, "tau": 0.07}}

{"queries": [{"class_logit": 0, "gt_class": 1, "mask_logits": [0, 0], "gt_mask": [1, 0], "pred_box": {"min": [0,0,0], "max": [1,1,1]}, "gt_box": {"min": [0.5,0,0], "max": [1.5,1,1]}, "sem_logits": [0], "gt_sem": 0}], "instance_features": [[1,0,0],[0,1,0]]}
{"queries": [], "instance_features": [[1,0,0],[0,1,0]]}
)";
  const SupervisionBundle b = parse_supervision_bundle(text);
  REQUIRE(b.frames.size() == 2);
  CHECK(b.features.size() == 2);
  const LossReport r = evaluate_bundle(b);
  const double ln2 = std::log(2.0);
  const double dice = 1.0 - (2.0 * 0.5 + 1.0) / (1.0 + 1.0 + 1.0);
  const double frame1 = 0.5 * ln2 + ln2 + dice + 0.5 * (2.0 / 3.0) + ln2;
  CHECK(r.l1.total == doctest::Approx(frame1 / 2.0));
  const double cont = -std::log(std::exp(1.0 / 0.07) / (std::exp(1.0 / 0.07) + 1.0));
  CHECK(r.l2 == doctest::Approx(cont));
  CHECK(r.total == doctest::Approx(0.5 * r.l1.total + 0.5 * r.l2));

  CHECK(code_of([] { (void)parse_supervision_bundle("{not json"); }) == ErrorCode::FormatError);
  CHECK(code_of([] { (void)parse_supervision_bundle(R"({"queries": [{"class_logit": "x"}]})"); }) == ErrorCode::FormatError);
}
