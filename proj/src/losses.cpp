// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#include "sfpn/losses.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "sfpn/error.hpp"

namespace sfpn {
namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_box(const Box3& b, const char* what) {
  for (int a = 0; a < 3; ++a)
    if (!(b.min[a] <= b.max[a])) fail(ErrorCode::InvalidBox, std::string(what) + " box has min > max");
}

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::vector<double> unit(std::span<const double> v, double& length) {
  length = norm(v);
  if (!(length > 0.0)) fail(ErrorCode::ZeroVector, "contrastive feature is a zero vector");
  if (!std::isfinite(length)) fail(ErrorCode::NumericalError, "contrastive feature is not finite");
  std::vector<double> u(v.begin(), v.end());
  for (double& x : u) x /= length;
  return u;
}

// Gradient through u = f / |f|.
std::vector<double> through_normalization(const std::vector<double>& g, const std::vector<double>& u, double length) {
  double dot = 0.0;
  for (std::size_t c = 0; c < u.size(); ++c) dot += g[c] * u[c];
  std::vector<double> out(u.size());
  for (std::size_t c = 0; c < u.size(); ++c) out[c] = (g[c] - u[c] * dot) / length;
  return out;
}

}  // namespace

void LossWeights::validate() const {
  for (double v : {alpha, beta, lambda1, lambda2, tau})
    if (!(v > 0.0) || !std::isfinite(v)) fail(ErrorCode::ConfigError, "loss weights must be positive and finite");
}

LossValue bce_loss(std::span<const double> logits, std::span<const double> targets) {
  if (logits.size() != targets.size()) fail(ErrorCode::ShapeError, "logits and targets differ in length");
  LossValue out;
  const std::size_t n = logits.size();
  out.grad.resize(n);
  if (n == 0) return out;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = logits[i];
    const double y = targets[i];
    if (!std::isfinite(x)) fail(ErrorCode::NumericalError, "non-finite logit at " + std::to_string(i));
    sum += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    out.grad[i] = (sigmoid(x) - y) / static_cast<double>(n);
  }
  out.value = sum / static_cast<double>(n);
  return out;
}

LossValue dice_loss(std::span<const double> probs, std::span<const double> targets) {
  if (probs.size() != targets.size()) fail(ErrorCode::ShapeError, "probabilities and targets differ in length");
  double py = 0.0, sp = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!(probs[i] >= 0.0 && probs[i] <= 1.0)) fail(ErrorCode::RangeError, "probability outside [0, 1] at " + std::to_string(i));
    py += probs[i] * targets[i];
    sp += probs[i];
    sy += targets[i];
  }
  const double num = 2.0 * py + kDiceSmoothing;
  const double den = sp + sy + kDiceSmoothing;
  LossValue out;
  out.value = 1.0 - num / den;
  out.grad.resize(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out.grad[i] = -(2.0 * targets[i] * den - num) / (den * den);
  return out;
}

double box_volume(const Box3& b) {
  return (b.max[0] - b.min[0]) * (b.max[1] - b.min[1]) * (b.max[2] - b.min[2]);
}

double box_iou(const Box3& a, const Box3& b) {
  double inter = 1.0;
  for (int k = 0; k < 3; ++k) inter *= std::max(0.0, std::min(a.max[k], b.max[k]) - std::max(a.min[k], b.min[k]));
  const double uni = box_volume(a) + box_volume(b) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

bool iou_at_tie(const Box3& pred, const Box3& gt) {
  for (int k = 0; k < 3; ++k) {
    if (pred.min[k] == gt.min[k] || pred.max[k] == gt.max[k]) return true;
    if (std::min(pred.max[k], gt.max[k]) - std::max(pred.min[k], gt.min[k]) == 0.0) return true;
  }
  return false;
}

LossValue iou_loss(const Box3& pred, const Box3& gt) {
  check_box(pred, "predicted");
  check_box(gt, "ground-truth");
  std::array<double, 3> ov{}, len{};
  for (int k = 0; k < 3; ++k) {
    ov[k] = std::max(0.0, std::min(pred.max[k], gt.max[k]) - std::max(pred.min[k], gt.min[k]));
    len[k] = pred.max[k] - pred.min[k];
  }
  const double inter = ov[0] * ov[1] * ov[2];
  const double vp = len[0] * len[1] * len[2];
  const double uni = vp + box_volume(gt) - inter;

  LossValue out;
  out.grad.assign(6, 0.0);
  if (!(uni > 0.0)) {
    out.value = 1.0;
    return out;
  }
  out.value = 1.0 - inter / uni;

  for (int k = 0; k < 3; ++k) {
    const double ov_rest = ov[(k + 1) % 3] * ov[(k + 2) % 3];
    const double len_rest = len[(k + 1) % 3] * len[(k + 2) % 3];
    double di_min = 0.0, di_max = 0.0;
    if (ov[k] > 0.0) {
      if (pred.min[k] > gt.min[k]) di_min = -ov_rest;
      if (pred.max[k] < gt.max[k]) di_max = ov_rest;
    }
    const double dv_min = -len_rest;
    const double dv_max = len_rest;
    // d(I/U) = (dI U - I (dV - dI)) / U^2
    auto d_iou = [&](double di, double dv) { return (di * uni - inter * (dv - di)) / (uni * uni); };
    out.grad[static_cast<std::size_t>(k)] = -d_iou(di_min, dv_min);
    out.grad[static_cast<std::size_t>(k) + 3] = -d_iou(di_max, dv_max);
  }
  return out;
}

LossValue sem_loss(std::span<const double> logits, std::int32_t label) {
  if (logits.empty()) fail(ErrorCode::ShapeError, "semantic logits are empty");
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
    fail(ErrorCode::RangeError, "semantic label " + std::to_string(label) + " outside [0, K)");
  std::vector<double> target(logits.size(), 0.0);
  target[static_cast<std::size_t>(label)] = 1.0;
  return bce_loss(logits, target);
}

LossBreakdown frame_components(const FrameSupervision& frame) {
  LossBreakdown c;
  if (frame.queries.empty()) return c;
  for (const auto& q : frame.queries) {
    if (q.gt_class != 0 && q.gt_class != 1) fail(ErrorCode::RangeError, "class target must be 0 or 1");
    const double cls_logit[1] = {q.class_logit};
    const double cls_target[1] = {static_cast<double>(q.gt_class)};
    c.cls += bce_loss(cls_logit, cls_target).value;
    c.bce += bce_loss(q.mask_logits, q.gt_mask).value;
    std::vector<double> probs(q.mask_logits.size());
    std::transform(q.mask_logits.begin(), q.mask_logits.end(), probs.begin(), sigmoid);
    c.dice += dice_loss(probs, q.gt_mask).value;
    c.iou += iou_loss(q.pred_box, q.gt_box).value;
    c.sem += sem_loss(q.sem_logits, q.gt_sem).value;
  }
  const double n = static_cast<double>(frame.queries.size());
  c.cls /= n;
  c.bce /= n;
  c.dice /= n;
  c.iou /= n;
  c.sem /= n;
  return c;
}

double combine_components(const LossBreakdown& c, const LossWeights& w) {
  return w.alpha * c.cls + c.bce + c.dice + w.beta * c.iou + c.sem;
}

LossBreakdown per_frame_loss(std::span<const FrameSupervision> frames, const LossWeights& w) {
  if (frames.empty()) fail(ErrorCode::EmptyBatch, "per-frame loss needs at least one frame");
  w.validate();
  LossBreakdown out;
  for (const auto& f : frames) {
    const LossBreakdown c = frame_components(f);
    out.cls += c.cls;
    out.bce += c.bce;
    out.dice += c.dice;
    out.iou += c.iou;
    out.sem += c.sem;
    out.total += combine_components(c, w);
  }
  const double t = static_cast<double>(frames.size());
  out.cls /= t;
  out.bce /= t;
  out.dice /= t;
  out.iou /= t;
  out.sem /= t;
  out.total /= t;
  return out;
}

ContrastiveResult contrastive_loss(const FeatureSet& anchors, const FeatureSet& other, double tau) {
  if (anchors.size() != other.size()) fail(ErrorCode::ShapeError, "contrastive pairs need equal counts");
  if (anchors.empty()) fail(ErrorCode::EmptyBatch, "contrastive loss needs at least one pair");
  if (!(tau > 0.0)) fail(ErrorCode::ConfigError, "temperature must be positive");
  const std::size_t Z = anchors.size();
  const std::size_t C = anchors[0].size();
  std::vector<std::vector<double>> u(Z), v(Z);
  std::vector<double> lu(Z), lv(Z);
  for (std::size_t i = 0; i < Z; ++i) {
    if (anchors[i].size() != C || other[i].size() != C) fail(ErrorCode::ShapeError, "contrastive features differ in width");
    u[i] = unit(anchors[i], lu[i]);
    v[i] = unit(other[i], lv[i]);
  }

  ContrastiveResult out;
  out.grad_anchor.assign(Z, std::vector<double>(C, 0.0));
  out.grad_other.assign(Z, std::vector<double>(C, 0.0));
  if (Z == 1) {
    out.degenerate_pairs = true;
    return out;
  }

  std::vector<double> s(Z * Z);
  for (std::size_t i = 0; i < Z; ++i)
    for (std::size_t j = 0; j < Z; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < C; ++c) d += u[i][c] * v[j][c];
      s[i * Z + j] = d / tau;
    }

  // L = (1/Z) sum_i (logsumexp_j s_ij - s_ii); dL/ds_ij = (softmax_ij - [i == j]) / Z.
  std::vector<std::vector<double>> gu(Z, std::vector<double>(C, 0.0)), gv(Z, std::vector<double>(C, 0.0));
  double total = 0.0;
  const double inv_z = 1.0 / static_cast<double>(Z);
  for (std::size_t i = 0; i < Z; ++i) {
    const double* row = &s[i * Z];
    const double peak = *std::max_element(row, row + Z);
    double sum = 0.0;
    for (std::size_t j = 0; j < Z; ++j) sum += std::exp(row[j] - peak);
    total += peak + std::log(sum) - row[i];
    for (std::size_t j = 0; j < Z; ++j) {
      const double ds = (std::exp(row[j] - peak) / sum - (i == j ? 1.0 : 0.0)) * inv_z / tau;
      for (std::size_t c = 0; c < C; ++c) {
        gu[i][c] += ds * v[j][c];
        gv[j][c] += ds * u[i][c];
      }
    }
  }
  out.value = total * inv_z;
  for (std::size_t i = 0; i < Z; ++i) {
    out.grad_anchor[i] = through_normalization(gu[i], u[i], lu[i]);
    out.grad_other[i] = through_normalization(gv[i], v[i], lv[i]);
  }
  return out;
}

double cross_frame_loss(std::span<const FeatureSet> frames, double tau, bool* degenerate) {
  if (frames.empty()) fail(ErrorCode::EmptyBatch, "cross-frame loss needs at least one frame");
  bool any_degenerate = false;
  double sum = 0.0;
  const std::size_t T = frames.size();
  for (std::size_t t = 0; t < T; ++t) {
    if (t + 1 < T) {
      const auto r = contrastive_loss(frames[t], frames[t + 1], tau);
      sum += r.value;
      any_degenerate |= r.degenerate_pairs;
    }
    if (t > 0) {
      const auto r = contrastive_loss(frames[t], frames[t - 1], tau);
      sum += r.value;
      any_degenerate |= r.degenerate_pairs;
    }
  }
  if (degenerate) *degenerate = any_degenerate;
  return sum / static_cast<double>(T);
}

double total_loss(double l1, double l2, const LossWeights& w) { return w.lambda1 * l1 + w.lambda2 * l2; }

std::vector<double> fd_gradient(const ScalarFunction& f, std::span<const double> x, double h) {
  if (!(h > 0.0)) fail(ErrorCode::RangeError, "finite-difference step must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    probe[k] = x[k] + h;
    const double up = f(probe);
    probe[k] = x[k] - h;
    const double down = f(probe);
    probe[k] = x[k];
    if (!std::isfinite(up) || !std::isfinite(down))
      fail(ErrorCode::NumericalError, "non-finite evaluation at coordinate " + std::to_string(k));
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(ErrorCode::ShapeError, "gradient lengths differ");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  const double scale = std::max(norm(a), norm(b));
  return scale > 0.0 ? std::sqrt(diff) / scale : 0.0;
}

namespace {

using nlohmann::json;

Box3 parse_box(const json& j) {
  Box3 b;
  for (int a = 0; a < 3; ++a) {
    b.min[a] = j.at("min").at(a).get<double>();
    b.max[a] = j.at("max").at(a).get<double>();
  }
  return b;
}

QuerySupervision parse_query(const json& j) {
  QuerySupervision q;
  q.class_logit = j.at("class_logit").get<double>();
  q.gt_class = j.at("gt_class").get<std::int32_t>();
  q.mask_logits = j.at("mask_logits").get<std::vector<double>>();
  q.gt_mask = j.at("gt_mask").get<std::vector<double>>();
  q.pred_box = parse_box(j.at("pred_box"));
  q.gt_box = parse_box(j.at("gt_box"));
  q.sem_logits = j.at("sem_logits").get<std::vector<double>>();
  q.gt_sem = j.at("gt_sem").get<std::int32_t>();
  if (q.mask_logits.size() != q.gt_mask.size()) fail(ErrorCode::ShapeError, "mask logits and mask target differ in length");
  return q;
}

}  // namespace

SupervisionBundle parse_supervision_bundle(std::string_view text) {
  SupervisionBundle bundle;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string_view::npos || line[first] == '#') continue;
    try {
      const json j = json::parse(line);
      if (j.contains("weights")) {
        const json& w = j.at("weights");
        bundle.weights.alpha = w.value("alpha", bundle.weights.alpha);
        bundle.weights.beta = w.value("beta", bundle.weights.beta);
        bundle.weights.lambda1 = w.value("lambda1", bundle.weights.lambda1);
        bundle.weights.lambda2 = w.value("lambda2", bundle.weights.lambda2);
        bundle.weights.tau = w.value("tau", bundle.weights.tau);
        continue;
      }
      FrameSupervision frame;
      for (const json& q : j.at("queries")) frame.queries.push_back(parse_query(q));
      bundle.frames.push_back(std::move(frame));
      bundle.features.push_back(j.value("instance_features", FeatureSet{}));
    } catch (const json::exception& e) {
      fail(ErrorCode::FormatError, "supervision bundle line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  bundle.weights.validate();
  return bundle;
}

LossReport evaluate_bundle(const SupervisionBundle& bundle) {
  LossReport r;
  r.l1 = per_frame_loss(bundle.frames, bundle.weights);
  bool has_features = false;
  for (const auto& f : bundle.features) has_features |= !f.empty();
  if (has_features) r.l2 = cross_frame_loss(bundle.features, bundle.weights.tau, &r.degenerate_pairs);
  r.total = total_loss(r.l1.total, r.l2, bundle.weights);
  return r;
}

}  // namespace sfpn
