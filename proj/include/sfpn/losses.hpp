// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sfpn/segmentation.hpp"

namespace sfpn {

struct LossWeights {
  double alpha = 0.5;    // classification weight
  double beta = 0.5;     // box IoU weight
  double lambda1 = 0.5;  // per-frame term
  double lambda2 = 0.5;  // cross-frame term
  double tau = 0.07;     // contrastive temperature

  void validate() const;
};

/// Scalar loss and its gradient with respect to the differentiated input.
struct LossValue {
  double value = 0.0;
  std::vector<double> grad;
};

/// Mean binary cross-entropy on logits; gradient (sigmoid(x) - y) / n.
LossValue bce_loss(std::span<const double> logits, std::span<const double> targets);

inline constexpr double kDiceSmoothing = 1.0;

/// 1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps).
LossValue dice_loss(std::span<const double> probs, std::span<const double> targets);

double box_volume(const Box3& b);
double box_iou(const Box3& a, const Box3& b);

/// True when some pred/gt corner pair coincides or an axis overlap is exactly
/// zero, where the IoU loss has a kink.
bool iou_at_tie(const Box3& pred, const Box3& gt);

/// 1 - IoU. Gradient layout: min x,y,z then max x,y,z of `pred`.
LossValue iou_loss(const Box3& pred, const Box3& gt);

/// Per-class binary cross-entropy against the one-hot label, mean over K.
LossValue sem_loss(std::span<const double> logits, std::int32_t label);

struct QuerySupervision {
  double class_logit = 0.0;
  std::int32_t gt_class = 0;  // 1 = foreground
  std::vector<double> mask_logits;
  std::vector<double> gt_mask;  // 0 or 1 per point
  Box3 pred_box;
  Box3 gt_box;
  std::vector<double> sem_logits;
  std::int32_t gt_sem = 0;
};

struct FrameSupervision {
  std::vector<QuerySupervision> queries;
};

struct LossBreakdown {
  double cls = 0.0;
  double bce = 0.0;
  double dice = 0.0;
  double iou = 0.0;
  double sem = 0.0;
  double total = 0.0;
};

/// Component means over one frame's queries (all zero for a frame without queries).
LossBreakdown frame_components(const FrameSupervision& frame);

/// alpha * cls + bce + dice + beta * iou + sem.
double combine_components(const LossBreakdown& c, const LossWeights& w);

/// L1: the weighted component sum averaged over frames; each component field
/// holds its mean over frames.
LossBreakdown per_frame_loss(std::span<const FrameSupervision> frames, const LossWeights& w = {});

using FeatureSet = std::vector<std::vector<double>>;

struct ContrastiveResult {
  double value = 0.0;
  FeatureSet grad_anchor;  // d/d anchors
  FeatureSet grad_other;   // d/d the matched frame's features
  bool degenerate_pairs = false;
};

/// InfoNCE over cosine similarities / tau, anchors[i] paired with other[i].
/// A single pair yields 0 with `degenerate_pairs` set.
ContrastiveResult contrastive_loss(const FeatureSet& anchors, const FeatureSet& other, double tau);

/// L2: mean over frames of the forward and backward contrastive terms; the
/// terms that would leave the sequence are zero.
double cross_frame_loss(std::span<const FeatureSet> frames, double tau, bool* degenerate = nullptr);

/// lambda1 * L1 + lambda2 * L2.
double total_loss(double l1, double l2, const LossWeights& w = {});

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Central differences; throws NumericalError on a non-finite evaluation.
std::vector<double> fd_gradient(const ScalarFunction& f, std::span<const double> x, double h = 1e-4);

/// ||a - b|| / max(||a||, ||b||); 0 when both are zero.
double relative_error(std::span<const double> a, std::span<const double> b);

/// Supervision bundle, one JSON object per line:
///   {"weights": {"alpha":..,"beta":..,"lambda1":..,"lambda2":..,"tau":..}}   optional
///   {"queries": [{"class_logit":x,"gt_class":0|1,"mask_logits":[..],"gt_mask":[..],
///                 "pred_box":{"min":[3],"max":[3]},"gt_box":{..},
///                 "sem_logits":[..],"gt_sem":k}, ...],
///    "instance_features": [[..], ...]}                                     one per frame
/// Blank lines and lines starting with '#' are ignored.
struct SupervisionBundle {
  LossWeights weights;
  std::vector<FrameSupervision> frames;
  std::vector<FeatureSet> features;
};

SupervisionBundle parse_supervision_bundle(std::string_view text);

struct LossReport {
  LossBreakdown l1;
  double l2 = 0.0;
  double total = 0.0;
  bool degenerate_pairs = false;
};

LossReport evaluate_bundle(const SupervisionBundle& bundle);

}  // namespace sfpn
