#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "copeft/config.hpp"
#include "copeft/pipeline.hpp"
#include "copeft/scenes.hpp"

namespace copeft {

struct Detection {
  Box box;
  double score = 0.0;
  std::size_t cell = 0;  // feature-grid index i*W + j; NMS tie-break
};

using DetectionSet = std::vector<Detection>;

struct DecodeOptions {
  double score_thr = 0.25;
  double nms_iou = 0.2;
};

// Rectangle intersection over union of two axis-aligned boxes.
double iou_aa(const Box& a, const Box& b);

// Greedy suppression by descending score (ties: lower cell index first);
// drops every candidate with IoU >= iou_thr against a survivor.
DetectionSet nms(DetectionSet candidates, double iou_thr);

// Thresholded cell candidates, decoded to world boxes, after NMS.
DetectionSet decode_boxes(const HeadOutputs& heads, const ModelConfig& cfg, const DecodeOptions& opt = {});

struct ApResult {
  double ap = 0.0;
  std::size_t num_gt = 0;
  std::size_t num_det = 0;
  bool no_gt = false;  // AP is defined as 0 when there is no ground truth
};

// All-point interpolated AP over pooled detections. Detections with equal
// scores form one operating point.
ApResult average_precision(const std::vector<DetectionSet>& dets, const std::vector<std::vector<Box>>& gts,
                           double iou_thr);

struct Area {
  double x_min, y_min, x_max, y_max;
  bool contains(double x, double y) const { return x >= x_min && x < x_max && y >= y_min && y < y_max; }
};

Area area_of(const GridGeometry& g);

struct EvalOptions {
  DecodeOptions decode;
  bool use_area = false;  // default area is the full grid extent
  Area area{0, 0, 0, 0};
};

struct MetricsReport {
  std::string method;
  std::uint64_t seed = 0;
  double ap50 = 0.0;
  double ap70 = 0.0;
  std::size_t num_detections = 0;
  std::size_t num_gt = 0;
  bool no_gt = false;
  std::uint64_t params_trainable = 0;
  std::uint64_t params_total = 0;
  double seconds = 0.0;
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

// Drops boxes and detections centred outside `area`, then scores AP@50/AP@70.
MetricsReport evaluate_detections(const std::vector<DetectionSet>& dets, const std::vector<std::vector<Box>>& gts,
                                  const Area& area);

// Runs the model over every frame and evaluates against the frame boxes.
MetricsReport evaluate_model(const Model& model, const Dataset& ds, const EvalOptions& opt = {});
// Same, starting after the encoder from one [N,C,H,W] stack per frame.
MetricsReport evaluate_features(const Model& model, std::span<const Tensor> features, const Dataset& ds,
                                const EvalOptions& opt = {});

}  // namespace copeft
