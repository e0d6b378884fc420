#include "copeft/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "copeft/error.hpp"

namespace copeft {

double iou_aa(const Box& a, const Box& b) {
  const double ix = std::min(a.cx + a.w / 2, b.cx + b.w / 2) - std::max(a.cx - a.w / 2, b.cx - b.w / 2);
  const double iy = std::min(a.cy + a.l / 2, b.cy + b.l / 2) - std::max(a.cy - a.l / 2, b.cy - b.l / 2);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  return inter / (a.w * a.l + b.w * b.l - inter);
}

DetectionSet nms(DetectionSet c, double iou_thr) {
  std::sort(c.begin(), c.end(), [](const Detection& x, const Detection& y) {
    return x.score != y.score ? x.score > y.score : x.cell < y.cell;
  });
  DetectionSet keep;
  for (const Detection& d : c) {
    const bool suppressed =
        std::any_of(keep.begin(), keep.end(), [&](const Detection& k) { return iou_aa(k.box, d.box) >= iou_thr; });
    if (!suppressed) keep.push_back(d);
  }
  return keep;
}

DetectionSet decode_boxes(const HeadOutputs& heads, const ModelConfig& cfg, const DecodeOptions& opt) {
  if (!(opt.score_thr > 0.0 && opt.score_thr < 1.0) || !(opt.nms_iou > 0.0 && opt.nms_iou < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "decode_boxes: thresholds must lie in (0,1)");
  }
  const std::size_t h = cfg.feature_rows(), w = cfg.feature_cols(), n = h * w;
  expect_shape(heads.cls, {1, h, w}, "decode_boxes cls");
  expect_shape(heads.reg, {4, h, w}, "decode_boxes reg");
  const double fc = cfg.feature_cell();
  DetectionSet cand;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t k = i * w + j;
      const double score = 1.0 / (1.0 + std::exp(-heads.cls[k]));
      if (!(score >= opt.score_thr)) continue;
      Detection d;
      d.score = score;
      d.cell = k;
      d.box.cx = cfg.grid.x_min + (static_cast<double>(j) + 0.5 + heads.reg[k]) * fc;
      d.box.cy = cfg.grid.y_min + (static_cast<double>(i) + 0.5 + heads.reg[n + k]) * fc;
      // clamp keeps exp finite for untrained heads
      d.box.w = fc * std::exp(std::clamp(heads.reg[2 * n + k], -20.0, 20.0));
      d.box.l = fc * std::exp(std::clamp(heads.reg[3 * n + k], -20.0, 20.0));
      if (!std::isfinite(d.box.cx) || !std::isfinite(d.box.cy)) continue;
      cand.push_back(d);
    }
  }
  return nms(std::move(cand), opt.nms_iou);
}

ApResult average_precision(const std::vector<DetectionSet>& dets, const std::vector<std::vector<Box>>& gts,
                           double iou_thr) {
  if (dets.size() != gts.size()) {
    throw Error(ErrorCode::kInvalidArgument, "average_precision: " + std::to_string(dets.size()) +
                                                 " detection frames vs " + std::to_string(gts.size()) + " GT frames");
  }
  ApResult r;
  for (const auto& g : gts) r.num_gt += g.size();
  struct Ref {
    double score;
    std::size_t frame, idx;
  };
  std::vector<Ref> order;
  for (std::size_t f = 0; f < dets.size(); ++f) {
    // within a frame, equal scores are matched in cell order
    std::vector<std::size_t> idx(dets[f].size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      const Detection &x = dets[f][a], &y = dets[f][b];
      return x.score != y.score ? x.score > y.score : x.cell < y.cell;
    });
    for (std::size_t i : idx) order.push_back({dets[f][i].score, f, i});
  }
  r.num_det = order.size();
  if (r.num_gt == 0) {
    r.no_gt = true;
    return r;
  }
  std::stable_sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t f = 0; f < gts.size(); ++f) used[f].assign(gts[f].size(), false);
  std::vector<double> recall, precision;
  std::size_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const Ref& d = order[k];
    const Box& box = dets[d.frame][d.idx].box;
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < gts[d.frame].size(); ++g) {
      if (used[d.frame][g]) continue;
      const double iou = iou_aa(box, gts[d.frame][g]);
      if (iou >= iou_thr && iou > best) {
        best = iou;
        best_g = g;
      }
    }
    if (best >= 0.0) {
      used[d.frame][best_g] = true;
      ++tp;
    } else {
      ++fp;
    }
    // one operating point per distinct score
    if (k + 1 == order.size() || order[k + 1].score != d.score) {
      recall.push_back(static_cast<double>(tp) / static_cast<double>(r.num_gt));
      precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double prev = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    r.ap += (recall[i] - prev) * precision[i];
    prev = recall[i];
  }
  return r;
}

Area area_of(const GridGeometry& g) { return {g.x_min, g.y_min, g.x_max(), g.y_max()}; }

void to_json(nlohmann::json& j, const MetricsReport& r) {
  const double ratio =
      r.params_total ? static_cast<double>(r.params_trainable) / static_cast<double>(r.params_total) : 0.0;
  j = {{"method", r.method},
       {"seed", r.seed},
       {"AP50", r.ap50},
       {"AP70", r.ap70},
       {"num_detections", r.num_detections},
       {"num_gt", r.num_gt},
       {"no_gt", r.no_gt},
       {"params_trainable", r.params_trainable},
       {"params_total", r.params_total},
       {"ratio", ratio},
       {"seconds", r.seconds}};
}

void from_json(const nlohmann::json& j, MetricsReport& r) {
  r.method = j.at("method").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.ap50 = j.at("AP50").get<double>();
  r.ap70 = j.at("AP70").get<double>();
  r.num_detections = j.value("num_detections", std::size_t{0});
  r.num_gt = j.value("num_gt", std::size_t{0});
  r.no_gt = j.value("no_gt", false);
  r.params_trainable = j.value("params_trainable", std::uint64_t{0});
  r.params_total = j.value("params_total", std::uint64_t{0});
  r.seconds = j.value("seconds", 0.0);
}

MetricsReport evaluate_detections(const std::vector<DetectionSet>& dets, const std::vector<std::vector<Box>>& gts,
                                  const Area& area) {
  std::vector<DetectionSet> d(dets.size());
  std::vector<std::vector<Box>> g(gts.size());
  for (std::size_t f = 0; f < dets.size(); ++f) {
    for (const Detection& x : dets[f])
      if (area.contains(x.box.cx, x.box.cy)) d[f].push_back(x);
  }
  for (std::size_t f = 0; f < gts.size(); ++f) {
    for (const Box& b : gts[f])
      if (area.contains(b.cx, b.cy)) g[f].push_back(b);
  }
  const ApResult a50 = average_precision(d, g, 0.5);
  const ApResult a70 = average_precision(d, g, 0.7);
  MetricsReport r;
  r.ap50 = a50.ap;
  r.ap70 = a70.ap;
  r.num_detections = a50.num_det;
  r.num_gt = a50.num_gt;
  r.no_gt = a50.no_gt;
  return r;
}

MetricsReport evaluate_model(const Model& model, const Dataset& ds, const EvalOptions& opt) {
  if (!(model.config.grid == ds.cfg.grid)) {
    throw ConfigError("evaluate_model: model grid does not match dataset grid");
  }
  std::vector<DetectionSet> dets;
  std::vector<std::vector<Box>> gts;
  dets.reserve(ds.frames.size());
  for (const SceneSample& s : ds.frames) {
    dets.push_back(decode_boxes(pipeline_forward(model, s.grids), model.config, opt.decode));
    gts.push_back(s.boxes);
  }
  return evaluate_detections(dets, gts, opt.use_area ? opt.area : area_of(ds.cfg.grid));
}

MetricsReport evaluate_features(const Model& model, std::span<const Tensor> features, const Dataset& ds,
                                const EvalOptions& opt) {
  if (!(model.config.grid == ds.cfg.grid)) {
    throw ConfigError("evaluate_features: model grid does not match dataset grid");
  }
  if (features.size() != ds.frames.size()) {
    throw ShapeError("evaluate_features: " + std::to_string(features.size()) + " feature stacks for " +
                     std::to_string(ds.frames.size()) + " frames");
  }
  std::vector<DetectionSet> dets;
  std::vector<std::vector<Box>> gts;
  dets.reserve(ds.frames.size());
  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    dets.push_back(decode_boxes(pipeline_forward_features(model, features[i]), model.config, opt.decode));
    gts.push_back(ds.frames[i].boxes);
  }
  return evaluate_detections(dets, gts, opt.use_area ? opt.area : area_of(ds.cfg.grid));
}

}  // namespace copeft
