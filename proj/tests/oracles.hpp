#pragma once

// Brute-force references for IoU, NMS and AP, shared by the unit tests and
// the acceptance run.
#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <set>
#include <vector>

#include "copeft/eval.hpp"

namespace copeft::testing {

// Box with corners on a 0.25 m lattice so areas are exact.
inline Box lattice_box(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pos(0, 40), size(1, 16);
  const double x0 = pos(rng) * 0.25, y0 = pos(rng) * 0.25;
  const double w = size(rng) * 0.25, l = size(rng) * 0.25;
  return {x0 + w / 2, y0 + l / 2, w, l};
}

// Counts covered lattice squares; independent of interval arithmetic.
inline double iou_by_counting(const Box& a, const Box& b) {
  auto covers = [](const Box& bx, double x, double y) {
    return x > bx.cx - bx.w / 2 && x < bx.cx + bx.w / 2 && y > bx.cy - bx.l / 2 && y < bx.cy + bx.l / 2;
  };
  long inter = 0, uni = 0;
  for (int i = 0; i < 4 * 16; ++i)
    for (int j = 0; j < 4 * 16; ++j) {
      const double x = (i + 0.5) * 0.25, y = (j + 0.5) * 0.25;
      const bool ia = covers(a, x, y), ib = covers(b, x, y);
      inter += ia && ib;
      uni += ia || ib;
    }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

// Repeatedly take the best remaining candidate and delete its neighbours.
inline std::set<std::size_t> nms_oracle(const DetectionSet& c, double thr,
                                        const std::function<double(const Box&, const Box&)>& iou = iou_aa) {
  std::vector<std::size_t> rem(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) rem[i] = i;
  std::set<std::size_t> keep;
  while (!rem.empty()) {
    std::size_t best = rem[0];
    for (std::size_t i : rem) {
      if (c[i].score > c[best].score || (c[i].score == c[best].score && c[i].cell < c[best].cell)) best = i;
    }
    keep.insert(c[best].cell);
    std::vector<std::size_t> next;
    for (std::size_t i : rem) {
      if (i != best && iou(c[i].box, c[best].box) < thr) next.push_back(i);
    }
    rem = std::move(next);
  }
  return keep;
}

inline std::set<std::size_t> cells(const DetectionSet& d) {
  std::set<std::size_t> s;
  for (const auto& x : d) s.insert(x.cell);
  return s;
}

// Reference AP: rematch from scratch at every distinct score threshold, then
// integrate the interpolated precision over recall.
inline double ap_oracle(const std::vector<DetectionSet>& dets, const std::vector<std::vector<Box>>& gts, double thr) {
  std::size_t ngt = 0;
  for (const auto& g : gts) ngt += g.size();
  if (ngt == 0) return 0.0;
  std::set<double, std::greater<>> levels;
  for (const auto& f : dets)
    for (const auto& d : f) levels.insert(d.score);
  std::vector<std::pair<double, double>> pts;  // (recall, precision)
  for (double t : levels) {
    std::size_t tp = 0, n = 0;
    for (std::size_t f = 0; f < dets.size(); ++f) {
      DetectionSet kept;
      for (const auto& d : dets[f])
        if (d.score >= t) kept.push_back(d);
      std::sort(kept.begin(), kept.end(), [](const Detection& a, const Detection& b) {
        return a.score != b.score ? a.score > b.score : a.cell < b.cell;
      });
      std::vector<bool> used(gts[f].size(), false);
      for (const auto& d : kept) {
        ++n;
        int best = -1;
        double bi = 0.0;
        for (std::size_t g = 0; g < gts[f].size(); ++g) {
          const double v = iou_aa(d.box, gts[f][g]);
          if (!used[g] && v >= thr && (best < 0 || v > bi)) {
            best = static_cast<int>(g);
            bi = v;
          }
        }
        if (best >= 0) {
          used[static_cast<std::size_t>(best)] = true;
          ++tp;
        }
      }
    }
    pts.push_back({static_cast<double>(tp) / static_cast<double>(ngt), static_cast<double>(tp) / static_cast<double>(n)});
  }
  double ap = 0.0, prev = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double pmax = 0.0;
    for (std::size_t k = i; k < pts.size(); ++k) pmax = std::max(pmax, pts[k].second);
    ap += (pts[i].first - prev) * pmax;
    prev = pts[i].first;
  }
  return ap;
}

// Random frames with near-miss detections around the GT and a few strays.
inline void random_instance(std::mt19937_64& rng, std::size_t frames, std::vector<DetectionSet>& dets,
                     std::vector<std::vector<Box>>& gts) {
  std::uniform_int_distribution<int> ngt(0, 4), nstray(0, 3), tie(0, 5);
  std::normal_distribution<double> jitter(0.0, 0.4);
  dets.assign(frames, {});
  gts.assign(frames, {});
  std::size_t cell = 0;
  for (std::size_t f = 0; f < frames; ++f) {
    const int n = ngt(rng);
    for (int g = 0; g < n; ++g) {
      Box b = lattice_box(rng);
      gts[f].push_back(b);
      const int copies = tie(rng) % 3;
      for (int c = 0; c < copies; ++c) {
        Box d{b.cx + jitter(rng), b.cy + jitter(rng), b.w * std::exp(0.2 * jitter(rng)), b.l * std::exp(0.2 * jitter(rng))};
        dets[f].push_back({d, tie(rng) / 5.0 * 0.9 + 0.05, cell++});
      }
    }
    const int s = nstray(rng);
    for (int k = 0; k < s; ++k) dets[f].push_back({lattice_box(rng), tie(rng) / 5.0 * 0.9 + 0.05, cell++});
  }
}

}  // namespace copeft::testing
