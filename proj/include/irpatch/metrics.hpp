#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "irpatch/scene.hpp"

// Detection scoring: IOU matching, precision-recall, average precision and
// attack success rate.
namespace irpatch::eval {

using scene::Box;
using scene::iou;

struct Detection {
  Box box;
  double score = 0;
  friend bool operator==(const Detection&, const Detection&) = default;
};

/// Greedy non-maximum suppression, highest score first. Ties keep input order.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(),
                                        [&](const Detection& k) { return iou(k.box, d.box) > iou_threshold; });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

struct PrPoint {
  double threshold = 0;  // score of the detection that produced this point
  double precision = 0;
  double recall = 0;
};

struct PrCurve {
  std::vector<PrPoint> points;  // descending threshold
  double ap = 0;
  std::size_t num_gt = 0;
};

class UndefinedMetric : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// All-points interpolated area under a precision/recall sequence.
inline double interpolated_ap(const std::vector<PrPoint>& pts) {
  std::vector<double> envelope(pts.size());
  double best = 0;
  for (std::size_t i = pts.size(); i-- > 0;) {
    best = std::max(best, pts[i].precision);
    envelope[i] = best;
  }
  double ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    ap += (pts[i].recall - prev_recall) * envelope[i];
    prev_recall = pts[i].recall;
  }
  return ap;
}

/// Score-descending greedy matching: each detection takes the unmatched
/// ground-truth box of highest IOU in its image; IOU >= iou_threshold is a
/// true positive, anything else a false positive.
inline PrCurve pr_curve(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<Box>>& gts,
                        double iou_threshold = 0.5) {
  if (dets.size() != gts.size()) throw std::invalid_argument("pr_curve: detection and ground-truth image counts differ");
  PrCurve curve;
  for (const auto& g : gts) curve.num_gt += g.size();
  if (curve.num_gt == 0) throw UndefinedMetric("pr_curve: AP undefined without ground-truth boxes");

  struct Ref {
    std::size_t image, index;
    double score;
  };
  std::vector<Ref> order;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (std::size_t j = 0; j < dets[i].size(); ++j) order.push_back({i, j, dets[i][j].score});
  }
  std::stable_sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> matched(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) matched[i].assign(gts[i].size(), false);
  std::size_t tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const Ref& r = order[k];
    const Box& box = dets[r.image][r.index].box;
    double best = 0;
    std::size_t best_j = 0;
    bool found = false;
    for (std::size_t j = 0; j < gts[r.image].size(); ++j) {
      if (matched[r.image][j]) continue;
      const double v = iou(box, gts[r.image][j]);
      if (!found || v > best) {
        best = v;
        best_j = j;
        found = true;
      }
    }
    if (found && best >= iou_threshold) {
      matched[r.image][best_j] = true;
      ++tp;
    }
    curve.points.push_back({r.score, static_cast<double>(tp) / static_cast<double>(k + 1),
                            static_cast<double>(tp) / static_cast<double>(curve.num_gt)});
  }
  curve.ap = interpolated_ap(curve.points);
  return curve;
}

/// Drop from clean AP to conditioned AP, in points (percentage of unit AP).
/// Negative when the condition scores better than clean.
inline double ap_decrease(const PrCurve& clean, const PrCurve& cond) { return 100.0 * (clean.ap - cond.ap); }

/// A person counts as detected when some detection reaches `score_threshold`
/// and overlaps its box with IOU >= iou_threshold.
inline bool person_detected(const std::vector<Detection>& dets, const Box& person, double score_threshold = 0.7,
                            double iou_threshold = 0.5) {
  return std::any_of(dets.begin(), dets.end(), [&](const Detection& d) {
    return d.score >= score_threshold && iou(d.box, person) >= iou_threshold;
  });
}

/// Fraction of frames in which the person went undetected.
inline double asr(const std::vector<bool>& detected) {
  if (detected.empty()) throw std::invalid_argument("asr: no frames");
  const auto missed = std::count(detected.begin(), detected.end(), false);
  return static_cast<double>(missed) / static_cast<double>(detected.size());
}

}  // namespace irpatch::eval
