#pragma once

#include <algorithm>
#include <limits>
#include <map>
#include <vector>

#include "kpbev/boxes.hpp"

namespace kpbev {

inline const std::vector<double> kApThresholds{0.5, 1.0, 2.0, 4.0};

/// Average precision at the center-distance matching thresholds plus their
/// mean. When there is no ground truth, AP is reported as zero and flagged.
struct EvalResult {
  std::vector<double> thresholds;
  std::vector<double> ap;
  double map = 0.0;
  bool no_ground_truth = false;

  struct PrCurve {
    std::vector<double> recall;
    std::vector<double> precision;
  };
  std::vector<PrCurve> curves;

  double ap_at(double threshold) const {
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      if (thresholds[i] == threshold) return ap[i];
    }
    throw ContractError("no AP computed for requested threshold");
  }
};

/// Greedy matching by descending score: each prediction takes the nearest
/// still-unmatched ground truth in its frame if the center distance is within
/// the threshold. AP integrates the all-point-interpolated PR curve.
inline EvalResult evaluate(const std::vector<OrientedBox>& preds,
                           const std::vector<OrientedBox>& gts,
                           std::vector<double> thresholds = kApThresholds) {
  for (const auto& p : preds) {
    if (!p.score) throw ContractError("evaluate: predictions must be scored");
  }
  EvalResult result;
  result.thresholds = std::move(thresholds);
  result.ap.assign(result.thresholds.size(), 0.0);
  result.curves.resize(result.thresholds.size());
  if (gts.empty()) {
    result.no_ground_truth = true;
    result.map = 0.0;
    return result;
  }

  // deterministic, input-order-independent processing order
  std::vector<std::size_t> order(preds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    const auto key = [&](const OrientedBox& b) {
      return std::make_tuple(-*b.score, b.frame, b.cx, b.cy, b.width, b.length, b.yaw);
    };
    return key(preds[i]) < key(preds[j]);
  });

  std::map<int, std::vector<std::size_t>> gts_by_frame;
  for (std::size_t i = 0; i < gts.size(); ++i) gts_by_frame[gts[i].frame].push_back(i);

  for (std::size_t ti = 0; ti < result.thresholds.size(); ++ti) {
    const double tau = result.thresholds[ti];
    std::vector<bool> matched(gts.size(), false);
    std::size_t tp = 0;
    std::vector<double> recall, precision;
    recall.reserve(preds.size());
    precision.reserve(preds.size());
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      const OrientedBox& p = preds[order[rank]];
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_gt = 0;
      bool found = false;
      const auto it = gts_by_frame.find(p.frame);
      if (it != gts_by_frame.end()) {
        for (std::size_t gi : it->second) {
          if (matched[gi]) continue;
          const double d = (gts[gi].center() - p.center()).norm();
          if (d < best) {
            best = d;
            best_gt = gi;
            found = true;
          }
        }
      }
      if (found && best <= tau) {
        matched[best_gt] = true;
        ++tp;
      }
      recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
      precision.push_back(static_cast<double>(tp) / static_cast<double>(rank + 1));
    }

    // all-point interpolation: running max of precision from the right
    double ap = 0.0;
    double max_prec = 0.0;
    for (std::size_t i = recall.size(); i-- > 0;) {
      max_prec = std::max(max_prec, precision[i]);
      const double prev_recall = i == 0 ? 0.0 : recall[i - 1];
      ap += (recall[i] - prev_recall) * max_prec;
    }
    result.ap[ti] = ap;
    result.curves[ti].recall = std::move(recall);
    result.curves[ti].precision = std::move(precision);
  }

  double sum = 0.0;
  for (double a : result.ap) sum += a;
  result.map = result.ap.empty() ? 0.0 : sum / static_cast<double>(result.ap.size());
  return result;
}

}  // namespace kpbev
