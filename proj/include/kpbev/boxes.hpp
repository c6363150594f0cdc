#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "kpbev/geom.hpp"

namespace kpbev {

inline double normalize_yaw(double yaw) {
  yaw = std::fmod(yaw, 2.0 * M_PI);
  if (yaw > M_PI) yaw -= 2.0 * M_PI;
  if (yaw <= -M_PI) yaw += 2.0 * M_PI;
  return yaw;
}

/// Oriented bounding box in BEV: center, size, heading. length runs along
/// the heading, width across it. score is set on predictions only.
struct OrientedBox {
  double cx = 0.0, cy = 0.0;
  double width = 1.0, length = 1.0;
  double yaw = 0.0;  // radians in (-pi, pi]
  std::optional<double> score;
  int frame = 0;
  std::string label = "car";

  Vec2 center() const { return {cx, cy}; }
  double area() const { return width * length; }

  /// Corners in counterclockwise order.
  std::array<Vec2, 4> corners() const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double hl = 0.5 * length, hw = 0.5 * width;
    const std::array<Vec2, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
    std::array<Vec2, 4> out;
    for (std::size_t i = 0; i < 4; ++i) {
      out[i] = {cx + local[i].x * c - local[i].y * s,
                cy + local[i].x * s + local[i].y * c};
    }
    return out;
  }
};

namespace detail {

inline double polygon_area(const std::vector<Vec2>& poly) {
  if (poly.size() < 3) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2 a = poly[i];
    const Vec2 b = poly[(i + 1) % poly.size()];
    acc += a.x * b.y - b.x * a.y;
  }
  return 0.5 * std::abs(acc);
}

inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }

/// Sutherland-Hodgman clip of a polygon against one half-plane (left of
/// the directed edge p1 -> p2, boundary inclusive).
inline std::vector<Vec2> clip_half_plane(const std::vector<Vec2>& subject, Vec2 p1,
                                         Vec2 p2) {
  std::vector<Vec2> out;
  const Vec2 dir = p2 - p1;
  const std::size_t n = subject.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 cur = subject[i];
    const Vec2 nxt = subject[(i + 1) % n];
    const double side_cur = cross(dir, cur - p1);
    const double side_nxt = cross(dir, nxt - p1);
    if (side_cur >= 0.0) out.push_back(cur);
    if ((side_cur > 0.0 && side_nxt < 0.0) || (side_cur < 0.0 && side_nxt > 0.0)) {
      const double t = side_cur / (side_cur - side_nxt);
      out.push_back(cur + (nxt - cur) * t);
    }
  }
  return out;
}

}  // namespace detail

/// Exact intersection-over-union of two oriented rectangles via convex
/// polygon clipping.
inline double rotated_iou(const OrientedBox& a, const OrientedBox& b) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  std::vector<Vec2> poly(ca.begin(), ca.end());
  for (std::size_t i = 0; i < 4 && poly.size() >= 3; ++i) {
    poly = detail::clip_half_plane(poly, cb[i], cb[(i + 1) % 4]);
  }
  const double inter = detail::polygon_area(poly);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

/// Greedy non-maximum suppression: boxes in descending score order suppress
/// later boxes overlapping above the IoU threshold. Equal scores keep their
/// input (decode) order.
inline std::vector<OrientedBox> nms(const std::vector<OrientedBox>& boxes,
                                    double iou_threshold = 0.5) {
  for (const OrientedBox& b : boxes) {
    if (!b.score) throw ContractError("nms requires scored boxes");
  }
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return *boxes[i].score > *boxes[j].score;
  });
  std::vector<bool> suppressed(boxes.size(), false);
  std::vector<OrientedBox> kept;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    kept.push_back(boxes[i]);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (suppressed[j] || boxes[i].frame != boxes[j].frame) continue;
      if (rotated_iou(boxes[i], boxes[j]) > iou_threshold) suppressed[j] = true;
    }
  }
  return kept;
}

}  // namespace kpbev
