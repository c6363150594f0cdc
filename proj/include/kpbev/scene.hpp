#pragma once

#include <cstdint>
#include <vector>

#include "kpbev/boxes.hpp"
#include "kpbev/geom.hpp"
#include "kpbev/random.hpp"

namespace kpbev {

/// Synthetic radar scene generator. Cars are rectangles with reflections
/// sampled on their sensor-facing edges; the sensor sits at the origin.
/// Feature layout per point: [x, y, v_r, rcs, dt].
struct SceneConfig {
  double x_min = -20.0, y_min = -20.0, x_max = 20.0, y_max = 20.0;
  double spawn_margin = 3.0;  // keep car centers inside the extent
  int cars_min = 2, cars_max = 6;
  double min_car_separation = 6.0;  // center-to-center, keeps cars resolvable
  double car_width_min = 1.6, car_width_max = 2.0;    // 1.8 +/- 0.2
  double car_length_min = 4.0, car_length_max = 5.0;  // 4.5 +/- 0.5
  int reflections_min = 4, reflections_max = 12;
  double position_noise = 0.1;  // sigma, m
  double vr_noise = 0.1;        // sigma, m/s
  double stationary_fraction = 0.3;
  double speed_max = 12.0;
  double car_rcs_min = 5.0, car_rcs_max = 25.0;
  double clutter_mean = 40.0;  // Poisson mean of clutter points
  double clutter_rcs_min = -5.0, clutter_rcs_max = 15.0;
  double dt_max = 0.25;
};

inline constexpr std::size_t kSceneFeatureDim = 5;  // x, y, v_r, rcs, dt

template <typename T>
struct SyntheticScene {
  PointCloud<T> cloud;
  std::vector<OrientedBox> ground_truth;
  std::uint64_t seed = 0;
};

struct SceneRow {
  Vec2 position;
  double vr, rcs, dt;
};

/// Reflections of a single car: points on the edges facing the sensor
/// (outward normal pointing toward the origin), chosen proportionally to
/// edge length, with Gaussian position noise. v_r is the projection of the
/// box velocity onto the sensor ray through the (noisy) point.
inline std::vector<SceneRow> sample_car_reflections(const OrientedBox& box,
                                                    Vec2 velocity, int n_points,
                                                    const SceneConfig& cfg, Rng& rng) {
  const auto corners = box.corners();
  struct Edge {
    Vec2 a, b;
    double len;
  };
  std::vector<Edge> facing;
  double total_len = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const Vec2 a = corners[i];
    const Vec2 b = corners[(i + 1) % 4];
    const Vec2 mid = (a + b) * 0.5;
    // CCW corners: outward normal of edge a->b is (dy, -dx)
    const Vec2 d = b - a;
    const Vec2 normal{d.y, -d.x};
    if (normal.dot(mid) < 0.0) {  // normal points back toward the sensor
      const double len = d.norm();
      facing.push_back({a, b, len});
      total_len += len;
    }
  }
  if (facing.empty()) {  // sensor inside the box: every edge is visible
    for (std::size_t i = 0; i < 4; ++i) {
      const Vec2 a = corners[i];
      const Vec2 b = corners[(i + 1) % 4];
      const double len = (b - a).norm();
      facing.push_back({a, b, len});
      total_len += len;
    }
  }
  std::vector<SceneRow> rows;
  rows.reserve(static_cast<std::size_t>(n_points));
  for (int p = 0; p < n_points; ++p) {
    double pick = rng.uniform(0.0, total_len);
    std::size_t e = 0;
    while (e + 1 < facing.size() && pick > facing[e].len) {
      pick -= facing[e].len;
      ++e;
    }
    const double t = facing[e].len > 0.0 ? pick / facing[e].len : 0.5;
    Vec2 pos = facing[e].a + (facing[e].b - facing[e].a) * t;
    pos.x += rng.normal(0.0, cfg.position_noise);
    pos.y += rng.normal(0.0, cfg.position_noise);
    const double range = pos.norm();
    const double vr_true = range > 1e-9 ? velocity.dot(pos * (1.0 / range)) : 0.0;
    SceneRow row;
    row.position = pos;
    row.vr = vr_true + rng.normal(0.0, cfg.vr_noise);
    row.rcs = rng.uniform(cfg.car_rcs_min, cfg.car_rcs_max);
    row.dt = rng.uniform(0.0, cfg.dt_max);
    rows.push_back(row);
  }
  return rows;
}

template <typename T>
SyntheticScene<T> generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  SyntheticScene<T> scene;
  scene.seed = seed;

  std::vector<SceneRow> rows;
  const int n_cars = static_cast<int>(rng.uniform_int(cfg.cars_min, cfg.cars_max));
  for (int c = 0; c < n_cars; ++c) {
    OrientedBox box;
    // rejection-sample centers so cars stay resolvable; bounded attempts
    // keep generation total when the area is crowded
    for (int attempt = 0; attempt < 50; ++attempt) {
      box.cx = rng.uniform(cfg.x_min + cfg.spawn_margin, cfg.x_max - cfg.spawn_margin);
      box.cy = rng.uniform(cfg.y_min + cfg.spawn_margin, cfg.y_max - cfg.spawn_margin);
      bool clear = true;
      for (const OrientedBox& other : scene.ground_truth) {
        clear &= (other.center() - box.center()).norm() >= cfg.min_car_separation;
      }
      if (clear) break;
    }
    box.width = rng.uniform(cfg.car_width_min, cfg.car_width_max);
    box.length = rng.uniform(cfg.car_length_min, cfg.car_length_max);
    box.yaw = normalize_yaw(rng.uniform(-M_PI, M_PI));
    const bool stationary = rng.uniform() < cfg.stationary_fraction;
    const double speed = stationary ? 0.0 : rng.uniform(0.0, cfg.speed_max);
    const Vec2 velocity{speed * std::cos(box.yaw), speed * std::sin(box.yaw)};
    const int n_points =
        static_cast<int>(rng.uniform_int(cfg.reflections_min, cfg.reflections_max));
    auto car_rows = sample_car_reflections(box, velocity, n_points, cfg, rng);
    rows.insert(rows.end(), car_rows.begin(), car_rows.end());
    scene.ground_truth.push_back(box);
  }

  const int n_clutter = rng.poisson(cfg.clutter_mean);
  for (int i = 0; i < n_clutter; ++i) {
    SceneRow row;
    row.position = {rng.uniform(cfg.x_min, cfg.x_max), rng.uniform(cfg.y_min, cfg.y_max)};
    row.vr = rng.uniform(-cfg.speed_max, cfg.speed_max);
    row.rcs = rng.uniform(cfg.clutter_rcs_min, cfg.clutter_rcs_max);
    row.dt = rng.uniform(0.0, cfg.dt_max);
    rows.push_back(row);
  }

  scene.cloud.positions.reserve(rows.size());
  scene.cloud.features = Tensor<T>({rows.size(), kSceneFeatureDim});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    scene.cloud.positions.push_back(rows[i].position);
    T* fr = scene.cloud.features.row(i);
    fr[0] = static_cast<T>(rows[i].position.x);
    fr[1] = static_cast<T>(rows[i].position.y);
    fr[2] = static_cast<T>(rows[i].vr);
    fr[3] = static_cast<T>(rows[i].rcs);
    fr[4] = static_cast<T>(rows[i].dt);
  }
  return scene;
}

}  // namespace kpbev
