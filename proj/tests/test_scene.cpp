#include <catch2/catch_amalgamated.hpp>

#include "kpbev/scene.hpp"

using namespace kpbev;

TEST_CASE("scene generation is deterministic per seed", "[scene]") {
  SceneConfig cfg;
  const auto a = generate_scene<double>(cfg, 1234);
  const auto b = generate_scene<double>(cfg, 1234);
  REQUIRE(a.cloud.size() == b.cloud.size());
  for (std::size_t i = 0; i < a.cloud.size(); ++i) {
    CHECK(a.cloud.positions[i].x == b.cloud.positions[i].x);
    CHECK(a.cloud.positions[i].y == b.cloud.positions[i].y);
  }
  CHECK(a.cloud.features.raw() == b.cloud.features.raw());
  REQUIRE(a.ground_truth.size() == b.ground_truth.size());
  for (std::size_t i = 0; i < a.ground_truth.size(); ++i) {
    CHECK(a.ground_truth[i].cx == b.ground_truth[i].cx);
    CHECK(a.ground_truth[i].yaw == b.ground_truth[i].yaw);
  }

  const auto c = generate_scene<double>(cfg, 1235);
  CHECK(a.cloud.features.raw() != c.cloud.features.raw());
}

TEST_CASE("every car has at least one reflection", "[scene]") {
  SceneConfig cfg;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto scene = generate_scene<double>(cfg, seed);
    CHECK(scene.ground_truth.size() >= std::size_t(cfg.cars_min));
    CHECK(scene.ground_truth.size() <= std::size_t(cfg.cars_max));
    for (const OrientedBox& car : scene.ground_truth) {
      int near = 0;
      const double reach = 0.5 * std::hypot(car.length, car.width) + 1.0;
      for (const Vec2& p : scene.cloud.positions) {
        if ((p - car.center()).norm() <= reach) ++near;
      }
      CHECK(near >= 1);
    }
  }
}

TEST_CASE("stationary cars reflect with zero radial velocity", "[scene]") {
  SceneConfig cfg;
  cfg.vr_noise = 0.0;
  Rng rng(77);
  OrientedBox car;
  car.cx = 8.0;
  car.cy = -3.0;
  car.width = 1.8;
  car.length = 4.5;
  car.yaw = 0.8;
  const auto rows = sample_car_reflections(car, Vec2{0.0, 0.0}, 8, cfg, rng);
  REQUIRE(rows.size() == 8);
  for (const auto& r : rows) CHECK(r.vr == 0.0);
}

TEST_CASE("radial approach shows up as negative radial velocity", "[scene]") {
  SceneConfig cfg;
  cfg.vr_noise = 0.0;
  cfg.position_noise = 0.0;
  Rng rng(78);
  OrientedBox car;
  car.cx = 10.0;
  car.cy = 0.0;
  car.width = 1.8;
  car.length = 4.5;
  car.yaw = M_PI;  // heading straight at the sensor
  const Vec2 velocity{-10.0, 0.0};
  const auto rows = sample_car_reflections(car, velocity, 10, cfg, rng);
  for (const auto& r : rows) {
    CHECK(r.vr == Catch::Approx(-10.0).margin(0.7));  // small tangential component
  }
}

TEST_CASE("reflections sit on sensor-facing edges", "[scene]") {
  SceneConfig cfg;
  cfg.position_noise = 0.0;
  Rng rng(79);
  OrientedBox car;
  car.cx = 12.0;
  car.cy = 5.0;
  car.width = 2.0;
  car.length = 4.0;
  car.yaw = 0.3;
  const auto rows = sample_car_reflections(car, Vec2{0, 0}, 50, cfg, rng);
  for (const auto& r : rows) {
    // every sample lies on the box outline...
    const auto corners = car.corners();
    double min_edge_dist = 1e9;
    for (std::size_t i = 0; i < 4; ++i) {
      const Vec2 a = corners[i], b = corners[(i + 1) % 4];
      const Vec2 d = b - a;
      const double t = std::clamp((r.position - a).dot(d) / d.norm_sq(), 0.0, 1.0);
      min_edge_dist = std::min(min_edge_dist, (r.position - (a + d * t)).norm());
    }
    CHECK(min_edge_dist <= 1e-9);
    // ...and nearer to the sensor than the far corner
    double max_corner_range = 0.0;
    for (const Vec2& c : corners) max_corner_range = std::max(max_corner_range, c.norm());
    CHECK(r.position.norm() <= max_corner_range + 1e-9);
  }
}

TEST_CASE("feature rows carry position, vr, rcs, dt", "[scene]") {
  SceneConfig cfg;
  const auto scene = generate_scene<double>(cfg, 99);
  REQUIRE(scene.cloud.feature_dim() == kSceneFeatureDim);
  for (std::size_t i = 0; i < scene.cloud.size(); ++i) {
    CHECK(scene.cloud.features(i, 0) == scene.cloud.positions[i].x);
    CHECK(scene.cloud.features(i, 1) == scene.cloud.positions[i].y);
    CHECK(scene.cloud.features(i, 4) >= 0.0);
    CHECK(scene.cloud.features(i, 4) <= cfg.dt_max);
  }
  scene.cloud.validate();
}
