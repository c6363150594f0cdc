#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "kpbev/io.hpp"
#include "kpbev/scene.hpp"
#include "kpbev/train.hpp"

namespace kpbev {

inline constexpr int kConfigVersion = 1;

/// Versioned JSON run configuration shared by the CLI commands.
struct RunConfig {
  // grid
  double x_min = -20.0, y_min = -20.0, x_max = 20.0, y_max = 20.0;
  double cell_size = 0.5;
  // architecture
  std::string arch = "kppillarsbev";
  bool multiscale = false;
  bool adaptive_radius = true;
  std::size_t f_out = 64;
  int kernel_points = 9;
  double rho_k0 = 0.6;
  double rho_k0_pre = 1.0;
  // training
  int epochs = 30;
  int batch_size = 8;
  double learning_rate = 1e-3;
  int train_scenes = 200;
  int eval_scenes = 50;
  double score_threshold = 0.02;
  double nms_iou = 0.15;
  double box_loss_weight = 1.0;
  // scene generation
  int cars_min = 2, cars_max = 6;
  double clutter_mean = 40.0;
  double position_noise = 0.1;
  double stationary_fraction = 0.3;
  double speed_max = 12.0;
  std::uint64_t seed = 42;

  GridSpec grid() const {
    return GridSpec::create(x_min, y_min, x_max, y_max, cell_size);
  }

  ArchConfig arch_config() const {
    ArchConfig a = arch_from_name(arch);
    a.multiscale = multiscale;
    a.adaptive_radius = adaptive_radius;
    a.f_out = f_out;
    a.kernel_points = kernel_points;
    a.rho_k0 = rho_k0;
    a.rho_k0_pre = rho_k0_pre;
    return a;
  }

  TrainConfig train_config(int threads) const {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.learning_rate = learning_rate;
    t.train_scenes = train_scenes;
    t.eval_scenes = eval_scenes;
    t.score_threshold = score_threshold;
    t.nms_iou = nms_iou;
    t.box_loss_weight = box_loss_weight;
    t.threads = threads;
    t.seed = seed;
    return t;
  }

  SceneConfig scene_config() const {
    SceneConfig s;
    s.x_min = x_min;
    s.y_min = y_min;
    s.x_max = x_max;
    s.y_max = y_max;
    s.cars_min = cars_min;
    s.cars_max = cars_max;
    s.clutter_mean = clutter_mean;
    s.position_noise = position_noise;
    s.stationary_fraction = stationary_fraction;
    s.speed_max = speed_max;
    return s;
  }

  /// Rejects impossible grids, scales, and hyperparameters up front.
  void validate() const {
    const GridSpec g = grid();  // throws on non-integral extent
    if (g.width % 16 != 0 || g.height % 16 != 0) {
      throw ContractError(
          "grid extent must be divisible by 16*s0 so all backbone scales "
          "align (got " +
          std::to_string(g.width) + "x" + std::to_string(g.height) +
          " cells at s0=" + format_double(cell_size) + ")");
    }
    arch_from_name(arch);
    if (f_out < 1) throw ContractError("f_out must be >= 1");
    if (kernel_points < 1) throw ContractError("kernel_points must be >= 1");
    if (!(rho_k0 > 0.0) || !(rho_k0_pre > 0.0)) {
      throw ContractError("kernel influence radii must be > 0");
    }
    if (epochs < 0 || batch_size < 1 || train_scenes < 1 || eval_scenes < 1) {
      throw ContractError("training sizes must be positive (epochs may be 0)");
    }
    if (!(learning_rate > 0.0)) throw ContractError("learning_rate must be > 0");
    if (score_threshold < 0.0 || score_threshold > 1.0) {
      throw ContractError("score_threshold must be in [0, 1]");
    }
    if (nms_iou < 0.0 || nms_iou > 1.0) throw ContractError("nms_iou must be in [0, 1]");
    if (cars_min < 0 || cars_max < cars_min) {
      throw ContractError("car count range is invalid");
    }
    if (clutter_mean < 0.0) throw ContractError("clutter_mean must be >= 0");
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  return nlohmann::json{
      {"version", kConfigVersion},
      {"grid",
       {{"x_min", c.x_min},
        {"y_min", c.y_min},
        {"x_max", c.x_max},
        {"y_max", c.y_max},
        {"cell_size", c.cell_size}}},
      {"encoder",
       {{"arch", c.arch},
        {"multiscale", c.multiscale},
        {"adaptive_radius", c.adaptive_radius},
        {"f_out", c.f_out},
        {"kernel_points", c.kernel_points},
        {"rho_k0", c.rho_k0},
        {"rho_k0_pre", c.rho_k0_pre}}},
      {"training",
       {{"epochs", c.epochs},
        {"batch_size", c.batch_size},
        {"learning_rate", c.learning_rate},
        {"train_scenes", c.train_scenes},
        {"eval_scenes", c.eval_scenes},
        {"score_threshold", c.score_threshold},
        {"nms_iou", c.nms_iou},
        {"box_loss_weight", c.box_loss_weight}}},
      {"scene",
       {{"cars_min", c.cars_min},
        {"cars_max", c.cars_max},
        {"clutter_mean", c.clutter_mean},
        {"position_noise", c.position_noise},
        {"stationary_fraction", c.stationary_fraction},
        {"speed_max", c.speed_max}}},
      {"seed", c.seed}};
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    if (j.at("version").get<int>() != kConfigVersion) {
      throw ContractError("unsupported config version");
    }
    const auto grid = j.at("grid");
    c.x_min = grid.at("x_min").get<double>();
    c.y_min = grid.at("y_min").get<double>();
    c.x_max = grid.at("x_max").get<double>();
    c.y_max = grid.at("y_max").get<double>();
    c.cell_size = grid.at("cell_size").get<double>();
    const auto enc = j.at("encoder");
    c.arch = enc.at("arch").get<std::string>();
    c.multiscale = enc.at("multiscale").get<bool>();
    c.adaptive_radius = enc.value("adaptive_radius", true);
    c.f_out = enc.at("f_out").get<std::size_t>();
    c.kernel_points = enc.at("kernel_points").get<int>();
    c.rho_k0 = enc.at("rho_k0").get<double>();
    c.rho_k0_pre = enc.at("rho_k0_pre").get<double>();
    const auto tr = j.at("training");
    c.epochs = tr.at("epochs").get<int>();
    c.batch_size = tr.at("batch_size").get<int>();
    c.learning_rate = tr.at("learning_rate").get<double>();
    c.train_scenes = tr.at("train_scenes").get<int>();
    c.eval_scenes = tr.at("eval_scenes").get<int>();
    c.score_threshold = tr.at("score_threshold").get<double>();
    c.nms_iou = tr.at("nms_iou").get<double>();
    c.box_loss_weight = tr.value("box_loss_weight", 1.0);
    const auto sc = j.at("scene");
    c.cars_min = sc.at("cars_min").get<int>();
    c.cars_max = sc.at("cars_max").get<int>();
    c.clutter_mean = sc.at("clutter_mean").get<double>();
    c.position_noise = sc.value("position_noise", 0.1);
    c.stationary_fraction = sc.value("stationary_fraction", 0.3);
    c.speed_max = sc.value("speed_max", 12.0);
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("invalid config: ") + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ContractError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace kpbev
