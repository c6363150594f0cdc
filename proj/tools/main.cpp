// Command-line front end: grid rendering, gradient checks, benchmarks,
// a desk-scale training demo, and detection evaluation.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "kpbev/gradcheck_suite.hpp"
#include "kpbev/kpbev.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double p95(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[static_cast<std::size_t>(0.95 * (v.size() - 1))];
}

json eval_to_json(const kpbev::EvalResult& r) {
  json ap = json::object();
  for (std::size_t i = 0; i < r.thresholds.size(); ++i) {
    ap[kpbev::format_double(r.thresholds[i])] = r.ap[i];
  }
  return json{{"ap", ap}, {"map", r.map}, {"no_ground_truth", r.no_ground_truth}};
}

kpbev::RunConfig resolve_config(const std::string& config_path) {
  if (config_path.empty()) {
    kpbev::RunConfig cfg;
    cfg.validate();
    return cfg;
  }
  return kpbev::load_config(config_path);
}

// ---------------------------------------------------------------------------

int cmd_render(const std::string& input, const std::string& config_path,
               const std::string& out_dir) {
  const kpbev::RunConfig cfg = resolve_config(config_path);
  const auto cloud = kpbev::load_point_cloud_csv(input).cast<float>();
  fs::create_directories(out_dir);

  kpbev::Pipeline<float> pipeline;
  pipeline.init(cloud.feature_dim(), cfg.arch_config(), cfg.grid(), cfg.seed);
  pipeline.set_norm_mode(kpbev::NormMode::kEval);

  const auto start = Clock::now();
  typename kpbev::Pipeline<float>::Ctx ctx;
  const auto maps = pipeline.render(cloud, ctx);
  const double wall_ms = ms_since(start);

  json scales = json::array();
  for (std::size_t i = 0; i < maps.size(); ++i) {
    kpbev::write_fmap(fs::path(out_dir) / ("scale" + std::to_string(i) + ".fmap"),
                      maps[i]);
    const auto anchors = kpbev::generate_anchors(cloud, maps[i].grid);
    const std::size_t anchor_mode = kpbev::convolution_count(anchors.size());
    const std::size_t point_mode = kpbev::convolution_count(cloud.size());
    scales.push_back(
        {{"scale", maps[i].grid.cell_size},
         {"n_anchors", anchors.size()},
         {"anchor_mode_convolutions", anchor_mode},
         {"point_mode_convolutions", point_mode},
         {"reduction_percent",
          point_mode == 0
              ? 0.0
              : 100.0 * (1.0 - double(anchor_mode) / double(point_mode))}});
  }
  const json stats{
      {"n_in", cloud.size()},
      {"preprocessing_convolutions",
       cfg.arch_config().preprocessing ? 3 * cloud.size() : 0},
      {"scales", scales},
      {"wall_time_ms", wall_ms}};
  std::ofstream stats_out(fs::path(out_dir) / "render_stats.json");
  stats_out << stats.dump(2) << "\n";
  std::cout << stats.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(const std::string& scope, std::uint64_t seed) {
  const auto results = kpbev::run_gradcheck_suite(scope, seed);
  double worst = 0.0;
  std::printf("%-12s %-34s %12s %8s\n", "scope", "op", "max rel err", "status");
  for (const auto& r : results) {
    const double err = r.report.max_rel_err();
    worst = std::max(worst, err);
    std::printf("%-12s %-34s %12.3e %8s\n", r.scope.c_str(), r.op.c_str(), err,
                err <= 1e-4 ? "ok" : "FAIL");
  }
  std::printf("worst: %.3e (tolerance 1e-4)\n", worst);
  return worst <= 1e-4 ? 0 : 2;
}

// ---------------------------------------------------------------------------

int cmd_bench(int n_points, const std::string& encoder, bool multiscale, int repeats,
              std::uint64_t seed) {
  kpbev::RunConfig cfg;
  cfg.arch = encoder == "pillars" ? "pillars" : "kpbev";
  cfg.multiscale = multiscale;
  cfg.seed = seed;
  cfg.validate();

  kpbev::Rng rng(kpbev::derive_seed(seed, "bench"));
  kpbev::PointCloud<float> cloud;
  cloud.positions.resize(n_points);
  cloud.features = kpbev::Tensor<float>({std::size_t(n_points), kpbev::kSceneFeatureDim});
  for (int i = 0; i < n_points; ++i) {
    const double x = rng.uniform(cfg.x_min, cfg.x_max);
    const double y = rng.uniform(cfg.y_min, cfg.y_max);
    cloud.positions[i] = {x, y};
    float* fr = cloud.features.row(i);
    fr[0] = float(x);
    fr[1] = float(y);
    fr[2] = float(rng.uniform(-12, 12));
    fr[3] = float(rng.uniform(-5, 25));
    fr[4] = float(rng.uniform(0, 0.25));
  }

  kpbev::Pipeline<float> pipeline;
  pipeline.init(cloud.feature_dim(), cfg.arch_config(), cfg.grid(), seed);
  pipeline.set_norm_mode(kpbev::NormMode::kEval);

  std::vector<double> neighbor_ms, render_ms, total_ms;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = Clock::now();
    const auto anchors = kpbev::generate_anchors(cloud, cfg.grid());
    const auto nl = kpbev::radius_neighbors(
        std::span<const kpbev::Vec2>(anchors.positions),
        std::span<const kpbev::Vec2>(cloud.positions), 2.5 * cfg.rho_k0);
    neighbor_ms.push_back(ms_since(t0));
    const auto t1 = Clock::now();
    typename kpbev::Pipeline<float>::Ctx ctx;
    const auto maps = pipeline.render(cloud, ctx);
    render_ms.push_back(ms_since(t1));
    total_ms.push_back(ms_since(t0));
    (void)nl;
    (void)maps;
  }

  const auto anchors = kpbev::generate_anchors(cloud, cfg.grid());
  const std::size_t anchor_mode = kpbev::convolution_count(anchors.size());
  const std::size_t point_mode = kpbev::convolution_count(cloud.size());
  const json out{
      {"points", n_points},
      {"encoder", cfg.arch},
      {"multiscale", multiscale},
      {"repeats", repeats},
      {"timings_ms",
       {{"neighbor_search", {{"median", median(neighbor_ms)}, {"p95", p95(neighbor_ms)}}},
        {"render", {{"median", median(render_ms)}, {"p95", p95(render_ms)}}},
        {"total", {{"median", median(total_ms)}, {"p95", p95(total_ms)}}}}},
      {"convolutions",
       {{"anchor_mode", anchor_mode},
        {"point_mode", point_mode},
        {"reduction_percent",
         100.0 * (1.0 - double(anchor_mode) / double(point_mode))}}}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_train_demo(const std::string& arch, bool multiscale, std::uint64_t seed,
                   bool seed_given, const std::string& config_path,
                   const std::string& out_dir, int threads) {
  kpbev::RunConfig cfg = resolve_config(config_path);
  cfg.arch = arch;
  if (multiscale) cfg.multiscale = true;
  if (seed_given) cfg.seed = seed;
  cfg.validate();
  fs::create_directories(out_dir);

  kpbev::Pipeline<float> model;
  model.init(kpbev::kSceneFeatureDim, cfg.arch_config(), cfg.grid(), cfg.seed);

  std::ofstream metrics(fs::path(out_dir) / "metrics.jsonl");
  const auto on_epoch = [&metrics](const kpbev::EpochLog& e) {
    const json line{{"epoch", e.epoch}, {"loss", e.loss}, {"ap4", e.ap4}, {"map", e.map}};
    metrics << line.dump() << "\n";
    metrics.flush();
    std::cout << line.dump() << "\n";
  };
  const auto result =
      kpbev::train(model, cfg.scene_config(), cfg.train_config(threads), on_epoch);

  std::ofstream final_out(fs::path(out_dir) / "final_eval.json");
  final_out << eval_to_json(result.final_eval).dump(2) << "\n";
  kpbev::save_boxes_csv(fs::path(out_dir) / "predictions.csv", result.predictions);
  kpbev::save_boxes_csv(fs::path(out_dir) / "ground_truth.csv", result.ground_truth);
  std::ofstream cfg_out(fs::path(out_dir) / "config.json");
  cfg_out << kpbev::to_json(cfg).dump(2) << "\n";
  std::cout << eval_to_json(result.final_eval).dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_eval(const std::string& pred_path, const std::string& gt_path) {
  const auto preds = kpbev::load_boxes_csv(pred_path);
  const auto gts = kpbev::load_boxes_csv(gt_path);
  const auto result = kpbev::evaluate(preds, gts);
  json out = eval_to_json(result);
  out["predictions"] = preds.size();
  out["ground_truths"] = gts.size();
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kernel-point BEV grid rendering and radar detection toolkit"};
  app.require_subcommand(1);

  int threads = 0;
  app.add_option("--threads", threads, "worker threads (0 = hardware concurrency)");

  auto* render = app.add_subcommand("render", "render a point cloud CSV to FMAP files");
  std::string render_input, render_config, render_out;
  render->add_option("--input", render_input, "point cloud CSV")->required();
  render->add_option("--config", render_config, "run config JSON");
  render->add_option("--out", render_out, "output directory")->required();

  auto* gradcheck_cmd =
      app.add_subcommand("gradcheck", "finite-difference checks of all backward passes");
  std::string scope = "all";
  std::uint64_t gc_seed = 42;
  gradcheck_cmd->add_option("--scope", scope,
                            "all|geom|kpconv|encoders|multiscale|detect");
  gradcheck_cmd->add_option("--seed", gc_seed, "fixture seed");

  auto* bench = app.add_subcommand("bench", "rendering micro-benchmark");
  int bench_points = 2000, bench_repeat = 5;
  std::string bench_encoder = "kpbev";
  bool bench_multiscale = false;
  std::uint64_t bench_seed = 42;
  bench->add_option("--points", bench_points, "synthetic point count");
  bench->add_option("--encoder", bench_encoder, "pillars|kpbev");
  bench->add_flag("--multiscale", bench_multiscale, "render at all four scales");
  bench->add_option("--repeat", bench_repeat, "repetitions");
  bench->add_option("--seed", bench_seed, "rng seed");

  auto* train_demo = app.add_subcommand(
      "train-demo", "train a composition on synthetic scenes and evaluate it");
  std::string td_arch, td_config, td_out;
  bool td_multiscale = false;
  std::uint64_t td_seed = 0;
  train_demo->add_option("--arch", td_arch, "pillars|kppillars|kpbev|kppillarsbev")
      ->required();
  train_demo->add_flag("--multiscale", td_multiscale, "multi-scale grid rendering");
  auto* td_seed_opt = train_demo->add_option("--seed", td_seed, "run seed");
  train_demo->add_option("--config", td_config, "run config JSON");
  train_demo->add_option("--out", td_out, "output directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "average precision from CSV files");
  std::string eval_pred, eval_gt;
  eval_cmd->add_option("--pred", eval_pred, "predictions CSV")->required();
  eval_cmd->add_option("--gt", eval_gt, "ground-truth CSV")->required();

  auto* print_cfg =
      app.add_subcommand("print-default-config", "write the default config JSON to stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*render) return cmd_render(render_input, render_config, render_out);
    if (*gradcheck_cmd) return cmd_gradcheck(scope, gc_seed);
    if (*bench) {
      return cmd_bench(bench_points, bench_encoder, bench_multiscale, bench_repeat,
                       bench_seed);
    }
    if (*train_demo) {
      return cmd_train_demo(td_arch, td_multiscale, td_seed, td_seed_opt->count() > 0,
                            td_config, td_out, threads);
    }
    if (*eval_cmd) return cmd_eval(eval_pred, eval_gt);
    if (*print_cfg) {
      kpbev::RunConfig cfg;
      std::cout << kpbev::to_json(cfg).dump(2) << "\n";
      return 0;
    }
  } catch (const kpbev::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
