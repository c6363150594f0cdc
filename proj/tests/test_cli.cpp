#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "kpbev/config.hpp"
#include "kpbev/io.hpp"

using namespace kpbev;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("kpbev_cli_" + std::to_string(Catch::rngSeed()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int run_cli(const std::string& args, const fs::path& stdout_file = {}) {
  std::string cmd = std::string(KPBEV_CLI_PATH) + " " + args;
  if (!stdout_file.empty()) cmd += " > " + stdout_file.string();
  cmd += " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_tiny_config(const fs::path& p, bool multiscale) {
  RunConfig cfg;
  cfg.x_min = cfg.y_min = -8.0;
  cfg.x_max = cfg.y_max = 8.0;
  cfg.arch = "kpbev";
  cfg.multiscale = multiscale;
  cfg.f_out = 8;
  cfg.kernel_points = 5;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.train_scenes = 8;
  cfg.eval_scenes = 4;
  cfg.cars_min = 1;
  cfg.cars_max = 3;
  cfg.clutter_mean = 10.0;
  cfg.validate();
  std::ofstream(p) << to_json(cfg).dump(2) << "\n";
}

json strip_timing(json j) {
  j.erase("wall_time_ms");
  return j;
}

}  // namespace

TEST_CASE("print-default-config emits a loadable config", "[cli]") {
  TempDir dir;
  const fs::path out = dir.path / "cfg.json";
  REQUIRE(run_cli("print-default-config", out) == 0);
  const RunConfig cfg = load_config(out);
  CHECK(cfg.f_out == 64);
  CHECK(cfg.rho_k0 == 0.6);
  CHECK(cfg.rho_k0_pre == 1.0);
}

TEST_CASE("render: single point occupies one cell per scale", "[cli]") {
  TempDir dir;
  const fs::path cloud_file = dir.path / "cloud.csv";
  {
    PointCloud<double> pc;
    pc.positions = {{1.3, -2.7}};
    pc.features = Tensor<double>({1, 5}, {1.3, -2.7, 4.0, 12.0, 0.1});
    save_point_cloud_csv(cloud_file, pc);
  }
  const fs::path cfg_file = dir.path / "cfg.json";
  write_tiny_config(cfg_file, /*multiscale=*/true);
  const fs::path out1 = dir.path / "out1";
  REQUIRE(run_cli("render --input " + cloud_file.string() + " --config " +
                      cfg_file.string() + " --out " + out1.string(),
                  dir.path / "render.log") == 0);

  for (int s = 0; s < 4; ++s) {
    const auto map = read_fmap(out1 / ("scale" + std::to_string(s) + ".fmap"));
    std::size_t nonzero_cells = 0;
    for (std::size_t iy = 0; iy < map.data.dim(0); ++iy) {
      for (std::size_t ix = 0; ix < map.data.dim(1); ++ix) {
        double mag = 0;
        for (std::size_t c = 0; c < map.data.dim(2); ++c)
          mag += std::abs(map.data(iy, ix, c));
        if (mag > 0) ++nonzero_cells;
      }
    }
    CHECK(nonzero_cells == 1);
  }

  SECTION("stats report the anchor-mode convolution count") {
    const json stats = json::parse(slurp(out1 / "render_stats.json"));
    CHECK(stats.at("n_in") == 1);
    for (const auto& scale : stats.at("scales")) {
      CHECK(scale.at("anchor_mode_convolutions") == scale.at("n_anchors"));
    }
  }

  SECTION("rerun is byte-identical apart from timing") {
    const fs::path out2 = dir.path / "out2";
    REQUIRE(run_cli("render --input " + cloud_file.string() + " --config " +
                        cfg_file.string() + " --out " + out2.string(),
                    dir.path / "render2.log") == 0);
    for (int s = 0; s < 4; ++s) {
      const std::string name = "scale" + std::to_string(s) + ".fmap";
      CHECK(slurp(out1 / name) == slurp(out2 / name));
    }
    CHECK(strip_timing(json::parse(slurp(out1 / "render_stats.json"))) ==
          strip_timing(json::parse(slurp(out2 / "render_stats.json"))));
  }
}

TEST_CASE("render rejects invalid configuration with exit code 1", "[cli]") {
  TempDir dir;
  const fs::path cloud_file = dir.path / "cloud.csv";
  {
    PointCloud<double> pc;
    pc.positions = {{0.0, 0.0}};
    pc.features = Tensor<double>({1, 5});
    save_point_cloud_csv(cloud_file, pc);
  }
  const fs::path cfg_file = dir.path / "bad.json";
  {
    RunConfig cfg;
    json j = to_json(cfg);
    j["grid"]["x_max"] = 21.0;  // 82 cells, violates the 16*s0 rule
    std::ofstream(cfg_file) << j.dump() << "\n";
  }
  CHECK(run_cli("render --input " + cloud_file.string() + " --config " +
                cfg_file.string() + " --out " + (dir.path / "out").string()) == 1);
  CHECK(run_cli("render --input " + (dir.path / "missing.csv").string() + " --out " +
                (dir.path / "out").string()) == 1);
}

TEST_CASE("eval reproduces the hand-derived mAP fixture", "[cli]") {
  TempDir dir;
  // single prediction 3 m from the single ground truth: AP (0,0,0,1), mAP 0.25
  std::vector<OrientedBox> gts(1), preds(1);
  gts[0].cx = 0.0;
  gts[0].cy = 0.0;
  preds[0].cx = 3.0;
  preds[0].cy = 0.0;
  preds[0].score = 0.8;
  save_boxes_csv(dir.path / "gt.csv", gts);
  save_boxes_csv(dir.path / "pred.csv", preds);

  const fs::path out = dir.path / "eval.json";
  REQUIRE(run_cli("eval --pred " + (dir.path / "pred.csv").string() + " --gt " +
                      (dir.path / "gt.csv").string(),
                  out) == 0);
  const json j = json::parse(slurp(out));
  CHECK(j.at("map").get<double>() == Catch::Approx(0.25));
  CHECK(j.at("ap").at("4").get<double>() == Catch::Approx(1.0));
  CHECK(j.at("ap").at("0.5").get<double>() == 0.0);
}

TEST_CASE("bench smoke run emits sane statistics", "[cli]") {
  TempDir dir;
  const fs::path out = dir.path / "bench.json";
  REQUIRE(run_cli("bench --points 500 --encoder kpbev --repeat 1", out) == 0);
  const json j = json::parse(slurp(out));
  CHECK(j.at("points") == 500);
  const auto conv = j.at("convolutions");
  CHECK(conv.at("anchor_mode").get<std::size_t>() <
        conv.at("point_mode").get<std::size_t>());
  CHECK(conv.at("reduction_percent").get<double>() > 0.0);
}

TEST_CASE("train-demo writes deterministic artifacts", "[cli]") {
  TempDir dir;
  const fs::path cfg_file = dir.path / "cfg.json";
  write_tiny_config(cfg_file, /*multiscale=*/false);

  const auto run_once = [&](const std::string& out_name) {
    const fs::path out = dir.path / out_name;
    REQUIRE(run_cli("train-demo --arch kpbev --seed 5 --config " + cfg_file.string() +
                        " --out " + out.string(),
                    dir.path / (out_name + ".log")) == 0);
    return out;
  };
  const fs::path a = run_once("run_a");
  const fs::path b = run_once("run_b");

  SECTION("metric log has one line per epoch with the expected keys") {
    std::ifstream in(a / "metrics.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
      const json j = json::parse(line);
      CHECK(j.at("epoch") == lines);
      CHECK(j.contains("loss"));
      CHECK(j.contains("ap4"));
      CHECK(j.contains("map"));
      ++lines;
    }
    CHECK(lines == 2);
  }

  SECTION("reruns are byte-identical") {
    for (const char* name :
         {"metrics.jsonl", "final_eval.json", "predictions.csv", "ground_truth.csv",
          "config.json"}) {
      CHECK(slurp(a / name) == slurp(b / name));
    }
  }
}

TEST_CASE("gradcheck subcommand exits cleanly on a fast scope", "[cli]") {
  TempDir dir;
  const fs::path out = dir.path / "gc.txt";
  CHECK(run_cli("gradcheck --scope geom --seed 7", out) == 0);
  CHECK(slurp(out).find("ok") != std::string::npos);
  CHECK(run_cli("gradcheck --scope bogus") == 1);
}
