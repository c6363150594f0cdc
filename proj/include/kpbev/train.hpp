#pragma once

#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "kpbev/detector.hpp"
#include "kpbev/eval.hpp"
#include "kpbev/scene.hpp"

namespace kpbev {

/// Numerical failure (divergence, failed gradient check).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Strided index-parallel loop. Work items must be independent; any ordering
/// requirements belong to the caller (e.g. reduce per-index results in index
/// order afterwards).
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min<int>(threads, static_cast<int>(n)));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr err;
  std::mutex err_mu;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = static_cast<std::size_t>(t); i < n;
             i += static_cast<std::size_t>(threads)) {
          fn(i);
        }
      } catch (...) {
        std::scoped_lock lock(err_mu);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

template <typename T>
struct Adam {
  double learning_rate = 1e-3;
  double beta1 = 0.9, beta2 = 0.999;
  double epsilon = 1e-8;

  std::vector<Tensor<T>> m, v;
  long step_count = 0;

  void step(const std::vector<Param<T>*>& params) {
    if (m.empty()) {
      for (const Param<T>* p : params) {
        m.emplace_back(p->value.shape());
        v.emplace_back(p->value.shape());
      }
    }
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, step_count);
    const double bc2 = 1.0 - std::pow(beta2, step_count);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      Param<T>& p = *params[pi];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = static_cast<double>(p.grad[i]);
        const double mi = beta1 * m[pi][i] + (1.0 - beta1) * g;
        const double vi = beta2 * v[pi][i] + (1.0 - beta2) * g * g;
        m[pi][i] = static_cast<T>(mi);
        v[pi][i] = static_cast<T>(vi);
        p.value[i] -= static_cast<T>(learning_rate * (mi / bc1) /
                                     (std::sqrt(vi / bc2) + epsilon));
      }
    }
  }
};

// ---------------------------------------------------------------------------
// the four architecture compositions
// ---------------------------------------------------------------------------

struct ArchConfig {
  bool preprocessing = false;           // three-layer KPConv point preprocessing
  EncoderKind encoder = EncoderKind::kKpbev;
  bool multiscale = false;
  bool adaptive_radius = true;
  bool use_batch_norm = true;
  std::size_t f_out = 64;
  int kernel_points = 9;
  double rho_k0 = 0.6;      // grid-encoder kernel influence radius at s0
  double rho_k0_pre = 1.0;  // preprocessing kernel influence radius
};

/// pillars / kppillars / kpbev / kppillarsbev.
inline ArchConfig arch_from_name(const std::string& name) {
  ArchConfig a;
  if (name == "pillars") {
    a.preprocessing = false;
    a.encoder = EncoderKind::kPillars;
  } else if (name == "kppillars") {
    a.preprocessing = true;
    a.encoder = EncoderKind::kPillars;
  } else if (name == "kpbev") {
    a.preprocessing = false;
    a.encoder = EncoderKind::kKpbev;
  } else if (name == "kppillarsbev") {
    a.preprocessing = true;
    a.encoder = EncoderKind::kKpbev;
  } else {
    throw ContractError("unknown architecture '" + name +
                        "' (expected pillars|kppillars|kpbev|kppillarsbev)");
  }
  return a;
}

/// Full differentiable pipeline: optional preprocessing, single- or
/// multi-scale grid rendering, miniature backbone, detection head. Owns all
/// parameters; copies are deep and independent, which the trainer uses for
/// race-free per-scene gradient accumulation.
template <typename T>
struct Pipeline {
  ArchConfig arch;
  GridSpec grid0;
  std::optional<ScaleSet> scales;
  std::optional<PreprocessStack<T>> pre;
  std::variant<std::monostate, PillarsEncoder<T>, KpbevEncoder<T>,
               MultiScaleEncoder<T>>
      encoder;
  MiniDetector<T> detector;

  struct Ctx {
    typename PreprocessStack<T>::Ctx pre_ctx;
    PointCloud<T> encoder_input;
    typename PillarsEncoder<T>::Ctx pillars_ctx;
    typename KpbevEncoder<T>::Ctx kpbev_ctx;
    typename MultiScaleEncoder<T>::Ctx ms_ctx;
    std::vector<FeatureMap<T>> maps;
    typename MiniDetector<T>::Ctx det_ctx;
  };

  void init(std::size_t f_in_raw, const ArchConfig& a, const GridSpec& g0,
            std::uint64_t seed) {
    arch = a;
    grid0 = g0;
    Rng rng(derive_seed(seed, "init"));
    std::size_t f_in_enc = f_in_raw;
    if (a.preprocessing) {
      PreprocessConfig pcfg;
      pcfg.f_out = a.f_out;
      pcfg.kernel_points = a.kernel_points;
      pcfg.rho_k = a.rho_k0_pre;
      pcfg.use_batch_norm = a.use_batch_norm;
      pre.emplace();
      pre->init(f_in_raw, pcfg, "pre", rng);
      f_in_enc = a.f_out + (f_in_raw - pcfg.position_channels);
    }
    EncoderConfig ecfg;
    ecfg.kind = a.encoder;
    ecfg.f_out = a.f_out;
    ecfg.kernel_points = a.kernel_points;
    ecfg.rho_k = a.rho_k0;
    ecfg.use_batch_norm = a.use_batch_norm;
    if (a.multiscale) {
      scales = derive_scales(g0);
      MultiScaleEncoder<T> ms;
      ms.init(f_in_enc, ecfg, *scales, a.adaptive_radius, "enc", rng);
      encoder = std::move(ms);
    } else if (a.encoder == EncoderKind::kPillars) {
      PillarsEncoder<T> e;
      e.init(f_in_enc, ecfg, "enc", rng);
      encoder = std::move(e);
    } else {
      KpbevEncoder<T> e;
      e.init(f_in_enc, ecfg, "enc", rng);
      encoder = std::move(e);
    }
    DetectorConfig dcfg;
    dcfg.rendered_channels = a.f_out;
    dcfg.multiscale = a.multiscale;
    dcfg.use_batch_norm = a.use_batch_norm;
    detector.init(dcfg, "det", rng);
  }

  GridSpec head_grid() const { return head_grid_for(grid0); }

  /// Grid rendering only: preprocessing plus the configured encoder(s).
  std::vector<FeatureMap<T>> render(const PointCloud<T>& pc, Ctx& ctx) const {
    ctx.encoder_input = pre ? pre->forward(pc, ctx.pre_ctx) : pc;
    std::vector<FeatureMap<T>> maps;
    if (const auto* p = std::get_if<PillarsEncoder<T>>(&encoder)) {
      maps.push_back(p->forward(ctx.encoder_input, grid0, ctx.pillars_ctx));
    } else if (const auto* k = std::get_if<KpbevEncoder<T>>(&encoder)) {
      maps.push_back(k->forward(ctx.encoder_input, grid0, ctx.kpbev_ctx));
    } else if (const auto* m = std::get_if<MultiScaleEncoder<T>>(&encoder)) {
      maps = m->forward(ctx.encoder_input, ctx.ms_ctx);
    } else {
      throw ContractError("pipeline not initialized");
    }
    return maps;
  }

  Tensor<T> forward(const PointCloud<T>& pc, Ctx& ctx) const {
    ctx.maps = render(pc, ctx);
    return detector.forward(std::span<const FeatureMap<T>>(ctx.maps), ctx.det_ctx);
  }

  void backward(const PointCloud<T>& pc, Ctx& ctx, const Tensor<T>& grad_head) {
    std::vector<Tensor<T>> grad_maps = detector.backward(ctx.det_ctx, grad_head);
    Tensor<T> g_feats;
    if (auto* p = std::get_if<PillarsEncoder<T>>(&encoder)) {
      g_feats = p->backward(ctx.pillars_ctx, grad_maps[0]);
    } else if (auto* k = std::get_if<KpbevEncoder<T>>(&encoder)) {
      g_feats = k->backward(ctx.kpbev_ctx, grad_maps[0]);
    } else if (auto* m = std::get_if<MultiScaleEncoder<T>>(&encoder)) {
      g_feats = m->backward(ctx.encoder_input, ctx.ms_ctx, grad_maps);
    }
    if (pre) pre->backward(pc, ctx.pre_ctx, g_feats);
  }

  void set_norm_mode(NormMode mode) {
    if (pre) pre->set_norm_mode(mode);
    if (auto* p = std::get_if<PillarsEncoder<T>>(&encoder)) p->set_norm_mode(mode);
    if (auto* k = std::get_if<KpbevEncoder<T>>(&encoder)) k->set_norm_mode(mode);
    if (auto* m = std::get_if<MultiScaleEncoder<T>>(&encoder)) m->set_norm_mode(mode);
    detector.set_norm_mode(mode);
  }

  void collect(std::vector<Param<T>*>& out) {
    if (pre) pre->collect(out);
    if (auto* p = std::get_if<PillarsEncoder<T>>(&encoder)) p->collect(out);
    if (auto* k = std::get_if<KpbevEncoder<T>>(&encoder)) k->collect(out);
    if (auto* m = std::get_if<MultiScaleEncoder<T>>(&encoder)) m->collect(out);
    detector.collect(out);
  }

  void update_running(const Ctx& ctx) {
    if (pre) pre->update_running(ctx.pre_ctx);
    if (auto* p = std::get_if<PillarsEncoder<T>>(&encoder))
      p->update_running(ctx.pillars_ctx);
    if (auto* k = std::get_if<KpbevEncoder<T>>(&encoder))
      k->update_running(ctx.kpbev_ctx);
    if (auto* m = std::get_if<MultiScaleEncoder<T>>(&encoder))
      m->update_running(ctx.ms_ctx);
    detector.update_running(ctx.det_ctx);
  }
};

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 30;
  int batch_size = 8;
  double learning_rate = 1e-3;
  int train_scenes = 200;
  int eval_scenes = 50;
  double score_threshold = 0.02;
  double nms_iou = 0.15;
  double box_loss_weight = 1.0;
  int threads = 0;  // 0 = hardware concurrency
  std::uint64_t seed = 42;
};

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double ap4 = 0.0;
  double map = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  EvalResult final_eval;
  std::vector<OrientedBox> predictions;   // eval-set detections, frame = scene index
  std::vector<OrientedBox> ground_truth;  // eval-set boxes, frame = scene index
};

template <typename T>
void run_eval(const Pipeline<T>& model, const std::vector<SyntheticScene<T>>& scenes,
              const TrainConfig& cfg, std::vector<OrientedBox>& preds,
              std::vector<OrientedBox>& gts) {
  const GridSpec hg = model.head_grid();
  std::vector<std::vector<OrientedBox>> per_scene(scenes.size());
  parallel_for(scenes.size(), cfg.threads, [&](std::size_t i) {
    typename Pipeline<T>::Ctx ctx;
    const Tensor<T> head = model.forward(scenes[i].cloud, ctx);
    auto boxes = decode_boxes(head, hg, cfg.score_threshold, static_cast<int>(i));
    per_scene[i] = nms(boxes, cfg.nms_iou);
  });
  preds.clear();
  gts.clear();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    preds.insert(preds.end(), per_scene[i].begin(), per_scene[i].end());
    for (OrientedBox gt : scenes[i].ground_truth) {
      gt.frame = static_cast<int>(i);
      gts.push_back(gt);
    }
  }
}

/// Deterministic training: scene seeds, shuffles, initialization, and the
/// gradient reduction order all derive from the config seed. Per-scene
/// forward/backward passes run on deep copies of the model and are reduced
/// in scene order, so results do not depend on the thread count.
template <typename T>
TrainResult train(Pipeline<T>& model, const SceneConfig& scene_cfg,
                  const TrainConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch = {}) {
  TrainResult result;

  std::vector<SyntheticScene<T>> train_scenes(cfg.train_scenes);
  std::vector<SyntheticScene<T>> eval_scenes(cfg.eval_scenes);
  parallel_for(train_scenes.size(), cfg.threads, [&](std::size_t i) {
    train_scenes[i] = generate_scene<T>(scene_cfg, derive_seed(cfg.seed, "scene", i));
  });
  parallel_for(eval_scenes.size(), cfg.threads, [&](std::size_t i) {
    eval_scenes[i] = generate_scene<T>(scene_cfg, derive_seed(cfg.seed, "eval-scene", i));
  });

  const GridSpec hg = model.head_grid();
  std::vector<DetectionTargets<T>> targets(train_scenes.size());
  for (std::size_t i = 0; i < train_scenes.size(); ++i) {
    targets[i] = build_targets<T>(train_scenes[i].ground_truth, hg);
  }

  Adam<T> opt;
  opt.learning_rate = cfg.learning_rate;
  std::vector<Param<T>*> params;
  model.collect(params);
  LossConfig loss_cfg;
  loss_cfg.box_weight = cfg.box_loss_weight;

  std::vector<std::size_t> order(train_scenes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j =
          static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }

    model.set_norm_mode(NormMode::kTrain);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t b =
          std::min<std::size_t>(cfg.batch_size, order.size() - start);
      std::vector<Pipeline<T>> clones(b, model);
      std::vector<typename Pipeline<T>::Ctx> ctxs(b);
      std::vector<double> losses(b, 0.0);
      parallel_for(b, cfg.threads, [&](std::size_t j) {
        const auto& scene = train_scenes[order[start + j]];
        std::vector<Param<T>*> clone_params;
        clones[j].collect(clone_params);
        for (auto* p : clone_params) p->zero_grad();
        const Tensor<T> head = clones[j].forward(scene.cloud, ctxs[j]);
        auto [loss, grad_head] =
            detection_loss(head, targets[order[start + j]], loss_cfg);
        losses[j] = loss;
        clones[j].backward(scene.cloud, ctxs[j], grad_head);
      });

      for (auto* p : params) p->zero_grad();
      const T scale = T(1) / static_cast<T>(b);
      for (std::size_t j = 0; j < b; ++j) {
        if (!std::isfinite(losses[j])) {
          throw NumericError("training diverged: non-finite loss at epoch " +
                             std::to_string(epoch) + ", scene " +
                             std::to_string(order[start + j]));
        }
        epoch_loss += losses[j];
        std::vector<Param<T>*> clone_params;
        clones[j].collect(clone_params);
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
          params[pi]->grad.add_scaled(clone_params[pi]->grad, scale);
        }
        model.update_running(ctxs[j]);
      }
      opt.step(params);
    }
    epoch_loss /= static_cast<double>(train_scenes.size());

    model.set_norm_mode(NormMode::kEval);
    std::vector<OrientedBox> preds, gts;
    run_eval(model, eval_scenes, cfg, preds, gts);
    const EvalResult er = evaluate(preds, gts);
    EpochLog entry{epoch, epoch_loss, er.ap_at(4.0), er.map};
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }

  model.set_norm_mode(NormMode::kEval);
  run_eval(model, eval_scenes, cfg, result.predictions, result.ground_truth);
  result.final_eval = evaluate(result.predictions, result.ground_truth);
  return result;
}

}  // namespace kpbev
