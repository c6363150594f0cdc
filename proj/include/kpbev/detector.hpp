#pragma once

#include <array>
#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "kpbev/boxes.hpp"
#include "kpbev/multiscale.hpp"
#include "kpbev/ops.hpp"

namespace kpbev {

// ---------------------------------------------------------------------------
// conv / norm / relu block
// ---------------------------------------------------------------------------

template <typename T>
struct ConvBlock {
  Conv2d<T> conv;
  BatchNorm<T> bn;
  bool use_bn = true;

  struct Ctx {
    Tensor<T> x;
    typename BatchNorm<T>::Ctx bn_ctx;
    Tensor<T> bn_out;  // relu input, map form
  };

  void init(std::size_t ksize, std::size_t ci, std::size_t co, int stride,
            const std::string& name, Rng& rng, bool with_bn) {
    use_bn = with_bn;
    conv.init(ksize, ci, co, stride, name + ".conv", rng, /*with_bias=*/!with_bn);
    bn.init(co, name + ".bn");
    if (!with_bn) bn.mode = NormMode::kIdentity;
  }

  Tensor<T> forward(const Tensor<T>& x, Ctx& ctx) const {
    ctx.x = x;
    const Tensor<T> c = conv.forward(x);
    const Tensor<T> bn_rows = bn.forward(map_to_rows(c), ctx.bn_ctx);
    ctx.bn_out = rows_to_map(bn_rows, c.dim(0), c.dim(1));
    return relu_forward(ctx.bn_out);
  }

  Tensor<T> backward(Ctx& ctx, const Tensor<T>& grad_out) {
    const Tensor<T> g_bn = relu_backward(ctx.bn_out, grad_out);
    const Tensor<T> g_rows = bn.backward(ctx.bn_ctx, map_to_rows(g_bn));
    const Tensor<T> g_conv = rows_to_map(g_rows, grad_out.dim(0), grad_out.dim(1));
    return conv.backward(ctx.x, g_conv);
  }

  void set_norm_mode(NormMode mode) {
    bn.mode = use_bn ? mode : NormMode::kIdentity;
  }
  void collect(std::vector<Param<T>*>& out) {
    conv.collect(out);
    if (use_bn) bn.collect(out);
  }
  void update_running(const Ctx& ctx) { bn.update_running(ctx.bn_ctx); }
};

// ---------------------------------------------------------------------------
// miniature four-stage backbone with per-stage fusion and a box head
// ---------------------------------------------------------------------------

struct DetectorConfig {
  std::size_t rendered_channels = 64;
  bool multiscale = false;
  bool use_batch_norm = true;
  std::array<std::size_t, 4> stage_channels{32, 64, 64, 64};
  std::size_t head_channels = 8;
};

/// Head channel layout per cell:
///   0: objectness logit, 1: dx, 2: dy, 3: log w, 4: log l,
///   5: sin yaw, 6: cos yaw, 7: reserved.
///
/// Four stages (stride 2 between them) consume the scale-0 rendering; in
/// multi-scale mode the rendering for scale i is concatenated onto the stage-i
/// input. The two coarsest stages are merged top-down onto the
/// quarter-resolution map that feeds the head.
template <typename T>
struct MiniDetector {
  DetectorConfig cfg;
  ConvBlock<T> stem_a, stem_b;
  std::array<ConvBlock<T>, 3> down;
  std::array<ConvBlock<T>, 3> body;
  ConvBlock<T> topdown;
  Conv2d<T> head;

  struct Ctx {
    typename ConvBlock<T>::Ctx stem_a_ctx, stem_b_ctx;
    std::array<typename ConvBlock<T>::Ctx, 3> down_ctx, body_ctx;
    typename ConvBlock<T>::Ctx topdown_ctx;
    Tensor<T> y2, topdown_in, topdown_out;
    std::array<std::size_t, 3> fused_channels{};  // stage input split points
  };

  void init(const DetectorConfig& config, const std::string& name, Rng& rng) {
    cfg = config;
    const auto& ch = cfg.stage_channels;
    const std::size_t cr = cfg.rendered_channels;
    const bool bn = cfg.use_batch_norm;
    stem_a.init(3, cr, ch[0], 1, name + ".stem_a", rng, bn);
    stem_b.init(3, ch[0], ch[0], 1, name + ".stem_b", rng, bn);
    for (std::size_t i = 0; i < 3; ++i) {
      const std::size_t fused = ch[i + 1] + (cfg.multiscale ? cr : 0);
      down[i].init(3, ch[i], ch[i + 1], 2, name + ".down" + std::to_string(i), rng, bn);
      body[i].init(3, fused, ch[i + 1], 1, name + ".body" + std::to_string(i), rng, bn);
    }
    topdown.init(3, ch[2] + ch[3], ch[2], 1, name + ".topdown", rng, bn);
    head.init(1, ch[2], cfg.head_channels, 1, name + ".head", rng, /*with_bias=*/true);
    head.bias.value[0] = T(-4.0);  // low initial objectness prior
  }

  Tensor<T> forward(std::span<const FeatureMap<T>> maps, Ctx& ctx) const {
    const std::size_t expected = cfg.multiscale ? kNumScales : 1;
    if (maps.size() != expected) {
      throw ContractError("detector: expected " + std::to_string(expected) +
                          " feature maps, got " + std::to_string(maps.size()));
    }
    const std::size_t h0 = maps[0].data.dim(0), w0 = maps[0].data.dim(1);
    if (h0 % 8 != 0 || w0 % 8 != 0) {
      throw ContractError("detector: input map dims must be divisible by 8");
    }
    Tensor<T> y = stem_b.forward(stem_a.forward(maps[0].data, ctx.stem_a_ctx),
                                 ctx.stem_b_ctx);
    std::array<Tensor<T>, 3> stage_out;
    for (std::size_t i = 0; i < 3; ++i) {
      Tensor<T> x = down[i].forward(y, ctx.down_ctx[i]);
      ctx.fused_channels[i] = x.dim(2);
      if (cfg.multiscale) {
        const auto& m = maps[i + 1].data;
        if (m.dim(0) != x.dim(0) || m.dim(1) != x.dim(1)) {
          throw ContractError("detector: scale " + std::to_string(i + 1) +
                              " map does not align with the backbone stage");
        }
        x = fuse_into_backbone(x, m);
      }
      y = body[i].forward(x, ctx.body_ctx[i]);
      stage_out[i] = y;
    }
    ctx.y2 = stage_out[1];
    ctx.topdown_in = concat_channels(stage_out[1], upsample2x_forward(stage_out[2]));
    ctx.topdown_out = topdown.forward(ctx.topdown_in, ctx.topdown_ctx);
    return head.forward(ctx.topdown_out);
  }

  /// Returns the gradients w.r.t. the input feature maps (1 or 4 of them).
  std::vector<Tensor<T>> backward(Ctx& ctx, const Tensor<T>& grad_head) {
    std::vector<Tensor<T>> grad_maps(cfg.multiscale ? kNumScales : 1);

    const Tensor<T> g_td = head.backward(ctx.topdown_out, grad_head);
    const Tensor<T> g_td_in = topdown.backward(ctx.topdown_ctx, g_td);
    auto [g_y2_direct, g_up] = split_channels(g_td_in, ctx.y2.dim(2));
    Tensor<T> g_stage = upsample2x_backward(g_up);  // grad into stage_out[2]

    for (std::size_t i = 3; i-- > 0;) {
      Tensor<T> g_x = body[i].backward(ctx.body_ctx[i], g_stage);
      if (cfg.multiscale) {
        auto [g_down, g_map] = split_channels(g_x, ctx.fused_channels[i]);
        grad_maps[i + 1] = std::move(g_map);
        g_x = std::move(g_down);
      }
      g_stage = down[i].backward(ctx.down_ctx[i], g_x);
      if (i == 2) g_stage.add_scaled(g_y2_direct, T(1));  // top-down skip into y2
    }
    const Tensor<T> g_stem = stem_b.backward(ctx.stem_b_ctx, g_stage);
    grad_maps[0] = stem_a.backward(ctx.stem_a_ctx, g_stem);
    return grad_maps;
  }

  void set_norm_mode(NormMode mode) {
    stem_a.set_norm_mode(mode);
    stem_b.set_norm_mode(mode);
    for (auto& b : down) b.set_norm_mode(mode);
    for (auto& b : body) b.set_norm_mode(mode);
    topdown.set_norm_mode(mode);
  }
  void collect(std::vector<Param<T>*>& out) {
    stem_a.collect(out);
    stem_b.collect(out);
    for (std::size_t i = 0; i < 3; ++i) {
      down[i].collect(out);
      body[i].collect(out);
    }
    topdown.collect(out);
    head.collect(out);
  }
  void update_running(const Ctx& ctx) {
    stem_a.update_running(ctx.stem_a_ctx);
    stem_b.update_running(ctx.stem_b_ctx);
    for (std::size_t i = 0; i < 3; ++i) {
      down[i].update_running(ctx.down_ctx[i]);
      body[i].update_running(ctx.body_ctx[i]);
    }
    topdown.update_running(ctx.topdown_ctx);
  }
};

// ---------------------------------------------------------------------------
// target assignment, loss, decoding
// ---------------------------------------------------------------------------

/// Quarter-resolution grid the head predicts on.
inline GridSpec head_grid_for(const GridSpec& grid0) {
  return GridSpec::create(grid0.x_min, grid0.y_min, grid0.x_max, grid0.y_max,
                          4.0 * grid0.cell_size);
}

template <typename T>
struct DetectionTargets {
  std::vector<std::uint8_t> positive;  // Hq * Wq
  Tensor<T> box;                       // Hq x Wq x 6
  std::size_t n_positive = 0;
};

/// A cell is positive iff it contains a ground-truth center; the first box
/// claims a contested cell. Box targets: center offset from the cell center,
/// log sizes, and the yaw sine/cosine pair.
template <typename T>
DetectionTargets<T> build_targets(const std::vector<OrientedBox>& gts,
                                  const GridSpec& head_grid) {
  const std::size_t h = static_cast<std::size_t>(head_grid.height);
  const std::size_t w = static_cast<std::size_t>(head_grid.width);
  DetectionTargets<T> t;
  t.positive.assign(h * w, 0);
  t.box = Tensor<T>({h, w, 6});
  for (const OrientedBox& gt : gts) {
    const int ix = static_cast<int>(std::floor((gt.cx - head_grid.x_min) / head_grid.cell_size));
    const int iy = static_cast<int>(std::floor((gt.cy - head_grid.y_min) / head_grid.cell_size));
    if (ix < 0 || ix >= head_grid.width || iy < 0 || iy >= head_grid.height) continue;
    const std::size_t flat = static_cast<std::size_t>(iy) * w + ix;
    if (t.positive[flat]) continue;
    t.positive[flat] = 1;
    ++t.n_positive;
    const Vec2 center = head_grid.cell_center(ix, iy);
    T* row = &t.box(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), 0);
    row[0] = static_cast<T>(gt.cx - center.x);
    row[1] = static_cast<T>(gt.cy - center.y);
    row[2] = static_cast<T>(std::log(gt.width));
    row[3] = static_cast<T>(std::log(gt.length));
    row[4] = static_cast<T>(std::sin(gt.yaw));
    row[5] = static_cast<T>(std::cos(gt.yaw));
  }
  return t;
}

struct LossConfig {
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double box_weight = 1.0;
};

namespace detail {
inline double softplus(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}
}  // namespace detail

/// Focal loss on the objectness logit over all cells plus smooth-L1 on the
/// six box targets at positive cells, both normalized by the positive count.
/// Returns the scalar loss and its gradient w.r.t. the head map.
template <typename T>
std::pair<double, Tensor<T>> detection_loss(const Tensor<T>& head,
                                            const DetectionTargets<T>& targets,
                                            const LossConfig& cfg = {}) {
  const std::size_t h = head.dim(0), w = head.dim(1);
  Tensor<T> grad(head.shape());
  const double norm = 1.0 / std::max<std::size_t>(targets.n_positive, 1);
  const double alpha = cfg.focal_alpha, gamma = cfg.focal_gamma;
  double focal_sum = 0.0, box_sum = 0.0;

  for (std::size_t iy = 0; iy < h; ++iy) {
    for (std::size_t ix = 0; ix < w; ++ix) {
      const double x = static_cast<double>(head(iy, ix, 0));
      const double p = 1.0 / (1.0 + std::exp(-x));
      const double log_p = -detail::softplus(-x);
      const double log_1mp = -detail::softplus(x);
      const bool pos = targets.positive[iy * w + ix] != 0;
      double dfdx;
      if (pos) {
        const double mod = std::pow(1.0 - p, gamma);
        focal_sum += -alpha * mod * log_p;
        dfdx = alpha * mod * (gamma * p * log_p - (1.0 - p));
      } else {
        const double mod = std::pow(p, gamma);
        focal_sum += -(1.0 - alpha) * mod * log_1mp;
        dfdx = (1.0 - alpha) * mod * (p - gamma * (1.0 - p) * log_1mp);
      }
      grad(iy, ix, 0) = static_cast<T>(dfdx * norm);

      if (pos) {
        for (std::size_t d = 0; d < 6; ++d) {
          const double diff = static_cast<double>(head(iy, ix, 1 + d)) -
                              static_cast<double>(targets.box(iy, ix, d));
          if (std::abs(diff) < 1.0) {
            box_sum += 0.5 * diff * diff;
            grad(iy, ix, 1 + d) = static_cast<T>(cfg.box_weight * diff * norm);
          } else {
            box_sum += std::abs(diff) - 0.5;
            grad(iy, ix, 1 + d) =
                static_cast<T>(cfg.box_weight * (diff > 0 ? 1.0 : -1.0) * norm);
          }
        }
      }
    }
  }
  const double loss = (focal_sum + cfg.box_weight * box_sum) * norm;
  return {loss, std::move(grad)};
}

/// Cells whose objectness clears the threshold become boxes. Keeps at most
/// max_boxes highest-scoring decodes (ties keep scan order).
template <typename T>
std::vector<OrientedBox> decode_boxes(const Tensor<T>& head, const GridSpec& head_grid,
                                      double score_threshold, int frame = 0,
                                      std::size_t max_boxes = 256) {
  if (score_threshold < 0.0 || score_threshold > 1.0) {
    throw ContractError("decode_boxes: score threshold must be in [0, 1]");
  }
  std::vector<OrientedBox> boxes;
  const std::size_t h = head.dim(0), w = head.dim(1);
  for (std::size_t iy = 0; iy < h; ++iy) {
    for (std::size_t ix = 0; ix < w; ++ix) {
      const double logit = static_cast<double>(head(iy, ix, 0));
      const double score = 1.0 / (1.0 + std::exp(-logit));
      if (score <= score_threshold) continue;
      const Vec2 center = head_grid.cell_center(static_cast<int>(ix), static_cast<int>(iy));
      OrientedBox box;
      box.cx = center.x + static_cast<double>(head(iy, ix, 1));
      box.cy = center.y + static_cast<double>(head(iy, ix, 2));
      box.width = std::exp(static_cast<double>(head(iy, ix, 3)));
      box.length = std::exp(static_cast<double>(head(iy, ix, 4)));
      box.yaw = normalize_yaw(std::atan2(static_cast<double>(head(iy, ix, 5)),
                                         static_cast<double>(head(iy, ix, 6))));
      box.score = score;
      box.frame = frame;
      boxes.push_back(box);
    }
  }
  if (boxes.size() > max_boxes) {
    std::stable_sort(boxes.begin(), boxes.end(),
                     [](const OrientedBox& a, const OrientedBox& b) {
                       return *a.score > *b.score;
                     });
    boxes.resize(max_boxes);
  }
  return boxes;
}

}  // namespace kpbev
