#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kpbev/geom.hpp"
#include "kpbev/kpconv.hpp"
#include "kpbev/ops.hpp"

namespace kpbev {

/// Dense feature map tied to a grid. Data layout H x W x C, iy outermost.
template <typename T>
struct FeatureMap {
  GridSpec grid;
  Tensor<T> data;

  std::size_t channels() const { return data.rank() == 3 ? data.dim(2) : 0; }
};

enum class EncoderKind { kPillars, kKpbev };

struct EncoderConfig {
  EncoderKind kind = EncoderKind::kKpbev;
  std::size_t f_out = 64;
  int kernel_points = 9;
  double rho_k = 0.6;  // kernel-point influence radius; neighborhood rho = 2.5 * rho_k
  bool use_batch_norm = true;
};

// ---------------------------------------------------------------------------
// feature augmentation
// ---------------------------------------------------------------------------

/// In-grid points with their features extended by the fixed seven-entry
/// geometry block [da_x, da_y, dc_x, dc_y, c_x, c_y, n]: offsets to the
/// point's anchor and cell centroid, the centroid itself, and the member
/// count of the cell. Out-of-grid points are masked out (they keep no row).
template <typename T>
struct AugmentedPoints {
  std::vector<std::int32_t> point_index;   // row -> original point index
  std::vector<Vec2> positions;             // in-grid subset, same order
  std::vector<std::int32_t> anchor_index;  // row -> anchor
  Tensor<T> features;                      // R x (F_in + 7)

  std::size_t rows() const { return point_index.size(); }
};

template <typename T>
AugmentedPoints<T> augment(const PointCloud<T>& pc, const AnchorSet& anchors,
                           const CellStats& stats) {
  const std::size_t f_in = pc.feature_dim();
  AugmentedPoints<T> out;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    if (anchors.point_to_anchor[i] != AnchorSet::kNoAnchor) {
      out.point_index.push_back(static_cast<std::int32_t>(i));
    }
  }
  const std::size_t r = out.point_index.size();
  out.positions.resize(r);
  out.anchor_index.resize(r);
  out.features = Tensor<T>({r, f_in + 7});
  for (std::size_t row = 0; row < r; ++row) {
    const std::size_t i = static_cast<std::size_t>(out.point_index[row]);
    const std::int32_t a = anchors.point_to_anchor[i];
    out.positions[row] = pc.positions[i];
    out.anchor_index[row] = a;
    T* fr = out.features.row(row);
    const T* src = pc.features.row(i);
    for (std::size_t f = 0; f < f_in; ++f) fr[f] = src[f];
    const Vec2 p = pc.positions[i];
    const Vec2 da = p - anchors.positions[a];
    const Vec2 dc = p - stats.centroid[a];
    fr[f_in + 0] = static_cast<T>(da.x);
    fr[f_in + 1] = static_cast<T>(da.y);
    fr[f_in + 2] = static_cast<T>(dc.x);
    fr[f_in + 3] = static_cast<T>(dc.y);
    fr[f_in + 4] = static_cast<T>(stats.centroid[a].x);
    fr[f_in + 5] = static_cast<T>(stats.centroid[a].y);
    fr[f_in + 6] = static_cast<T>(stats.count[a]);
  }
  return out;
}

/// Scatter augmented-feature gradients back onto the original feature rows.
/// Only the first F_in columns carry gradient; the geometry block depends on
/// positions alone.
template <typename T>
Tensor<T> augment_backward(const Tensor<T>& grad_aug,
                           const std::vector<std::int32_t>& point_index,
                           std::size_t n_points, std::size_t f_in) {
  Tensor<T> gx({n_points, f_in});
  for (std::size_t row = 0; row < point_index.size(); ++row) {
    const T* gr = grad_aug.row(row);
    T* dst = gx.row(static_cast<std::size_t>(point_index[row]));
    for (std::size_t f = 0; f < f_in; ++f) dst[f] += gr[f];
  }
  return gx;
}

// ---------------------------------------------------------------------------
// grid transfer
// ---------------------------------------------------------------------------

/// Scatter one feature row per anchor into its grid cell; every other cell is
/// zero. The anchor/cell correspondence must be one-to-one.
template <typename T>
FeatureMap<T> grid_transfer(const Tensor<T>& anchor_features,
                            const AnchorSet& anchors, const GridSpec& grid) {
  if (anchor_features.rank() != 2 || anchor_features.dim(0) != anchors.size()) {
    throw ContractError("grid_transfer: one feature row per anchor required");
  }
  const std::size_t c = anchor_features.dim(1);
  FeatureMap<T> map;
  map.grid = grid;
  map.data = Tensor<T>({static_cast<std::size_t>(grid.height),
                        static_cast<std::size_t>(grid.width), c});
  std::vector<std::uint8_t> seen(grid.cell_count(), 0);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const CellIndex cell = anchors.cells[a];
    const std::size_t flat = static_cast<std::size_t>(cell.iy) * grid.width + cell.ix;
    if (seen[flat]) throw ContractError("grid_transfer: duplicate cell index");
    seen[flat] = 1;
    const T* src = anchor_features.row(a);
    T* dst = &map.data(static_cast<std::size_t>(cell.iy),
                       static_cast<std::size_t>(cell.ix), 0);
    std::copy(src, src + c, dst);
  }
  return map;
}

/// Gather map gradients back to anchor rows (adjoint of grid_transfer).
template <typename T>
Tensor<T> grid_transfer_backward(const Tensor<T>& grad_map, const AnchorSet& anchors) {
  const std::size_t c = grad_map.dim(2);
  Tensor<T> gx({anchors.size(), c});
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const CellIndex cell = anchors.cells[a];
    const T* src = &grad_map(static_cast<std::size_t>(cell.iy),
                             static_cast<std::size_t>(cell.ix), 0);
    std::copy(src, src + c, gx.row(a));
  }
  return gx;
}

// ---------------------------------------------------------------------------
// PointPillars-style encoder
// ---------------------------------------------------------------------------

/// augment -> linear -> BN -> ReLU -> cell-wise max -> grid transfer.
template <typename T>
struct PillarsEncoder {
  EncoderConfig cfg;
  Linear<T> lin;
  BatchNorm<T> bn;

  struct Ctx {
    AnchorSet anchors;
    CellStats stats;
    AugmentedPoints<T> aug;
    Tensor<T> lin_out;
    typename BatchNorm<T>::Ctx bn_ctx;
    Tensor<T> bn_out;
    std::vector<std::int32_t> argmax;
    std::size_t n_points = 0;
    std::size_t f_in = 0;
  };

  void init(std::size_t f_in, const EncoderConfig& config, const std::string& name,
            Rng& rng) {
    cfg = config;
    lin.init(f_in + 7, cfg.f_out, name + ".lin", rng);
    bn.init(cfg.f_out, name + ".bn");
    if (!cfg.use_batch_norm) bn.mode = NormMode::kIdentity;
  }

  FeatureMap<T> forward(const PointCloud<T>& pc, const GridSpec& grid, Ctx& ctx) const {
    ctx.n_points = pc.size();
    ctx.f_in = pc.feature_dim();
    ctx.anchors = generate_anchors(pc, grid);
    ctx.stats = cell_centroids(pc, ctx.anchors);
    ctx.aug = augment(pc, ctx.anchors, ctx.stats);
    if (ctx.aug.rows() == 0) {
      FeatureMap<T> map;
      map.grid = grid;
      map.data = Tensor<T>({static_cast<std::size_t>(grid.height),
                            static_cast<std::size_t>(grid.width), cfg.f_out});
      return map;
    }
    ctx.lin_out = lin.forward(ctx.aug.features);
    ctx.bn_out = bn.forward(ctx.lin_out, ctx.bn_ctx);
    const Tensor<T> relu_out = relu_forward(ctx.bn_out);
    const Tensor<T> pooled = segment_max_forward(
        relu_out, std::span<const std::int32_t>(ctx.aug.anchor_index),
        ctx.anchors.size(), &ctx.argmax);
    return grid_transfer(pooled, ctx.anchors, grid);
  }

  /// Returns the gradient w.r.t. the input point features (N x F_in).
  Tensor<T> backward(Ctx& ctx, const Tensor<T>& grad_map) {
    if (ctx.aug.rows() == 0) return Tensor<T>({ctx.n_points, ctx.f_in});
    const Tensor<T> g_pool = grid_transfer_backward(grad_map, ctx.anchors);
    const Tensor<T> g_relu = segment_max_backward(ctx.argmax, g_pool, ctx.aug.rows());
    const Tensor<T> g_bn = relu_backward(ctx.bn_out, g_relu);
    const Tensor<T> g_lin = bn.backward(ctx.bn_ctx, g_bn);
    const Tensor<T> g_aug = lin.backward(ctx.aug.features, g_lin);
    return augment_backward(g_aug, ctx.aug.point_index, ctx.n_points, ctx.f_in);
  }

  void set_norm_mode(NormMode mode) {
    bn.mode = cfg.use_batch_norm ? mode : NormMode::kIdentity;
  }
  void collect(std::vector<Param<T>*>& out) {
    lin.collect(out);
    bn.collect(out);
  }
  void update_running(const Ctx& ctx) { bn.update_running(ctx.bn_ctx); }
};

// ---------------------------------------------------------------------------
// KPBEV encoder
// ---------------------------------------------------------------------------

/// augment -> linear/BN/ReLU -> anchor-wise kernel point convolution/BN/ReLU
/// -> linear/BN/ReLU -> grid transfer. The convolution gathers input points
/// within rho = 2.5 * rho_k of each anchor, so a point can contribute to
/// several adjacent cells.
template <typename T>
struct KpbevEncoder {
  EncoderConfig cfg;
  Linear<T> lin1;
  BatchNorm<T> bn1;
  KpConv<T> conv;
  BatchNorm<T> bn2;
  Linear<T> lin2;
  BatchNorm<T> bn3;

  struct Ctx {
    AnchorSet anchors;
    CellStats stats;
    AugmentedPoints<T> aug;
    NeighborLists neighbors;
    Tensor<T> lin1_out, bn1_out, relu1_out;
    Tensor<T> conv_out, bn2_out, relu2_out;
    Tensor<T> lin2_out, bn3_out;
    typename BatchNorm<T>::Ctx bn1_ctx, bn2_ctx, bn3_ctx;
    std::size_t n_points = 0;
    std::size_t f_in = 0;
  };

  double neighborhood_radius() const { return 2.5 * cfg.rho_k; }

  void init(std::size_t f_in, const EncoderConfig& config, const std::string& name,
            Rng& rng) {
    cfg = config;
    lin1.init(f_in + 7, cfg.f_out, name + ".lin1", rng);
    bn1.init(cfg.f_out, name + ".bn1");
    conv.init(cfg.kernel_points, neighborhood_radius(), cfg.f_out, cfg.f_out,
              name + ".kpconv", rng);
    bn2.init(cfg.f_out, name + ".bn2");
    lin2.init(cfg.f_out, cfg.f_out, name + ".lin2", rng);
    bn3.init(cfg.f_out, name + ".bn3");
    if (!cfg.use_batch_norm) set_norm_mode(NormMode::kIdentity);
  }

  FeatureMap<T> forward(const PointCloud<T>& pc, const GridSpec& grid, Ctx& ctx) const {
    ctx.n_points = pc.size();
    ctx.f_in = pc.feature_dim();
    ctx.anchors = generate_anchors(pc, grid);
    ctx.stats = cell_centroids(pc, ctx.anchors);
    ctx.aug = augment(pc, ctx.anchors, ctx.stats);
    if (ctx.aug.rows() == 0) {
      FeatureMap<T> map;
      map.grid = grid;
      map.data = Tensor<T>({static_cast<std::size_t>(grid.height),
                            static_cast<std::size_t>(grid.width), cfg.f_out});
      return map;
    }
    ctx.lin1_out = lin1.forward(ctx.aug.features);
    ctx.bn1_out = bn1.forward(ctx.lin1_out, ctx.bn1_ctx);
    ctx.relu1_out = relu_forward(ctx.bn1_out);
    ctx.neighbors = radius_neighbors(std::span<const Vec2>(ctx.anchors.positions),
                                     std::span<const Vec2>(ctx.aug.positions),
                                     neighborhood_radius());
    ctx.conv_out = conv.forward(ctx.anchors.positions, ctx.aug.positions,
                                ctx.relu1_out, ctx.neighbors);
    ctx.bn2_out = bn2.forward(ctx.conv_out, ctx.bn2_ctx);
    ctx.relu2_out = relu_forward(ctx.bn2_out);
    ctx.lin2_out = lin2.forward(ctx.relu2_out);
    ctx.bn3_out = bn3.forward(ctx.lin2_out, ctx.bn3_ctx);
    const Tensor<T> relu3_out = relu_forward(ctx.bn3_out);
    return grid_transfer(relu3_out, ctx.anchors, grid);
  }

  Tensor<T> backward(Ctx& ctx, const Tensor<T>& grad_map) {
    if (ctx.aug.rows() == 0) return Tensor<T>({ctx.n_points, ctx.f_in});
    const Tensor<T> g_anchor = grid_transfer_backward(grad_map, ctx.anchors);
    const Tensor<T> g_bn3 = relu_backward(ctx.bn3_out, g_anchor);
    const Tensor<T> g_lin2 = bn3.backward(ctx.bn3_ctx, g_bn3);
    const Tensor<T> g_relu2 = lin2.backward(ctx.relu2_out, g_lin2);
    const Tensor<T> g_bn2 = relu_backward(ctx.bn2_out, g_relu2);
    const Tensor<T> g_conv = bn2.backward(ctx.bn2_ctx, g_bn2);
    const Tensor<T> g_relu1 = conv.backward(ctx.anchors.positions, ctx.aug.positions,
                                            ctx.relu1_out, ctx.neighbors, g_conv);
    const Tensor<T> g_bn1 = relu_backward(ctx.bn1_out, g_relu1);
    const Tensor<T> g_lin1 = bn1.backward(ctx.bn1_ctx, g_bn1);
    const Tensor<T> g_aug = lin1.backward(ctx.aug.features, g_lin1);
    return augment_backward(g_aug, ctx.aug.point_index, ctx.n_points, ctx.f_in);
  }

  void set_norm_mode(NormMode mode) {
    const NormMode m = cfg.use_batch_norm ? mode : NormMode::kIdentity;
    bn1.mode = m;
    bn2.mode = m;
    bn3.mode = m;
  }
  void collect(std::vector<Param<T>*>& out) {
    lin1.collect(out);
    bn1.collect(out);
    conv.collect(out);
    bn2.collect(out);
    lin2.collect(out);
    bn3.collect(out);
  }
  void update_running(const Ctx& ctx) {
    bn1.update_running(ctx.bn1_ctx);
    bn2.update_running(ctx.bn2_ctx);
    bn3.update_running(ctx.bn3_ctx);
  }
};

// ---------------------------------------------------------------------------
// point-based preprocessing (three point-to-point KPConv layers)
// ---------------------------------------------------------------------------

struct PreprocessConfig {
  std::size_t f_out = 64;
  int kernel_points = 9;
  double rho_k = 1.0;
  bool use_batch_norm = true;
  std::size_t position_channels = 2;  // leading feature columns holding x, y
};

/// Enriches the point cloud with learned, scale-agnostic features. All points
/// take part, including those outside any rendering grid. Output features are
/// [learned F_out || original sensor channels], i.e. the raw feature columns
/// after the leading position block are carried through.
template <typename T>
struct PreprocessStack {
  PreprocessConfig cfg;
  KpConv<T> conv[3];
  BatchNorm<T> bn[3];

  struct Ctx {
    NeighborLists neighbors;
    Tensor<T> inputs[3];       // features entering each conv
    Tensor<T> conv_out[3];
    Tensor<T> bn_out[3];
    typename BatchNorm<T>::Ctx bn_ctx[3];
    std::size_t f_in = 0;
  };

  double neighborhood_radius() const { return 2.5 * cfg.rho_k; }
  std::size_t sensor_channels(std::size_t f_in) const {
    return f_in - cfg.position_channels;
  }

  void init(std::size_t f_in, const PreprocessConfig& config, const std::string& name,
            Rng& rng) {
    cfg = config;
    for (int layer = 0; layer < 3; ++layer) {
      const std::size_t fin = layer == 0 ? f_in : cfg.f_out;
      conv[layer].init(cfg.kernel_points, neighborhood_radius(), fin, cfg.f_out,
                       name + ".kpconv" + std::to_string(layer), rng);
      bn[layer].init(cfg.f_out, name + ".bn" + std::to_string(layer));
      if (!cfg.use_batch_norm) bn[layer].mode = NormMode::kIdentity;
    }
  }

  PointCloud<T> forward(const PointCloud<T>& pc, Ctx& ctx) const {
    ctx.f_in = pc.feature_dim();
    if (pc.size() == 0) {
      PointCloud<T> out;
      out.features =
          Tensor<T>({0, cfg.f_out + sensor_channels(ctx.f_in)});
      return out;
    }
    const std::span<const Vec2> pts(pc.positions);
    ctx.neighbors = radius_neighbors(pts, pts, neighborhood_radius());
    Tensor<T> h = pc.features;
    for (int layer = 0; layer < 3; ++layer) {
      ctx.inputs[layer] = h;
      ctx.conv_out[layer] = conv[layer].forward(pts, pts, h, ctx.neighbors);
      ctx.bn_out[layer] = bn[layer].forward(ctx.conv_out[layer], ctx.bn_ctx[layer]);
      h = relu_forward(ctx.bn_out[layer]);
    }
    const auto [_, sensor] = split_channels(pc.features, cfg.position_channels);
    PointCloud<T> out;
    out.positions = pc.positions;
    out.features = concat_channels(h, sensor);
    return out;
  }

  /// grad_features: N x (F_out + sensor). Returns grad w.r.t. input features.
  Tensor<T> backward(const PointCloud<T>& pc, Ctx& ctx, const Tensor<T>& grad_features) {
    const std::span<const Vec2> pts(pc.positions);
    auto [g_learned, g_sensor] = split_channels(grad_features, cfg.f_out);
    Tensor<T> g = std::move(g_learned);
    for (int layer = 2; layer >= 0; --layer) {
      const Tensor<T> g_bn = relu_backward(ctx.bn_out[layer], g);
      const Tensor<T> g_conv = bn[layer].backward(ctx.bn_ctx[layer], g_bn);
      g = conv[layer].backward(pts, pts, ctx.inputs[layer], ctx.neighbors, g_conv);
    }
    // sensor channels pass straight through to the raw features
    for (std::size_t i = 0; i < pc.size(); ++i) {
      T* dst = g.row(i) + cfg.position_channels;
      const T* src = g_sensor.row(i);
      for (std::size_t f = 0; f < g_sensor.dim(1); ++f) dst[f] += src[f];
    }
    return g;
  }

  void set_norm_mode(NormMode mode) {
    const NormMode m = cfg.use_batch_norm ? mode : NormMode::kIdentity;
    for (auto& layer : bn) layer.mode = m;
  }
  void collect(std::vector<Param<T>*>& out) {
    for (int layer = 0; layer < 3; ++layer) {
      conv[layer].collect(out);
      bn[layer].collect(out);
    }
  }
  void update_running(const Ctx& ctx) {
    for (int layer = 0; layer < 3; ++layer) bn[layer].update_running(ctx.bn_ctx[layer]);
  }
};

}  // namespace kpbev
