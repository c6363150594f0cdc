#pragma once

#include <array>
#include <variant>
#include <vector>

#include "kpbev/encoders.hpp"

namespace kpbev {

inline constexpr std::size_t kNumScales = 4;

/// The four backbone scales {s0, 2*s0, 4*s0, 8*s0}, each covering the same
/// spatial extent. Requires the extent to be divisible by 16*s0 so every
/// downsampled map aligns exactly.
struct ScaleSet {
  double s0 = 0.0;
  std::array<double, kNumScales> scales{};
  std::array<GridSpec, kNumScales> grids{};
};

inline ScaleSet derive_scales(const GridSpec& grid0) {
  if (grid0.width % 16 != 0 || grid0.height % 16 != 0) {
    throw ContractError(
        "multi-scale rendering requires the grid extent to be divisible by "
        "16*s0 (got " +
        std::to_string(grid0.width) + "x" + std::to_string(grid0.height) +
        " cells at s0)");
  }
  ScaleSet set;
  set.s0 = grid0.cell_size;
  for (std::size_t i = 0; i < kNumScales; ++i) {
    const int factor = 1 << i;
    set.scales[i] = grid0.cell_size * factor;
    set.grids[i] = GridSpec::create(grid0.x_min, grid0.y_min, grid0.x_max,
                                    grid0.y_max, set.scales[i]);
  }
  return set;
}

/// Influence radius matched to the cell size of scale s_i:
/// rho_{k,i} = (s_i / s_0) * rho_{k,0}.
inline double adaptive_radius(double s_i, double s0, double rho_k0) {
  return (s_i / s0) * rho_k0;
}

/// One grid rendering per backbone scale, each with its own encoder weights.
/// With the adaptive radius enabled (the default for KPBEV), the kernel
/// influence radius grows with the cell size; with it disabled the radius is
/// held at rho_{k,0}, reproducing the constant-radius failure mode where
/// coarse-scale neighborhoods shrink below the cell size.
template <typename T>
struct MultiScaleEncoder {
  using ScaleEncoder = std::variant<PillarsEncoder<T>, KpbevEncoder<T>>;

  ScaleSet scale_set;
  bool adaptive = true;
  std::vector<ScaleEncoder> encoders;  // kNumScales entries

  struct Ctx {
    std::array<typename PillarsEncoder<T>::Ctx, kNumScales> pillars;
    std::array<typename KpbevEncoder<T>::Ctx, kNumScales> kpbev;
  };

  void init(std::size_t f_in, const EncoderConfig& cfg, const ScaleSet& scales,
            bool adaptive_radius_on, const std::string& name, Rng& rng) {
    scale_set = scales;
    adaptive = adaptive_radius_on;
    encoders.clear();
    for (std::size_t i = 0; i < kNumScales; ++i) {
      EncoderConfig scale_cfg = cfg;
      if (cfg.kind == EncoderKind::kKpbev && adaptive) {
        scale_cfg.rho_k = adaptive_radius(scale_set.scales[i], scale_set.s0, cfg.rho_k);
      }
      const std::string scale_name = name + ".scale" + std::to_string(i);
      if (cfg.kind == EncoderKind::kPillars) {
        PillarsEncoder<T> enc;
        enc.init(f_in, scale_cfg, scale_name, rng);
        encoders.emplace_back(std::move(enc));
      } else {
        KpbevEncoder<T> enc;
        enc.init(f_in, scale_cfg, scale_name, rng);
        encoders.emplace_back(std::move(enc));
      }
    }
  }

  std::vector<FeatureMap<T>> forward(const PointCloud<T>& pc, Ctx& ctx) const {
    std::vector<FeatureMap<T>> maps;
    maps.reserve(kNumScales);
    for (std::size_t i = 0; i < kNumScales; ++i) {
      if (const auto* p = std::get_if<PillarsEncoder<T>>(&encoders[i])) {
        maps.push_back(p->forward(pc, scale_set.grids[i], ctx.pillars[i]));
      } else {
        maps.push_back(std::get<KpbevEncoder<T>>(encoders[i])
                           .forward(pc, scale_set.grids[i], ctx.kpbev[i]));
      }
    }
    return maps;
  }

  /// Sums the per-scale gradients w.r.t. the shared input features.
  Tensor<T> backward(const PointCloud<T>& pc, Ctx& ctx,
                     const std::vector<Tensor<T>>& grad_maps) {
    Tensor<T> gx({pc.size(), pc.feature_dim()});
    for (std::size_t i = 0; i < kNumScales; ++i) {
      if (auto* p = std::get_if<PillarsEncoder<T>>(&encoders[i])) {
        gx.add_scaled(p->backward(ctx.pillars[i], grad_maps[i]), T(1));
      } else {
        gx.add_scaled(std::get<KpbevEncoder<T>>(encoders[i])
                          .backward(ctx.kpbev[i], grad_maps[i]),
                      T(1));
      }
    }
    return gx;
  }

  void set_norm_mode(NormMode mode) {
    for (auto& e : encoders) {
      std::visit([mode](auto& enc) { enc.set_norm_mode(mode); }, e);
    }
  }
  void collect(std::vector<Param<T>*>& out) {
    for (auto& e : encoders) {
      std::visit([&out](auto& enc) { enc.collect(out); }, e);
    }
  }
  void update_running(const Ctx& ctx) {
    for (std::size_t i = 0; i < kNumScales; ++i) {
      if (auto* p = std::get_if<PillarsEncoder<T>>(&encoders[i])) {
        p->update_running(ctx.pillars[i]);
      } else {
        std::get<KpbevEncoder<T>>(encoders[i]).update_running(ctx.kpbev[i]);
      }
    }
  }
};

/// Channel concatenation of a backbone stage map with the rendering for that
/// scale; spatial dimensions must agree.
template <typename T>
Tensor<T> fuse_into_backbone(const Tensor<T>& backbone_map,
                             const Tensor<T>& rendered_map) {
  if (backbone_map.dim(0) != rendered_map.dim(0) ||
      backbone_map.dim(1) != rendered_map.dim(1)) {
    throw ContractError("fuse_into_backbone: spatial dims differ: " +
                        shape_str(backbone_map.shape()) + " vs " +
                        shape_str(rendered_map.shape()));
  }
  return concat_channels(backbone_map, rendered_map);
}

}  // namespace kpbev
