#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "kpbev/geom.hpp"
#include "kpbev/ops.hpp"
#include "kpbev/tensor.hpp"

namespace kpbev {

/// Rigid 2D kernel point disposition: one point at the origin plus K-1 points
/// equally spaced on a circle of radius rho/2, first ring point on +x. Each
/// kernel point has influence radius rho_k = rho / 2.5; the convolution
/// gathers input points within the neighborhood radius rho.
struct KernelLayout {
  std::vector<Vec2> kernel_points;
  double influence_radius = 0.0;     // rho_k
  double neighborhood_radius = 0.0;  // rho
};

inline KernelLayout make_layout(int k, double rho) {
  if (k < 1) throw ContractError("kernel layout requires K >= 1");
  if (!(rho > 0.0)) throw ContractError("kernel layout requires rho > 0");
  KernelLayout layout;
  layout.neighborhood_radius = rho;
  layout.influence_radius = rho / 2.5;
  layout.kernel_points.push_back({0.0, 0.0});
  const double ring_radius = rho / 2.0;
  for (int i = 0; i < k - 1; ++i) {
    const double angle = 2.0 * M_PI * i / (k - 1);
    layout.kernel_points.push_back(
        {ring_radius * std::cos(angle), ring_radius * std::sin(angle)});
  }
  return layout;
}

/// Linear correlation between a kernel point and a relative input position:
/// h = max(0, 1 - ||x_k - y|| / rho_k).
inline double correlation(Vec2 kernel_point, Vec2 y, double rho_k) {
  if (!(rho_k > 0.0)) throw ContractError("correlation requires rho_k > 0");
  return std::max(0.0, 1.0 - (kernel_point - y).norm() / rho_k);
}

/// Number of convolution evaluations for a pass over the given output set
/// (one evaluation per output point).
inline std::size_t convolution_count(std::size_t n_outputs) { return n_outputs; }

/// Rigid kernel point convolution between arbitrary input and output point
/// sets:
///
///   f_a = sum_{i in N_a} f_i * sum_k h(x_k, x_i - x_a) W_k
///
/// Output rows with empty neighborhoods stay zero. out_points == in_points
/// gives point-to-point mode; out_points == anchors gives grid-encoder mode.
template <typename T>
struct KpConv {
  KernelLayout layout;
  Param<T> weights;  // K x F_in x F_out

  void init(int k, double rho, std::size_t fin, std::size_t fout,
            const std::string& name, Rng& rng) {
    layout = make_layout(k, rho);
    weights = Param<T>(name + ".weights",
                       Tensor<T>({layout.kernel_points.size(), fin, fout}));
    kaiming_uniform(weights.value, fin, rng);
  }

  std::size_t kernel_count() const { return layout.kernel_points.size(); }
  std::size_t fin() const { return weights.value.dim(1); }
  std::size_t fout() const { return weights.value.dim(2); }

  Tensor<T> forward(std::span<const Vec2> out_points,
                    std::span<const Vec2> in_points,
                    const Tensor<T>& in_features,
                    const NeighborLists& neighbors) const {
    check(out_points, in_points, in_features, neighbors);
    const std::size_t m = out_points.size();
    const std::size_t k_n = kernel_count(), fi_n = fin(), fo_n = fout();
    const double rho_k = layout.influence_radius;

    Tensor<T> out({m, fo_n});
    std::vector<T> weighted(k_n * fi_n);  // per-kernel-point feature sums
    for (std::size_t a = 0; a < m; ++a) {
      std::fill(weighted.begin(), weighted.end(), T(0));
      bool any = false;
      for (std::int32_t i : neighbors.lists[a]) {
        const Vec2 rel = in_points[i] - out_points[a];
        const T* fr = in_features.row(static_cast<std::size_t>(i));
        for (std::size_t k = 0; k < k_n; ++k) {
          const double h = correlation(layout.kernel_points[k], rel, rho_k);
          if (h <= 0.0) continue;
          any = true;
          const T hv = static_cast<T>(h);
          T* wk = weighted.data() + k * fi_n;
          for (std::size_t f = 0; f < fi_n; ++f) wk[f] += hv * fr[f];
        }
      }
      if (!any) continue;
      T* orow = out.row(a);
      for (std::size_t k = 0; k < k_n; ++k) {
        const T* wk = weighted.data() + k * fi_n;
        const T* wmat = &weights.value(k, 0, 0);
        for (std::size_t f = 0; f < fi_n; ++f) {
          const T v = wk[f];
          if (v == T(0)) continue;
          const T* wrow = wmat + f * fo_n;
          for (std::size_t o = 0; o < fo_n; ++o) orow[o] += v * wrow[o];
        }
      }
    }
    return out;
  }

  /// Accumulates into weights.grad; returns grad w.r.t. in_features.
  Tensor<T> backward(std::span<const Vec2> out_points,
                     std::span<const Vec2> in_points,
                     const Tensor<T>& in_features,
                     const NeighborLists& neighbors,
                     const Tensor<T>& grad_out) {
    check(out_points, in_points, in_features, neighbors);
    const std::size_t m = out_points.size();
    const std::size_t k_n = kernel_count(), fi_n = fin(), fo_n = fout();
    const double rho_k = layout.influence_radius;

    Tensor<T> gx({in_features.dim(0), fi_n});
    std::vector<T> weighted(k_n * fi_n);   // sum_i h_ik f_i, for dW_k
    std::vector<T> upstream(k_n * fi_n);   // g_a W_k^T, for df_i
    for (std::size_t a = 0; a < m; ++a) {
      if (neighbors.lists[a].empty()) continue;
      const T* gr = grad_out.row(a);
      for (std::size_t k = 0; k < k_n; ++k) {
        const T* wmat = &weights.value(k, 0, 0);
        T* up = upstream.data() + k * fi_n;
        for (std::size_t f = 0; f < fi_n; ++f) {
          const T* wrow = wmat + f * fo_n;
          T acc = 0;
          for (std::size_t o = 0; o < fo_n; ++o) acc += gr[o] * wrow[o];
          up[f] = acc;
        }
      }
      std::fill(weighted.begin(), weighted.end(), T(0));
      for (std::int32_t i : neighbors.lists[a]) {
        const Vec2 rel = in_points[i] - out_points[a];
        const T* fr = in_features.row(static_cast<std::size_t>(i));
        T* gxr = gx.row(static_cast<std::size_t>(i));
        for (std::size_t k = 0; k < k_n; ++k) {
          const double h = correlation(layout.kernel_points[k], rel, rho_k);
          if (h <= 0.0) continue;
          const T hv = static_cast<T>(h);
          const T* up = upstream.data() + k * fi_n;
          T* wk = weighted.data() + k * fi_n;
          for (std::size_t f = 0; f < fi_n; ++f) {
            gxr[f] += hv * up[f];
            wk[f] += hv * fr[f];
          }
        }
      }
      for (std::size_t k = 0; k < k_n; ++k) {
        const T* wk = weighted.data() + k * fi_n;
        T* gwmat = &weights.grad(k, 0, 0);
        for (std::size_t f = 0; f < fi_n; ++f) {
          const T v = wk[f];
          if (v == T(0)) continue;
          T* gwrow = gwmat + f * fo_n;
          for (std::size_t o = 0; o < fo_n; ++o) gwrow[o] += v * gr[o];
        }
      }
    }
    return gx;
  }

  void collect(std::vector<Param<T>*>& out) { out.push_back(&weights); }

 private:
  void check(std::span<const Vec2> out_points, std::span<const Vec2> in_points,
             const Tensor<T>& in_features, const NeighborLists& neighbors) const {
    if (in_features.rank() != 2 || in_features.dim(0) != in_points.size() ||
        in_features.dim(1) != fin()) {
      throw ContractError("kpconv: feature shape mismatch");
    }
    if (neighbors.size() != out_points.size()) {
      throw ContractError("kpconv: neighbor lists do not match output points");
    }
    const double rho = layout.neighborhood_radius;
    if (std::abs(neighbors.radius - rho) > 1e-12 * std::max(1.0, rho)) {
      throw ContractError("kpconv: neighbor radius differs from layout radius");
    }
  }
};

}  // namespace kpbev
