#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "kpbev/tensor.hpp"

namespace kpbev {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double norm_sq() const { return x * x + y * y; }
  double norm() const { return std::sqrt(norm_sq()); }
};

/// BEV point cloud: 2D positions in meters plus per-point feature rows.
/// Positions are always kept in 64-bit; feature math runs in T.
template <typename T>
struct PointCloud {
  std::vector<Vec2> positions;
  Tensor<T> features;  // N x F_in

  std::size_t size() const { return positions.size(); }
  std::size_t feature_dim() const {
    return features.rank() == 2 ? features.dim(1) : 0;
  }

  void validate() const {
    if (features.rank() != 2 || features.dim(0) != positions.size()) {
      throw ContractError("point cloud positions/features row mismatch");
    }
    for (const Vec2& p : positions) {
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
        throw ContractError("point cloud contains non-finite position");
      }
    }
  }

  template <typename U>
  PointCloud<U> cast() const {
    return PointCloud<U>{positions, features.template cast<U>()};
  }
};

/// Regular BEV grid of width W, height H and cell size s covering
/// [x_min, x_max) x [y_min, y_max). Cells are half-open.
struct GridSpec {
  double x_min = 0.0, y_min = 0.0;
  double x_max = 0.0, y_max = 0.0;
  double cell_size = 1.0;
  int width = 0;
  int height = 0;

  static GridSpec create(double x_min, double y_min, double x_max, double y_max,
                         double cell_size) {
    if (!(cell_size > 0.0)) throw ContractError("grid cell size must be > 0");
    if (!(x_max > x_min) || !(y_max > y_min)) {
      throw ContractError("grid extent must be non-empty");
    }
    const double wf = (x_max - x_min) / cell_size;
    const double hf = (y_max - y_min) / cell_size;
    const double wr = std::round(wf);
    const double hr = std::round(hf);
    if (std::abs(wf - wr) > 1e-9 * std::max(1.0, wf) ||
        std::abs(hf - hr) > 1e-9 * std::max(1.0, hf) || wr < 1.0 || hr < 1.0) {
      throw ContractError(
          "grid extent is not an integer multiple of the cell size");
    }
    return GridSpec{x_min, y_min, x_max, y_max, cell_size,
                    static_cast<int>(wr), static_cast<int>(hr)};
  }

  Vec2 cell_center(int ix, int iy) const {
    return {x_min + (ix + 0.5) * cell_size, y_min + (iy + 0.5) * cell_size};
  }

  std::size_t cell_count() const {
    return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  }

  bool operator==(const GridSpec&) const = default;
};

struct CellIndex {
  int ix = 0;
  int iy = 0;
  bool operator==(const CellIndex&) const = default;
};

/// Result of projecting points into a grid. Out-of-grid points are flagged,
/// never dropped.
struct Projection {
  std::vector<CellIndex> cells;   // valid only where in_grid
  std::vector<std::uint8_t> in_grid;

  std::size_t in_grid_count() const {
    std::size_t n = 0;
    for (auto f : in_grid) n += f;
    return n;
  }
};

template <typename T>
Projection project_points(const PointCloud<T>& pc, const GridSpec& grid) {
  Projection out;
  out.cells.resize(pc.size());
  out.in_grid.resize(pc.size());
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const Vec2 p = pc.positions[i];
    const int ix = static_cast<int>(std::floor((p.x - grid.x_min) / grid.cell_size));
    const int iy = static_cast<int>(std::floor((p.y - grid.y_min) / grid.cell_size));
    const bool ok = ix >= 0 && ix < grid.width && iy >= 0 && iy < grid.height;
    out.in_grid[i] = ok ? 1 : 0;
    out.cells[i] = ok ? CellIndex{ix, iy} : CellIndex{-1, -1};
  }
  return out;
}

/// One synthetic anchor point at the center of each non-empty grid cell,
/// sorted by (iy, ix). point_to_anchor maps every input point to its anchor,
/// or kNoAnchor for out-of-grid points.
struct AnchorSet {
  static constexpr std::int32_t kNoAnchor = -1;

  std::vector<Vec2> positions;        // N_a cell centers
  std::vector<CellIndex> cells;       // N_a
  std::vector<std::int32_t> point_to_anchor;  // N_in

  std::size_t size() const { return positions.size(); }
};

template <typename T>
AnchorSet generate_anchors(const PointCloud<T>& pc, const GridSpec& grid,
                           const Projection& proj) {
  AnchorSet out;
  out.point_to_anchor.assign(pc.size(), AnchorSet::kNoAnchor);

  std::vector<std::int64_t> keys;
  keys.reserve(pc.size());
  for (std::size_t i = 0; i < pc.size(); ++i) {
    if (!proj.in_grid[i]) continue;
    keys.push_back(static_cast<std::int64_t>(proj.cells[i].iy) * grid.width +
                   proj.cells[i].ix);
  }
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());

  out.positions.reserve(keys.size());
  out.cells.reserve(keys.size());
  std::unordered_map<std::int64_t, std::int32_t> anchor_of_cell;
  anchor_of_cell.reserve(keys.size() * 2);
  for (std::int64_t key : keys) {
    const int ix = static_cast<int>(key % grid.width);
    const int iy = static_cast<int>(key / grid.width);
    anchor_of_cell.emplace(key, static_cast<std::int32_t>(out.positions.size()));
    out.positions.push_back(grid.cell_center(ix, iy));
    out.cells.push_back(CellIndex{ix, iy});
  }
  for (std::size_t i = 0; i < pc.size(); ++i) {
    if (!proj.in_grid[i]) continue;
    const std::int64_t key =
        static_cast<std::int64_t>(proj.cells[i].iy) * grid.width + proj.cells[i].ix;
    out.point_to_anchor[i] = anchor_of_cell.at(key);
  }
  return out;
}

template <typename T>
AnchorSet generate_anchors(const PointCloud<T>& pc, const GridSpec& grid) {
  return generate_anchors(pc, grid, project_points(pc, grid));
}

/// Per-anchor centroid of the member points and their count.
struct CellStats {
  std::vector<Vec2> centroid;  // N_a
  std::vector<int> count;      // N_a, each >= 1
};

template <typename T>
CellStats cell_centroids(const PointCloud<T>& pc, const AnchorSet& anchors) {
  CellStats stats;
  stats.centroid.assign(anchors.size(), Vec2{});
  stats.count.assign(anchors.size(), 0);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const std::int32_t a = anchors.point_to_anchor[i];
    if (a == AnchorSet::kNoAnchor) continue;
    stats.centroid[a] = stats.centroid[a] + pc.positions[i];
    stats.count[a] += 1;
  }
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (stats.count[a] > 0) {
      stats.centroid[a] = stats.centroid[a] * (1.0 / stats.count[a]);
    }
  }
  return stats;
}

/// Closed-ball radius neighborhoods: every listed point i satisfies
/// ||x_i - q|| <= radius, boundary included. Lists are ascending by index.
struct NeighborLists {
  double radius = 0.0;
  std::vector<std::vector<std::int32_t>> lists;  // one per query

  std::size_t size() const { return lists.size(); }
  std::size_t total_neighbors() const {
    std::size_t n = 0;
    for (const auto& l : lists) n += l.size();
    return n;
  }
};

namespace detail {

inline std::uint64_t bucket_key(std::int64_t bx, std::int64_t by) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(bx)) << 32) |
         static_cast<std::uint64_t>(static_cast<std::uint32_t>(by));
}

}  // namespace detail

/// Uniform hash grid with bucket edge slightly above the radius; queries scan
/// the 3x3 bucket neighborhood, which covers the closed ball even when a
/// boundary point lands in the adjacent bucket after rounding.
inline NeighborLists radius_neighbors(std::span<const Vec2> queries,
                                      std::span<const Vec2> points,
                                      double radius) {
  if (!(radius > 0.0)) throw ContractError("neighbor radius must be > 0");
  NeighborLists out;
  out.radius = radius;
  out.lists.resize(queries.size());

  const double edge = radius * (1.0 + 1e-9);
  const double inv_edge = 1.0 / edge;
  const double r_sq = radius * radius;

  std::unordered_map<std::uint64_t, std::vector<std::int32_t>> buckets;
  buckets.reserve(points.size() * 2);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto bx = static_cast<std::int64_t>(std::floor(points[i].x * inv_edge));
    const auto by = static_cast<std::int64_t>(std::floor(points[i].y * inv_edge));
    buckets[detail::bucket_key(bx, by)].push_back(static_cast<std::int32_t>(i));
  }

  for (std::size_t q = 0; q < queries.size(); ++q) {
    const Vec2 qp = queries[q];
    const auto bx = static_cast<std::int64_t>(std::floor(qp.x * inv_edge));
    const auto by = static_cast<std::int64_t>(std::floor(qp.y * inv_edge));
    auto& list = out.lists[q];
    for (std::int64_t dy = -1; dy <= 1; ++dy) {
      for (std::int64_t dx = -1; dx <= 1; ++dx) {
        const auto it = buckets.find(detail::bucket_key(bx + dx, by + dy));
        if (it == buckets.end()) continue;
        for (std::int32_t i : it->second) {
          if ((points[i] - qp).norm_sq() <= r_sq) list.push_back(i);
        }
      }
    }
    std::sort(list.begin(), list.end());
  }
  return out;
}

/// Exhaustive O(M*N) oracle with the identical contract.
inline NeighborLists radius_neighbors_bruteforce(std::span<const Vec2> queries,
                                                 std::span<const Vec2> points,
                                                 double radius) {
  if (!(radius > 0.0)) throw ContractError("neighbor radius must be > 0");
  NeighborLists out;
  out.radius = radius;
  out.lists.resize(queries.size());
  const double r_sq = radius * radius;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    for (std::size_t i = 0; i < points.size(); ++i) {
      if ((points[i] - queries[q]).norm_sq() <= r_sq) {
        out.lists[q].push_back(static_cast<std::int32_t>(i));
      }
    }
  }
  return out;
}

template <typename T>
NeighborLists radius_neighbors(std::span<const Vec2> queries,
                               const PointCloud<T>& pc, double radius) {
  return radius_neighbors(queries, std::span<const Vec2>(pc.positions), radius);
}

}  // namespace kpbev
