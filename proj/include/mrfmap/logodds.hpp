#pragma once

// Conventional independent-cell occupancy grid with an inverse sensor model and clamped log-odds
// updates, stored on the same brick-sparse topology as the MRF map.

#include <cmath>
#include <cstdint>
#include <vector>

#include "mrfmap/dataset.hpp"
#include "mrfmap/error.hpp"
#include "mrfmap/probability_map.hpp"
#include "mrfmap/sparse_grid.hpp"

namespace mrfmap {

inline double logit(double p) { return std::log(p / (1.0 - p)); }
inline double sigmoid(double l) { return 1.0 / (1.0 + std::exp(-l)); }

struct LogOddsConfig {
  double p_hit = 0.7;
  double p_miss = 0.4;
  double clamp_min = 0.12;
  double clamp_max = 0.97;
  double max_range = 1e9;  // m

  void validate() const {
    if (!(p_miss > 0 && p_miss < 0.5 && p_hit > 0.5 && p_hit < 1))
      throw Error(ErrorKind::InvalidArgument, "require 0 < p_miss < 0.5 < p_hit < 1");
    if (!(clamp_min > 0 && clamp_min < clamp_max && clamp_max < 1))
      throw Error(ErrorKind::InvalidArgument, "require 0 < clamp_min < clamp_max < 1");
    if (!(max_range > 0)) throw Error(ErrorKind::InvalidArgument, "max_range must be positive");
  }
};

class LogOddsMap {
 public:
  explicit LogOddsMap(const GridConfig& grid, const LogOddsConfig& cfg = {})
      : topo_(grid), cfg_(cfg), l_hit_(logit(cfg.p_hit)), l_miss_(logit(cfg.p_miss)), l_min_(logit(cfg.clamp_min)),
        l_max_(logit(cfg.clamp_max)) {
    cfg_.validate();
  }

  const SparseTopology& topology() const { return topo_; }
  const LogOddsConfig& config() const { return cfg_; }

  /// Log-odds of a voxel; 0 when never observed.
  double log_odds(const Vec3i& voxel) const {
    const VoxelRef r = topo_.locate(voxel);
    return r.allocated() ? l_[flat(r)] : 0.0;
  }

  double probability(const Vec3i& voxel) const { return sigmoid(log_odds(voxel)); }

  /// Integrates one depth image. Each voxel receives at most one update per scan; a voxel that
  /// holds some ray's endpoint is a hit even if other rays pass through it.
  void integrate_scan(const CameraIntrinsics& intr, const Pose& pose, const DepthImage& depth) {
    const GridGeometry g = topo_.config().geometry();
    struct RaySeg {
      Ray ray;
      double s_end;
      bool has_hit;
    };
    std::vector<RaySeg> rays;
    for (int v = 0; v < depth.height; ++v) {
      for (int u = 0; u < depth.width; ++u) {
        if (!depth.valid(u, v)) continue;
        const Ray r = ray_from_depth(intr, pose, u, v, depth.at(u, v));
        const bool hit = r.measured_depth <= cfg_.max_range;
        rays.push_back({r, hit ? r.measured_depth : cfg_.max_range, hit});
      }
    }
    // Storage for every voxel touched by this scan.
    const double brick_side = g.voxel_side * topo_.config().brick_size;
    const GridGeometry bricks{g.origin, brick_side, topo_.config().brick_dims()};
    for (const auto& rs : rays) {
      for_each_voxel(bricks, rs.ray.origin, rs.ray.direction, rs.s_end, [&](const Vec3i& b, double, double) {
        allocate(b);
        return true;
      });
      if (rs.has_hit) {
        const Vec3i c = g.coord_of(rs.ray.at(rs.s_end));
        if (g.contains(c)) allocate(c / topo_.config().brick_size);
      }
    }
    std::vector<std::uint8_t> mark(l_.size(), 0);  // 1 miss, 2 hit
    for (const auto& rs : rays) {
      const Vec3i end = g.coord_of(rs.ray.at(rs.s_end));
      for_each_voxel(g, rs.ray.origin, rs.ray.direction, rs.s_end, [&](const Vec3i& c, double, double) {
        if (rs.has_hit && c == end) return true;
        auto& m = mark[flat(topo_.locate(c))];
        if (m == 0) m = 1;
        return true;
      });
      if (rs.has_hit && g.contains(end)) mark[flat(topo_.locate(end))] = 2;
    }
    for (std::size_t i = 0; i < mark.size(); ++i) {
      if (mark[i] == 0) continue;
      l_[i] = std::clamp(l_[i] + (mark[i] == 2 ? l_hit_ : l_miss_), l_min_, l_max_);
    }
  }

  ProbabilityMap to_probability_map() const {
    ProbabilityMap m(topo_, MapKind::LogOdds, 0.5);
    auto& v = m.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(sigmoid(l_[i]));
    return m;
  }

 private:
  std::size_t flat(const VoxelRef& r) const {
    return static_cast<std::size_t>(r.brick) * topo_.config().voxels_per_brick() + r.slot;
  }

  void allocate(const Vec3i& brick) {
    if (topo_.allocate(brick)) l_.resize(topo_.brick_count() * topo_.config().voxels_per_brick(), 0.0);
  }

  SparseTopology topo_;
  LogOddsConfig cfg_;
  double l_hit_, l_miss_, l_min_, l_max_;
  std::vector<double> l_;
};

inline ProbabilityMap build_logodds_map(const GridConfig& grid, const CameraIntrinsics& intr,
                                        const std::vector<Keyframe>& keyframes, const LogOddsConfig& cfg = {}) {
  LogOddsMap map(grid, cfg);
  for (const auto& kf : keyframes) map.integrate_scan(intr, kf.pose, kf.depth);
  return map.to_probability_map();
}

}  // namespace mrfmap
