#pragma once

// Brick-sparse voxel storage. The volume is tiled by cubic bricks of B^3 voxels; a dense brick table
// maps brick coordinates to slots in contiguous per-brick storage. Unallocated bricks own no
// per-voxel data and are skipped as whole spans during ray traversal.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "mrfmap/error.hpp"
#include "mrfmap/geometry.hpp"

namespace mrfmap {

struct GridConfig {
  Vec3 origin = Vec3::Zero();
  double voxel_side = 0.05;
  int brick_size = 8;
  Vec3i dims = Vec3i::Constant(64);

  void validate() const {
    if (!(voxel_side > 0) || !std::isfinite(voxel_side))
      throw Error(ErrorKind::InvalidArgument, "voxel side must be positive");
    if (brick_size < 2 || (brick_size & (brick_size - 1)) != 0)
      throw Error(ErrorKind::InvalidArgument, "brick size must be a power of two >= 2");
    for (int a = 0; a < 3; ++a) {
      if (dims[a] <= 0 || dims[a] % brick_size != 0)
        throw Error(ErrorKind::InvalidArgument, "grid dims must be positive multiples of the brick size");
    }
    if (!origin.allFinite()) throw Error(ErrorKind::InvalidArgument, "grid origin must be finite");
  }

  /// Smallest brick-aligned grid starting at `min_corner` that covers `max_corner`.
  static GridConfig covering(const Vec3& min_corner, const Vec3& max_corner, double voxel_side, int brick_size = 8) {
    GridConfig c;
    c.origin = min_corner;
    c.voxel_side = voxel_side;
    c.brick_size = brick_size;
    for (int a = 0; a < 3; ++a) {
      const double extent = max_corner[a] - min_corner[a];
      if (!(extent > 0)) throw Error(ErrorKind::InvalidArgument, "grid bounds must have positive extent");
      const auto voxels = static_cast<int>(std::ceil(extent / voxel_side - 1e-9));
      c.dims[a] = ((voxels + brick_size - 1) / brick_size) * brick_size;
    }
    c.validate();
    return c;
  }

  GridGeometry geometry() const { return {origin, voxel_side, dims}; }
  Vec3i brick_dims() const { return dims / brick_size; }
  int voxels_per_brick() const { return brick_size * brick_size * brick_size; }

  bool operator==(const GridConfig& o) const {
    return origin == o.origin && voxel_side == o.voxel_side && brick_size == o.brick_size && dims == o.dims;
  }
};

/// Location of a voxel inside allocated storage.
struct VoxelRef {
  std::int32_t brick = -1;
  std::int32_t slot = 0;
  bool allocated() const { return brick >= 0; }
};

/// Brick table plus the allocation order of bricks.
class SparseTopology {
 public:
  SparseTopology() = default;
  explicit SparseTopology(const GridConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const Vec3i bd = cfg_.brick_dims();
    table_.assign(static_cast<std::size_t>(bd.x()) * bd.y() * bd.z(), -1);
  }

  const GridConfig& config() const { return cfg_; }
  std::size_t brick_count() const { return bricks_.size(); }
  std::size_t table_size() const { return table_.size(); }
  const std::vector<Vec3i>& bricks() const { return bricks_; }

  std::size_t brick_linear(const Vec3i& b) const {
    const Vec3i bd = cfg_.brick_dims();
    return static_cast<std::size_t>(b.x()) + static_cast<std::size_t>(bd.x()) * (b.y() + static_cast<std::size_t>(bd.y()) * b.z());
  }

  bool brick_in_range(const Vec3i& b) const {
    const Vec3i bd = cfg_.brick_dims();
    return (b.array() >= 0).all() && (b.array() < bd.array()).all();
  }

  std::int32_t brick_index(const Vec3i& brick) const {
    return brick_in_range(brick) ? table_[brick_linear(brick)] : -1;
  }

  /// Returns true if the brick was newly allocated.
  bool allocate(const Vec3i& brick) {
    if (!brick_in_range(brick)) throw Error(ErrorKind::OutOfBounds, "brick outside grid");
    auto& entry = table_[brick_linear(brick)];
    if (entry >= 0) return false;
    entry = static_cast<std::int32_t>(bricks_.size());
    bricks_.push_back(brick);
    return true;
  }

  int slot_of(const Vec3i& voxel) const {
    const int b = cfg_.brick_size;
    const Vec3i l = voxel - (voxel / b) * b;
    return l.x() + b * (l.y() + b * l.z());
  }

  Vec3i voxel_of(std::int32_t brick, int slot) const {
    const int b = cfg_.brick_size;
    return bricks_[brick] * b + Vec3i(slot % b, (slot / b) % b, slot / (b * b));
  }

  VoxelRef locate(const Vec3i& voxel) const {
    if (!cfg_.geometry().contains(voxel)) return {};
    const std::int32_t br = brick_index(voxel / cfg_.brick_size);
    if (br < 0) return {};
    return {br, slot_of(voxel)};
  }

  /// Empty-skip traversal of [s_lo, s_hi] (clipped to the grid). For every allocated voxel crossed,
  /// calls voxel(VoxelRef, voxel coords, s_entry, s_exit); for every maximal run of unallocated
  /// bricks, calls skip(s_entry, s_exit). Either callback returns false to stop.
  template <typename VoxelFn, typename SkipFn>
  bool traverse(const Vec3& o, const Vec3& d, double s_lo, double s_hi, VoxelFn&& voxel, SkipFn&& skip) const {
    const GridGeometry g = cfg_.geometry();
    double s0 = s_lo;
    double s1 = s_hi;
    if (!detail::clip_to_box(g.origin, g.max_corner(), o, d, s0, s1)) return false;
    const int b = cfg_.brick_size;
    const double brick_side = cfg_.voxel_side * b;
    double skip_start = 0.0;
    bool skipping = false;
    bool go = true;
    dda_walk(g.origin, brick_side, Vec3i::Zero(), cfg_.brick_dims(), o, d, s0, s1,
             [&](const Vec3i& bc, double bs0, double bs1) {
               const std::int32_t br = table_[brick_linear(bc)];
               if (br < 0) {
                 if (!skipping) {
                   skipping = true;
                   skip_start = bs0;
                 }
                 return true;
               }
               if (skipping) {
                 skipping = false;
                 if (!skip(skip_start, bs0)) return go = false;
               }
               const Vec3i lo = bc * b;
               const Vec3i hi = lo + Vec3i::Constant(b);
               dda_walk(g.origin, cfg_.voxel_side, lo, hi, o, d, bs0, bs1, [&](const Vec3i& c, double a, double e) {
                 const Vec3i l = c - lo;
                 go = voxel(VoxelRef{br, l.x() + b * (l.y() + b * l.z())}, c, a, e);
                 return go;
               });
               return go;
             });
    if (go && skipping) skip(skip_start, s1);
    return true;
  }

 private:
  GridConfig cfg_;
  std::vector<std::int32_t> table_;
  std::vector<Vec3i> bricks_;
};

/// Traversal of the whole segment with unallocated runs reported as skipped steps.
inline RayTraversal traverse_sparse(const SparseTopology& topo, const Ray& ray, double s_max) {
  RayTraversal out;
  out.ray = ray;
  const bool hit = topo.traverse(
      ray.origin, ray.direction, 0.0, s_max,
      [&](VoxelRef, const Vec3i& c, double a, double b) {
        out.steps.push_back({c, a, b, false});
        return true;
      },
      [&](double a, double b) {
        if (b > a) out.steps.push_back({Vec3i::Constant(-1), a, b, true});
        return true;
      });
  if (!hit || out.steps.empty()) throw Error(ErrorKind::EmptyTraversal, "ray segment misses the grid volume");
  return out;
}

}  // namespace mrfmap
