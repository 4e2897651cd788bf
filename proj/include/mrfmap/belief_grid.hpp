#pragma once

// Per-voxel belief state for ray-MRF inference: a Bernoulli prior per voxel and, per keyframe, the
// average of the outgoing messages that the keyframe's rays sent to each voxel.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <unordered_map>
#include <vector>

#include "mrfmap/error.hpp"
#include "mrfmap/geometry.hpp"
#include "mrfmap/image.hpp"
#include "mrfmap/probability_map.hpp"
#include "mrfmap/ray_messages.hpp"
#include "mrfmap/sensor_model.hpp"
#include "mrfmap/sparse_grid.hpp"

namespace mrfmap {

/// Running sum of normalized messages in 2^-40 fixed point. Integer sums make concurrent
/// accumulation exact and independent of the order in which rays arrive.
struct MessageAccumulator {
  std::uint64_t weight1 = 0;
  std::uint32_t rays = 0;
};

inline constexpr double kMessageQuantum = 1099511627776.0;  // 2^40

class KeyframeBuffer {
 public:
  explicit KeyframeBuffer(int keyframe_id = 0) : keyframe_id_(keyframe_id) {}

  int keyframe_id() const { return keyframe_id_; }
  std::size_t size() const { return slots_.size(); }
  void resize(std::size_t n) { slots_.resize(n); }
  void clear() { std::fill(slots_.begin(), slots_.end(), MessageAccumulator{}); }

  /// Thread-safe with respect to other accumulate calls.
  void accumulate(std::size_t index, MessagePair msg) {
    msg.normalize();
    const auto q = static_cast<std::uint64_t>(std::llround(std::clamp(msg.m1, 0.0, 1.0) * kMessageQuantum));
    std::atomic_ref<std::uint64_t>(slots_[index].weight1).fetch_add(q, std::memory_order_relaxed);
    std::atomic_ref<std::uint32_t>(slots_[index].rays).fetch_add(1, std::memory_order_relaxed);
  }

  std::uint32_t rays(std::size_t index) const { return slots_[index].rays; }

  /// Mean message over all accumulated rays; uniform when nothing was accumulated.
  MessagePair average(std::size_t index) const {
    const MessageAccumulator& a = slots_[index];
    if (a.rays == 0) return MessagePair::uniform();
    const double total = static_cast<double>(a.rays) * kMessageQuantum;
    const double w1 = static_cast<double>(a.weight1);
    return {(total - w1) / total, w1 / total};
  }

 private:
  int keyframe_id_;
  std::vector<MessageAccumulator> slots_;
};

struct AllocationStats {
  std::size_t new_bricks = 0;
  std::size_t out_of_bounds_points = 0;
};

class BeliefGrid {
 public:
  BeliefGrid() = default;
  explicit BeliefGrid(const GridConfig& cfg, double prior = 0.1, double message_floor = 1e-30)
      : topo_(cfg), prior_(prior), floor_(message_floor) {
    if (!(prior > 0 && prior < 1)) throw Error(ErrorKind::InvalidArgument, "prior must lie in (0, 1)");
    log_prior0_ = std::log1p(-prior_);
    log_prior1_ = std::log(prior_);
  }

  const SparseTopology& topology() const { return topo_; }
  const GridConfig& config() const { return topo_.config(); }
  double prior() const { return prior_; }
  double message_floor() const { return floor_; }
  std::size_t voxel_slots() const { return topo_.brick_count() * static_cast<std::size_t>(config().voxels_per_brick()); }

  std::size_t flat(const VoxelRef& r) const {
    return static_cast<std::size_t>(r.brick) * config().voxels_per_brick() + r.slot;
  }

  bool allocate_brick(const Vec3i& brick) {
    if (!topo_.allocate(brick)) return false;
    for (auto& b : buffers_) b.resize(voxel_slots());
    return true;
  }

  /// Allocates every brick overlapping a cube of half-width sigma_multiplier * sigma around each
  /// back-projected depth point (sigma in range units, from the noise model at that pixel).
  AllocationStats allocate_for_depth_image(const CameraIntrinsics& intr, const Pose& pose, const DepthImage& depth,
                                           const SensorNoiseModel& noise, double sigma_multiplier = 3.0) {
    AllocationStats stats;
    const GridGeometry g = config().geometry();
    const Vec3 hi_corner = g.max_corner();
    const double brick_side = config().voxel_side * config().brick_size;
    const Vec3i bd = config().brick_dims();
    std::vector<char> mark(topo_.table_size(), 0);
    for (int v = 0; v < depth.height; ++v) {
      for (int u = 0; u < depth.width; ++u) {
        const double z = depth.at(u, v);
        if (!DepthImage::is_valid(z)) continue;
        const Ray ray = ray_from_depth(intr, pose, u, v, z);
        const Vec3 p = ray.at(ray.measured_depth);
        if ((p.array() < g.origin.array()).any() || (p.array() >= hi_corner.array()).any()) {
          ++stats.out_of_bounds_points;
          continue;
        }
        const double r = sigma_multiplier * noise.sigma(u, v, z) * ray.range_factor;
        Vec3i lo, up;
        for (int a = 0; a < 3; ++a) {
          lo[a] = std::clamp(static_cast<int>(std::floor((p[a] - r - g.origin[a]) / brick_side)), 0, bd[a] - 1);
          up[a] = std::clamp(static_cast<int>(std::floor((p[a] + r - g.origin[a]) / brick_side)), 0, bd[a] - 1);
        }
        for (int z3 = lo.z(); z3 <= up.z(); ++z3)
          for (int y3 = lo.y(); y3 <= up.y(); ++y3)
            for (int x3 = lo.x(); x3 <= up.x(); ++x3) mark[topo_.brick_linear({x3, y3, z3})] = 1;
      }
    }
    // Allocate in table order so the layout does not depend on pixel order.
    for (std::size_t lin = 0; lin < mark.size(); ++lin) {
      if (!mark[lin]) continue;
      const int l = static_cast<int>(lin);
      if (allocate_brick({l % bd.x(), (l / bd.x()) % bd.y(), l / (bd.x() * bd.y())})) ++stats.new_bricks;
    }
    return stats;
  }

  /// Registers a message buffer for a keyframe; returns its index.
  std::size_t add_keyframe(int keyframe_id) {
    if (buffer_index_.contains(keyframe_id)) throw Error(ErrorKind::InvalidArgument, "duplicate keyframe id");
    buffer_index_[keyframe_id] = buffers_.size();
    buffers_.emplace_back(keyframe_id);
    buffers_.back().resize(voxel_slots());
    return buffers_.size() - 1;
  }

  std::size_t keyframe_count() const { return buffers_.size(); }
  KeyframeBuffer& buffer(std::size_t index) { return buffers_.at(index); }
  const KeyframeBuffer& buffer(std::size_t index) const { return buffers_.at(index); }

  std::size_t buffer_index(int keyframe_id) const {
    auto it = buffer_index_.find(keyframe_id);
    if (it == buffer_index_.end()) throw Error(ErrorKind::InvalidArgument, "unknown keyframe id");
    return it->second;
  }

  VoxelRef require(const Vec3i& voxel) const {
    const VoxelRef r = topo_.locate(voxel);
    if (!r.allocated()) throw Error(ErrorKind::UnallocatedVoxel, "voxel is not in an allocated brick");
    return r;
  }

  void accumulate_outgoing(std::size_t buffer_idx, const Vec3i& voxel, const MessagePair& msg) {
    buffers_.at(buffer_idx).accumulate(flat(require(voxel)), msg);
  }

  /// Normalized product of the prior and the average messages of every keyframe except
  /// `exclude_buffer` (pass npos to include all), accumulated in log space.
  MessagePair incoming_product(std::size_t flat_index, std::size_t exclude_buffer) const {
    double l0 = log_prior0_;
    double l1 = log_prior1_;
    for (std::size_t k = 0; k < buffers_.size(); ++k) {
      if (k == exclude_buffer || buffers_[k].rays(flat_index) == 0) continue;
      const MessagePair m = buffers_[k].average(flat_index);
      l0 += std::log(std::max(m.m0, floor_));
      l1 += std::log(std::max(m.m1, floor_));
    }
    const double top = std::max(l0, l1);
    const double e0 = std::exp(l0 - top);
    const double e1 = std::exp(l1 - top);
    return {e0 / (e0 + e1), e1 / (e0 + e1)};
  }

  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  MessagePair incoming_product(const Vec3i& voxel, std::optional<int> exclude_keyframe = std::nullopt) const {
    const std::size_t ex = exclude_keyframe ? buffer_index(*exclude_keyframe) : npos;
    return incoming_product(flat(require(voxel)), ex);
  }

  double marginal(const Vec3i& voxel) const { return incoming_product(flat(require(voxel)), npos).m1; }

  /// Marginal for allocated voxels, the prior elsewhere.
  double marginal_or_prior(const Vec3i& voxel) const {
    const VoxelRef r = topo_.locate(voxel);
    return r.allocated() ? incoming_product(flat(r), npos).m1 : prior_;
  }

  ProbabilityMap to_probability_map() const {
    ProbabilityMap m(topo_, MapKind::Mrf, prior_);
    auto& v = m.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(incoming_product(i, npos).m1);
    return m;
  }

  std::vector<OccupiedVoxel> export_occupied(double threshold) const {
    return to_probability_map().export_occupied(threshold);
  }

 private:
  SparseTopology topo_;
  double prior_ = 0.1;
  double floor_ = 1e-30;
  double log_prior0_ = std::log(0.9);
  double log_prior1_ = std::log(0.1);
  std::vector<KeyframeBuffer> buffers_;
  std::unordered_map<int, std::size_t> buffer_index_;
};

}  // namespace mrfmap
