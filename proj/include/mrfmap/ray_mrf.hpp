#pragma once

// Loopy belief propagation over the ray MRF: every valid depth pixel of every keyframe is a ray
// factor coupling the voxels it crosses near its measurement. Each pass sweeps the keyframes in
// insertion order; a keyframe's rays read the beliefs contributed by all other keyframes and write
// their outgoing messages into that keyframe's average-message buffer.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mrfmap/belief_grid.hpp"
#include "mrfmap/dataset.hpp"
#include "mrfmap/error.hpp"
#include "mrfmap/geometry.hpp"
#include "mrfmap/parallel.hpp"
#include "mrfmap/ray_messages.hpp"
#include "mrfmap/sensor_model.hpp"

namespace mrfmap {

struct InferenceConfig {
  double prior = 0.1;
  int passes = 3;
  double sigma_cutoff = 3.0;  // traverse this many standard deviations beyond the measurement
  double message_floor = 1e-30;
  unsigned threads = 0;  // 0: all hardware threads

  void validate() const {
    if (!(prior > 0 && prior < 1)) throw Error(ErrorKind::InvalidArgument, "prior must lie in (0, 1)");
    if (passes < 1) throw Error(ErrorKind::InvalidArgument, "at least one pass is required");
    if (!(sigma_cutoff > 0)) throw Error(ErrorKind::InvalidArgument, "sigma cutoff must be positive");
    if (!(message_floor > 0 && message_floor < 0.5)) throw Error(ErrorKind::InvalidArgument, "message floor out of range");
  }
};

/// One ray's factor: the allocated voxels it crosses up to the cutoff and the forward-model weight
/// of each voxel being the first occupied one. Weights are scaled so the largest is 1.
struct RayFactor {
  Ray ray;
  std::vector<TraversalStep> steps;
  std::vector<std::size_t> cells;  // flat belief-grid indices
  std::vector<double> nu;
  int keyframe_id = 0;
};

namespace detail {

struct RayScratch {
  std::vector<std::size_t> cells;
  std::vector<double> mid;
  std::vector<double> nu;
  std::vector<MessagePair> in;
  std::vector<MessagePair> out;
  std::vector<TraversalStep>* steps = nullptr;
};

/// Fills cells/mid/nu for one ray. Returns false when no allocated voxel lies inside the window.
inline bool build_factor(const BeliefGrid& grid, const SensorNoiseModel& noise, const Ray& ray, double cutoff,
                         RayScratch& s) {
  s.cells.clear();
  s.mid.clear();
  s.nu.clear();
  const double z = ray.z_depth();
  const double s_max = ray.measured_depth + cutoff * noise.sigma(ray.u, ray.v, z) * ray.range_factor;
  grid.topology().traverse(
      ray.origin, ray.direction, 0.0, s_max,
      [&](VoxelRef r, const Vec3i& c, double a, double b) {
        s.cells.push_back(grid.flat(r));
        s.mid.push_back(0.5 * (a + b));
        if (s.steps) s.steps->push_back({c, a, b, false});
        return true;
      },
      [](double, double) { return true; });
  if (s.cells.empty()) return false;
  // The sensor model lives in the camera's z-depth convention.
  double top = -std::numeric_limits<double>::infinity();
  for (double m : s.mid) {
    const double l = noise.log_nu(ray.u, ray.v, m / ray.range_factor, z);
    s.nu.push_back(l);
    top = std::max(top, l);
  }
  for (double& l : s.nu) l = std::exp(l - top);
  return true;
}

}  // namespace detail

inline RayFactor build_ray_factor(const BeliefGrid& grid, const SensorNoiseModel& noise, const Ray& ray,
                                  double sigma_cutoff = 3.0, int keyframe_id = 0) {
  if (!ray.valid) throw Error(ErrorKind::InvalidDepth, "ray has no valid depth");
  RayFactor f;
  f.ray = ray;
  f.keyframe_id = keyframe_id;
  detail::RayScratch s;
  s.steps = &f.steps;
  if (detail::build_factor(grid, noise, ray, sigma_cutoff, s)) {
    f.cells = s.cells;
    f.nu = s.nu;
  }
  return f;
}

struct InferenceStats {
  std::uint64_t rays = 0;
  std::uint64_t skipped_rays = 0;
  std::uint64_t steps = 0;
  std::uint64_t degenerate_messages = 0;
  std::vector<double> pass_seconds;
  std::vector<std::vector<double>> sweep_seconds;  // [pass][keyframe]
};

/// Owns the belief grid and the keyframes of one map.
class MrfMapper {
 public:
  MrfMapper(const GridConfig& grid, const CameraIntrinsics& intr, SensorNoiseModel noise, const InferenceConfig& cfg = {})
      : cfg_(cfg), intr_(intr), noise_(std::move(noise)), grid_(grid, cfg.prior, cfg.message_floor) {
    cfg_.validate();
    intr_.validate();
  }

  const BeliefGrid& grid() const { return grid_; }
  BeliefGrid& grid() { return grid_; }
  const InferenceConfig& config() const { return cfg_; }
  const std::vector<Keyframe>& keyframes() const { return keyframes_; }
  const SensorNoiseModel& noise() const { return noise_; }
  const InferenceStats& stats() const { return stats_; }

  /// Allocates bricks around the keyframe's depth points and registers its message buffer.
  AllocationStats add_keyframe(Keyframe kf) {
    kf.pose.validate();
    if (kf.depth.width != intr_.width || kf.depth.height != intr_.height)
      throw Error(ErrorKind::DimensionMismatch, "keyframe image does not match intrinsics");
    const AllocationStats a = grid_.allocate_for_depth_image(intr_, kf.pose, kf.depth, noise_, cfg_.sigma_cutoff);
    grid_.add_keyframe(kf.id);
    keyframes_.push_back(std::move(kf));
    log_total_.resize(grid_.voxel_slots(), {0.0, 0.0});
    return a;
  }

  /// Runs `passes` rounds (config default when 0). Each round sweeps every keyframe once.
  void run(int passes = 0) {
    if (passes <= 0) passes = cfg_.passes;
    sync_cache();
    for (int p = 0; p < passes; ++p) {
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<double> sweeps;
      for (std::size_t k = 0; k < keyframes_.size(); ++k) {
        const auto s0 = std::chrono::steady_clock::now();
        sweep(k);
        sweeps.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - s0).count());
      }
      stats_.sweep_seconds.push_back(std::move(sweeps));
      stats_.pass_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
  }

  /// One factor-to-variable sweep of keyframe `index`: its buffer is rebuilt from the current
  /// messages of all other keyframes.
  void sweep(std::size_t index) {
    sync_cache();
    KeyframeBuffer& buf = grid_.buffer(index);
    update_cache(index, -1.0);
    buf.clear();
    const Keyframe& kf = keyframes_[index];
    const unsigned threads = cfg_.threads ? cfg_.threads : default_thread_count();
    struct Counters {
      std::uint64_t rays = 0, skipped = 0, steps = 0, degenerate = 0;
    };
    std::vector<Counters> counters(threads);
    std::vector<detail::RayScratch> scratch(threads);
    const double floor = cfg_.message_floor;
    const double lp0 = std::log1p(-cfg_.prior);
    const double lp1 = std::log(cfg_.prior);
    parallel_for(static_cast<std::size_t>(intr_.height), 4, threads, [&](unsigned w, std::size_t v0, std::size_t v1) {
      detail::RayScratch& s = scratch[w];
      Counters& c = counters[w];
      for (std::size_t v = v0; v < v1; ++v) {
        for (int u = 0; u < intr_.width; ++u) {
          const double z = kf.depth.at(u, static_cast<int>(v));
          if (!DepthImage::is_valid(z)) continue;
          const Ray ray = ray_from_depth(intr_, kf.pose, u, static_cast<int>(v), z);
          ++c.rays;
          if (!detail::build_factor(grid_, noise_, ray, cfg_.sigma_cutoff, s)) {
            ++c.skipped;
            continue;
          }
          const std::size_t n = s.cells.size();
          s.in.resize(n);
          s.out.resize(n);
          for (std::size_t i = 0; i < n; ++i) {
            const auto& lt = log_total_[s.cells[i]];
            const double l0 = lp0 + lt[0];
            const double l1 = lp1 + lt[1];
            const double top = std::max(l0, l1);
            MessagePair m{std::exp(l0 - top), std::exp(l1 - top)};
            m.normalize();
            m.m0 = std::max(m.m0, floor);
            m.m1 = std::max(m.m1, floor);
            m.normalize();
            s.in[i] = m;
          }
          occupancy_messages(s.nu, s.in, s.out, &c.degenerate);
          for (std::size_t i = 0; i < n; ++i) buf.accumulate(s.cells[i], s.out[i]);
          c.steps += n;
        }
      }
    });
    for (const auto& c : counters) {
      stats_.rays += c.rays;
      stats_.skipped_rays += c.skipped;
      stats_.steps += c.steps;
      stats_.degenerate_messages += c.degenerate;
    }
    update_cache(index, +1.0);
  }

  ProbabilityMap to_probability_map() const { return grid_.to_probability_map(); }

 private:
  // log_total_[i] = sum over keyframes of log average message at voxel i, maintained incrementally.
  void update_cache(std::size_t index, double sign) {
    const KeyframeBuffer& buf = grid_.buffer(index);
    const double floor = cfg_.message_floor;
    for (std::size_t i = 0; i < log_total_.size(); ++i) {
      if (buf.rays(i) == 0) continue;
      const MessagePair m = buf.average(i);
      log_total_[i][0] += sign * std::log(std::max(m.m0, floor));
      log_total_[i][1] += sign * std::log(std::max(m.m1, floor));
    }
  }

  void sync_cache() {
    if (log_total_.size() != grid_.voxel_slots()) log_total_.resize(grid_.voxel_slots(), {0.0, 0.0});
  }

  InferenceConfig cfg_;
  CameraIntrinsics intr_;
  SensorNoiseModel noise_;
  BeliefGrid grid_;
  std::vector<Keyframe> keyframes_;
  std::vector<std::array<double, 2>> log_total_;
  InferenceStats stats_;
};

/// Builds a map from keyframes: allocate around every keyframe, then run the configured passes.
inline ProbabilityMap run_inference(const GridConfig& grid, const CameraIntrinsics& intr, const SensorNoiseModel& noise,
                                    const std::vector<Keyframe>& keyframes, const InferenceConfig& cfg,
                                    InferenceStats* stats = nullptr) {
  MrfMapper mapper(grid, intr, noise, cfg);
  for (const auto& kf : keyframes) mapper.add_keyframe(kf);
  mapper.run();
  if (stats) *stats = mapper.stats();
  return mapper.to_probability_map();
}

}  // namespace mrfmap
