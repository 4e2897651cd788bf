#pragma once

// Visibility-aware accuracy of a probabilistic occupancy map. Each voxel crossed by a ray is a
// region of constant occlusion density; the generating-surface density omega(s) = alpha(s) vis(s)
// says where along the ray the measurement most likely originated.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mrfmap/dataset.hpp"
#include "mrfmap/error.hpp"
#include "mrfmap/geometry.hpp"
#include "mrfmap/parallel.hpp"
#include "mrfmap/probability_map.hpp"
#include "mrfmap/sensor_model.hpp"

namespace mrfmap {

inline constexpr double kMaxOcclusionProbability = 1.0 - 1e-9;

/// alpha such that crossing a full voxel side leaves (1 - p) of the visibility.
inline double occlusion_density(double p_occ, double voxel_side) {
  const double p = std::clamp(p_occ, 0.0, kMaxOcclusionProbability);
  return -std::log1p(-p) / voxel_side;
}

struct DensityRegion {
  double s_entry;
  double s_exit;
  double alpha;
};

struct VisProfile {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  std::vector<DensityRegion> regions;
  std::vector<double> vis;    // visibility at each region entry, plus vis_inf at the end
  std::vector<double> omega;  // per-region occlusion probability vis_i - vis_{i+1}
  std::size_t peak = npos;    // region holding the omega maximum; npos when omega is zero everywhere
  double s_star = std::numeric_limits<double>::quiet_NaN();
  double omega_star = 0.0;
  double vis_inf = 1.0;
  double s_inf = 0.0;

  /// Visibility at distance s (1 before the first region).
  double visibility(double s) const {
    if (regions.empty() || s <= regions.front().s_entry) return 1.0;
    for (std::size_t i = 0; i < regions.size(); ++i) {
      const auto& r = regions[i];
      if (s < r.s_exit) return vis[i] * std::exp(-r.alpha * (s - r.s_entry));
    }
    return vis_inf;
  }

  double density(double s) const {
    for (const auto& r : regions)
      if (s >= r.s_entry && s < r.s_exit) return r.alpha;
    return 0.0;
  }

  double generating_density(double s) const { return density(s) * visibility(s); }
};

/// Builds the profile from contiguous regions of constant occlusion density.
inline VisProfile vis_profile(std::vector<DensityRegion> regions) {
  if (regions.empty()) throw Error(ErrorKind::EmptyTraversal, "no regions along the ray");
  VisProfile p;
  p.regions = std::move(regions);
  const std::size_t n = p.regions.size();
  p.vis.resize(n + 1);
  p.omega.resize(n);
  double tau = 0.0;
  p.vis[0] = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = p.regions[i];
    if (!(r.alpha >= 0.0)) throw Error(ErrorKind::InvalidArgument, "occlusion density must be non-negative");
    // omega decays inside a constant-density region, so each region's maximum sits at its entry.
    const double w = r.alpha * p.vis[i];
    if (w > p.omega_star) {
      p.omega_star = w;
      p.peak = i;
      p.s_star = r.s_entry;
    }
    tau += r.alpha * (r.s_exit - r.s_entry);
    p.vis[i + 1] = std::exp(-tau);
    p.omega[i] = p.vis[i] - p.vis[i + 1];
  }
  p.vis_inf = p.vis[n];
  p.s_inf = p.regions.back().s_exit;
  return p;
}

/// Profile of a traversal given the occupancy probability of each step.
inline VisProfile vis_profile(std::span<const double> marginals, const RayTraversal& traversal, double voxel_side) {
  if (marginals.size() != traversal.steps.size())
    throw Error(ErrorKind::DimensionMismatch, "one marginal per traversal step is required");
  std::vector<DensityRegion> regions;
  regions.reserve(marginals.size());
  for (std::size_t i = 0; i < marginals.size(); ++i) {
    const auto& s = traversal.steps[i];
    regions.push_back({s.s_entry, s.s_exit, occlusion_density(marginals[i], voxel_side)});
  }
  return vis_profile(std::move(regions));
}

enum class BandMode { Sigma, VoxelBounds };
/// How spans outside allocated bricks enter the profile.
enum class UnallocatedPolicy { Transparent, MapDefault };

struct EvalConfig {
  BandMode band = BandMode::Sigma;
  double k = 1.5;
  double vis_boundary_threshold = 0.5;
  UnallocatedPolicy unallocated = UnallocatedPolicy::Transparent;
  SensorNoiseModel sigma_model = SensorNoiseModel::constant(0.01);
  unsigned threads = 0;

  void validate() const {
    if (!(k > 0)) throw Error(ErrorKind::InvalidArgument, "band multiplier must be positive");
    if (!(vis_boundary_threshold > 0 && vis_boundary_threshold < 1))
      throw Error(ErrorKind::InvalidArgument, "visibility threshold must lie in (0, 1)");
  }
};

enum class RayClass : std::uint8_t { Accurate, Inaccurate, BeyondMap, Invalid };

inline bool counts_accurate(RayClass c) { return c == RayClass::Accurate || c == RayClass::BeyondMap; }

/// `measured` and `sigma` are ranges along the ray (m).
inline RayClass classify_ray(const VisProfile& p, double measured, double sigma, const EvalConfig& cfg) {
  if (p.vis_inf > cfg.vis_boundary_threshold) return measured > p.s_inf ? RayClass::BeyondMap : RayClass::Inaccurate;
  if (p.peak == VisProfile::npos) return RayClass::Inaccurate;
  if (cfg.band == BandMode::Sigma)
    return std::abs(measured - p.s_star) <= cfg.k * sigma ? RayClass::Accurate : RayClass::Inaccurate;
  const auto& r = p.regions[p.peak];
  return measured >= r.s_entry && measured <= r.s_exit ? RayClass::Accurate : RayClass::Inaccurate;
}

/// Regions along the whole ray inside the grid, from the map's probabilities.
inline std::vector<DensityRegion> density_regions(const ProbabilityMap& map, const Ray& ray, UnallocatedPolicy policy) {
  std::vector<DensityRegion> regions;
  const double side = map.config().voxel_side;
  const double a_unobs = policy == UnallocatedPolicy::Transparent ? 0.0 : occlusion_density(map.unobserved(), side);
  map.topology().traverse(
      ray.origin, ray.direction, 0.0, detail::kInf,
      [&](VoxelRef r, const Vec3i&, double a, double b) {
        if (b > a) regions.push_back({a, b, occlusion_density(map.probability(r), side)});
        return true;
      },
      [&](double a, double b) {
        if (b > a) regions.push_back({a, b, a_unobs});
        return true;
      });
  return regions;
}

/// Profile for one ray over the full map; a ray that never enters the grid sees a transparent map.
inline VisProfile ray_profile(const ProbabilityMap& map, const Ray& ray, UnallocatedPolicy policy) {
  auto regions = density_regions(map, ray, policy);
  if (regions.empty()) return VisProfile{};
  return vis_profile(std::move(regions));
}

struct ImageScore {
  int image_id = 0;
  std::size_t valid = 0;
  std::size_t accurate = 0;
  double score() const { return valid ? static_cast<double>(accurate) / static_cast<double>(valid) : 0.0; }
};

struct ImageEvaluation {
  ImageScore score;
  std::vector<RayClass> classes;  // row-major, one per pixel
  std::vector<double> s_star;     // NaN where undefined
};

inline ImageEvaluation evaluate_image(const ProbabilityMap& map, const CameraIntrinsics& intr, const Pose& pose,
                                      const DepthImage& depth, const EvalConfig& cfg, int image_id = 0) {
  cfg.validate();
  if (depth.width != intr.width || depth.height != intr.height)
    throw Error(ErrorKind::DimensionMismatch, "evaluation image does not match intrinsics");
  ImageEvaluation out;
  out.score.image_id = image_id;
  const std::size_t n = static_cast<std::size_t>(depth.width) * depth.height;
  out.classes.assign(n, RayClass::Invalid);
  out.s_star.assign(n, std::numeric_limits<double>::quiet_NaN());
  const unsigned threads = cfg.threads ? cfg.threads : default_thread_count();
  parallel_for(static_cast<std::size_t>(depth.height), 4, threads, [&](unsigned, std::size_t v0, std::size_t v1) {
    for (std::size_t v = v0; v < v1; ++v) {
      for (int u = 0; u < depth.width; ++u) {
        const double z = depth.at(u, static_cast<int>(v));
        if (!DepthImage::is_valid(z)) continue;
        const Ray ray = ray_from_depth(intr, pose, u, static_cast<int>(v), z);
        const VisProfile p = ray_profile(map, ray, cfg.unallocated);
        const double sigma = cfg.sigma_model.sigma(u, static_cast<int>(v), z) * ray.range_factor;
        const std::size_t idx = v * depth.width + u;
        out.classes[idx] = classify_ray(p, ray.measured_depth, sigma, cfg);
        out.s_star[idx] = p.s_star;
      }
    }
  });
  for (RayClass c : out.classes) {
    if (c == RayClass::Invalid) continue;
    ++out.score.valid;
    if (counts_accurate(c)) ++out.score.accurate;
  }
  return out;
}

struct EvalFrame {
  int id = 0;
  Pose pose;
  DepthImage depth;
};

struct AccuracySummary {
  std::vector<ImageScore> images;  // images with at least one valid pixel
  std::vector<int> skipped;        // images without valid pixels
  double mean = 0.0;
  double stddev = 0.0;  // population
};

inline AccuracySummary summarize(std::vector<ImageScore> scores) {
  AccuracySummary s;
  for (auto& sc : scores) {
    if (sc.valid == 0)
      s.skipped.push_back(sc.image_id);
    else
      s.images.push_back(sc);
  }
  if (s.images.empty()) throw Error(ErrorKind::InsufficientData, "no evaluation image has a valid pixel");
  double sum = 0.0;
  for (const auto& sc : s.images) sum += sc.score();
  s.mean = sum / static_cast<double>(s.images.size());
  double var = 0.0;
  for (const auto& sc : s.images) var += (sc.score() - s.mean) * (sc.score() - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(s.images.size()));
  return s;
}

inline AccuracySummary accuracy_score(const ProbabilityMap& map, const CameraIntrinsics& intr,
                                      const std::vector<EvalFrame>& frames, const EvalConfig& cfg) {
  std::vector<ImageScore> scores;
  for (const auto& f : frames) scores.push_back(evaluate_image(map, intr, f.pose, f.depth, cfg, f.id).score);
  return summarize(std::move(scores));
}

inline void write_scores_csv(const std::string& path, const AccuracySummary& s) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot write " + path);
  f << "image_id,valid,accurate,score\n";
  f.precision(17);
  for (const auto& sc : s.images) f << sc.image_id << ',' << sc.valid << ',' << sc.accurate << ',' << sc.score() << '\n';
  for (int id : s.skipped) f << id << ",0,0,\n";
}

inline nlohmann::json to_json(const AccuracySummary& s) {
  nlohmann::json j;
  j["mean"] = s.mean;
  j["std"] = s.stddev;
  j["images"] = s.images.size();
  j["skipped"] = s.skipped;
  return j;
}

/// Classification image: accurate yellow, inaccurate green, invalid purple.
inline void write_classification_png(const std::string& path, const ImageEvaluation& e, int width, int height) {
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(width) * height * 3);
  for (std::size_t i = 0; i < e.classes.size(); ++i) {
    std::array<std::uint8_t, 3> c{68, 1, 84};
    if (counts_accurate(e.classes[i]))
      c = {253, 231, 37};
    else if (e.classes[i] == RayClass::Inaccurate)
      c = {53, 183, 121};
    std::copy(c.begin(), c.end(), rgb.begin() + static_cast<std::ptrdiff_t>(3 * i));
  }
  write_png_rgb(path, width, height, rgb);
}

}  // namespace mrfmap
