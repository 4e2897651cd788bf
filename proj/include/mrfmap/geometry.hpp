#pragma once

// Pinhole cameras, rigid poses, pixel rays and exact voxel traversal.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "mrfmap/error.hpp"

namespace mrfmap {

using Vec3 = Eigen::Vector3d;
using Vec3i = Eigen::Vector3i;
using Mat3 = Eigen::Matrix3d;

struct CameraIntrinsics {
  double fx = 525.0;
  double fy = 525.0;
  double cx = 319.5;
  double cy = 239.5;
  int width = 640;
  int height = 480;
  double depth_scale = 5000.0;  // raw units per meter

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw Error(ErrorKind::InvalidArgument, "focal lengths must be positive");
    if (width <= 0 || height <= 0) throw Error(ErrorKind::InvalidArgument, "image size must be positive");
    if (!(cx > 0 && cx < width) || !(cy > 0 && cy < height))
      throw Error(ErrorKind::InvalidArgument, "principal point outside the image");
    if (!(depth_scale > 0)) throw Error(ErrorKind::InvalidArgument, "depth_scale must be positive");
  }

  /// Unnormalized camera-frame bearing with unit z component.
  Vec3 bearing(double u, double v) const { return {(u - cx) / fx, (v - cy) / fy, 1.0}; }

  /// Projects a camera-frame point with z > 0 to pixel coordinates.
  Eigen::Vector2d project(const Vec3& p_cam) const {
    return {fx * p_cam.x() / p_cam.z() + cx, fy * p_cam.y() / p_cam.z() + cy};
  }

  bool operator==(const CameraIntrinsics&) const = default;
};

/// World-from-camera rigid transform.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }

  static Pose from_quaternion(const Eigen::Quaterniond& q, const Vec3& t) {
    return {q.normalized().toRotationMatrix(), t};
  }

  bool is_valid(double tol = 1e-9) const {
    if (!rotation.allFinite() || !translation.allFinite()) return false;
    if (((rotation.transpose() * rotation) - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
    return std::abs(rotation.determinant() - 1.0) <= tol;
  }

  void validate() const {
    if (!is_valid()) throw Error(ErrorKind::InvalidArgument, "pose rotation is not a proper orthonormal matrix");
  }

  Vec3 transform(const Vec3& p) const { return rotation * p + translation; }
  Vec3 inverse_transform(const Vec3& p) const { return rotation.transpose() * (p - translation); }
  Pose inverse() const { return {rotation.transpose(), -(rotation.transpose() * translation)}; }
};

/// Geodesic rotation angle of R_a^T R_b in radians.
inline double rotation_angle_between(const Mat3& a, const Mat3& b) {
  const Mat3 rel = a.transpose() * b;
  const double c = std::clamp((rel.trace() - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c);
}

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  int u = 0;
  int v = 0;
  double measured_depth = 0.0;  // range along the ray (m)
  double range_factor = 1.0;    // range / z-depth for this pixel
  bool valid = false;

  Vec3 at(double s) const { return origin + s * direction; }
  double z_depth() const { return measured_depth / range_factor; }
};

/// Back-projects a pixel with a metric z-depth. Non-positive or non-finite depth yields an invalid ray.
inline Ray ray_from_depth(const CameraIntrinsics& intr, const Pose& pose, int u, int v, double depth_m) {
  if (u < 0 || v < 0 || u >= intr.width || v >= intr.height)
    throw Error(ErrorKind::OutOfBounds, "pixel outside image");
  const Vec3 b = intr.bearing(u, v);
  const double norm = b.norm();
  Ray r;
  r.origin = pose.translation;
  r.direction = pose.rotation * (b / norm);
  r.direction.normalize();
  r.u = u;
  r.v = v;
  r.range_factor = norm;
  r.valid = std::isfinite(depth_m) && depth_m > 0.0;
  r.measured_depth = r.valid ? depth_m * norm : 0.0;
  return r;
}

/// Back-projects a pixel holding a raw sensor depth value (raw / depth_scale = meters).
inline Ray pixel_to_ray(const CameraIntrinsics& intr, const Pose& pose, int u, int v, double raw_depth) {
  const bool ok = std::isfinite(raw_depth) && raw_depth != 0.0;
  return ray_from_depth(intr, pose, u, v, ok ? raw_depth / intr.depth_scale : 0.0);
}

/// Axis-aligned voxel lattice: voxel (i,j,k) spans origin + [i,i+1)*side etc.
struct GridGeometry {
  Vec3 origin = Vec3::Zero();
  double voxel_side = 0.05;
  Vec3i dims = Vec3i::Zero();

  Vec3 max_corner() const { return origin + dims.cast<double>() * voxel_side; }

  bool contains(const Vec3i& c) const {
    return (c.array() >= 0).all() && (c.array() < dims.array()).all();
  }

  std::uint64_t linear(const Vec3i& c) const {
    return static_cast<std::uint64_t>(c.x()) +
           static_cast<std::uint64_t>(dims.x()) *
               (static_cast<std::uint64_t>(c.y()) + static_cast<std::uint64_t>(dims.y()) * c.z());
  }

  Vec3i coord_of(const Vec3& p) const {
    const Vec3 q = (p - origin) / voxel_side;
    return {static_cast<int>(std::floor(q.x())), static_cast<int>(std::floor(q.y())),
            static_cast<int>(std::floor(q.z()))};
  }

  Vec3 center(const Vec3i& c) const { return origin + (c.cast<double>().array() + 0.5).matrix() * voxel_side; }
};

struct TraversalStep {
  Vec3i voxel = Vec3i::Zero();
  double s_entry = 0.0;
  double s_exit = 0.0;
  bool skipped = false;  // span across unallocated storage rather than a single voxel

  double length() const { return s_exit - s_entry; }
  /// Representative cell depth used by the sensor model.
  double midpoint() const { return 0.5 * (s_entry + s_exit); }
};

struct RayTraversal {
  Ray ray;
  std::vector<TraversalStep> steps;
};

namespace detail {

inline constexpr double kDegenerateDirection = 1e-12;
inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Parametric interval where origin + s*dir lies inside [lo, hi). Returns false if empty.
inline bool clip_to_box(const Vec3& lo, const Vec3& hi, const Vec3& o, const Vec3& d, double& s0, double& s1) {
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < kDegenerateDirection) {
      if (o[a] < lo[a] || o[a] >= hi[a]) return false;
      continue;
    }
    double t0 = (lo[a] - o[a]) / d[a];
    double t1 = (hi[a] - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    s0 = std::max(s0, t0);
    s1 = std::min(s1, t1);
  }
  return s1 > s0;
}

}  // namespace detail

/// Amanatides-Woo walk over the index box [box_lo, box_hi) of a lattice with the given origin and
/// cell side, restricted to s in [s_lo, s_hi]. `visit(cell, s_entry, s_exit)` returns false to stop.
/// Cells are half-open; a ray on a boundary belongs to the cell with the larger coordinate.
/// Zero-length crossings (edges and corners) are not reported.
template <typename Visitor>
void dda_walk(const Vec3& lattice_origin, double side, const Vec3i& box_lo, const Vec3i& box_hi,
              const Vec3& o, const Vec3& d, double s_lo, double s_hi, Visitor&& visit) {
  if (!(s_hi > s_lo)) return;
  std::array<int, 3> step{};
  std::array<double, 3> dir{};
  Vec3i cell;
  const Vec3 p = o + s_lo * d;
  for (int a = 0; a < 3; ++a) {
    dir[a] = std::abs(d[a]) < detail::kDegenerateDirection ? 0.0 : d[a];
    step[a] = dir[a] > 0 ? 1 : (dir[a] < 0 ? -1 : 0);
    int c = static_cast<int>(std::floor((p[a] - lattice_origin[a]) / side));
    cell[a] = std::clamp(c, box_lo[a], box_hi[a] - 1);
  }
  auto boundary = [&](int a) {
    if (step[a] == 0) return detail::kInf;
    const int face = step[a] > 0 ? cell[a] + 1 : cell[a];
    return (lattice_origin[a] + face * side - o[a]) / dir[a];
  };
  std::array<double, 3> t_next{boundary(0), boundary(1), boundary(2)};
  double s = s_lo;
  while (true) {
    const double t_min = std::min({t_next[0], t_next[1], t_next[2]});
    const double s_out = std::max(s, std::min(t_min, s_hi));
    if (s_out > s) {
      if (!visit(static_cast<const Vec3i&>(cell), s, s_out)) return;
    }
    s = s_out;
    if (s >= s_hi) return;
    for (int a = 0; a < 3; ++a) {
      if (t_next[a] == t_min) {
        cell[a] += step[a];
        if (cell[a] < box_lo[a] || cell[a] >= box_hi[a]) return;
        t_next[a] = boundary(a);
      }
    }
  }
}

/// Visits every voxel of the grid crossed by the segment [0, s_max] of `ray`. Returns false if the
/// segment misses the grid volume.
template <typename Visitor>
bool for_each_voxel(const GridGeometry& grid, const Vec3& origin, const Vec3& direction, double s_max,
                    Visitor&& visit) {
  double s0 = 0.0;
  double s1 = s_max;
  if (!detail::clip_to_box(grid.origin, grid.max_corner(), origin, direction, s0, s1)) return false;
  dda_walk(grid.origin, grid.voxel_side, Vec3i::Zero(), grid.dims, origin, direction, s0, s1,
           std::forward<Visitor>(visit));
  return true;
}

/// Dense traversal of every voxel on [0, s_max] with exact entry and exit distances.
inline RayTraversal traverse_3dda(const GridGeometry& grid, const Ray& ray, double s_max) {
  if (!(s_max > 0)) throw Error(ErrorKind::InvalidArgument, "s_max must be positive");
  RayTraversal out;
  out.ray = ray;
  const bool hit = for_each_voxel(grid, ray.origin, ray.direction, s_max, [&](const Vec3i& c, double a, double b) {
    out.steps.push_back({c, a, b, false});
    return true;
  });
  if (!hit || out.steps.empty()) throw Error(ErrorKind::EmptyTraversal, "ray segment misses the grid volume");
  return out;
}

}  // namespace mrfmap
