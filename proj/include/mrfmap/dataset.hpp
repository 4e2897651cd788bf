#pragma once

// Dataset ingestion: TUM trajectories, 16-bit depth PNGs, intrinsics, frame association, keyframe
// selection and an analytic depth renderer for synthetic scenes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include <json.hpp>

#include "mrfmap/error.hpp"
#include "mrfmap/geometry.hpp"
#include "mrfmap/image.hpp"

namespace mrfmap {

struct StampedPose {
  double timestamp = 0.0;
  Pose pose;
};

struct Keyframe {
  int id = 0;
  double timestamp = 0.0;
  Pose pose;
  DepthImage depth;
};

// ---------------------------------------------------------------------------------------------
// TUM trajectories: "t tx ty tz qx qy qz qw", '#' comments.

inline std::vector<StampedPose> parse_trajectory(std::istream& in, const std::string& name = "<stream>") {
  std::vector<StampedPose> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    double v[8];
    for (double& x : v) {
      if (!(ss >> x) || !std::isfinite(x))
        throw Error(ErrorKind::ParseError, name + ":" + std::to_string(lineno) + ": expected 8 numbers");
    }
    std::string extra;
    if (ss >> extra) throw Error(ErrorKind::ParseError, name + ":" + std::to_string(lineno) + ": trailing data");
    const Eigen::Quaterniond q(v[7], v[4], v[5], v[6]);
    if (q.norm() < 1e-12) throw Error(ErrorKind::ParseError, name + ":" + std::to_string(lineno) + ": zero quaternion");
    if (!out.empty() && !(v[0] > out.back().timestamp))
      throw Error(ErrorKind::NonMonotonicTimestamps, name + ":" + std::to_string(lineno) + ": timestamps must increase");
    out.push_back({v[0], Pose::from_quaternion(q, {v[1], v[2], v[3]})});
  }
  return out;
}

inline std::vector<StampedPose> load_trajectory(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open trajectory " + path);
  return parse_trajectory(f, path);
}

inline void write_trajectory(std::ostream& out, const std::vector<StampedPose>& poses) {
  out << "# timestamp tx ty tz qx qy qz qw\n";
  out.precision(17);
  for (const auto& p : poses) {
    const Eigen::Quaterniond q(p.pose.rotation);
    const Vec3& t = p.pose.translation;
    out << p.timestamp << ' ' << t.x() << ' ' << t.y() << ' ' << t.z() << ' ' << q.x() << ' ' << q.y() << ' '
        << q.z() << ' ' << q.w() << '\n';
  }
}

inline void save_trajectory(const std::string& path, const std::vector<StampedPose>& poses) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot write " + path);
  write_trajectory(f, poses);
}

// ---------------------------------------------------------------------------------------------
// PNG

namespace detail {

struct PngFile {
  std::FILE* fp = nullptr;
  explicit PngFile(const std::string& path, const char* mode) : fp(std::fopen(path.c_str(), mode)) {}
  ~PngFile() {
    if (fp) std::fclose(fp);
  }
  PngFile(const PngFile&) = delete;
  PngFile& operator=(const PngFile&) = delete;
};

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

/// Writes rows of `channels` samples of `bit_depth` bits. Samples are native-endian uint16 for 16 bit.
inline void write_png(const std::string& path, int width, int height, int bit_depth, int color_type,
                      const std::vector<png_bytep>& rows) {
  PngFile file(path, "wb");
  if (!file.fp) throw Error(ErrorKind::IoError, "cannot write " + path);
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::IoError, "libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::IoError, path + ": " + err);
  }
  png_init_io(png, file.fp);
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);
  png_write_image(png, const_cast<png_bytepp>(rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

/// Raw 16-bit single channel image.
struct RawDepth {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> data;
};

inline RawDepth read_png16(const std::string& path) {
  detail::PngFile file(path, "rb");
  if (!file.fp) throw Error(ErrorKind::IoError, "cannot open depth image " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.fp) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw Error(ErrorKind::DecodeError, path + ": not a PNG file");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::DecodeError, "libpng initialisation failed");
  }
  RawDepth out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::DecodeError, path + ": " + err);
  }
  png_init_io(png, file.fp);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (bit_depth != 16 || color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::DecodeError, path + ": expected a 16-bit single-channel PNG");
  }
  png_set_swap(png);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.data.resize(static_cast<std::size_t>(out.width) * out.height);
  rows.resize(out.height);
  for (int v = 0; v < out.height; ++v) rows[v] = reinterpret_cast<png_bytep>(out.data.data() + static_cast<std::size_t>(v) * out.width);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

inline void write_png16(const std::string& path, const RawDepth& img) {
  std::vector<png_bytep> rows(img.height);
  auto* base = const_cast<std::uint16_t*>(img.data.data());
  for (int v = 0; v < img.height; ++v) rows[v] = reinterpret_cast<png_bytep>(base + static_cast<std::size_t>(v) * img.width);
  detail::write_png(path, img.width, img.height, 16, PNG_COLOR_TYPE_GRAY, rows);
}

/// 8-bit RGB, `rgb` holds width*height*3 bytes.
inline void write_png_rgb(const std::string& path, int width, int height, const std::vector<std::uint8_t>& rgb) {
  std::vector<png_bytep> rows(height);
  auto* base = const_cast<std::uint8_t*>(rgb.data());
  for (int v = 0; v < height; ++v) rows[v] = base + static_cast<std::size_t>(v) * width * 3;
  detail::write_png(path, width, height, 8, PNG_COLOR_TYPE_RGB, rows);
}

/// Quantizes metric depth to raw units; depths that do not fit become invalid (0).
inline RawDepth encode_depth(const DepthImage& img, double depth_scale) {
  RawDepth raw{img.width, img.height, std::vector<std::uint16_t>(img.depth.size(), 0)};
  for (std::size_t i = 0; i < img.depth.size(); ++i) {
    const double d = img.depth[i];
    if (!DepthImage::is_valid(d)) continue;
    const double r = std::round(d * depth_scale);
    if (r >= 1.0 && r <= 65535.0) raw.data[i] = static_cast<std::uint16_t>(r);
  }
  return raw;
}

inline DepthImage decode_depth(const RawDepth& raw, double depth_scale) {
  DepthImage img(raw.width, raw.height);
  for (std::size_t i = 0; i < raw.data.size(); ++i) img.depth[i] = raw.data[i] / depth_scale;
  return img;
}

inline DepthImage load_depth_png(const std::string& path, const CameraIntrinsics& intr) {
  const RawDepth raw = read_png16(path);
  if (raw.width != intr.width || raw.height != intr.height)
    throw Error(ErrorKind::DimensionMismatch, path + ": image is " + std::to_string(raw.width) + "x" +
                                                  std::to_string(raw.height) + ", intrinsics expect " +
                                                  std::to_string(intr.width) + "x" + std::to_string(intr.height));
  return decode_depth(raw, intr.depth_scale);
}

inline void save_depth_png(const std::string& path, const DepthImage& img, double depth_scale) {
  write_png16(path, encode_depth(img, depth_scale));
}

// ---------------------------------------------------------------------------------------------
// Intrinsics and frame lists

inline nlohmann::json to_json(const CameraIntrinsics& c) {
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy},
          {"width", c.width}, {"height", c.height}, {"depth_scale", c.depth_scale}};
}

inline CameraIntrinsics intrinsics_from_json(const nlohmann::json& j) {
  CameraIntrinsics c;
  try {
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    c.depth_scale = j.at("depth_scale").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ParseError, std::string("intrinsics: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ParseError, path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot write " + path);
  f << j.dump(2) << '\n';
}

inline CameraIntrinsics load_intrinsics(const std::string& path) { return intrinsics_from_json(read_json_file(path)); }

struct FrameEntry {
  double timestamp = 0.0;
  std::string path;  // relative to the list file's directory
};

/// TUM-style association list: "timestamp relative/path.png" per line, '#' comments.
inline std::vector<FrameEntry> load_frame_list(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open frame list " + path);
  std::vector<FrameEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    FrameEntry e;
    if (!(ss >> e.timestamp >> e.path)) throw Error(ErrorKind::ParseError, path + ":" + std::to_string(lineno) + ": expected 'timestamp path'");
    out.push_back(e);
  }
  return out;
}

inline void save_frame_list(const std::string& path, const std::vector<FrameEntry>& frames) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot write " + path);
  f << "# timestamp filename\n";
  f.precision(17);
  for (const auto& e : frames) f << e.timestamp << ' ' << e.path << '\n';
}

/// Pose whose timestamp is nearest to t, if within max_gap seconds.
inline std::optional<Pose> associate_pose(const std::vector<StampedPose>& traj, double t, double max_gap = 0.02) {
  if (traj.empty()) return std::nullopt;
  auto it = std::lower_bound(traj.begin(), traj.end(), t,
                             [](const StampedPose& p, double x) { return p.timestamp < x; });
  const StampedPose* best = nullptr;
  if (it != traj.end()) best = &*it;
  if (it != traj.begin()) {
    const StampedPose& prev = *std::prev(it);
    if (!best || std::abs(prev.timestamp - t) <= std::abs(best->timestamp - t)) best = &prev;
  }
  if (!best || std::abs(best->timestamp - t) > max_gap) return std::nullopt;
  return best->pose;
}

struct Dataset {
  CameraIntrinsics intrinsics;
  std::vector<Keyframe> frames;
  std::size_t unassociated = 0;
};

/// Loads intrinsics.json, trajectory.txt and the depth images listed in `list_name` from `dir`.
inline Dataset load_dataset(const std::string& dir, const std::string& list_name = "depth.txt", double max_gap = 0.02) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  Dataset ds;
  ds.intrinsics = load_intrinsics((root / "intrinsics.json").string());
  const auto traj = load_trajectory((root / "trajectory.txt").string());
  const auto list = load_frame_list((root / list_name).string());
  int id = 0;
  for (const auto& e : list) {
    const auto pose = associate_pose(traj, e.timestamp, max_gap);
    if (!pose) {
      ++ds.unassociated;
      continue;
    }
    Keyframe k;
    k.id = id++;
    k.timestamp = e.timestamp;
    k.pose = *pose;
    k.depth = load_depth_png((root / e.path).string(), ds.intrinsics);
    ds.frames.push_back(std::move(k));
  }
  return ds;
}

// ---------------------------------------------------------------------------------------------
// Keyframe selection

struct KeyframePolicy {
  double max_translation = 1.0;  // m
  double max_rotation = 1.0;     // rad, geodesic angle

  void validate() const {
    if (!(max_translation > 0) || !(max_rotation > 0))
      throw Error(ErrorKind::InvalidArgument, "keyframe thresholds must be positive");
  }
};

/// Indices of frames kept as keyframes: the first frame, then every frame whose translation or
/// rotation relative to the last kept frame exceeds the thresholds.
inline std::vector<std::size_t> select_keyframes(const std::vector<Pose>& poses, const KeyframePolicy& policy) {
  policy.validate();
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    if (out.empty()) {
      out.push_back(i);
      continue;
    }
    const Pose& last = poses[out.back()];
    const double dt = (poses[i].translation - last.translation).norm();
    const double dr = rotation_angle_between(last.rotation, poses[i].rotation);
    if (dt > policy.max_translation || dr > policy.max_rotation) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Synthetic scenes

struct Box {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Ones();
};

/// Plane through `point` with unit `normal`; when extent > 0 only the square of half-side `extent`
/// (in a fixed tangent frame) is solid.
struct Plane {
  Vec3 point = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  double extent = 0.0;

  std::pair<Vec3, Vec3> tangents() const {
    int a = 0;
    for (int k = 1; k < 3; ++k)
      if (std::abs(normal[k]) < std::abs(normal[a])) a = k;
    const Vec3 e1 = normal.cross(Vec3::Unit(a)).normalized();
    return {e1, normal.cross(e1)};
  }
};

struct SyntheticScene {
  std::vector<Box> boxes;
  std::vector<Plane> planes;
  std::vector<Pose> cameras;
};

/// Camera looking from `eye` towards `target` (x right, y down, z forward).
inline Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitZ()) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(up);
  if (x.norm() < 1e-9) x = z.cross(Vec3::UnitX());
  x.normalize();
  const Vec3 y = z.cross(x);
  Pose p;
  p.rotation.col(0) = x;
  p.rotation.col(1) = y;
  p.rotation.col(2) = z;
  p.translation = eye;
  return p;
}

namespace detail {

inline std::array<double, 3> vec3_from(const nlohmann::json& j) { return j.get<std::array<double, 3>>(); }

inline Pose pose_from_json(const nlohmann::json& j) {
  if (j.contains("look_at")) {
    const auto e = vec3_from(j.at("position"));
    const auto t = vec3_from(j.at("look_at"));
    const auto up = j.contains("up") ? vec3_from(j.at("up")) : std::array<double, 3>{0, 0, 1};
    return look_at({e[0], e[1], e[2]}, {t[0], t[1], t[2]}, {up[0], up[1], up[2]});
  }
  const auto t = vec3_from(j.at("position"));
  const auto q = j.at("quaternion").get<std::array<double, 4>>();  // x y z w
  Pose p = Pose::from_quaternion(Eigen::Quaterniond(q[3], q[0], q[1], q[2]), {t[0], t[1], t[2]});
  return p;
}

}  // namespace detail

/// Scene JSON: {boxes:[{min,max}], planes:[{point,normal,extent?}], cameras:[{position, look_at, up?} |
/// {position, quaternion:[x,y,z,w]}]}.
inline SyntheticScene scene_from_json(const nlohmann::json& j) {
  SyntheticScene s;
  try {
    if (j.contains("boxes")) {
      for (const auto& b : j.at("boxes")) {
        const auto lo = detail::vec3_from(b.at("min"));
        const auto hi = detail::vec3_from(b.at("max"));
        Box box{{lo[0], lo[1], lo[2]}, {hi[0], hi[1], hi[2]}};
        if ((box.max.array() <= box.min.array()).any() || !box.min.allFinite() || !box.max.allFinite())
          throw Error(ErrorKind::ParseError, "box max must exceed min");
        s.boxes.push_back(box);
      }
    }
    if (j.contains("planes")) {
      for (const auto& p : j.at("planes")) {
        const auto pt = detail::vec3_from(p.at("point"));
        const auto n = detail::vec3_from(p.at("normal"));
        Plane pl{{pt[0], pt[1], pt[2]}, Vec3(n[0], n[1], n[2]), p.value("extent", 0.0)};
        if (!(pl.normal.norm() > 0)) throw Error(ErrorKind::ParseError, "plane normal must be non-zero");
        pl.normal.normalize();
        s.planes.push_back(pl);
      }
    }
    if (j.contains("cameras")) {
      for (const auto& c : j.at("cameras")) s.cameras.push_back(detail::pose_from_json(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ParseError, std::string("scene: ") + e.what());
  }
  return s;
}

/// Nearest positive hit distance along a unit ray, or +inf.
inline double intersect(const SyntheticScene& scene, const Vec3& o, const Vec3& d) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& b : scene.boxes) {
    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    bool miss = false;
    for (int a = 0; a < 3 && !miss; ++a) {
      if (std::abs(d[a]) < 1e-15) {
        miss = o[a] < b.min[a] || o[a] > b.max[a];
        continue;
      }
      double ta = (b.min[a] - o[a]) / d[a];
      double tb = (b.max[a] - o[a]) / d[a];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
    if (miss || t1 < t0) continue;
    const double t = t0 > 0 ? t0 : t1;
    if (t > 0 && t < best) best = t;
  }
  for (const auto& p : scene.planes) {
    const double den = d.dot(p.normal);
    if (std::abs(den) < 1e-12) continue;
    const double t = (p.point - o).dot(p.normal) / den;
    if (!(t > 0) || t >= best) continue;
    if (p.extent > 0) {
      const auto [e1, e2] = p.tangents();
      const Vec3 rel = o + t * d - p.point;
      if (std::abs(rel.dot(e1)) > p.extent || std::abs(rel.dot(e2)) > p.extent) continue;
    }
    best = t;
  }
  return best;
}

/// Ground-truth z-depth image of the scene seen from `pose`; pixels without a hit are invalid.
inline DepthImage render_synthetic_depth(const SyntheticScene& scene, const CameraIntrinsics& intr, const Pose& pose) {
  DepthImage img(intr.width, intr.height);
  for (int v = 0; v < intr.height; ++v) {
    for (int u = 0; u < intr.width; ++u) {
      const Vec3 b = intr.bearing(u, v);
      const double k = b.norm();
      const Vec3 dir = (pose.rotation * (b / k)).normalized();
      const double t = intersect(scene, pose.translation, dir);
      if (std::isfinite(t)) img.at(u, v) = t / k;
    }
  }
  return img;
}

}  // namespace mrfmap
