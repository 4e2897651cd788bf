#pragma once

// Frozen per-voxel occupancy probabilities over a brick-sparse grid, shared by every map type, plus
// the binary map format and point exports.
//
// Binary layout (little endian):
//   char[4] "MRFM" | u32 version | u32 map kind | f64 unobserved probability
//   f64 origin[3] | f64 voxel side | u32 brick size | u32 dims[3]
//   u64 brick count | per brick: u64 linear brick index, f32 p_occ[B^3] (x fastest)

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mrfmap/error.hpp"
#include "mrfmap/sparse_grid.hpp"

namespace mrfmap {

enum class MapKind : std::uint32_t { Mrf = 0, LogOdds = 1 };

inline const char* to_string(MapKind k) { return k == MapKind::Mrf ? "mrf" : "logodds"; }

struct OccupiedVoxel {
  Vec3i voxel;
  Vec3 center;
  double p = 0.0;
};

inline constexpr std::uint32_t kMapFormatVersion = 1;

class ProbabilityMap {
 public:
  ProbabilityMap() = default;
  ProbabilityMap(SparseTopology topo, MapKind kind, double unobserved)
      : topo_(std::move(topo)), kind_(kind), unobserved_(unobserved) {
    p_.assign(topo_.brick_count() * static_cast<std::size_t>(topo_.config().voxels_per_brick()),
              static_cast<float>(unobserved));
  }

  const SparseTopology& topology() const { return topo_; }
  const GridConfig& config() const { return topo_.config(); }
  MapKind kind() const { return kind_; }
  /// Probability reported for voxels outside allocated bricks.
  double unobserved() const { return unobserved_; }

  std::vector<float>& values() { return p_; }
  const std::vector<float>& values() const { return p_; }

  double probability(const VoxelRef& r) const {
    return r.allocated() ? p_[static_cast<std::size_t>(r.brick) * config().voxels_per_brick() + r.slot] : unobserved_;
  }
  double at(const Vec3i& voxel) const { return probability(topo_.locate(voxel)); }

  std::vector<OccupiedVoxel> export_occupied(double threshold) const {
    std::vector<OccupiedVoxel> out;
    const int n = config().voxels_per_brick();
    const GridGeometry g = config().geometry();
    for (std::size_t b = 0; b < topo_.brick_count(); ++b) {
      for (int s = 0; s < n; ++s) {
        const double p = p_[b * n + s];
        if (p >= threshold) {
          const Vec3i c = topo_.voxel_of(static_cast<std::int32_t>(b), s);
          out.push_back({c, g.center(c), p});
        }
      }
    }
    std::sort(out.begin(), out.end(), [](const OccupiedVoxel& a, const OccupiedVoxel& b) {
      return std::lexicographical_compare(a.voxel.data(), a.voxel.data() + 3, b.voxel.data(), b.voxel.data() + 3);
    });
    return out;
  }

  void save(const std::string& path) const;
  static ProbabilityMap load(const std::string& path);

 private:
  SparseTopology topo_;
  MapKind kind_ = MapKind::Mrf;
  double unobserved_ = 0.5;
  std::vector<float> p_;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "map serialization assumes a little-endian host");

template <typename T>
void put(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& f, const std::string& path) {
  T v{};
  if (!f.read(reinterpret_cast<char*>(&v), sizeof(T))) throw Error(ErrorKind::DecodeError, path + ": truncated map file");
  return v;
}

}  // namespace detail

inline void ProbabilityMap::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::IoError, "cannot write " + path);
  const GridConfig& c = config();
  f.write("MRFM", 4);
  detail::put<std::uint32_t>(f, kMapFormatVersion);
  detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(kind_));
  detail::put<double>(f, unobserved_);
  for (int a = 0; a < 3; ++a) detail::put<double>(f, c.origin[a]);
  detail::put<double>(f, c.voxel_side);
  detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(c.brick_size));
  for (int a = 0; a < 3; ++a) detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(c.dims[a]));

  // Canonical brick order so identical maps serialize identically regardless of allocation order.
  std::vector<std::pair<std::uint64_t, std::size_t>> order;
  for (std::size_t b = 0; b < topo_.brick_count(); ++b) order.emplace_back(topo_.brick_linear(topo_.bricks()[b]), b);
  std::sort(order.begin(), order.end());
  detail::put<std::uint64_t>(f, order.size());
  const std::size_t n = static_cast<std::size_t>(c.voxels_per_brick());
  for (const auto& [lin, b] : order) {
    detail::put<std::uint64_t>(f, lin);
    f.write(reinterpret_cast<const char*>(p_.data() + b * n), static_cast<std::streamsize>(n * sizeof(float)));
  }
  if (!f) throw Error(ErrorKind::IoError, "failed writing " + path);
}

inline ProbabilityMap ProbabilityMap::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "MRFM", 4) != 0) throw Error(ErrorKind::DecodeError, path + ": bad magic");
  const auto version = detail::get<std::uint32_t>(f, path);
  if (version != kMapFormatVersion) throw Error(ErrorKind::DecodeError, path + ": unsupported version");
  const auto kind = detail::get<std::uint32_t>(f, path);
  if (kind > 1) throw Error(ErrorKind::DecodeError, path + ": unknown map kind");
  const double unobserved = detail::get<double>(f, path);
  GridConfig c;
  for (int a = 0; a < 3; ++a) c.origin[a] = detail::get<double>(f, path);
  c.voxel_side = detail::get<double>(f, path);
  c.brick_size = static_cast<int>(detail::get<std::uint32_t>(f, path));
  for (int a = 0; a < 3; ++a) c.dims[a] = static_cast<int>(detail::get<std::uint32_t>(f, path));
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::DecodeError, path + ": " + e.what());
  }
  SparseTopology topo(c);
  const auto count = detail::get<std::uint64_t>(f, path);
  if (count > topo.table_size()) throw Error(ErrorKind::DecodeError, path + ": brick count exceeds grid");
  const Vec3i bd = c.brick_dims();
  std::vector<std::uint64_t> lins(count);
  const std::size_t n = static_cast<std::size_t>(c.voxels_per_brick());
  std::vector<float> values(count * n);
  for (std::uint64_t b = 0; b < count; ++b) {
    lins[b] = detail::get<std::uint64_t>(f, path);
    if (lins[b] >= topo.table_size()) throw Error(ErrorKind::DecodeError, path + ": brick index out of range");
    const auto lin = static_cast<int>(lins[b]);
    const Vec3i brick(lin % bd.x(), (lin / bd.x()) % bd.y(), lin / (bd.x() * bd.y()));
    if (!topo.allocate(brick)) throw Error(ErrorKind::DecodeError, path + ": duplicate brick");
    if (!f.read(reinterpret_cast<char*>(values.data() + b * n), static_cast<std::streamsize>(n * sizeof(float))))
      throw Error(ErrorKind::DecodeError, path + ": truncated brick data");
  }
  ProbabilityMap m(std::move(topo), static_cast<MapKind>(kind), unobserved);
  m.p_ = std::move(values);
  return m;
}

inline void write_occupied_csv(const std::string& path, const std::vector<OccupiedVoxel>& voxels) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot write " + path);
  f.precision(9);
  f << "x,y,z,p\n";
  for (const auto& v : voxels) f << v.center.x() << ',' << v.center.y() << ',' << v.center.z() << ',' << v.p << '\n';
}

inline void write_occupied_ply(const std::string& path, const std::vector<OccupiedVoxel>& voxels) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot write " + path);
  f << "ply\nformat ascii 1.0\nelement vertex " << voxels.size()
    << "\nproperty float x\nproperty float y\nproperty float z\nproperty float p_occ\nend_header\n";
  f.precision(9);
  for (const auto& v : voxels) f << v.center.x() << ' ' << v.center.y() << ' ' << v.center.z() << ' ' << v.p << '\n';
}

}  // namespace mrfmap
