#pragma once

// Distance-dependent Gaussian forward sensor model with per-patch quadratic bias and noise.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mrfmap/error.hpp"
#include "mrfmap/image.hpp"

namespace mrfmap {

inline constexpr double kSigmaMin = 1e-4;

/// Quadratic models of the mean measurement and its standard deviation as functions of true depth.
struct NoisePolynomial {
  std::array<double, 3> bias{0.0, 1.0, 0.0};
  std::array<double, 3> sigma{0.0, 0.0, 0.0};

  static double eval(const std::array<double, 3>& c, double d) { return c[0] + d * (c[1] + d * c[2]); }

  double predicted(double d) const { return eval(bias, d); }
  double stddev(double d) const { return std::max(kSigmaMin, eval(sigma, d)); }

  bool finite() const {
    return std::all_of(bias.begin(), bias.end(), [](double x) { return std::isfinite(x); }) &&
           std::all_of(sigma.begin(), sigma.end(), [](double x) { return std::isfinite(x); });
  }
};

struct SensorNoiseModel {
  int patch_size = 20;
  int width = 0;
  int height = 0;
  double d_min = 0.0;
  double d_max = 1e6;
  NoisePolynomial aggregate;
  std::vector<std::optional<NoisePolynomial>> patches;  // row-major, patches_x() x patches_y()

  /// Identity bias with a depth-independent standard deviation, for every pixel.
  static SensorNoiseModel constant(double sigma, int width = 0, int height = 0) {
    SensorNoiseModel m;
    m.width = width;
    m.height = height;
    m.aggregate.sigma = {sigma, 0.0, 0.0};
    return m;
  }

  int patches_x() const { return patch_size > 0 ? (width + patch_size - 1) / patch_size : 0; }
  int patches_y() const { return patch_size > 0 ? (height + patch_size - 1) / patch_size : 0; }

  const NoisePolynomial& for_pixel(int u, int v) const {
    if (patches.empty() || u < 0 || v < 0 || u >= width || v >= height) return aggregate;
    const auto& p = patches[static_cast<std::size_t>(v / patch_size) * patches_x() + u / patch_size];
    return p ? *p : aggregate;
  }

  double clamp_depth(double d) const { return std::clamp(d, d_min, d_max); }

  double predicted_mean(int u, int v, double d) const { return for_pixel(u, v).predicted(d); }
  double sigma(int u, int v, double d) const { return for_pixel(u, v).stddev(clamp_depth(d)); }

  /// Log of the Gaussian density of measuring `z_meas` when the true surface is at distance `d`.
  double log_nu(int u, int v, double d, double z_meas) const {
    const NoisePolynomial& p = for_pixel(u, v);
    const double s = p.stddev(clamp_depth(d));
    const double r = (z_meas - p.predicted(d)) / s;
    return -0.5 * r * r - std::log(s * std::sqrt(2.0 * std::numbers::pi));
  }

  double nu(int u, int v, double d, double z_meas) const { return std::exp(log_nu(u, v, d, z_meas)); }
};

inline double nu(const SensorNoiseModel& model, int u, int v, double d, double z_meas) {
  return model.nu(u, v, d, z_meas);
}

// ---------------------------------------------------------------------------------------------
// Calibration

struct CalibrationSample {
  int u = 0;
  int v = 0;
  double z_meas = 0.0;
  double z_gt = 0.0;
};

struct FitOptions {
  std::size_t min_samples = 30;
  double min_depth_span = 0.5;
};

struct PatchDiagnostics {
  int i = 0;  // patch column
  int j = 0;  // patch row
  std::size_t samples = 0;
  bool fitted = false;
  double r2_bias = 0.0;
  double r2_sigma = 0.0;
};

struct CalibrationFit {
  SensorNoiseModel model;
  PatchDiagnostics aggregate;
  std::vector<PatchDiagnostics> patches;
  std::size_t fitted_patches = 0;
};

namespace detail {

struct QuadraticFit {
  std::array<double, 3> coeffs{};
  double r2 = 0.0;
};

/// Weighted least-squares quadratic; r2 is the weighted coefficient of determination.
inline QuadraticFit fit_quadratic(const std::vector<double>& x, const std::vector<double>& y,
                                  const std::vector<double>& w) {
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::MatrixXd a(n, 3);
  Eigen::VectorXd b(n);
  Eigen::VectorXd sw(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    sw(k) = std::sqrt(w[k]);
    a(k, 0) = sw(k);
    a(k, 1) = sw(k) * x[k];
    a(k, 2) = sw(k) * x[k] * x[k];
    b(k) = sw(k) * y[k];
  }
  const Eigen::Vector3d c = a.colPivHouseholderQr().solve(b);
  const double mean = b.dot(sw) / sw.squaredNorm();
  const double ss_tot = (b - mean * sw).squaredNorm();
  const double ss_res = (b - a * c).squaredNorm();
  QuadraticFit f;
  f.coeffs = {c(0), c(1), c(2)};
  f.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
  return f;
}

inline constexpr int kReweightIterations = 4;

/// Bias by regressing measured on true depth; sigma by regressing sqrt(pi/2)*|residual| on true depth.
inline std::optional<NoisePolynomial> fit_patch(const std::vector<const CalibrationSample*>& s,
                                                const FitOptions& opt, PatchDiagnostics& diag) {
  diag.samples = s.size();
  if (s.size() < opt.min_samples) return std::nullopt;
  double lo = s.front()->z_gt;
  double hi = lo;
  std::vector<double> gt, meas;
  gt.reserve(s.size());
  meas.reserve(s.size());
  for (const auto* p : s) {
    lo = std::min(lo, p->z_gt);
    hi = std::max(hi, p->z_gt);
    gt.push_back(p->z_gt);
    meas.push_back(p->z_meas);
  }
  if (hi - lo < opt.min_depth_span) return std::nullopt;
  // Iteratively reweighted: the noise grows with depth, so later rounds weight each sample by
  // the inverse variance predicted by the previous round's sigma fit.
  std::vector<double> w(s.size(), 1.0);
  std::vector<double> dev(s.size());
  const double scale = std::sqrt(std::numbers::pi / 2.0);
  QuadraticFit bias, sig;
  for (int it = 0; it < kReweightIterations; ++it) {
    bias = fit_quadratic(gt, meas, w);
    for (std::size_t k = 0; k < s.size(); ++k)
      dev[k] = scale * std::abs(meas[k] - NoisePolynomial::eval(bias.coeffs, gt[k]));
    sig = fit_quadratic(gt, dev, w);
    for (std::size_t k = 0; k < s.size(); ++k) {
      const double sd = std::max(kSigmaMin, NoisePolynomial::eval(sig.coeffs, gt[k]));
      w[k] = 1.0 / (sd * sd);
    }
  }
  NoisePolynomial poly{bias.coeffs, sig.coeffs};
  if (!poly.finite()) return std::nullopt;
  diag.fitted = true;
  diag.r2_bias = bias.r2;
  diag.r2_sigma = sig.r2;
  return poly;
}

}  // namespace detail

/// Fits per-patch bias and noise polynomials plus an aggregate model over the central third of the
/// image (all samples if the centre is too sparse). Patches without enough data stay unfitted and
/// fall back to the aggregate.
inline CalibrationFit fit_calibration_report(const std::vector<CalibrationSample>& samples, int width, int height,
                                             int patch_size = 20, const FitOptions& opt = {}) {
  if (width <= 0 || height <= 0 || patch_size <= 0)
    throw Error(ErrorKind::InvalidArgument, "image size and patch size must be positive");
  CalibrationFit out;
  SensorNoiseModel& m = out.model;
  m.patch_size = patch_size;
  m.width = width;
  m.height = height;
  const int px = m.patches_x();
  const int py = m.patches_y();

  std::vector<std::vector<const CalibrationSample*>> bins(static_cast<std::size_t>(px) * py);
  std::vector<const CalibrationSample*> central, all;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& s : samples) {
    if (s.u < 0 || s.v < 0 || s.u >= width || s.v >= height) continue;
    if (!(s.z_gt > 0) || !(s.z_meas > 0) || !std::isfinite(s.z_gt) || !std::isfinite(s.z_meas)) continue;
    bins[static_cast<std::size_t>(s.v / patch_size) * px + s.u / patch_size].push_back(&s);
    all.push_back(&s);
    if (3 * s.u >= width && 3 * s.u < 2 * width && 3 * s.v >= height && 3 * s.v < 2 * height) central.push_back(&s);
    lo = std::min(lo, s.z_gt);
    hi = std::max(hi, s.z_gt);
  }
  if (all.size() < opt.min_samples) throw Error(ErrorKind::InsufficientData, "too few valid calibration samples");
  if (hi - lo < opt.min_depth_span) throw Error(ErrorKind::DegenerateFit, "calibration depth span too small");
  m.d_min = lo;
  m.d_max = hi;

  auto agg = detail::fit_patch(central, opt, out.aggregate);
  if (!agg) {
    out.aggregate = {};
    agg = detail::fit_patch(all, opt, out.aggregate);
  }
  if (!agg) throw Error(ErrorKind::DegenerateFit, "aggregate model could not be fitted");
  m.aggregate = *agg;

  m.patches.resize(bins.size());
  for (int j = 0; j < py; ++j) {
    for (int i = 0; i < px; ++i) {
      const std::size_t k = static_cast<std::size_t>(j) * px + i;
      PatchDiagnostics d;
      d.i = i;
      d.j = j;
      m.patches[k] = detail::fit_patch(bins[k], opt, d);
      out.fitted_patches += d.fitted ? 1 : 0;
      out.patches.push_back(d);
    }
  }
  return out;
}

inline SensorNoiseModel fit_calibration(const std::vector<CalibrationSample>& samples, int width, int height,
                                        int patch_size = 20, const FitOptions& opt = {}) {
  return fit_calibration_report(samples, width, height, patch_size, opt).model;
}

/// Samples a noisy depth image: each valid pixel becomes zhat(d) + N(0, sigma(d)^2).
inline DepthImage simulate_noisy_depth(const SensorNoiseModel& model, const DepthImage& truth, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  DepthImage out(truth.width, truth.height);
  for (int v = 0; v < truth.height; ++v) {
    for (int u = 0; u < truth.width; ++u) {
      const double d = truth.at(u, v);
      if (!DepthImage::is_valid(d)) continue;
      const NoisePolynomial& p = model.for_pixel(u, v);
      const double s = std::max(0.0, NoisePolynomial::eval(p.sigma, model.clamp_depth(d)));
      double z = p.predicted(d);
      if (s > 0) z += s * gauss(rng);
      out.at(u, v) = z > 0 ? z : 0.0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const SensorNoiseModel& m) {
  nlohmann::json j;
  j["patch_size"] = m.patch_size;
  j["width"] = m.width;
  j["height"] = m.height;
  j["d_min"] = m.d_min;
  j["d_max"] = m.d_max;
  j["aggregate"] = {{"bias", m.aggregate.bias}, {"sigma", m.aggregate.sigma}};
  nlohmann::json patches = nlohmann::json::array();
  const int px = m.patches_x();
  for (std::size_t k = 0; k < m.patches.size(); ++k) {
    if (!m.patches[k]) continue;
    patches.push_back({{"i", static_cast<int>(k) % px},
                       {"j", static_cast<int>(k) / px},
                       {"bias", m.patches[k]->bias},
                       {"sigma", m.patches[k]->sigma}});
  }
  j["patches"] = patches;
  return j;
}

inline SensorNoiseModel noise_model_from_json(const nlohmann::json& j) {
  try {
    SensorNoiseModel m;
    m.patch_size = j.at("patch_size").get<int>();
    m.width = j.at("width").get<int>();
    m.height = j.at("height").get<int>();
    m.d_min = j.at("d_min").get<double>();
    m.d_max = j.at("d_max").get<double>();
    m.aggregate.bias = j.at("aggregate").at("bias").get<std::array<double, 3>>();
    m.aggregate.sigma = j.at("aggregate").at("sigma").get<std::array<double, 3>>();
    if (m.patch_size <= 0 || m.width < 0 || m.height < 0 || !(m.d_max >= m.d_min))
      throw Error(ErrorKind::ParseError, "noise model has an invalid geometry or range");
    const auto& patches = j.at("patches");
    if (!patches.empty()) {
      m.patches.assign(static_cast<std::size_t>(m.patches_x()) * m.patches_y(), std::nullopt);
      for (const auto& p : patches) {
        const int i = p.at("i").get<int>();
        const int jj = p.at("j").get<int>();
        if (i < 0 || jj < 0 || i >= m.patches_x() || jj >= m.patches_y())
          throw Error(ErrorKind::ParseError, "noise model patch index out of range");
        m.patches[static_cast<std::size_t>(jj) * m.patches_x() + i] =
            NoisePolynomial{p.at("bias").get<std::array<double, 3>>(), p.at("sigma").get<std::array<double, 3>>()};
      }
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ParseError, std::string("noise model JSON: ") + e.what());
  }
}

inline void save_noise_model(const std::string& path, const SensorNoiseModel& m) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot write " + path);
  f << to_json(m).dump(2) << '\n';
}

inline SensorNoiseModel load_noise_model(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ParseError, path + ": " + e.what());
  }
  return noise_model_from_json(j);
}

}  // namespace mrfmap
