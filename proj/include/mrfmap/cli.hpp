#pragma once

// Command-line front end: simulate, calibrate, build, eval and compare. Each command reads and
// writes the file formats of the library modules; all outputs go under the --output directory.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mrfmap/dataset.hpp"
#include "mrfmap/error.hpp"
#include "mrfmap/logodds.hpp"
#include "mrfmap/map_eval.hpp"
#include "mrfmap/probability_map.hpp"
#include "mrfmap/ray_mrf.hpp"
#include "mrfmap/sensor_model.hpp"

namespace mrfmap::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kRuntimeError = 4 };

inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidArgument:
    case ErrorKind::Config:
      return kConfigError;
    case ErrorKind::ParseError:
    case ErrorKind::IoError:
    case ErrorKind::DecodeError:
    case ErrorKind::DimensionMismatch:
    case ErrorKind::NonMonotonicTimestamps:
    case ErrorKind::InvalidDepth:
    case ErrorKind::InsufficientData:
    case ErrorKind::DegenerateFit:
      return kDataError;
    default:
      return kRuntimeError;
  }
}

/// JSON config files for CLI11: object keys are long option names, arrays give multiple values.
/// Nested objects address subcommands; top-level keys go to `*section` (the selected subcommand)
/// when it is set.
class JsonConfig : public CLI::Config {
 public:
  JsonConfig() = default;
  explicit JsonConfig(const std::string* section) : section_(section) {}

  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    json j;
    for (const CLI::Option* o : app->get_options({})) {
      if (o->get_lnames().empty() || !o->get_configurable()) continue;
      const std::string& name = o->get_lnames().front();
      if (o->count() > 0) {
        const auto r = o->results();
        if (r.size() == 1)
          j[name] = r.front();
        else
          j[name] = r;
      } else if (default_also && !o->get_default_str().empty()) {
        j[name] = o->get_default_str();
      }
    }
    return j.dump(2);
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
    std::vector<CLI::ConfigItem> items;
    flatten(j, {}, items);
    if (section_ && !section_->empty())
      for (auto& item : items)
        if (item.parents.empty()) item.parents = {*section_};
    return items;
  }

 private:
  const std::string* section_ = nullptr;

  static std::string scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  static void flatten(const json& j, const std::vector<std::string>& parents, std::vector<CLI::ConfigItem>& out) {
    for (const auto& [key, v] : j.items()) {
      if (v.is_object()) {
        auto p = parents;
        p.push_back(key);
        flatten(v, p, out);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (v.is_array()) {
        for (const auto& e : v) item.inputs.push_back(scalar(e));
      } else {
        item.inputs.push_back(scalar(v));
      }
      out.push_back(std::move(item));
    }
  }
};

// ---------------------------------------------------------------------------------------------
// Shared option groups

struct GridOptions {
  double resolution = 0.05;
  int brick_size = 8;
  std::vector<double> bounds_min;
  std::vector<double> bounds_max;

  void add(CLI::App& app) {
    app.add_option("--resolution", resolution, "Voxel side (m)")->capture_default_str();
    app.add_option("--brick-size", brick_size, "Brick edge (voxels, power of two)")->capture_default_str();
    app.add_option("--bounds-min", bounds_min, "Map volume min corner x y z (m); default from dataset bounds.json")
        ->expected(3);
    app.add_option("--bounds-max", bounds_max, "Map volume max corner x y z (m); default from dataset bounds.json")
        ->expected(3);
  }

  GridConfig resolve(const std::string& dataset_dir, double voxel_side) const {
    Vec3 lo, hi;
    if (!bounds_min.empty() || !bounds_max.empty()) {
      if (bounds_min.size() != 3 || bounds_max.size() != 3)
        throw Error(ErrorKind::Config, "--bounds-min and --bounds-max need three values each");
      lo = {bounds_min[0], bounds_min[1], bounds_min[2]};
      hi = {bounds_max[0], bounds_max[1], bounds_max[2]};
    } else {
      const fs::path p = fs::path(dataset_dir) / "bounds.json";
      if (!fs::exists(p)) throw Error(ErrorKind::Config, "no --bounds-min/--bounds-max and no " + p.string());
      const json j = read_json_file(p.string());
      try {
        const auto a = j.at("min").get<std::array<double, 3>>();
        const auto b = j.at("max").get<std::array<double, 3>>();
        lo = {a[0], a[1], a[2]};
        hi = {b[0], b[1], b[2]};
      } catch (const json::exception& e) {
        throw Error(ErrorKind::ParseError, p.string() + ": " + e.what());
      }
    }
    if (!(voxel_side > 0)) throw Error(ErrorKind::Config, "--resolution must be positive");
    try {
      return GridConfig::covering(lo, hi, voxel_side, brick_size);
    } catch (const Error& e) {
      throw Error(ErrorKind::Config, e.what());
    }
  }
};

struct NoiseOptions {
  std::string noise_model;
  double sigma = 0.0;

  void add(CLI::App& app) {
    app.add_option("--noise-model", noise_model, "Sensor noise model JSON (bias and sigma polynomials, m)");
    app.add_option("--sigma", sigma, "Constant sensor noise standard deviation (m), used without --noise-model");
  }

  bool given() const { return !noise_model.empty() || sigma > 0; }

  SensorNoiseModel resolve(int width, int height) const {
    if (!noise_model.empty()) return load_noise_model(noise_model);
    if (sigma > 0) return SensorNoiseModel::constant(sigma, width, height);
    throw Error(ErrorKind::Config, "a sensor model is required: pass --noise-model or --sigma");
  }
};

struct BuildOptions {
  std::string dataset;
  std::string list = "depth.txt";
  std::string method = "mrf";
  GridOptions grid;
  NoiseOptions noise;
  InferenceConfig inference;
  LogOddsConfig logodds;
  KeyframePolicy keyframes;
  bool all_frames = false;
  double max_gap = 0.02;
  unsigned threads = 0;
  std::uint64_t seed = 0;
  int hold_out = -1;
  bool incremental = false;

  void add(CLI::App& app, bool with_method = true) {
    app.add_option("--dataset", dataset, "Dataset directory (intrinsics.json, trajectory.txt, frame lists)")->required();
    app.add_option("--list", list, "Frame list inside the dataset used for building")->capture_default_str();
    if (with_method)
      app.add_option("--method", method, "Map type")->check(CLI::IsMember({"mrf", "logodds"}))->capture_default_str();
    grid.add(app);
    noise.add(app);
    app.add_option("--prior", inference.prior, "Prior occupancy probability")->capture_default_str();
    app.add_option("--passes", inference.passes, "Belief propagation rounds over all keyframes")->capture_default_str();
    app.add_option("--sigma-cutoff", inference.sigma_cutoff, "Ray window beyond the measurement (sensor sigmas)")
        ->capture_default_str();
    app.add_option("--message-floor", inference.message_floor, "Lower bound on incoming message components")
        ->capture_default_str();
    app.add_option("--p-hit", logodds.p_hit, "Log-odds hit probability")->capture_default_str();
    app.add_option("--p-miss", logodds.p_miss, "Log-odds miss probability")->capture_default_str();
    app.add_option("--clamp-min", logodds.clamp_min, "Log-odds lower clamp (probability)")->capture_default_str();
    app.add_option("--clamp-max", logodds.clamp_max, "Log-odds upper clamp (probability)")->capture_default_str();
    app.add_option("--max-range", logodds.max_range, "Log-odds maximum integrated range (m)")->capture_default_str();
    app.add_option("--keyframe-translation", keyframes.max_translation, "Keyframe translation threshold (m)")
        ->capture_default_str();
    app.add_option("--keyframe-rotation", keyframes.max_rotation, "Keyframe rotation threshold (rad)")
        ->capture_default_str();
    app.add_flag("--all-frames", all_frames, "Use every frame as a keyframe");
    app.add_option("--max-gap", max_gap, "Largest frame-to-pose timestamp gap (s)")->capture_default_str();
    app.add_option("--threads", threads, "Worker threads (0: all cores)")->capture_default_str();
    app.add_option("--seed", seed, "Random seed, recorded in the build log")->capture_default_str();
    app.add_option("--hold-out", hold_out, "Index of a frame to leave out of the build (-1: none)")
        ->capture_default_str();
    app.add_flag("--incremental", incremental, "Run the passes after every added keyframe and log each step");
  }
};

struct EvalOptions {
  double k = 1.5;
  std::string band = "sigma";
  double vis_threshold = 0.5;
  std::string unallocated = "transparent";
  std::string eval_noise_model;
  double eval_sigma = 0.0;
  std::string eval_list = "gt.txt";
  bool classification = false;

  void add(CLI::App& app) {
    app.add_option("--k", k, "Accuracy band half-width (multiples of sigma)")->capture_default_str();
    app.add_option("--band", band, "Accuracy rule")->check(CLI::IsMember({"sigma", "voxel"}))->capture_default_str();
    app.add_option("--vis-threshold", vis_threshold, "Exit visibility above which the map counts as transparent")
        ->capture_default_str();
    app.add_option("--unallocated", unallocated, "Occlusion of space outside allocated bricks")
        ->check(CLI::IsMember({"transparent", "prior"}))
        ->capture_default_str();
    app.add_option("--eval-noise-model", eval_noise_model, "Noise model JSON giving the band sigma (m)");
    app.add_option("--eval-sigma", eval_sigma, "Constant band sigma (m)");
    app.add_option("--eval-list", eval_list, "Frame list with the evaluation depth images")->capture_default_str();
    app.add_flag("--classification", classification, "Write per-pixel classification PNGs");
  }

  EvalConfig resolve(const NoiseOptions* fallback, int width, int height, unsigned threads) const {
    EvalConfig c;
    c.k = k;
    c.band = band == "voxel" ? BandMode::VoxelBounds : BandMode::Sigma;
    c.vis_boundary_threshold = vis_threshold;
    c.unallocated = unallocated == "prior" ? UnallocatedPolicy::MapDefault : UnallocatedPolicy::Transparent;
    c.threads = threads;
    if (!eval_noise_model.empty())
      c.sigma_model = load_noise_model(eval_noise_model);
    else if (eval_sigma > 0)
      c.sigma_model = SensorNoiseModel::constant(eval_sigma, width, height);
    else if (fallback && fallback->given())
      c.sigma_model = fallback->resolve(width, height);
    else
      throw Error(ErrorKind::Config, "an evaluation sigma is required: pass --eval-noise-model or --eval-sigma");
    try {
      c.validate();
    } catch (const Error& e) {
      throw Error(ErrorKind::Config, e.what());
    }
    return c;
  }
};

// ---------------------------------------------------------------------------------------------
// Building

struct BuildResult {
  ProbabilityMap map;
  json log;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Builds one map from the dataset frames listed in `frames` (indices into ds.frames).
inline BuildResult build_map(const BuildOptions& opt, const Dataset& ds, const std::vector<std::size_t>& frames,
                             double voxel_side, const std::string& method) {
  const auto t_start = std::chrono::steady_clock::now();
  const GridConfig grid = opt.grid.resolve(opt.dataset, voxel_side);
  std::vector<std::size_t> chosen = frames;
  if (!opt.all_frames) {
    std::vector<Pose> poses;
    for (std::size_t i : frames) poses.push_back(ds.frames[i].pose);
    std::vector<std::size_t> picked;
    for (std::size_t k : select_keyframes(poses, opt.keyframes)) picked.push_back(frames[k]);
    chosen = std::move(picked);
  }
  if (chosen.empty()) throw Error(ErrorKind::InsufficientData, "no frames to build from");

  json log;
  log["method"] = method;
  log["resolution"] = voxel_side;
  log["seed"] = opt.seed;
  log["grid"] = {{"origin", {grid.origin.x(), grid.origin.y(), grid.origin.z()}},
                 {"dims", {grid.dims.x(), grid.dims.y(), grid.dims.z()}},
                 {"brick_size", grid.brick_size}};
  log["frames_available"] = frames.size();
  log["unassociated_frames"] = ds.unassociated;
  json kf_ids = json::array();
  for (std::size_t i : chosen) kf_ids.push_back(ds.frames[i].timestamp);
  log["keyframe_timestamps"] = kf_ids;
  json per_kf = json::array();

  if (method == "logodds") {
    LogOddsMap map(grid, opt.logodds);
    for (std::size_t i : chosen) {
      const auto t0 = std::chrono::steady_clock::now();
      map.integrate_scan(ds.intrinsics, ds.frames[i].pose, ds.frames[i].depth);
      per_kf.push_back({{"timestamp", ds.frames[i].timestamp}, {"integrate_seconds", seconds_since(t0)},
                        {"bricks", map.topology().brick_count()}});
    }
    log["keyframes"] = per_kf;
    log["bricks"] = map.topology().brick_count();
    log["seconds_total"] = seconds_since(t_start);
    return {map.to_probability_map(), log};
  }
  if (method != "mrf") throw Error(ErrorKind::Config, "unknown method " + method);

  const SensorNoiseModel noise = opt.noise.resolve(ds.intrinsics.width, ds.intrinsics.height);
  InferenceConfig ic = opt.inference;
  ic.threads = opt.threads;
  try {
    ic.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::Config, e.what());
  }
  MrfMapper mapper(grid, ds.intrinsics, noise, ic);
  std::size_t out_of_bounds = 0;
  for (std::size_t i : chosen) {
    const auto t0 = std::chrono::steady_clock::now();
    Keyframe kf = ds.frames[i];
    kf.id = static_cast<int>(i);
    const AllocationStats a = mapper.add_keyframe(std::move(kf));
    out_of_bounds += a.out_of_bounds_points;
    json entry = {{"timestamp", ds.frames[i].timestamp},
                  {"new_bricks", a.new_bricks},
                  {"allocate_seconds", seconds_since(t0)},
                  {"bricks", mapper.grid().topology().brick_count()}};
    if (opt.incremental) {
      const auto t1 = std::chrono::steady_clock::now();
      mapper.run();
      entry["inference_seconds"] = seconds_since(t1);
    }
    per_kf.push_back(entry);
  }
  if (!opt.incremental) mapper.run();
  const InferenceStats& st = mapper.stats();
  log["keyframes"] = per_kf;
  log["passes"] = ic.passes;
  log["incremental"] = opt.incremental;
  log["pass_seconds"] = st.pass_seconds;
  log["sweep_seconds"] = st.sweep_seconds;
  log["rays"] = st.rays;
  log["skipped_rays"] = st.skipped_rays;
  log["steps"] = st.steps;
  log["degenerate_messages"] = st.degenerate_messages;
  log["out_of_bounds_points"] = out_of_bounds;
  log["bricks"] = mapper.grid().topology().brick_count();
  log["seconds_total"] = seconds_since(t_start);
  return {mapper.to_probability_map(), log};
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create output directory " + dir);
}

inline std::vector<std::size_t> all_indices(std::size_t n, int skip = -1) {
  std::vector<std::size_t> v;
  for (std::size_t i = 0; i < n; ++i)
    if (static_cast<int>(i) != skip) v.push_back(i);
  return v;
}

/// Evaluation frame whose timestamp matches `t`.
inline const Keyframe& matching_frame(const Dataset& eval, double t) {
  for (const auto& f : eval.frames)
    if (std::abs(f.timestamp - t) < 1e-6) return f;
  std::ostringstream s;
  s << "no evaluation image with timestamp " << t;
  throw Error(ErrorKind::DimensionMismatch, s.str());
}

struct Fold {
  ImageScore score;
  ImageEvaluation eval;
};

/// Leave-one-out: for every build frame k, builds without k and scores the evaluation image of k.
inline std::vector<ImageScore> leave_one_out(const BuildOptions& opt, const Dataset& ds, const Dataset& eval_ds,
                                             const EvalConfig& ec, double voxel_side, const std::string& method,
                                             std::ostream& log_out, const std::string& png_dir = "") {
  std::vector<ImageScore> scores;
  for (std::size_t k = 0; k < ds.frames.size(); ++k) {
    const BuildResult b = build_map(opt, ds, all_indices(ds.frames.size(), static_cast<int>(k)), voxel_side, method);
    const Keyframe& target = matching_frame(eval_ds, ds.frames[k].timestamp);
    const ImageEvaluation e =
        evaluate_image(b.map, eval_ds.intrinsics, target.pose, target.depth, ec, static_cast<int>(k));
    if (!png_dir.empty()) {
      std::ostringstream name;
      name << method << '_' << std::setw(6) << std::setfill('0') << k << ".png";
      write_classification_png((fs::path(png_dir) / name.str()).string(), e, target.depth.width, target.depth.height);
    }
    log_out << method << " res " << voxel_side << " fold " << k << ": " << e.score.accurate << '/' << e.score.valid
            << '\n';
    scores.push_back(e.score);
  }
  return scores;
}

// ---------------------------------------------------------------------------------------------
// Commands

inline void cmd_build(const BuildOptions& opt, const std::string& out_dir, double export_threshold) {
  const Dataset ds = load_dataset(opt.dataset, opt.list, opt.max_gap);
  if (ds.frames.empty()) throw Error(ErrorKind::InsufficientData, "dataset has no frames with poses");
  if (opt.hold_out >= static_cast<int>(ds.frames.size()))
    throw Error(ErrorKind::Config, "--hold-out index beyond the frame count");
  BuildResult b = build_map(opt, ds, all_indices(ds.frames.size(), opt.hold_out), opt.grid.resolution, opt.method);
  ensure_dir(out_dir);
  b.map.save((fs::path(out_dir) / "map.mrfm").string());
  b.log["hold_out"] = opt.hold_out;
  write_json_file((fs::path(out_dir) / "build.json").string(), b.log);
  if (export_threshold >= 0) {
    const auto occ = b.map.export_occupied(export_threshold);
    write_occupied_csv((fs::path(out_dir) / "occupied.csv").string(), occ);
    write_occupied_ply((fs::path(out_dir) / "occupied.ply").string(), occ);
  }
}

inline void write_summary(const std::string& out_dir, const AccuracySummary& s, const json& extra) {
  write_scores_csv((fs::path(out_dir) / "scores.csv").string(), s);
  json j = to_json(s);
  for (const auto& [k, v] : extra.items()) j[k] = v;
  write_json_file((fs::path(out_dir) / "summary.json").string(), j);
}

inline AccuracySummary cmd_eval_map(const std::string& map_path, const std::string& dataset,
                                    const std::vector<int>& frames, const EvalOptions& eo, unsigned threads,
                                    const std::string& out_dir) {
  const ProbabilityMap map = ProbabilityMap::load(map_path);
  const Dataset eval_ds = load_dataset(dataset, eo.eval_list);
  if (eval_ds.frames.empty()) throw Error(ErrorKind::InsufficientData, "no evaluation frames");
  const EvalConfig ec = eo.resolve(nullptr, eval_ds.intrinsics.width, eval_ds.intrinsics.height, threads);
  ensure_dir(out_dir);
  std::vector<std::size_t> idx;
  if (frames.empty()) {
    idx = all_indices(eval_ds.frames.size());
  } else {
    for (int f : frames) {
      if (f < 0 || f >= static_cast<int>(eval_ds.frames.size()))
        throw Error(ErrorKind::Config, "--frames index out of range");
      idx.push_back(static_cast<std::size_t>(f));
    }
  }
  std::vector<ImageScore> scores;
  for (std::size_t i : idx) {
    const Keyframe& f = eval_ds.frames[i];
    const ImageEvaluation e = evaluate_image(map, eval_ds.intrinsics, f.pose, f.depth, ec, static_cast<int>(i));
    if (eo.classification) {
      std::ostringstream name;
      name << "class_" << std::setw(6) << std::setfill('0') << i << ".png";
      write_classification_png((fs::path(out_dir) / name.str()).string(), e, f.depth.width, f.depth.height);
    }
    scores.push_back(e.score);
  }
  const AccuracySummary s = summarize(scores);
  write_summary(out_dir, s, {{"map", map_path}, {"map_kind", to_string(map.kind())}});
  return s;
}

inline AccuracySummary cmd_eval_loo(const BuildOptions& opt, const EvalOptions& eo, const std::string& out_dir,
                                    std::ostream& log_out) {
  const Dataset ds = load_dataset(opt.dataset, opt.list, opt.max_gap);
  const Dataset eval_ds = load_dataset(opt.dataset, eo.eval_list, opt.max_gap);
  if (ds.frames.size() < 2) throw Error(ErrorKind::InsufficientData, "leave-one-out needs at least two frames");
  const EvalConfig ec = eo.resolve(&opt.noise, ds.intrinsics.width, ds.intrinsics.height, opt.threads);
  ensure_dir(out_dir);
  const auto scores =
      leave_one_out(opt, ds, eval_ds, ec, opt.grid.resolution, opt.method, log_out, eo.classification ? out_dir : "");
  const AccuracySummary s = summarize(scores);
  write_summary(out_dir, s, {{"method", opt.method}, {"resolution", opt.grid.resolution}, {"leave_one_out", true}});
  return s;
}

/// Reads "u,v,z_meas,z_gt" rows; a header line is allowed.
inline std::vector<CalibrationSample> load_samples_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open samples " + path);
  std::vector<CalibrationSample> out;
  std::string line;
  int row = 0;
  while (std::getline(f, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (row == 1 && line.find_first_of("0123456789") != 0 && line.find('u') != std::string::npos) continue;
    std::istringstream ss(line);
    std::string cell[4];
    bool ok = true;
    for (int c = 0; c < 4; ++c) ok = ok && static_cast<bool>(std::getline(ss, cell[c], ','));
    std::string extra;
    if (std::getline(ss, extra, ',')) ok = false;
    CalibrationSample s;
    try {
      std::size_t p0 = 0, p1 = 0, p2 = 0, p3 = 0;
      if (ok) {
        s.u = std::stoi(cell[0], &p0);
        s.v = std::stoi(cell[1], &p1);
        s.z_meas = std::stod(cell[2], &p2);
        s.z_gt = std::stod(cell[3], &p3);
        ok = p0 == cell[0].size() && p1 == cell[1].size() && p2 == cell[2].size() && p3 == cell[3].size();
      }
    } catch (const std::exception&) {
      ok = false;
    }
    if (!ok) throw Error(ErrorKind::ParseError, path + ": row " + std::to_string(row) + ": expected u,v,z_meas,z_gt");
    out.push_back(s);
  }
  return out;
}

inline void write_samples_csv(const std::string& path, const std::vector<CalibrationSample>& samples) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot write " + path);
  f << "u,v,z_meas,z_gt\n";
  f.precision(17);
  for (const auto& s : samples) f << s.u << ',' << s.v << ',' << s.z_meas << ',' << s.z_gt << '\n';
}

inline void cmd_calibrate(const std::string& samples_path, int width, int height, int patch_size,
                          const FitOptions& fo, const std::string& out_dir) {
  const auto samples = load_samples_csv(samples_path);
  if (width <= 0 || height <= 0 || patch_size <= 0)
    throw Error(ErrorKind::Config, "--width, --height and --patch-size must be positive");
  const CalibrationFit fit = fit_calibration_report(samples, width, height, patch_size, fo);
  ensure_dir(out_dir);
  save_noise_model((fs::path(out_dir) / "noise_model.json").string(), fit.model);
  auto diag = [](const PatchDiagnostics& d) {
    return json{{"i", d.i}, {"j", d.j}, {"samples", d.samples}, {"fitted", d.fitted},
                {"r2_bias", d.r2_bias}, {"r2_sigma", d.r2_sigma}};
  };
  json j;
  j["samples"] = samples.size();
  j["aggregate"] = diag(fit.aggregate);
  j["fitted_patches"] = fit.fitted_patches;
  json patches = json::array();
  for (const auto& d : fit.patches) patches.push_back(diag(d));
  j["patches"] = patches;
  write_json_file((fs::path(out_dir) / "calibration.json").string(), j);
}

inline void cmd_simulate(const std::string& scene_path, const std::string& intr_path, const std::string& noise_path,
                         std::optional<std::uint64_t> seed, double dt, const std::string& out_dir) {
  json sj = read_json_file(scene_path);
  SyntheticScene scene;
  CameraIntrinsics intr;
  try {
    scene = scene_from_json(sj);
    intr = load_intrinsics(intr_path);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ParseError || e.kind() == ErrorKind::InvalidArgument)
      throw Error(ErrorKind::Config, e.what());
    throw;
  }
  if (scene.cameras.empty()) throw Error(ErrorKind::Config, "scene has no cameras");
  if (scene.boxes.empty() && scene.planes.empty()) throw Error(ErrorKind::Config, "scene has no geometry");
  std::optional<SensorNoiseModel> noise;
  if (!noise_path.empty()) {
    if (!seed) throw Error(ErrorKind::Config, "--seed is required when simulating noise");
    noise = load_noise_model(noise_path);
  }
  if (!(dt > 0)) throw Error(ErrorKind::Config, "--dt must be positive");
  ensure_dir(out_dir);
  ensure_dir((fs::path(out_dir) / "gt").string());
  ensure_dir((fs::path(out_dir) / "noisy").string());
  write_json_file((fs::path(out_dir) / "intrinsics.json").string(), to_json(intr));
  if (sj.contains("bounds")) write_json_file((fs::path(out_dir) / "bounds.json").string(), sj.at("bounds"));
  std::vector<StampedPose> traj;
  std::vector<FrameEntry> gt_list, noisy_list;
  for (std::size_t i = 0; i < scene.cameras.size(); ++i) {
    const double t = static_cast<double>(i) * dt;
    traj.push_back({t, scene.cameras[i]});
    const DepthImage gt = render_synthetic_depth(scene, intr, scene.cameras[i]);
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << i << ".png";
    save_depth_png((fs::path(out_dir) / "gt" / name.str()).string(), gt, intr.depth_scale);
    // Each frame gets its own stream derived from the seed so frames are independent of order.
    const DepthImage noisy = noise ? simulate_noisy_depth(*noise, gt, *seed * 1000003ULL + i) : gt;
    save_depth_png((fs::path(out_dir) / "noisy" / name.str()).string(), noisy, intr.depth_scale);
    gt_list.push_back({t, "gt/" + name.str()});
    noisy_list.push_back({t, "noisy/" + name.str()});
  }
  save_trajectory((fs::path(out_dir) / "trajectory.txt").string(), traj);
  save_frame_list((fs::path(out_dir) / "gt.txt").string(), gt_list);
  save_frame_list((fs::path(out_dir) / "depth.txt").string(), noisy_list);
}

struct CompareCell {
  double resolution = 0.0;
  std::string method;
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t images = 0;
};

inline void write_compare_csv(const std::string& path, const std::vector<CompareCell>& cells) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot write " + path);
  f.precision(17);
  f << "resolution,method,mean,std,images\n";
  for (const auto& c : cells) f << c.resolution << ',' << c.method << ',' << c.mean << ',' << c.stddev << ',' << c.images << '\n';
}

inline std::vector<CompareCell> load_compare_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path);
  std::vector<CompareCell> out;
  std::string line;
  int row = 0;
  while (std::getline(f, line)) {
    if (++row == 1) continue;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell[5];
    for (auto& c : cell)
      if (!std::getline(ss, c, ',')) throw Error(ErrorKind::ParseError, path + ": row " + std::to_string(row));
    try {
      out.push_back({std::stod(cell[0]), cell[1], std::stod(cell[2]), std::stod(cell[3]),
                     static_cast<std::size_t>(std::stoull(cell[4]))});
    } catch (const std::exception&) {
      throw Error(ErrorKind::ParseError, path + ": row " + std::to_string(row));
    }
  }
  return out;
}

inline std::string format_compare_table(const std::vector<double>& resolutions, const std::vector<std::string>& methods,
                                        const std::vector<CompareCell>& cells) {
  std::ostringstream s;
  s << std::left << std::setw(10) << "method";
  for (double r : resolutions) {
    std::ostringstream h;
    h << r << " m";
    s << std::setw(18) << h.str();
  }
  s << '\n';
  for (const auto& m : methods) {
    s << std::setw(10) << m;
    for (double r : resolutions) {
      for (const auto& c : cells) {
        if (c.method != m || c.resolution != r) continue;
        std::ostringstream v;
        v << std::fixed << std::setprecision(3) << c.mean << " +- " << c.stddev;
        s << std::setw(18) << v.str();
      }
    }
    s << '\n';
  }
  return s.str();
}

inline std::vector<CompareCell> cmd_compare(const BuildOptions& opt, const EvalOptions& eo,
                                            const std::vector<double>& resolutions,
                                            const std::vector<std::string>& methods, bool loo,
                                            const std::string& out_dir, std::ostream& out) {
  if (resolutions.empty() || methods.empty()) throw Error(ErrorKind::Config, "need at least one resolution and method");
  const Dataset ds = load_dataset(opt.dataset, opt.list, opt.max_gap);
  const Dataset eval_ds = load_dataset(opt.dataset, eo.eval_list, opt.max_gap);
  if (ds.frames.empty() || eval_ds.frames.empty()) throw Error(ErrorKind::InsufficientData, "dataset has no frames");
  const EvalConfig ec = eo.resolve(&opt.noise, ds.intrinsics.width, ds.intrinsics.height, opt.threads);
  ensure_dir(out_dir);
  std::vector<CompareCell> cells;
  json per_res = json::object();
  std::ostringstream progress;
  for (double r : resolutions) {
    for (const auto& m : methods) {
      std::vector<ImageScore> scores;
      if (loo) {
        scores = leave_one_out(opt, ds, eval_ds, ec, r, m, progress);
      } else {
        const BuildResult b = build_map(opt, ds, all_indices(ds.frames.size()), r, m);
        for (std::size_t i = 0; i < eval_ds.frames.size(); ++i) {
          const auto& f = eval_ds.frames[i];
          scores.push_back(evaluate_image(b.map, eval_ds.intrinsics, f.pose, f.depth, ec, static_cast<int>(i)).score);
        }
      }
      const AccuracySummary s = summarize(scores);
      cells.push_back({r, m, s.mean, s.stddev, s.images.size()});
      std::ostringstream key;
      key << r;
      per_res[key.str()][m] = to_json(s);
    }
  }
  write_compare_csv((fs::path(out_dir) / "compare.csv").string(), cells);
  const std::string table = format_compare_table(resolutions, methods, cells);
  std::ofstream((fs::path(out_dir) / "compare.txt").string()) << table;
  write_json_file((fs::path(out_dir) / "compare.json").string(), {{"per_resolution", per_res}, {"leave_one_out", loo}});
  std::ofstream((fs::path(out_dir) / "compare.log").string()) << progress.str();
  out << table;
  return cells;
}

// ---------------------------------------------------------------------------------------------
// Entry point

/// Parses and runs one command. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Probabilistic occupancy mapping with ray Markov random fields"};
  app.require_subcommand(1);
  // CLI11 reads config files on the root app only; fallthrough lets `build --config f.json` reach it.
  std::string section;
  app.config_formatter(std::make_shared<JsonConfig>(&section));
  app.set_config("--config", "", "JSON file with option values for the subcommand; command-line flags take precedence");
  app.fallthrough();

  std::string out_dir = "out";
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-o,--output", out_dir, "Output directory")->capture_default_str();
    sub->preparse_callback([&section, sub](std::size_t) { section = sub->get_name(); });
    sub->footer("Option values may also come from a JSON file: --config FILE (keys are long option names; "
                "command-line flags win).");
  };

  BuildOptions build_opt;
  double export_threshold = -1.0;
  CLI::App* build = app.add_subcommand("build", "Build an occupancy map from a dataset");
  build_opt.add(*build);
  build->add_option("--export-threshold", export_threshold,
                    "Also write occupied voxels with probability at least this value (negative: off)")
      ->capture_default_str();
  add_common(build);

  std::string map_path;
  std::vector<int> eval_frames;
  bool eval_loo = false;
  BuildOptions eval_build;
  EvalOptions eval_opt;
  CLI::App* eval = app.add_subcommand("eval", "Score a map against evaluation depth images");
  eval->add_option("--map", map_path, "Map file to evaluate");
  eval->add_flag("--leave-one-out", eval_loo, "Build once per frame without it and score only that frame");
  eval->add_option("--frames", eval_frames, "Evaluation frame indices (default: all)");
  eval_build.add(*eval);
  eval_opt.add(*eval);
  add_common(eval);

  std::string samples;
  int cal_w = 0, cal_h = 0, patch = 20;
  FitOptions fit_opt;
  CLI::App* calibrate = app.add_subcommand("calibrate", "Fit a sensor noise model from depth samples");
  calibrate->add_option("--samples", samples, "CSV with u,v,z_meas,z_gt (px, px, m, m)")->required();
  calibrate->add_option("--width", cal_w, "Image width (px)")->required();
  calibrate->add_option("--height", cal_h, "Image height (px)")->required();
  calibrate->add_option("--patch-size", patch, "Patch edge (px)")->capture_default_str();
  calibrate->add_option("--min-samples", fit_opt.min_samples, "Samples needed to fit a patch")->capture_default_str();
  calibrate->add_option("--min-span", fit_opt.min_depth_span, "Depth span needed to fit a patch (m)")
      ->capture_default_str();
  add_common(calibrate);

  std::string scene_path, intr_path, sim_noise;
  std::uint64_t sim_seed = 0;
  double sim_dt = 1.0;
  CLI::App* simulate = app.add_subcommand("simulate", "Render ground-truth and noisy depth images of a scene");
  simulate->add_option("--scene", scene_path, "Scene JSON (boxes, planes and cameras in m)")->required();
  simulate->add_option("--intrinsics", intr_path, "Intrinsics JSON (px; depth_scale raw units per m)")->required();
  simulate->add_option("--noise-model", sim_noise, "Noise model JSON; without it the noisy set equals the ground truth");
  CLI::Option* seed_opt = simulate->add_option("--seed", sim_seed, "Random seed for the noise");
  simulate->add_option("--dt", sim_dt, "Time between frames (s)")->capture_default_str();
  add_common(simulate);

  BuildOptions cmp_build;
  EvalOptions cmp_eval;
  std::vector<double> resolutions{0.02, 0.05};
  std::vector<std::string> methods{"mrf", "logodds"};
  bool no_loo = false;
  CLI::App* compare = app.add_subcommand("compare", "Build and score every method at every resolution");
  cmp_build.add(*compare, false);
  cmp_eval.add(*compare);
  compare->add_option("--resolutions", resolutions, "Voxel sides to compare (m)")->capture_default_str();
  compare->add_option("--methods", methods, "Methods to compare")
      ->check(CLI::IsMember({"mrf", "logodds"}))
      ->capture_default_str();
  compare->add_flag("--no-leave-one-out", no_loo, "Build from all frames and score every evaluation image");
  add_common(compare);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kOk;
    }
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }

  try {
    if (build->parsed()) {
      cmd_build(build_opt, out_dir, export_threshold);
    } else if (eval->parsed()) {
      if (eval_loo) {
        const auto s = cmd_eval_loo(eval_build, eval_opt, out_dir, err);
        out << std::setprecision(17) << "mean " << s.mean << " std " << s.stddev << '\n';
      } else {
        if (map_path.empty()) throw Error(ErrorKind::Config, "--map is required unless --leave-one-out is given");
        const auto s = cmd_eval_map(map_path, eval_build.dataset, eval_frames, eval_opt, eval_build.threads, out_dir);
        out << std::setprecision(17) << "mean " << s.mean << " std " << s.stddev << '\n';
      }
    } else if (calibrate->parsed()) {
      cmd_calibrate(samples, cal_w, cal_h, patch, fit_opt, out_dir);
    } else if (simulate->parsed()) {
      std::optional<std::uint64_t> seed;
      if (seed_opt->count() > 0) seed = sim_seed;
      cmd_simulate(scene_path, intr_path, sim_noise, seed, sim_dt, out_dir);
    } else if (compare->parsed()) {
      cmd_compare(cmp_build, cmp_eval, resolutions, methods, !no_loo, out_dir, out);
    }
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}

}  // namespace mrfmap::cli
