#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "mrfmap/dataset.hpp"
#include "support.hpp"

using namespace mrfmap;

namespace {

std::vector<StampedPose> parse(const std::string& text) {
  std::istringstream in(text);
  return parse_trajectory(in, "traj.txt");
}

std::string error_message(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

const CameraIntrinsics kCam{100.0, 100.0, 31.5, 23.5, 64, 48, 5000.0};

}  // namespace

// --- trajectories -------------------------------------------------------------------------

TEST(Trajectory, IdentityLine) {
  const auto t = parse("# header\n\n0.0 0 0 0 0 0 0 1\n");
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0].timestamp, 0.0);
  EXPECT_TRUE(t[0].pose.rotation.isApprox(Mat3::Identity(), 1e-15));
  EXPECT_EQ(t[0].pose.translation, Vec3::Zero());
}

TEST(Trajectory, YawQuaternion) {
  const auto t = parse("1.5 1 2 3 0 0 0.7071068 0.7071068\n");
  ASSERT_EQ(t.size(), 1u);
  Mat3 expect;
  expect << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  EXPECT_TRUE(t[0].pose.rotation.isApprox(expect, 1e-6));
  EXPECT_TRUE(t[0].pose.is_valid());
  EXPECT_EQ(t[0].pose.translation, Vec3(1, 2, 3));
}

TEST(Trajectory, RoundTrip) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> N(0, 1);
  std::vector<StampedPose> poses(100);
  double t = 1000.0;
  for (auto& p : poses) {
    t += 0.033 + 0.01 * std::abs(N(rng));
    p.timestamp = t;
    p.pose = Pose::from_quaternion(Eigen::Quaterniond(N(rng), N(rng), N(rng), N(rng)), {N(rng), N(rng), N(rng)});
  }
  std::ostringstream out;
  write_trajectory(out, poses);
  const auto back = parse(out.str());
  ASSERT_EQ(back.size(), poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i) {
    EXPECT_NEAR(back[i].timestamp, poses[i].timestamp, 1e-9);
    EXPECT_LT((back[i].pose.translation - poses[i].pose.translation).norm(), 1e-9);
    EXPECT_LT((back[i].pose.rotation - poses[i].pose.rotation).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Trajectory, ParseErrorNamesTheLine) {
  EXPECT_THROW_KIND(parse("0 0 0 0 0 0 0 1\n1 0 0 abc 0 0 0 1\n"), ParseError);
  const std::string msg = error_message([] { parse("# c\n0 0 0 0 0 0 0 1\n1 0 0\n"); });
  EXPECT_NE(msg.find("traj.txt:3"), std::string::npos) << msg;
  EXPECT_THROW_KIND(parse("0 0 0 0 0 0 0 1 9\n"), ParseError);
  EXPECT_THROW_KIND(parse("0 0 0 0 0 0 0 0\n"), ParseError);
}

TEST(Trajectory, NonMonotonicTimestamps) {
  EXPECT_THROW_KIND(parse("1 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 1\n"), NonMonotonicTimestamps);
  EXPECT_THROW_KIND(parse("2 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 1\n"), NonMonotonicTimestamps);
}

TEST(Trajectory, MissingFile) { EXPECT_THROW_KIND(load_trajectory("/nonexistent/t.txt"), IoError); }

TEST(Association, NearestWithinGap) {
  const auto t = parse("0.00 0 0 0 0 0 0 1\n0.10 1 0 0 0 0 0 1\n0.20 2 0 0 0 0 0 1\n");
  EXPECT_EQ(associate_pose(t, 0.11)->translation.x(), 1.0);
  EXPECT_EQ(associate_pose(t, 0.19)->translation.x(), 2.0);
  EXPECT_EQ(associate_pose(t, 0.215)->translation.x(), 2.0);
  EXPECT_FALSE(associate_pose(t, 0.25).has_value());
  EXPECT_FALSE(associate_pose(t, 0.05).has_value());
  EXPECT_TRUE(associate_pose(t, 0.05, 0.06).has_value());
  EXPECT_FALSE(associate_pose({}, 0.0).has_value());
}

// --- depth PNG ------------------------------------------------------------------------------

TEST(DepthPng, UniformRawValue) {
  const auto dir = test::scratch_dir("png_uniform");
  RawDepth raw{kCam.width, kCam.height, std::vector<std::uint16_t>(kCam.width * kCam.height, 5000)};
  write_png16((dir / "d.png").string(), raw);
  const DepthImage img = load_depth_png((dir / "d.png").string(), kCam);
  EXPECT_EQ(img.valid_count(), 64u * 48u);
  for (double d : img.depth) EXPECT_EQ(d, 1.0);
}

TEST(DepthPng, ZeroIsInvalid) {
  const auto dir = test::scratch_dir("png_zero");
  write_png16((dir / "d.png").string(), RawDepth{kCam.width, kCam.height, std::vector<std::uint16_t>(64 * 48, 0)});
  EXPECT_EQ(load_depth_png((dir / "d.png").string(), kCam).valid_count(), 0u);
}

TEST(DepthPng, RenderEncodeDecodeRoundTrip) {
  const auto dir = test::scratch_dir("png_roundtrip");
  SyntheticScene scene;
  scene.boxes.push_back({{-0.4, -0.3, 1.5}, {0.3, 0.2, 2.2}});
  scene.planes.push_back({{0, 0, 3.0}, {0.2, 0.1, -1.0}, 0.0});
  scene.planes.back().normal.normalize();
  const Pose pose{Mat3::Identity(), Vec3(0.05, -0.02, 0.0)};
  const DepthImage gt = render_synthetic_depth(scene, kCam, pose);
  ASSERT_GT(gt.valid_count(), 0u);
  save_depth_png((dir / "d.png").string(), gt, kCam.depth_scale);
  const DepthImage back = load_depth_png((dir / "d.png").string(), kCam);
  for (std::size_t i = 0; i < gt.depth.size(); ++i) {
    ASSERT_EQ(DepthImage::is_valid(back.depth[i]), DepthImage::is_valid(gt.depth[i]));
    if (DepthImage::is_valid(gt.depth[i])) EXPECT_LE(std::abs(back.depth[i] - gt.depth[i]), 0.5 / kCam.depth_scale + 1e-12);
  }
}

TEST(DepthPng, OutOfRangeDepthBecomesInvalid) {
  DepthImage img(3, 1);
  img.at(0, 0) = 14.0;   // 70000 raw units
  img.at(1, 0) = 1e-5;   // rounds to 0
  img.at(2, 0) = 13.0;
  const RawDepth raw = encode_depth(img, 5000.0);
  EXPECT_EQ(raw.data[0], 0);
  EXPECT_EQ(raw.data[1], 0);
  EXPECT_EQ(raw.data[2], 65000);
}

TEST(DepthPng, Errors) {
  const auto dir = test::scratch_dir("png_errors");
  {
    std::ofstream f(dir / "bad.png");
    f << "not a png at all";
  }
  EXPECT_THROW_KIND(load_depth_png((dir / "bad.png").string(), kCam), DecodeError);
  write_png_rgb((dir / "rgb.png").string(), 4, 4, std::vector<std::uint8_t>(48, 7));
  EXPECT_THROW_KIND(read_png16((dir / "rgb.png").string()), DecodeError);
  write_png16((dir / "small.png").string(), RawDepth{32, 24, std::vector<std::uint16_t>(32 * 24, 100)});
  EXPECT_THROW_KIND(load_depth_png((dir / "small.png").string(), kCam), DimensionMismatch);
  EXPECT_THROW_KIND(load_depth_png((dir / "missing.png").string(), kCam), IoError);
}

// --- intrinsics, frame lists and datasets ---------------------------------------------------

TEST(Intrinsics, JsonRoundTripAndErrors) {
  EXPECT_EQ(to_json(intrinsics_from_json(to_json(kCam))), to_json(kCam));
  auto j = to_json(kCam);
  j.erase("fy");
  EXPECT_THROW_KIND(intrinsics_from_json(j), ParseError);
  j = to_json(kCam);
  j["fx"] = -1.0;
  EXPECT_THROW_KIND(intrinsics_from_json(j), InvalidArgument);
  j = to_json(kCam);
  j["width"] = "wide";
  EXPECT_THROW_KIND(intrinsics_from_json(j), ParseError);
}

TEST(Dataset, LoadsAssociatedFrames) {
  const auto dir = test::scratch_dir("dataset_load");
  write_json_file((dir / "intrinsics.json").string(), to_json(kCam));
  std::vector<StampedPose> traj;
  for (int i = 0; i < 5; ++i) traj.push_back({0.1 * i, Pose{Mat3::Identity(), Vec3(0.1 * i, 0, 0)}});
  save_trajectory((dir / "trajectory.txt").string(), traj);
  std::filesystem::create_directories(dir / "depth");
  std::vector<FrameEntry> frames;
  for (int i = 0; i < 3; ++i) {
    const std::string name = "depth/" + std::to_string(i) + ".png";
    save_depth_png((dir / name).string(), DepthImage(64, 48, 1.0 + i), kCam.depth_scale);
    frames.push_back({0.2 * i + 0.005, name});
  }
  save_depth_png((dir / "depth/x.png").string(), DepthImage(64, 48, 1.0), kCam.depth_scale);
  frames.push_back({5.0, "depth/x.png"});  // no pose nearby
  save_frame_list((dir / "depth.txt").string(), frames);

  const Dataset ds = load_dataset(dir.string());
  EXPECT_EQ(ds.unassociated, 1u);
  ASSERT_EQ(ds.frames.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(ds.frames[i].id, i);
    EXPECT_NEAR(ds.frames[i].pose.translation.x(), 0.2 * i, 1e-12);
    EXPECT_EQ(ds.frames[i].depth.at(10, 10), 1.0 + i);
  }
}

TEST(Dataset, MalformedFrameList) {
  const auto dir = test::scratch_dir("dataset_bad_list");
  {
    std::ofstream f(dir / "depth.txt");
    f << "# t path\n0.1 a.png\noops\n";
  }
  const std::string msg = error_message([&] { load_frame_list((dir / "depth.txt").string()); });
  EXPECT_NE(msg.find("depth.txt:3"), std::string::npos) << msg;
}

// --- keyframe selection ---------------------------------------------------------------------

TEST(Keyframes, StaticCameraKeepsOnlyTheFirst) {
  const std::vector<Pose> poses(50, Pose{Mat3::Identity(), Vec3(1, 2, 3)});
  EXPECT_EQ(select_keyframes(poses, {}), std::vector<std::size_t>{0});
  EXPECT_TRUE(select_keyframes({}, {}).empty());
}

TEST(Keyframes, TranslationSteps) {
  std::vector<Pose> poses;
  for (int i = 0; i < 20; ++i) poses.push_back({Mat3::Identity(), Vec3(0.3 * i, 0, 0)});
  const auto kf = select_keyframes(poses, {1.0, 10.0});
  EXPECT_EQ(kf, (std::vector<std::size_t>{0, 4, 8, 12, 16}));
}

TEST(Keyframes, RotationSteps) {
  std::vector<Pose> poses;
  for (int i = 0; i < 10; ++i) poses.push_back({Eigen::AngleAxisd(0.2 * i, Vec3::UnitY()).toRotationMatrix(), Vec3::Zero()});
  EXPECT_EQ(select_keyframes(poses, {10.0, 0.5}), (std::vector<std::size_t>{0, 3, 6, 9}));
}

TEST(Keyframes, SelectionIsIdempotent) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> N(0, 0.3);
  std::vector<Pose> poses;
  Vec3 t = Vec3::Zero();
  for (int i = 0; i < 200; ++i) {
    t += Vec3(N(rng), N(rng), N(rng));
    poses.push_back({Eigen::AngleAxisd(N(rng), Vec3(N(rng), N(rng), 1).normalized()).toRotationMatrix(), t});
  }
  const KeyframePolicy policy{0.5, 0.4};
  const auto first = select_keyframes(poses, policy);
  std::vector<Pose> kept;
  for (auto i : first) kept.push_back(poses[i]);
  const auto second = select_keyframes(kept, policy);
  ASSERT_EQ(second.size(), kept.size());
  for (std::size_t i = 0; i < second.size(); ++i) EXPECT_EQ(second[i], i);
}

TEST(Keyframes, InvalidPolicy) { EXPECT_THROW_KIND(select_keyframes({}, {0.0, 1.0}), InvalidArgument); }

// --- synthetic renderer ---------------------------------------------------------------------

TEST(Renderer, FrontoParallelPlane) {
  SyntheticScene scene;
  scene.planes.push_back({{0, 0, 2}, Vec3::UnitZ(), 0.0});
  const DepthImage img = render_synthetic_depth(scene, kCam, Pose{});
  EXPECT_EQ(img.valid_count(), 64u * 48u);
  for (double d : img.depth) EXPECT_NEAR(d, 2.0, 1e-12);
}

TEST(Renderer, EmptySceneIsInvalid) {
  EXPECT_EQ(render_synthetic_depth(SyntheticScene{}, kCam, Pose{}).valid_count(), 0u);
}

TEST(Renderer, BoxSilhouetteMatchesProjection) {
  // Box front face at z = 2 seen head-on: the silhouette is the projection of that face.
  SyntheticScene scene;
  scene.boxes.push_back({{-0.3, -0.2, 2.0}, {0.25, 0.15, 2.5}});
  const DepthImage img = render_synthetic_depth(scene, kCam, Pose{});
  const double u0 = kCam.cx + kCam.fx * -0.3 / 2.0, u1 = kCam.cx + kCam.fx * 0.25 / 2.0;
  const double v0 = kCam.cy + kCam.fy * -0.2 / 2.0, v1 = kCam.cy + kCam.fy * 0.15 / 2.0;
  int min_u = 1 << 20, max_u = -1, min_v = 1 << 20, max_v = -1;
  for (int v = 0; v < kCam.height; ++v)
    for (int u = 0; u < kCam.width; ++u)
      if (img.valid(u, v)) {
        min_u = std::min(min_u, u), max_u = std::max(max_u, u);
        min_v = std::min(min_v, v), max_v = std::max(max_v, v);
        EXPECT_NEAR(img.at(u, v), 2.0, 1e-12);
      }
  EXPECT_LE(std::abs(min_u - u0), 1.0);
  EXPECT_LE(std::abs(max_u - u1), 1.0);
  EXPECT_LE(std::abs(min_v - v0), 1.0);
  EXPECT_LE(std::abs(max_v - v1), 1.0);
}

TEST(Renderer, HitPointsLieOnPrimitives) {
  SyntheticScene scene;
  const Box box{{-0.5, -0.4, 2.0}, {0.4, 0.3, 2.6}};
  const Plane plane{{0, 0.5, 0}, Vec3(0, -1, 0), 0.0};
  scene.boxes.push_back(box);
  scene.planes.push_back(plane);
  const Pose pose = look_at({1.5, -0.5, 0.2}, {0, 0, 2.3}, Vec3(0, -1, 0));
  ASSERT_TRUE(pose.is_valid());
  const DepthImage img = render_synthetic_depth(scene, kCam, pose);
  std::size_t on_box = 0, on_plane = 0;
  for (int v = 0; v < kCam.height; ++v) {
    for (int u = 0; u < kCam.width; ++u) {
      if (!img.valid(u, v)) continue;
      const Vec3 p = pose.rotation * (kCam.bearing(u, v) * img.at(u, v)) + pose.translation;
      const double plane_res = std::abs((p - plane.point).dot(plane.normal));
      const Vec3 lo = (box.min - p), hi = (p - box.max);
      const double outside = std::max(lo.maxCoeff(), hi.maxCoeff());
      const double face = std::min((p - box.min).cwiseAbs().minCoeff(), (p - box.max).cwiseAbs().minCoeff());
      const bool box_hit = outside <= 1e-9 && face <= 1e-9;
      EXPECT_TRUE(plane_res <= 1e-9 || box_hit) << u << "," << v;
      on_box += box_hit;
      on_plane += plane_res <= 1e-9;
    }
  }
  EXPECT_GT(on_box, 100u);
  EXPECT_GT(on_plane, 100u);
}

TEST(Renderer, FinitePlaneExtent) {
  SyntheticScene scene;
  scene.planes.push_back({{0, 0, 2}, Vec3::UnitZ(), 0.2});
  const DepthImage img = render_synthetic_depth(scene, kCam, Pose{});
  EXPECT_GT(img.valid_count(), 0u);
  EXPECT_LT(img.valid_count(), 64u * 48u);
  EXPECT_FALSE(img.valid(0, 0));
  EXPECT_TRUE(img.valid(31, 23));
}

TEST(Scene, JsonParsing) {
  const auto j = nlohmann::json::parse(R"({
    "boxes": [{"min": [0, 0, 0], "max": [1, 1, 1]}],
    "planes": [{"point": [0, 0, 0], "normal": [0, 0, 2], "extent": 3}],
    "cameras": [{"position": [0, 0, -2], "look_at": [0, 0, 0], "up": [0, -1, 0]},
                {"position": [1, 2, 3], "quaternion": [0, 0, 0, 1]}]})");
  const SyntheticScene s = scene_from_json(j);
  ASSERT_EQ(s.cameras.size(), 2u);
  EXPECT_EQ(s.planes[0].normal, Vec3::UnitZ());
  EXPECT_TRUE(s.cameras[0].rotation.col(2).isApprox(Vec3::UnitZ()));
  EXPECT_TRUE(s.cameras[1].rotation.isApprox(Mat3::Identity()));
  EXPECT_THROW_KIND(scene_from_json(nlohmann::json::parse(R"({"boxes":[{"min":[0,0,0],"max":[1,0,1]}]})")), ParseError);
  EXPECT_THROW_KIND(scene_from_json(nlohmann::json::parse(R"({"planes":[{"point":[0,0,0]}]})")), ParseError);
}

TEST(Scene, SampleSceneLoads) {
  const SyntheticScene s = scene_from_json(read_json_file((test::source_dir() / "samples/box_scene/scene.json").string()));
  EXPECT_FALSE(s.cameras.empty());
  for (const Pose& p : s.cameras) EXPECT_TRUE(p.is_valid());
}
