#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mrfmap/map_eval.hpp"
#include "support.hpp"

using namespace mrfmap;

namespace {

std::vector<DensityRegion> random_regions(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> L(0.005, 0.1), P(0, 1), Z(0, 1);
  std::vector<DensityRegion> r;
  double s = 0.2 * Z(rng);
  for (int i = 0; i < n; ++i) {
    const double len = L(rng);
    const double p = Z(rng) < 0.5 ? 0.0 : P(rng);
    r.push_back({s, s + len, -std::log1p(-p) / 0.05});
    s += len;
  }
  return r;
}

// Dense sampling of omega(s) = alpha(s) vis(s) with its own running optical depth.
struct Dense {
  double argmax_s;
  double integral;
};

Dense dense_omega(const std::vector<DensityRegion>& regions, double h) {
  double tau = 0.0, best = -1.0, best_s = 0.0, integral = 0.0;
  for (const auto& r : regions) {
    const int n = std::max(2, 2 * static_cast<int>(std::ceil((r.s_exit - r.s_entry) / h / 2)));
    const double dh = (r.s_exit - r.s_entry) / n;
    double simpson = 0.0;
    for (int k = 0; k <= n; ++k) {
      const double w = r.alpha * std::exp(-(tau + r.alpha * k * dh));
      simpson += w * (k == 0 || k == n ? 1 : (k % 2 ? 4 : 2));
      if (k < n && w > best) {
        best = w;
        best_s = r.s_entry + k * dh;
      }
    }
    integral += simpson * dh / 3.0;
    tau += r.alpha * (r.s_exit - r.s_entry);
  }
  return {best_s, integral};
}

GridConfig grid() {
  GridConfig g;
  g.origin = Vec3::Zero();
  g.voxel_side = 0.05;
  g.brick_size = 8;
  g.dims = Vec3i::Constant(48);
  return g;
}

// Every brick allocated; voxels with z index `plane` are (nearly) opaque when plane >= 0.
ProbabilityMap plane_map(int plane, double p_plane = 1.0) {
  SparseTopology topo(grid());
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) topo.allocate({x, y, z});
  ProbabilityMap m(topo, MapKind::Mrf, 0.1);
  std::fill(m.values().begin(), m.values().end(), 0.0f);
  if (plane >= 0)
    for (std::size_t b = 0; b < topo.brick_count(); ++b)
      for (int s = 0; s < 512; ++s)
        if (topo.voxel_of(static_cast<std::int32_t>(b), s).z() == plane) m.values()[b * 512 + s] = static_cast<float>(p_plane);
  return m;
}

const CameraIntrinsics kCam{20.0, 20.0, 9.5, 7.5, 20, 16, 1000.0};
const Pose kPose{Mat3::Identity(), Vec3(1.2, 1.2, 0.0)};

EvalConfig eval_config(double sigma = 0.01) {
  EvalConfig c;
  c.sigma_model = SensorNoiseModel::constant(sigma);
  c.threads = 2;
  return c;
}

}  // namespace

TEST(OcclusionDensity, Examples) {
  EXPECT_EQ(occlusion_density(0.0, 0.05), 0.0);
  EXPECT_NEAR(occlusion_density(0.5, 0.05), 13.862943611198906, 1e-12);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> P(0, 0.999999);
  for (int i = 0; i < 1000; ++i) {
    const double p = P(rng);
    EXPECT_NEAR(std::exp(-occlusion_density(p, 0.05) * 0.05), 1 - p, 1e-12);
  }
  EXPECT_TRUE(std::isfinite(occlusion_density(1.0, 0.05)));
}

TEST(VisProfile, SingleRegion) {
  const VisProfile p = vis_profile({{0.0, 2.0, 0.5}});
  EXPECT_NEAR(p.vis_inf, std::exp(-1.0), 1e-15);
  EXPECT_NEAR(p.omega[0], 1 - std::exp(-1.0), 1e-15);
  EXPECT_NEAR(p.visibility(1.0), std::exp(-0.5), 1e-15);
  EXPECT_EQ(p.s_star, 0.0);
  EXPECT_EQ(p.s_inf, 2.0);
}

TEST(VisProfile, TransparentMap) {
  const std::vector<double> marg(5, 0.0);
  RayTraversal t;
  for (int i = 0; i < 5; ++i) t.steps.push_back({Vec3i(i, 0, 0), 0.05 * i, 0.05 * (i + 1), false});
  const VisProfile p = vis_profile(marg, t, 0.05);
  EXPECT_EQ(p.vis_inf, 1.0);
  EXPECT_EQ(p.peak, VisProfile::npos);
  EXPECT_TRUE(std::isnan(p.s_star));
  for (double w : p.omega) EXPECT_EQ(w, 0.0);
}

TEST(VisProfile, ObscuredDenseRegionLosesToLightFrontRegion) {
  // The second region holds more occupancy probability, but little visibility is left to reach it.
  const std::vector<DensityRegion> r{{0.5, 1.0, 5.0}, {1.0, 1.05, 30.0}};
  const VisProfile p = vis_profile(r);
  EXPECT_EQ(p.peak, 0u);
  EXPECT_GT(5.0, 30.0 * p.vis[1]);
  const Dense d = dense_omega(r, 1e-4);
  EXPECT_NEAR(p.s_star, d.argmax_s, 1e-4);
  EXPECT_EQ(p.s_star, 0.5);
  EXPECT_GT(1 - std::exp(-30.0 * 0.05), 1 - std::exp(-5.0 * 0.05));
}

TEST(VisProfile, ArgmaxMatchesQuadratureOnRandomProfiles) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 300; ++t) {
    const auto r = random_regions(rng, 12);
    const VisProfile p = vis_profile(r);
    if (p.peak == VisProfile::npos) continue;
    const Dense d = dense_omega(r, 1e-4);
    EXPECT_NEAR(p.s_star, d.argmax_s, 1e-9);
    EXPECT_NEAR(d.integral, 1 - p.vis_inf, 1e-6);
  }
}

TEST(VisProfile, Conservation) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 1000; ++t) {
    const VisProfile p = vis_profile(random_regions(rng, 30));
    double sum = p.vis_inf;
    for (double w : p.omega) {
      ASSERT_GE(w, 0.0);
      sum += w;
    }
    ASSERT_NEAR(sum, 1.0, 1e-9);
    for (std::size_t i = 1; i < p.vis.size(); ++i) ASSERT_LE(p.vis[i], p.vis[i - 1]);
  }
}

TEST(VisProfile, SplittingStepsChangesNothing) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 300; ++t) {
    const auto r = random_regions(rng, 15);
    std::vector<DensityRegion> fine;
    for (const auto& x : r) {
      const double m = 0.5 * (x.s_entry + x.s_exit);
      fine.push_back({x.s_entry, m, x.alpha});
      fine.push_back({m, x.s_exit, x.alpha});
    }
    const VisProfile a = vis_profile(r), b = vis_profile(fine);
    EXPECT_NEAR(a.vis_inf, b.vis_inf, 1e-12);
    if (a.peak != VisProfile::npos) EXPECT_NEAR(a.s_star, b.s_star, 1e-9);
    for (double s = 0; s < 1.5; s += 0.01) EXPECT_NEAR(a.visibility(s), b.visibility(s), 1e-12);
  }
}

TEST(VisProfile, RaisingOccupancyNeverRaisesLaterVisibility) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> I(0, 9);
  std::uniform_real_distribution<double> A(0, 20);
  for (int t = 0; t < 300; ++t) {
    auto r = random_regions(rng, 10);
    const VisProfile before = vis_profile(r);
    r[I(rng)].alpha += A(rng);
    const VisProfile after = vis_profile(r);
    for (std::size_t i = 0; i < before.vis.size(); ++i) EXPECT_LE(after.vis[i], before.vis[i]);
  }
}

TEST(VisProfile, Errors) {
  EXPECT_THROW_KIND(vis_profile(std::vector<DensityRegion>{}), EmptyTraversal);
  EXPECT_THROW_KIND(vis_profile({{0, 1, -1.0}}), InvalidArgument);
  RayTraversal t;
  t.steps.push_back({});
  EXPECT_THROW_KIND(vis_profile(std::vector<double>{0.1, 0.2}, t, 0.05), DimensionMismatch);
}

TEST(ClassifyRay, Examples) {
  EvalConfig c;
  VisProfile p = vis_profile({{2.98, 3.03, 1000.0}});
  EXPECT_EQ(classify_ray(p, 3.00, 0.03, c), RayClass::Accurate);
  p = vis_profile({{0.0, 3.0, 0.0}});
  EXPECT_EQ(classify_ray(p, 4.0, 0.03, c), RayClass::BeyondMap);
  EXPECT_TRUE(counts_accurate(RayClass::BeyondMap));
  EXPECT_EQ(classify_ray(p, 2.0, 0.03, c), RayClass::Inaccurate);
  p = vis_profile({{1.0, 1.05, 1000.0}});
  EXPECT_EQ(classify_ray(p, 2.0, 0.05, c), RayClass::Inaccurate);
  c.band = BandMode::VoxelBounds;
  EXPECT_EQ(classify_ray(p, 1.04, 0.0, c), RayClass::Accurate);
  EXPECT_EQ(classify_ray(p, 1.06, 1.0, c), RayClass::Inaccurate);
}

TEST(EvaluateImage, PerfectMapScoresOne) {
  // Plane z = 1.0 sits on the entry face of voxel layer 20.
  const ProbabilityMap m = plane_map(20);
  const ImageEvaluation e = evaluate_image(m, kCam, kPose, DepthImage(20, 16, 1.0), eval_config(), 3);
  EXPECT_EQ(e.score.valid, 320u);
  EXPECT_EQ(e.score.image_id, 3);
  EXPECT_DOUBLE_EQ(e.score.score(), 1.0);
}

TEST(EvaluateImage, TransparentMapScoresZeroInsideVolume) {
  const ProbabilityMap m = plane_map(-1);
  EXPECT_DOUBLE_EQ(evaluate_image(m, kCam, kPose, DepthImage(20, 16, 1.0), eval_config()).score.score(), 0.0);
  // Measurements beyond the volume are explained by a transparent map.
  EXPECT_DOUBLE_EQ(evaluate_image(m, kCam, kPose, DepthImage(20, 16, 5.0), eval_config()).score.score(), 1.0);
}

TEST(EvaluateImage, UnallocatedPolicy) {
  const ProbabilityMap empty(SparseTopology(grid()), MapKind::LogOdds, 0.5);
  EvalConfig c = eval_config();
  const DepthImage d(20, 16, 2.0);
  c.unallocated = UnallocatedPolicy::Transparent;
  const auto t = evaluate_image(empty, kCam, kPose, d, c);
  c.unallocated = UnallocatedPolicy::MapDefault;
  const auto md = evaluate_image(empty, kCam, kPose, d, c);
  EXPECT_EQ(t.classes[0], RayClass::Inaccurate);
  EXPECT_TRUE(std::isnan(t.s_star[0]));
  // An unobserved 0.5 everywhere puts the generating-surface peak right at the grid entry.
  EXPECT_NEAR(md.s_star[static_cast<std::size_t>(7) * 20 + 9], 0.0, 1e-12);
}

TEST(EvaluateImage, InvalidPixelsAndSizeMismatch) {
  DepthImage d(20, 16, 1.0);
  d.at(0, 0) = 0.0;
  const auto e = evaluate_image(plane_map(20), kCam, kPose, d, eval_config());
  EXPECT_EQ(e.score.valid, 319u);
  EXPECT_EQ(e.classes[0], RayClass::Invalid);
  EXPECT_THROW_KIND(evaluate_image(plane_map(20), kCam, kPose, DepthImage(3, 3), eval_config()), DimensionMismatch);
}

TEST(Summary, MeanStdAndSkipped) {
  const AccuracySummary s = summarize({{0, 10, 5}, {1, 0, 0}, {2, 4, 4}});
  EXPECT_EQ(s.images.size(), 2u);
  ASSERT_EQ(s.skipped.size(), 1u);
  EXPECT_EQ(s.skipped[0], 1);
  EXPECT_DOUBLE_EQ(s.mean, 0.75);
  EXPECT_DOUBLE_EQ(s.stddev, 0.25);
  EXPECT_THROW_KIND(summarize({{0, 0, 0}}), InsufficientData);
}

TEST(Summary, AccuracyScoreOverFramesAndOutputs) {
  const ProbabilityMap m = plane_map(20);
  std::vector<EvalFrame> frames;
  frames.push_back({0, kPose, DepthImage(20, 16, 1.0)});
  frames.push_back({1, kPose, DepthImage(20, 16, 0.5)});
  frames.push_back({2, kPose, DepthImage(20, 16, 0.0)});
  const AccuracySummary s = accuracy_score(m, kCam, frames, eval_config());
  EXPECT_DOUBLE_EQ(s.mean, 0.5);
  EXPECT_EQ(s.skipped, std::vector<int>{2});
  const auto dir = test::scratch_dir("eval_out");
  write_scores_csv((dir / "scores.csv").string(), s);
  EXPECT_EQ(test::read_bytes(dir / "scores.csv"), "image_id,valid,accurate,score\n0,320,320,1\n1,320,0,0\n2,0,0,\n");
  EXPECT_EQ(to_json(s)["images"], 2);
  const auto e = evaluate_image(m, kCam, kPose, frames[0].depth, eval_config());
  write_classification_png((dir / "c.png").string(), e, 20, 16);
  EXPECT_GT(std::filesystem::file_size(dir / "c.png"), 0u);
}
