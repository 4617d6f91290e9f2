#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nova/image_io.hpp"
#include "nova/metrics.hpp"
#include "nova/scenes.hpp"

using namespace nova;
namespace fs = std::filesystem;
using T = Tensor<double>;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("nova_test_scenes_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Camera ortho(double az, int res) {
  Camera c;
  c.azimuth = az;
  c.resolution = res;
  return c;
}

double variance(const std::vector<double>& rgb, const std::vector<double>& mask) {
  double s = 0, s2 = 0, n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] > 0.5)
      for (int c = 0; c < 3; ++c) s += rgb[3 * i + c], s2 += rgb[3 * i + c] * rgb[3 * i + c], n += 1;
  return s2 / n - (s / n) * (s / n);
}

}  // namespace

TEST(Sdf, SphereClosedForms) {
  auto s = FigurineScene::single_sphere({0.1, 0.2, 0.3}, 0.5);
  auto d = sdf_eval(s, T::from({2, 3}, {0.1, 0.2, 0.3, 0.1, 2.2, 0.3}));
  EXPECT_NEAR(d[0], -0.5, 1e-15);
  EXPECT_NEAR(d[1], 1.5, 1e-15);
  auto fig = FigurineScene::procedural(kFixedSceneSeed);
  const auto& h = fig.head();
  EXPECT_NEAR(sdf_eval(fig, T::from({1, 3}, {h.a.x, h.a.y, h.a.z}))[0], -h.radius, 1e-12);
  EXPECT_THROW(sdf_eval(fig, T::zeros({2, 2})), DimensionError);
}

TEST(Sdf, EikonalAwayFromMedialSurfaces) {
  auto fig = FigurineScene::procedural(kFixedSceneSeed);
  Rng rng(1);
  int checked = 0;
  for (int k = 0; k < 2000 && checked < 300; ++k) {
    const Vec3 p{rng.uniform(-1, 1), rng.uniform(-1.1, 1.1), rng.uniform(-1, 1)};
    // skip points where two primitives are nearly equidistant
    std::vector<double> ds;
    for (const auto& pr : fig.primitives) ds.push_back(pr.sdf(p));
    std::sort(ds.begin(), ds.end());
    if (ds[1] - ds[0] < 0.01) continue;
    const double e = 1e-6;
    const Vec3 g{(fig.sdf(p + Vec3{e, 0, 0}) - fig.sdf(p - Vec3{e, 0, 0})) / (2 * e),
                 (fig.sdf(p + Vec3{0, e, 0}) - fig.sdf(p - Vec3{0, e, 0})) / (2 * e),
                 (fig.sdf(p + Vec3{0, 0, e}) - fig.sdf(p - Vec3{0, 0, e})) / (2 * e)};
    EXPECT_NEAR(norm(g), 1.0, 1e-3);
    ++checked;
  }
  EXPECT_GE(checked, 300);
}

TEST(Figurine, FitsTheFrameAndIsDeterministic) {
  auto a = FigurineScene::procedural(3), b = FigurineScene::procedural(3), c = FigurineScene::procedural(4);
  ASSERT_EQ(a.primitives.size(), 6u);
  for (std::size_t i = 0; i < a.primitives.size(); ++i) {
    EXPECT_EQ(a.primitives[i].radius, b.primitives[i].radius);
    const auto& p = a.primitives[i];
    for (const Vec3 q : {p.a, p.kind == Primitive::capsule ? p.b : p.a}) {
      EXPECT_LE(std::abs(q.x) + p.radius, 1.2);
      EXPECT_LE(std::abs(q.y) + p.radius, 1.2);
    }
  }
  EXPECT_NE(a.head().radius, c.head().radius);
}

TEST(Oracle, MissAndHeadOnDepth) {
  auto s = FigurineScene::single_sphere({0, 0, 0}, 1.0);
  Camera c = ortho(0, 9);
  auto img = oracle_render(s, c);
  // centre pixel hits head-on; corner pixel misses
  EXPECT_NEAR(img.depth[4 * 9 + 4], c.distance - 1.0, 1e-4);
  EXPECT_EQ(img.mask[4 * 9 + 4], 1.0);
  EXPECT_EQ(img.mask[0], 0.0);
  EXPECT_EQ(img.depth[0], 0.0);
  for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(img.rgb[ch], 1.0);
}

TEST(Oracle, FrontCarriesMoreDetailThanBack) {
  auto fig = FigurineScene::procedural(kFixedSceneSeed);
  auto front = oracle_render(fig, ortho(0, 64)), back = oracle_render(fig, ortho(180, 64));
  EXPECT_GT(variance(front.rgb, front.mask), variance(back.rgb, back.mask));
}

TEST(Oracle, FrontAndBackSilhouettesMirror) {
  for (std::uint64_t seed : {kFixedSceneSeed, std::uint64_t(11)}) {
    auto fig = FigurineScene::procedural(seed);
    auto front = oracle_render(fig, ortho(0, 64)), back = oracle_render(fig, ortho(180, 64));
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) ASSERT_EQ(front.mask[y * 64 + x], back.mask[y * 64 + 63 - x]) << x << "," << y;
  }
}

TEST(Oracle, DepthPositiveExactlyWhereMasked) {
  auto fig = FigurineScene::procedural(kFixedSceneSeed);
  for (double az : {0.0, 90.0, 180.0, 270.0}) {
    auto img = oracle_render(fig, ortho(az, 32));
    for (std::size_t i = 0; i < img.mask.size(); ++i) EXPECT_EQ(img.depth[i] > 0, img.mask[i] == 1.0);
  }
}

TEST(Oracle, GhostStatisticNearZeroForTheTrueBack) {
  auto fig = FigurineScene::procedural(kFixedSceneSeed);
  auto front = oracle_render(fig, ortho(0, 64)), back = oracle_render(fig, ortho(180, 64));
  const auto face = face_region(fig, ortho(0, 64));
  EXPECT_GT(std::count(face.begin(), face.end(), 1), 30);
  EXPECT_LT(ghost_face_correlation(back.rgb, front.rgb, face, 64), 0.1);
  // a back view that shows the mirrored front face is maximally ghosted
  std::vector<double> mirrored(front.rgb.size());
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      for (int c = 0; c < 3; ++c) mirrored[(y * 64 + x) * 3 + c] = front.rgb[(y * 64 + 63 - x) * 3 + c];
  EXPECT_NEAR(ghost_face_correlation(mirrored, front.rgb, face, 64), 1.0, 1e-12);
}

TEST(ImageIo, PngRoundTripIsExactAfterQuantization) {
  const auto dir = scratch("png");
  fs::create_directories(dir);
  std::vector<double> v(4 * 3 * 3);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = quantized8(double(i) / double(v.size()));
  write_png(dir / "a.png", {4, 3, v});
  const auto r = read_png(dir / "a.png");
  EXPECT_EQ(r.width, 4);
  EXPECT_EQ(r.height, 3);
  EXPECT_EQ(r.data, v);
  EXPECT_THROW(read_png(dir / "missing.png"), FileError);
}

TEST(ImageIo, PfmRoundTripIsLossless) {
  const auto dir = scratch("pfm");
  fs::create_directories(dir);
  std::vector<double> v{0.0, 1.0, 2.5, -3.0, 0.125, 7.0};
  write_pfm(dir / "a.pfm", {3, 2, v});
  const auto r = read_pfm(dir / "a.pfm");
  EXPECT_EQ(r.width, 3);
  EXPECT_EQ(r.height, 2);
  EXPECT_EQ(r.data, v);
  const auto bytes = slurp(dir / "a.pfm");
  EXPECT_EQ(bytes.substr(0, 3), "Pf\n");
}

TEST(Dataset, OrthoOnly) {
  const auto dir = scratch("ortho");
  auto ds = write_dataset(FigurineScene::procedural(kFixedSceneSeed), 7, false, dir, 32);
  ASSERT_EQ(ds.views.size(), 4u);
  const double az[4] = {0, 90, 180, 270};
  for (int i = 0; i < 4; ++i) EXPECT_EQ(ds.views[i].camera.azimuth, az[i]);
  auto back = read_dataset(dir);
  ASSERT_EQ(back.views.size(), 4u);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(back.views[i].camera.azimuth, az[i]);
    EXPECT_EQ(back.views[i].images.rgb, ds.views[i].images.rgb);
    EXPECT_EQ(back.views[i].images.mask, ds.views[i].images.mask);
    EXPECT_EQ(back.views[i].images.depth, ds.views[i].images.depth);
  }
  EXPECT_NE(back.ortho(180.0), nullptr);
  EXPECT_EQ(back.ortho(45.0), nullptr);
}

TEST(Dataset, WithRandomViews) {
  const auto dir = scratch("random");
  auto ds = write_dataset(FigurineScene::procedural(kFixedSceneSeed), 7, true, dir, 16);
  ASSERT_EQ(ds.views.size(), 20u);
  std::ifstream man(dir / "manifest.txt");
  std::string line;
  int perspective = 0;
  while (std::getline(man, line))
    if (line.find("kind perspective") != std::string::npos) {
      ++perspective;
      EXPECT_NE(line.find(" fov 30 "), std::string::npos) << line;
      EXPECT_NE(line.find(" distance 3.5 "), std::string::npos) << line;
    }
  EXPECT_EQ(perspective, 16);
  EXPECT_EQ(read_dataset(dir).views.size(), 20u);
}

TEST(Dataset, RerunIsBitIdentical) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  write_dataset(FigurineScene::procedural(kFixedSceneSeed), 7, true, a, 16);
  write_dataset(FigurineScene::procedural(kFixedSceneSeed), 7, true, b, 16);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path();
    ++files;
  }
  EXPECT_EQ(files, 1u + 20u * 3u);
}

TEST(Dataset, BrokenManifestsAreFileErrors) {
  const auto dir = scratch("broken");
  EXPECT_THROW(read_dataset(dir), FileError);
  write_dataset(FigurineScene::procedural(kFixedSceneSeed), 7, false, dir, 16);
  auto text = slurp(dir / "manifest.txt");
  std::ofstream(dir / "manifest.txt") << text << "bogus 1\n";
  EXPECT_THROW(read_dataset(dir), FileError);
  std::ofstream(dir / "manifest.txt") << "not-a-dataset\n";
  EXPECT_THROW(read_dataset(dir), FileError);
}
