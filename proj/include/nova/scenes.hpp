#pragma once

// Procedural SDF figurines, a sphere-tracing reference renderer, and the
// on-disk dataset (manifest + PNG/PFM images).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nova/diffcore.hpp"
#include "nova/geometry.hpp"
#include "nova/image_io.hpp"
#include "nova/parallel.hpp"
#include "nova/render.hpp"
#include "nova/rng.hpp"

namespace nova {

enum class BodyPart { head, torso, limb };

struct Primitive {
  enum Kind { sphere, capsule } kind = sphere;
  BodyPart part = BodyPart::head;
  Vec3 a, b;  // sphere: center a; capsule: segment a-b
  double radius = 0;

  double sdf(Vec3 p) const { return norm(p - closest(p)) - radius; }

  Vec3 closest(Vec3 p) const {
    if (kind == sphere) return a;
    const Vec3 ab = b - a;
    const double h = std::clamp(dot(p - a, ab) / dot(ab, ab), 0.0, 1.0);
    return a + h * ab;
  }

  Vec3 normal(Vec3 p) const { return normalized(p - closest(p)); }
};

inline constexpr std::uint64_t kFixedSceneSeed = 7;
inline constexpr double kAmbient = 0.3;

/// Sphere head, capsule torso, four capsule limbs, mirror-symmetric in x and
/// centered on the z = 0 plane. Surfaces whose normal has z > 0 carry a
/// high-frequency albedo (checker, eyes, mouth, stripes); the others are
/// plain.
struct FigurineScene {
  std::uint64_t seed = kFixedSceneSeed;
  std::vector<Primitive> primitives;
  Vec3 light = normalized(Vec3{0.3, 0.5, 0.8});
  double ambient = kAmbient;
  std::array<double, 3> background = kWhite;

  static FigurineScene procedural(std::uint64_t seed) {
    Rng rng(derive_seed(seed, {0x666967ULL}));
    auto jitter = [&](double v, double rel) { return v * (1.0 + rel * rng.uniform(-1.0, 1.0)); };
    FigurineScene s;
    s.seed = seed;
    const double head_r = jitter(0.27, 0.08);
    const double neck = jitter(0.36, 0.05);
    const double torso_r = jitter(0.21, 0.08);
    const double arm_r = jitter(0.07, 0.1), leg_r = jitter(0.085, 0.1);
    const double shoulder = jitter(0.2, 0.08), hand_x = jitter(0.46, 0.08), hand_y = jitter(-0.2, 0.2);
    const double hip = jitter(0.1, 0.1), foot_x = jitter(0.12, 0.1);
    const double head_y = neck + torso_r * 0.6 + head_r;
    s.primitives.push_back({Primitive::sphere, BodyPart::head, {0, head_y, 0}, {}, head_r});
    s.primitives.push_back({Primitive::capsule, BodyPart::torso, {0, -0.1, 0}, {0, neck, 0}, torso_r});
    for (double sx : {-1.0, 1.0}) {
      s.primitives.push_back(
          {Primitive::capsule, BodyPart::limb, {sx * shoulder, neck - 0.02, 0}, {sx * hand_x, hand_y, 0}, arm_r});
    }
    for (double sx : {-1.0, 1.0}) {
      s.primitives.push_back(
          {Primitive::capsule, BodyPart::limb, {sx * hip, -0.2, 0}, {sx * foot_x, -0.95 + leg_r, 0}, leg_r});
    }
    return s;
  }

  static FigurineScene single_sphere(Vec3 center, double radius) {
    FigurineScene s;
    s.seed = 0;
    s.primitives.push_back({Primitive::sphere, BodyPart::head, center, {}, radius});
    return s;
  }

  const Primitive& head() const { return primitives.front(); }

  /// Index of the primitive with the smallest signed distance.
  std::size_t nearest(Vec3 p) const {
    std::size_t best = 0;
    double d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < primitives.size(); ++i) {
      const double di = primitives[i].sdf(p);
      if (di < d) d = di, best = i;
    }
    return best;
  }

  double sdf(Vec3 p) const {
    double d = std::numeric_limits<double>::infinity();
    for (const auto& pr : primitives) d = std::min(d, pr.sdf(p));
    return d;
  }

  std::array<double, 3> albedo(const Primitive& pr, Vec3 p, Vec3 n) const {
    auto parity = [](double u, double v, double cell) {
      return (static_cast<long>(std::floor(u / cell)) + static_cast<long>(std::floor(v / cell))) & 1;
    };
    const bool front = n.z > 0;
    switch (pr.part) {
      case BodyPart::head: {
        if (!front) return {0.32, 0.22, 0.13};
        const double cy = pr.a.y, r = pr.radius;
        const double ex = std::abs(p.x - pr.a.x) - 0.38 * r, ey = p.y - (cy + 0.15 * r);
        if (ex * ex + ey * ey < (0.18 * r) * (0.18 * r)) return {0.08, 0.08, 0.28};
        if (std::abs(p.x - pr.a.x) < 0.32 * r && std::abs(p.y - (cy - 0.4 * r)) < 0.08 * r) return {0.75, 0.1, 0.15};
        return parity(p.x, p.y, 0.08) ? std::array<double, 3>{0.97, 0.82, 0.70} : std::array<double, 3>{0.72, 0.47, 0.40};
      }
      case BodyPart::torso:
        if (!front) return {0.22, 0.32, 0.66};
        return parity(p.x, p.y, 0.1) ? std::array<double, 3>{0.93, 0.93, 0.95} : std::array<double, 3>{0.15, 0.25, 0.70};
      case BodyPart::limb:
        if (!front) return {0.76, 0.56, 0.22};
        return (static_cast<long>(std::floor(p.y / 0.08)) & 1) ? std::array<double, 3>{0.96, 0.80, 0.26}
                                                               : std::array<double, 3>{0.55, 0.28, 0.10};
    }
    return {0, 0, 0};
  }
};

/// Signed distance of each row of p [N x 3], returned as [N].
inline Tensor<double> sdf_eval(const FigurineScene& scene, const Tensor<double>& p) {
  if (p.rank() != 2 || p.dim(1) != 3) throw DimensionError("sdf_eval: expected N x 3, got " + shape_str(p.shape()));
  std::vector<double> d(p.dim(0));
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = scene.sdf({p[3 * i], p[3 * i + 1], p[3 * i + 2]});
  const std::size_t n = d.size();
  return Tensor<double>::from({n}, std::move(d));
}

struct SurfaceHit {
  bool hit = false;
  double t = 0;
  Vec3 point;
  std::size_t primitive = 0;
};

inline SurfaceHit sphere_trace(const FigurineScene& scene, Vec3 origin, Vec3 dir, double t0, double t1) {
  double t = t0;
  for (int it = 0; it < 1024 && t <= t1; ++it) {
    const Vec3 p = origin + t * dir;
    const double d = scene.sdf(p);
    if (d < 1e-9) return {true, t, p, scene.nearest(p)};
    t += d;
  }
  return {};
}

/// Reference render: sphere tracing in [near, far], Lambertian shading
/// albedo * (ambient + (1 - ambient) * max(0, n.l)), white background.
inline ImageSet oracle_render(const FigurineScene& scene, const Camera& cam) {
  cam.validate();
  const std::size_t res = static_cast<std::size_t>(cam.resolution), n = res * res;
  ImageSet img;
  img.resolution = cam.resolution;
  img.rgb.assign(n * 3, 0.0);
  img.mask.assign(n, 0.0);
  img.depth.assign(n, 0.0);
  parallel_for(n, 64, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const int row = static_cast<int>(i / res), col = static_cast<int>(i % res);
      const auto [o, d] = cam.ray_at(cam.ndc_x(col), cam.ndc_y(row));
      const auto h = sphere_trace(scene, o, d, cam.near(), cam.far());
      if (!h.hit) {
        for (int c = 0; c < 3; ++c) img.rgb[3 * i + c] = scene.background[c];
        continue;
      }
      const auto& pr = scene.primitives[h.primitive];
      const Vec3 nrm = pr.normal(h.point);
      const auto alb = scene.albedo(pr, h.point, nrm);
      const double shade = scene.ambient + (1.0 - scene.ambient) * std::max(0.0, dot(nrm, scene.light));
      for (int c = 0; c < 3; ++c) img.rgb[3 * i + c] = std::min(1.0, alb[c] * shade);
      img.mask[i] = 1.0;
      img.depth[i] = h.t;
    }
  });
  return img;
}

inline constexpr int kFaceErosion = 2;

/// Pixels of an orthographic view at azimuth 0 whose visible surface is the
/// front half of the head, eroded by kFaceErosion.

inline std::vector<std::uint8_t> face_region(const FigurineScene& scene, const Camera& front_cam) {
  const std::size_t res = static_cast<std::size_t>(front_cam.resolution);
  std::vector<std::uint8_t> m(res * res, 0);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto [o, d] = front_cam.ray_at(front_cam.ndc_x(int(i % res)), front_cam.ndc_y(int(i / res)));
    const auto h = sphere_trace(scene, o, d, front_cam.near(), front_cam.far());
    if (h.hit && h.primitive == 0 && scene.primitives[0].part == BodyPart::head &&
        scene.primitives[0].normal(h.point).z > 0) {
      m[i] = 1;
    }
  }
  // drop pixels within the high-pass support of the silhouette
  std::vector<std::uint8_t> e(m.size(), 0);
  const int r = int(res), k = kFaceErosion;
  for (int y = k; y < r - k; ++y)
    for (int x = k; x < r - k; ++x) {
      bool inside = true;
      for (int dy = -k; dy <= k && inside; ++dy)
        for (int dx = -k; dx <= k && inside; ++dx) inside = m[(y + dy) * r + x + dx] != 0;
      e[y * r + x] = inside;
    }
  return e;
}

// ---------------------------------------------------------------------------
// Dataset on disk.

struct DatasetView {
  int index = 0;
  Camera camera;
  ImageSet images;  // rgb quantized to 8 bits, mask/depth to float32
  std::string rgb_file, mask_file, depth_file;
};

struct SceneDataset {
  std::filesystem::path manifest;
  std::uint64_t scene_seed = 0;
  std::uint64_t protocol_seed = 0;
  int resolution = kDefaultResolution;
  Vec3 light;
  double ambient = kAmbient;
  std::array<double, 3> background = kWhite;
  std::vector<DatasetView> views;

  /// The orthographic view at the given azimuth, or nullptr.
  const DatasetView* ortho(double azimuth) const {
    for (const auto& v : views)
      if (v.camera.kind == Projection::orthographic && v.camera.azimuth == azimuth) return &v;
    return nullptr;
  }
};

inline constexpr const char* kDatasetManifest = "manifest.txt";

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string camera_record(const Camera& c) {
  std::ostringstream os;
  if (c.kind == Projection::orthographic) {
    os << "kind orthographic azimuth " << fmt_double(c.azimuth) << " elevation " << fmt_double(c.elevation)
       << " distance " << fmt_double(c.distance) << " halfwidth " << fmt_double(c.ortho_halfwidth);
  } else {
    os << "kind perspective azimuth " << fmt_double(c.azimuth) << " elevation " << fmt_double(c.elevation)
       << " distance " << fmt_double(c.distance) << " fov " << fmt_double(c.fov);
  }
  os << " resolution " << c.resolution;
  return os.str();
}

inline ImageSet quantize_for_disk(ImageSet s) {
  for (auto& v : s.rgb) v = quantized8(v);
  for (auto& v : s.mask) v = static_cast<float>(v);
  for (auto& v : s.depth) v = static_cast<float>(v);
  return s;
}

}  // namespace detail

/// Writes an ImageSet as <stem>.png, <stem>_mask.pfm, <stem>_depth.pfm.
inline void write_image_set(const std::filesystem::path& dir, const std::string& stem, const ImageSet& s) {
  const int r = s.resolution;
  write_png(dir / (stem + ".png"), {r, r, s.rgb});
  write_pfm(dir / (stem + "_mask.pfm"), {r, r, s.mask});
  write_pfm(dir / (stem + "_depth.pfm"), {r, r, s.depth});
}

/// Renders the four orthographic views (plus the 16 random perspective views
/// when include_random) and writes images and manifest.txt into out_dir.
inline SceneDataset write_dataset(const FigurineScene& scene, std::uint64_t seed, bool include_random,
                                  const std::filesystem::path& out_dir, int resolution = kDefaultResolution) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw FileError(out_dir.string(), "cannot create directory: " + ec.message());
  SceneDataset ds;
  ds.manifest = out_dir / kDatasetManifest;
  ds.scene_seed = scene.seed;
  ds.protocol_seed = seed;
  ds.resolution = resolution;
  ds.light = scene.light;
  ds.ambient = scene.ambient;
  ds.background = scene.background;
  auto cams = camera_from_protocol(seed, ProtocolMode::ortho4, resolution);
  if (include_random) {
    auto rnd = camera_from_protocol(seed, ProtocolMode::random16, resolution);
    cams.insert(cams.end(), rnd.begin(), rnd.end());
  }
  for (std::size_t k = 0; k < cams.size(); ++k) {
    DatasetView v;
    v.index = static_cast<int>(k);
    v.camera = cams[k];
    v.images = detail::quantize_for_disk(oracle_render(scene, cams[k]));
    const std::string stem = "view_" + std::to_string(k);
    v.rgb_file = stem + ".png";
    v.mask_file = stem + "_mask.pfm";
    v.depth_file = stem + "_depth.pfm";
    write_image_set(out_dir, stem, v.images);
    ds.views.push_back(std::move(v));
  }
  std::ofstream man(ds.manifest);
  if (!man) throw FileError(ds.manifest.string(), "cannot open for writing");
  man << "nova-dataset 1\n";
  man << "scene_seed " << ds.scene_seed << "\n";
  man << "protocol_seed " << ds.protocol_seed << "\n";
  man << "resolution " << resolution << "\n";
  man << "light " << detail::fmt_double(ds.light.x) << ' ' << detail::fmt_double(ds.light.y) << ' '
      << detail::fmt_double(ds.light.z) << "\n";
  man << "ambient " << detail::fmt_double(ds.ambient) << "\n";
  man << "background " << detail::fmt_double(ds.background[0]) << ' ' << detail::fmt_double(ds.background[1]) << ' '
      << detail::fmt_double(ds.background[2]) << "\n";
  man << "views " << ds.views.size() << "\n";
  for (const auto& v : ds.views) {
    man << "view " << v.index << ' ' << detail::camera_record(v.camera) << " rgb " << v.rgb_file << " mask "
        << v.mask_file << " depth " << v.depth_file << "\n";
  }
  if (!man) throw FileError(ds.manifest.string(), "write failed");
  return ds;
}

inline Camera parse_camera_fields(std::istringstream& is, const std::string& where) {
  Camera c;
  std::string key;
  bool have_kind = false;
  while (is >> key) {
    if (key == "kind") {
      std::string k;
      is >> k;
      if (k == "orthographic") c.kind = Projection::orthographic;
      else if (k == "perspective") c.kind = Projection::perspective;
      else throw FileError(where, "unknown camera kind '" + k + "'");
      have_kind = true;
    } else if (key == "azimuth") is >> c.azimuth;
    else if (key == "elevation") is >> c.elevation;
    else if (key == "distance") is >> c.distance;
    else if (key == "fov") is >> c.fov;
    else if (key == "halfwidth") is >> c.ortho_halfwidth;
    else if (key == "resolution") {
      is >> c.resolution;
      break;
    } else throw FileError(where, "unexpected camera field '" + key + "'");
  }
  if (!have_kind || !is) throw FileError(where, "incomplete camera record");
  return c;
}

inline SceneDataset read_dataset(const std::filesystem::path& dir) {
  SceneDataset ds;
  ds.manifest = dir / kDatasetManifest;
  const std::string where = ds.manifest.string();
  std::ifstream man(ds.manifest);
  if (!man) throw FileError(where, "cannot open dataset manifest");
  std::string line;
  if (!std::getline(man, line) || line != "nova-dataset 1") throw FileError(where, "bad manifest header");
  std::size_t expected = 0;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "scene_seed") is >> ds.scene_seed;
    else if (key == "protocol_seed") is >> ds.protocol_seed;
    else if (key == "resolution") is >> ds.resolution;
    else if (key == "light") is >> ds.light.x >> ds.light.y >> ds.light.z;
    else if (key == "ambient") is >> ds.ambient;
    else if (key == "background") is >> ds.background[0] >> ds.background[1] >> ds.background[2];
    else if (key == "views") is >> expected;
    else if (key == "view") {
      DatasetView v;
      is >> v.index;
      v.camera = parse_camera_fields(is, where);
      std::string k;
      is >> k >> v.rgb_file >> k >> v.mask_file >> k >> v.depth_file;
      if (!is) throw FileError(where, "incomplete view record");
      const auto rgb = read_png(dir / v.rgb_file);
      const auto mask = read_pfm(dir / v.mask_file);
      const auto depth = read_pfm(dir / v.depth_file);
      const int r = v.camera.resolution;
      if (rgb.width != r || rgb.height != r || mask.width != r || depth.width != r) {
        throw FileError((dir / v.rgb_file).string(), "image size does not match camera resolution");
      }
      v.images = {r, rgb.data, mask.data, depth.data};
      ds.views.push_back(std::move(v));
    } else {
      throw FileError(where, "unknown manifest key '" + key + "'");
    }
    if (!is && key != "view") throw FileError(where, "malformed line: " + line);
  }
  if (ds.views.size() != expected) throw FileError(where, "view count does not match header");
  return ds;
}

}  // namespace nova
