#pragma once

// Cameras looking at the world origin, per-pixel rays, the world to back
// tri-plane space transform, and stratified depth sampling along rays.
//
// Conventions: +y is up, the figurine faces +z. A camera at azimuth 0 and
// elevation 0 sits on the +z axis; azimuth 90 sits on +x. Pixel (row 0,
// col 0) is the top-left corner of the image.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "nova/diffcore.hpp"
#include "nova/rng.hpp"

namespace nova {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend Vec3 operator-(Vec3 a) { return {-a.x, -a.y, -a.z}; }
};

inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(Vec3 a, Vec3 b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(Vec3 a) { return (1.0 / norm(a)) * a; }

/// sin and cos of an angle in degrees, exact at multiples of 90.
inline std::pair<double, double> sin_cos_deg(double deg) {
  double r = std::fmod(deg, 360.0);
  if (r < 0) r += 360.0;
  if (r == 0.0) return {0.0, 1.0};
  if (r == 90.0) return {1.0, 0.0};
  if (r == 180.0) return {0.0, -1.0};
  if (r == 270.0) return {-1.0, 0.0};
  const double rad = deg * std::numbers::pi / 180.0;
  return {std::sin(rad), std::cos(rad)};
}

enum class Projection { perspective, orthographic };

// Capture protocol constants.
inline constexpr double kProtocolDistance = 3.5;
inline constexpr double kProtocolFov = 30.0;
inline constexpr double kElevationStd = 20.0;
inline constexpr double kElevationClamp = 85.0;
inline constexpr double kDepthMargin = 1.5;
inline constexpr double kOrthoHalfwidth = 1.2;
inline constexpr int kDefaultResolution = 64;

struct Camera {
  Projection kind = Projection::orthographic;
  double azimuth = 0;    // degrees
  double elevation = 0;  // degrees
  double distance = kProtocolDistance;
  double fov = kProtocolFov;                    // perspective only, degrees
  double ortho_halfwidth = kOrthoHalfwidth;     // orthographic only
  int resolution = kDefaultResolution;

  double near() const { return distance - kDepthMargin; }
  double far() const { return distance + kDepthMargin; }

  void validate() const {
    if (!(distance > 0)) throw PreconditionError("camera distance must be positive");
    if (kind == Projection::perspective && !(fov > 0 && fov < 180)) {
      throw PreconditionError("camera fov must lie in (0, 180)");
    }
    if (kind == Projection::orthographic && !(ortho_halfwidth > 0)) {
      throw PreconditionError("orthographic half-width must be positive");
    }
    if (resolution < 1) throw PreconditionError("camera resolution must be positive");
    if (!(near() > 0) || !(near() < far())) throw PreconditionError("camera near/far invalid");
  }

  Vec3 position() const {
    const auto [sa, ca] = sin_cos_deg(azimuth);
    const auto [se, ce] = sin_cos_deg(elevation);
    return {distance * ce * sa, distance * se, distance * ce * ca};
  }

  /// Orthonormal frame: forward (toward the origin), right, up.
  std::array<Vec3, 3> basis() const {
    const auto [sa, ca] = sin_cos_deg(azimuth);
    const auto [se, ce] = sin_cos_deg(elevation);
    const Vec3 forward{-ce * sa, -se, -ce * ca};
    const Vec3 right{ca, 0.0, -sa};
    const Vec3 up = cross(right, forward);
    return {forward, right, up};
  }

  /// Ray through normalized device coordinates (x right, y up, both in
  /// [-1, 1] at the frame edges).
  std::pair<Vec3, Vec3> ray_at(double ndc_x, double ndc_y) const {
    const auto [f, r, u] = basis();
    const Vec3 pos = position();
    if (kind == Projection::orthographic) {
      return {pos + (ndc_x * ortho_halfwidth) * r + (ndc_y * ortho_halfwidth) * u, f};
    }
    const double t = std::tan(fov * std::numbers::pi / 360.0);
    return {pos, normalized(f + (ndc_x * t) * r + (ndc_y * t) * u)};
  }

  /// NDC of a pixel center. The numerators are exact integers, so mirrored
  /// pixels get exactly negated coordinates.
  double ndc_x(int col) const { return double(2 * col + 1 - resolution) / double(resolution); }
  double ndc_y(int row) const { return double(resolution - 2 * row - 1) / double(resolution); }
};

enum class ProtocolMode { random16, ortho4 };

/// The capture protocol: 16 random perspective views (azimuth uniform on
/// [0, 360), elevation normal with std 20 clamped to +-85, fov 30, distance
/// 3.5) or the 4 orthographic views front/left/back/right.
inline std::vector<Camera> camera_from_protocol(std::uint64_t seed, ProtocolMode mode,
                                                int resolution = kDefaultResolution) {
  std::vector<Camera> cams;
  if (mode == ProtocolMode::ortho4) {
    for (double az : {0.0, 90.0, 180.0, 270.0}) {
      Camera c;
      c.kind = Projection::orthographic;
      c.azimuth = az;
      c.resolution = resolution;
      cams.push_back(c);
    }
    return cams;
  }
  Rng rng(derive_seed(seed, {0x70726f746fULL}));
  for (int i = 0; i < 16; ++i) {
    Camera c;
    c.kind = Projection::perspective;
    c.azimuth = rng.uniform(0.0, 360.0);
    c.elevation = std::clamp(rng.normal(0.0, kElevationStd), -kElevationClamp, kElevationClamp);
    c.fov = kProtocolFov;
    c.distance = kProtocolDistance;
    c.resolution = resolution;
    cams.push_back(c);
  }
  return cams;
}

template <class Real>
struct RayBatch {
  Tensor<Real> origins;     // [P x 3]
  Tensor<Real> directions;  // [P x 3], unit norm
  Real near = 0, far = 0;

  std::size_t size() const { return origins.dim(0); }
};

/// Rays through the given pixels (row-major pixel indices).
template <class Real>
RayBatch<Real> generate_rays(const Camera& cam, std::span<const std::size_t> pixels) {
  cam.validate();
  const auto res = static_cast<std::size_t>(cam.resolution);
  std::vector<Real> o(pixels.size() * 3), d(pixels.size() * 3);
  for (std::size_t k = 0; k < pixels.size(); ++k) {
    const int row = static_cast<int>(pixels[k] / res), col = static_cast<int>(pixels[k] % res);
    const auto [org, dir] = cam.ray_at(cam.ndc_x(col), cam.ndc_y(row));
    o[3 * k] = Real(org.x), o[3 * k + 1] = Real(org.y), o[3 * k + 2] = Real(org.z);
    d[3 * k] = Real(dir.x), d[3 * k + 1] = Real(dir.y), d[3 * k + 2] = Real(dir.z);
  }
  const Shape s{pixels.size(), 3};
  return {Tensor<Real>::from(s, std::move(o)), Tensor<Real>::from(s, std::move(d)), Real(cam.near()),
          Real(cam.far())};
}

/// One ray per pixel through pixel centers, row-major.
template <class Real>
RayBatch<Real> generate_rays(const Camera& cam) {
  std::vector<std::size_t> px(static_cast<std::size_t>(cam.resolution) * cam.resolution);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = i;
  return generate_rays<Real>(cam, px);
}

/// (x, y, z) -> (-x, y, -z): a half turn about the y axis. Applies equally to
/// positions and directions.
template <class Real>
Tensor<Real> world_to_back_space(const Tensor<Real>& p) {
  if (p.rank() != 2 || p.dim(1) != 3) throw DimensionError("world_to_back_space: expected N x 3, got " + shape_str(p.shape()));
  std::vector<Real> out(p.data().begin(), p.data().end());
  for (std::size_t i = 0; i < out.size(); i += 3) {
    out[i] = -out[i];
    out[i + 2] = -out[i + 2];
  }
  return detail::make_result<Real>("world_to_back_space", p.shape(), std::move(out), {p}, [](detail::Node<Real>& o) {
    auto& pp = detail::parent(o, 0);
    if (!pp.requires_grad) return;
    auto& g = pp.ensure_grad();
    for (std::size_t i = 0; i < g.size(); i += 3) {
      g[i] -= o.grad[i];
      g[i + 1] += o.grad[i + 1];
      g[i + 2] -= o.grad[i + 2];
    }
  });
}

template <class Real>
struct RaySamples {
  Tensor<Real> depths;  // [P x S]
  Tensor<Real> points;  // [P*S x 3], ray-major
  std::size_t samples = 0;
};

/// One depth per stratum of [near, far] per ray: the stratum midpoint when
/// jitter_seed is empty, otherwise a uniform draw within the stratum.
template <class Real>
RaySamples<Real> stratify_samples(const RayBatch<Real>& rays, std::size_t n_samples,
                                  std::optional<std::uint64_t> jitter_seed) {
  if (n_samples < 2) throw PreconditionError("stratify_samples: need at least 2 samples per ray");
  const std::size_t p = rays.size();
  std::vector<Real> depth(p * n_samples), pts(p * n_samples * 3);
  const Real step = (rays.far - rays.near) / Real(n_samples);
  std::optional<Rng> rng;
  if (jitter_seed) rng.emplace(*jitter_seed);
  for (std::size_t r = 0; r < p; ++r) {
    for (std::size_t s = 0; s < n_samples; ++s) {
      const Real u = rng ? Real(rng->uniform()) : Real(0.5);
      const Real t = rays.near + (Real(s) + u) * step;
      depth[r * n_samples + s] = t;
      for (std::size_t a = 0; a < 3; ++a) {
        pts[(r * n_samples + s) * 3 + a] = rays.origins[r * 3 + a] + t * rays.directions[r * 3 + a];
      }
    }
  }
  return {Tensor<Real>::from({p, n_samples}, std::move(depth)), Tensor<Real>::from({p * n_samples, 3}, std::move(pts)),
          n_samples};
}

}  // namespace nova
