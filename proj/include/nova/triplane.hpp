#pragma once

#include <string>
#include <utility>
#include <vector>

#include "nova/diffcore.hpp"
#include "nova/geometry.hpp"
#include "nova/rng.hpp"

namespace nova {

inline constexpr std::size_t kPlaneChannels = 16;
inline constexpr std::size_t kDefaultPlaneResolution = 64;
inline constexpr double kDefaultPlaneExtent = 1.1;

/// Three axis-aligned feature planes [R x R x C]. A point (x, y, z) projects
/// to normalized plane coordinates (u, v) as
///   XY: (x, y) / extent    XZ: (x, z) / extent    YZ: (z, y) / extent
template <class Real>
struct TriPlane {
  Tensor<Real> xy, xz, yz;
  Real extent = Real(kDefaultPlaneExtent);

  std::size_t resolution() const { return xy.dim(0); }
  std::size_t channels() const { return xy.dim(2); }

  static TriPlane constant(std::size_t r, std::size_t c, Real value, Real extent, bool requires_grad = false) {
    return {Tensor<Real>::full({r, r, c}, value, requires_grad), Tensor<Real>::full({r, r, c}, value, requires_grad),
            Tensor<Real>::full({r, r, c}, value, requires_grad), extent};
  }

  static TriPlane random(std::size_t r, std::size_t c, Real stddev, Real extent, Rng& rng) {
    auto plane = [&] {
      std::vector<Real> v(r * r * c);
      for (auto& x : v) x = Real(rng.normal(0.0, stddev));
      return Tensor<Real>::from({r, r, c}, std::move(v), true);
    };
    TriPlane tp;
    tp.xy = plane();
    tp.xz = plane();
    tp.yz = plane();
    tp.extent = extent;
    return tp;
  }

  void validate() const {
    for (const auto* p : {&xy, &xz, &yz}) {
      if (p->rank() != 3 || p->shape() != xy.shape() || p->dim(0) != p->dim(1)) {
        throw DimensionError("tri-plane planes must share a square [R x R x C] shape, got " +
                             shape_str(p->shape()) + " and " + shape_str(xy.shape()));
      }
    }
  }
};

/// Projected plane coordinates of points [N x 3] for the three planes.
template <class Real>
std::array<std::vector<Real>, 3> triplane_uv(const Tensor<Real>& points, Real extent) {
  const std::size_t n = points.dim(0);
  std::array<std::vector<Real>, 3> uv;
  for (auto& v : uv) v.resize(2 * n);
  const Real inv = Real(1) / extent;
  for (std::size_t i = 0; i < n; ++i) {
    const Real x = points[3 * i] * inv, y = points[3 * i + 1] * inv, z = points[3 * i + 2] * inv;
    uv[0][2 * i] = x, uv[0][2 * i + 1] = y;
    uv[1][2 * i] = x, uv[1][2 * i + 1] = z;
    uv[2][2 * i] = z, uv[2][2 * i + 1] = y;
  }
  return uv;
}

/// Sum of the three bilinear plane samples at each point, [N x C].
template <class Real>
Tensor<Real> sample_triplane(const TriPlane<Real>& tp, const Tensor<Real>& points) {
  if (points.rank() != 2 || points.dim(1) != 3) {
    throw DimensionError("sample_triplane: points must be N x 3, got " + shape_str(points.shape()));
  }
  tp.validate();
  const auto uv = triplane_uv(points, tp.extent);
  auto f = add(bilinear_sample(tp.xy, std::span<const Real>(uv[0])), bilinear_sample(tp.xz, std::span<const Real>(uv[1])));
  return add(f, bilinear_sample(tp.yz, std::span<const Real>(uv[2])));
}

/// Front planes live in world space; back planes live in back space.
template <class Real>
struct DualTriPlane {
  TriPlane<Real> front, back;

  void validate() const {
    front.validate();
    back.validate();
    if (front.xy.shape() != back.xy.shape() || front.extent != back.extent) {
      throw DimensionError("front and back tri-planes must share resolution, channels and extent");
    }
  }

  std::vector<std::pair<std::string, Tensor<Real>>> named() const {
    return {{"front.xy", front.xy}, {"front.xz", front.xz}, {"front.yz", front.yz},
            {"back.xy", back.xy},   {"back.xz", back.xz},   {"back.yz", back.yz}};
  }
};

template <class Real>
struct DualFeatures {
  Tensor<Real> front;  // [N x C]
  Tensor<Real> back;   // [N x C]
};

template <class Real>
DualFeatures<Real> sample_dual(const DualTriPlane<Real>& dtp, const Tensor<Real>& world_points) {
  dtp.validate();
  return {sample_triplane(dtp.front, world_points), sample_triplane(dtp.back, world_to_back_space(world_points))};
}

}  // namespace nova
