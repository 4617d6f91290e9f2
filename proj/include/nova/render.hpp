#pragma once

// Emission-absorption volume rendering of the dual tri-plane field.

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nova/diffcore.hpp"
#include "nova/fusion.hpp"
#include "nova/geometry.hpp"
#include "nova/triplane.hpp"

namespace nova {

inline constexpr std::size_t kDecoderHidden = 64;
inline constexpr double kDecoderSlope = 0.2;
inline constexpr std::size_t kDefaultSamplesPerRay = 32;

/// Two-layer perceptron F_o (32) -> hidden (64, leaky) -> (sigma raw, rgb raw).
template <class Real>
struct DecoderParams {
  Tensor<Real> w1, b1;  // [32 x 64], [64]
  Tensor<Real> w2, b2;  // [64 x 4], [4]

  static DecoderParams zeros(std::size_t in = kFusionWidth, bool requires_grad = true) {
    return {Tensor<Real>::zeros({in, kDecoderHidden}, requires_grad), Tensor<Real>::zeros({kDecoderHidden}, requires_grad),
            Tensor<Real>::zeros({kDecoderHidden, 4}, requires_grad), Tensor<Real>::zeros({4}, requires_grad)};
  }

  static DecoderParams random(Rng& rng, std::size_t in = kFusionWidth) {
    auto d = zeros(in);
    auto fill = [&](Tensor<Real>& t, double sd) {
      for (auto& x : t.mutable_data()) x = Real(rng.normal(0.0, sd));
    };
    fill(d.w1, std::sqrt(2.0 / double(in)));
    fill(d.w2, std::sqrt(1.0 / double(kDecoderHidden)));
    return d;
  }

  std::vector<std::pair<std::string, Tensor<Real>>> named() const {
    return {{"decoder.w1", w1}, {"decoder.b1", b1}, {"decoder.w2", w2}, {"decoder.b2", b2}};
  }
};

template <class Real>
struct PointRadiance {
  Tensor<Real> sigma;  // [N x 1], softplus >= 0
  Tensor<Real> rgb;    // [N x 3], sigmoid in [0, 1]
};

template <class Real>
PointRadiance<Real> decode_points(const DecoderParams<Real>& d, const Tensor<Real>& f_o) {
  auto h = leaky_relu(linear(f_o, d.w1, d.b1), Real(kDecoderSlope));
  auto raw = linear(h, d.w2, d.b2);
  return {softplus(slice_cols(raw, 0, 1)), sigmoid(slice_cols(raw, 1, 4))};
}

template <class Real>
struct Composite {
  Tensor<Real> out;                              // [P x 5]: r, g, b, depth, mask
  std::shared_ptr<const std::vector<Real>> weights;  // [P x S] compositing weights
};

/// Front-to-back compositing of P rays with S samples each:
///   delta_i = t_{i+1} - t_i (last: far - t_S), alpha_i = 1 - exp(-sigma_i delta_i),
///   T_i = prod_{j<i} (1 - alpha_j), w_i = T_i alpha_i,
///   rgb = sum w_i c_i + (1 - sum w_i) background, depth = sum w_i t_i, mask = sum w_i.
template <class Real>
Composite<Real> composite(const Tensor<Real>& sigma, const Tensor<Real>& rgb, const Tensor<Real>& depths, Real far,
                          std::array<Real, 3> background) {
  detail::require_rank(depths, 2, "composite(depths)");
  const std::size_t p = depths.dim(0), s = depths.dim(1);
  if (sigma.size() != p * s || rgb.size() != p * s * 3) {
    throw DimensionError("composite: sigma " + shape_str(sigma.shape()) + ", rgb " + shape_str(rgb.shape()) +
                         " vs depths " + shape_str(depths.shape()));
  }
  auto delta = std::make_shared<std::vector<Real>>(p * s);
  for (std::size_t r = 0; r < p; ++r)
    for (std::size_t i = 0; i < s; ++i) {
      const Real t = depths[r * s + i];
      const Real next = i + 1 < s ? depths[r * s + i + 1] : far;
      if (!(next > t) && !(i + 1 == s && next == t)) {
        throw PreconditionError("composite: depths must be strictly increasing and not beyond far");
      }
      (*delta)[r * s + i] = next - t;
    }
  auto weights = std::make_shared<std::vector<Real>>(p * s);
  auto trans = std::make_shared<std::vector<Real>>(p * (s + 1));  // T_1 .. T_{S+1}
  std::vector<Real> out(p * 5);
  for (std::size_t r = 0; r < p; ++r) {
    Real T = 1;
    Real acc[5] = {0, 0, 0, 0, 0};
    for (std::size_t i = 0; i < s; ++i) {
      const std::size_t k = r * s + i;
      (*trans)[r * (s + 1) + i] = T;
      const Real e = std::exp(-sigma[k] * (*delta)[k]);
      const Real w = T * (Real(1) - e);
      (*weights)[k] = w;
      for (std::size_t c = 0; c < 3; ++c) acc[c] += w * rgb[3 * k + c];
      acc[3] += w * depths[k];
      acc[4] += w;
      T *= e;
    }
    (*trans)[r * (s + 1) + s] = T;
    for (std::size_t c = 0; c < 3; ++c) out[r * 5 + c] = acc[c] + T * background[c];
    out[r * 5 + 3] = acc[3];
    out[r * 5 + 4] = Real(1) - T;
  }
  auto result = detail::make_result<Real>(
      "composite", Shape{p, 5}, std::move(out), {sigma, rgb},
      [p, s, delta, weights, trans, background, depths](detail::Node<Real>& o) {
        auto& ps = detail::parent(o, 0);
        auto& pc = detail::parent(o, 1);
        std::vector<Real>* gs = ps.requires_grad ? &ps.ensure_grad() : nullptr;
        std::vector<Real>* gc = pc.requires_grad ? &pc.ensure_grad() : nullptr;
        for (std::size_t r = 0; r < p; ++r) {
          const Real* g = o.grad.data() + r * 5;
          const Real t_end = (*trans)[r * (s + 1) + s];
          // suffix = sum_{i>k} w_i <g, c_i>
          Real suffix = 0;
          const Real tail = t_end * (g[0] * background[0] + g[1] * background[1] + g[2] * background[2]);
          for (std::size_t ii = s; ii-- > 0;) {
            const std::size_t k = r * s + ii;
            const Real w = (*weights)[k];
            const Real* c = pc.data.data() + 3 * k;
            const Real gdotc = g[0] * c[0] + g[1] * c[1] + g[2] * c[2] + g[3] * depths[k] + g[4];
            if (gc)
              for (std::size_t ch = 0; ch < 3; ++ch) (*gc)[3 * k + ch] += w * g[ch];
            if (gs) {
              const Real t_next = (*trans)[r * (s + 1) + ii + 1];
              (*gs)[k] += (*delta)[k] * (t_next * gdotc - suffix - tail);
            }
            suffix += w * gdotc;
          }
        }
      });
  return {result, weights};
}

template <class Real>
struct RenderOutput {
  Tensor<Real> rgb;    // [P x 3]
  Tensor<Real> depth;  // [P x 1]
  Tensor<Real> mask;   // [P x 1]
  std::vector<Real> weights;  // [P x S]
  std::size_t samples = 0;
};

/// Everything the renderer needs from the learned field.
template <class Real>
struct FieldModel {
  DualTriPlane<Real> planes;
  FusionParams<Real> fusion;
  FusionMode mode = FusionMode::as_written;
  DecoderParams<Real> decoder;
};

/// Fused features of world points viewed along `dirs`; `block` is the
/// attention set size for as_written.
template <class Real>
Tensor<Real> field_features(const FieldModel<Real>& m, const Tensor<Real>& points, const Tensor<Real>& dirs,
                            std::size_t block) {
  auto f = sample_dual(m.planes, points);
  return direction_aware_attention(m.fusion, f.front, f.back, dirs, m.mode, block).f_o;
}

template <class Real>
Tensor<Real> broadcast_rows(const Tensor<Real>& rows, std::size_t repeat) {
  const std::size_t n = rows.dim(0), c = rows.dim(1);
  std::vector<Real> out(n * repeat * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < repeat; ++k)
      std::copy_n(rows.data().data() + i * c, c, out.data() + (i * repeat + k) * c);
  return Tensor<Real>::from({n * repeat, c}, std::move(out));
}

namespace detail {

template <class Real>
RenderOutput<Real> render_samples(const FieldModel<Real>& m, const Tensor<Real>& points, const Tensor<Real>& dirs,
                                  const Tensor<Real>& depths, Real far, std::array<Real, 3> background) {
  const std::size_t s = depths.dim(1);
  auto feat = field_features(m, points, dirs, s);
  auto rad = decode_points(m.decoder, feat);
  auto comp = composite(rad.sigma, rad.rgb, depths, far, background);
  RenderOutput<Real> out;
  out.rgb = slice_cols(comp.out, 0, 3);
  out.depth = slice_cols(comp.out, 3, 4);
  out.mask = slice_cols(comp.out, 4, 5);
  out.weights = *comp.weights;
  out.samples = s;
  return out;
}

}  // namespace detail

/// Renders a ray batch: stratify, sample both tri-planes, fuse, decode,
/// composite. With gradients disabled, large batches are evaluated in ray
/// chunks to bound memory; the result is identical either way.
template <class Real>
RenderOutput<Real> render_rays(const FieldModel<Real>& m, const RayBatch<Real>& rays, std::size_t samples_per_ray,
                               std::optional<std::uint64_t> jitter_seed, std::array<Real, 3> background) {
  auto smp = stratify_samples(rays, samples_per_ray, jitter_seed);
  auto dirs = broadcast_rows(rays.directions, samples_per_ray);
  const std::size_t n = rays.size(), chunk = 256;
  if (grad_enabled() || n <= chunk) return detail::render_samples(m, smp.points, dirs, smp.depths, rays.far, background);
  std::vector<Real> rgb, depth, mask, weights;
  for (std::size_t lo = 0; lo < n; lo += chunk) {
    const std::size_t hi = std::min(n, lo + chunk);
    const std::size_t s = samples_per_ray;
    auto r = detail::render_samples(m, slice_rows(smp.points, lo * s, hi * s), slice_rows(dirs, lo * s, hi * s),
                                    slice_rows(smp.depths, lo, hi), rays.far, background);
    rgb.insert(rgb.end(), r.rgb.data().begin(), r.rgb.data().end());
    depth.insert(depth.end(), r.depth.data().begin(), r.depth.data().end());
    mask.insert(mask.end(), r.mask.data().begin(), r.mask.data().end());
    weights.insert(weights.end(), r.weights.begin(), r.weights.end());
  }
  RenderOutput<Real> out;
  out.rgb = Tensor<Real>::from({n, 3}, std::move(rgb));
  out.depth = Tensor<Real>::from({n, 1}, std::move(depth));
  out.mask = Tensor<Real>::from({n, 1}, std::move(mask));
  out.weights = std::move(weights);
  out.samples = samples_per_ray;
  return out;
}

inline constexpr std::array<double, 3> kWhite{1.0, 1.0, 1.0};

template <class Real>
std::array<Real, 3> background_of(const std::array<double, 3>& bg) {
  return {Real(bg[0]), Real(bg[1]), Real(bg[2])};
}

/// Plain per-pixel image buffers of a full-frame render.
struct ImageSet {
  int resolution = 0;
  std::vector<double> rgb;    // H*W*3
  std::vector<double> mask;   // H*W
  std::vector<double> depth;  // H*W
};

/// Full-frame render of a camera, row-major pixels.
template <class Real>
RenderOutput<Real> render_view(const Camera& cam, const FieldModel<Real>& m, std::size_t samples_per_ray,
                               std::optional<std::uint64_t> seed, std::array<double, 3> background = kWhite) {
  if (samples_per_ray < 2) throw PreconditionError("render_view: samples_per_ray must be >= 2");
  return render_rays(m, generate_rays<Real>(cam), samples_per_ray, seed, background_of<Real>(background));
}

template <class Real>
ImageSet to_images(const RenderOutput<Real>& r, int resolution) {
  ImageSet s;
  s.resolution = resolution;
  s.rgb.assign(r.rgb.data().begin(), r.rgb.data().end());
  s.mask.assign(r.mask.data().begin(), r.mask.data().end());
  s.depth.assign(r.depth.data().begin(), r.depth.data().end());
  return s;
}

}  // namespace nova
