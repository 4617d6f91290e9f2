#pragma once

// Dual-viewpoint image encoder.
//
// The front path is a stride-1 residual convolution stack with no pooling,
// so it keeps high-frequency texture. The back path sums a pooled base
// stream (2x2 average pool, conv, 2x2 attention pool, bilinear upsample) and
// a full-resolution stream. A shared 1x1 "lift" maps encoder channels to the
// 3*C channels of a tri-plane. All convolutions replicate edge pixels, so a
// constant image produces a constant feature grid.

#include <string>
#include <utility>
#include <vector>

#include "nova/diffcore.hpp"
#include "nova/image_ops.hpp"
#include "nova/rng.hpp"
#include "nova/triplane.hpp"

namespace nova {

inline constexpr std::size_t kEncoderChannels = 32;
inline constexpr double kEncoderSlope = 0.2;

template <class Real>
struct ConvLayer {
  Tensor<Real> w;  // [kh x kw x Cin x Cout]
  Tensor<Real> b;  // [Cout]

  static ConvLayer random(std::size_t k, std::size_t cin, std::size_t cout, Rng& rng, double gain = 1.0) {
    std::vector<Real> v(k * k * cin * cout);
    const double sd = gain / std::sqrt(double(k * k * cin));
    for (auto& x : v) x = Real(rng.normal(0.0, sd));
    return {Tensor<Real>::from({k, k, cin, cout}, std::move(v), true), Tensor<Real>::zeros({cout}, true)};
  }

  static ConvLayer zeros(std::size_t k, std::size_t cin, std::size_t cout) {
    return {Tensor<Real>::zeros({k, k, cin, cout}, true), Tensor<Real>::zeros({cout}, true)};
  }

  Tensor<Real> apply(const Tensor<Real>& x) const {
    const std::size_t k = w.dim(0);
    return conv2d(x, w, b, 1, k / 2, PadMode::replicate);
  }
};

template <class Real>
struct EncoderParams {
  struct Front {
    ConvLayer<Real> conv_a, conv_b;
  } front;
  struct Back {
    ConvLayer<Real> base, pool_logits, hr;
  } back;
  ConvLayer<Real> lift;  // 1x1, K -> 3C

  std::size_t channels() const { return front.conv_a.w.dim(3); }
  std::size_t plane_channels() const { return lift.w.dim(3) / 3; }

  static EncoderParams random(Rng& rng, std::size_t k = kEncoderChannels, std::size_t c = kPlaneChannels) {
    EncoderParams p;
    p.front.conv_a = ConvLayer<Real>::random(3, 3, k, rng);
    p.front.conv_b = ConvLayer<Real>::random(3, k, k, rng, 0.5);
    p.back.base = ConvLayer<Real>::random(3, 3, k, rng);
    p.back.pool_logits = ConvLayer<Real>::random(1, k, 1, rng);
    p.back.hr = ConvLayer<Real>::random(3, 3, k, rng);
    p.lift = ConvLayer<Real>::random(1, k, 3 * c, rng, 0.3);
    return p;
  }

  static EncoderParams zeros(std::size_t k = kEncoderChannels, std::size_t c = kPlaneChannels) {
    EncoderParams p;
    p.front.conv_a = ConvLayer<Real>::zeros(3, 3, k);
    p.front.conv_b = ConvLayer<Real>::zeros(3, k, k);
    p.back.base = ConvLayer<Real>::zeros(3, 3, k);
    p.back.pool_logits = ConvLayer<Real>::zeros(1, k, 1);
    p.back.hr = ConvLayer<Real>::zeros(3, 3, k);
    p.lift = ConvLayer<Real>::zeros(1, k, 3 * c);
    return p;
  }

  std::vector<std::pair<std::string, Tensor<Real>>> named() const {
    return {{"enc.front.conv_a.w", front.conv_a.w}, {"enc.front.conv_a.b", front.conv_a.b},
            {"enc.front.conv_b.w", front.conv_b.w}, {"enc.front.conv_b.b", front.conv_b.b},
            {"enc.back.base.w", back.base.w},       {"enc.back.base.b", back.base.b},
            {"enc.back.pool.w", back.pool_logits.w}, {"enc.back.pool.b", back.pool_logits.b},
            {"enc.back.hr.w", back.hr.w},           {"enc.back.hr.b", back.hr.b},
            {"enc.lift.w", lift.w},                 {"enc.lift.b", lift.b}};
  }
};

namespace detail {

template <class Real>
void require_square_image(const Tensor<Real>& img, const char* what) {
  if (img.rank() != 3 || img.dim(0) != img.dim(1) || img.dim(2) != 3) {
    throw DimensionError(std::string(what) + ": expected a square H x W x 3 image, got " + shape_str(img.shape()));
  }
}

}  // namespace detail

/// High-frequency path: h = conv_a(x); out = h + conv_b(leaky(h)), resized to R.
template <class Real>
Tensor<Real> encode_front(const EncoderParams<Real>& p, const Tensor<Real>& img, std::size_t plane_resolution) {
  detail::require_square_image(img, "encode_front");
  auto h = p.front.conv_a.apply(img);
  auto out = add(h, p.front.conv_b.apply(leaky_relu(h, Real(kEncoderSlope))));
  return resize_bilinear(out, plane_resolution, plane_resolution);
}

/// Low-frequency path: pooled base stream with attention pooling plus a
/// full-resolution stream. Input extent must be divisible by 4.
template <class Real>
Tensor<Real> encode_back(const EncoderParams<Real>& p, const Tensor<Real>& img, std::size_t plane_resolution) {
  detail::require_square_image(img, "encode_back");
  const std::size_t h = img.dim(0);
  if (h % 4) throw DimensionError("encode_back: image extent must be divisible by 4, got " + shape_str(img.shape()));
  auto base = leaky_relu(p.back.base.apply(avg_pool2(img)), Real(kEncoderSlope));
  auto pooled = attention_pool2(base, p.back.pool_logits.apply(base));
  auto merged = add(resize_bilinear(pooled, h, h), p.back.hr.apply(img));
  return resize_bilinear(merged, plane_resolution, plane_resolution);
}

/// 1x1 convolution to 3C channels, split as XY = [0, C), XZ = [C, 2C), YZ = [2C, 3C).
template <class Real>
TriPlane<Real> lift_to_triplane(const EncoderParams<Real>& p, const Tensor<Real>& grid, Real extent) {
  detail::require_rank(grid, 3, "lift_to_triplane");
  const std::size_t r = grid.dim(0), c = p.plane_channels();
  auto flat = p.lift.apply(grid).reshape({r * grid.dim(1), 3 * c});
  auto plane = [&](std::size_t k) { return slice_cols(flat, k * c, (k + 1) * c).reshape({r, grid.dim(1), c}); };
  return {plane(0), plane(1), plane(2), extent};
}

}  // namespace nova
