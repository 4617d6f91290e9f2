#pragma once

// Differentiable image-space operators on [H x W x C] tensors.

#include <cstdint>
#include <memory>
#include <vector>

#include "nova/diffcore.hpp"

namespace nova {

enum class PadMode { zero, replicate };

/// Precomputed source pixel for every (output pixel, kernel tap) of a 2-D
/// convolution; -1 marks a zero-padded tap.
struct ConvGeometry {
  std::size_t in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  std::size_t kh = 0, kw = 0, stride = 1;
  std::vector<std::int64_t> src;

  ConvGeometry() = default;
  ConvGeometry(std::size_t h, std::size_t w, std::size_t kh_, std::size_t kw_, std::size_t stride_,
               std::size_t pad, PadMode mode)
      : in_h(h), in_w(w), kh(kh_), kw(kw_), stride(stride_) {
    if (stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw) {
      throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                           " does not fit input " + std::to_string(h) + "x" + std::to_string(w));
    }
    out_h = (h + 2 * pad - kh) / stride + 1;
    out_w = (w + 2 * pad - kw) / stride + 1;
    src.resize(out_h * out_w * kh * kw);
    std::size_t t = 0;
    for (std::size_t oi = 0; oi < out_h; ++oi)
      for (std::size_t oj = 0; oj < out_w; ++oj)
        for (std::size_t a = 0; a < kh; ++a)
          for (std::size_t b = 0; b < kw; ++b, ++t) {
            auto i = static_cast<std::int64_t>(oi * stride + a) - static_cast<std::int64_t>(pad);
            auto j = static_cast<std::int64_t>(oj * stride + b) - static_cast<std::int64_t>(pad);
            const auto hh = static_cast<std::int64_t>(h), ww = static_cast<std::int64_t>(w);
            if (mode == PadMode::replicate) {
              i = std::clamp<std::int64_t>(i, 0, hh - 1);
              j = std::clamp<std::int64_t>(j, 0, ww - 1);
              src[t] = i * ww + j;
            } else {
              src[t] = (i < 0 || j < 0 || i >= hh || j >= ww) ? -1 : i * ww + j;
            }
          }
  }

  std::size_t taps() const { return kh * kw; }
  std::size_t out_pixels() const { return out_h * out_w; }
};

namespace detail {

// y[o, co] += sum_{tap, ci} x[src(o, tap), ci] w[tap, ci, co]
template <class Real>
void conv_forward(const ConvGeometry& g, const Real* x, const Real* w, Real* y, std::size_t cin,
                  std::size_t cout) {
  const std::size_t taps = g.taps();
  parallel_for(g.out_pixels(), 64, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t o = lo; o < hi; ++o) {
      Real* yo = y + o * cout;
      for (std::size_t t = 0; t < taps; ++t) {
        const auto s = g.src[o * taps + t];
        if (s < 0) continue;
        const Real* xs = x + static_cast<std::size_t>(s) * cin;
        const Real* wt = w + t * cin * cout;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const Real xv = xs[ci];
          const Real* wr = wt + ci * cout;
          for (std::size_t co = 0; co < cout; ++co) yo[co] += xv * wr[co];
        }
      }
    }
  });
}

// dx[src(o, tap), ci] += sum_co dy[o, co] w[tap, ci, co]   (the adjoint)
template <class Real>
void conv_adjoint(const ConvGeometry& g, const Real* dy, const Real* w, Real* dx, std::size_t cin,
                  std::size_t cout) {
  const std::size_t taps = g.taps();
  for (std::size_t o = 0; o < g.out_pixels(); ++o) {
    const Real* go = dy + o * cout;
    for (std::size_t t = 0; t < taps; ++t) {
      const auto s = g.src[o * taps + t];
      if (s < 0) continue;
      Real* xs = dx + static_cast<std::size_t>(s) * cin;
      const Real* wt = w + t * cin * cout;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const Real* wr = wt + ci * cout;
        Real acc = 0;
        for (std::size_t co = 0; co < cout; ++co) acc += go[co] * wr[co];
        xs[ci] += acc;
      }
    }
  }
}

// dw[tap, ci, co] += sum_o x[src(o, tap), ci] dy[o, co]
template <class Real>
void conv_weight_grad(const ConvGeometry& g, const Real* x, const Real* dy, std::vector<Real>& dw,
                      std::size_t cin, std::size_t cout) {
  const std::size_t taps = g.taps();
  ordered_reduce(g.out_pixels(), dw, [&](std::size_t lo, std::size_t hi, std::vector<Real>& acc) {
    for (std::size_t o = lo; o < hi; ++o) {
      const Real* go = dy + o * cout;
      for (std::size_t t = 0; t < taps; ++t) {
        const auto s = g.src[o * taps + t];
        if (s < 0) continue;
        const Real* xs = x + static_cast<std::size_t>(s) * cin;
        Real* at = acc.data() + t * cin * cout;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const Real xv = xs[ci];
          Real* ar = at + ci * cout;
          for (std::size_t co = 0; co < cout; ++co) ar[co] += xv * go[co];
        }
      }
    }
  }, 256);
}

}  // namespace detail

/// 2-D convolution (cross-correlation) of x [H x W x Cin] with
/// w [kh x kw x Cin x Cout] plus optional bias [Cout].
template <class Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b, std::size_t stride,
                    std::size_t pad, PadMode mode) {
  detail::require_rank(x, 3, "conv2d(x)");
  detail::require_rank(w, 4, "conv2d(w)");
  if (w.dim(2) != x.dim(2)) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  }
  const std::size_t cin = x.dim(2), cout = w.dim(3);
  auto geo = std::make_shared<ConvGeometry>(x.dim(0), x.dim(1), w.dim(0), w.dim(1), stride, pad, mode);
  const bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || b.dim(0) != cout)) {
    throw DimensionError("conv2d: bias " + shape_str(b.shape()) + " vs weight " + shape_str(w.shape()));
  }
  std::vector<Real> out(geo->out_pixels() * cout, Real(0));
  if (has_bias)
    for (std::size_t o = 0; o < geo->out_pixels(); ++o)
      for (std::size_t co = 0; co < cout; ++co) out[o * cout + co] = b[co];
  detail::conv_forward(*geo, x.data().data(), w.data().data(), out.data(), cin, cout);
  std::vector<Tensor<Real>> in{x, w};
  if (has_bias) in.push_back(b);
  return detail::make_result<Real>(
      "conv2d", Shape{geo->out_h, geo->out_w, cout}, std::move(out), std::move(in),
      [geo, cin, cout, has_bias](detail::Node<Real>& o) {
        auto& px = detail::parent(o, 0);
        auto& pw = detail::parent(o, 1);
        if (px.requires_grad) detail::conv_adjoint(*geo, o.grad.data(), pw.data.data(), px.ensure_grad().data(), cin, cout);
        if (pw.requires_grad) detail::conv_weight_grad(*geo, px.data.data(), o.grad.data(), pw.ensure_grad(), cin, cout);
        if (has_bias) {
          auto& pb = detail::parent(o, 2);
          if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (std::size_t p = 0; p < geo->out_pixels(); ++p)
              for (std::size_t co = 0; co < cout; ++co) g[co] += o.grad[p * cout + co];
          }
        }
      });
}

/// Adjoint of conv2d with respect to its input: maps an output-shaped
/// [out_h x out_w x Cout] tensor back to [in_h x in_w x Cin]. Differentiable
/// in both arguments, which is what input-gradient penalties need.
template <class Real>
Tensor<Real> conv2d_transpose(const Tensor<Real>& g, const Tensor<Real>& w, std::size_t in_h, std::size_t in_w,
                              std::size_t stride, std::size_t pad, PadMode mode) {
  detail::require_rank(g, 3, "conv2d_transpose(g)");
  detail::require_rank(w, 4, "conv2d_transpose(w)");
  auto geo = std::make_shared<ConvGeometry>(in_h, in_w, w.dim(0), w.dim(1), stride, pad, mode);
  const std::size_t cin = w.dim(2), cout = w.dim(3);
  if (g.dim(0) != geo->out_h || g.dim(1) != geo->out_w || g.dim(2) != cout) {
    throw DimensionError("conv2d_transpose: " + shape_str(g.shape()) + " vs weight " + shape_str(w.shape()));
  }
  std::vector<Real> out(in_h * in_w * cin, Real(0));
  detail::conv_adjoint(*geo, g.data().data(), w.data().data(), out.data(), cin, cout);
  return detail::make_result<Real>(
      "conv2d_transpose", Shape{in_h, in_w, cin}, std::move(out), {g, w},
      [geo, cin, cout](detail::Node<Real>& o) {
        auto& pg = detail::parent(o, 0);
        auto& pw = detail::parent(o, 1);
        if (pg.requires_grad) detail::conv_forward(*geo, o.grad.data(), pw.data.data(), pg.ensure_grad().data(), cin, cout);
        if (pw.requires_grad) detail::conv_weight_grad(*geo, o.grad.data(), pg.data.data(), pw.ensure_grad(), cin, cout);
      });
}

/// A fixed linear map between pixel grids applied to every channel alike:
/// out[p, c] = sum over taps (s, a) of a * in[s, c].
template <class Real>
struct SpatialMap {
  std::size_t in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  std::vector<std::size_t> offsets;  // out_h*out_w + 1 prefix offsets into taps
  std::vector<std::size_t> src;
  std::vector<Real> weight;

  void begin_pixel() {
    if (offsets.empty()) offsets.push_back(0);
  }
  void add(std::size_t s, Real a) {
    src.push_back(s);
    weight.push_back(a);
  }
  void end_pixel() { offsets.push_back(src.size()); }
};

template <class Real>
Tensor<Real> apply_spatial_map(const Tensor<Real>& x, std::shared_ptr<const SpatialMap<Real>> map, const char* op) {
  detail::require_rank(x, 3, op);
  if (x.dim(0) != map->in_h || x.dim(1) != map->in_w) {
    throw DimensionError(std::string(op) + ": input " + shape_str(x.shape()) + " does not match map");
  }
  const std::size_t c = x.dim(2), np = map->out_h * map->out_w;
  std::vector<Real> out(np * c, Real(0));
  for (std::size_t p = 0; p < np; ++p) {
    Real* o = out.data() + p * c;
    for (std::size_t t = map->offsets[p]; t < map->offsets[p + 1]; ++t) {
      const Real a = map->weight[t];
      const Real* s = x.data().data() + map->src[t] * c;
      for (std::size_t k = 0; k < c; ++k) o[k] += a * s[k];
    }
  }
  return detail::make_result<Real>(op, Shape{map->out_h, map->out_w, c}, std::move(out), {x},
                                   [map, c, np](detail::Node<Real>& o) {
                                     auto& px = detail::parent(o, 0);
                                     if (!px.requires_grad) return;
                                     auto& g = px.ensure_grad();
                                     for (std::size_t p = 0; p < np; ++p) {
                                       const Real* go = o.grad.data() + p * c;
                                       for (std::size_t t = map->offsets[p]; t < map->offsets[p + 1]; ++t) {
                                         const Real a = map->weight[t];
                                         Real* s = g.data() + map->src[t] * c;
                                         for (std::size_t k = 0; k < c; ++k) s[k] += a * go[k];
                                       }
                                     }
                                   });
}

/// Bilinear resampling with half-pixel centers and edge clamping.
template <class Real>
std::shared_ptr<const SpatialMap<Real>> bilinear_resize_map(std::size_t in_h, std::size_t in_w, std::size_t out_h,
                                                            std::size_t out_w) {
  auto m = std::make_shared<SpatialMap<Real>>();
  m->in_h = in_h;
  m->in_w = in_w;
  m->out_h = out_h;
  m->out_w = out_w;
  m->begin_pixel();
  auto axis = [](std::size_t o, std::size_t n_in, std::size_t n_out, std::size_t& i0, std::size_t& i1, Real& f) {
    Real x = (Real(o) + Real(0.5)) * Real(n_in) / Real(n_out) - Real(0.5);
    x = std::clamp(x, Real(0), Real(n_in - 1));
    i0 = std::min(static_cast<std::size_t>(x), n_in - 1);
    i1 = std::min(i0 + 1, n_in - 1);
    f = x - Real(i0);
  };
  for (std::size_t i = 0; i < out_h; ++i) {
    std::size_t r0, r1;
    Real fr;
    axis(i, in_h, out_h, r0, r1, fr);
    for (std::size_t j = 0; j < out_w; ++j) {
      std::size_t c0, c1;
      Real fc;
      axis(j, in_w, out_w, c0, c1, fc);
      m->add(r0 * in_w + c0, (1 - fr) * (1 - fc));
      m->add(r0 * in_w + c1, (1 - fr) * fc);
      m->add(r1 * in_w + c0, fr * (1 - fc));
      m->add(r1 * in_w + c1, fr * fc);
      m->end_pixel();
    }
  }
  return m;
}

template <class Real>
Tensor<Real> resize_bilinear(const Tensor<Real>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x, 3, "resize_bilinear");
  if (x.dim(0) == out_h && x.dim(1) == out_w) return x;
  return apply_spatial_map(x, bilinear_resize_map<Real>(x.dim(0), x.dim(1), out_h, out_w), "resize_bilinear");
}

/// 2x2 mean pooling, stride 2.
template <class Real>
Tensor<Real> avg_pool2(const Tensor<Real>& x) {
  detail::require_rank(x, 3, "avg_pool2");
  const std::size_t h = x.dim(0), w = x.dim(1);
  if (h % 2 || w % 2) throw DimensionError("avg_pool2: odd extent " + shape_str(x.shape()));
  auto m = std::make_shared<SpatialMap<Real>>();
  m->in_h = h;
  m->in_w = w;
  m->out_h = h / 2;
  m->out_w = w / 2;
  m->begin_pixel();
  for (std::size_t i = 0; i < h / 2; ++i)
    for (std::size_t j = 0; j < w / 2; ++j) {
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b) m->add((2 * i + a) * w + 2 * j + b, Real(0.25));
      m->end_pixel();
    }
  return apply_spatial_map<Real>(x, m, "avg_pool2");
}

/// Gaussian pyramid reduction: separable [1 4 6 4 1]/16 blur with edge
/// replication, then keep every second pixel. Output is ceil(H/2) x ceil(W/2).
template <class Real>
std::shared_ptr<const SpatialMap<Real>> pyr_down_map(std::size_t h, std::size_t w) {
  static constexpr double k[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  auto m = std::make_shared<SpatialMap<Real>>();
  m->in_h = h;
  m->in_w = w;
  m->out_h = (h + 1) / 2;
  m->out_w = (w + 1) / 2;
  m->begin_pixel();
  auto clampi = [](std::int64_t v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::int64_t>(v, 0, static_cast<std::int64_t>(n) - 1));
  };
  for (std::size_t i = 0; i < m->out_h; ++i)
    for (std::size_t j = 0; j < m->out_w; ++j) {
      for (int a = 0; a < 5; ++a)
        for (int b = 0; b < 5; ++b) {
          const auto r = clampi(static_cast<std::int64_t>(2 * i) + a - 2, h);
          const auto c = clampi(static_cast<std::int64_t>(2 * j) + b - 2, w);
          m->add(r * w + c, static_cast<Real>(k[a] * k[b]));
        }
      m->end_pixel();
    }
  return m;
}

template <class Real>
Tensor<Real> pyr_down(const Tensor<Real>& x) {
  detail::require_rank(x, 3, "pyr_down");
  return apply_spatial_map<Real>(x, pyr_down_map<Real>(x.dim(0), x.dim(1)), "pyr_down");
}

/// Attention pooling over 2x2 windows: per window, softmax of the four
/// logits weights the four feature vectors. x [H x W x C], logits [H x W x 1].
template <class Real>
Tensor<Real> attention_pool2(const Tensor<Real>& x, const Tensor<Real>& logits) {
  detail::require_rank(x, 3, "attention_pool2(x)");
  detail::require_rank(logits, 3, "attention_pool2(logits)");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (logits.dim(0) != h || logits.dim(1) != w || logits.dim(2) != 1) {
    throw DimensionError("attention_pool2: logits " + shape_str(logits.shape()) + " vs " + shape_str(x.shape()));
  }
  if (h % 2 || w % 2) throw DimensionError("attention_pool2: odd extent " + shape_str(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  auto att = std::make_shared<std::vector<Real>>(oh * ow * 4);
  std::vector<Real> out(oh * ow * c, Real(0));
  auto src = [w](std::size_t i, std::size_t j, std::size_t t) { return (2 * i + t / 2) * w + 2 * j + t % 2; };
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      Real* a = att->data() + (i * ow + j) * 4;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t t = 0; t < 4; ++t) mx = std::max(mx, a[t] = logits[src(i, j, t)]);
      Real z = 0;
      for (std::size_t t = 0; t < 4; ++t) z += (a[t] = std::exp(a[t] - mx));
      Real* o = out.data() + (i * ow + j) * c;
      for (std::size_t t = 0; t < 4; ++t) {
        a[t] /= z;
        const Real* xs = x.data().data() + src(i, j, t) * c;
        for (std::size_t k = 0; k < c; ++k) o[k] += a[t] * xs[k];
      }
    }
  return detail::make_result<Real>(
      "attention_pool2", Shape{oh, ow, c}, std::move(out), {x, logits}, [att, oh, ow, c, src](detail::Node<Real>& o) {
        auto& px = detail::parent(o, 0);
        auto& pl = detail::parent(o, 1);
        std::vector<Real>* gx = px.requires_grad ? &px.ensure_grad() : nullptr;
        std::vector<Real>* gl = pl.requires_grad ? &pl.ensure_grad() : nullptr;
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            const Real* a = att->data() + (i * ow + j) * 4;
            const Real* go = o.grad.data() + (i * ow + j) * c;
            Real ga[4];
            Real dot = 0;
            for (std::size_t t = 0; t < 4; ++t) {
              const Real* xs = px.data.data() + src(i, j, t) * c;
              Real s = 0;
              for (std::size_t k = 0; k < c; ++k) s += go[k] * xs[k];
              ga[t] = s;
              dot += a[t] * s;
              if (gx) {
                Real* g = gx->data() + src(i, j, t) * c;
                for (std::size_t k = 0; k < c; ++k) g[k] += a[t] * go[k];
              }
            }
            if (gl)
              for (std::size_t t = 0; t < 4; ++t) (*gl)[src(i, j, t)] += a[t] * (ga[t] - dot);
          }
      });
}

}  // namespace nova
