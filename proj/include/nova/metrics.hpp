#pragma once

// Image-quality metrics and the ghost-face statistic.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nova/diffcore.hpp"
#include "nova/losses.hpp"

namespace nova {

inline constexpr double kPsnrSentinel = 99.0;

/// 10 log10(1 / MSE) for values in [0, 1]; identical inputs give 99.
inline double psnr(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw DimensionError("psnr: image sizes differ");
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  if (se == 0) return kPsnrSentinel;
  return std::min(kPsnrSentinel, 10.0 * std::log10(double(a.size()) / se));
}

namespace detail {

/// 11-tap Gaussian, sigma 1.5, normalized.
inline std::array<double, 11> ssim_window() {
  std::array<double, 11> w{};
  double s = 0;
  for (int i = 0; i < 11; ++i) s += w[i] = std::exp(-0.5 * (i - 5) * (i - 5) / (1.5 * 1.5));
  for (auto& v : w) v /= s;
  return w;
}

/// Half-sample symmetric index reflection (d c b a | a b c d | d c b a).
inline int reflect_index(int i, int n) {
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return i;
}

inline std::vector<double> gaussian_filter(const std::vector<double>& img, int h, int w) {
  const auto k = ssim_window();
  std::vector<double> tmp(img.size()), out(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int j = 0; j < 11; ++j) s += k[j] * img[y * w + reflect_index(x + j - 5, w)];
      tmp[y * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int j = 0; j < 11; ++j) s += k[j] * tmp[reflect_index(y + j - 5, h) * w + x];
      out[y * w + x] = s;
    }
  return out;
}

inline std::vector<double> channel_mean(const std::vector<double>& rgb, std::size_t channels) {
  std::vector<double> g(rgb.size() / channels);
  for (std::size_t i = 0; i < g.size(); ++i) {
    double s = 0;
    for (std::size_t c = 0; c < channels; ++c) s += rgb[i * channels + c];
    g[i] = s / double(channels);
  }
  return g;
}

}  // namespace detail

/// Mean local SSIM of two single-channel images (Gaussian window 11,
/// sigma 1.5, K1 0.01, K2 0.03, dynamic range 1, population statistics,
/// symmetric boundary reflection, 5-pixel border excluded from the mean).
inline double ssim_gray(const std::vector<double>& a, const std::vector<double>& b, int h, int w) {
  if (a.size() != b.size() || a.size() != std::size_t(h) * w) throw DimensionError("ssim: image sizes differ");
  if (h < 11 || w < 11) throw DimensionError("ssim: images must be at least 11 x 11");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) aa[i] = a[i] * a[i], bb[i] = b[i] * b[i], ab[i] = a[i] * b[i];
  const auto ma = detail::gaussian_filter(a, h, w), mb = detail::gaussian_filter(b, h, w);
  const auto maa = detail::gaussian_filter(aa, h, w), mbb = detail::gaussian_filter(bb, h, w),
             mab = detail::gaussian_filter(ab, h, w);
  double sum = 0;
  std::size_t count = 0;
  for (int y = 5; y < h - 5; ++y)
    for (int x = 5; x < w - 5; ++x) {
      const std::size_t i = std::size_t(y) * w + x;
      const double va = maa[i] - ma[i] * ma[i], vb = mbb[i] - mb[i] * mb[i], cov = mab[i] - ma[i] * mb[i];
      sum += ((2 * ma[i] * mb[i] + c1) * (2 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
      ++count;
    }
  return sum / double(count);
}

/// SSIM of two RGB images [H x W x 3] after averaging channels.
inline double ssim(const std::vector<double>& a, const std::vector<double>& b, int h, int w) {
  if (a.size() != b.size() || a.size() != std::size_t(h) * w * 3) throw DimensionError("ssim: image sizes differ");
  return ssim_gray(detail::channel_mean(a, 3), detail::channel_mean(b, 3), h, w);
}

/// Pyramid-L1 perceptual stand-in on plain RGB buffers.
inline double perceptual_proxy(const std::vector<double>& a, const std::vector<double>& b, int h, int w) {
  NoGradGuard ng;
  const Shape s{std::size_t(h), std::size_t(w), 3};
  return pyramid_l1(Tensor<double>::from(s, a), Tensor<double>::from(s, b)).item();
}

namespace detail {

/// g minus its separable 5-tap binomial blur (edges replicated).
inline std::vector<double> high_pass(const std::vector<double>& g, int h, int w) {
  constexpr double k[5] = {1 / 16.0, 4 / 16.0, 6 / 16.0, 4 / 16.0, 1 / 16.0};
  std::vector<double> tmp(g.size()), out(g.size());
  auto cl = [](int i, int n) { return std::clamp(i, 0, n - 1); };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int j = 0; j < 5; ++j) s += k[j] * g[y * w + cl(x + j - 2, w)];
      tmp[y * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int j = 0; j < 5; ++j) s += k[j] * tmp[cl(y + j - 2, h) * w + x];
      out[y * w + x] = g[y * w + x] - s;
    }
  return out;
}

}  // namespace detail

/// Ghost-face statistic: |normalized cross-correlation| between the
/// high-pass greyscale of a back-view render (mirrored left-right so pixels
/// align with the front view) and of the front-view template, over the
/// face-region pixels of the front view. 0 when either side is flat.
inline double ghost_face_correlation(const std::vector<double>& back_rgb, const std::vector<double>& front_rgb,
                                     const std::vector<std::uint8_t>& face, int res) {
  const std::size_t n = std::size_t(res) * res;
  if (back_rgb.size() != 3 * n || front_rgb.size() != 3 * n || face.size() != n) {
    throw DimensionError("ghost_face_correlation: image sizes differ");
  }
  auto back = detail::channel_mean(back_rgb, 3);
  std::vector<double> mirrored(n);
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) mirrored[y * res + x] = back[y * res + (res - 1 - x)];
  const auto hb = detail::high_pass(mirrored, res, res);
  const auto hf = detail::high_pass(detail::channel_mean(front_rgb, 3), res, res);
  double mb = 0, mf = 0, cnt = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (face[i]) mb += hb[i], mf += hf[i], cnt += 1;
  if (cnt < 2) return 0.0;
  mb /= cnt, mf /= cnt;
  double sbf = 0, sbb = 0, sff = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (face[i]) {
      const double db = hb[i] - mb, df = hf[i] - mf;
      sbf += db * df, sbb += db * db, sff += df * df;
    }
  if (sbb < 1e-20 || sff < 1e-20) return 0.0;
  return std::abs(sbf) / std::sqrt(sbb * sff);
}

struct ViewMetrics {
  std::string name;
  double psnr = 0, ssim = 0, lpips_proxy = 0;
};

struct MetricReport {
  std::vector<ViewMetrics> views;

  double mean_psnr() const { return mean_of(&ViewMetrics::psnr); }
  double mean_ssim() const { return mean_of(&ViewMetrics::ssim); }
  double mean_lpips_proxy() const { return mean_of(&ViewMetrics::lpips_proxy); }

  const ViewMetrics* find(const std::string& name) const {
    for (const auto& v : views)
      if (v.name == name) return &v;
    return nullptr;
  }

 private:
  double mean_of(double ViewMetrics::*f) const {
    if (views.empty()) return 0;
    double s = 0;
    for (const auto& v : views) s += v.*f;
    return s / double(views.size());
  }
};

inline ViewMetrics compare_views(const std::string& name, const std::vector<double>& pred,
                                 const std::vector<double>& gt, int res) {
  return {name, psnr(pred, gt), ssim(pred, gt, res, res), perceptual_proxy(pred, gt, res, res)};
}

}  // namespace nova
