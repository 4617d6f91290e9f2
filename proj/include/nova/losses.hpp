#pragma once

// Reconstruction, adversarial and density-smoothness objectives.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nova/diffcore.hpp"
#include "nova/image_ops.hpp"
#include "nova/render.hpp"
#include "nova/rng.hpp"

namespace nova {

struct LossWeights {
  double lpips = 20.0;
  double l1 = 4.0;
  double mask = 1.0;
  double depth = 1000.0;
  double reg = 0.1;
  double r1 = 5.0;

  void validate() const {
    for (double w : {lpips, l1, mask, depth, reg, r1}) {
      if (!(w >= 0)) throw ConfigError("loss weights must be non-negative");
    }
  }
};

inline constexpr double kDensityPerturbationStd = 0.04;

/// Image-to-image perceptual distance, pluggable.
template <class Real>
using PerceptualMetric = std::function<Tensor<Real>(const Tensor<Real>&, const Tensor<Real>&)>;

/// Perceptual stand-in: mean absolute difference averaged over the three
/// levels of a Gaussian pyramid (full, 1/2, 1/4 resolution). This is not a
/// learned metric.
template <class Real>
Tensor<Real> pyramid_l1(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "perceptual_distance");
  detail::require_rank(a, 3, "perceptual_distance");
  std::vector<Tensor<Real>> levels;
  Tensor<Real> x = a, y = b;
  for (int l = 0; l < 3; ++l) {
    levels.push_back(mean(abs(sub(x, y))));
    if (l < 2) {
      x = pyr_down(x);
      y = pyr_down(y);
    }
  }
  return scale(add_n(levels), Real(1) / Real(3));
}

template <class Real>
Tensor<Real> perceptual_distance(const Tensor<Real>& a, const Tensor<Real>& b) {
  return pyramid_l1(a, b);
}

/// Rendered (already upsampled) images of one view, [H x W x C].
template <class Real>
struct ViewPrediction {
  Tensor<Real> rgb;    // [H x W x 3]
  Tensor<Real> mask;   // [H x W x 1]
  Tensor<Real> depth;  // [H x W x 1]
};

/// Ground truth of the same pixels. Values only; never differentiated.
template <class Real>
struct ViewTarget {
  Tensor<Real> rgb, mask, depth;
};

template <class Real>
struct ReconstructionTerms {
  Tensor<Real> lpips, l1, mask, depth;  // unweighted
  Tensor<Real> total;                   // weighted sum
};

template <class Real>
ReconstructionTerms<Real> reconstruction_loss(const ViewPrediction<Real>& pred, const ViewTarget<Real>& gt,
                                              const LossWeights& w,
                                              const PerceptualMetric<Real>& metric = pyramid_l1<Real>) {
  detail::require_same_shape(pred.rgb, gt.rgb, "reconstruction_loss(rgb)");
  detail::require_same_shape(pred.mask, gt.mask, "reconstruction_loss(mask)");
  detail::require_same_shape(pred.depth, gt.depth, "reconstruction_loss(depth)");
  ReconstructionTerms<Real> t;
  t.lpips = metric(pred.rgb, gt.rgb);
  t.l1 = mean(abs(sub(pred.rgb, gt.rgb)));
  t.mask = mean(square(sub(pred.mask, gt.mask)));
  // depth only where the ground truth is foreground
  std::vector<Real> fg(gt.mask.size());
  std::size_t count = 0;
  for (std::size_t i = 0; i < fg.size(); ++i) count += (fg[i] = gt.mask[i] > Real(0.5) ? Real(1) : Real(0)) > 0;
  if (count == 0) {
    t.depth = Tensor<Real>::scalar(0);
  } else {
    auto fgt = Tensor<Real>::from(gt.mask.shape(), std::move(fg));
    t.depth = scale(sum(mul(square(sub(pred.depth, gt.depth)), fgt)), Real(1) / Real(count));
  }
  t.total = add_n<Real>({scale(t.lpips, Real(w.lpips)), scale(t.l1, Real(w.l1)), scale(t.mask, Real(w.mask)),
                         scale(t.depth, Real(w.depth))});
  return t;
}

// ---------------------------------------------------------------------------
// Discriminator over the 7-channel stack (I^{r+} | I^+ | M^+).

inline constexpr std::size_t kDiscriminatorInput = 7;
inline constexpr double kDiscriminatorSlope = 0.2;

template <class Real>
struct DiscriminatorParams {
  struct Layer {
    Tensor<Real> w, b;  // 3x3, stride 2, zero padding 1
  };
  std::vector<Layer> layers;
  Tensor<Real> head_w;  // [C_last x 1]
  Tensor<Real> head_b;  // [1]

  std::size_t in_channels() const { return layers.empty() ? head_w.dim(0) : layers.front().w.dim(2); }

  static DiscriminatorParams random(Rng& rng, std::vector<std::size_t> widths = {16, 32}) {
    DiscriminatorParams d;
    std::size_t cin = kDiscriminatorInput;
    for (auto cout : widths) {
      std::vector<Real> v(9 * cin * cout);
      const double sd = std::sqrt(2.0 / double(9 * cin));
      for (auto& x : v) x = Real(rng.normal(0.0, sd));
      d.layers.push_back({Tensor<Real>::from({3, 3, cin, cout}, std::move(v), true), Tensor<Real>::zeros({cout}, true)});
      cin = cout;
    }
    std::vector<Real> h(cin);
    for (auto& x : h) x = Real(rng.normal(0.0, 1.0 / std::sqrt(double(cin))));
    d.head_w = Tensor<Real>::from({cin, 1}, std::move(h), true);
    d.head_b = Tensor<Real>::zeros({1}, true);
    return d;
  }

  /// A discriminator with no convolution layers: logit = mean pixel . v + b.
  static DiscriminatorParams linear(std::vector<Real> v, Real b = 0) {
    DiscriminatorParams d;
    const std::size_t n = v.size();
    d.head_w = Tensor<Real>::from({n, 1}, std::move(v), true);
    d.head_b = Tensor<Real>::from({1}, {b}, true);
    return d;
  }

  DiscriminatorParams detached() const {
    DiscriminatorParams d;
    for (const auto& l : layers) d.layers.push_back({l.w.detach(), l.b.detach()});
    d.head_w = head_w.detach();
    d.head_b = head_b.detach();
    return d;
  }

  std::vector<std::pair<std::string, Tensor<Real>>> named() const {
    std::vector<std::pair<std::string, Tensor<Real>>> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      out.emplace_back("disc.conv" + std::to_string(i) + ".w", layers[i].w);
      out.emplace_back("disc.conv" + std::to_string(i) + ".b", layers[i].b);
    }
    out.emplace_back("disc.head.w", head_w);
    out.emplace_back("disc.head.b", head_b);
    return out;
  }
};

/// Channel stack of H x W x C images.
template <class Real>
Tensor<Real> concat_channels(const std::vector<Tensor<Real>>& parts) {
  const std::size_t h = parts.front().dim(0), w = parts.front().dim(1);
  Tensor<Real> acc = parts.front().reshape({h * w, parts.front().dim(2)});
  for (std::size_t i = 1; i < parts.size(); ++i) {
    if (parts[i].dim(0) != h || parts[i].dim(1) != w) {
      throw DimensionError("concat_channels: " + shape_str(parts[i].shape()) + " vs " + shape_str(parts[0].shape()));
    }
    acc = concat_cols(acc, parts[i].reshape({h * w, parts[i].dim(2)}));
  }
  return acc.reshape({h, w, acc.dim(1)});
}

template <class Real>
Tensor<Real> discriminator_input(const Tensor<Real>& raw_up, const Tensor<Real>& final_rgb, const Tensor<Real>& mask_up) {
  return concat_channels<Real>({raw_up, final_rgb, mask_up});
}

namespace detail {

template <class Real>
struct DiscriminatorTrace {
  Tensor<Real> logit;                          // [1 x 1]
  std::vector<Tensor<Real>> pre_activations;   // per conv layer
  std::vector<Shape> layer_inputs;             // spatial shape entering each conv
};

template <class Real>
DiscriminatorTrace<Real> run_discriminator(const DiscriminatorParams<Real>& d, const Tensor<Real>& x) {
  if (x.rank() != 3 || x.dim(2) != d.in_channels()) {
    throw DimensionError("discriminator: expected H x W x " + std::to_string(d.in_channels()) + ", got " +
                         shape_str(x.shape()));
  }
  DiscriminatorTrace<Real> tr;
  Tensor<Real> h = x;
  for (const auto& l : d.layers) {
    tr.layer_inputs.push_back(h.shape());
    auto z = conv2d(h, l.w, l.b, 2, 1, PadMode::zero);
    tr.pre_activations.push_back(z);
    h = leaky_relu(z, Real(kDiscriminatorSlope));
  }
  const std::size_t np = h.dim(0) * h.dim(1), c = h.dim(2);
  auto avg = Tensor<Real>::full({1, np}, Real(1) / Real(np));
  auto pooled = matmul(avg, h.reshape({np, c}));
  tr.logit = linear(pooled, d.head_w, d.head_b);
  return tr;
}

}  // namespace detail

/// Discriminator logit for one H x W x 7 input, [1 x 1].
template <class Real>
Tensor<Real> discriminator_logit(const DiscriminatorParams<Real>& d, const Tensor<Real>& x) {
  return detail::run_discriminator(d, x).logit;
}

/// Gradient of the logit with respect to the input, built from
/// differentiable ops so penalties on it can be back-propagated into d.
/// Leaky-ReLU derivatives enter as constants (their own derivative is zero
/// almost everywhere).
template <class Real>
Tensor<Real> discriminator_input_gradient(const DiscriminatorParams<Real>& d, const Tensor<Real>& x) {
  Tensor<Real> xin = x.detach();
  detail::DiscriminatorTrace<Real> tr;
  {
    NoGradGuard ng;
    tr = detail::run_discriminator(d, xin);
  }
  Shape top = d.layers.empty() ? x.shape() : tr.pre_activations.back().shape();
  const std::size_t np = top[0] * top[1], c = top[2];
  auto ones = Tensor<Real>::full({np, 1}, Real(1) / Real(np));
  auto g = matmul(ones, transpose(d.head_w)).reshape(top);
  for (std::size_t li = d.layers.size(); li-- > 0;) {
    const auto& z = tr.pre_activations[li];
    std::vector<Real> slope(z.size());
    for (std::size_t i = 0; i < slope.size(); ++i) slope[i] = z[i] > 0 ? Real(1) : Real(kDiscriminatorSlope);
    auto gz = mul(g, Tensor<Real>::from(z.shape(), std::move(slope)));
    const auto& in = tr.layer_inputs[li];
    g = conv2d_transpose(gz, d.layers[li].w, in[0], in[1], 2, 1, PadMode::zero);
  }
  (void)c;
  return g;
}

template <class Real>
Tensor<Real> mean_logit(const DiscriminatorParams<Real>& d, const std::vector<Tensor<Real>>& inputs) {
  std::vector<Tensor<Real>> l;
  for (const auto& x : inputs) l.push_back(discriminator_logit(d, x).reshape({}));
  return scale(add_n(l), Real(1) / Real(inputs.size()));
}

/// -mean D(fake), with the discriminator held fixed.
template <class Real>
Tensor<Real> generator_loss(const DiscriminatorParams<Real>& d, const std::vector<Tensor<Real>>& fake_inputs) {
  return scale(mean_logit(d.detached(), fake_inputs), Real(-1));
}

template <class Real>
struct DiscriminatorTerms {
  Tensor<Real> fake, real, r1, total;
};

/// mean D(fake) - mean D(real) + (r1 / 2) mean ||grad_x D(real)||^2. Fake
/// inputs are detached so only d receives gradients.
template <class Real>
DiscriminatorTerms<Real> discriminator_loss(const DiscriminatorParams<Real>& d,
                                            const std::vector<Tensor<Real>>& fake_inputs,
                                            const std::vector<Tensor<Real>>& real_inputs, const LossWeights& w) {
  std::vector<Tensor<Real>> fakes;
  for (const auto& f : fake_inputs) fakes.push_back(f.detach());
  DiscriminatorTerms<Real> t;
  t.fake = mean_logit(d, fakes);
  t.real = mean_logit(d, real_inputs);
  std::vector<Tensor<Real>> pen;
  for (const auto& r : real_inputs) pen.push_back(sum(square(discriminator_input_gradient(d, r))));
  t.r1 = scale(add_n(pen), Real(w.r1 / 2.0) / Real(real_inputs.size()));
  t.total = add(sub(t.fake, t.real), t.r1);
  return t;
}

// ---------------------------------------------------------------------------

/// Density at world points, [N x 1].
template <class Real>
using DensityField = std::function<Tensor<Real>(const Tensor<Real>&)>;

/// Density of the fitted field at isolated points: zero viewing direction,
/// and each point forms its own attention set.
template <class Real>
Tensor<Real> field_density(const FieldModel<Real>& m, const Tensor<Real>& points) {
  auto dirs = Tensor<Real>::zeros({points.dim(0), 3});
  return decode_points(m.decoder, field_features(m, points, dirs, 1)).sigma;
}

/// w.reg * mean |sigma(c) - sigma(c + eps)|, eps ~ N(0, std^2) drawn per
/// probe and per coordinate from `seed`.
template <class Real>
Tensor<Real> density_smoothness_loss(const DensityField<Real>& sigma, const Tensor<Real>& probes, std::uint64_t seed,
                                     const LossWeights& w, double perturbation_std = kDensityPerturbationStd) {
  if (probes.rank() != 2 || probes.dim(1) != 3) {
    throw DimensionError("density_smoothness_loss: probes must be N x 3, got " + shape_str(probes.shape()));
  }
  Rng rng(seed);
  std::vector<Real> moved(probes.data().begin(), probes.data().end());
  for (auto& x : moved) x += Real(perturbation_std * rng.normal());
  auto a = sigma(probes);
  auto b = sigma(Tensor<Real>::from(probes.shape(), std::move(moved)));
  return scale(mean(abs(sub(a, b))), Real(w.reg));
}

template <class Real>
struct LossComponents {
  Tensor<Real> rec, g, d, reg;
};

/// L_rec + L_G + L_D + L_reg. Undefined components count as zero.
template <class Real>
Tensor<Real> total_loss(const LossComponents<Real>& c) {
  std::vector<Tensor<Real>> terms;
  for (const auto* t : {&c.rec, &c.g, &c.d, &c.reg})
    if (t->defined()) terms.push_back(t->reshape({}));
  return add_n(terms);
}

}  // namespace nova
