#pragma once

// Direction-aware fusion of front and back tri-plane features.
//
// Q comes from the viewing direction, K and V from the front/back features:
//   Q = dirs * Wq + bq,  K = F * Wk + bk,  V = F * Wv + bv,  F = [f_front | f_back]
//   F_o = softmax(Q K^T / sqrt(d)) V Wl^T
// Two readings of the attention set are provided. `as_written` attends over
// the N samples of one ray (an N x N matrix per ray). `per_point` gives each
// sample two tokens, its front half (f_front | 0) and back half (0 | f_back),
// so the softmax is a per-point front/back weighting driven by direction.

#include <cmath>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "nova/diffcore.hpp"
#include "nova/rng.hpp"

namespace nova {

inline constexpr std::size_t kFusionWidth = 32;

enum class FusionMode { as_written, per_point, concat };

inline const char* to_string(FusionMode m) {
  switch (m) {
    case FusionMode::as_written:
      return "as_written";
    case FusionMode::per_point:
      return "per_point";
    case FusionMode::concat:
      return "concat";
  }
  return "?";
}

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "as_written") return FusionMode::as_written;
  if (s == "per_point") return FusionMode::per_point;
  if (s == "concat") return FusionMode::concat;
  throw ConfigError("unknown fusion mode '" + s + "' (expected as_written, per_point or concat)");
}

template <class Real>
struct FusionParams {
  Tensor<Real> wq, bq;  // [3 x 32], [32]
  Tensor<Real> wk, bk;  // [32 x 32], [32]
  Tensor<Real> wv, bv;  // [32 x 32], [32]
  Tensor<Real> wl;      // [32 x 32]

  Real key_width() const { return Real(wk.dim(1)); }

  static FusionParams random(Rng& rng) {
    auto mat = [&](std::size_t r, std::size_t c) {
      std::vector<Real> v(r * c);
      const double sd = 1.0 / std::sqrt(double(r));
      for (auto& x : v) x = Real(rng.normal(0.0, sd));
      return Tensor<Real>::from({r, c}, std::move(v), true);
    };
    const std::size_t w = kFusionWidth;
    FusionParams p;
    p.wq = mat(3, w);
    p.bq = Tensor<Real>::zeros({w}, true);
    p.wk = mat(w, w);
    p.bk = Tensor<Real>::zeros({w}, true);
    p.wv = mat(w, w);
    p.bv = Tensor<Real>::zeros({w}, true);
    p.wl = mat(w, w);
    return p;
  }

  std::vector<std::pair<std::string, Tensor<Real>>> named() const {
    return {{"fusion.wq", wq}, {"fusion.bq", bq}, {"fusion.wk", wk}, {"fusion.bk", bk},
            {"fusion.wv", wv}, {"fusion.bv", bv}, {"fusion.wl", wl}};
  }
};

/// Rescales rows of dirs [N x 3] to unit length, warning once when any row
/// needed it. All-zero rows pass through unchanged.
template <class Real>
Tensor<Real> unit_directions(const Tensor<Real>& dirs) {
  std::vector<Real> d(dirs.data().begin(), dirs.data().end());
  bool changed = false;
  for (std::size_t i = 0; i < d.size(); i += 3) {
    const Real n = std::sqrt(d[i] * d[i] + d[i + 1] * d[i + 1] + d[i + 2] * d[i + 2]);
    if (n > 0 && std::abs(n - 1) > Real(1e-6)) {
      d[i] /= n, d[i + 1] /= n, d[i + 2] /= n;
      changed = true;
    }
  }
  if (!changed) return dirs;
  static bool warned = false;
  if (!warned) {
    std::clog << "warning: direction_aware_attention normalized non-unit ray directions\n";
    warned = true;
  }
  return Tensor<Real>::from(dirs.shape(), std::move(d));
}

template <class Real>
struct FusedFeatures {
  Tensor<Real> f_o;  // [N x 32]
};

namespace detail {

template <class Real>
struct PerPointTokens {
  Tensor<Real> v_front, v_back, scores;  // scores [N x 2] before softmax
};

template <class Real>
PerPointTokens<Real> per_point_tokens(const FusionParams<Real>& p, const Tensor<Real>& f_front,
                                      const Tensor<Real>& f_back, const Tensor<Real>& dirs) {
  const std::size_t c = f_front.dim(1);
  auto q = linear(dirs, p.wq, p.bq);
  auto wk_f = slice_rows(p.wk, 0, c), wk_b = slice_rows(p.wk, c, 2 * c);
  auto wv_f = slice_rows(p.wv, 0, c), wv_b = slice_rows(p.wv, c, 2 * c);
  auto k_f = linear(f_front, wk_f, p.bk);
  auto k_b = linear(f_back, wk_b, p.bk);
  const Real inv = Real(1) / std::sqrt(p.key_width());
  auto scores = scale(concat_cols(row_dot(q, k_f), row_dot(q, k_b)), inv);
  return {linear(f_front, wv_f, p.bv), linear(f_back, wv_b, p.bv), scores};
}

template <class Real>
void check_fusion_inputs(const Tensor<Real>& f_front, const Tensor<Real>& f_back, const Tensor<Real>& dirs) {
  detail::require_rank(f_front, 2, "fusion(f_front)");
  detail::require_same_shape(f_front, f_back, "fusion(f_front, f_back)");
  if (dirs.rank() != 2 || dirs.dim(1) != 3 || dirs.dim(0) != f_front.dim(0)) {
    throw DimensionError("fusion: dirs " + shape_str(dirs.shape()) + " vs features " + shape_str(f_front.shape()));
  }
}

}  // namespace detail

/// Channel concatenation baseline without any mixing.
template <class Real>
Tensor<Real> concat_fusion(const Tensor<Real>& f_front, const Tensor<Real>& f_back) {
  if (f_front.rank() != 2 || f_back.rank() != 2 || f_front.dim(0) != f_back.dim(0)) {
    throw DimensionError("concat_fusion: " + shape_str(f_front.shape()) + " vs " + shape_str(f_back.shape()));
  }
  return concat_cols(f_front, f_back);
}

/// `block` is the attention set size for as_written (samples per ray); 0
/// means all N rows form one set.
template <class Real>
FusedFeatures<Real> direction_aware_attention(const FusionParams<Real>& p, const Tensor<Real>& f_front,
                                              const Tensor<Real>& f_back, const Tensor<Real>& dirs_in,
                                              FusionMode mode, std::size_t block = 0) {
  detail::check_fusion_inputs(f_front, f_back, dirs_in);
  const std::size_t n = f_front.dim(0);
  if (mode == FusionMode::concat) return {concat_fusion(f_front, f_back)};
  if (n == 0) return {Tensor<Real>::zeros({0, p.wl.dim(0)})};
  const auto dirs = unit_directions(dirs_in);
  if (mode == FusionMode::as_written) {
    const auto f = concat_cols(f_front, f_back);
    auto q = linear(dirs, p.wq, p.bq);
    auto k = linear(f, p.wk, p.bk);
    auto v = linear(f, p.wv, p.bv);
    auto av = block_attention(q, k, v, block == 0 ? n : block, Real(1) / std::sqrt(p.key_width()));
    return {matmul(av, transpose(p.wl))};
  }
  auto t = detail::per_point_tokens(p, f_front, f_back, dirs);
  auto a = softmax_rows(t.scores);
  auto mixed = add(mul_col(t.v_front, slice_cols(a, 0, 1)), mul_col(t.v_back, slice_cols(a, 1, 2)));
  return {matmul(mixed, transpose(p.wl))};
}

/// Attention rows for inspection: [N x 2] (front, back) weights for
/// per_point, [N x block] for as_written. Empty for concat.
template <class Real>
std::vector<Real> attention_weights(const FusionParams<Real>& p, const Tensor<Real>& f_front,
                                    const Tensor<Real>& f_back, const Tensor<Real>& dirs_in, FusionMode mode,
                                    std::size_t block = 0) {
  detail::check_fusion_inputs(f_front, f_back, dirs_in);
  NoGradGuard ng;
  const std::size_t n = f_front.dim(0);
  if (mode == FusionMode::concat || n == 0) return {};
  const auto dirs = unit_directions(dirs_in);
  if (mode == FusionMode::as_written) {
    const auto f = concat_cols(f_front, f_back);
    return block_attention_weights(linear(dirs, p.wq, p.bq), linear(f, p.wk, p.bk), block == 0 ? n : block,
                                   Real(1) / std::sqrt(p.key_width()));
  }
  auto a = softmax_rows(detail::per_point_tokens(p, f_front, f_back, dirs).scores);
  return {a.data().begin(), a.data().end()};
}

}  // namespace nova
