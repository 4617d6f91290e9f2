#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "nova/fusion.hpp"
#include "nova/gradcheck.hpp"
#include "test_util.hpp"

using namespace nova;
using nova::testing::probe;
using nova::testing::randn;
using T = Tensor<double>;
using Mat = std::vector<std::vector<double>>;

namespace {

Mat rows(const T& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t[i * t.dim(1) + j];
  return m;
}

Mat affine(const Mat& x, const T& w, const T& b) {
  const std::size_t k = w.dim(0), n = w.dim(1);
  Mat y(x.size(), std::vector<double>(n));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = b.defined() ? b[j] : 0.0;
      for (std::size_t a = 0; a < k; ++a) s += x[i][a] * w[a * n + j];
      y[i][j] = s;
    }
  return y;
}

Mat project_out(const Mat& x, const T& wl) {
  const std::size_t n = wl.dim(0);
  Mat y(x.size(), std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t o = 0; o < n; ++o)
      for (std::size_t a = 0; a < wl.dim(1); ++a) y[i][o] += x[i][a] * wl[o * wl.dim(1) + a];
  return y;
}

Mat concat(const T& a, const T& b) {
  auto x = rows(a), y = rows(b);
  for (std::size_t i = 0; i < x.size(); ++i) x[i].insert(x[i].end(), y[i].begin(), y[i].end());
  return x;
}

T unit_dirs(std::size_t n, Rng& rng) {
  std::vector<double> d(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    double x = rng.normal(0, 1), y = rng.normal(0, 1), z = rng.normal(0, 1), s = std::sqrt(x * x + y * y + z * z);
    d[3 * i] = x / s, d[3 * i + 1] = y / s, d[3 * i + 2] = z / s;
  }
  return T::from({n, 3}, d);
}

struct Inputs {
  FusionParams<double> p;
  T ff, fb, dirs;
};

Inputs make_inputs(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  auto p = FusionParams<double>::random(rng);
  for (auto* b : {&p.bq, &p.bk, &p.bv})
    for (auto& v : b->mutable_data()) v = rng.normal(0, 0.3);
  return {p, randn({n, 16}, rng), randn({n, 16}, rng), unit_dirs(n, rng)};
}

void expect_rows_near(const T& got, const Mat& want, double tol) {
  ASSERT_EQ(got.dim(0), want.size());
  for (std::size_t i = 0; i < want.size(); ++i)
    for (std::size_t j = 0; j < want[i].size(); ++j) EXPECT_NEAR(got[i * want[i].size() + j], want[i][j], tol);
}

}  // namespace

TEST(Fusion, SingleTokenAsWritten) {
  auto in = make_inputs(1, 1);
  auto out = direction_aware_attention(in.p, in.ff, in.fb, in.dirs, FusionMode::as_written).f_o;
  expect_rows_near(out, project_out(affine(concat(in.ff, in.fb), in.p.wv, in.p.bv), in.p.wl), 1e-10);
}

TEST(Fusion, ZeroQueryGivesEqualWeights) {
  auto in = make_inputs(5, 2);
  in.p.wq = T::zeros({3, 32});
  in.p.bq = T::zeros({32});
  auto out = direction_aware_attention(in.p, in.ff, in.fb, in.dirs, FusionMode::per_point).f_o;
  auto wvf = slice_rows(in.p.wv, 0, 16), wvb = slice_rows(in.p.wv, 16, 32);
  auto vf = affine(rows(in.ff), wvf, in.p.bv), vb = affine(rows(in.fb), wvb, in.p.bv);
  Mat half(vf.size(), std::vector<double>(32));
  for (std::size_t i = 0; i < vf.size(); ++i)
    for (std::size_t j = 0; j < 32; ++j) half[i][j] = 0.5 * (vf[i][j] + vb[i][j]);
  expect_rows_near(out, project_out(half, in.p.wl), 1e-10);
}

TEST(Fusion, TwoPointAsWrittenMatchesCompositionOracle) {
  auto in = make_inputs(2, 3);
  auto out = direction_aware_attention(in.p, in.ff, in.fb, in.dirs, FusionMode::as_written).f_o;
  const auto f = concat(in.ff, in.fb);
  const auto q = affine(rows(in.dirs), in.p.wq, in.p.bq), k = affine(f, in.p.wk, in.p.bk), v = affine(f, in.p.wv, in.p.bv);
  Mat av(2, std::vector<double>(32, 0.0));
  for (std::size_t i = 0; i < 2; ++i) {
    double s[2];
    for (std::size_t j = 0; j < 2; ++j) s[j] = std::inner_product(q[i].begin(), q[i].end(), k[j].begin(), 0.0) / std::sqrt(32.0);
    const double m = std::max(s[0], s[1]), e0 = std::exp(s[0] - m), e1 = std::exp(s[1] - m);
    for (std::size_t c = 0; c < 32; ++c) av[i][c] = (e0 * v[0][c] + e1 * v[1][c]) / (e0 + e1);
  }
  expect_rows_near(out, project_out(av, in.p.wl), 1e-10);
}

TEST(Fusion, AttentionRowsSumToOne) {
  auto in = make_inputs(12, 4);
  for (auto [mode, width] : {std::pair{FusionMode::per_point, 2u}, std::pair{FusionMode::as_written, 4u}}) {
    auto a = attention_weights(in.p, in.ff, in.fb, in.dirs, mode, 4);
    ASSERT_EQ(a.size(), 12u * width);
    for (std::size_t i = 0; i < 12; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < width; ++j) {
        EXPECT_GE(a[i * width + j], 0.0);
        s += a[i * width + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Fusion, PermutationEquivariance) {
  auto in = make_inputs(6, 5);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  auto permute = [&](const T& t) {
    const std::size_t c = t.dim(1);
    std::vector<double> v(t.size());
    for (std::size_t i = 0; i < perm.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) v[i * c + j] = t[perm[i] * c + j];
    return T::from(t.shape(), v);
  };
  for (auto mode : {FusionMode::per_point, FusionMode::as_written}) {
    auto a = direction_aware_attention(in.p, in.ff, in.fb, in.dirs, mode).f_o;
    auto b = direction_aware_attention(in.p, permute(in.ff), permute(in.fb), permute(in.dirs), mode).f_o;
    auto pa = permute(a);
    for (std::size_t i = 0; i < pa.size(); ++i) {
      if (mode == FusionMode::per_point) {
        EXPECT_EQ(b[i], pa[i]);
      } else {
        EXPECT_NEAR(b[i], pa[i], 1e-12);
      }
    }
  }
}

TEST(Fusion, PerPointOutputDependsOnlyOnItsOwnRow) {
  auto in = make_inputs(4, 6);
  auto a = direction_aware_attention(in.p, in.ff, in.fb, in.dirs, FusionMode::per_point).f_o;
  auto ff = in.ff.detach();
  ff.mutable_data()[0] += 1.0;
  auto b = direction_aware_attention(in.p, ff, in.fb, in.dirs, FusionMode::per_point).f_o;
  for (std::size_t i = 32; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Fusion, BlocksAreIndependent) {
  auto in = make_inputs(8, 7);
  auto whole = direction_aware_attention(in.p, in.ff, in.fb, in.dirs, FusionMode::as_written, 4).f_o;
  auto first = direction_aware_attention(in.p, slice_rows(in.ff, 0, 4), slice_rows(in.fb, 0, 4),
                                         slice_rows(in.dirs, 0, 4), FusionMode::as_written).f_o;
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_NEAR(whole[i], first[i], 1e-14);
}

TEST(Fusion, EmptyAndNonUnitInputs) {
  auto in = make_inputs(3, 8);
  auto empty = direction_aware_attention(in.p, T::zeros({0, 16}), T::zeros({0, 16}), T::zeros({0, 3}),
                                         FusionMode::per_point).f_o;
  EXPECT_EQ(empty.dim(0), 0u);
  auto scaled = scale(in.dirs, 3.0);
  auto a = direction_aware_attention(in.p, in.ff, in.fb, in.dirs, FusionMode::per_point).f_o;
  auto b = direction_aware_attention(in.p, in.ff, in.fb, scaled, FusionMode::per_point).f_o;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  EXPECT_THROW(direction_aware_attention(in.p, in.ff, T::zeros({2, 16}), in.dirs, FusionMode::per_point),
               DimensionError);
}

TEST(ConcatFusion, Examples) {
  auto z = concat_fusion(T::zeros({2, 16}), T::zeros({2, 16}));
  for (auto v : z.data()) EXPECT_EQ(v, 0.0);
  std::vector<double> a(16), b(16);
  std::iota(a.begin(), a.end(), 1.0);
  std::iota(b.begin(), b.end(), 17.0);
  auto c = concat_fusion(T::from({1, 16}, a), T::from({1, 16}, b));
  for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(c[i], double(i + 1));
  EXPECT_EQ(slice_cols(c, 0, 16)[15], 16.0);
  EXPECT_EQ(slice_cols(c, 16, 32)[0], 17.0);
  EXPECT_THROW(concat_fusion(T::zeros({2, 16}), T::zeros({3, 16})), DimensionError);
}

TEST(Fusion, Gradients) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto in = make_inputs(4, 100 + seed);
    for (auto mode : {FusionMode::per_point, FusionMode::as_written}) {
      auto f = [&] { return probe(direction_aware_attention(in.p, in.ff, in.fb, in.dirs, mode, 2).f_o, seed); };
      std::vector<T> ps{in.ff, in.fb};
      for (auto& [name, t] : in.p.named()) ps.push_back(t);
      EXPECT_LT(grad_check<double>(f, ps, 1e-6), 1e-4) << to_string(mode) << " seed " << seed;
    }
  }
}

TEST(Fusion, DirectionSensitivityAfterShortFit) {
  Rng rng(9);
  auto p = FusionParams<double>::random(rng);
  auto ff = randn({16, 16}, rng, 1.0, false), fb = randn({16, 16}, rng, 1.0, false);
  std::vector<double> d(48, 0.0);
  for (std::size_t i = 0; i < 16; ++i) d[3 * i + 2] = i < 8 ? -1.0 : 1.0;
  const auto dirs = T::from({16, 3}, d);
  // rays looking along -z see the back surface: push their weight onto the back token
  std::vector<double> target(32);
  for (std::size_t i = 0; i < 16; ++i) target[2 * i] = i < 8 ? 0.0 : 1.0, target[2 * i + 1] = 1.0 - target[2 * i];
  const auto tgt = T::from({16, 2}, target);
  std::vector<T> params;
  for (auto& [name, t] : p.named()) params.push_back(t);
  for (int it = 0; it < 200; ++it) {
    for (auto& t : params) t.zero_grad();
    auto s = detail::per_point_tokens(p, ff, fb, dirs).scores;
    sum(square(sub(softmax_rows(s), tgt))).backward();
    for (auto& t : params)
      if (t.has_grad())
        for (std::size_t i = 0; i < t.size(); ++i) t.mutable_data()[i] -= 0.05 * t.grad()[i];
  }
  const auto a = attention_weights(p, ff, fb, dirs, FusionMode::per_point);
  double back_minus = 0, back_plus = 0;
  for (std::size_t i = 0; i < 16; ++i) (i < 8 ? back_minus : back_plus) += a[2 * i + 1] / 8;
  EXPECT_GT(back_minus, back_plus);
  EXPECT_GT(back_minus, 0.9);
}

TEST(FusionMode, ParseRoundTrip) {
  for (auto m : {FusionMode::as_written, FusionMode::per_point, FusionMode::concat})
    EXPECT_EQ(parse_fusion_mode(to_string(m)), m);
  EXPECT_THROW(parse_fusion_mode("sum"), ConfigError);
}
