#include <gtest/gtest.h>

#include "nova/gradcheck.hpp"
#include "nova/image_ops.hpp"
#include "test_util.hpp"

using namespace nova;
using nova::testing::probe;
using nova::testing::randn;
using T = Tensor<double>;

namespace {

double naive_conv(const T& x, const T& w, const T& b, std::size_t stride, std::size_t pad, PadMode mode,
                  std::size_t oi, std::size_t oj, std::size_t co) {
  const long h = long(x.dim(0)), wd = long(x.dim(1));
  const std::size_t cin = x.dim(2), cout = w.dim(3);
  double s = b.defined() ? b[co] : 0.0;
  for (std::size_t a = 0; a < w.dim(0); ++a)
    for (std::size_t c = 0; c < w.dim(1); ++c) {
      long i = long(oi * stride + a) - long(pad), j = long(oj * stride + c) - long(pad);
      if (mode == PadMode::replicate) {
        i = std::clamp(i, 0L, h - 1);
        j = std::clamp(j, 0L, wd - 1);
      } else if (i < 0 || j < 0 || i >= h || j >= wd) {
        continue;
      }
      for (std::size_t ci = 0; ci < cin; ++ci)
        s += x[(i * wd + j) * cin + ci] * w[((a * w.dim(1) + c) * cin + ci) * cout + co];
    }
  return s;
}

}  // namespace

TEST(Conv2d, MatchesNaiveOracle) {
  Rng rng(1);
  for (auto mode : {PadMode::zero, PadMode::replicate})
    for (std::size_t stride : {1u, 2u}) {
      auto x = randn({7, 6, 3}, rng), w = randn({3, 3, 3, 4}, rng), b = randn({4}, rng);
      auto y = conv2d(x, w, b, stride, 1, mode);
      for (std::size_t i = 0; i < y.dim(0); ++i)
        for (std::size_t j = 0; j < y.dim(1); ++j)
          for (std::size_t c = 0; c < 4; ++c)
            EXPECT_NEAR(y[(i * y.dim(1) + j) * 4 + c], naive_conv(x, w, b, stride, 1, mode, i, j, c), 1e-12);
    }
}

TEST(Conv2d, ChannelMismatchThrows) {
  EXPECT_THROW(conv2d(T::zeros({4, 4, 2}), T::zeros({3, 3, 3, 1}), T(), 1, 1, PadMode::zero), DimensionError);
}

TEST(Conv2dTranspose, IsTheAdjoint) {
  Rng rng(2);
  for (auto mode : {PadMode::zero, PadMode::replicate})
    for (std::size_t stride : {1u, 2u}) {
      auto x = randn({8, 8, 2}, rng, 1.0, false), w = randn({3, 3, 2, 3}, rng, 1.0, false);
      auto y = conv2d(x, w, T(), stride, 1, mode);
      auto g = randn(y.shape(), rng, 1.0, false);
      auto xt = conv2d_transpose(g, w, 8, 8, stride, 1, mode);
      double lhs = 0, rhs = 0;
      for (std::size_t i = 0; i < y.size(); ++i) lhs += y[i] * g[i];
      for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * xt[i];
      EXPECT_NEAR(lhs, rhs, 1e-10);
    }
}

TEST(ImageOps, Gradients) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    auto x = randn({6, 6, 2}, rng), w = randn({3, 3, 2, 2}, rng), b = randn({2}, rng);
    auto lg = randn({6, 6, 1}, rng);
    EXPECT_LT(grad_check<double>([&] { return probe(conv2d(x, w, b, 2, 1, PadMode::zero), seed); }, {x, w, b}, 1e-6),
              1e-4);
    auto g = randn({3, 3, 2}, rng);
    EXPECT_LT(grad_check<double>([&] { return probe(conv2d_transpose(g, w, 6, 6, 2, 1, PadMode::zero), seed); },
                                 {g, w}, 1e-6),
              1e-4);
    EXPECT_LT(grad_check<double>([&] { return probe(resize_bilinear(x, 9, 4), seed); }, {x}, 1e-6), 1e-4);
    EXPECT_LT(grad_check<double>([&] { return probe(avg_pool2(x), seed); }, {x}, 1e-6), 1e-4);
    EXPECT_LT(grad_check<double>([&] { return probe(pyr_down(x), seed); }, {x}, 1e-6), 1e-4);
    EXPECT_LT(grad_check<double>([&] { return probe(attention_pool2(x, lg), seed); }, {x, lg}, 1e-6), 1e-4);
  }
}

TEST(ImageOps, ConstantFixedPoints) {
  auto x = T::full({8, 8, 2}, 0.37);
  for (auto y : {resize_bilinear(x, 5, 11), avg_pool2(x), pyr_down(x), attention_pool2(x, T::zeros({8, 8, 1}))})
    for (auto v : y.data()) EXPECT_NEAR(v, 0.37, 1e-15);
}

TEST(ImageOps, AvgPoolAndAttentionPool) {
  Rng rng(3);
  auto x = randn({4, 4, 1}, rng, 1.0, false);
  auto p = avg_pool2(x);
  EXPECT_NEAR(p[0], 0.25 * (x[0] + x[1] + x[4] + x[5]), 1e-15);
  // uniform logits reduce attention pooling to average pooling
  auto a = attention_pool2(x, T::full({4, 4, 1}, 2.0));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a[i], p[i], 1e-15);
  // one dominant logit selects its pixel
  std::vector<double> l(16, 0.0);
  l[5] = 60.0;
  auto s = attention_pool2(x, T::from({4, 4, 1}, l));
  EXPECT_NEAR(s[0], x[5], 1e-12);
}

TEST(ImageOps, ResizeIdentityAndDoubling) {
  Rng rng(4);
  auto x = randn({3, 3, 1}, rng, 1.0, false);
  auto same = resize_bilinear(x, 3, 3);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(same[i], x[i]);
  auto up = resize_bilinear(x, 6, 6);
  // output (1,1) samples input coordinate (0.25, 0.25)
  const double ref = 0.75 * 0.75 * x[0] + 0.75 * 0.25 * x[1] + 0.25 * 0.75 * x[3] + 0.25 * 0.25 * x[4];
  EXPECT_NEAR(up[1 * 6 + 1], ref, 1e-15);
}
