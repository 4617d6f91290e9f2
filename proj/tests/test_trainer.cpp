#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "nova/trainer.hpp"

using namespace nova;
namespace fs = std::filesystem;
using T = Tensor<double>;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("nova_test_trainer_" + name);
  fs::remove_all(p);
  return p;
}

const SceneDataset& tiny_dataset() {
  static const SceneDataset ds = [] {
    auto dir = scratch("data");
    return write_dataset(FigurineScene::procedural(kFixedSceneSeed), 7, false, dir, 16);
  }();
  return ds;
}

RunConfig tiny_config() {
  RunConfig c;
  c.resolution = 16;
  c.rays_per_view = 16;
  c.samples_per_ray = 8;
  c.plane_resolution = 8;
  c.reg_probes = 16;
  c.steps = 10;
  return c;
}

void expect_same_params(const FitState<double>& a, const FitState<double>& b) {
  const auto pa = a.generator_params(), pb = b.generator_params();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    ASSERT_EQ(pa[i].first, pb[i].first);
    for (std::size_t k = 0; k < pa[i].second.size(); ++k) ASSERT_EQ(pa[i].second[k], pb[i].second[k]) << pa[i].first;
  }
  const auto da = a.discriminator_params(), db = b.discriminator_params();
  ASSERT_EQ(da.size(), db.size());
  for (std::size_t i = 0; i < da.size(); ++i)
    for (std::size_t k = 0; k < da[i].second.size(); ++k) ASSERT_EQ(da[i].second[k], db[i].second[k]) << da[i].first;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParametersAndDecaysMoments) {
  std::vector<T> p{T::from({3}, {1.0, -2.0, 0.5}, true)};
  auto s = AdamState<double>::for_params(p, 0.1);
  s.m[0] = {0.0, 0.0, 0.0};
  adam_step(s, p, {{1.0, 1.0, 1.0}});
  const std::vector<double> after_first(p[0].data().begin(), p[0].data().end());
  const auto m = s.m[0];
  s.lr = 0.0;
  adam_step(s, p, {{}});
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(p[0][i], after_first[i]);
    EXPECT_NEAR(s.m[0][i], 0.9 * m[i], 1e-15);
  }
}

TEST(Adam, FirstStepClosedForm) {
  std::vector<T> p{T::from({3}, {0.0, 0.0, 0.0}, true)};
  const std::vector<double> g{0.3, -2.0, 1e-7};
  auto s = AdamState<double>::for_params(p, 0.0025);
  adam_step(s, p, {g});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[0][i], -0.0025 * g[i] / (std::abs(g[i]) + 1e-8), 1e-15);
}

TEST(Adam, ConstantGradientApproachesSignStep) {
  std::vector<T> p{T::from({2}, {0.0, 0.0}, true)};
  auto s = AdamState<double>::for_params(p, 0.01);
  for (int i = 0; i < 999; ++i) adam_step(s, p, {{0.7, -3.0}});
  const double a = p[0][0], b = p[0][1];
  adam_step(s, p, {{0.7, -3.0}});
  EXPECT_NEAR(p[0][0] - a, -0.01, 0.01 * 0.01);
  EXPECT_NEAR(p[0][1] - b, 0.01, 0.01 * 0.01);
}

TEST(Adam, ShapeMismatchThrows) {
  std::vector<T> p{T::zeros({3}, true)};
  auto s = AdamState<double>::for_params(p, 0.1);
  EXPECT_THROW(adam_step(s, p, {{1.0, 2.0}}), DimensionError);
  std::vector<T> two{T::zeros({3}, true), T::zeros({1}, true)};
  EXPECT_THROW(adam_step(s, two), DimensionError);
}

TEST(Config, TextRoundTrip) {
  auto c = tiny_config();
  c.fusion_mode = FusionMode::concat;
  c.gan = true;
  c.weights.reg = 0.25;
  c.lr_g = 1.0 / 3.0;
  const auto back = RunConfig::parse(c.to_text());
  EXPECT_EQ(back.to_text(), c.to_text());
  EXPECT_EQ(back.lr_g, c.lr_g);
}

TEST(Config, Errors) {
  EXPECT_THROW(RunConfig::parse("bogus = 1"), ConfigError);
  EXPECT_THROW(RunConfig::parse("steps = -4"), ConfigError);
  EXPECT_THROW(RunConfig::parse("steps"), ConfigError);
  EXPECT_THROW(RunConfig::parse("rays_per_view = 1000"), ConfigError);
  EXPECT_THROW(RunConfig::parse("fusion_mode = sum"), ConfigError);
  EXPECT_THROW(RunConfig::parse("weight.depth = -1"), ConfigError);
  EXPECT_THROW(RunConfig::load("/nonexistent/config.txt"), FileError);
  const auto c = RunConfig::parse("# comment\n steps = 5 # trailing\n\ndam = 0\n");
  EXPECT_EQ(c.steps, 5u);
  EXPECT_EQ(c.effective_mode(), FusionMode::concat);
}

TEST(Subgrid, StridedAndInBounds) {
  const auto px = subgrid_pixels(16, 4, 123);
  ASSERT_EQ(px.size(), 16u);
  const std::size_t ox = px[0] % 16, oy = px[0] / 16;
  EXPECT_LT(ox, 4u);
  EXPECT_LT(oy, 4u);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(px[i * 4 + j], (oy + 4 * i) * 16 + ox + 4 * j);
  const auto full = subgrid_pixels(16, 16, 5);
  for (std::size_t i = 0; i < 256; ++i) EXPECT_EQ(full[i], i);
}

TEST(LossRow, LineRoundTripIsExact) {
  LossRow r{12, 1.0 / 3, 2e-17, 0.1, 7.25, 1e10, -0.5, 0.5, 0.01, 8.0 / 7};
  const auto b = LossRow::from_line(r.to_line());
  EXPECT_EQ(b.step, r.step);
  EXPECT_EQ(b.l_rec, r.l_rec);
  EXPECT_EQ(b.l_lpips, r.l_lpips);
  EXPECT_EQ(b.l_total, r.l_total);
  EXPECT_THROW(LossRow::from_line("3 1.0"), FileError);
}

TEST(Fit, ZeroStepsReturnsInitialState) {
  auto c = tiny_config();
  c.steps = 0;
  auto st = fit<double>(tiny_dataset(), c);
  EXPECT_EQ(st.step, 0u);
  expect_same_params(st, init_state<double>(c));
}

TEST(Fit, MissingViewsAreConfigErrors) {
  auto ds = tiny_dataset();
  ds.views.pop_back();
  EXPECT_THROW(fit<double>(ds, tiny_config()), ConfigError);
  auto c = tiny_config();
  c.resolution = 32;
  c.rays_per_view = 64;
  EXPECT_THROW(fit<double>(tiny_dataset(), c), ConfigError);
}

TEST(Fit, LoggedLossEqualsReEvaluation) {
  for (bool gan : {false, true}) {
    auto c = tiny_config();
    c.gan = gan;
    std::vector<LossRow> rows;
    auto st = fit<double>(tiny_dataset(), c, [&](const LossRow& r) { rows.push_back(r); });
    ASSERT_EQ(rows.size(), c.steps);
    auto mid = fit(tiny_dataset(), init_state<double>(c), 6);
    const auto re = evaluate_step_loss(mid, tiny_dataset());
    EXPECT_EQ(re.step, 6u);
    EXPECT_EQ(re.l_total, rows[6].l_total);
    EXPECT_EQ(re.l_rec, rows[6].l_rec);
    for (const auto& r : rows) EXPECT_NEAR(r.l_total, r.l_rec + r.l_g + r.l_d + r.l_reg, 1e-12 * std::abs(r.l_total));
    if (!gan) {
      EXPECT_EQ(rows[0].l_g, 0.0);
      EXPECT_EQ(rows[0].l_d, 0.0);
    }
  }
}

TEST(Fit, ResumeIsBitwiseIdentical) {
  for (bool gan : {false, true}) {
    for (bool encoder : {false, true}) {
      auto c = tiny_config();
      c.gan = gan;
      c.encoder = encoder;
      c.steps = 8;
      const auto straight = fit<double>(tiny_dataset(), c);
      auto half = fit(tiny_dataset(), init_state<double>(c), 4);
      const auto dir = scratch("resume");
      save_state(half, dir);
      auto resumed = load_state<double>(dir);
      EXPECT_EQ(resumed.step, 4u);
      resumed = fit(tiny_dataset(), std::move(resumed), 8);
      expect_same_params(straight, resumed);
      EXPECT_EQ(evaluate_step_loss(straight, tiny_dataset()).l_total, evaluate_step_loss(resumed, tiny_dataset()).l_total);
    }
  }
}

TEST(Fit, SmallLearningRateDescends) {
  auto c = tiny_config();
  c.rays_per_view = 256;  // the full frame
  c.jitter = false;
  c.lr_g = 1e-4;
  auto st = init_state<double>(c);
  auto objective = [&](const FitState<double>& s) {
    auto probe = s;
    probe.step = 0;
    return evaluate_step_loss(probe, tiny_dataset()).l_total;
  };
  double prev = objective(st);
  for (std::size_t k = 1; k <= 50; ++k) {
    st = fit(tiny_dataset(), std::move(st), k);
    const double cur = objective(st);
    EXPECT_LT(cur, prev) << "step " << k;
    prev = cur;
  }
}

TEST(Fit, GanModeUpdatesBothPlayers) {
  auto c = tiny_config();
  c.gan = true;
  c.steps = 1;
  const auto init = init_state<double>(c);
  const auto st = fit<double>(tiny_dataset(), c);
  EXPECT_NE(st.disc->head_w[0], init.disc->head_w[0]);
  EXPECT_NE(st.model.decoder.w2[0], init.model.decoder.w2[0]);
  EXPECT_EQ(st.adam_d.t, 1u);
}

TEST(Fit, SharedEncoderAblationIsOneFlag) {
  auto c = tiny_config();
  c.encoder = true;
  const auto a = current_field(init_state<double>(c), tiny_dataset());
  c.dve = false;
  const auto b = current_field(init_state<double>(c), tiny_dataset());
  EXPECT_EQ(a.planes.back.xy.shape(), b.planes.back.xy.shape());
  for (std::size_t i = 0; i < a.planes.front.xy.size(); ++i) EXPECT_EQ(a.planes.front.xy[i], b.planes.front.xy[i]);
}

TEST(Evaluate, ReportsFourViewsAndGhost) {
  auto c = tiny_config();
  auto st = fit<double>(tiny_dataset(), c);
  const auto ev = evaluate_fit(st, tiny_dataset());
  ASSERT_EQ(ev.report.views.size(), 4u);
  EXPECT_EQ(ev.report.views[2].name, "back");
  EXPECT_GE(ev.ghost, 0.0);
  EXPECT_LE(ev.ghost, 1.0);
}

TEST(Ablate, TableShapeAndDeterminism) {
  auto c = tiny_config();
  c.steps = 2;
  const auto a = ablate<double>(tiny_dataset(), c), b = ablate<double>(tiny_dataset(), c);
  EXPECT_EQ(a.to_table(), b.to_table());
  ASSERT_EQ(a.rows.size(), 3u);
  EXPECT_EQ(a.rows[0].method, "full");
  EXPECT_EQ(a.rows[1].method, "w/o DAM");
  EXPECT_EQ(a.rows[2].method, "w/o DVE");
  std::istringstream is(a.to_table());
  std::string line;
  int lines = 0;
  while (std::getline(is, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 13) << line;
    ++lines;
  }
  EXPECT_EQ(lines, 4);
}
