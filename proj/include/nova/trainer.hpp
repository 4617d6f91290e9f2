#pragma once

// Per-scene fitting: Adam over tri-plane (or encoder), fusion and decoder
// parameters, supervised by the four orthographic views.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nova/checkpoint.hpp"
#include "nova/config.hpp"
#include "nova/diffcore.hpp"
#include "nova/encoder.hpp"
#include "nova/losses.hpp"
#include "nova/metrics.hpp"
#include "nova/render.hpp"
#include "nova/rng.hpp"
#include "nova/scenes.hpp"

namespace nova {

// ---------------------------------------------------------------------------
// Adam

template <class Real>
struct AdamState {
  double lr = 0.0025;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<Real>> m, v;

  static AdamState for_params(const std::vector<Tensor<Real>>& params, double lr) {
    AdamState s;
    s.lr = lr;
    for (const auto& p : params) {
      s.m.emplace_back(p.size(), Real(0));
      s.v.emplace_back(p.size(), Real(0));
    }
    return s;
  }
};

/// One bias-corrected Adam update. grads[i] empty means a zero gradient.
template <class Real>
void adam_step(AdamState<Real>& s, std::vector<Tensor<Real>>& params, const std::vector<std::vector<Real>>& grads) {
  if (params.size() != s.m.size() || grads.size() != params.size()) {
    throw DimensionError("adam_step: parameter count does not match optimizer state");
  }
  ++s.t;
  const Real b1 = Real(s.beta1), b2 = Real(s.beta2);
  const Real bc1 = Real(1.0 - std::pow(s.beta1, double(s.t)));
  const Real bc2 = Real(1.0 - std::pow(s.beta2, double(s.t)));
  const Real lr = Real(s.lr), eps = Real(s.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    const auto& g = grads[i];
    if (s.m[i].size() != data.size() || (!g.empty() && g.size() != data.size())) {
      throw DimensionError("adam_step: shape mismatch for parameter " + std::to_string(i));
    }
    auto& m = s.m[i];
    auto& v = s.v[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      const Real gk = g.empty() ? Real(0) : g[k];
      m[k] = b1 * m[k] + (Real(1) - b1) * gk;
      v[k] = b2 * v[k] + (Real(1) - b2) * gk * gk;
      data[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps);
    }
  }
}

/// Adam update from the parameters' accumulated gradients.
template <class Real>
void adam_step(AdamState<Real>& s, std::vector<Tensor<Real>>& params) {
  std::vector<std::vector<Real>> grads;
  for (const auto& p : params) {
    if (p.has_grad()) grads.emplace_back(p.grad().begin(), p.grad().end());
    else grads.emplace_back();
  }
  adam_step(s, params, grads);
}

// ---------------------------------------------------------------------------
// Fit state

template <class Real>
struct FitState {
  RunConfig config;
  FieldModel<Real> model;  // planes are parameters only when !config.encoder
  std::optional<EncoderParams<Real>> encoder;
  std::optional<DiscriminatorParams<Real>> disc;
  AdamState<Real> adam_g, adam_d;
  std::size_t step = 0;

  std::vector<std::pair<std::string, Tensor<Real>>> generator_params() const {
    std::vector<std::pair<std::string, Tensor<Real>>> out;
    auto append = [&](const auto& v) { out.insert(out.end(), v.begin(), v.end()); };
    if (encoder) append(encoder->named());
    else append(model.planes.named());
    append(model.fusion.named());
    append(model.decoder.named());
    return out;
  }

  std::vector<std::pair<std::string, Tensor<Real>>> discriminator_params() const {
    if (!disc) return {};
    return disc->named();
  }
};

inline const char* kOrthoNames[4] = {"front", "right", "back", "left"};
inline constexpr double kOrthoAzimuths[4] = {0.0, 90.0, 180.0, 270.0};

namespace detail {

template <class Real>
std::vector<Tensor<Real>> tensors_of(const std::vector<std::pair<std::string, Tensor<Real>>>& named) {
  std::vector<Tensor<Real>> out;
  for (const auto& [n, t] : named) out.push_back(t);
  return out;
}

inline void require_ortho4(const SceneDataset& ds, int resolution) {
  for (double az : kOrthoAzimuths) {
    const auto* v = ds.ortho(az);
    if (!v) throw ConfigError("dataset lacks the orthographic view at azimuth " + std::to_string(int(az)));
    if (v->camera.resolution != resolution) {
      throw ConfigError("dataset resolution " + std::to_string(v->camera.resolution) + " differs from config " +
                        std::to_string(resolution));
    }
  }
}

/// An RGB buffer as an image tensor, rows flipped so that row index grows
/// with +y like the plane coordinate v.
template <class Real>
Tensor<Real> encoder_input(const ImageSet& img) {
  const std::size_t r = std::size_t(img.resolution);
  std::vector<Real> out(r * r * 3);
  for (std::size_t y = 0; y < r; ++y)
    for (std::size_t i = 0; i < r * 3; ++i) out[y * r * 3 + i] = Real(img.rgb[(r - 1 - y) * r * 3 + i]);
  return Tensor<Real>::from({r, r, 3}, std::move(out));
}

}  // namespace detail

template <class Real>
FitState<Real> init_state(const RunConfig& cfg) {
  cfg.validate();
  FitState<Real> s;
  s.config = cfg;
  s.model.mode = cfg.effective_mode();
  const Real extent = Real(cfg.plane_extent);
  {
    Rng rng(derive_seed(cfg.seed, {0x706c616e6573ULL}));
    if (cfg.encoder) {
      s.encoder = EncoderParams<Real>::random(rng, kEncoderChannels, cfg.plane_channels);
      s.model.planes = {TriPlane<Real>::constant(cfg.plane_resolution, cfg.plane_channels, 0, extent),
                        TriPlane<Real>::constant(cfg.plane_resolution, cfg.plane_channels, 0, extent)};
    } else {
      auto front = TriPlane<Real>::random(cfg.plane_resolution, cfg.plane_channels, Real(cfg.init_std), extent, rng);
      auto back = TriPlane<Real>::random(cfg.plane_resolution, cfg.plane_channels, Real(cfg.init_std), extent, rng);
      s.model.planes = {front, back};
    }
  }
  {
    Rng rng(derive_seed(cfg.seed, {0x667573696f6eULL}));
    s.model.fusion = FusionParams<Real>::random(rng);
  }
  {
    Rng rng(derive_seed(cfg.seed, {0x6465636f646572ULL}));
    s.model.decoder = DecoderParams<Real>::random(rng);
  }
  if (cfg.gan) {
    Rng rng(derive_seed(cfg.seed, {0x64697363ULL}));
    s.disc = DiscriminatorParams<Real>::random(rng);
  }
  s.adam_g = AdamState<Real>::for_params(detail::tensors_of(s.generator_params()), cfg.lr_g);
  s.adam_d = AdamState<Real>::for_params(detail::tensors_of(s.discriminator_params()), cfg.lr_d);
  return s;
}

/// The field used for rendering: in encoder mode the planes are lifted from
/// the front and back input images.
template <class Real>
FieldModel<Real> current_field(const FitState<Real>& s, const SceneDataset& ds) {
  if (!s.encoder) return s.model;
  const auto& enc = *s.encoder;
  const auto front_img = detail::encoder_input<Real>(ds.ortho(0.0)->images);
  const auto back_img = detail::encoder_input<Real>(ds.ortho(180.0)->images);
  const std::size_t r = s.config.plane_resolution;
  const Real extent = Real(s.config.plane_extent);
  FieldModel<Real> m = s.model;
  m.planes.front = lift_to_triplane(enc, encode_front(enc, front_img, r), extent);
  m.planes.back = lift_to_triplane(enc, s.config.dve ? encode_back(enc, back_img, r) : encode_front(enc, back_img, r),
                                   extent);
  return m;
}

// ---------------------------------------------------------------------------
// One step's objective

struct LossRow {
  std::size_t step = 0;
  double l_rec = 0, l_lpips = 0, l_l1 = 0, l_mask = 0, l_depth = 0, l_g = 0, l_d = 0, l_reg = 0, l_total = 0;

  std::string to_line() const {
    std::ostringstream os;
    os << std::setprecision(17) << step;
    for (double v : {l_rec, l_lpips, l_l1, l_mask, l_depth, l_g, l_d, l_reg, l_total}) os << '\t' << v;
    return os.str();
  }

  static LossRow from_line(const std::string& line) {
    std::istringstream is(line);
    LossRow r;
    is >> r.step >> r.l_rec >> r.l_lpips >> r.l_l1 >> r.l_mask >> r.l_depth >> r.l_g >> r.l_d >> r.l_reg >> r.l_total;
    if (!is) throw FileError("loss log", "malformed line: " + line);
    return r;
  }

  static std::string header() { return "# step\tl_rec\tl_lpips_proxy\tl_l1\tl_mask\tl_depth\tl_g\tl_d\tl_reg\tl_total"; }
};

/// Pixel indices of the strided subgrid supervised in one step.
inline std::vector<std::size_t> subgrid_pixels(int resolution, std::size_t side, std::uint64_t seed) {
  const std::size_t res = std::size_t(resolution), stride = res / side;
  Rng rng(seed);
  const std::size_t ox = rng.below(stride), oy = rng.below(stride);
  std::vector<std::size_t> px;
  px.reserve(side * side);
  for (std::size_t i = 0; i < side; ++i)
    for (std::size_t j = 0; j < side; ++j) px.push_back((oy + i * stride) * res + ox + j * stride);
  return px;
}

template <class Real>
ViewTarget<Real> gather_target(const ImageSet& gt, const std::vector<std::size_t>& px, std::size_t side) {
  std::vector<Real> rgb(px.size() * 3), mask(px.size()), depth(px.size());
  for (std::size_t k = 0; k < px.size(); ++k) {
    for (int c = 0; c < 3; ++c) rgb[3 * k + c] = Real(gt.rgb[3 * px[k] + c]);
    mask[k] = Real(gt.mask[px[k]]);
    depth[k] = Real(gt.depth[px[k]]);
  }
  return {Tensor<Real>::from({side, side, 3}, std::move(rgb)), Tensor<Real>::from({side, side, 1}, std::move(mask)),
          Tensor<Real>::from({side, side, 1}, std::move(depth))};
}

template <class Real>
struct StepObjective {
  Tensor<Real> total;
  LossRow row;
};

/// Builds the loss of step `s.step`: the four orthographic views rendered on
/// a strided pixel subgrid, L_rec averaged over views, L_reg on random probe
/// points, and the adversarial terms when enabled. All randomness derives
/// from (seed, step).
template <class Real>
StepObjective<Real> step_objective(const FitState<Real>& s, const SceneDataset& ds) {
  const auto& cfg = s.config;
  detail::require_ortho4(ds, cfg.resolution);
  const std::size_t side = static_cast<std::size_t>(std::llround(std::sqrt(double(cfg.rays_per_view))));
  const auto field = current_field(s, ds);
  const auto bg = background_of<Real>(ds.background);
  std::vector<Tensor<Real>> rec, lp, l1, lm, ld, fakes, reals;
  for (std::size_t v = 0; v < 4; ++v) {
    const auto* view = ds.ortho(kOrthoAzimuths[v]);
    const auto px = subgrid_pixels(cfg.resolution, side, derive_seed(cfg.seed, {s.step, v, 1}));
    const auto rays = generate_rays<Real>(view->camera, px);
    std::optional<std::uint64_t> jitter;
    if (cfg.jitter) jitter = derive_seed(cfg.seed, {s.step, v, 2});
    const auto out = render_rays(field, rays, cfg.samples_per_ray, jitter, bg);
    ViewPrediction<Real> pred{out.rgb.reshape({side, side, 3}), out.mask.reshape({side, side, 1}),
                              out.depth.reshape({side, side, 1})};
    const auto gt = gather_target<Real>(view->images, px, side);
    auto t = reconstruction_loss(pred, gt, cfg.weights);
    rec.push_back(t.total);
    lp.push_back(t.lpips);
    l1.push_back(t.l1);
    lm.push_back(t.mask);
    ld.push_back(t.depth);
    if (s.disc) {
      fakes.push_back(discriminator_input(pred.rgb, pred.rgb, pred.mask));
      reals.push_back(discriminator_input(gt.rgb, gt.rgb, gt.mask));
    }
  }
  const Real quarter = Real(0.25);
  LossComponents<Real> c;
  c.rec = scale(add_n(rec), quarter);
  {
    Rng rng(derive_seed(cfg.seed, {s.step, 3}));
    std::vector<Real> probes(cfg.reg_probes * 3);
    for (auto& x : probes) x = Real(rng.uniform(-1.0, 1.0));
    const DensityField<Real> sigma = [&](const Tensor<Real>& p) { return field_density(field, p); };
    c.reg = density_smoothness_loss(sigma, Tensor<Real>::from({cfg.reg_probes, 3}, std::move(probes)),
                                    derive_seed(cfg.seed, {s.step, 4}), cfg.weights);
  }
  if (s.disc) {
    c.g = generator_loss(*s.disc, fakes);
    c.d = discriminator_loss(*s.disc, fakes, reals, cfg.weights).total;
  }
  StepObjective<Real> obj;
  obj.total = total_loss(c);
  auto& r = obj.row;
  r.step = s.step;
  r.l_rec = double(c.rec.item());
  r.l_lpips = double(scale(add_n(lp), quarter).item());
  r.l_l1 = double(scale(add_n(l1), quarter).item());
  r.l_mask = double(scale(add_n(lm), quarter).item());
  r.l_depth = double(scale(add_n(ld), quarter).item());
  r.l_g = c.g.defined() ? double(c.g.item()) : 0.0;
  r.l_d = c.d.defined() ? double(c.d.item()) : 0.0;
  r.l_reg = double(c.reg.item());
  r.l_total = double(obj.total.item());
  return obj;
}

/// The loss row the next step would log, without updating anything.
template <class Real>
LossRow evaluate_step_loss(const FitState<Real>& s, const SceneDataset& ds) {
  NoGradGuard ng;
  return step_objective(s, ds).row;
}

/// Called after every step with the row logged for it.
using StepCallback = std::function<void(const LossRow&)>;

/// Runs steps until s.step == until_step. Generator and discriminator
/// parameters receive separated gradients from one backward pass of L_total
/// (fakes are detached inside L_D, the discriminator is frozen inside L_G)
/// and take one Adam step each.
template <class Real>
FitState<Real> fit(const SceneDataset& ds, FitState<Real> s, std::size_t until_step, const StepCallback& on_step = {}) {
  detail::require_ortho4(ds, s.config.resolution);
  auto gen = detail::tensors_of(s.generator_params());
  auto dis = detail::tensors_of(s.discriminator_params());
  while (s.step < until_step) {
    for (auto& p : gen) p.zero_grad();
    for (auto& p : dis) p.zero_grad();
    auto obj = step_objective(s, ds);
    obj.total.backward();
    adam_step(s.adam_g, gen);
    if (!dis.empty()) adam_step(s.adam_d, dis);
    for (auto& p : gen) p.zero_grad();
    for (auto& p : dis) p.zero_grad();
    ++s.step;
    if (on_step) on_step(obj.row);
  }
  return s;
}

template <class Real>
FitState<Real> fit(const SceneDataset& ds, const RunConfig& cfg, const StepCallback& on_step = {}) {
  return fit(ds, init_state<Real>(cfg), cfg.steps, on_step);
}

// ---------------------------------------------------------------------------
// Checkpoints: tensors.manifest/tensors.bin plus config.txt and state.txt.

template <class Real>
void save_state(const FitState<Real>& s, const std::filesystem::path& dir) {
  std::vector<std::pair<std::string, Tensor<Real>>> all;
  auto gen = s.generator_params();
  auto dis = s.discriminator_params();
  all.insert(all.end(), gen.begin(), gen.end());
  all.insert(all.end(), dis.begin(), dis.end());
  auto moments = [&](const std::string& tag, const AdamState<Real>& a,
                     const std::vector<std::pair<std::string, Tensor<Real>>>& params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      all.emplace_back("adam." + tag + ".m." + params[i].first, Tensor<Real>::from(params[i].second.shape(), a.m[i]));
      all.emplace_back("adam." + tag + ".v." + params[i].first, Tensor<Real>::from(params[i].second.shape(), a.v[i]));
    }
  };
  moments("g", s.adam_g, gen);
  moments("d", s.adam_d, dis);
  write_checkpoint(dir, all);
  {
    std::ofstream os(dir / "config.txt");
    if (!os) throw FileError((dir / "config.txt").string(), "cannot open for writing");
    os << s.config.to_text();
  }
  std::ofstream os(dir / "state.txt");
  if (!os) throw FileError((dir / "state.txt").string(), "cannot open for writing");
  os << "step " << s.step << "\nadam_g_t " << s.adam_g.t << "\nadam_d_t " << s.adam_d.t << "\n";
}

template <class Real>
FitState<Real> load_state(const std::filesystem::path& dir) {
  auto cfg = RunConfig::load(dir / "config.txt");
  auto s = init_state<Real>(cfg);
  const auto tensors = read_checkpoint<Real>(dir);
  auto restore = [&](const std::string& name, Tensor<Real> dst) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FileError(dir.string(), "checkpoint lacks tensor '" + name + "'");
    if (it->second.shape() != dst.shape()) throw FileError(dir.string(), "shape mismatch for '" + name + "'");
    std::copy(it->second.data().begin(), it->second.data().end(), dst.mutable_data().begin());
  };
  auto moments = [&](const std::string& tag, AdamState<Real>& a,
                     const std::vector<std::pair<std::string, Tensor<Real>>>& params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& [name, t] = params[i];
      restore(name, t);
      auto m = Tensor<Real>::zeros(t.shape()), v = Tensor<Real>::zeros(t.shape());
      restore("adam." + tag + ".m." + name, m);
      restore("adam." + tag + ".v." + name, v);
      a.m[i].assign(m.data().begin(), m.data().end());
      a.v[i].assign(v.data().begin(), v.data().end());
    }
  };
  moments("g", s.adam_g, s.generator_params());
  moments("d", s.adam_d, s.discriminator_params());
  std::ifstream is(dir / "state.txt");
  if (!is) throw FileError((dir / "state.txt").string(), "cannot read");
  std::string k1, k2, k3;
  is >> k1 >> s.step >> k2 >> s.adam_g.t >> k3 >> s.adam_d.t;
  if (!is || k1 != "step" || k2 != "adam_g_t" || k3 != "adam_d_t") throw FileError((dir / "state.txt").string(), "malformed");
  return s;
}

// ---------------------------------------------------------------------------
// Evaluation and ablation

struct FitEvaluation {
  MetricReport report;  // front, right, back, left
  double ghost = 0;     // ghost-face correlation of the back view
  std::vector<ImageSet> renders;
};

/// Full-frame renders of the four orthographic views (stratum midpoints)
/// compared with the dataset images.
template <class Real>
FitEvaluation evaluate_fit(const FitState<Real>& s, const SceneDataset& ds) {
  NoGradGuard ng;
  detail::require_ortho4(ds, s.config.resolution);
  const auto field = current_field(s, ds);
  FitEvaluation ev;
  for (std::size_t v = 0; v < 4; ++v) {
    const auto* view = ds.ortho(kOrthoAzimuths[v]);
    auto img = to_images(render_view(view->camera, field, s.config.samples_per_ray, std::nullopt, ds.background),
                         view->camera.resolution);
    ev.report.views.push_back(compare_views(kOrthoNames[v], img.rgb, view->images.rgb, img.resolution));
    ev.renders.push_back(std::move(img));
  }
  const auto scene = FigurineScene::procedural(ds.scene_seed);
  const auto face = face_region(scene, ds.ortho(0.0)->camera);
  ev.ghost = ghost_face_correlation(ev.renders[2].rgb, ds.ortho(0.0)->images.rgb, face, s.config.resolution);
  return ev;
}

struct AblationRow {
  std::string method;
  FitEvaluation eval;
};

struct AblationReport {
  std::vector<AblationRow> rows;

  /// Tab-separated table: one row per method; for each of Right, Left,
  /// Front, Back the SSIM, proxy LPIPS and PSNR; then the ghost statistic.
  std::string to_table() const {
    std::ostringstream os;
    os << "method";
    const char* groups[4] = {"right", "left", "front", "back"};
    for (const char* g : groups) os << '\t' << g << ".ssim\t" << g << ".lpips_proxy\t" << g << ".psnr";
    os << "\tghost\n";
    os << std::fixed << std::setprecision(6);
    for (const auto& r : rows) {
      os << r.method;
      for (const char* g : groups) {
        const auto* m = r.eval.report.find(g);
        os << '\t' << m->ssim << '\t' << m->lpips_proxy << '\t' << m->psnr;
      }
      os << '\t' << r.eval.ghost << '\n';
    }
    return os.str();
  }
};

/// Fits "full" (the configured attention mode, per_point if the config asks
/// for concat), "w/o DAM" (concat fusion) and "w/o DVE" (both images through
/// the front encoder path; always run in encoder mode) with identical seeds
/// and budgets.
template <class Real>
AblationReport ablate(const SceneDataset& ds, const RunConfig& cfg,
                      const std::function<void(const std::string&, const LossRow&)>& on_step = {}) {
  AblationReport rep;
  auto run = [&](const std::string& name, RunConfig c) {
    auto st = fit<Real>(ds, c, [&](const LossRow& r) {
      if (on_step) on_step(name, r);
    });
    rep.rows.push_back({name, evaluate_fit(st, ds)});
  };
  RunConfig full = cfg;
  if (full.fusion_mode == FusionMode::concat) full.fusion_mode = FusionMode::per_point;
  full.dam = true;
  full.dve = true;
  run("full", full);
  RunConfig no_dam = full;
  no_dam.dam = false;
  run("w/o DAM", no_dam);
  RunConfig no_dve = full;
  no_dve.encoder = true;
  no_dve.dve = false;
  run("w/o DVE", no_dve);
  return rep;
}

}  // namespace nova
