// nova: synth | fit | render | eval | ablate

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "nova/nova.hpp"

namespace fs = std::filesystem;
using namespace nova;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> resolution;
  std::string fusion_mode;
  bool no_dve = false;
  bool no_gan = false;
};

RunConfig resolve_config(const Common& c, bool for_training = true) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : RunConfig::load(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  if (c.resolution) cfg.resolution = *c.resolution;
  if (!c.fusion_mode.empty()) cfg.fusion_mode = parse_fusion_mode(c.fusion_mode);
  if (c.no_dve) cfg.dve = false;
  if (c.no_gan) cfg.gan = false;
  if (for_training) cfg.validate();
  else if (cfg.resolution < 4) throw ConfigError("resolution must be >= 4");
  return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  if (!os) throw FileError(p.string(), "cannot open for writing");
  os << text;
  if (!os) throw FileError(p.string(), "write failed");
}

template <class Real>
void run_fit(const RunConfig& cfg, const fs::path& data, const fs::path& out, const std::string& resume) {
  const auto ds = read_dataset(data);
  fs::create_directories(out);
  FitState<Real> st = resume.empty() ? init_state<Real>(cfg) : load_state<Real>(resume);
  if (!resume.empty()) st.config.steps = cfg.steps;
  std::ofstream log(out / "loss.log", resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw FileError((out / "loss.log").string(), "cannot open for writing");
  if (resume.empty()) log << LossRow::header() << "\n";
  st = fit(ds, std::move(st), cfg.steps, [&](const LossRow& r) { log << r.to_line() << "\n"; });
  save_state(st, out / "checkpoint");
  std::cout << "fit: " << st.step << " steps, checkpoint " << (out / "checkpoint").string() << "\n";
}

template <class Real>
void run_render(const fs::path& ckpt, const std::string& data, const Camera& cam, const fs::path& out) {
  const auto st = load_state<Real>(ckpt);
  SceneDataset ds;
  if (st.encoder) {
    if (data.empty()) throw ConfigError("this checkpoint was fitted in encoder mode; pass --data");
    ds = read_dataset(data);
  }
  NoGradGuard ng;
  const auto field = current_field(st, ds);
  const auto img = to_images(render_view(cam, field, st.config.samples_per_ray, std::nullopt), cam.resolution);
  fs::create_directories(out);
  write_image_set(out, "render", img);
  std::cout << "render: wrote " << (out / "render.png").string() << "\n";
}

std::string format_report(const MetricReport& rep) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6);
  os << "view\tpsnr\tssim\tssim_x100\tlpips_proxy\n";
  for (const auto& v : rep.views) {
    os << v.name << '\t' << v.psnr << '\t' << v.ssim << '\t' << 100 * v.ssim << '\t' << v.lpips_proxy << '\n';
  }
  os << "mean\t" << rep.mean_psnr() << '\t' << rep.mean_ssim() << '\t' << 100 * rep.mean_ssim() << '\t'
     << rep.mean_lpips_proxy() << '\n';
  os << "# fid unavailable: it needs a pretrained classifier\n";
  return os.str();
}

template <class Real>
MetricReport eval_checkpoint(const fs::path& ckpt, const SceneDataset& ds) {
  return evaluate_fit(load_state<Real>(ckpt), ds).report;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual tri-plane reconstruction from front and back views"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "run config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "seed");
    sub->add_option("--resolution", common.resolution, "image resolution");
    sub->add_option("--fusion-mode", common.fusion_mode, "as_written | per_point | concat")
        ->check(CLI::IsMember({"as_written", "per_point", "concat"}));
    sub->add_flag("--no-dve", common.no_dve, "route both input images through the front encoder");
    sub->add_flag("--no-gan", common.no_gan, "disable the adversarial terms");
  };

  std::string out, data, checkpoint, candidate, resume;
  bool include_random = false, perspective = false;
  double azimuth = 0, elevation = 0;

  auto* synth = app.add_subcommand("synth", "render the figurine dataset");
  add_common(synth);
  synth->add_option("--out", out, "output directory")->required();
  synth->add_flag("--include-random", include_random, "also render the 16 random perspective views");

  auto* fitc = app.add_subcommand("fit", "fit a field to a dataset");
  add_common(fitc);
  fitc->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  fitc->add_option("--out", out, "output directory")->required();
  fitc->add_option("--checkpoint", resume, "checkpoint to resume from")->check(CLI::ExistingDirectory);

  auto* render = app.add_subcommand("render", "render a fitted checkpoint from any camera");
  add_common(render);
  render->add_option("--checkpoint", checkpoint, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  render->add_option("--data", data, "dataset directory (encoder-mode checkpoints)");
  render->add_option("--azimuth", azimuth, "degrees");
  render->add_option("--elevation", elevation, "degrees");
  render->add_flag("--perspective", perspective, "perspective camera (fov 30, distance 3.5) instead of orthographic");
  render->add_option("--out", out, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "compare the orthographic views against a dataset");
  add_common(eval);
  eval->add_option("--data", data, "reference dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--checkpoint", checkpoint, "checkpoint to render")->check(CLI::ExistingDirectory);
  eval->add_option("--candidate", candidate, "dataset directory whose images are compared")
      ->check(CLI::ExistingDirectory);
  eval->add_option("--out", out, "write the report here as well");

  auto* abl = app.add_subcommand("ablate", "full vs w/o DAM vs w/o DVE");
  add_common(abl);
  abl->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  abl->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (synth->parsed()) {
      RunConfig cfg = resolve_config(common, false);
      const std::uint64_t seed = common.seed.value_or(cfg.scene_seed);
      const auto ds = write_dataset(FigurineScene::procedural(seed), seed, include_random, out, cfg.resolution);
      std::cout << "synth: " << ds.views.size() << " views in " << out << "\n";
    } else if (fitc->parsed()) {
      const auto cfg = resolve_config(common);
      if (cfg.precision == "f32") run_fit<float>(cfg, data, out, resume);
      else run_fit<double>(cfg, data, out, resume);
    } else if (render->parsed()) {
      const auto saved = RunConfig::load(fs::path(checkpoint) / "config.txt");
      Camera cam;
      cam.kind = perspective ? Projection::perspective : Projection::orthographic;
      cam.azimuth = azimuth;
      cam.elevation = elevation;
      cam.resolution = common.resolution.value_or(saved.resolution);
      cam.validate();
      if (saved.precision == "f32") run_render<float>(checkpoint, data, cam, out);
      else run_render<double>(checkpoint, data, cam, out);
    } else if (eval->parsed()) {
      if (checkpoint.empty() == candidate.empty()) throw ConfigError("eval needs exactly one of --checkpoint, --candidate");
      const auto ref = read_dataset(data);
      MetricReport rep;
      if (!candidate.empty()) {
        const auto cand = read_dataset(candidate);
        for (std::size_t v = 0; v < 4; ++v) {
          const auto* a = cand.ortho(kOrthoAzimuths[v]);
          const auto* b = ref.ortho(kOrthoAzimuths[v]);
          if (!a || !b) throw ConfigError("both datasets need the four orthographic views");
          if (a->images.resolution != b->images.resolution) throw ConfigError("dataset resolutions differ");
          rep.views.push_back(compare_views(kOrthoNames[v], a->images.rgb, b->images.rgb, a->images.resolution));
        }
      } else {
        const auto saved = RunConfig::load(fs::path(checkpoint) / "config.txt");
        rep = saved.precision == "f32" ? eval_checkpoint<float>(checkpoint, ref) : eval_checkpoint<double>(checkpoint, ref);
      }
      const auto text = format_report(rep);
      std::cout << text;
      if (!out.empty()) {
        fs::create_directories(out);
        write_text(fs::path(out) / "metrics.tsv", text);
      }
    } else if (abl->parsed()) {
      const auto cfg = resolve_config(common);
      const auto ds = read_dataset(data);
      const auto rep = cfg.precision == "f32" ? ablate<float>(ds, cfg) : ablate<double>(ds, cfg);
      fs::create_directories(out);
      write_text(fs::path(out) / "report.tsv", rep.to_table());
      std::cout << rep.to_table();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
