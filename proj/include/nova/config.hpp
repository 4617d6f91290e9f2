#pragma once

// Run configuration: a text file of `key = value` lines; `#` starts a comment.
//
//   steps            optimization steps (2000)
//   rays_per_view    rays rendered per supervised view and step; a square
//                    number whose root divides the resolution (1024)
//   samples_per_ray  stratified samples per ray (32)
//   fusion_mode      as_written | per_point | concat (as_written)
//   dam              0 forces concat fusion (1)
//   dve              0 routes both input images through the front path (1)
//   gan              1 enables the adversarial terms (0)
//   encoder          1 builds the tri-planes from the two input images;
//                    0 optimizes the planes directly (0)
//   seed             seed for initialization and per-step sampling (1)
//   scene_seed       figurine seed used by synth (7)
//   resolution       image resolution (64)
//   plane_resolution, plane_channels, plane_extent   tri-plane layout (64, 16, 1.1)
//   init_std         std of directly optimized plane values (0.1)
//   lr_g, lr_d       Adam rates of generator and discriminator (0.0025, 0.0002)
//   reg_probes       probe points per step for the smoothness term (256)
//   jitter           1 jitters sample depths within strata (1)
//   precision        f64 | f32 (f64)
//   weight.lpips, weight.l1, weight.mask, weight.depth, weight.reg, weight.r1

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "nova/errors.hpp"
#include "nova/fusion.hpp"
#include "nova/losses.hpp"
#include "nova/triplane.hpp"

namespace nova {

struct RunConfig {
  std::size_t steps = 2000;
  std::size_t rays_per_view = 1024;
  std::size_t samples_per_ray = 32;
  FusionMode fusion_mode = FusionMode::as_written;
  bool dam = true;
  bool dve = true;
  bool gan = false;
  bool encoder = false;
  std::uint64_t seed = 1;
  std::uint64_t scene_seed = 7;
  int resolution = 64;
  std::size_t plane_resolution = kDefaultPlaneResolution;
  std::size_t plane_channels = kPlaneChannels;
  double plane_extent = kDefaultPlaneExtent;
  double init_std = 0.1;
  double lr_g = 0.0025;
  double lr_d = 0.0002;
  std::size_t reg_probes = 256;
  bool jitter = true;
  std::string precision = "f64";
  LossWeights weights;

  FusionMode effective_mode() const { return dam ? fusion_mode : FusionMode::concat; }

  void validate() const {
    weights.validate();
    if (samples_per_ray < 2) throw ConfigError("samples_per_ray must be >= 2");
    if (rays_per_view == 0) throw ConfigError("rays_per_view must be positive");
    if (resolution < 4) throw ConfigError("resolution must be >= 4");
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(double(rays_per_view))));
    if (side * side != rays_per_view || std::size_t(resolution) % side) {
      throw ConfigError("rays_per_view must be a square whose root divides the resolution");
    }
    if (plane_channels * 2 != kFusionWidth) throw ConfigError("plane_channels must be 16");
    if (!(plane_extent > 0)) throw ConfigError("plane_extent must be positive");
    if (!(lr_g >= 0) || !(lr_d >= 0)) throw ConfigError("learning rates must be non-negative");
    if (precision != "f64" && precision != "f32") throw ConfigError("precision must be f64 or f32");
    if (encoder && resolution % 4) throw ConfigError("encoder mode needs a resolution divisible by 4");
  }

  std::map<std::string, std::string> entries() const {
    auto num = [](double v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return os.str();
    };
    return {{"steps", std::to_string(steps)},
            {"rays_per_view", std::to_string(rays_per_view)},
            {"samples_per_ray", std::to_string(samples_per_ray)},
            {"fusion_mode", to_string(fusion_mode)},
            {"dam", dam ? "1" : "0"},
            {"dve", dve ? "1" : "0"},
            {"gan", gan ? "1" : "0"},
            {"encoder", encoder ? "1" : "0"},
            {"seed", std::to_string(seed)},
            {"scene_seed", std::to_string(scene_seed)},
            {"resolution", std::to_string(resolution)},
            {"plane_resolution", std::to_string(plane_resolution)},
            {"plane_channels", std::to_string(plane_channels)},
            {"plane_extent", num(plane_extent)},
            {"init_std", num(init_std)},
            {"lr_g", num(lr_g)},
            {"lr_d", num(lr_d)},
            {"reg_probes", std::to_string(reg_probes)},
            {"jitter", jitter ? "1" : "0"},
            {"precision", precision},
            {"weight.lpips", num(weights.lpips)},
            {"weight.l1", num(weights.l1)},
            {"weight.mask", num(weights.mask)},
            {"weight.depth", num(weights.depth)},
            {"weight.reg", num(weights.reg)},
            {"weight.r1", num(weights.r1)}};
  }

  std::string to_text() const {
    std::string out;
    for (const auto& [k, v] : entries()) out += k + " = " + v + "\n";
    return out;
  }

  void set(const std::string& key, const std::string& value) {
    auto as_size = [&] {
      std::size_t pos = 0;
      unsigned long long v = 0;
      try {
        v = std::stoull(value, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != value.size() || value.empty() || value[0] == '-') {
        throw ConfigError("'" + key + "' expects a non-negative integer, got '" + value + "'");
      }
      return v;
    };
    auto as_double = [&] {
      std::size_t pos = 0;
      double v = 0;
      try {
        v = std::stod(value, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != value.size() || value.empty()) throw ConfigError("'" + key + "' expects a number, got '" + value + "'");
      return v;
    };
    auto as_bool = [&] {
      if (value == "1" || value == "true") return true;
      if (value == "0" || value == "false") return false;
      throw ConfigError("'" + key + "' expects 0/1, got '" + value + "'");
    };
    if (key == "steps") steps = as_size();
    else if (key == "rays_per_view") rays_per_view = as_size();
    else if (key == "samples_per_ray") samples_per_ray = as_size();
    else if (key == "fusion_mode") fusion_mode = parse_fusion_mode(value);
    else if (key == "dam") dam = as_bool();
    else if (key == "dve") dve = as_bool();
    else if (key == "gan") gan = as_bool();
    else if (key == "encoder") encoder = as_bool();
    else if (key == "seed") seed = as_size();
    else if (key == "scene_seed") scene_seed = as_size();
    else if (key == "resolution") resolution = static_cast<int>(as_size());
    else if (key == "plane_resolution") plane_resolution = as_size();
    else if (key == "plane_channels") plane_channels = as_size();
    else if (key == "plane_extent") plane_extent = as_double();
    else if (key == "init_std") init_std = as_double();
    else if (key == "lr_g") lr_g = as_double();
    else if (key == "lr_d") lr_d = as_double();
    else if (key == "reg_probes") reg_probes = as_size();
    else if (key == "jitter") jitter = as_bool();
    else if (key == "precision") precision = value;
    else if (key == "weight.lpips") weights.lpips = as_double();
    else if (key == "weight.l1") weights.l1 = as_double();
    else if (key == "weight.mask") weights.mask = as_double();
    else if (key == "weight.depth") weights.depth = as_double();
    else if (key == "weight.reg") weights.reg = as_double();
    else if (key == "weight.r1") weights.r1 = as_double();
    else throw ConfigError("unknown config key '" + key + "'");
  }

  static RunConfig parse(const std::string& text, const std::string& where = "config") {
    RunConfig c;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ":" + std::to_string(lineno) + ": expected key = value");
      try {
        c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const ConfigError& e) {
        throw ConfigError(where + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    c.validate();
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FileError(path.string(), "cannot read config");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), path.string());
  }
};

}  // namespace nova
