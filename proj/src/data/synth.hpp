#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/errors.hpp"
#include "core/rng.hpp"
#include "core/tensor.hpp"
#include "model/config.hpp"

namespace punet {

// Synthetic multi-rater benchmark: anatomy-like scenes (a bright elliptical
// disc with a nested cup over a smooth background), one biased annotation per
// rater, and a majority-vote fusion mask. Everything is a pure function of
// (seed, config), scene streams are derived independently per index.

struct RaterProfile {
  int id = 0;
  int dilation_px = 0;       // systematic over (+) / under (-) segmentation
  double jitter_amp = 0.0;   // boundary noise amplitude, px
  int jitter_seed_mix = 0;
};

struct SyntheticScene {
  double cx = 0, cy = 0;  // disc center, px
  double ra = 0, rb = 0;  // disc radii, px
  double cup_scale = 0.5; // cup ellipse relative to disc, in (0,1)
  std::uint64_t texture_seed = 0;
};

struct SynthConfig {
  int height = 64;
  int width = 64;
  int classes = 2;  // disc, cup
  double brightness_shift = 0.0;  // domain shift, added to every pixel
  double contrast = 1.0;          // domain shift, about mid-gray
  double noise_amp = 0.02;
  double edge_width = 1.8;        // px, smoothness of the intensity ramp at boundaries
};

struct MultiRaterSample {
  Tensor<float> image;  // H x W x 3
  RaterTag rater;
  Tensor<float> mask;   // H x W x classes, binary
};

inline std::vector<RaterProfile> default_profiles() {
  return {{1, -2, 0.5, 11}, {2, -1, 0.9, 22}, {3, 0, 0.7, 33},
          {4, 0, 1.1, 44},  {5, 1, 1.3, 55},  {6, 2, 1.5, 66}};
}

inline SyntheticScene generate_scene_params(std::uint64_t seed, const SynthConfig& cfg) {
  Rng rng(derive_seed(seed, 0xa11ce));
  SyntheticScene s;
  double m = std::min(cfg.height, cfg.width);
  s.cx = cfg.width / 2.0 + rng.uniform(-0.08, 0.08) * m;
  s.cy = cfg.height / 2.0 + rng.uniform(-0.08, 0.08) * m;
  s.ra = rng.uniform(0.16, 0.24) * m;
  s.rb = rng.uniform(0.16, 0.24) * m;
  s.cup_scale = rng.uniform(0.45, 0.62);
  s.texture_seed = rng.next_u64();
  return s;
}

namespace synth_detail {

// Normalized elliptical radius of (x, y): 1 on the ellipse boundary.
inline double ell_radius(double x, double y, const SyntheticScene& s, double scl) {
  double dx = (x - s.cx) / (s.ra * scl);
  double dy = (y - s.cy) / (s.rb * scl);
  return std::sqrt(dx * dx + dy * dy);
}

// Smooth periodic boundary perturbation in [-1, 1], fixed harmonics with
// seeded phases.
inline double angular_jitter(double theta, std::uint64_t seed) {
  Rng rng(seed);
  double p1 = rng.uniform(0.0, 2.0 * M_PI);
  double p2 = rng.uniform(0.0, 2.0 * M_PI);
  double p3 = rng.uniform(0.0, 2.0 * M_PI);
  double v = 0.55 * std::sin(3 * theta + p1) + 0.3 * std::sin(5 * theta + p2) +
             0.15 * std::sin(8 * theta + p3);
  return v;
}

inline double smoothstep01(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace synth_detail

// Renders the image for a scene: smooth low-frequency background, elliptical
// disc/cup intensity structure with soft edges, pixel noise, then the domain
// shift. Values stay inside [0, 1] for the default shifts.
inline Tensor<float> render_image(const SyntheticScene& s, const SynthConfig& cfg) {
  Tensor<float> img = Tensor<float>::zeros({cfg.height, cfg.width, 3});
  Rng noise(derive_seed(s.texture_seed, 0xbeef));
  Rng bg(derive_seed(s.texture_seed, 0xfade));
  double fx = bg.uniform(0.5, 1.5), fy = bg.uniform(0.5, 1.5);
  double px = bg.uniform(0.0, 2.0 * M_PI), py = bg.uniform(0.0, 2.0 * M_PI);
  double rmean = 0.5 * (s.ra + s.rb);
  for (int y = 0; y < cfg.height; ++y) {
    for (int x = 0; x < cfg.width; ++x) {
      double base = 0.32 + 0.06 * std::sin(2.0 * M_PI * fx * x / cfg.width + px) +
                    0.06 * std::sin(2.0 * M_PI * fy * y / cfg.height + py);
      double rd = synth_detail::ell_radius(x + 0.5, y + 0.5, s, 1.0);
      double rc = synth_detail::ell_radius(x + 0.5, y + 0.5, s, s.cup_scale);
      double w = cfg.edge_width / rmean;
      double disc = synth_detail::smoothstep01((1.0 - rd) / w + 0.5);
      double cup = synth_detail::smoothstep01((1.0 - rc) / (w / s.cup_scale) + 0.5);
      double r = base + 0.30 * disc + 0.12 * cup;
      double g = base + 0.22 * disc + 0.18 * cup;
      double b = base + 0.10 * disc + 0.05 * cup;
      double ch[3] = {r, g, b};
      for (int c = 0; c < 3; ++c) {
        double v = ch[c] + cfg.noise_amp * noise.uniform(-1.0, 1.0);
        v = (v - 0.5) * cfg.contrast + 0.5 + cfg.brightness_shift;
        img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

// The noiseless reference annotation: profile dilation 0, jitter 0.
inline Tensor<float> render_rater_mask(const SyntheticScene& s, const RaterProfile& prof,
                                       const SynthConfig& cfg) {
  Tensor<float> mask = Tensor<float>::zeros({cfg.height, cfg.width, cfg.classes});
  double rmean = 0.5 * (s.ra + s.rb);
  std::uint64_t jd = derive_seed(s.texture_seed, 0x00d1 + static_cast<std::uint64_t>(prof.jitter_seed_mix));
  std::uint64_t jc = derive_seed(s.texture_seed, 0x00d2 + static_cast<std::uint64_t>(prof.jitter_seed_mix));
  for (int y = 0; y < cfg.height; ++y) {
    for (int x = 0; x < cfg.width; ++x) {
      double xc = x + 0.5, yc = y + 0.5;
      double theta = std::atan2((yc - s.cy) / s.rb, (xc - s.cx) / s.ra);
      double jdisc = prof.jitter_amp * synth_detail::angular_jitter(theta, jd);
      double jcup = prof.jitter_amp * synth_detail::angular_jitter(theta, jc);
      // Boundary moved radially by (dilation + jitter) pixels.
      double mdisc = 1.0 + (prof.dilation_px + jdisc) / rmean;
      double mcup = 1.0 + (prof.dilation_px + jcup) / (rmean * s.cup_scale);
      bool in_disc = synth_detail::ell_radius(xc, yc, s, 1.0) <= mdisc;
      bool in_cup = synth_detail::ell_radius(xc, yc, s, s.cup_scale) <= mcup;
      mask.at(y, x, 0) = in_disc ? 1.0f : 0.0f;
      // Nesting invariant: the cup never pokes outside the disc.
      mask.at(y, x, 1) = (in_cup && in_disc) ? 1.0f : 0.0f;
    }
  }
  return mask;
}

// Per-pixel strict majority: 1 iff more than R/2 raters voted 1. Ties (even
// R) resolve to 0.
inline Tensor<float> majority_vote(const std::vector<Tensor<float>>& masks) {
  if (masks.empty()) throw ArgError("majority_vote: need at least one mask");
  for (std::size_t i = 1; i < masks.size(); ++i) {
    require_same_shape(masks[0].shape, masks[i].shape, "majority_vote");
  }
  Tensor<float> out = Tensor<float>::zeros(masks[0].shape);
  int r = static_cast<int>(masks.size());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    int votes = 0;
    for (const auto& m : masks) votes += m.data[i] > 0.5f ? 1 : 0;
    out.data[i] = (2 * votes > r) ? 1.0f : 0.0f;
  }
  return out;
}

// ---------------------------------------------------------------------------
// On-disk dataset: scenes/<k>/image.ptnsr, scenes/<k>/rater<j>.ptnsr,
// scenes/<k>/mv.ptnsr, plus dataset.json.
// ---------------------------------------------------------------------------

struct DatasetConfig {
  int n_scenes = 64;
  std::vector<RaterProfile> profiles = default_profiles();
  SynthConfig synth;
  std::uint64_t seed = 1;
};

struct Dataset {
  DatasetConfig cfg;
  std::vector<Tensor<float>> images;               // per scene
  std::vector<std::vector<Tensor<float>>> raters;  // per scene, per rater
  std::vector<Tensor<float>> mv;                   // per scene

  int n_scenes() const { return static_cast<int>(images.size()); }
  int n_raters() const { return static_cast<int>(cfg.profiles.size()); }
  // R rater samples + 1 aggregate per scene.
  int n_samples() const { return n_scenes() * (n_raters() + 1); }

  const Tensor<float>& mask_for(int scene, const RaterTag& tag) const {
    if (tag.is_aggregate()) return mv[static_cast<std::size_t>(scene)];
    return raters[static_cast<std::size_t>(scene)][static_cast<std::size_t>(tag.value - 1)];
  }

  MultiRaterSample sample(int scene, const RaterTag& tag) const {
    return {images[static_cast<std::size_t>(scene)], tag, mask_for(scene, tag)};
  }
};

inline Dataset build_dataset(const DatasetConfig& cfg) {
  if (cfg.profiles.size() < 1) throw ConfigError("build_dataset: need at least one rater profile");
  Dataset ds;
  ds.cfg = cfg;
  ds.images.reserve(static_cast<std::size_t>(cfg.n_scenes));
  for (int k = 0; k < cfg.n_scenes; ++k) {
    std::uint64_t scene_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(k));
    SyntheticScene sc = generate_scene_params(scene_seed, cfg.synth);
    ds.images.push_back(render_image(sc, cfg.synth));
    std::vector<Tensor<float>> masks;
    masks.reserve(cfg.profiles.size());
    for (const auto& prof : cfg.profiles) masks.push_back(render_rater_mask(sc, prof, cfg.synth));
    ds.mv.push_back(majority_vote(masks));
    ds.raters.push_back(std::move(masks));
  }
  return ds;
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "scenes", ec);
  for (int k = 0; k < ds.n_scenes(); ++k) {
    fs::path sd = dir / "scenes" / std::to_string(k);
    fs::create_directories(sd, ec);
    write_ptnsr(sd / "image.ptnsr", ds.images[static_cast<std::size_t>(k)]);
    for (int j = 0; j < ds.n_raters(); ++j) {
      write_ptnsr(sd / ("rater" + std::to_string(j + 1) + ".ptnsr"),
                  ds.raters[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)]);
    }
    write_ptnsr(sd / "mv.ptnsr", ds.mv[static_cast<std::size_t>(k)]);
  }
  nlohmann::json profiles = nlohmann::json::array();
  for (const auto& p : ds.cfg.profiles) {
    profiles.push_back({{"id", p.id},
                        {"dilation_px", p.dilation_px},
                        {"jitter_amp", p.jitter_amp},
                        {"jitter_seed_mix", p.jitter_seed_mix}});
  }
  nlohmann::json manifest{
      {"format", "punet-dataset-v1"},
      {"seed", ds.cfg.seed},
      {"n_scenes", ds.cfg.n_scenes},
      {"raters", ds.n_raters()},
      {"samples", ds.n_samples()},
      {"height", ds.cfg.synth.height},
      {"width", ds.cfg.synth.width},
      {"classes", ds.cfg.synth.classes},
      {"brightness_shift", ds.cfg.synth.brightness_shift},
      {"contrast", ds.cfg.synth.contrast},
      {"noise_amp", ds.cfg.synth.noise_amp},
      {"edge_width", ds.cfg.synth.edge_width},
      {"profiles", profiles}};
  std::ofstream f(dir / "dataset.json");
  if (!f) throw IoError("cannot write dataset manifest in " + dir.string());
  f << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "dataset.json");
  if (!f) throw IoError("missing dataset manifest: " + (dir / "dataset.json").string());
  nlohmann::json manifest;
  try {
    f >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed dataset manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "punet-dataset-v1") {
    throw IoError("unsupported dataset format in " + dir.string());
  }
  Dataset ds;
  ds.cfg.seed = manifest.at("seed").get<std::uint64_t>();
  ds.cfg.n_scenes = manifest.at("n_scenes").get<int>();
  ds.cfg.synth.height = manifest.at("height").get<int>();
  ds.cfg.synth.width = manifest.at("width").get<int>();
  ds.cfg.synth.classes = manifest.at("classes").get<int>();
  ds.cfg.synth.brightness_shift = manifest.value("brightness_shift", 0.0);
  ds.cfg.synth.contrast = manifest.value("contrast", 1.0);
  ds.cfg.synth.noise_amp = manifest.value("noise_amp", 0.02);
  ds.cfg.synth.edge_width = manifest.value("edge_width", 1.8);
  ds.cfg.profiles.clear();
  for (const auto& p : manifest.at("profiles")) {
    ds.cfg.profiles.push_back({p.at("id").get<int>(), p.at("dilation_px").get<int>(),
                               p.at("jitter_amp").get<double>(),
                               p.at("jitter_seed_mix").get<int>()});
  }
  int r = static_cast<int>(ds.cfg.profiles.size());
  for (int k = 0; k < ds.cfg.n_scenes; ++k) {
    std::filesystem::path sd = dir / "scenes" / std::to_string(k);
    ds.images.push_back(read_ptnsr(sd / "image.ptnsr"));
    std::vector<Tensor<float>> masks;
    for (int j = 1; j <= r; ++j) {
      masks.push_back(read_ptnsr(sd / ("rater" + std::to_string(j) + ".ptnsr")));
    }
    ds.raters.push_back(std::move(masks));
    ds.mv.push_back(read_ptnsr(sd / "mv.ptnsr"));
  }
  return ds;
}

}  // namespace punet
