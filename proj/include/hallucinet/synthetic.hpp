#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "hallucinet/dataset.hpp"

namespace hallucinet {

/// Knobs of the synthetic aerial-scene generator. Class 0 is ground,
/// 1 building, 2 vegetation, 3 the rare small-object class; any further
/// classes are clutter blobs.
struct SyntheticConfig {
  std::uint64_t seed = 0;
  std::size_t train_scenes = 20;
  std::size_t val_scenes = 4;
  std::size_t test_scenes = 8;
  std::size_t size = 256;
  std::size_t class_count = 4;
  bool with_ir = true;
  double rare_fraction = 0.015;
  double building_fraction = 0.3;
  double vegetation_fraction = 0.2;
  double clutter_fraction = 0.02;  // per clutter class
  // rgb rendering
  double texture_amplitude = 0.10;  // shared texture of ground and roofs
  double pixel_noise = 0.05;        // iid noise on every rgb pixel
  std::size_t roof_cell = 4;        // correlation length of roof texture
  double vegetation_tint = 0.5;     // 0 = ground color, 1 = clearly green
  // other modalities
  double depth_noise = 0.03;
  double ir_noise = 0.05;
  // share of val/test scenes with a modality flagged missing
  std::map<std::string, double> missing_fraction;

  void validate() const {
    if (class_count < 4 || class_count > 32) throw ConfigError("synthetic class_count must lie in [4, 32]");
    if (size < 32) throw ConfigError("synthetic scenes must be at least 32 pixels");
    if (train_scenes == 0) throw ConfigError("synthetic data needs training scenes");
    if (!(rare_fraction > 0 && rare_fraction <= 0.1)) {
      throw ConfigError("rare_fraction must lie in (0, 0.1]");
    }
    const double car = static_cast<double>(car_length() * car_width());
    if (rare_fraction * size * size < car / 2) {
      throw ConfigError("rare_fraction is below one object at this scene size");
    }
    const double occupied = building_fraction + vegetation_fraction + rare_fraction +
                            clutter_fraction * static_cast<double>(class_count - 4);
    if (building_fraction < 0 || vegetation_fraction < 0 || clutter_fraction < 0 || occupied > 0.8) {
      throw ConfigError("class fractions leave too little ground");
    }
    if (roof_cell == 0) throw ConfigError("roof_cell must be positive");
    for (const auto& [m, f] : missing_fraction) {
      if (m != "depth" && m != "ir") throw ConfigError("unknown modality in missing_fraction: " + m);
      if (m == "ir" && !with_ir) throw ConfigError("missing_fraction names ir but with_ir is false");
      if (!(f >= 0 && f <= 1)) throw ConfigError("missing_fraction values must lie in [0, 1]");
    }
  }

  std::size_t car_length() const { return std::max<std::size_t>(8, size / 12); }
  std::size_t car_width() const { return std::max<std::size_t>(4, size / 24); }
};

inline json synthetic_config_to_json(const SyntheticConfig& c) {
  return {{"seed", c.seed},
          {"train_scenes", c.train_scenes},
          {"val_scenes", c.val_scenes},
          {"test_scenes", c.test_scenes},
          {"size", c.size},
          {"class_count", c.class_count},
          {"with_ir", c.with_ir},
          {"rare_fraction", c.rare_fraction},
          {"building_fraction", c.building_fraction},
          {"vegetation_fraction", c.vegetation_fraction},
          {"clutter_fraction", c.clutter_fraction},
          {"texture_amplitude", c.texture_amplitude},
          {"pixel_noise", c.pixel_noise},
          {"roof_cell", c.roof_cell},
          {"vegetation_tint", c.vegetation_tint},
          {"depth_noise", c.depth_noise},
          {"ir_noise", c.ir_noise},
          {"missing_fraction", c.missing_fraction}};
}

struct SyntheticDataset {
  DatasetManifest manifest;
  std::vector<Scene> scenes;  // train, then val, then test
};

namespace detail {

struct SceneCanvas {
  std::size_t S;
  LabelMap labels;
  std::vector<float> height;  // per-pixel object height for the depth raster
  explicit SceneCanvas(std::size_t s)
      : S(s), labels(Shape{s, s}, std::uint8_t{0}), height(s * s, 0.f) {}
  std::uint8_t& at(std::size_t r, std::size_t c) { return labels[r * S + c]; }
  double fraction(std::uint8_t cls) const {
    return static_cast<double>(std::count(labels.values().begin(), labels.values().end(), cls)) /
           static_cast<double>(S * S);
  }
};

inline void place_buildings(SceneCanvas& cv, double target, std::mt19937_64& rng) {
  const std::size_t S = cv.S;
  std::uniform_int_distribution<std::size_t> side(S / 8, S / 3);
  std::uniform_real_distribution<float> h(0.55f, 0.9f);
  std::size_t count = 0;
  const std::size_t goal = static_cast<std::size_t>(target * S * S);
  for (int attempt = 0; attempt < 200 && count < goal; ++attempt) {
    const std::size_t bh = side(rng), bw = side(rng);
    const std::size_t r0 = std::uniform_int_distribution<std::size_t>(0, S - bh)(rng);
    const std::size_t c0 = std::uniform_int_distribution<std::size_t>(0, S - bw)(rng);
    const float height = h(rng);
    for (std::size_t r = r0; r < r0 + bh; ++r) {
      for (std::size_t c = c0; c < c0 + bw; ++c) {
        if (cv.at(r, c) != 1) ++count;
        cv.at(r, c) = 1;
        cv.height[r * S + c] = std::max(cv.height[r * S + c], height);
      }
    }
  }
}

inline void place_blobs(SceneCanvas& cv, std::uint8_t cls, double target, double rmin, double rmax,
                        float height_lo, float height_hi, std::mt19937_64& rng) {
  const std::size_t S = cv.S;
  const std::size_t goal = static_cast<std::size_t>(target * S * S);
  std::uniform_real_distribution<double> pos(0, static_cast<double>(S));
  std::uniform_real_distribution<double> rad(rmin, rmax);
  std::uniform_real_distribution<float> hgt(height_lo, height_hi);
  std::size_t count = 0;
  for (int attempt = 0; attempt < 2000 && count < goal; ++attempt) {
    const double cr = pos(rng), cc = pos(rng), R = rad(rng);
    const float hv = hgt(rng);
    const auto lo_r = static_cast<std::size_t>(std::max(0.0, cr - R));
    const auto hi_r = std::min(S, static_cast<std::size_t>(cr + R) + 1);
    const auto lo_c = static_cast<std::size_t>(std::max(0.0, cc - R));
    const auto hi_c = std::min(S, static_cast<std::size_t>(cc + R) + 1);
    for (std::size_t r = lo_r; r < hi_r && count < goal; ++r) {
      for (std::size_t c = lo_c; c < hi_c && count < goal; ++c) {
        const double dr = r + 0.5 - cr, dc = c + 0.5 - cc;
        if (dr * dr + dc * dc > R * R || cv.at(r, c) != 0) continue;
        cv.at(r, c) = cls;
        cv.height[r * S + c] = hv;
        ++count;
      }
    }
  }
}

/// Small rectangles on free ground, added until the class reaches `target`
/// of the scene (to within half an object).
inline void place_cars(SceneCanvas& cv, std::size_t len, std::size_t wid, double target,
                       std::mt19937_64& rng, std::vector<std::array<std::size_t, 4>>& boxes) {
  const std::size_t S = cv.S;
  const double area = static_cast<double>(len * wid);
  const double goal = target * S * S;
  double count = 0;
  for (int attempt = 0; attempt < 20000 && count + area / 2 < goal; ++attempt) {
    const bool vertical = rng() & 1;
    const std::size_t h = vertical ? len : wid, w = vertical ? wid : len;
    const std::size_t r0 = std::uniform_int_distribution<std::size_t>(1, S - h - 1)(rng);
    const std::size_t c0 = std::uniform_int_distribution<std::size_t>(1, S - w - 1)(rng);
    bool free = true;
    for (std::size_t r = r0 - 1; r <= r0 + h && free; ++r) {
      for (std::size_t c = c0 - 1; c <= c0 + w && free; ++c) free = cv.at(r, c) == 0;
    }
    if (!free) continue;
    for (std::size_t r = r0; r < r0 + h; ++r) {
      for (std::size_t c = c0; c < c0 + w; ++c) {
        cv.at(r, c) = 3;
        cv.height[r * S + c] = 0.15f;
      }
    }
    boxes.push_back({r0, c0, h, w});
    count += area;
  }
  if (count + area / 2 < goal) {
    throw ConfigError("cannot place enough small objects for rare_fraction " + std::to_string(target));
  }
}

inline float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

}  // namespace detail

/// Renders one scene from its seed.
inline Scene render_synthetic_scene(const SyntheticConfig& cfg, const std::string& id,
                                    std::uint64_t scene_seed) {
  using detail::clamp01;
  const std::size_t S = cfg.size;
  std::mt19937_64 rng(scene_seed);
  detail::SceneCanvas cv(S);
  detail::place_buildings(cv, cfg.building_fraction, rng);
  detail::place_blobs(cv, 2, cfg.vegetation_fraction, S / 32.0, S / 10.0, 0.25f, 0.45f, rng);
  for (std::size_t k = 4; k < cfg.class_count; ++k) {
    detail::place_blobs(cv, static_cast<std::uint8_t>(k), cfg.clutter_fraction, S / 64.0, S / 24.0,
                        0.05f, 0.3f, rng);
  }
  std::vector<std::array<std::size_t, 4>> cars;
  detail::place_cars(cv, cfg.car_length(), cfg.car_width(), cfg.rare_fraction, rng, cars);

  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // per-scene ground tint shared by ground and roofs
  const std::array<double, 3> ground{0.45 + 0.08 * (unit(rng) - 0.5), 0.45 + 0.08 * (unit(rng) - 0.5),
                                     0.42 + 0.08 * (unit(rng) - 0.5)};
  const std::array<double, 3> green{0.25, 0.55, 0.2};
  std::array<double, 3> veg;
  for (int k = 0; k < 3; ++k) veg[k] = ground[k] + cfg.vegetation_tint * (green[k] - ground[k]);
  std::vector<std::array<double, 3>> clutter(cfg.class_count);
  for (auto& col : clutter) col = {0.1 + 0.8 * unit(rng), 0.1 + 0.8 * unit(rng), 0.1 + 0.8 * unit(rng)};

  // texture fields: iid for ground, cell-constant for roofs (same N(0,1) marginal)
  const std::size_t cell = cfg.roof_cell, cells = (S + cell - 1) / cell;
  std::vector<double> roof(cells * cells), fine(S * S), leaf(S * S);
  for (auto& v : roof) v = gauss(rng);
  for (auto& v : fine) v = gauss(rng);
  for (auto& v : leaf) v = gauss(rng);

  Tensor<float> rgb(Shape{3, S, S});
  for (std::size_t r = 0; r < S; ++r) {
    for (std::size_t c = 0; c < S; ++c) {
      const std::size_t i = r * S + c;
      const auto cls = cv.labels[i];
      std::array<double, 3> col{};
      double tex = 0;
      switch (cls) {
        case 0:
          col = ground;
          tex = cfg.texture_amplitude * fine[i];
          break;
        case 1:
          col = ground;
          tex = cfg.texture_amplitude * roof[(r / cell) * cells + c / cell];
          break;
        case 2: {
          col = veg;
          // leafy texture: smoothed noise with a larger amplitude
          const double s = (leaf[i] + leaf[(r * S + (c + 1) % S)] + leaf[((r + 1) % S) * S + c]) / std::sqrt(3.0);
          tex = 1.5 * cfg.texture_amplitude * s;
          break;
        }
        case 3:
          break;  // filled per object below
        default:
          col = clutter[cls];
          tex = cfg.texture_amplitude * fine[i];
      }
      for (int k = 0; k < 3; ++k) {
        rgb[(k * S + r) * S + c] = clamp01(col[k] + tex + cfg.pixel_noise * gauss(rng));
      }
    }
  }
  for (const auto& [r0, c0, h, w] : cars) {
    const std::array<double, 3> col{0.05 + 0.9 * unit(rng), 0.05 + 0.9 * unit(rng), 0.05 + 0.9 * unit(rng)};
    for (std::size_t r = r0; r < r0 + h; ++r) {
      for (std::size_t c = c0; c < c0 + w; ++c) {
        for (int k = 0; k < 3; ++k) {
          rgb[(k * S + r) * S + c] = clamp01(col[k] + cfg.pixel_noise * gauss(rng));
        }
      }
    }
  }

  Tensor<float> depth(Shape{1, S, S});
  for (std::size_t i = 0; i < S * S; ++i) {
    depth[i] = clamp01(0.05 + cv.height[i] + cfg.depth_noise * gauss(rng));
  }

  Scene scene;
  scene.id = id;
  scene.labels = cv.labels;
  scene.rasters.emplace("rgb", std::move(rgb));
  scene.rasters.emplace("depth", std::move(depth));
  if (cfg.with_ir) {
    Tensor<float> ir(Shape{1, S, S});
    for (std::size_t i = 0; i < S * S; ++i) {
      const auto cls = cv.labels[i];
      const double base = cls == 2 ? 0.8 : cls == 3 ? 0.2 : 0.3;
      ir[i] = clamp01(base + cfg.ir_noise * gauss(rng));
    }
    scene.rasters.emplace("ir", std::move(ir));
  }
  return scene;
}

inline SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  SyntheticDataset out;
  auto& m = out.manifest;
  m.class_count = cfg.class_count;
  m.class_names = {"ground", "building", "vegetation", "car"};
  for (std::size_t k = 4; k < cfg.class_count; ++k) m.class_names.push_back("clutter" + std::to_string(k - 3));
  for (std::size_t k = 4; k < cfg.class_count; ++k) m.excluded_classes.push_back(k);
  m.modalities = {{"rgb", 3}};
  if (cfg.with_ir) m.modalities.push_back({"ir", 1});
  m.modalities.push_back({"depth", 1});

  const std::vector<std::pair<std::string, std::size_t>> splits{
      {"train", cfg.train_scenes}, {"val", cfg.val_scenes}, {"test", cfg.test_scenes}};
  std::size_t index = 0;
  for (const auto& [split, n] : splits) {
    std::vector<std::string> ids;
    for (std::size_t k = 0; k < n; ++k, ++index) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%s_%03zu", split.c_str(), k);
      ids.push_back(buf);
      const std::uint64_t scene_seed = cfg.seed * 1000003ULL + index * 7919ULL + 17;
      out.scenes.push_back(render_synthetic_scene(cfg, buf, scene_seed));
    }
    m.splits[split] = ids;
    // availability: training scenes have everything; a seeded subset of the
    // evaluation scenes is flagged as missing each scheduled modality
    std::mt19937_64 rng(cfg.seed ^ (0xa5a5a5a5ULL + ids.size() * 31 + split.size()));
    for (const auto& id : ids) {
      SceneEntry e{id, {}};
      for (const auto& mod : m.optional_modalities()) e.availability[mod] = true;
      m.scenes[id] = e;
    }
    if (split == "train") continue;
    for (const auto& [mod, frac] : cfg.missing_fraction) {
      std::vector<std::string> order = ids;
      std::shuffle(order.begin(), order.end(), rng);
      const auto k = static_cast<std::size_t>(std::llround(frac * static_cast<double>(order.size())));
      for (std::size_t j = 0; j < k; ++j) m.scenes[order[j]].availability[mod] = false;
    }
  }
  for (auto& s : out.scenes) s.availability = m.scenes.at(s.id).availability;
  m.validate();
  return out;
}

/// Writes manifest and scene files under `dir`.
inline void materialize(SyntheticDataset& ds, const fs::path& dir) {
  ds.manifest.root = dir;
  save_manifest(ds.manifest, dir);
  for (const auto& s : ds.scenes) save_scene(ds.manifest, s);
}

}  // namespace hallucinet
