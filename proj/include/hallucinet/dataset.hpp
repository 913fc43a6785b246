#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "hallucinet/objective.hpp"
#include "hallucinet/segnet.hpp"
#include "hallucinet/tensor_file.hpp"

namespace hallucinet {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct ModalitySpec {
  std::string name;
  std::size_t channels = 1;
};

struct SceneEntry {
  std::string id;
  AvailabilityFlags availability;  // optional modalities only
};

/// Dataset description stored as `manifest.json` at the dataset root.
struct DatasetManifest {
  std::size_t class_count = 0;
  std::vector<std::string> class_names;
  std::vector<ModalitySpec> modalities;  // the primary modality comes first
  std::map<std::string, std::vector<std::string>> splits;
  std::map<std::string, SceneEntry> scenes;
  std::vector<std::size_t> excluded_classes;  // left out of averaged metrics
  fs::path root;

  std::vector<std::string> optional_modalities() const {
    std::vector<std::string> out;
    for (const auto& m : modalities) {
      if (m.name != kPrimaryModality) out.push_back(m.name);
    }
    return out;
  }

  bool has_modality(const std::string& name) const {
    return std::any_of(modalities.begin(), modalities.end(),
                       [&](const ModalitySpec& m) { return m.name == name; });
  }

  std::size_t channels(const std::string& name) const {
    for (const auto& m : modalities) {
      if (m.name == name) return m.channels;
    }
    throw ConfigError("dataset has no modality '" + name + "'");
  }

  const std::vector<std::string>& split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end() || it->second.empty()) {
      throw ConfigError("dataset split '" + name + "' is empty or absent");
    }
    return it->second;
  }

  AvailabilityMask availability(const std::string& scene) const {
    auto it = scenes.find(scene);
    if (it == scenes.end()) throw ConfigError("unknown scene '" + scene + "'");
    return AvailabilityMask{it->second.availability};
  }

  fs::path scene_dir(const std::string& id) const { return root / "scenes" / id; }

  void validate() const {
    if (class_count < 2 || class_count > 255) throw ConfigError("class_count must lie in [2, 255]");
    if (!class_names.empty() && class_names.size() != class_count) {
      throw ConfigError("class_names length differs from class_count");
    }
    if (modalities.empty() || modalities.front().name != kPrimaryModality) {
      throw ConfigError(std::string("first modality must be '") + kPrimaryModality + "'");
    }
    std::set<std::string> names;
    for (const auto& m : modalities) {
      if (m.channels == 0) throw ConfigError("modality " + m.name + " has zero channels");
      if (is_hallucination_role(m.name)) throw ConfigError("reserved modality name " + m.name);
      if (!names.insert(m.name).second) throw ConfigError("duplicate modality " + m.name);
    }
    std::set<std::string> seen;
    for (const auto& [split_name, ids] : splits) {
      for (const auto& id : ids) {
        if (!scenes.count(id)) throw ConfigError("split " + split_name + " lists unknown scene " + id);
        if (!seen.insert(id).second) throw ConfigError("scene " + id + " appears in two splits");
      }
    }
    for (const auto& [id, s] : scenes) {
      for (const auto& [m, _] : s.availability) {
        if (!names.count(m) || m == kPrimaryModality) {
          throw ConfigError("scene " + id + " flags unknown optional modality " + m);
        }
      }
    }
    for (auto c : excluded_classes) {
      if (c >= class_count) throw ConfigError("excluded class out of range");
    }
  }
};

inline json manifest_to_json(const DatasetManifest& m) {
  json j;
  j["class_count"] = m.class_count;
  j["class_names"] = m.class_names;
  j["excluded_classes"] = m.excluded_classes;
  j["modalities"] = json::array();
  for (const auto& x : m.modalities) j["modalities"].push_back({{"name", x.name}, {"channels", x.channels}});
  j["splits"] = m.splits;
  j["scenes"] = json::object();
  for (const auto& [id, s] : m.scenes) j["scenes"][id] = {{"availability", s.availability}};
  return j;
}

inline DatasetManifest manifest_from_json(const json& j, fs::path root = {}) {
  DatasetManifest m;
  try {
    m.class_count = j.at("class_count").get<std::size_t>();
    m.class_names = j.value("class_names", std::vector<std::string>{});
    m.excluded_classes = j.value("excluded_classes", std::vector<std::size_t>{});
    for (const auto& x : j.at("modalities")) {
      m.modalities.push_back({x.at("name").get<std::string>(), x.at("channels").get<std::size_t>()});
    }
    m.splits = j.at("splits").get<std::map<std::string, std::vector<std::string>>>();
    for (const auto& [id, s] : j.at("scenes").items()) {
      m.scenes[id] = SceneEntry{id, s.value("availability", AvailabilityFlags{})};
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed manifest: ") + e.what());
  }
  m.root = std::move(root);
  m.validate();
  return m;
}

inline DatasetManifest load_manifest(const fs::path& dir) {
  const fs::path file = fs::is_directory(dir) ? dir / "manifest.json" : dir;
  json j;
  try {
    j = json::parse(read_file_bytes(file));
  } catch (const json::parse_error& e) {
    throw ConfigError(file.string() + ": " + e.what());
  }
  return manifest_from_json(j, file.parent_path());
}

inline void save_manifest(const DatasetManifest& m, const fs::path& dir) {
  fs::create_directories(dir);
  write_file_bytes(dir / "manifest.json", manifest_to_json(m).dump(2) + "\n");
}

/// One scene in memory: rasters (C, H, W) in [0, 1] and labels (H, W).
struct Scene {
  std::string id;
  std::map<std::string, Tensor<float>> rasters;
  LabelMap labels;
  AvailabilityFlags availability;

  std::size_t height() const { return labels.dim(0); }
  std::size_t width() const { return labels.dim(1); }
};

inline void validate_scene(const Scene& s, std::size_t class_count) {
  require_rank(s.labels, 2, "scene labels");
  for (const auto& [m, r] : s.rasters) {
    require_rank(r, 3, "scene raster " + m);
    if (r.dim(1) != s.height() || r.dim(2) != s.width()) {
      throw ShapeError("scene " + s.id + ": raster " + m + " is " + shape_str(r.shape()) +
                       " but labels are " + shape_str(s.labels.shape()));
    }
  }
  for (auto v : s.labels.values()) {
    if (v >= class_count && v != kIgnoreLabel) {
      throw FormatError("scene " + s.id + " has label " + std::to_string(v) + " outside the class set");
    }
  }
}

inline void save_scene(const DatasetManifest& m, const Scene& s) {
  const fs::path dir = m.scene_dir(s.id);
  fs::create_directories(dir);
  for (const auto& [name, r] : s.rasters) write_tensor_file(dir / (name + ".mtns"), r);
  write_tensor_file(dir / "labels.mtns", s.labels);
}

/// Loads labels and every modality raster present. A modality the manifest
/// flags as available but whose file is absent is an error; `required`
/// modalities must be present regardless of flags.
inline Scene load_scene(const DatasetManifest& m, const std::string& id,
                        const std::vector<std::string>& required = {}) {
  Scene s;
  s.id = id;
  s.availability = m.availability(id).flags;
  const fs::path dir = m.scene_dir(id);
  s.labels = read_tensor_file<std::uint8_t>(dir / "labels.mtns");
  for (const auto& mod : m.modalities) {
    const fs::path file = dir / (mod.name + ".mtns");
    const bool flagged = m.availability(id).available(mod.name);
    const bool needed =
        std::find(required.begin(), required.end(), mod.name) != required.end();
    if (!fs::exists(file)) {
      if (flagged || needed) {
        throw MissingModalityError("scene " + id + ": modality " + mod.name + " has no raster file");
      }
      continue;
    }
    auto r = read_tensor_file<float>(file);
    if (r.rank() != 3 || r.dim(0) != mod.channels) {
      throw ShapeError("scene " + id + ": " + mod.name + " raster " + shape_str(r.shape()) +
                       " does not have " + std::to_string(mod.channels) + " channels");
    }
    s.rasters.emplace(mod.name, std::move(r));
  }
  validate_scene(s, m.class_count);
  return s;
}

// ---------------------------------------------------------------------------
// patches

struct PatchSpec {
  std::size_t size = 256;
  double overlap = 0.5;
  bool flips = true;
  bool rotations = true;

  void validate(std::size_t downsample_factor = 32) const {
    if (size == 0 || size % downsample_factor) {
      throw ConfigError("patch size must be a positive multiple of " + std::to_string(downsample_factor));
    }
    if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("patch overlap must lie in [0, 1)");
  }

  std::size_t stride() const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(size * (1.0 - overlap))));
  }

  /// Dihedral transform ids permitted by the augmentation flags.
  std::vector<int> transforms() const {
    if (rotations && flips) return {0, 1, 2, 3, 4, 5, 6, 7};
    if (rotations) return {0, 1, 2, 3};
    if (flips) return {0, 4};
    return {0};
  }
};

inline std::vector<std::size_t> patch_axis_origins(std::size_t extent, std::size_t patch,
                                                   std::size_t stride) {
  std::vector<std::size_t> out;
  for (std::size_t o = 0; o + patch <= extent; o += stride) out.push_back(o);
  if (out.back() + patch < extent) out.push_back(extent - patch);
  return out;
}

/// (row, col) patch origins: a regular grid with the last origin on each
/// axis clamped so the border is covered.
inline std::vector<std::pair<std::size_t, std::size_t>> extract_patch_grid(std::size_t H,
                                                                           std::size_t W,
                                                                           const PatchSpec& spec) {
  if (H < spec.size || W < spec.size) {
    throw ShapeError("image " + std::to_string(H) + "x" + std::to_string(W) +
                     " is smaller than the patch size " + std::to_string(spec.size));
  }
  const auto rows = patch_axis_origins(H, spec.size, spec.stride());
  const auto cols = patch_axis_origins(W, spec.size, spec.stride());
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (auto r : rows) {
    for (auto c : cols) out.emplace_back(r, c);
  }
  return out;
}

struct Patch {
  std::map<std::string, Tensor<float>> rasters;  // (C, p, p)
  LabelMap labels;                               // (p, p)
};

inline Patch crop_patch(const Scene& s, std::size_t r0, std::size_t c0, std::size_t size,
                        const std::vector<std::string>& modalities) {
  if (r0 + size > s.height() || c0 + size > s.width()) throw ShapeError("patch exceeds scene");
  Patch p;
  p.labels = LabelMap(Shape{size, size});
  for (std::size_t r = 0; r < size; ++r) {
    std::copy_n(s.labels.data() + (r0 + r) * s.width() + c0, size, p.labels.data() + r * size);
  }
  for (const auto& m : modalities) {
    auto it = s.rasters.find(m);
    if (it == s.rasters.end()) throw MissingModalityError("scene " + s.id + " lacks " + m);
    const auto& src = it->second;
    const std::size_t C = src.dim(0);
    Tensor<float> dst(Shape{C, size, size});
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t r = 0; r < size; ++r) {
        std::copy_n(src.data() + (c * s.height() + r0 + r) * s.width() + c0, size,
                    dst.data() + (c * size + r) * size);
      }
    }
    p.rasters.emplace(m, std::move(dst));
  }
  return p;
}

namespace detail {

// Source (r, c) for destination (i, j) under transform `id`: horizontal flip
// first when id >= 4, then `id % 4` quarter turns mapping (r, c) to (c, H-1-r).
inline std::pair<std::size_t, std::size_t> dihedral_source(int id, std::size_t i, std::size_t j,
                                                           std::size_t H, std::size_t W) {
  std::size_t r = i, c = j, h = H, w = W;
  // undo rotations on the output grid
  for (int k = 0; k < id % 4; ++k) {
    // forward: (r, c) in an h x w grid -> (c, h-1-r) in a w x h grid
    const std::size_t pr = h - 1 - c, pc = r;
    r = pr;
    c = pc;
    std::swap(h, w);
  }
  (void)h;
  if (id >= 4) c = w - 1 - c;
  return {r, c};
}

template <class T>
Tensor<T> dihedral_planes(const Tensor<T>& t, int id) {
  const std::size_t rank = t.rank();
  const std::size_t H = t.dim(rank - 2), W = t.dim(rank - 1);
  const std::size_t planes = t.size() / (H * W);
  const bool swap = id % 2 == 1;
  Shape out_shape = t.shape();
  if (swap) std::swap(out_shape[rank - 2], out_shape[rank - 1]);
  const std::size_t OH = out_shape[rank - 2], OW = out_shape[rank - 1];
  Tensor<T> out(out_shape);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = t.data() + p * H * W;
    T* dst = out.data() + p * OH * OW;
    for (std::size_t i = 0; i < OH; ++i) {
      for (std::size_t j = 0; j < OW; ++j) {
        auto [r, c] = dihedral_source(id, i, j, H, W);
        dst[i * OW + j] = src[r * W + c];
      }
    }
  }
  return out;
}

}  // namespace detail

/// Applies dihedral transform `id` in [0, 8) to a raster's last two axes.
template <class T>
Tensor<T> dihedral(const Tensor<T>& t, int id) {
  if (id < 0 || id > 7) throw ConfigError("transform id must lie in [0, 8)");
  if (t.rank() < 2) throw ShapeError("dihedral needs at least two axes");
  if (id % 4 != 0 && t.dim(t.rank() - 1) != t.dim(t.rank() - 2)) {
    throw ShapeError("rotations need a square raster, got " + shape_str(t.shape()));
  }
  if (id == 0) return t;
  return detail::dihedral_planes(t, id);
}

inline Patch augment(const Patch& p, int id) {
  Patch out;
  out.labels = dihedral(p.labels, id);
  for (const auto& [m, r] : p.rasters) out.rasters.emplace(m, dihedral(r, id));
  return out;
}

inline std::vector<double> label_frequencies(const std::vector<const LabelMap*>& labels,
                                             std::size_t class_count) {
  std::vector<double> counts(class_count, 0.0);
  double total = 0;
  for (const auto* l : labels) {
    for (auto v : l->values()) {
      if (v == kIgnoreLabel) continue;
      if (v >= class_count) throw FormatError("label outside the class set");
      counts[v] += 1;
      total += 1;
    }
  }
  if (total == 0) throw ConfigError("no labeled pixels");
  for (auto& c : counts) c /= total;
  return counts;
}

/// Per-class share of non-ignored pixels over a split.
inline std::vector<double> class_frequencies(const DatasetManifest& m, const std::string& split) {
  std::vector<LabelMap> labels;
  for (const auto& id : m.split(split)) {
    labels.push_back(read_tensor_file<std::uint8_t>(m.scene_dir(id) / "labels.mtns"));
  }
  std::vector<const LabelMap*> ptrs;
  for (const auto& l : labels) ptrs.push_back(&l);
  return label_frequencies(ptrs, m.class_count);
}

// ---------------------------------------------------------------------------
// minibatches

template <class T>
struct Batch {
  ModalityInputs<T> inputs;  // modality -> (N, C, p, p)
  LabelMap labels;           // (N, p, p)
};

/// Deterministic shuffled patch stream over a set of in-memory scenes.
/// Each epoch visits every grid patch once in an order fixed by (seed, epoch),
/// with one random permitted transform per patch.
class PatchSampler {
 public:
  PatchSampler(const std::vector<Scene>* scenes, PatchSpec spec, std::vector<std::string> modalities,
               std::uint64_t seed)
      : scenes_(scenes), spec_(spec), modalities_(std::move(modalities)), seed_(seed) {
    for (std::size_t s = 0; s < scenes_->size(); ++s) {
      for (auto [r, c] : extract_patch_grid((*scenes_)[s].height(), (*scenes_)[s].width(), spec_)) {
        items_.push_back({s, r, c});
      }
    }
    if (items_.empty()) throw ConfigError("no training patches");
    start_epoch();
  }

  std::size_t patches_per_epoch() const { return items_.size(); }

  template <class T = float>
  Batch<T> next(std::size_t batch_size) {
    std::vector<Patch> patches;
    patches.reserve(batch_size);
    for (std::size_t b = 0; b < batch_size; ++b) {
      if (cursor_ == order_.size()) {
        ++epoch_;
        start_epoch();
      }
      const auto& it = items_[order_[cursor_]];
      const int tf = transforms_[cursor_++];
      patches.push_back(augment(crop_patch((*scenes_)[it.scene], it.row, it.col, spec_.size, modalities_), tf));
    }
    return stack<T>(patches);
  }

  template <class T>
  static Batch<T> stack(const std::vector<Patch>& patches) {
    Batch<T> batch;
    const std::size_t N = patches.size(), p = patches.front().labels.dim(0);
    batch.labels = LabelMap(Shape{N, p, p});
    for (std::size_t n = 0; n < N; ++n) {
      std::copy(patches[n].labels.values().begin(), patches[n].labels.values().end(),
                batch.labels.data() + n * p * p);
    }
    for (const auto& [m, r] : patches.front().rasters) {
      const std::size_t C = r.dim(0);
      Tensor<T> t(Shape{N, C, p, p});
      for (std::size_t n = 0; n < N; ++n) {
        const auto& src = patches[n].rasters.at(m);
        std::transform(src.values().begin(), src.values().end(), t.data() + n * C * p * p,
                       [](float v) { return static_cast<T>(v); });
      }
      batch.inputs.emplace(m, std::move(t));
    }
    return batch;
  }

 private:
  struct Item {
    std::size_t scene, row, col;
  };

  void start_epoch() {
    std::mt19937_64 rng(seed_ * 0x9e3779b97f4a7c15ULL + epoch_);
    order_.resize(items_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    std::shuffle(order_.begin(), order_.end(), rng);
    const auto allowed = spec_.transforms();
    std::uniform_int_distribution<std::size_t> pick(0, allowed.size() - 1);
    transforms_.resize(order_.size());
    for (auto& t : transforms_) t = allowed[pick(rng)];
    cursor_ = 0;
  }

  const std::vector<Scene>* scenes_;
  PatchSpec spec_;
  std::vector<std::string> modalities_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<Item> items_;
  std::vector<std::size_t> order_;
  std::vector<int> transforms_;
  std::size_t cursor_ = 0;
};

}  // namespace hallucinet
