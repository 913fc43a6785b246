#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "hallucinet/dataset.hpp"

namespace hallucinet {

// ---------------------------------------------------------------------------
// boundary erosion

inline constexpr int kErosionRadius = 3;

/// 1 where a pixel is left out of evaluation: it carries the ignore label, or
/// a pixel with a different label lies within Euclidean distance 3.
inline LabelMap boundary_eroded_mask(const LabelMap& labels) {
  require_rank(labels, 2, "boundary_eroded_mask");
  const auto H = static_cast<long>(labels.dim(0)), W = static_cast<long>(labels.dim(1));
  constexpr int R = kErosionRadius;
  std::vector<std::pair<int, int>> disk;
  for (int dr = -R; dr <= R; ++dr) {
    for (int dc = -R; dc <= R; ++dc) {
      if ((dr || dc) && dr * dr + dc * dc <= R * R) disk.emplace_back(dr, dc);
    }
  }
  LabelMap mask(labels.shape(), std::uint8_t{0});
  for (long r = 0; r < H; ++r) {
    for (long c = 0; c < W; ++c) {
      const auto y = labels[r * W + c];
      bool ignored = y == kIgnoreLabel;
      for (std::size_t k = 0; k < disk.size() && !ignored; ++k) {
        const long rr = r + disk[k].first, cc = c + disk[k].second;
        if (rr >= 0 && rr < H && cc >= 0 && cc < W && labels[rr * W + cc] != y) ignored = true;
      }
      mask[r * W + c] = ignored;
    }
  }
  return mask;
}

// ---------------------------------------------------------------------------
// confusion matrix and metrics

/// Counts n[i][j] of pixels with true class i predicted as j.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t classes) : C_(classes), n_(classes * classes, 0) {}

  std::size_t classes() const { return C_; }
  std::uint64_t at(std::size_t i, std::size_t j) const { return n_[i * C_ + j]; }
  std::uint64_t& at(std::size_t i, std::size_t j) { return n_[i * C_ + j]; }
  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto v : n_) s += v;
    return s;
  }
  std::uint64_t row_total(std::size_t i) const {
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < C_; ++j) s += at(i, j);
    return s;
  }
  std::uint64_t col_total(std::size_t j) const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < C_; ++i) s += at(i, j);
    return s;
  }

  /// Adds every pixel whose mask entry is 0 (an empty mask means none ignored).
  void accumulate(const LabelMap& predictions, const LabelMap& labels, const LabelMap& mask = {}) {
    if (predictions.shape() != labels.shape()) {
      throw ShapeError("accumulate: predictions " + shape_str(predictions.shape()) + " vs labels " +
                       shape_str(labels.shape()));
    }
    if (!mask.empty() && mask.shape() != labels.shape()) throw ShapeError("accumulate: mask shape");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (!mask.empty() && mask[i]) continue;
      const auto y = labels[i];
      if (y == kIgnoreLabel) continue;
      const auto p = predictions[i];
      if (y >= C_) throw ShapeError("accumulate: label " + std::to_string(y) + " out of range");
      if (p >= C_) throw ShapeError("accumulate: prediction " + std::to_string(p) + " out of range");
      ++at(y, p);
    }
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.C_ != C_) throw ShapeError("merging confusion matrices of different sizes");
    for (std::size_t i = 0; i < n_.size(); ++i) n_[i] += o.n_[i];
    return *this;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

  static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
    ConfusionMatrix m(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != rows.size()) throw ShapeError("confusion matrix must be square");
      for (std::size_t j = 0; j < rows.size(); ++j) m.at(i, j) = rows[i][j];
    }
    return m;
  }

 private:
  std::size_t C_ = 0;
  std::vector<std::uint64_t> n_;
};

inline constexpr std::uint64_t kMaxExactFloatCount = 1ULL << 24;

/// The f32 tensor file stores counts exactly only up to 2^24.
inline void save_confusion(const ConfusionMatrix& m, const fs::path& path) {
  Tensor<float> t(Shape{m.classes(), m.classes()});
  for (std::size_t i = 0; i < m.classes(); ++i) {
    for (std::size_t j = 0; j < m.classes(); ++j) {
      if (m.at(i, j) > kMaxExactFloatCount) {
        throw FormatError("confusion count exceeds 2^24 and cannot be stored exactly");
      }
      t[i * m.classes() + j] = static_cast<float>(m.at(i, j));
    }
  }
  write_tensor_file(path, t);
}

inline ConfusionMatrix load_confusion(const fs::path& path) {
  auto t = read_tensor_file<float>(path);
  if (t.rank() != 2 || t.dim(0) != t.dim(1)) throw FormatError("confusion matrix must be square");
  ConfusionMatrix m(t.dim(0));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float v = t[i];
    if (!(v >= 0) || v != std::floor(v)) throw FormatError("confusion counts must be nonnegative integers");
    m.at(i / t.dim(0), i % t.dim(0)) = static_cast<std::uint64_t>(v);
  }
  return m;
}

struct ClassMetrics {
  std::string name;
  double precision = 0, recall = 0, f1 = 0, iou = 0;
  std::uint64_t support = 0;  // t_c
};

struct EvalReport {
  std::string mode;
  std::vector<ClassMetrics> classes;
  std::vector<std::size_t> excluded;
  double overall_accuracy = 0;
  double mean_class_accuracy = 0;
  double average_f1 = 0;
  std::uint64_t pixels = 0;

  const ClassMetrics& cls(std::size_t c) const { return classes.at(c); }
};

inline double f1_score(double precision, double recall) {
  return precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
}

/// Per-class rates from counts. Averages skip excluded classes and classes
/// absent from the ground truth; undefined ratios are reported as 0.
inline EvalReport metrics(const ConfusionMatrix& n, const std::vector<std::size_t>& excluded = {},
                          const std::vector<std::string>& names = {}, const std::string& mode = "") {
  const std::size_t C = n.classes();
  const std::uint64_t total = n.total();
  if (C == 0 || total == 0) throw NumericError("metrics of an empty confusion matrix");
  EvalReport r;
  r.mode = mode;
  r.excluded = excluded;
  r.pixels = total;
  std::uint64_t diag = 0;
  double acc_sum = 0, f1_sum = 0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < C; ++c) {
    ClassMetrics m;
    m.name = c < names.size() ? names[c] : "class" + std::to_string(c);
    const double ncc = static_cast<double>(n.at(c, c));
    const std::uint64_t t = n.row_total(c), p = n.col_total(c);
    m.support = t;
    m.precision = p ? ncc / static_cast<double>(p) : 0.0;
    m.recall = t ? ncc / static_cast<double>(t) : 0.0;
    m.f1 = f1_score(m.precision, m.recall);
    const double uni = static_cast<double>(t + p) - ncc;
    m.iou = uni > 0 ? ncc / uni : 0.0;
    diag += n.at(c, c);
    const bool skip = std::find(excluded.begin(), excluded.end(), c) != excluded.end();
    if (!skip && t > 0) {
      acc_sum += m.recall;
      f1_sum += m.f1;
      ++counted;
    }
    r.classes.push_back(m);
  }
  r.overall_accuracy = static_cast<double>(diag) / static_cast<double>(total);
  r.mean_class_accuracy = counted ? acc_sum / counted : 0.0;
  r.average_f1 = counted ? f1_sum / counted : 0.0;
  return r;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : r.classes) {
    classes.push_back({{"name", c.name}, {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1},
                       {"iou", c.iou}, {"support", c.support}});
  }
  return {{"mode", r.mode},
          {"classes", classes},
          {"excluded_classes", r.excluded},
          {"overall_accuracy", r.overall_accuracy},
          {"mean_class_accuracy", r.mean_class_accuracy},
          {"average_f1", r.average_f1},
          {"pixels", r.pixels}};
}

/// Column layout: per-class F1 and accuracy, then Avg F1, Avg Acc, Acc (percent).
inline std::string report_table(const EvalReport& r) {
  std::string out;
  char buf[64];
  out += "mode: " + r.mode + "\n";
  out += "metric ";
  for (const auto& c : r.classes) {
    std::snprintf(buf, sizeof buf, " %10s", c.name.substr(0, 10).c_str());
    out += buf;
  }
  out += "     Avg F1    Avg Acc        Acc\n";
  auto row = [&](const char* label, auto get, bool totals) {
    std::snprintf(buf, sizeof buf, "%-6s ", label);
    out += buf;
    for (const auto& c : r.classes) {
      std::snprintf(buf, sizeof buf, " %10.2f", 100.0 * get(c));
      out += buf;
    }
    if (totals) {
      std::snprintf(buf, sizeof buf, " %10.2f %10.2f %10.2f", 100 * r.average_f1, 100 * r.mean_class_accuracy,
                    100 * r.overall_accuracy);
      out += buf;
    }
    out += "\n";
  };
  row("F1", [](const ClassMetrics& c) { return c.f1; }, true);
  row("Acc", [](const ClassMetrics& c) { return c.recall; }, false);
  return out;
}

// ---------------------------------------------------------------------------
// tiled inference

/// Scores (1, C, h, w) for one tile of per-modality inputs (1, Ck, h, w).
using TileScorer = std::function<Tensor<float>(const ModalityInputs<float>&)>;

inline std::size_t thread_budget() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("HALLUCINET_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
  }
  return n;
}

struct TileSpec {
  std::size_t tile = 256;
  std::size_t halo = 64;
};

namespace detail {

inline std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

// Tile origins along one axis; the last is clamped to the padded extent.
inline std::vector<std::size_t> tile_origins(std::size_t extent, std::size_t tile, std::size_t step) {
  std::vector<std::size_t> out;
  for (std::size_t o = 0;; o += step) {
    if (o + tile >= extent) {
      out.push_back(extent - tile);
      break;
    }
    out.push_back(o);
  }
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// For each coordinate, the origin index whose tile keeps it farthest from an edge.
inline std::vector<std::size_t> owner_of(std::size_t extent, std::size_t tile, const std::vector<std::size_t>& origins) {
  std::vector<std::size_t> owner(extent, 0);
  for (std::size_t y = 0; y < extent; ++y) {
    long best = -1;
    for (std::size_t k = 0; k < origins.size(); ++k) {
      const std::size_t o = origins[k];
      if (y < o || y >= o + tile) continue;
      const long d = static_cast<long>(std::min(y - o, o + tile - 1 - y));
      if (d > best) {
        best = d;
        owner[y] = k;
      }
    }
  }
  return owner;
}

}  // namespace detail

/// Class scores for a whole scene assembled from overlapping tiles. Each
/// pixel comes from the tile where it lies farthest from a tile edge; tile
/// origins are multiples of the network's downsample factor. Scenes are
/// zero-padded to a multiple of that factor and to at least one tile.
inline Tensor<float> tiled_scores(const TileScorer& scorer, const std::map<std::string, Tensor<float>>& rasters,
                                  std::size_t downsample_factor, const TileSpec& spec) {
  if (rasters.empty()) throw MissingModalityError("tiled inference without inputs");
  const std::size_t f = downsample_factor;
  if (spec.tile == 0 || spec.tile % f) {
    throw ConfigError("tile size must be a positive multiple of " + std::to_string(f));
  }
  const auto& first = rasters.begin()->second;
  const std::size_t H = first.dim(1), W = first.dim(2);
  for (const auto& [m, r] : rasters) {
    if (r.rank() != 3 || r.dim(1) != H || r.dim(2) != W) throw ShapeError("modality rasters differ in size");
  }
  const std::size_t PH = std::max(spec.tile, detail::round_up(H, f));
  const std::size_t PW = std::max(spec.tile, detail::round_up(W, f));
  const std::size_t tile = spec.tile;
  std::size_t step = tile > 2 * spec.halo ? (tile - 2 * spec.halo) / f * f : 0;
  step = std::max(step, f);
  const auto rows = detail::tile_origins(PH, tile, step);
  const auto cols = detail::tile_origins(PW, tile, step);
  const auto row_owner = detail::owner_of(PH, tile, rows);
  const auto col_owner = detail::owner_of(PW, tile, cols);

  Tensor<float> scores;
  std::size_t C = 0;
  for (std::size_t ti = 0; ti < rows.size(); ++ti) {
    for (std::size_t tj = 0; tj < cols.size(); ++tj) {
      const std::size_t r0 = rows[ti], c0 = cols[tj];
      // does this tile own any real pixel?
      bool owns = false;
      for (std::size_t y = r0; y < std::min(r0 + tile, H) && !owns; ++y) owns = row_owner[y] == ti;
      bool owns_c = false;
      for (std::size_t x = c0; x < std::min(c0 + tile, W) && !owns_c; ++x) owns_c = col_owner[x] == tj;
      if (!owns || !owns_c) continue;
      ModalityInputs<float> inputs;
      for (const auto& [m, r] : rasters) {
        const std::size_t Ck = r.dim(0);
        Tensor<float> t(Shape{1, Ck, tile, tile}, 0.f);
        for (std::size_t k = 0; k < Ck; ++k) {
          for (std::size_t y = r0; y < std::min(r0 + tile, H); ++y) {
            const std::size_t len = c0 < W ? std::min(c0 + tile, W) - c0 : 0;
            std::copy_n(r.data() + (k * H + y) * W + c0, len, t.data() + (k * tile + (y - r0)) * tile);
          }
        }
        inputs.emplace(m, std::move(t));
      }
      auto s = scorer(inputs);
      if (s.rank() != 4 || s.dim(2) != tile || s.dim(3) != tile) throw ShapeError("scorer returned " + shape_str(s.shape()));
      if (scores.empty()) {
        C = s.dim(1);
        scores = Tensor<float>(Shape{1, C, H, W}, 0.f);
      }
      for (std::size_t y = r0; y < std::min(r0 + tile, H); ++y) {
        if (row_owner[y] != ti) continue;
        for (std::size_t x = c0; x < std::min(c0 + tile, W); ++x) {
          if (col_owner[x] != tj) continue;
          for (std::size_t k = 0; k < C; ++k) {
            scores[(k * H + y) * W + x] = s[(k * tile + (y - r0)) * tile + (x - c0)];
          }
        }
      }
    }
  }
  return scores;
}

inline LabelMap tiled_inference(const TileScorer& scorer, const std::map<std::string, Tensor<float>>& rasters,
                                std::size_t downsample_factor, const TileSpec& spec) {
  auto s = tiled_scores(scorer, rasters, downsample_factor, spec);
  auto labels = argmax_channels(s);
  return labels.reshaped(Shape{s.dim(2), s.dim(3)});
}

/// Probability scorer for a bundle under a fixed availability pattern.
inline TileScorer bundle_scorer(ModelBundle<float>& bundle, const AvailabilityMask& availability) {
  return [&bundle, availability](const ModalityInputs<float>& in) { return predict_proba(bundle, in, availability); };
}

inline TileScorer ensemble_scorer(ModelBundle<float>& a, ModelBundle<float>& b, const AvailabilityMask& availability) {
  return [&a, &b, availability](const ModalityInputs<float>& in) { return ensemble_proba(a, b, in, availability); };
}

// ---------------------------------------------------------------------------
// evaluation over a split

enum class Scenario { one, two, three, all };

inline Scenario scenario_from_string(const std::string& s) {
  if (s == "1") return Scenario::one;
  if (s == "2") return Scenario::two;
  if (s == "3") return Scenario::three;
  if (s == "all") return Scenario::all;
  throw ConfigError("scenario must be 1, 2, 3 or all, got '" + s + "'");
}

inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::one: return "1";
    case Scenario::two: return "2";
    case Scenario::three: return "3";
    case Scenario::all: return "all";
  }
  return "?";
}

struct EvalOptions {
  TileSpec tile;
  std::string scenario1_missing = "depth";  // the modality Scenario 1 removes
  std::size_t threads = 0;                  // 0: HALLUCINET_THREADS or hardware
};

/// Availability used for one scene under a scenario: 1 drops one modality
/// everywhere, 2 follows the manifest's per-scene flags, 3 drops every
/// optional modality, "all" keeps them all.
inline AvailabilityMask scenario_availability(Scenario s, const DatasetManifest& m, const std::string& scene,
                                              const EvalOptions& opt) {
  const auto optional = m.optional_modalities();
  switch (s) {
    case Scenario::all: return AvailabilityMask::all(optional);
    case Scenario::three: return AvailabilityMask::none(optional);
    case Scenario::two: return m.availability(scene);
    case Scenario::one: {
      auto a = AvailabilityMask::all(optional);
      if (!m.has_modality(opt.scenario1_missing) || opt.scenario1_missing == kPrimaryModality) {
        throw ConfigError("scenario 1 cannot remove modality '" + opt.scenario1_missing + "'");
      }
      a.flags[opt.scenario1_missing] = false;
      return a;
    }
  }
  return {};
}

/// A model as seen by the evaluator: which inputs it reads under an
/// availability pattern, and a scorer for that pattern.
struct EvalModel {
  std::function<std::vector<std::string>(const AvailabilityMask&)> inputs;
  std::function<TileScorer(const AvailabilityMask&)> scorer;
  std::size_t downsample_factor = 32;
  std::size_t class_count = 0;
};

inline std::vector<std::string> routed_inputs(const ModelBundle<float>& b, const AvailabilityMask& a) {
  std::set<std::string> s;
  for (const auto& r : select_branches(b, a)) s.insert(input_modality(r));
  return {s.begin(), s.end()};
}

inline EvalModel eval_model(ModelBundle<float>& b) {
  return {[&b](const AvailabilityMask& a) { return routed_inputs(b, a); },
          [&b](const AvailabilityMask& a) { return bundle_scorer(b, a); }, b.config.downsample_factor(),
          b.config.class_count};
}

inline EvalModel eval_ensemble(ModelBundle<float>& a, ModelBundle<float>& b) {
  return {[&a, &b](const AvailabilityMask& m) {
            auto x = routed_inputs(a, m), y = routed_inputs(b, m);
            std::set<std::string> s(x.begin(), x.end());
            s.insert(y.begin(), y.end());
            return std::vector<std::string>(s.begin(), s.end());
          },
          [&a, &b](const AvailabilityMask& m) { return ensemble_scorer(a, b, m); }, a.config.downsample_factor(),
          a.config.class_count};
}

struct SceneResult {
  std::string id;
  std::vector<std::string> routed;
  ConfusionMatrix confusion;
};

struct Evaluation {
  EvalReport report;
  ConfusionMatrix confusion;
  std::vector<SceneResult> scenes;
};

/// Runs tiled inference on each scene of `split` with the scenario's
/// availability, accumulates boundary-eroded confusion, and reports metrics.
/// Scenes run on up to `threads` workers; per-scene matrices are summed.
inline Evaluation evaluate(const EvalModel& model, const DatasetManifest& m, const std::string& split, Scenario scenario,
                           const EvalOptions& opt = {}) {
  if (model.class_count != m.class_count) {
    throw MismatchError("model has " + std::to_string(model.class_count) + " classes, dataset " +
                        std::to_string(m.class_count));
  }
  const auto& ids = m.split(split);
  std::vector<SceneResult> results(ids.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < ids.size(); i = next++) {
      try {
        const auto avail = scenario_availability(scenario, m, ids[i], opt);
        const auto needed = model.inputs(avail);
        for (const auto& mod : needed) {
          if (!m.has_modality(mod)) throw MismatchError("model reads modality " + mod + " absent from the dataset");
        }
        Scene s = load_scene(m, ids[i], needed);
        std::map<std::string, Tensor<float>> rasters;
        for (const auto& mod : needed) rasters.emplace(mod, s.rasters.at(mod));
        auto pred = tiled_inference(model.scorer(avail), rasters, model.downsample_factor, opt.tile);
        ConfusionMatrix cm(m.class_count);
        cm.accumulate(pred, s.labels, boundary_eroded_mask(s.labels));
        results[i] = {ids[i], needed, std::move(cm)};
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = ids.size();
      }
    }
  };
  const std::size_t n = std::min(opt.threads ? opt.threads : thread_budget(), ids.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  Evaluation ev;
  ev.confusion = ConfusionMatrix(m.class_count);
  for (const auto& r : results) ev.confusion += r.confusion;
  ev.report = metrics(ev.confusion, m.excluded_classes, m.class_names, to_string(scenario));
  ev.scenes = std::move(results);
  return ev;
}

/// Scores stored label maps `dir/<scene id>.mtns` against the split.
inline Evaluation evaluate_predictions(const DatasetManifest& m, const std::string& split, const fs::path& dir) {
  Evaluation ev;
  ev.confusion = ConfusionMatrix(m.class_count);
  for (const auto& id : m.split(split)) {
    const auto labels = read_tensor_file<std::uint8_t>(m.scene_dir(id) / "labels.mtns");
    const auto pred = read_tensor_file<std::uint8_t>(dir / (id + ".mtns"));
    if (pred.shape() != labels.shape()) {
      throw MismatchError("prediction for " + id + " has shape " + shape_str(pred.shape()) + ", labels " +
                          shape_str(labels.shape()));
    }
    ConfusionMatrix cm(m.class_count);
    cm.accumulate(pred, labels, boundary_eroded_mask(labels));
    ev.confusion += cm;
    ev.scenes.push_back({id, {}, std::move(cm)});
  }
  ev.report = metrics(ev.confusion, m.excluded_classes, m.class_names, "predictions");
  return ev;
}

}  // namespace hallucinet
