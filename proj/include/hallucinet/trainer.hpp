#pragma once

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "hallucinet/checkpoint.hpp"
#include "hallucinet/dataset.hpp"
#include "hallucinet/objective.hpp"
#include "hallucinet/optim.hpp"

namespace hallucinet {

/// Which network a protocol run produces.
enum class ProtocolKind {
  single,  // rgb + depth + hallucinated depth
  multi,   // rgb + ir + depth + both hallucinations
  full,    // every real modality, no hallucination
  rgb,     // the always-available branch alone
};

inline std::string to_string(ProtocolKind k) {
  switch (k) {
    case ProtocolKind::single: return "single";
    case ProtocolKind::multi: return "multi";
    case ProtocolKind::full: return "full";
    case ProtocolKind::rgb: return "rgb";
  }
  return "?";
}

inline ProtocolKind protocol_kind_from_string(const std::string& s) {
  if (s == "single") return ProtocolKind::single;
  if (s == "multi") return ProtocolKind::multi;
  if (s == "full") return ProtocolKind::full;
  if (s == "rgb") return ProtocolKind::rgb;
  throw ConfigError("unknown training mode '" + s + "' (single, multi, full, rgb)");
}

struct TrainConfig {
  ProtocolKind mode = ProtocolKind::single;
  std::size_t pretrain_steps = 600;
  std::size_t joint_steps = 400;
  double pretrain_lr = 1e-3;
  double finetune_lr = 1e-4;
  std::size_t batch_size = 4;
  double clip = 1.0;
  GammaPolicy gamma;
  std::uint64_t seed = 0;
  bool mfb = true;
  PatchSpec patch;
  AdamConfig adam;  // learning_rate is overridden per stage

  void validate(std::size_t downsample_factor) const {
    if (pretrain_steps == 0 || joint_steps == 0) throw ConfigError("stage budgets must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(clip > 0)) throw ConfigError("clip threshold must be positive");
    if (!(pretrain_lr >= 0) || !(finetune_lr >= 0)) throw ConfigError("learning rates must be nonnegative");
    if (!(gamma.multiplier > 0)) throw ConfigError("gamma multiplier must be positive");
    if (gamma.calibration_batches == 0) throw ConfigError("calibration_batches must be positive");
    patch.validate(downsample_factor);
  }
};

/// One optimization step (or a stage event) of the training log.
struct LogRecord {
  std::string stage;
  std::size_t step = 0;
  std::vector<std::pair<std::string, double>> terms;
  double gamma = 1.0;
  double total = 0.0;
  double grad_max_pre = 0.0;
  double grad_max_post = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json t = nlohmann::json::object();
    for (const auto& [n, v] : terms) t[n] = v;
    return {{"stage", stage}, {"step", step}, {"terms", t}, {"gamma", gamma}, {"total", total},
            {"grad_max_pre", grad_max_pre}, {"grad_max_post", grad_max_post}};
  }
};

/// Collects records in memory and optionally streams them as JSON lines.
class TrainingLog {
 public:
  explicit TrainingLog(std::ostream* sink = nullptr) : sink_(sink) {}

  void add(LogRecord r) {
    if (sink_) *sink_ << r.to_json().dump() << '\n';
    records_.push_back(std::move(r));
  }
  void event(const nlohmann::json& j) {
    if (sink_) *sink_ << j.dump() << '\n';
  }
  const std::vector<LogRecord>& records() const { return records_; }
  std::vector<LogRecord> stage(const std::string& name) const {
    std::vector<LogRecord> out;
    for (const auto& r : records_) {
      if (r.stage == name) out.push_back(r);
    }
    return out;
  }

 private:
  std::ostream* sink_;
  std::vector<LogRecord> records_;
};

/// In-memory training data: the train split with every modality loaded.
struct TrainingData {
  DatasetManifest manifest;
  std::vector<Scene> scenes;
  ClassWeights weights;
  std::vector<double> frequencies;
};

inline ClassWeights training_weights(const std::vector<double>& freq, bool mfb) {
  return mfb ? compute_class_weights(freq) : ClassWeights::uniform(freq.size());
}

inline TrainingData make_training_data(DatasetManifest manifest, std::vector<Scene> scenes, bool mfb) {
  if (scenes.empty()) throw ConfigError("training split is empty");
  TrainingData d;
  std::vector<const LabelMap*> labels;
  for (const auto& s : scenes) labels.push_back(&s.labels);
  d.frequencies = label_frequencies(labels, manifest.class_count);
  d.weights = training_weights(d.frequencies, mfb);
  d.manifest = std::move(manifest);
  d.scenes = std::move(scenes);
  return d;
}

inline TrainingData load_training_data(const DatasetManifest& m, bool mfb) {
  std::vector<std::string> all;
  for (const auto& mod : m.modalities) all.push_back(mod.name);
  std::vector<Scene> scenes;
  for (const auto& id : m.split("train")) scenes.push_back(load_scene(m, id, all));
  return make_training_data(m, std::move(scenes), mfb);
}

namespace detail {

inline std::uint64_t stage_seed(std::uint64_t seed, const std::string& tag) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (char c : tag) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  return h ^ (seed * 0x9e3779b97f4a7c15ULL);
}

template <class T>
BranchOutputs<T> forward_roles(ModelBundle<T>& bundle, const std::vector<std::string>& roles,
                               const Batch<T>& batch, Mode mode) {
  BranchOutputs<T> out;
  for (const auto& role : roles) {
    const auto& x = batch.inputs.at(input_modality(role));
    out.emplace(role, bundle.branch(role).forward(Var<T>::constant(x), mode));
  }
  return out;
}

inline std::vector<std::string> spec_roles(const std::vector<TermSpec>& spec) {
  std::set<std::string> s;
  for (const auto& t : spec) s.insert(t.roles.begin(), t.roles.end());
  return {s.begin(), s.end()};
}

inline std::vector<std::string> spec_modalities(const std::vector<TermSpec>& spec) {
  std::set<std::string> s;
  for (const auto& r : spec_roles(spec)) s.insert(input_modality(r));
  return {s.begin(), s.end()};
}

template <class Fn>
auto run_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const NumericError& e) {
    throw DivergenceError(stage, e.what());
  }
}

}  // namespace detail

/// Trains one branch on its own cross-entropy. Returns the per-step loss.
template <class T>
std::vector<double> train_branch(BranchNet<T>& branch, const TrainingData& data, const TrainConfig& cfg,
                                 std::size_t steps, double lr, const std::string& stage,
                                 TrainingLog* log = nullptr, std::uint64_t sampler_seed = 0) {
  const std::string modality = input_modality(branch.role());
  return detail::run_stage(stage, [&] {
    PatchSampler sampler(&data.scenes, cfg.patch, {modality}, sampler_seed);
    AdamConfig ac = cfg.adam;
    ac.learning_rate = lr;
    Adam<T> opt(ac);
    auto params = branch.parameters();
    std::vector<double> curve;
    curve.reserve(steps);
    for (std::size_t step = 0; step < steps; ++step) {
      auto batch = sampler.template next<T>(cfg.batch_size);
      auto out = branch.forward(Var<T>::constant(batch.inputs.at(modality)), Mode::train);
      auto loss = weighted_cross_entropy(out.logits, batch.labels, data.weights);
      backward(loss);
      const auto clip = clip_gradients(params, cfg.clip);
      opt.step(params);
      zero_gradients(params);
      const double v = loss.value().item();
      curve.push_back(v);
      if (log) log->add({stage, step, {{branch.role(), v}}, 1.0, v, clip.max_pre, clip.max_post});
    }
    return curve;
  });
}

/// Branches trained alone on their modality: the shared first stage of
/// every protocol.
template <class T>
using PretrainedBranches = std::map<std::string, BranchNet<T>>;

template <class T>
BranchNet<T> pretrain_branch(const std::string& modality, const TrainingData& data, const BranchConfig& model,
                             const TrainConfig& cfg, TrainingLog* log = nullptr,
                             const std::string& variant = "") {
  std::mt19937_64 rng(detail::stage_seed(cfg.seed, "init/" + variant + modality));
  auto net = build_branch<T>(model, data.manifest.channels(modality), modality, rng);
  train_branch(net, data, cfg, cfg.pretrain_steps, cfg.pretrain_lr, "pretrain_" + modality, log,
               detail::stage_seed(cfg.seed, "pretrain/" + variant + modality));
  return net;
}

struct ProtocolReport {
  double gamma = 1.0;
  LossBreakdown calibration;  // raw terms (gamma = 1) on the calibration batches
  std::map<std::string, double> hallucinate_start, hallucinate_end;  // on the first calibration batch
  std::vector<std::string> frozen;  // parameter names held fixed in the joint stage
};

template <class T>
struct ProtocolResult {
  ModelBundle<T> bundle;
  ProtocolReport report;
};

inline std::vector<TermSpec> protocol_terms(ProtocolKind kind, const std::vector<std::string>& optional) {
  switch (kind) {
    case ProtocolKind::single: return single_missing_terms();
    case ProtocolKind::multi: return multi_missing_terms();
    case ProtocolKind::full: return full_modality_terms(optional);
    case ProtocolKind::rgb: return full_modality_terms({});
  }
  return {};
}

inline std::vector<std::string> protocol_modalities(ProtocolKind kind, const DatasetManifest& m) {
  switch (kind) {
    case ProtocolKind::single: return {"depth"};
    case ProtocolKind::multi: return {"ir", "depth"};
    case ProtocolKind::full: return m.optional_modalities();
    case ProtocolKind::rgb: return {};
  }
  return {};
}

/// Staged protocol: (1) pretrain each real branch alone, (2) initialize
/// hallucination branches from their targets, (3) calibrate gamma, (4) joint
/// fine-tuning with the targets' layers up to the tap frozen. Branches found
/// in `pretrained` skip stage 1; newly trained ones are added to it.
template <class T>
ProtocolResult<T> run_protocol(const TrainingData& data, const BranchConfig& model, const TrainConfig& cfg,
                               TrainingLog* log = nullptr, const std::filesystem::path& out_dir = {},
                               PretrainedBranches<T>* pretrained = nullptr, const std::string& variant = "") {
  cfg.validate(model.downsample_factor());
  if (model.class_count != data.manifest.class_count) {
    throw MismatchError("model class_count " + std::to_string(model.class_count) + " != dataset " +
                        std::to_string(data.manifest.class_count));
  }
  const ProtocolKind kind = cfg.mode;
  const auto optional = protocol_modalities(kind, data.manifest);
  for (const auto& m : optional) {
    if (!data.manifest.has_modality(m)) {
      throw MissingModalityError("training mode " + to_string(kind) + " needs modality " + m);
    }
  }
  const bool hallucinate = kind == ProtocolKind::single || kind == ProtocolKind::multi;
  const auto spec = protocol_terms(kind, optional);
  const std::string tag = variant.empty() ? to_string(kind) + "/" : variant;

  ProtocolResult<T> result;
  auto& bundle = result.bundle;
  bundle.config = model;
  bundle.optional_modalities = optional;
  bundle.modality_channels[kPrimaryModality] = data.manifest.channels(kPrimaryModality);
  for (const auto& m : optional) bundle.modality_channels[m] = data.manifest.channels(m);

  // stage 1
  PretrainedBranches<T> local;
  auto& cache = pretrained ? *pretrained : local;
  std::vector<std::string> real{kPrimaryModality};
  real.insert(real.end(), optional.begin(), optional.end());
  for (const auto& m : real) {
    if (!cache.count(m)) cache.emplace(m, pretrain_branch<T>(m, data, model, cfg, log, variant));
    if (!(cache.at(m).config() == model)) throw MismatchError("pretrained branch " + m + " has another config");
    bundle.branches.emplace(m, cache.at(m));
  }
  if (!out_dir.empty()) save_checkpoint(bundle, out_dir / "stage1_pretrain", "pretrain");

  // stage 2
  if (hallucinate) {
    std::mt19937_64 rng(detail::stage_seed(cfg.seed, tag + "hal_init"));
    for (const auto& m : optional) {
      bundle.branches.emplace(hallucination_role(m),
                              init_hallucination_from(bundle.branch(m), bundle.modality_channels.at(kPrimaryModality), rng));
    }
    if (!out_dir.empty()) save_checkpoint(bundle, out_dir / "stage2_init", "hallucination_init");
  }

  // freezing applies to the hallucination targets only
  if (hallucinate) {
    for (const auto& m : optional) {
      bundle.branch(m).freeze_through_block(model.tap_depth);
      for (auto* p : bundle.branch(m).parameters()) {
        if (!p->trainable) result.report.frozen.push_back(p->name);
      }
    }
  }

  const auto roles = detail::spec_roles(spec);
  const auto modalities = detail::spec_modalities(spec);
  PatchSampler sampler(&data.scenes, cfg.patch, modalities, detail::stage_seed(cfg.seed, tag + "joint"));

  // stage 3: gamma from the first batches of stage 4, on a scratch copy so
  // batchnorm statistics are untouched
  double gamma = 1.0;
  std::vector<Batch<T>> calibration;
  {
    PatchSampler peek = sampler;
    for (std::size_t k = 0; k < cfg.gamma.calibration_batches; ++k) {
      calibration.push_back(peek.template next<T>(cfg.batch_size));
    }
  }
  if (hallucinate) {
    gamma = detail::run_stage("calibrate", [&] {
      NoGradGuard no_grad;
      ModelBundle<T> scratch = bundle;
      LossBreakdown mean;
      for (const auto& b : calibration) {
        auto outs = detail::forward_roles(scratch, roles, b, Mode::train);
        auto raw = composite_loss(spec, outs, b.labels, data.weights, 1.0).breakdown;
        if (mean.terms.empty()) {
          mean = raw;
        } else {
          for (std::size_t i = 0; i < raw.terms.size(); ++i) mean.terms[i].second += raw.terms[i].second;
        }
      }
      for (auto& [_, v] : mean.terms) v /= static_cast<double>(calibration.size());
      mean.total = mean.recomposed_total();
      result.report.calibration = mean;
      return calibrate_gamma(mean, cfg.gamma);
    });
    if (log) {
      log->event({{"stage", "calibrate"}, {"gamma", gamma}, {"raw_terms", LogRecord{"", 0, result.report.calibration.terms}.to_json()["terms"]}});
    }
  }
  result.report.gamma = gamma;

  auto hallucinate_terms = [&](ModelBundle<T>& b) {
    NoGradGuard no_grad;
    std::map<std::string, double> out;
    auto outs = detail::forward_roles(b, roles, calibration.front(), Mode::infer);
    for (const auto& t : spec) {
      if (t.kind == TermKind::hallucinate) {
        out[t.name] = hallucination_loss(outs.at(t.roles[0]).tap, outs.at(t.roles[1]).tap).value().item();
      }
    }
    return out;
  };
  if (hallucinate) result.report.hallucinate_start = hallucinate_terms(bundle);

  // stage 4
  detail::run_stage("joint", [&] {
    AdamConfig ac = cfg.adam;
    ac.learning_rate = cfg.finetune_lr;
    Adam<T> opt(ac);
    auto params = bundle.parameters();
    for (std::size_t step = 0; step < cfg.joint_steps; ++step) {
      auto batch = sampler.template next<T>(cfg.batch_size);
      auto outs = detail::forward_roles(bundle, roles, batch, Mode::train);
      auto loss = composite_loss(spec, outs, batch.labels, data.weights, gamma);
      backward(loss.total);
      const auto clip = clip_gradients(params, cfg.clip);
      opt.step(params);
      zero_gradients(params);
      if (log) {
        log->add({"joint", step, loss.breakdown.terms, gamma, loss.breakdown.total, clip.max_pre, clip.max_post});
      }
    }
    return 0;
  });
  if (hallucinate) result.report.hallucinate_end = hallucinate_terms(bundle);
  if (!out_dir.empty()) {
    save_checkpoint(bundle, out_dir / "stage4_joint", "joint",
                    {{"gamma", gamma}, {"mode", to_string(kind)}, {"class_weights", data.weights.values}});
  }
  return result;
}

}  // namespace hallucinet
