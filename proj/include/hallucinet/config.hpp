#pragma once

#include <optional>
#include <set>
#include <string>

#include "json.hpp"

#include "hallucinet/checkpoint.hpp"
#include "hallucinet/evaluator.hpp"
#include "hallucinet/synthetic.hpp"
#include "hallucinet/trainer.hpp"

namespace hallucinet {

struct DataSection {
  std::string manifest;                      // dataset directory
  std::optional<SyntheticConfig> synthetic;  // generation block for gen-data
};

struct EvalSection {
  std::string scenario = "all";
  std::string baseline = "hallucination";
  std::string split = "test";
  std::string scenario1_missing = "depth";
  std::map<std::string, bool> availability;  // overrides for infer
  TileSpec tile;
  std::size_t threads = 0;
};

/// Whole-run configuration. Unknown keys are rejected everywhere; `to_json`
/// writes every field, defaults included.
struct RunConfig {
  DataSection data;
  BranchConfig model;
  bool class_count_from_data = true;  // model.class_count not given explicitly
  TrainConfig train;
  EvalSection eval;

  RunConfig() {
    model.blocks = {{8, 2}, {16, 2}, {16, 2}, {32, 2}};
    train.patch.size = 128;
  }
};

namespace config_detail {

using nlohmann::json;

// Reads known keys of one object and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError(name_ + " must be an object");
  }

  template <class V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& at(const std::string& key) const { return j_.at(key); }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown key '" + name_ + "." + k + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

inline SyntheticConfig synthetic_from_json(const json& j) {
  SyntheticConfig c;
  Section s(j, "data.synthetic");
  s.get("seed", c.seed);
  s.get("train_scenes", c.train_scenes);
  s.get("val_scenes", c.val_scenes);
  s.get("test_scenes", c.test_scenes);
  s.get("size", c.size);
  s.get("class_count", c.class_count);
  s.get("with_ir", c.with_ir);
  s.get("rare_fraction", c.rare_fraction);
  s.get("building_fraction", c.building_fraction);
  s.get("vegetation_fraction", c.vegetation_fraction);
  s.get("clutter_fraction", c.clutter_fraction);
  s.get("texture_amplitude", c.texture_amplitude);
  s.get("pixel_noise", c.pixel_noise);
  s.get("roof_cell", c.roof_cell);
  s.get("vegetation_tint", c.vegetation_tint);
  s.get("depth_noise", c.depth_noise);
  s.get("ir_noise", c.ir_noise);
  s.get("missing_fraction", c.missing_fraction);
  s.finish();
  c.validate();
  return c;
}

}  // namespace config_detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using config_detail::Section;
  RunConfig c;
  Section top(j, "config");

  if (top.has("data")) {
    Section d(top.at("data"), "data");
    d.get("manifest", c.data.manifest);
    if (d.has("synthetic")) c.data.synthetic = config_detail::synthetic_from_json(top.at("data").at("synthetic"));
    d.finish();
  }
  if (top.has("model")) {
    c.model = branch_config_from_json(top.at("model"), c.model);
    c.class_count_from_data = !top.at("model").contains("class_count");
  }
  if (top.has("objective")) {
    Section o(top.at("objective"), "objective");
    o.get("mfb", c.train.mfb);
    o.get("gamma_multiplier", c.train.gamma.multiplier);
    o.get("calibration_batches", c.train.gamma.calibration_batches);
    o.finish();
  }
  if (top.has("train")) {
    Section t(top.at("train"), "train");
    std::string mode = to_string(c.train.mode);
    t.get("mode", mode);
    c.train.mode = protocol_kind_from_string(mode);
    t.get("pretrain_steps", c.train.pretrain_steps);
    t.get("joint_steps", c.train.joint_steps);
    t.get("pretrain_lr", c.train.pretrain_lr);
    t.get("finetune_lr", c.train.finetune_lr);
    t.get("batch_size", c.train.batch_size);
    t.get("clip", c.train.clip);
    t.get("seed", c.train.seed);
    t.get("patch_size", c.train.patch.size);
    t.get("patch_overlap", c.train.patch.overlap);
    t.get("flips", c.train.patch.flips);
    t.get("rotations", c.train.patch.rotations);
    t.get("adam_beta1", c.train.adam.beta1);
    t.get("adam_beta2", c.train.adam.beta2);
    t.get("adam_epsilon", c.train.adam.epsilon);
    t.finish();
  }
  if (top.has("eval")) {
    Section e(top.at("eval"), "eval");
    e.get("scenario", c.eval.scenario);
    e.get("baseline", c.eval.baseline);
    e.get("split", c.eval.split);
    e.get("scenario1_missing", c.eval.scenario1_missing);
    e.get("availability", c.eval.availability);
    e.get("tile", c.eval.tile.tile);
    e.get("halo", c.eval.tile.halo);
    e.get("threads", c.eval.threads);
    e.finish();
    scenario_from_string(c.eval.scenario);
  }
  top.finish();
  c.model.validate();
  c.train.validate(c.model.downsample_factor());
  if (c.eval.tile.tile % c.model.downsample_factor()) {
    throw ConfigError("eval.tile must be a multiple of " + std::to_string(c.model.downsample_factor()));
  }
  return c;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json data{{"manifest", c.data.manifest}};
  if (c.data.synthetic) data["synthetic"] = synthetic_config_to_json(*c.data.synthetic);
  const auto& t = c.train;
  return {{"data", data},
          {"model", branch_config_to_json(c.model)},
          {"objective",
           {{"mfb", t.mfb}, {"gamma_multiplier", t.gamma.multiplier}, {"calibration_batches", t.gamma.calibration_batches}}},
          {"train",
           {{"mode", to_string(t.mode)},
            {"pretrain_steps", t.pretrain_steps},
            {"joint_steps", t.joint_steps},
            {"pretrain_lr", t.pretrain_lr},
            {"finetune_lr", t.finetune_lr},
            {"batch_size", t.batch_size},
            {"clip", t.clip},
            {"seed", t.seed},
            {"patch_size", t.patch.size},
            {"patch_overlap", t.patch.overlap},
            {"flips", t.patch.flips},
            {"rotations", t.patch.rotations},
            {"adam_beta1", t.adam.beta1},
            {"adam_beta2", t.adam.beta2},
            {"adam_epsilon", t.adam.epsilon}}},
          {"eval",
           {{"scenario", c.eval.scenario},
            {"baseline", c.eval.baseline},
            {"split", c.eval.split},
            {"scenario1_missing", c.eval.scenario1_missing},
            {"availability", c.eval.availability},
            {"tile", c.eval.tile.tile},
            {"halo", c.eval.tile.halo},
            {"threads", c.eval.threads}}}};
}

inline RunConfig load_run_config(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace hallucinet
