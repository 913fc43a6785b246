#pragma once

#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <string>

#include "json.hpp"

#include "hallucinet/segnet.hpp"
#include "hallucinet/tensor_file.hpp"

namespace hallucinet {

inline constexpr int kCheckpointFormat = 1;

inline nlohmann::json branch_config_to_json(const BranchConfig& c) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : c.blocks) blocks.push_back({{"width", b.width}, {"convs", b.convs}});
  return {{"blocks", blocks},
          {"first_conv_stride", c.first_conv_stride},
          {"tap_depth", c.tap_depth},
          {"class_count", c.class_count}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline BranchConfig branch_config_from_json(const nlohmann::json& j, BranchConfig c = {}) {
  static const std::set<std::string> known{"blocks", "first_conv_stride", "tap_depth", "class_count"};
  if (!j.is_object()) throw ConfigError("model section must be an object");
  for (const auto& [k, _] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown model key '" + k + "'");
  }
  try {
    if (j.contains("blocks")) {
      c.blocks.clear();
      for (const auto& b : j.at("blocks")) {
        for (const auto& [k, _] : b.items()) {
          if (k != "width" && k != "convs") throw ConfigError("unknown block key '" + k + "'");
        }
        c.blocks.push_back({b.at("width").get<std::size_t>(), b.value("convs", std::size_t{2})});
      }
    }
    c.first_conv_stride = j.value("first_conv_stride", c.first_conv_stride);
    c.tap_depth = j.value("tap_depth", c.tap_depth);
    c.class_count = j.value("class_count", c.class_count);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model section: ") + e.what());
  }
  c.validate();
  return c;
}

namespace detail {

inline std::string tensor_file_name(const std::string& name) {
  std::string out = name;
  for (auto& ch : out) {
    if (ch == '/') ch = '.';
  }
  return out + ".mtns";
}

}  // namespace detail

/// Writes `dir/header.json` and one tensor file per parameter and
/// batchnorm buffer.
template <class T>
void save_checkpoint(ModelBundle<T>& bundle, const std::filesystem::path& dir, const std::string& stage,
                     const nlohmann::json& meta = nlohmann::json::object()) {
  bundle.validate();
  std::filesystem::create_directories(dir / "tensors");
  nlohmann::json h;
  h["format"] = kCheckpointFormat;
  h["stage"] = stage;
  h["config"] = branch_config_to_json(bundle.config);
  h["optional_modalities"] = bundle.optional_modalities;
  h["modality_channels"] = bundle.modality_channels;
  h["meta"] = meta;
  h["branches"] = nlohmann::json::array();
  for (auto& [role, b] : bundle.branches) {
    nlohmann::json entry{{"role", role}, {"input_channels", b.input_channels()}};
    std::vector<std::string> frozen;
    std::vector<std::string> tensors;
    for (auto* p : b.parameters()) {
      if (!p->trainable) frozen.push_back(p->name);
      tensors.push_back(p->name);
      write_tensor_file(dir / "tensors" / detail::tensor_file_name(p->name), p->value().template cast<float>());
    }
    for (auto& [name, buf] : b.buffers()) {
      tensors.push_back(name);
      write_tensor_file(dir / "tensors" / detail::tensor_file_name(name), buf->template cast<float>());
    }
    entry["frozen"] = frozen;
    entry["tensors"] = tensors;
    h["branches"].push_back(entry);
  }
  write_file_bytes(dir / "header.json", h.dump(2) + "\n");
}

struct CheckpointInfo {
  std::string stage;
  nlohmann::json meta;
};

template <class T>
ModelBundle<T> load_checkpoint(const std::filesystem::path& dir, CheckpointInfo* info = nullptr) {
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(read_file_bytes(dir / "header.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("checkpoint header: " + std::string(e.what()));
  }
  ModelBundle<T> bundle;
  try {
    if (h.at("format").get<int>() != kCheckpointFormat) {
      throw FormatError("unsupported checkpoint format " + h.at("format").dump());
    }
    bundle.config = branch_config_from_json(h.at("config"));
    bundle.optional_modalities = h.at("optional_modalities").get<std::vector<std::string>>();
    bundle.modality_channels = h.at("modality_channels").get<std::map<std::string, std::size_t>>();
    std::mt19937_64 rng(0);
    for (const auto& e : h.at("branches")) {
      const auto role = e.at("role").get<std::string>();
      auto net = build_branch<T>(bundle.config, e.at("input_channels").get<std::size_t>(), role, rng);
      std::map<std::string, Tensor<T>*> slots;
      for (auto* p : net.parameters()) slots[p->name] = &p->mutable_value();
      for (auto& [name, buf] : net.buffers()) slots[name] = buf;
      const auto listed = e.at("tensors").get<std::vector<std::string>>();
      if (listed.size() != slots.size()) throw MismatchError("checkpoint branch " + role + " tensor count differs");
      for (const auto& name : listed) {
        auto it = slots.find(name);
        if (it == slots.end()) throw MismatchError("checkpoint tensor " + name + " does not fit branch " + role);
        auto t = read_tensor_file<float>(dir / "tensors" / detail::tensor_file_name(name));
        if (t.shape() != it->second->shape()) {
          throw MismatchError("checkpoint tensor " + name + " has shape " + shape_str(t.shape()) +
                              ", expected " + shape_str(it->second->shape()));
        }
        *it->second = t.template cast<T>();
      }
      const auto frozen = e.at("frozen").get<std::vector<std::string>>();
      const std::set<std::string> frozen_set(frozen.begin(), frozen.end());
      for (auto* p : net.parameters()) p->set_trainable(!frozen_set.count(p->name));
      bundle.branches.emplace(role, std::move(net));
    }
    if (info) {
      info->stage = h.at("stage").get<std::string>();
      info->meta = h.value("meta", nlohmann::json::object());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint header: " + std::string(e.what()));
  }
  bundle.validate();
  return bundle;
}

}  // namespace hallucinet
