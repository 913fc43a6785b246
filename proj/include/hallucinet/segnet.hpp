#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "hallucinet/ops.hpp"

namespace hallucinet {

inline constexpr const char* kPrimaryModality = "rgb";
inline constexpr const char* kHallucinationPrefix = "hal_";

inline std::string hallucination_role(const std::string& modality) {
  return kHallucinationPrefix + modality;
}

inline bool is_hallucination_role(const std::string& role) {
  return role.rfind(kHallucinationPrefix, 0) == 0;
}

/// Modality whose input a branch consumes: hallucination branches read the
/// always-available modality.
inline std::string input_modality(const std::string& role) {
  return is_hallucination_role(role) ? std::string(kPrimaryModality) : role;
}

struct BlockSpec {
  std::size_t width = 0;
  std::size_t convs = 2;
  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

struct BranchConfig {
  std::vector<BlockSpec> blocks{{32, 2}, {64, 2}, {128, 2}, {256, 2}};
  std::size_t first_conv_stride = 2;
  std::size_t tap_depth = 3;  // pooling layer whose output feeds the mimicry loss
  std::size_t class_count = 6;

  void validate() const {
    if (blocks.empty()) throw ConfigError("branch needs at least one block");
    for (const auto& b : blocks) {
      if (b.width == 0 || b.convs == 0) {
        throw ConfigError("block widths and conv counts must be positive");
      }
    }
    if (first_conv_stride == 0) throw ConfigError("first_conv_stride must be positive");
    if (tap_depth < 1 || tap_depth > blocks.size()) {
      throw ConfigError("tap_depth must lie in [1, " + std::to_string(blocks.size()) + "]");
    }
    if (class_count < 2 || class_count > 255) {
      throw ConfigError("class_count must lie in [2, 255]");
    }
  }

  /// Input extent divided by score-map extent.
  std::size_t downsample_factor() const { return first_conv_stride << blocks.size(); }

  /// Conservative bound on how far (in input pixels) an output pixel can
  /// see; the full receptive-field extent is used as the radius.
  std::size_t receptive_field_radius() const {
    std::size_t extent = 1, jump = 1;
    bool first = true;
    for (const auto& b : blocks) {
      for (std::size_t j = 0; j < b.convs; ++j) {
        extent += 2 * jump;
        if (first) {
          jump *= first_conv_stride;
          first = false;
        }
      }
      extent += jump;
      jump *= 2;
    }
    return extent + jump;
  }

  friend bool operator==(const BranchConfig&, const BranchConfig&) = default;
};

template <class T>
struct Parameter {
  std::string name;
  Var<T> var;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> value, bool train = true)
      : name(std::move(n)), var(Var<T>::leaf(std::move(value), train)), trainable(train) {}

  // Copies own fresh leaves: a copied network never aliases the original.
  Parameter(const Parameter& o)
      : name(o.name), var(Var<T>::leaf(o.var.value(), o.trainable)), trainable(o.trainable) {}
  Parameter& operator=(const Parameter& o) {
    if (this != &o) {
      name = o.name;
      trainable = o.trainable;
      var = Var<T>::leaf(o.var.value(), o.trainable);
    }
    return *this;
  }
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  const Tensor<T>& value() const { return var.value(); }
  Tensor<T>& mutable_value() { return var.mutable_value(); }

  void set_trainable(bool on) {
    trainable = on;
    var.set_requires_grad(on);
    if (!on) var.zero_grad();
  }
};

// conv3x3 -> batchnorm -> relu
template <class T>
struct ConvUnit {
  std::size_t block = 0;  // 1-based
  std::size_t stride = 1;
  Parameter<T> weight, bias, bn_scale, bn_shift;
  BatchNormState<T> bn;

  bool frozen() const { return !weight.trainable; }
};

template <class T>
struct BranchOutput {
  Var<T> tap;     // pooled activation at the tap depth, pre-sigmoid
  Var<T> scores;  // class scores before upsampling
  Var<T> logits;  // (N, C, H, W) at input resolution
};

enum class BranchKind { modality, hallucination };

template <class T>
class BranchNet {
 public:
  BranchNet() = default;

  const BranchConfig& config() const { return config_; }
  const std::string& role() const { return role_; }
  std::size_t input_channels() const { return input_channels_; }
  BranchKind kind() const {
    return is_hallucination_role(role_) ? BranchKind::hallucination : BranchKind::modality;
  }

  std::vector<ConvUnit<T>>& units() { return units_; }
  const std::vector<ConvUnit<T>>& units() const { return units_; }
  Parameter<T>& score_weight() { return score_weight_; }
  Parameter<T>& score_bias() { return score_bias_; }
  Parameter<T>& upsample_weight() { return upsample_weight_; }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& u : units_) {
      out.insert(out.end(), {&u.weight, &u.bias, &u.bn_scale, &u.bn_shift});
    }
    out.insert(out.end(), {&score_weight_, &score_bias_, &upsample_weight_});
    return out;
  }

  std::vector<const Parameter<T>*> parameters() const {
    std::vector<const Parameter<T>*> out;
    for (auto* p : const_cast<BranchNet*>(this)->parameters()) out.push_back(p);
    return out;
  }

  /// Running batchnorm statistics, named like parameters.
  std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto& u : units_) {
      const std::string prefix = unit_prefix(u);
      out.emplace_back(prefix + "/bn/running_mean", &u.bn.running_mean);
      out.emplace_back(prefix + "/bn/running_var", &u.bn.running_var);
    }
    return out;
  }

  /// Marks every parameter of blocks 1..depth as not trainable.
  void freeze_through_block(std::size_t depth) {
    for (auto& u : units_) {
      if (u.block <= depth) {
        for (auto* p : {&u.weight, &u.bias, &u.bn_scale, &u.bn_shift}) p->set_trainable(false);
      }
    }
  }

  void unfreeze_all() {
    for (auto* p : parameters()) p->set_trainable(true);
  }

  /// Renames the branch and every parameter it owns.
  void set_role(const std::string& role) {
    for (auto* p : parameters()) p->name = role + p->name.substr(role_.size());
    role_ = role;
  }

  BranchOutput<T> forward(const Var<T>& input, Mode mode) {
    const auto& s = input.shape();
    if (s.size() != 4 || s[1] != input_channels_) {
      throw ShapeError("branch " + role_ + " expects (N, " + std::to_string(input_channels_) +
                       ", H, W) input, got " + shape_str(s));
    }
    const std::size_t f = config_.downsample_factor();
    if (s[2] % f || s[3] % f) {
      throw ShapeError("branch " + role_ + ": spatial extents must be multiples of " +
                       std::to_string(f) + ", got " + shape_str(s));
    }
    BranchOutput<T> out;
    Var<T> x = input;
    std::size_t i = 0;
    for (std::size_t b = 1; b <= config_.blocks.size(); ++b) {
      for (; i < units_.size() && units_[i].block == b; ++i) {
        auto& u = units_[i];
        x = conv2d(x, u.weight.var, u.bias.var, u.stride, 1);
        // frozen layers keep their running statistics
        const Mode m = u.frozen() ? Mode::infer : mode;
        x = batchnorm(x, u.bn_scale.var, u.bn_shift.var, u.bn, m);
        x = relu(x);
      }
      x = maxpool2(x);
      if (b == config_.tap_depth) out.tap = x;
    }
    out.scores = conv2d(x, score_weight_.var, score_bias_.var, 1, 0);
    const auto geo = upsample_geometry(f);
    out.logits = transposed_conv2d(out.scores, upsample_weight_.var, f, geo.padding);
    return out;
  }

  template <class U>
  friend BranchNet<U> build_branch(const BranchConfig&, std::size_t, const std::string&,
                                   std::mt19937_64&);
  template <class U>
  friend BranchNet<U> init_hallucination_from(const BranchNet<U>&, std::size_t,
                                              std::mt19937_64&);

 private:
  std::string unit_prefix(const ConvUnit<T>& u) const {
    std::size_t j = 0;
    for (const auto& v : units_) {
      if (&v == &u) break;
      if (v.block == u.block) ++j;
    }
    return role_ + "/block" + std::to_string(u.block) + "/conv" + std::to_string(j + 1);
  }

  BranchConfig config_;
  std::string role_;
  std::size_t input_channels_ = 0;
  std::vector<ConvUnit<T>> units_;
  Parameter<T> score_weight_, score_bias_, upsample_weight_;
};

namespace detail {

// fan-in scaled uniform, bound sqrt(6 / fan_in)
template <class T>
Tensor<T> fan_in_uniform(Shape shape, std::mt19937_64& rng) {
  const std::size_t fan_in = shape[1] * shape[2] * shape[3];
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> d(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

}  // namespace detail

/// Per block: (conv3x3 -> BN -> ReLU) x convs, then 2x2 max-pool; the first
/// conv carries the configured stride. A 1x1 score conv and one bilinear
/// transposed conv restore input resolution.
template <class T>
BranchNet<T> build_branch(const BranchConfig& config, std::size_t input_channels,
                          const std::string& role, std::mt19937_64& rng) {
  config.validate();
  if (input_channels == 0) throw ConfigError("input_channels must be positive");
  BranchNet<T> net;
  net.config_ = config;
  net.role_ = role;
  net.input_channels_ = input_channels;
  std::size_t in = input_channels;
  bool first = true;
  for (std::size_t b = 0; b < config.blocks.size(); ++b) {
    const std::size_t width = config.blocks[b].width;
    for (std::size_t j = 0; j < config.blocks[b].convs; ++j) {
      ConvUnit<T> u;
      u.block = b + 1;
      u.stride = first ? config.first_conv_stride : 1;
      first = false;
      const std::string prefix =
          role + "/block" + std::to_string(b + 1) + "/conv" + std::to_string(j + 1);
      u.weight = Parameter<T>(prefix + "/weight",
                              detail::fan_in_uniform<T>(Shape{width, in, 3, 3}, rng));
      u.bias = Parameter<T>(prefix + "/bias", Tensor<T>(Shape{width}, T{0}));
      u.bn_scale = Parameter<T>(prefix + "/bn/scale", Tensor<T>(Shape{width}, T{1}));
      u.bn_shift = Parameter<T>(prefix + "/bn/shift", Tensor<T>(Shape{width}, T{0}));
      u.bn = BatchNormState<T>(width);
      net.units_.push_back(std::move(u));
      in = width;
    }
  }
  const std::size_t C = config.class_count;
  net.score_weight_ =
      Parameter<T>(role + "/score/weight", detail::fan_in_uniform<T>(Shape{C, in, 1, 1}, rng));
  net.score_bias_ = Parameter<T>(role + "/score/bias", Tensor<T>(Shape{C}, T{0}));
  net.upsample_weight_ = Parameter<T>(
      role + "/upsample/weight", bilinear_upsample_weight<T>(C, config.downsample_factor()));
  return net;
}

/// Deep copy of `target` as the hallucination branch for its modality,
/// reading `input_channels` channels. A different channel count gets a
/// freshly initialized first conv; every other layer is copied.
template <class T>
BranchNet<T> init_hallucination_from(const BranchNet<T>& target, std::size_t input_channels,
                                     std::mt19937_64& rng) {
  if (target.kind() != BranchKind::modality) {
    throw ConfigError("hallucination branches are initialized from modality branches");
  }
  BranchNet<T> hal = target;
  hal.unfreeze_all();
  hal.set_role(hallucination_role(target.role()));
  if (input_channels != target.input_channels()) {
    auto fresh = build_branch<T>(target.config(), input_channels, hal.role(), rng);
    hal.units_.front() = std::move(fresh.units_.front());
    hal.input_channels_ = input_channels;
  }
  return hal;
}

using AvailabilityFlags = std::map<std::string, bool>;

/// Which optional modalities are present at inference. Modalities not
/// listed are treated as missing; the primary modality is always present.
struct AvailabilityMask {
  AvailabilityFlags flags;

  bool available(const std::string& modality) const {
    if (modality == kPrimaryModality) return true;
    auto it = flags.find(modality);
    return it != flags.end() && it->second;
  }

  static AvailabilityMask all(const std::vector<std::string>& modalities) {
    AvailabilityMask m;
    for (const auto& x : modalities) m.flags[x] = true;
    return m;
  }
  static AvailabilityMask none(const std::vector<std::string>& modalities) {
    AvailabilityMask m;
    for (const auto& x : modalities) m.flags[x] = false;
    return m;
  }
};

template <class T>
struct ModelBundle {
  BranchConfig config;
  std::vector<std::string> optional_modalities;  // routing order, e.g. {"ir", "depth"}
  std::map<std::string, std::size_t> modality_channels;
  std::map<std::string, BranchNet<T>> branches;

  bool has(const std::string& role) const { return branches.count(role) > 0; }

  BranchNet<T>& branch(const std::string& role) {
    auto it = branches.find(role);
    if (it == branches.end()) throw ConfigError("bundle has no branch '" + role + "'");
    return it->second;
  }
  const BranchNet<T>& branch(const std::string& role) const {
    return const_cast<ModelBundle*>(this)->branch(role);
  }

  std::vector<std::string> roles() const {
    std::vector<std::string> out;
    for (const auto& [r, _] : branches) out.push_back(r);
    return out;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& [_, b] : branches) {
      auto ps = b.parameters();
      out.insert(out.end(), ps.begin(), ps.end());
    }
    return out;
  }

  void validate() const {
    if (!has(kPrimaryModality)) throw ConfigError("bundle lacks the always-available branch");
    std::set<std::string> names;
    for (const auto& [role, b] : branches) {
      if (b.role() != role) throw ConfigError("branch role mismatch for " + role);
      if (!(b.config() == config)) throw ConfigError("branch " + role + " config differs");
      if (is_hallucination_role(role)) {
        const std::string target = role.substr(std::string(kHallucinationPrefix).size());
        if (std::find(optional_modalities.begin(), optional_modalities.end(), target) ==
            optional_modalities.end()) {
          throw ConfigError("hallucination branch " + role + " has no target modality");
        }
        if (b.input_channels() != modality_channels.at(kPrimaryModality)) {
          throw ConfigError(role + " must read the always-available modality");
        }
      } else if (role != kPrimaryModality &&
                 std::find(optional_modalities.begin(), optional_modalities.end(), role) ==
                     optional_modalities.end()) {
        throw ConfigError("branch " + role + " is not a declared modality");
      }
      for (const auto* p : b.parameters()) {
        if (!names.insert(p->name).second) throw ConfigError("duplicate parameter " + p->name);
      }
    }
  }
};

/// Branch roles used for a given availability pattern: the primary branch,
/// then per optional modality its own branch when present, otherwise its
/// hallucination branch (if the bundle has one).
template <class T>
std::vector<std::string> select_branches(const ModelBundle<T>& bundle,
                                         const AvailabilityMask& availability) {
  std::vector<std::string> roles{kPrimaryModality};
  for (const auto& m : bundle.optional_modalities) {
    if (availability.available(m) && bundle.has(m)) {
      roles.push_back(m);
    } else if (!availability.available(m) && bundle.has(hallucination_role(m))) {
      roles.push_back(hallucination_role(m));
    }
  }
  return roles;
}

/// Elementwise mean of branch logits (raw-score fusion).
template <class T>
Var<T> fuse_logits(const std::vector<Var<T>>& logits) {
  if (logits.empty()) throw ShapeError("fuse_logits: empty list");
  return mean_of(logits);
}

template <class T>
using ModalityInputs = std::map<std::string, Tensor<T>>;

/// Fused raw scores (N, C, H, W) of the branches routed for `availability`.
template <class T>
Tensor<T> fused_scores(ModelBundle<T>& bundle, const ModalityInputs<T>& inputs,
                       const AvailabilityMask& availability) {
  NoGradGuard no_grad;
  std::vector<Var<T>> logits;
  for (const auto& role : select_branches(bundle, availability)) {
    const std::string modality = input_modality(role);
    auto it = inputs.find(modality);
    if (it == inputs.end()) {
      throw MissingModalityError("no input for modality '" + modality + "' needed by branch " +
                                 role);
    }
    logits.push_back(bundle.branch(role).forward(Var<T>::constant(it->second), Mode::infer).logits);
  }
  return fuse_logits(logits).value();
}

/// Per-pixel argmax over channels, ties to the lowest class index.
template <class T>
LabelMap argmax_channels(const Tensor<T>& scores) {
  require_rank(scores, 4, "argmax_channels");
  const std::size_t N = scores.dim(0), C = scores.dim(1), HW = scores.dim(2) * scores.dim(3);
  LabelMap out(Shape{N, scores.dim(2), scores.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    const T* s = scores.data() + n * C * HW;
    for (std::size_t p = 0; p < HW; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c) {
        if (s[c * HW + p] > s[best * HW + p]) best = c;
      }
      out[n * HW + p] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

template <class T>
Tensor<T> predict_proba(ModelBundle<T>& bundle, const ModalityInputs<T>& inputs,
                        const AvailabilityMask& availability) {
  return softmax_channels(fused_scores(bundle, inputs, availability));
}

template <class T>
LabelMap predict(ModelBundle<T>& bundle, const ModalityInputs<T>& inputs,
                 const AvailabilityMask& availability) {
  return argmax_channels(predict_proba(bundle, inputs, availability));
}

/// Mean of the two models' softmax maps.
template <class T>
Tensor<T> ensemble_proba(ModelBundle<T>& a, ModelBundle<T>& b, const ModalityInputs<T>& inputs,
                         const AvailabilityMask& availability) {
  if (a.config.class_count != b.config.class_count) {
    throw ShapeError("ensemble members disagree on class count");
  }
  auto pa = predict_proba(a, inputs, availability);
  auto pb = predict_proba(b, inputs, availability);
  require_shape(pb, pa.shape(), "ensemble_predict");
  for (std::size_t i = 0; i < pa.size(); ++i) pa[i] = (pa[i] + pb[i]) / T{2};
  return pa;
}

template <class T>
LabelMap ensemble_predict(ModelBundle<T>& a, ModelBundle<T>& b, const ModalityInputs<T>& inputs,
                          const AvailabilityMask& availability) {
  return argmax_channels(ensemble_proba(a, b, inputs, availability));
}

}  // namespace hallucinet
