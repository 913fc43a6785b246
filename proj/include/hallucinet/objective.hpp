#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "hallucinet/segnet.hpp"

namespace hallucinet {

inline constexpr std::uint8_t kIgnoreLabel = 255;
inline constexpr double kProbabilityFloor = 1e-12;

struct ClassWeights {
  std::vector<double> values;

  static ClassWeights uniform(std::size_t classes) {
    return ClassWeights{std::vector<double>(classes, 1.0)};
  }
  std::size_t size() const { return values.size(); }
  double operator[](std::size_t c) const { return values[c]; }
};

/// Median; for an even count, the mean of the two middle values.
inline double median(std::vector<double> v) {
  if (v.empty()) throw ConfigError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Median frequency balancing: w_c = median(f) / f_c.
inline ClassWeights compute_class_weights(std::span<const double> frequencies) {
  if (frequencies.empty()) throw ConfigError("no class frequencies");
  for (std::size_t c = 0; c < frequencies.size(); ++c) {
    const double f = frequencies[c];
    if (!(f >= 0.0) || !std::isfinite(f)) {
      throw ConfigError("class frequency must be finite and nonnegative");
    }
    if (f == 0.0) {
      throw ConfigError("class " + std::to_string(c) +
                        " has zero frequency; drop it from the class set or supply data");
    }
  }
  const double med = median(std::vector<double>(frequencies.begin(), frequencies.end()));
  ClassWeights w;
  w.values.reserve(frequencies.size());
  for (double f : frequencies) w.values.push_back(med / f);
  return w;
}

/// -(1/N) sum_n w_{y_n} log p_{y_n}, over non-ignored pixels, with the
/// softmax taken over channels and p floored at 1e-12.
template <class T>
Var<T> weighted_cross_entropy(const Var<T>& logits, const LabelMap& labels,
                              const ClassWeights& weights, std::uint8_t ignore = kIgnoreLabel) {
  const auto& z = logits.value();
  require_rank(z, 4, "weighted_cross_entropy logits");
  const std::size_t N = z.dim(0), C = z.dim(1), H = z.dim(2), W = z.dim(3), HW = H * W;
  require_shape(labels, Shape{N, H, W}, "weighted_cross_entropy labels");
  if (weights.size() != C) {
    throw ShapeError("weighted_cross_entropy: " + std::to_string(weights.size()) +
                     " class weights for " + std::to_string(C) + " classes");
  }
  const double log_floor = std::log(kProbabilityFloor);
  auto probs = std::make_shared<Tensor<T>>(softmax_channels(z));
  std::size_t counted = 0;
  double acc = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < HW; ++p) {
      const std::uint8_t y = labels[n * HW + p];
      if (y == ignore) continue;
      if (y >= C) throw ShapeError("label " + std::to_string(y) + " outside the class set");
      const T* zp = z.data() + n * C * HW + p;
      double m = zp[0];
      for (std::size_t c = 1; c < C; ++c) m = std::max(m, static_cast<double>(zp[c * HW]));
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) s += std::exp(zp[c * HW] - m);
      const double logp = std::max(zp[y * HW] - m - std::log(s), log_floor);
      acc -= weights[y] * logp;
      ++counted;
    }
  }
  if (counted == 0) throw NumericError("weighted_cross_entropy: every pixel is ignored");
  const double inv = 1.0 / static_cast<double>(counted);
  return make_op<T>(
      "weighted_cross_entropy", Tensor<T>::scalar(static_cast<T>(acc * inv)), {logits},
      [probs, labels, w = weights.values, ignore, inv, N, C, HW](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        const double up = self.grad[0] * inv;
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t p = 0; p < HW; ++p) {
            const std::uint8_t y = labels[n * HW + p];
            if (y == ignore) continue;
            const std::size_t base = n * C * HW + p;
            // clamped log has zero slope
            if ((*probs)[base + y * HW] <= kProbabilityFloor) continue;
            const double k = up * w[y];
            for (std::size_t c = 0; c < C; ++c) {
              const double target = c == y ? 1.0 : 0.0;
              g[base + c * HW] += static_cast<T>(k * ((*probs)[base + c * HW] - target));
            }
          }
        }
      });
}

/// mean((sigmoid(target) - sigmoid(hal))^2). The target is a constant: no
/// gradient reaches it.
template <class T>
Var<T> hallucination_loss(const Var<T>& tap_target, const Var<T>& tap_hal) {
  if (tap_target.shape() != tap_hal.shape()) {
    throw ShapeError("hallucination_loss: tap shapes differ " + shape_str(tap_target.shape()) +
                     " vs " + shape_str(tap_hal.shape()));
  }
  const auto& t = tap_target.value();
  const auto& h = tap_hal.value();
  auto diff = std::make_shared<std::vector<double>>(h.size());
  auto sig = std::make_shared<std::vector<double>>(h.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double sh = sigmoid_value<double>(h[i]);
    const double d = sigmoid_value<double>(t[i]) - sh;
    (*diff)[i] = d;
    (*sig)[i] = sh;
    acc += d * d;
  }
  const double n = static_cast<double>(h.size());
  return make_op<T>("hallucination_loss", Tensor<T>::scalar(static_cast<T>(acc / n)),
                    {tap_hal},
                    [diff, sig, n](Node<T>& self) {
                      auto& g = self.parents[0]->grad_buffer();
                      const double up = self.grad[0] * 2.0 / n;
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        const double s = (*sig)[i];
                        g[i] += static_cast<T>(-up * (*diff)[i] * s * (1.0 - s));
                      }
                    });
}

// ---------------------------------------------------------------------------
// composite objectives

enum class TermKind { hallucinate, individual, joint };

struct TermSpec {
  std::string name;
  TermKind kind;
  std::vector<std::string> roles;  // hallucinate: {target, hallucination}
};

/// gamma * L_hallucinate + L_depth + L_rgb + L_hal + L_rgb+depth + L_rgb+hal
inline std::vector<TermSpec> single_missing_terms() {
  return {
      {"hallucinate", TermKind::hallucinate, {"depth", "hal_depth"}},
      {"depth", TermKind::individual, {"depth"}},
      {"rgb", TermKind::individual, {"rgb"}},
      {"hal", TermKind::individual, {"hal_depth"}},
      {"rgb+depth", TermKind::joint, {"rgb", "depth"}},
      {"rgb+hal", TermKind::joint, {"rgb", "hal_depth"}},
  };
}

/// Two mimicry terms sharing gamma, five individual terms and the four
/// availability combinations.
inline std::vector<TermSpec> multi_missing_terms() {
  return {
      {"hallucinate_ir", TermKind::hallucinate, {"ir", "hal_ir"}},
      {"hallucinate_depth", TermKind::hallucinate, {"depth", "hal_depth"}},
      {"ir", TermKind::individual, {"ir"}},
      {"depth", TermKind::individual, {"depth"}},
      {"rgb", TermKind::individual, {"rgb"}},
      {"hal_depth", TermKind::individual, {"hal_depth"}},
      {"hal_ir", TermKind::individual, {"hal_ir"}},
      {"rgb+hal_ir+depth", TermKind::joint, {"rgb", "hal_ir", "depth"}},
      {"rgb+ir+hal_depth", TermKind::joint, {"rgb", "ir", "hal_depth"}},
      {"rgb+ir+depth", TermKind::joint, {"rgb", "ir", "depth"}},
      {"rgb+hal_ir+hal_depth", TermKind::joint, {"rgb", "hal_ir", "hal_depth"}},
  };
}

/// Reference model trained on every modality: one term per branch plus the
/// all-branch fusion.
inline std::vector<TermSpec> full_modality_terms(const std::vector<std::string>& optional) {
  std::vector<TermSpec> terms{{"rgb", TermKind::individual, {"rgb"}}};
  std::vector<std::string> all{"rgb"};
  std::string joint = "rgb";
  for (const auto& m : optional) {
    terms.push_back({m, TermKind::individual, {m}});
    all.push_back(m);
    joint += "+" + m;
  }
  if (all.size() > 1) terms.push_back({joint, TermKind::joint, all});
  return terms;
}

struct LossBreakdown {
  std::vector<std::pair<std::string, double>> terms;  // in objective order
  std::set<std::string> hallucinate;                  // names of gamma-scaled terms
  double gamma = 1.0;
  double total = 0.0;

  std::size_t size() const { return terms.size(); }

  double term(const std::string& name) const {
    for (const auto& [n, v] : terms) {
      if (n == name) return v;
    }
    throw ConfigError("no loss term named '" + name + "'");
  }

  double hallucinate_sum() const {
    double s = 0.0;
    for (const auto& [n, v] : terms) {
      if (hallucinate.count(n)) s += v;
    }
    return s;
  }

  double max_other() const {
    double m = 0.0;
    for (const auto& [n, v] : terms) {
      if (!hallucinate.count(n)) m = std::max(m, v);
    }
    return m;
  }

  /// gamma * (sum of mimicry terms) + sum of the rest, in double.
  double recomposed_total() const {
    double others = 0.0;
    for (const auto& [n, v] : terms) {
      if (!hallucinate.count(n)) others += v;
    }
    return gamma * hallucinate_sum() + others;
  }
};

template <class T>
struct CompositeLoss {
  LossBreakdown breakdown;
  Var<T> total;
};

template <class T>
using BranchOutputs = std::map<std::string, BranchOutput<T>>;

template <class T>
CompositeLoss<T> composite_loss(const std::vector<TermSpec>& spec, const BranchOutputs<T>& outputs,
                                const LabelMap& labels, const ClassWeights& weights, double gamma) {
  auto output = [&](const std::string& role) -> const BranchOutput<T>& {
    auto it = outputs.find(role);
    if (it == outputs.end()) throw ConfigError("composite loss: missing output of branch " + role);
    return it->second;
  };
  CompositeLoss<T> out;
  out.breakdown.gamma = gamma;
  Var<T> mimicry, rest;
  auto accumulate = [](Var<T>& acc, const Var<T>& v) { acc = acc.defined() ? add(acc, v) : v; };
  for (const auto& t : spec) {
    Var<T> value;
    switch (t.kind) {
      case TermKind::hallucinate:
        value = hallucination_loss(output(t.roles.at(0)).tap, output(t.roles.at(1)).tap);
        accumulate(mimicry, value);
        out.breakdown.hallucinate.insert(t.name);
        break;
      case TermKind::individual:
        value = weighted_cross_entropy(output(t.roles.at(0)).logits, labels, weights);
        accumulate(rest, value);
        break;
      case TermKind::joint: {
        std::vector<Var<T>> logits;
        for (const auto& r : t.roles) logits.push_back(output(r).logits);
        value = weighted_cross_entropy(fuse_logits(logits), labels, weights);
        accumulate(rest, value);
        break;
      }
    }
    out.breakdown.terms.emplace_back(t.name, static_cast<double>(value.value().item()));
  }
  if (mimicry.defined()) {
    auto scaled = scale(mimicry, static_cast<T>(gamma));
    out.total = rest.defined() ? add(scaled, rest) : scaled;
  } else {
    out.total = rest;
  }
  out.breakdown.total = static_cast<double>(out.total.value().item());
  return out;
}

template <class T>
CompositeLoss<T> composite_loss_single(const BranchOutputs<T>& outputs, const LabelMap& labels,
                                       const ClassWeights& weights, double gamma) {
  return composite_loss(single_missing_terms(), outputs, labels, weights, gamma);
}

template <class T>
CompositeLoss<T> composite_loss_multi(const BranchOutputs<T>& outputs, const LabelMap& labels,
                                      const ClassWeights& weights, double gamma) {
  return composite_loss(multi_missing_terms(), outputs, labels, weights, gamma);
}

struct GammaPolicy {
  double multiplier = 10.0;
  std::size_t calibration_batches = 1;
};

/// gamma = multiplier * max(non-mimicry terms) / sum(mimicry terms), so the
/// weighted mimicry loss starts at `multiplier` times the largest other term.
/// Returns 1 (with a warning) when the mimicry terms are zero.
inline double calibrate_gamma(const LossBreakdown& raw, const GammaPolicy& policy) {
  if (!(policy.multiplier > 0.0)) throw ConfigError("gamma multiplier must be positive");
  const double hal = raw.hallucinate_sum();
  if (!(hal > 0.0)) {
    std::clog << "warning: zero hallucination loss at calibration; using gamma = 1\n";
    return 1.0;
  }
  return policy.multiplier * raw.max_other() / hal;
}

}  // namespace hallucinet
