#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "hallucinet/segnet.hpp"

namespace hallucinet {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double learning_rate = 1e-3;
};

/// Bias-corrected Adam keyed by parameter name. Parameters that are not
/// trainable, or have no gradient this step, are left untouched.
template <class T>
class Adam {
 public:
  struct Moments {
    std::vector<double> m, v;
  };

  explicit Adam(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  std::size_t steps() const { return step_; }
  const std::map<std::string, Moments>& moments() const { return state_; }

  void step(const std::vector<Parameter<T>*>& params) {
    ++step_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (auto* p : params) {
      if (!p->trainable) continue;
      const auto& g = p->var.grad();
      if (g.empty()) continue;
      if (!g.all_finite()) throw NumericError("non-finite gradient for " + p->name);
      auto& st = state_[p->name];
      auto& w = p->mutable_value();
      if (st.m.size() != w.size()) {
        if (!st.m.empty()) throw ShapeError("optimizer state shape changed for " + p->name);
        st.m.assign(w.size(), 0.0);
        st.v.assign(w.size(), 0.0);
      }
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        st.m[i] = b1 * st.m[i] + (1 - b1) * gi;
        st.v[i] = b2 * st.v[i] + (1 - b2) * gi * gi;
        const double mhat = st.m[i] / c1, vhat = st.v[i] / c2;
        w[i] = static_cast<T>(w[i] - config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon));
      }
    }
  }

 private:
  AdamConfig config_;
  std::size_t step_ = 0;
  std::map<std::string, Moments> state_;
};

struct ClipStats {
  double max_pre = 0.0;   // largest |g| before clipping
  double max_post = 0.0;  // and after
};

/// Elementwise clamp of every gradient to [-threshold, threshold].
template <class T>
ClipStats clip_gradients(const std::vector<Parameter<T>*>& params, double threshold) {
  if (!(threshold > 0)) throw ConfigError("clip threshold must be positive");
  ClipStats s;
  const T hi = static_cast<T>(threshold);
  for (auto* p : params) {
    if (p->var.grad().empty()) continue;
    for (auto& g : p->var.grad_buffer().values()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient for " + p->name);
      s.max_pre = std::max(s.max_pre, static_cast<double>(std::abs(g)));
      g = std::clamp(g, -hi, hi);
      s.max_post = std::max(s.max_post, static_cast<double>(std::abs(g)));
    }
  }
  return s;
}

template <class T>
void zero_gradients(const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) p->var.zero_grad();
}

}  // namespace hallucinet
