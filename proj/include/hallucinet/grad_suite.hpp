#pragma once

#include <chrono>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hallucinet/gradcheck.hpp"
#include "hallucinet/objective.hpp"
#include "hallucinet/ops.hpp"

namespace hallucinet {

/// One entry of the finite-difference suite: a scalar function of one
/// tensor plus the point to probe, drawn fresh for each trial.
struct GradCase {
  std::string name;
  std::string kind;  // "op" or "loss"
  std::function<std::pair<ScalarFn<double>, Tensor<double>>(std::mt19937_64&, int trial)> draw;
};

struct GradResult {
  std::string name;
  std::string kind;
  double max_relative_error = 0.0;
  int points = 0;
  bool passed = false;
};

namespace grad_detail {

inline Tensor<double> uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = d(rng);
  return t;
}

// Values bounded away from zero, so relu kinks and maxpool ties stay out of
// the difference stencil.
inline Tensor<double> off_zero(Shape shape, std::mt19937_64& rng) {
  auto t = uniform(std::move(shape), rng, 0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.values()) v = sign(rng) ? v : -v;
  return t;
}

inline Var<double> c(const Tensor<double>& t) { return Var<double>::constant(t); }

// Projects a tensor-valued op onto a random direction.
inline Var<double> project(const Var<double>& y, const Tensor<double>& probe) { return sum(mul(y, c(probe))); }

inline LabelMap random_labels(Shape shape, std::size_t classes, std::mt19937_64& rng) {
  LabelMap l(std::move(shape));
  for (auto& v : l.values()) v = static_cast<std::uint8_t>(rng() % (classes + 1));
  for (auto& v : l.values()) v = v == classes ? kIgnoreLabel : v;
  l[0] = 0;
  return l;
}

struct RandomOutputs {
  BranchOutputs<double> map;
  LabelMap labels;
};

inline RandomOutputs random_outputs(const std::vector<std::string>& roles, std::mt19937_64& rng) {
  RandomOutputs o;
  o.labels = random_labels({2, 4, 4}, 3, rng);
  for (const auto& r : roles) {
    BranchOutput<double> b;
    b.tap = c(uniform({2, 2, 2, 2}, rng, -2, 2));
    b.scores = c(uniform({2, 3, 1, 1}, rng));
    b.logits = c(uniform({2, 3, 4, 4}, rng, -2, 2));
    o.map.emplace(r, b);
  }
  return o;
}

inline GradCase composite_case(const std::string& name, const std::vector<std::string>& roles, bool multi) {
  return {name, "loss", [roles, multi](std::mt19937_64& rng, int trial) {
            auto o = random_outputs(roles, rng);
            // rotate the probed input over every branch's logits and the hallucination taps
            std::vector<std::pair<std::string, bool>> inputs;
            for (const auto& r : roles) {
              inputs.emplace_back(r, false);
              if (is_hallucination_role(r)) inputs.emplace_back(r, true);
            }
            const auto [role, by_tap] = inputs[static_cast<std::size_t>(trial) % inputs.size()];
            const ClassWeights w{{0.8, 1.0, 1.6}};
            ScalarFn<double> f = [o, role, by_tap, w, multi](const Var<double>& v) {
              auto m = o.map;
              (by_tap ? m[role].tap : m[role].logits) = v;
              return (multi ? composite_loss(multi_missing_terms(), m, o.labels, w, 4.0)
                            : composite_loss(single_missing_terms(), m, o.labels, w, 4.0))
                  .total;
            };
            const auto& at = by_tap ? o.map.at(role).tap : o.map.at(role).logits;
            return std::pair{f, at.value()};
          }};
}

}  // namespace grad_detail

/// Every differentiable engine operation once, then the losses.
inline std::vector<GradCase> gradient_cases() {
  using namespace grad_detail;
  using Draw = std::pair<ScalarFn<double>, Tensor<double>>;
  std::vector<GradCase> cases;
  auto binary = [&](const std::string& name, Var<double> (*op)(const Var<double>&, const Var<double>&)) {
    cases.push_back({name, "op", [op](std::mt19937_64& rng, int) -> Draw {
                       auto other = uniform({2, 3}, rng), probe = uniform({2, 3}, rng);
                       return {[=](const Var<double>& v) { return project(op(v, c(other)), probe); },
                               uniform({2, 3}, rng)};
                     }});
  };
  binary("add", &add<double>);
  binary("sub", &sub<double>);
  binary("mul", &mul<double>);
  cases.push_back({"scale", "op", [](std::mt19937_64& rng, int) -> Draw {
                     auto probe = uniform({4}, rng);
                     return {[=](const Var<double>& v) { return project(scale(v, -1.7), probe); }, uniform({4}, rng)};
                   }});
  cases.push_back({"square", "op", [](std::mt19937_64& rng, int) -> Draw {
                     auto probe = uniform({4}, rng);
                     return {[=](const Var<double>& v) { return project(square(v), probe); }, uniform({4}, rng)};
                   }});
  cases.push_back({"sum", "op", [](std::mt19937_64& rng, int) -> Draw {
                     auto probe = uniform({3, 2}, rng);
                     return {[=](const Var<double>& v) { return square(sum(mul(v, c(probe)))); }, uniform({3, 2}, rng)};
                   }});
  cases.push_back({"mean", "op", [](std::mt19937_64& rng, int) -> Draw {
                     auto probe = uniform({3, 2}, rng);
                     return {[=](const Var<double>& v) { return square(mean(mul(v, c(probe)))); }, uniform({3, 2}, rng)};
                   }});
  cases.push_back({"mean_of", "op", [](std::mt19937_64& rng, int) -> Draw {
                     auto a = uniform({2, 2}, rng), b = uniform({2, 2}, rng), probe = uniform({2, 2}, rng);
                     return {[=](const Var<double>& v) { return project(mean_of<double>({c(a), v, c(b), v}), probe); },
                             uniform({2, 2}, rng)};
                   }});
  cases.push_back({"relu", "op", [](std::mt19937_64& rng, int) -> Draw {
                     auto probe = uniform({2, 5}, rng);
                     return {[=](const Var<double>& v) { return project(relu(v), probe); }, off_zero({2, 5}, rng)};
                   }});
  cases.push_back({"sigmoid", "op", [](std::mt19937_64& rng, int) -> Draw {
                     auto probe = uniform({2, 5}, rng);
                     return {[=](const Var<double>& v) { return project(sigmoid(v), probe); }, uniform({2, 5}, rng, -3, 3)};
                   }});
  cases.push_back({"channel_softmax", "op", [](std::mt19937_64& rng, int) -> Draw {
                     auto probe = uniform({2, 3, 2, 2}, rng);
                     return {[=](const Var<double>& v) { return project(channel_softmax(v), probe); },
                             uniform({2, 3, 2, 2}, rng, -2, 2)};
                   }});
  // conv2d: the probed argument rotates over input, weight and bias
  cases.push_back({"conv2d", "op", [](std::mt19937_64& rng, int trial) -> Draw {
                     auto x = uniform({2, 2, 5, 5}, rng), w = uniform({3, 2, 3, 3}, rng), b = uniform({3}, rng);
                     auto probe = uniform({2, 3, 3, 3}, rng);
                     const int which = trial % 3;
                     ScalarFn<double> f = [=](const Var<double>& v) {
                       return project(conv2d(which == 0 ? v : c(x), which == 1 ? v : c(w), which == 2 ? v : c(b), 2, 1),
                                      probe);
                     };
                     return {f, which == 0 ? x : which == 1 ? w : b};
                   }});
  cases.push_back({"transposed_conv2d", "op", [](std::mt19937_64& rng, int trial) -> Draw {
                     auto x = uniform({2, 2, 3, 3}, rng), w = uniform({2, 3, 4, 4}, rng);
                     auto probe = uniform({2, 3, 6, 6}, rng);
                     const bool wrt_input = trial % 2 == 0;
                     ScalarFn<double> f = [=](const Var<double>& v) {
                       return project(transposed_conv2d(wrt_input ? v : c(x), wrt_input ? c(w) : v, 2, 1), probe);
                     };
                     return {f, wrt_input ? x : w};
                   }});
  cases.push_back({"maxpool2", "op", [](std::mt19937_64& rng, int) -> Draw {
                     auto probe = uniform({1, 2, 2, 3}, rng);
                     // distinct values spaced well beyond the stencil width
                     Tensor<double> x(Shape{1, 2, 4, 6});
                     std::vector<double> levels(x.size());
                     for (std::size_t i = 0; i < levels.size(); ++i) levels[i] = 0.1 * static_cast<double>(i);
                     std::shuffle(levels.begin(), levels.end(), rng);
                     std::copy(levels.begin(), levels.end(), x.data());
                     return {[=](const Var<double>& v) { return project(maxpool2(v), probe); }, x};
                   }});
  cases.push_back({"batchnorm", "op", [](std::mt19937_64& rng, int trial) -> Draw {
                     auto x = uniform({3, 2, 2, 2}, rng), g = uniform({2}, rng, 0.5, 1.5), b = uniform({2}, rng);
                     auto probe = uniform({3, 2, 2, 2}, rng);
                     const int which = trial % 3;
                     const Mode mode = trial % 2 ? Mode::infer : Mode::train;
                     ScalarFn<double> f = [=](const Var<double>& v) {
                       BatchNormState<double> st(2);
                       st.running_mean = Tensor<double>(Shape{2}, {0.1, -0.2});
                       st.running_var = Tensor<double>(Shape{2}, {0.7, 1.3});
                       return project(batchnorm(which == 0 ? v : c(x), which == 1 ? v : c(g), which == 2 ? v : c(b), st, mode),
                                      probe);
                     };
                     return {f, which == 0 ? x : which == 1 ? g : b};
                   }});

  cases.push_back({"weighted_cross_entropy", "loss", [](std::mt19937_64& rng, int) -> Draw {
                     auto y = random_labels({2, 3, 3}, 4, rng);
                     const ClassWeights w{{0.7, 1.3, 2.0, 0.4}};
                     return {[=](const Var<double>& z) { return weighted_cross_entropy(z, y, w); },
                             uniform({2, 4, 3, 3}, rng, -2, 2)};
                   }});
  cases.push_back({"hallucination_loss", "loss", [](std::mt19937_64& rng, int) -> Draw {
                     auto target = uniform({2, 3, 2, 2}, rng, -2, 2);
                     return {[=](const Var<double>& h) { return hallucination_loss(c(target), h); },
                             uniform({2, 3, 2, 2}, rng, -2, 2)};
                   }});
  cases.push_back(composite_case("composite_single_total", {"rgb", "depth", "hal_depth"}, false));
  cases.push_back(composite_case("composite_multi_total", {"rgb", "ir", "depth", "hal_ir", "hal_depth"}, true));
  return cases;
}

/// Runs `points` random trials per case; a case passes when every trial's
/// worst relative error is below `tolerance`.
inline std::vector<GradResult> run_gradient_suite(const std::vector<GradCase>& cases, int points = 10,
                                                  double tolerance = 1e-4, std::uint64_t seed = 0) {
  std::vector<GradResult> out;
  for (std::size_t k = 0; k < cases.size(); ++k) {
    std::mt19937_64 rng(seed + 7919 * k);
    GradResult r{cases[k].name, cases[k].kind, 0.0, points, true};
    for (int t = 0; t < points; ++t) {
      auto [f, at] = cases[k].draw(rng, t);
      double err;
      try {
        err = finite_diff_check(f, at);
      } catch (const Error&) {
        err = std::numeric_limits<double>::infinity();
      }
      r.max_relative_error = std::max(r.max_relative_error, err);
    }
    r.passed = r.max_relative_error < tolerance;
    out.push_back(r);
  }
  return out;
}

/// Negative control: forward x^2 with a backward that claims 3x.
inline GradCase corrupted_gradient_case() {
  return {"corrupted_square", "fixture", [](std::mt19937_64& rng, int) -> std::pair<ScalarFn<double>, Tensor<double>> {
            ScalarFn<double> f = [](const Var<double>& x) {
              Tensor<double> out = x.value();
              for (auto& v : out.values()) v *= v;
              return sum(make_op<double>("corrupted_square", std::move(out), {x}, [](Node<double>& self) {
                auto& p = self.parents[0];
                auto& g = p->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += 3.0 * p->value[i] * self.grad[i];
              }));
            };
            return {f, grad_detail::uniform({3}, rng, 0.5, 2.0)};
          }};
}

}  // namespace hallucinet
