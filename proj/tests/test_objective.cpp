#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hallucinet/gradcheck.hpp"
#include "hallucinet/objective.hpp"

using namespace hallucinet;

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = d(rng);
  return t;
}

LabelMap random_labels(Shape shape, std::size_t classes, std::mt19937_64& rng,
                       double ignore_fraction = 0.0) {
  std::uniform_int_distribution<int> cls(0, static_cast<int>(classes) - 1);
  std::uniform_real_distribution<double> u(0, 1);
  LabelMap y(std::move(shape));
  for (auto& v : y.values()) v = u(rng) < ignore_fraction ? kIgnoreLabel : cls(rng);
  return y;
}

// Direct loop evaluation, independent of the fused op.
double reference_wce(const Tensor<double>& z, const LabelMap& y, const std::vector<double>& w) {
  const std::size_t N = z.dim(0), C = z.dim(1), HW = z.dim(2) * z.dim(3);
  double acc = 0;
  std::size_t count = 0;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < HW; ++p) {
      const auto label = y[n * HW + p];
      if (label == kIgnoreLabel) continue;
      double s = 0;
      for (std::size_t c = 0; c < C; ++c) s += std::exp(z[(n * C + c) * HW + p]);
      acc -= w[label] * std::log(std::exp(z[(n * C + label) * HW + p]) / s);
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

struct Outputs {
  BranchOutputs<double> map;
  LabelMap labels;
};

Outputs random_outputs(const std::vector<std::string>& roles, std::uint64_t seed,
                       std::size_t classes = 3) {
  std::mt19937_64 rng(seed);
  Outputs o;
  for (const auto& r : roles) {
    BranchOutput<double> b;
    b.tap = Var<double>::constant(random_tensor({2, 4, 2, 2}, rng));
    b.logits = Var<double>::constant(random_tensor({2, classes, 3, 3}, rng));
    o.map.emplace(r, b);
  }
  o.labels = random_labels({2, 3, 3}, classes, rng, 0.1);
  return o;
}

const std::vector<std::string> kSingleRoles{"rgb", "depth", "hal_depth"};
const std::vector<std::string> kMultiRoles{"rgb", "ir", "depth", "hal_ir", "hal_depth"};

}  // namespace

TEST(ClassWeights, EqualFrequenciesGiveOnes) {
  std::vector<double> f{0.25, 0.25, 0.25, 0.25};
  for (double w : compute_class_weights(f).values) EXPECT_DOUBLE_EQ(w, 1.0);
}

TEST(ClassWeights, OddCountExample) {
  std::vector<double> f{0.5, 0.3, 0.2};
  auto w = compute_class_weights(f).values;
  EXPECT_NEAR(w[0], 0.6, 1e-12);
  EXPECT_NEAR(w[1], 1.0, 1e-12);
  EXPECT_NEAR(w[2], 1.5, 1e-12);
}

TEST(ClassWeights, EvenCountUsesMeanOfMiddle) {
  std::vector<double> f{0.4, 0.4, 0.1, 0.1};
  EXPECT_DOUBLE_EQ(median(f), 0.25);
  auto w = compute_class_weights(f).values;
  EXPECT_NEAR(w[0], 0.625, 1e-12);
  EXPECT_NEAR(w[1], 0.625, 1e-12);
  EXPECT_NEAR(w[2], 2.5, 1e-12);
  EXPECT_NEAR(w[3], 2.5, 1e-12);
}

TEST(ClassWeights, ProductWithFrequencyIsConstant) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.001, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> f(2 + trial % 7);
    for (auto& v : f) v = u(rng);
    auto w = compute_class_weights(f).values;
    const double m = median(f);
    for (std::size_t c = 0; c < f.size(); ++c) {
      EXPECT_GT(w[c], 0.0);
      EXPECT_NEAR(w[c] * f[c], m, 1e-12);
    }
  }
}

TEST(ClassWeights, ZeroFrequencyRejected) {
  std::vector<double> f{0.5, 0.0, 0.5};
  EXPECT_THROW(compute_class_weights(f), ConfigError);
  std::vector<double> neg{0.5, -0.1};
  EXPECT_THROW(compute_class_weights(neg), ConfigError);
}

TEST(WeightedCrossEntropy, EqualLogitsGiveLn2) {
  auto z = Var<double>::constant(Tensor<double>(Shape{1, 2, 1, 1}, {0.7, 0.7}));
  LabelMap y(Shape{1, 1, 1}, {1});
  EXPECT_NEAR(weighted_cross_entropy(z, y, ClassWeights::uniform(2)).value().item(),
              std::log(2.0), 1e-12);
}

TEST(WeightedCrossEntropy, PerfectPredictionApproachesZero) {
  auto z = Var<double>::constant(Tensor<double>(Shape{1, 2, 1, 1}, {40.0, 0.0}));
  LabelMap y(Shape{1, 1, 1}, {0});
  EXPECT_LT(weighted_cross_entropy(z, y, ClassWeights::uniform(2)).value().item(), 1e-15);
}

TEST(WeightedCrossEntropy, ProbabilityFloorBoundsLoss) {
  auto z = Var<double>::leaf(Tensor<double>(Shape{1, 2, 1, 1}, {0.0, 100.0}), true);
  LabelMap y(Shape{1, 1, 1}, {0});
  auto l = weighted_cross_entropy(z, y, ClassWeights::uniform(2));
  EXPECT_NEAR(l.value().item(), -std::log(kProbabilityFloor), 1e-9);
  backward(l);
  EXPECT_EQ(z.grad()[0], 0.0);
}

TEST(WeightedCrossEntropy, LinearInTrueClassWeight) {
  std::mt19937_64 rng(1);
  auto z = Var<double>::constant(random_tensor({1, 3, 1, 1}, rng));
  LabelMap y(Shape{1, 1, 1}, {2});
  const double base = weighted_cross_entropy(z, y, ClassWeights{{1, 1, 1}}).value().item();
  const double doubled = weighted_cross_entropy(z, y, ClassWeights{{1, 1, 2}}).value().item();
  EXPECT_NEAR(doubled, 2 * base, 1e-12);
}

TEST(WeightedCrossEntropy, MatchesReferenceAndSkipsIgnored) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    auto z = random_tensor({2, 4, 5, 3}, rng, 2.0);
    auto y = random_labels({2, 5, 3}, 4, rng, 0.3);
    std::vector<double> w{0.5, 1.0, 2.0, 3.0};
    const double got = weighted_cross_entropy(Var<double>::constant(z), y, ClassWeights{w})
                           .value()
                           .item();
    EXPECT_NEAR(got, reference_wce(z, y, w), 1e-12);
  }
}

TEST(WeightedCrossEntropy, UniformWeightsEqualPlainCrossEntropy) {
  std::mt19937_64 rng(4);
  auto z = random_tensor({1, 3, 4, 4}, rng);
  auto y = random_labels({1, 4, 4}, 3, rng);
  EXPECT_NEAR(weighted_cross_entropy(Var<double>::constant(z), y, ClassWeights::uniform(3))
                  .value()
                  .item(),
              reference_wce(z, y, {1, 1, 1}), 1e-12);
}

TEST(WeightedCrossEntropy, Errors) {
  auto z = Var<double>::constant(Tensor<double>(Shape{1, 2, 1, 2}));
  LabelMap all_ignored(Shape{1, 1, 2}, {kIgnoreLabel, kIgnoreLabel});
  EXPECT_THROW(weighted_cross_entropy(z, all_ignored, ClassWeights::uniform(2)), NumericError);
  LabelMap out_of_range(Shape{1, 1, 2}, {0, 5});
  EXPECT_THROW(weighted_cross_entropy(z, out_of_range, ClassWeights::uniform(2)), ShapeError);
  LabelMap wrong(Shape{1, 2, 1}, {0, 1});
  EXPECT_THROW(weighted_cross_entropy(z, wrong, ClassWeights::uniform(2)), ShapeError);
  EXPECT_THROW(weighted_cross_entropy(z, LabelMap(Shape{1, 1, 2}), ClassWeights::uniform(3)),
               ShapeError);
}

TEST(WeightedCrossEntropy, FiniteDifference) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto y = random_labels({2, 3, 3}, 4, rng, 0.2);
    y[0] = 1;
    ClassWeights w{{0.7, 1.3, 2.0, 0.4}};
    ScalarFn<double> f = [&](const Var<double>& z) { return weighted_cross_entropy(z, y, w); };
    EXPECT_LT(finite_diff_check(f, random_tensor({2, 4, 3, 3}, rng, 2.0)), 1e-4);
  }
}

TEST(HallucinationLoss, ClosedFormExample) {
  auto t = Var<double>::constant(Tensor<double>(Shape{1}, {0.0}));
  auto h = Var<double>::constant(Tensor<double>(Shape{1}, {std::log(3.0)}));
  EXPECT_NEAR(hallucination_loss(t, h).value().item(), 0.0625, 1e-12);
  EXPECT_NEAR(hallucination_loss(h, t).value().item(), 0.0625, 1e-12);
  EXPECT_EQ(hallucination_loss(t, t).value().item(), 0.0);
}

TEST(HallucinationLoss, TargetReceivesNoGradient) {
  std::mt19937_64 rng(6);
  auto t = Var<double>::leaf(random_tensor({1, 2, 3, 3}, rng), true);
  auto h = Var<double>::leaf(random_tensor({1, 2, 3, 3}, rng), true);
  backward(hallucination_loss(t, h));
  for (double g : t.grad_buffer().values()) EXPECT_EQ(g, 0.0);
  EXPECT_GT(max_abs(h.grad()), 0.0);
}

TEST(HallucinationLoss, ShapeMismatch) {
  auto a = Var<double>::constant(Tensor<double>(Shape{1, 2, 2, 2}));
  auto b = Var<double>::constant(Tensor<double>(Shape{1, 2, 2, 1}));
  EXPECT_THROW(hallucination_loss(a, b), ShapeError);
}

TEST(HallucinationLoss, FiniteDifference) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    auto target = Var<double>::constant(random_tensor({2, 3, 2, 2}, rng, 2.0));
    ScalarFn<double> f = [&](const Var<double>& h) { return hallucination_loss(target, h); };
    EXPECT_LT(finite_diff_check(f, random_tensor({2, 3, 2, 2}, rng, 2.0)), 1e-4);
  }
}

TEST(CompositeSingle, SixTermsAndRecomposition) {
  auto o = random_outputs(kSingleRoles, 10);
  auto w = ClassWeights{{0.5, 1.0, 2.0}};
  auto loss = composite_loss_single(o.map, o.labels, w, 3.5);
  ASSERT_EQ(loss.breakdown.size(), 6u);
  const std::vector<std::string> names{"hallucinate", "depth", "rgb", "hal", "rgb+depth",
                                       "rgb+hal"};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(loss.breakdown.terms[i].first, names[i]);
    EXPECT_GE(loss.breakdown.terms[i].second, 0.0);
  }
  const double total = loss.total.value().item();
  EXPECT_NEAR(loss.breakdown.recomposed_total(), total, 1e-6 * std::abs(total));
  EXPECT_EQ(loss.breakdown.total, total);
  EXPECT_NEAR(loss.breakdown.term("rgb"),
              reference_wce(o.map.at("rgb").logits.value(), o.labels, w.values), 1e-12);
}

TEST(CompositeSingle, IdenticalHallucinationCollapses) {
  auto o = random_outputs(kSingleRoles, 11);
  o.map["hal_depth"] = o.map["depth"];
  auto b = composite_loss_single(o.map, o.labels, ClassWeights::uniform(3), 10.0).breakdown;
  EXPECT_EQ(b.term("hallucinate"), 0.0);
  EXPECT_EQ(b.term("rgb+hal"), b.term("rgb+depth"));
  EXPECT_EQ(b.term("hal"), b.term("depth"));
}

TEST(CompositeSingle, GammaZeroDropsMimicry) {
  auto o = random_outputs(kSingleRoles, 12);
  auto b = composite_loss_single(o.map, o.labels, ClassWeights::uniform(3), 0.0).breakdown;
  double ce = 0;
  for (const auto& [n, v] : b.terms) {
    if (n != "hallucinate") ce += v;
  }
  EXPECT_NEAR(b.total, ce, 1e-12);
  EXPECT_GT(b.term("hallucinate"), 0.0);
}

TEST(CompositeSingle, SaturatedPredictionsLeaveOnlyMimicry) {
  auto o = random_outputs(kSingleRoles, 13);
  for (auto& [_, out] : o.map) {
    Tensor<double> z(out.logits.shape(), 0.0);
    const std::size_t C = z.dim(1), HW = z.dim(2) * z.dim(3);
    for (std::size_t n = 0; n < z.dim(0); ++n) {
      for (std::size_t p = 0; p < HW; ++p) {
        const auto y = o.labels[n * HW + p];
        z[(n * C + (y == kIgnoreLabel ? 0 : y)) * HW + p] = 30.0;
      }
    }
    out.logits = Var<double>::constant(z);
  }
  const double gamma = 2.0;
  auto b = composite_loss_single(o.map, o.labels, ClassWeights::uniform(3), gamma).breakdown;
  EXPECT_NEAR(b.total, gamma * b.term("hallucinate"), 1e-9);
}

TEST(CompositeSingle, MissingOutputThrows) {
  auto o = random_outputs({"rgb", "depth"}, 14);
  EXPECT_THROW(composite_loss_single(o.map, o.labels, ClassWeights::uniform(3), 1.0),
               ConfigError);
}

TEST(CompositeMulti, ElevenTermsAndRecomposition) {
  auto o = random_outputs(kMultiRoles, 20);
  auto loss = composite_loss_multi(o.map, o.labels, ClassWeights{{2.0, 0.5, 1.0}}, 7.0);
  EXPECT_EQ(loss.breakdown.size(), 11u);
  EXPECT_EQ(loss.breakdown.hallucinate,
            (std::set<std::string>{"hallucinate_ir", "hallucinate_depth"}));
  const double total = loss.total.value().item();
  EXPECT_NEAR(loss.breakdown.recomposed_total(), total, 1e-6 * std::abs(total));
}

TEST(CompositeMulti, ExactCopiesCollapseJointTerms) {
  auto o = random_outputs(kMultiRoles, 21);
  o.map["hal_ir"] = o.map["ir"];
  o.map["hal_depth"] = o.map["depth"];
  auto b = composite_loss_multi(o.map, o.labels, ClassWeights::uniform(3), 5.0).breakdown;
  EXPECT_EQ(b.term("hallucinate_ir"), 0.0);
  EXPECT_EQ(b.term("hallucinate_depth"), 0.0);
  const double ref = b.term("rgb+ir+depth");
  for (const char* n : {"rgb+hal_ir+depth", "rgb+ir+hal_depth", "rgb+hal_ir+hal_depth"}) {
    EXPECT_NEAR(b.term(n), ref, 1e-12) << n;
  }
}

TEST(CompositeMulti, IdenticalLogitsEqualizeCrossEntropyTerms) {
  auto o = random_outputs(kMultiRoles, 22);
  for (auto& [_, out] : o.map) out.logits = o.map.at("rgb").logits;
  auto b = composite_loss_multi(o.map, o.labels, ClassWeights::uniform(3), 1.0).breakdown;
  const double ref = b.term("rgb");
  for (const auto& [n, v] : b.terms) {
    if (!b.hallucinate.count(n)) EXPECT_NEAR(v, ref, 1e-12) << n;
  }
}

TEST(CompositeLoss, FiniteDifferenceSingleAndMulti) {
  ClassWeights w{{0.8, 1.0, 1.6}};
  for (const auto* roles : {&kSingleRoles, &kMultiRoles}) {
    const bool multi = roles->size() == 5;
    for (int trial = 0; trial < 10; ++trial) {
      auto o = random_outputs(*roles, 100 + trial);
      const std::string role = (*roles)[trial % roles->size()];
      auto total = [&](BranchOutputs<double> m) {
        return multi ? composite_loss_multi(m, o.labels, w, 4.0).total
                     : composite_loss_single(m, o.labels, w, 4.0).total;
      };
      ScalarFn<double> by_logits = [&](const Var<double>& z) {
        auto m = o.map;
        m[role].logits = z;
        return total(m);
      };
      EXPECT_LT(finite_diff_check(by_logits, o.map.at(role).logits.value()), 1e-4) << role;
      if (is_hallucination_role(role)) {
        ScalarFn<double> by_tap = [&](const Var<double>& t) {
          auto m = o.map;
          m[role].tap = t;
          return total(m);
        };
        EXPECT_LT(finite_diff_check(by_tap, o.map.at(role).tap.value()), 1e-4) << role;
      }
    }
  }
}

TEST(CalibrateGamma, Examples) {
  LossBreakdown b;
  b.terms = {{"hallucinate", 0.5}, {"depth", 2.0}, {"rgb", 1.2}};
  b.hallucinate = {"hallucinate"};
  EXPECT_DOUBLE_EQ(calibrate_gamma(b, GammaPolicy{}), 40.0);
  b.terms[0].second = 2.0;
  EXPECT_DOUBLE_EQ(calibrate_gamma(b, GammaPolicy{}), 10.0);
}

TEST(CalibrateGamma, WeightedMimicryIsMultiplierTimesLargestOther) {
  auto o = random_outputs(kMultiRoles, 30);
  auto raw = composite_loss_multi(o.map, o.labels, ClassWeights::uniform(3), 1.0).breakdown;
  const double gamma = calibrate_gamma(raw, GammaPolicy{});
  EXPECT_NEAR(gamma * raw.hallucinate_sum(), 10.0 * raw.max_other(), 1e-9);
}

TEST(CalibrateGamma, ZeroMimicryFallsBackToOne) {
  LossBreakdown b;
  b.terms = {{"hallucinate", 0.0}, {"depth", 2.0}};
  b.hallucinate = {"hallucinate"};
  EXPECT_EQ(calibrate_gamma(b, GammaPolicy{}), 1.0);
  EXPECT_THROW(calibrate_gamma(b, GammaPolicy{0.0, 1}), ConfigError);
}

TEST(FullModalityTerms, IndividualPlusAllBranchJoint) {
  auto t = full_modality_terms({"ir", "depth"});
  ASSERT_EQ(t.size(), 4u);
  EXPECT_EQ(t.back().name, "rgb+ir+depth");
  EXPECT_EQ(t.back().kind, TermKind::joint);
  EXPECT_EQ(full_modality_terms({}).size(), 1u);
}
