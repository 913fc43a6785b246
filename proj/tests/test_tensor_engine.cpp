#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hallucinet/gradcheck.hpp"
#include "hallucinet/ops.hpp"

using namespace hallucinet;

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                             double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = d(rng);
  return t;
}

// Direct nested-loop cross-correlation, independent of im2col.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w,
                          const Tensor<double>& b, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), k = w.dim(2);
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensor<double> out(Shape{N, Co, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = b[o];
          for (std::size_t c = 0; c < Ci; ++c)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v) {
                const long r = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long s = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (r < 0 || s < 0 || r >= static_cast<long>(H) || s >= static_cast<long>(W))
                  continue;
                acc += x.at(n, c, r, s) * w.at(o, c, u, v);
              }
          out.at(n, o, i, j) = acc;
        }
  return out;
}

// Scatter form of the transposed convolution.
Tensor<double> naive_transposed(const Tensor<double>& x, const Tensor<double>& w,
                                std::size_t stride, std::size_t pad) {
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(1), k = w.dim(2);
  const std::size_t Ho = (H - 1) * stride + k - 2 * pad, Wo = (W - 1) * stride + k - 2 * pad;
  Tensor<double> out(Shape{N, Co, Ho, Wo}, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < Ci; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          for (std::size_t o = 0; o < Co; ++o)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v) {
                const long r = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long s = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (r < 0 || s < 0 || r >= static_cast<long>(Ho) || s >= static_cast<long>(Wo))
                  continue;
                out.at(n, o, r, s) += x.at(n, c, i, j) * w.at(c, o, u, v);
              }
  return out;
}

}  // namespace

TEST(Tensor, RejectsZeroExtentAndBadValueCount) {
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), ShapeError);
  Tensor<float> t(Shape{2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
}

TEST(Conv2d, OnesKernelOnOnesInput) {
  auto x = Var<double>::constant(Tensor<double>(Shape{1, 1, 3, 3}, 1.0));
  auto w = Var<double>::constant(Tensor<double>(Shape{1, 1, 3, 3}, 1.0));
  auto b = Var<double>::constant(Tensor<double>(Shape{1}, 0.0));
  auto y = conv2d(x, w, b, 1, 1).value();
  EXPECT_DOUBLE_EQ(y.at(0, 0, 1, 1), 9.0);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0, 1), 6.0);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 1, 0), 6.0);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0, 0), 4.0);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 2, 2), 4.0);
}

TEST(Conv2d, DeltaKernelIsIdentity) {
  std::mt19937_64 rng(1);
  auto xt = random_tensor({2, 1, 5, 6}, rng);
  Tensor<double> delta(Shape{1, 1, 3, 3}, 0.0);
  delta.at(0, 0, 1, 1) = 1.0;
  auto y = conv2d(Var<double>::constant(xt), Var<double>::constant(delta),
                  Var<double>::constant(Tensor<double>(Shape{1}, 0.0)), 1, 1);
  EXPECT_EQ(y.value(), xt);
}

TEST(Conv2d, StrideTwoShape) {
  auto y = conv2d(Var<float>::constant(Tensor<float>(Shape{1, 1, 4, 4}, 1.f)),
                  Var<float>::constant(Tensor<float>(Shape{1, 1, 3, 3}, 1.f)),
                  Var<float>::constant(Tensor<float>(Shape{1}, 0.f)), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
}

TEST(Conv2d, MatchesNaiveLoopOracle) {
  std::mt19937_64 rng(7);
  auto x = random_tensor({2, 3, 7, 6}, rng);
  auto w = random_tensor({4, 3, 3, 3}, rng);
  auto b = random_tensor({4}, rng);
  for (std::size_t stride : {1u, 2u}) {
    auto y = conv2d(Var<double>::constant(x), Var<double>::constant(w), Var<double>::constant(b),
                    stride, 1)
                 .value();
    auto ref = naive_conv(x, w, b, stride, 1);
    ASSERT_EQ(y.shape(), ref.shape());
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Conv2d, ChannelMismatchThrows) {
  auto x = Var<float>::constant(Tensor<float>(Shape{1, 2, 4, 4}));
  auto w = Var<float>::constant(Tensor<float>(Shape{1, 3, 3, 3}));
  auto b = Var<float>::constant(Tensor<float>(Shape{1}));
  EXPECT_THROW(conv2d(x, w, b, 1, 1), ShapeError);
}

TEST(Conv2d, NonFiniteResultThrows) {
  auto x = Var<float>::constant(Tensor<float>(Shape{1, 1, 3, 3}, 3e38f));
  auto w = Var<float>::constant(Tensor<float>(Shape{1, 1, 3, 3}, 3e38f));
  auto b = Var<float>::constant(Tensor<float>(Shape{1}, 0.f));
  EXPECT_THROW(conv2d(x, w, b, 1, 1), NumericError);
}

TEST(MaxPool2, WindowMaximum) {
  auto y = maxpool2(Var<double>::constant(Tensor<double>(Shape{1, 1, 2, 2}, {1, 2, 3, 4})));
  EXPECT_DOUBLE_EQ(y.value()[0], 4.0);
  auto z =
      maxpool2(Var<double>::constant(Tensor<double>(Shape{1, 1, 2, 2}, {-1, -2, -3, -4})));
  EXPECT_DOUBLE_EQ(z.value()[0], -1.0);
}

TEST(MaxPool2, ConstantInputRoutesGradientToFirstElement) {
  auto x = Var<double>::leaf(Tensor<double>(Shape{1, 1, 4, 4}, 2.5), true);
  auto y = maxpool2(x);
  for (double v : y.value().values()) EXPECT_DOUBLE_EQ(v, 2.5);
  backward(sum(y));
  const auto& g = x.grad();
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_DOUBLE_EQ(g.at(0, 0, r, c), (r % 2 == 0 && c % 2 == 0) ? 1.0 : 0.0);
}

TEST(MaxPool2, OddExtentThrows) {
  EXPECT_THROW(maxpool2(Var<float>::constant(Tensor<float>(Shape{1, 1, 3, 4}))), ShapeError);
}

TEST(BatchNorm, TrainModeStandardizes) {
  std::mt19937_64 rng(3);
  auto x = Var<double>::constant(random_tensor({4, 2, 5, 5}, rng, -3.0, 7.0));
  BatchNormState<double> st(2);
  auto y = batchnorm(x, Var<double>::constant(Tensor<double>(Shape{2}, 1.0)),
                     Var<double>::constant(Tensor<double>(Shape{2}, 0.0)), st, Mode::train)
               .value();
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0, ss = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t k = 0; k < 25; ++k) s += y[(n * 2 + c) * 25 + k];
    const double m = s / 100.0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t k = 0; k < 25; ++k) ss += std::pow(y[(n * 2 + c) * 25 + k] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(ss / 100.0, 1.0, 1e-3);
  }
  // running statistics moved towards the batch statistics
  EXPECT_NE(st.running_mean[0], 0.0);
}

TEST(BatchNorm, AffineAfterNormalization) {
  std::mt19937_64 rng(4);
  auto x = Var<double>::constant(random_tensor({8, 1, 6, 6}, rng));
  BatchNormState<double> st(1);
  auto y = batchnorm(x, Var<double>::constant(Tensor<double>(Shape{1}, 2.0)),
                     Var<double>::constant(Tensor<double>(Shape{1}, 3.0)), st, Mode::train)
               .value();
  double s = 0, ss = 0;
  for (double v : y.values()) s += v;
  const double m = s / static_cast<double>(y.size());
  for (double v : y.values()) ss += (v - m) * (v - m);
  EXPECT_NEAR(m, 3.0, 1e-9);
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(y.size())), 2.0, 1e-3);
}

TEST(BatchNorm, InferModeUsesRunningStatistics) {
  BatchNormState<double> st(1);
  st.running_mean[0] = 1.7;
  st.running_var[0] = 1.0;
  auto x = Var<double>::constant(Tensor<double>(Shape{1, 1, 2, 2}, 1.7));
  auto y = batchnorm(x, Var<double>::constant(Tensor<double>(Shape{1}, 1.0)),
                     Var<double>::constant(Tensor<double>(Shape{1}, 0.0)), st, Mode::infer);
  for (double v : y.value().values()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(BatchNorm, SingleValueTrainBatchThrows) {
  BatchNormState<float> st(1);
  auto x = Var<float>::constant(Tensor<float>(Shape{1, 1, 1, 1}));
  EXPECT_THROW(batchnorm(x, Var<float>::constant(Tensor<float>(Shape{1}, 1.f)),
                         Var<float>::constant(Tensor<float>(Shape{1}, 0.f)), st, Mode::train),
               ShapeError);
}

TEST(Activation, ClosedForms) {
  auto s = sigmoid(Var<double>::constant(Tensor<double>(Shape{2}, {0.0, std::log(3.0)})));
  EXPECT_DOUBLE_EQ(s.value()[0], 0.5);
  EXPECT_NEAR(s.value()[1], 0.75, 1e-15);
  auto r = relu(Var<double>::constant(Tensor<double>(Shape{2}, {-2.0, 0.0})));
  EXPECT_DOUBLE_EQ(r.value()[0], 0.0);
  EXPECT_DOUBLE_EQ(r.value()[1], 0.0);
}

TEST(Activation, ReluDerivativeAtZeroIsZero) {
  auto x = Var<double>::leaf(Tensor<double>(Shape{3}, {-1.0, 0.0, 2.0}), true);
  backward(sum(relu(x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 1.0);
}

TEST(ChannelSoftmax, ClosedFormsAndInvariants) {
  auto eq = channel_softmax(Var<double>::constant(Tensor<double>(Shape{1, 4, 1, 1}, 0.3)));
  for (double v : eq.value().values()) EXPECT_DOUBLE_EQ(v, 0.25);

  auto two = channel_softmax(Var<double>::constant(Tensor<double>(Shape{1, 2, 1, 1}, {2, 0})));
  EXPECT_NEAR(two.value()[0], 0.8808, 5e-5);
  EXPECT_NEAR(two.value()[1], 0.1192, 5e-5);

  std::mt19937_64 rng(11);
  auto z = random_tensor({2, 5, 3, 3}, rng, -10, 10);
  auto shifted = z;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < 9; ++p) {
      const double k = 100.0 * static_cast<double>(p + n);
      for (std::size_t c = 0; c < 5; ++c) shifted[(n * 5 + c) * 9 + p] += k;
    }
  auto a = softmax_channels(z), b = softmax_channels(shifted);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < 9; ++p) {
      double total = 0;
      for (std::size_t c = 0; c < 5; ++c) total += a[(n * 5 + c) * 9 + p];
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
}

TEST(TransposedConv, MatchesScatterOracle) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({2, 3, 3, 4}, rng);
  auto w = random_tensor({3, 2, 4, 4}, rng);
  auto y = transposed_conv2d(Var<double>::constant(x), Var<double>::constant(w), 2, 1).value();
  auto ref = naive_transposed(x, w, 2, 1);
  ASSERT_EQ(y.shape(), ref.shape());
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(TransposedConv, BilinearKernelUpsamplesConstantAndShape) {
  for (std::size_t s : {2u, 3u, 4u, 32u}) {
    const auto geo = upsample_geometry(s);
    const std::size_t H = s == 32 ? 4 : 6;
    auto x = Var<double>::constant(Tensor<double>(Shape{1, 2, H, H}, 1.75));
    auto y = transposed_conv2d(x, Var<double>::constant(bilinear_upsample_weight<double>(2, s)),
                               s, geo.padding)
                 .value();
    ASSERT_EQ(y.shape(), (Shape{1, 2, H * s, H * s}));
    // oracle: bilinear interpolation of a constant image is that constant away
    // from the borders
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t r = s; r + s < H * s; ++r)
        for (std::size_t q = s; q + s < H * s; ++q) EXPECT_NEAR(y.at(0, c, r, q), 1.75, 1e-12);
  }
  auto zero = transposed_conv2d(
      Var<float>::constant(Tensor<float>(Shape{1, 1, 4, 4}, 0.f)),
      Var<float>::constant(bilinear_upsample_weight<float>(1, 2)), 2, 1);
  EXPECT_EQ(zero.shape(), (Shape{1, 1, 8, 8}));
  for (float v : zero.value().values()) EXPECT_EQ(v, 0.f);
}

TEST(Backward, SumAndQuadraticForm) {
  std::mt19937_64 rng(9);
  auto p = Var<double>::leaf(random_tensor({3, 4}, rng), true);
  backward(sum(p));
  for (double g : p.grad().values()) EXPECT_DOUBLE_EQ(g, 1.0);
  p.zero_grad();
  backward(scale(sum(square(p)), 0.5));
  for (std::size_t i = 0; i < p.value().size(); ++i)
    EXPECT_DOUBLE_EQ(p.grad()[i], p.value()[i]);
}

TEST(Backward, NonScalarRootThrows) {
  auto p = Var<double>::leaf(Tensor<double>(Shape{2}), true);
  EXPECT_THROW(backward(relu(p)), ShapeError);
}

TEST(Backward, SharedSubgraphVisitedOnce) {
  auto p = Var<double>::leaf(Tensor<double>(Shape{1}, 3.0), true);
  auto q = square(p);
  backward(add(q, q));  // d/dp 2p^2 = 4p
  EXPECT_DOUBLE_EQ(p.grad()[0], 12.0);
}

TEST(Backward, DeterministicAcrossRuns) {
  std::mt19937_64 rng(21);
  auto x = Var<float>::constant(random_tensor({2, 3, 8, 8}, rng).cast<float>());
  auto w = Var<float>::leaf(random_tensor({4, 3, 3, 3}, rng).cast<float>(), true);
  auto b = Var<float>::leaf(Tensor<float>(Shape{4}, 0.1f), true);
  BatchNormState<float> st(4);
  auto gamma = Var<float>::leaf(Tensor<float>(Shape{4}, 1.f), true);
  auto beta = Var<float>::leaf(Tensor<float>(Shape{4}, 0.f), true);
  auto loss = mean(channel_softmax(maxpool2(relu(batchnorm(conv2d(x, w, b, 1, 1), gamma, beta,
                                                            st, Mode::train)))));
  auto root = sum(square(loss));
  backward(root);
  auto g1 = w.grad();
  w.zero_grad();
  backward(root);
  EXPECT_TRUE(bit_identical(g1, w.grad()));
}

// --- finite differences -----------------------------------------------------

TEST(FiniteDiff, OracleSanity) {
  std::mt19937_64 rng(2);
  auto a = random_tensor({5}, rng);
  ScalarFn<double> linear = [a](const Var<double>& x) {
    return sum(mul(x, Var<double>::constant(a)));
  };
  EXPECT_LT(finite_diff_check(linear, random_tensor({5}, rng)), 1e-9);

  auto x = Var<double>::leaf(Tensor<double>(Shape{1}, 3.0), true);
  backward(sum(square(x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  ScalarFn<double> sq = [](const Var<double>& v) { return sum(square(v)); };
  EXPECT_LT(finite_diff_check(sq, Tensor<double>(Shape{1}, 3.0)), 1e-8);

  auto y = Var<double>::leaf(Tensor<double>(Shape{1}, 0.7), true);
  backward(sum(relu(y)));
  EXPECT_DOUBLE_EQ(y.grad()[0], 1.0);
}

TEST(FiniteDiff, DetectsWrongGradient) {
  // a deliberately broken op: forward x^2, backward claims 3x
  ScalarFn<double> broken = [](const Var<double>& x) {
    Tensor<double> out = x.value();
    for (auto& v : out.values()) v *= v;
    auto y = make_op<double>("broken", std::move(out), {x}, [](Node<double>& self) {
      auto& p = self.parents[0];
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 3.0 * p->value[i] * self.grad[i];
    });
    return sum(y);
  };
  EXPECT_GT(finite_diff_check(broken, Tensor<double>(Shape{2}, {1.0, 2.0})), 0.1);
}

namespace {

double worst_over_points(const std::function<ScalarFn<double>(std::mt19937_64&)>& make,
                         const Shape& shape, int points, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (int i = 0; i < points; ++i) {
    auto f = make(rng);
    worst = std::max(worst, finite_diff_check(f, random_tensor(shape, rng)));
  }
  return worst;
}

}  // namespace

TEST(FiniteDiff, ConvolutionWrtInputWeightBias) {
  auto make = [](int which) {
    return [which](std::mt19937_64& rng) -> ScalarFn<double> {
      auto x = random_tensor({2, 2, 5, 5}, rng);
      auto w = random_tensor({3, 2, 3, 3}, rng);
      auto b = random_tensor({3}, rng);
      auto probe = random_tensor({2, 3, 3, 3}, rng);
      return [=](const Var<double>& v) {
        auto X = which == 0 ? v : Var<double>::constant(x);
        auto W = which == 1 ? v : Var<double>::constant(w);
        auto B = which == 2 ? v : Var<double>::constant(b);
        return sum(mul(conv2d(X, W, B, 2, 1), Var<double>::constant(probe)));
      };
    };
  };
  EXPECT_LT(worst_over_points(make(0), {2, 2, 5, 5}, 3, 100), 1e-4);
  EXPECT_LT(worst_over_points(make(1), {3, 2, 3, 3}, 3, 101), 1e-4);
  EXPECT_LT(worst_over_points(make(2), {3}, 3, 102), 1e-4);
}

TEST(FiniteDiff, BatchNormTrainMode) {
  auto make = [](std::mt19937_64& rng) -> ScalarFn<double> {
    auto probe = random_tensor({3, 2, 2, 2}, rng);
    auto gamma = random_tensor({2}, rng, 0.5, 1.5);
    auto beta = random_tensor({2}, rng);
    return [=](const Var<double>& v) {
      BatchNormState<double> st(2);
      return sum(mul(batchnorm(v, Var<double>::constant(gamma), Var<double>::constant(beta), st,
                               Mode::train),
                     Var<double>::constant(probe)));
    };
  };
  EXPECT_LT(worst_over_points(make, {3, 2, 2, 2}, 3, 103), 1e-4);
}
