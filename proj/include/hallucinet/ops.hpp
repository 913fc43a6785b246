#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "hallucinet/autograd.hpp"

namespace hallucinet {

enum class Mode { train, infer };

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t rows() const { return channels * kernel_h * kernel_w; }
  std::size_t cols() const { return out_h * out_w; }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
  if (in + 2 * pad < k) return 0;
  return (in + 2 * pad - k) / stride + 1;
}

// cols[(c*kh + i)*kw + j][oh*Wo + ow] = img[c][oh*s + i - p][ow*s + j - p]
template <class T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::ptrdiff_t H = g.height, W = g.width, pad = g.padding;
  const std::size_t plane = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kernel_h; ++i) {
      for (std::size_t j = 0; j < g.kernel_w; ++j) {
        T* row = cols + ((c * g.kernel_h + i) * g.kernel_w + j) * plane;
        const T* src = img + c * g.height * g.width;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) - pad;
          T* out = row + oh * g.out_w;
          if (ih < 0 || ih >= H) {
            std::fill(out, out + g.out_w, T{0});
            continue;
          }
          const T* line = src + ih * W;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + j) - pad;
            out[ow] = (iw < 0 || iw >= W) ? T{0} : line[iw];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back into an image buffer.
template <class T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
  const std::ptrdiff_t H = g.height, W = g.width, pad = g.padding;
  const std::size_t plane = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kernel_h; ++i) {
      for (std::size_t j = 0; j < g.kernel_w; ++j) {
        const T* row = cols + ((c * g.kernel_h + i) * g.kernel_w + j) * plane;
        T* dst = img + c * g.height * g.width;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) - pad;
          if (ih < 0 || ih >= H) continue;
          T* line = dst + ih * W;
          const T* in = row + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + j) - pad;
            if (iw >= 0 && iw < W) line[iw] += in[ow];
          }
        }
      }
    }
  }
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and reductions

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op<T>("add", std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) p->accumulate(self.grad);
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op<T>("sub", std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) pa->accumulate(self.grad);
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op<T>("mul", std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= factor;
  return make_op<T>("scale", std::move(out), {a}, [factor](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <class T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= v;
  return make_op<T>("square", std::move(out), {a}, [](Node<T>& self) {
    auto& p = self.parents[0];
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T{2} * p->value[i] * self.grad[i];
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (T v : a.value().values()) acc += v;
  return make_op<T>("sum", Tensor<T>::scalar(static_cast<T>(acc)), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const T up = self.grad[0];
    for (auto& v : g.values()) v += up;
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  double acc = 0.0;
  for (T v : a.value().values()) acc += v;
  const double n = static_cast<double>(a.value().size());
  return make_op<T>("mean", Tensor<T>::scalar(static_cast<T>(acc / n)), {a},
                    [n](Node<T>& self) {
                      auto& g = self.parents[0]->grad_buffer();
                      const T up = static_cast<T>(self.grad[0] / n);
                      for (auto& v : g.values()) v += up;
                    });
}

/// Elementwise arithmetic mean of equally shaped tensors.
template <class T>
Var<T> mean_of(const std::vector<Var<T>>& items) {
  if (items.empty()) throw ShapeError("mean_of: empty list");
  for (const auto& v : items) detail::require_same_shape(items.front(), v, "mean_of");
  if (items.size() == 1) return items.front();
  const T inv = T{1} / static_cast<T>(items.size());
  Tensor<T> out(items.front().shape(), T{0});
  for (const auto& v : items) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v.value()[i];
  }
  for (auto& v : out.values()) v *= inv;
  return make_op<T>("mean_of", std::move(out), items, [inv](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += inv * self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// activations

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  return make_op<T>("relu", std::move(out), {x}, [](Node<T>& self) {
    auto& p = self.parents[0];
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p->value[i] > T{0}) g[i] += self.grad[i];
    }
  });
}

template <class T>
T sigmoid_value(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = sigmoid_value(v);
  return make_op<T>("sigmoid", std::move(out), {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = self.value[i];
      g[i] += self.grad[i] * s * (T{1} - s);
    }
  });
}

/// Per-pixel softmax over the channel axis of an (N, C, H, W) tensor.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  require_rank(logits, 4, "channel_softmax");
  const std::size_t N = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  Tensor<T> out(logits.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.data() + n * C * HW;
    T* y = out.data() + n * C * HW;
    for (std::size_t p = 0; p < HW; ++p) {
      T m = z[p];
      for (std::size_t c = 1; c < C; ++c) m = std::max(m, z[c * HW + p]);
      T total{0};
      for (std::size_t c = 0; c < C; ++c) {
        const T e = std::exp(z[c * HW + p] - m);
        y[c * HW + p] = e;
        total += e;
      }
      for (std::size_t c = 0; c < C; ++c) y[c * HW + p] /= total;
    }
  }
  return out;
}

template <class T>
Var<T> channel_softmax(const Var<T>& logits) {
  return make_op<T>("channel_softmax", softmax_channels(logits.value()), {logits},
                    [](Node<T>& self) {
                      const auto& y = self.value;
                      const std::size_t N = y.dim(0), C = y.dim(1), HW = y.dim(2) * y.dim(3);
                      auto& g = self.parents[0]->grad_buffer();
                      for (std::size_t n = 0; n < N; ++n) {
                        const std::size_t base = n * C * HW;
                        for (std::size_t p = 0; p < HW; ++p) {
                          T dot{0};
                          for (std::size_t c = 0; c < C; ++c) {
                            dot += self.grad[base + c * HW + p] * y[base + c * HW + p];
                          }
                          for (std::size_t c = 0; c < C; ++c) {
                            const std::size_t k = base + c * HW + p;
                            g[k] += y[k] * (self.grad[k] - dot);
                          }
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// convolution

/// Cross-correlation of (N, Ci, H, W) input with (Co, Ci, kh, kw) weights.
template <class T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, std::size_t stride,
              std::size_t padding) {
  const auto& x = input.value();
  const auto& w = weight.value();
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: weight expects " + std::to_string(w.dim(1)) +
                     " input channels, input has " + std::to_string(x.dim(1)));
  }
  require_shape(bias.value(), Shape{w.dim(0)}, "conv2d bias");
  const std::size_t N = x.dim(0), Co = w.dim(0);
  detail::ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), w.dim(3), stride, padding,
                         detail::conv_out_extent(x.dim(2), w.dim(2), stride, padding),
                         detail::conv_out_extent(x.dim(3), w.dim(3), stride, padding)};
  if (g.out_h == 0 || g.out_w == 0) {
    throw ShapeError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t K = g.rows(), P = g.cols();
  auto cols = std::make_shared<AlignedVector<T>>(N * K * P);
  Tensor<T> out(Shape{N, Co, g.out_h, g.out_w});
  detail::ConstMatMap<T> W(w.data(), Co, K);
  for (std::size_t n = 0; n < N; ++n) {
    T* c = cols->data() + n * K * P;
    detail::im2col(x.data() + n * g.channels * g.height * g.width, g, c);
    detail::MatMap<T> Y(out.data() + n * Co * P, Co, P);
    Y.noalias() = W * detail::ConstMatMap<T>(c, K, P);
    for (std::size_t o = 0; o < Co; ++o) Y.row(o).array() += bias.value()[o];
  }
  return make_op<T>("conv2d", std::move(out), {input, weight, bias},
                    [g, N, Co, K, P, cols](Node<T>& self) {
                      auto& px = self.parents[0];
                      auto& pw = self.parents[1];
                      auto& pb = self.parents[2];
                      if (pw->requires_grad) {
                        detail::MatMap<T> dW(pw->grad_buffer().data(), Co, K);
                        for (std::size_t n = 0; n < N; ++n) {
                          detail::ConstMatMap<T> G(self.grad.data() + n * Co * P, Co, P);
                          dW.noalias() +=
                              G * detail::ConstMatMap<T>(cols->data() + n * K * P, K, P).transpose();
                        }
                      }
                      if (pb->requires_grad) {
                        auto& db = pb->grad_buffer();
                        for (std::size_t n = 0; n < N; ++n) {
                          detail::ConstMatMap<T> G(self.grad.data() + n * Co * P, Co, P);
                          for (std::size_t o = 0; o < Co; ++o) db[o] += G.row(o).sum();
                        }
                      }
                      if (px->requires_grad) {
                        auto& dx = px->grad_buffer();
                        detail::ConstMatMap<T> W(pw->value.data(), Co, K);
                        AlignedVector<T> dcols(K * P);
                        for (std::size_t n = 0; n < N; ++n) {
                          detail::ConstMatMap<T> G(self.grad.data() + n * Co * P, Co, P);
                          detail::MatMap<T>(dcols.data(), K, P).noalias() = W.transpose() * G;
                          detail::col2im(dcols.data(), g,
                                         dx.data() + n * g.channels * g.height * g.width);
                        }
                      }
                    });
}

/// Fractionally strided convolution of (N, Ci, H, W) input with (Ci, Co, k, k)
/// weights. Output extent is (H-1)*stride - 2*padding + k.
template <class T>
Var<T> transposed_conv2d(const Var<T>& input, const Var<T>& weight, std::size_t stride,
                         std::size_t padding) {
  const auto& x = input.value();
  const auto& w = weight.value();
  require_rank(x, 4, "transposed_conv2d input");
  require_rank(w, 4, "transposed_conv2d weight");
  if (stride == 0) throw ShapeError("transposed_conv2d: stride must be positive");
  if (w.dim(0) != x.dim(1)) {
    throw ShapeError("transposed_conv2d: weight expects " + std::to_string(w.dim(0)) +
                     " input channels, input has " + std::to_string(x.dim(1)));
  }
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), Wd = x.dim(3);
  const std::size_t Co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>((H - 1) * stride + kh) -
                            static_cast<std::ptrdiff_t>(2 * padding);
  const std::ptrdiff_t ow = static_cast<std::ptrdiff_t>((Wd - 1) * stride + kw) -
                            static_cast<std::ptrdiff_t>(2 * padding);
  if (oh <= 0 || ow <= 0) throw ShapeError("transposed_conv2d: empty output");
  // geometry of the adjoint convolution: output image -> input grid
  detail::ConvGeometry g{Co, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), kh, kw,
                         stride, padding, H, Wd};
  const std::size_t K = g.rows(), P = H * Wd;
  Tensor<T> out(Shape{N, Co, g.height, g.width}, T{0});
  detail::ConstMatMap<T> Wm(w.data(), Ci, K);
  AlignedVector<T> cols(K * P);
  for (std::size_t n = 0; n < N; ++n) {
    detail::ConstMatMap<T> X(x.data() + n * Ci * P, Ci, P);
    detail::MatMap<T>(cols.data(), K, P).noalias() = Wm.transpose() * X;
    detail::col2im(cols.data(), g, out.data() + n * Co * g.height * g.width);
  }
  return make_op<T>(
      "transposed_conv2d", std::move(out), {input, weight}, [g, N, Ci, K, P](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        AlignedVector<T> dcols(K * P);
        const std::size_t out_plane = g.channels * g.height * g.width;
        for (std::size_t n = 0; n < N; ++n) {
          detail::im2col(self.grad.data() + n * out_plane, g, dcols.data());
          detail::ConstMatMap<T> D(dcols.data(), K, P);
          if (pw->requires_grad) {
            detail::MatMap<T> dW(pw->grad_buffer().data(), Ci, K);
            dW.noalias() += detail::ConstMatMap<T>(px->value.data() + n * Ci * P, Ci, P) *
                            D.transpose();
          }
          if (px->requires_grad) {
            detail::MatMap<T> dX(px->grad_buffer().data() + n * Ci * P, Ci, P);
            dX.noalias() += detail::ConstMatMap<T>(pw->value.data(), Ci, K) * D;
          }
        }
      });
}

/// Kernel extent and padding for an exact x`stride` upsampling.
struct UpsampleGeometry {
  std::size_t kernel;
  std::size_t padding;
};

inline UpsampleGeometry upsample_geometry(std::size_t stride) {
  if (stride == 0) throw ShapeError("upsampling stride must be positive");
  const std::size_t k = 2 * stride - stride % 2;
  return {k, (k - stride) / 2};
}

/// Standard bilinear interpolation kernel on the channel diagonal,
/// shaped (C, C, k, k) for transposed_conv2d.
template <class T>
Tensor<T> bilinear_upsample_weight(std::size_t channels, std::size_t stride) {
  const auto [k, pad] = upsample_geometry(stride);
  (void)pad;
  const double factor = static_cast<double>((k + 1) / 2);
  const double center = (k % 2 == 1) ? factor - 1.0 : factor - 0.5;
  Tensor<T> w(Shape{channels, channels, k, k}, T{0});
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const double v = (1.0 - std::abs(static_cast<double>(i) - center) / factor) *
                         (1.0 - std::abs(static_cast<double>(j) - center) / factor);
        w[((c * channels + c) * k + i) * k + j] = static_cast<T>(v);
      }
    }
  }
  return w;
}

// ---------------------------------------------------------------------------
// pooling

/// 2x2 max pooling with stride 2. Gradient goes to the first maximum in
/// row-major window order.
template <class T>
Var<T> maxpool2(const Var<T>& input) {
  const auto& x = input.value();
  require_rank(x, 4, "maxpool2");
  if (x.dim(2) % 2 || x.dim(3) % 2) {
    throw ShapeError("maxpool2: spatial extents must be even, got " + shape_str(x.shape()));
  }
  const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor<T> out(Shape{x.dim(0), x.dim(1), Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  for (std::size_t nc = 0; nc < NC; ++nc) {
    const T* src = x.data() + nc * H * W;
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) {
        std::size_t best = (2 * i) * W + 2 * j;
        const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
        for (std::size_t k : cand) {
          if (src[k] > src[best]) best = k;
        }
        const std::size_t o = nc * Ho * Wo + i * Wo + j;
        out[o] = src[best];
        (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return make_op<T>("maxpool2", std::move(out), {input}, [argmax, H, W, Ho, Wo](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const std::size_t plane = Ho * Wo;
    for (std::size_t o = 0; o < self.grad.size(); ++o) {
      g[(o / plane) * H * W + (*argmax)[o]] += self.grad[o];
    }
  });
}

// ---------------------------------------------------------------------------
// batch normalization

template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

/// Per-channel normalization of (N, C, H, W). Train mode normalizes with
/// batch statistics and folds them into the running averages; infer mode
/// uses the running averages.
template <class T>
Var<T> batchnorm(const Var<T>& input, const Var<T>& scale, const Var<T>& shift,
                 BatchNormState<T>& state, Mode mode) {
  const auto& x = input.value();
  require_rank(x, 4, "batchnorm");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require_shape(scale.value(), Shape{C}, "batchnorm scale");
  require_shape(shift.value(), Shape{C}, "batchnorm shift");
  require_shape(state.running_mean, Shape{C}, "batchnorm running mean");
  require_shape(state.running_var, Shape{C}, "batchnorm running var");
  const std::size_t m = N * HW;

  std::vector<double> mu(C), inv_std(C);
  if (mode == Mode::train) {
    if (m < 2) throw ShapeError("batchnorm: train mode needs at least 2 values per channel");
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0, ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * HW;
        for (std::size_t k = 0; k < HW; ++k) s += p[k];
      }
      const double mean_c = s / static_cast<double>(m);
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * HW;
        for (std::size_t k = 0; k < HW; ++k) {
          const double d = p[k] - mean_c;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(m);
      mu[c] = mean_c;
      inv_std[c] = 1.0 / std::sqrt(var + state.epsilon);
      const double unbiased = ss / static_cast<double>(m - 1);
      state.running_mean[c] = static_cast<T>((1.0 - state.momentum) * state.running_mean[c] +
                                             state.momentum * mean_c);
      state.running_var[c] = static_cast<T>((1.0 - state.momentum) * state.running_var[c] +
                                            state.momentum * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(static_cast<double>(state.running_var[c]) + state.epsilon);
    }
  }

  auto xhat = std::make_shared<Tensor<T>>(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * HW;
      const T m_c = static_cast<T>(mu[c]), is = static_cast<T>(inv_std[c]);
      const T gamma = scale.value()[c], beta = shift.value()[c];
      for (std::size_t k = 0; k < HW; ++k) {
        const T h = (x[off + k] - m_c) * is;
        (*xhat)[off + k] = h;
        out[off + k] = gamma * h + beta;
      }
    }
  }

  const bool batch_stats = mode == Mode::train;
  return make_op<T>(
      "batchnorm", std::move(out), {input, scale, shift},
      [xhat, inv_std, N, C, HW, m, batch_stats](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        const auto& dy = self.grad;
        for (std::size_t c = 0; c < C; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t off = (n * C + c) * HW;
            for (std::size_t k = 0; k < HW; ++k) {
              sum_dy += dy[off + k];
              sum_dy_xhat += static_cast<double>(dy[off + k]) * (*xhat)[off + k];
            }
          }
          if (pg->requires_grad) pg->grad_buffer()[c] += static_cast<T>(sum_dy_xhat);
          if (pb->requires_grad) pb->grad_buffer()[c] += static_cast<T>(sum_dy);
          if (!px->requires_grad) continue;
          auto& dx = px->grad_buffer();
          const double gamma = pg->value[c];
          const double k0 = gamma * inv_std[c];
          const double mean_dy = sum_dy / static_cast<double>(m);
          const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(m);
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t off = (n * C + c) * HW;
            for (std::size_t k = 0; k < HW; ++k) {
              double d = dy[off + k];
              if (batch_stats) d = d - mean_dy - (*xhat)[off + k] * mean_dy_xhat;
              dx[off + k] += static_cast<T>(k0 * d);
            }
          }
        }
      });
}

}  // namespace hallucinet
