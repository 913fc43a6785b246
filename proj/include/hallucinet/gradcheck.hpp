#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "hallucinet/autograd.hpp"

namespace hallucinet {

/// Scalar-valued function of one tensor, built from engine ops.
template <class T>
using ScalarFn = std::function<Var<T>(const Var<T>&)>;

/// Largest |analytic - central difference| / max(1, |central difference|)
/// over all coordinates of `point`.
template <class T>
double finite_diff_check(const ScalarFn<T>& f, const Tensor<T>& point, double epsilon = 1e-6) {
  auto x = Var<T>::leaf(point, true);
  auto y = f(x);
  if (y.value().size() != 1) throw ShapeError("finite_diff_check: function must be scalar");
  if (!y.value().all_finite()) throw NumericError("finite_diff_check: non-finite value");
  backward(y);
  Tensor<T> analytic = x.grad().empty() ? Tensor<T>(point.shape(), T{0}) : x.grad();

  auto eval = [&](const Tensor<T>& at) {
    const double v = f(Var<T>::constant(at)).value().item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite value");
    return v;
  };

  double worst = 0.0;
  Tensor<T> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const T orig = probe[i];
    probe[i] = static_cast<T>(orig + epsilon);
    const double up = eval(probe);
    probe[i] = static_cast<T>(orig - epsilon);
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double err = std::abs(static_cast<double>(analytic[i]) - numeric) /
                       std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace hallucinet
