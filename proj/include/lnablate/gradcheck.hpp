#pragma once

// Central-difference gradient verification. The probe path never touches the
// tape, so this stays independent of the backward rules it checks.

#include <cmath>
#include <functional>
#include <span>

#include "lnablate/tensor.hpp"

namespace lnablate {

struct GradCheckOptions {
  double step = 1e-5;  // central-difference h
  double eps = 1e-6;   // denominator floor in |fd - g| / (|g| + eps)
};

namespace detail {

template <typename T>
double probe(const std::function<Tensor<T>()>& f) {
  NoGradGuard ng;
  const double v = static_cast<double>(f().item());
  if (!std::isfinite(v)) throw DivergenceError("finite_difference_check: non-finite value at probe point");
  return v;
}

}  // namespace detail

// Checks d f / d params for a scalar-valued closure over the given leaves.
// Returns the max over all coordinates of |central_diff - autodiff| / (|autodiff| + eps).
template <typename T>
double finite_difference_check_params(const std::function<Tensor<T>()>& f,
                                      std::span<Tensor<T>* const> params,
                                      GradCheckOptions opt = {}) {
  for (Tensor<T>* p : params) {
    p->set_requires_grad();
    p->zero_grad();
  }
  Tensor<T> loss = f();
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw DivergenceError("finite_difference_check: non-finite value at expansion point");
  }
  backward(loss);

  const T h = static_cast<T>(opt.step);
  double worst = 0.0;
  for (Tensor<T>* p : params) {
    const int64_t n = p->numel();
    for (int64_t i = 0; i < n; ++i) {
      const T saved = (*p)[i];
      (*p)[i] = saved + h;
      const double up = detail::probe<T>(f);
      (*p)[i] = saved - h;
      const double dn = detail::probe<T>(f);
      (*p)[i] = saved;
      const double fd = (up - dn) / (2.0 * static_cast<double>(h));
      const double g = static_cast<double>((*p->grad)[static_cast<size_t>(i)]);
      const double rel = std::abs(fd - g) / (std::abs(g) + opt.eps);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

// Single-input form: f maps one tensor to a scalar.
template <typename T>
double finite_difference_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                               const Tensor<T>& point, GradCheckOptions opt = {}) {
  Tensor<T> x = point.clone();
  Tensor<T>* leaves[] = {&x};
  return finite_difference_check_params<T>([&]() { return f(x); }, leaves, opt);
}

}  // namespace lnablate
