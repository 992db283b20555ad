// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "aquila/autograd.hpp"
#include "aquila/tensor.hpp"

// Central finite differences, the independent oracle for every reverse-mode
// gradient in the library. Always evaluated in double precision.
namespace aquila {

inline Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f,
                                       const Tensor<double>& x, double h = 1e-5) {
  Tensor<double> probe = x;
  Tensor<double> grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// Finite differences of f() with respect to selected entries of a parameter,
// perturbed in place and restored afterwards.
inline std::vector<double> finite_diff_param(const std::function<double()>& f, Parameter<double>& p,
                                             const std::vector<std::size_t>& indices, double h = 1e-5) {
  std::vector<double> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    const double orig = p.value[i];
    p.value[i] = orig + h;
    const double up = f();
    p.value[i] = orig - h;
    const double down = f();
    p.value[i] = orig;
    out.push_back((up - down) / (2.0 * h));
  }
  return out;
}

// ||a - b|| / max(||a||, ||b||), with 0 when both vectors vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  if (scale == 0.0) return 0.0;
  return std::sqrt(diff) / scale;
}

}  // namespace aquila
