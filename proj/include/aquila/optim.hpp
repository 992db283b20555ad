// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <string>

#include "aquila/autograd.hpp"

namespace aquila {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// AdamW with decoupled weight decay (Loshchilov & Hutter). Parameters with
// trainable == false are skipped entirely, so their bytes never change.
template <typename Real>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  const AdamWConfig& config() const { return config_; }
  long steps() const { return step_; }

  void step(ParameterSet<Real>& params) {
    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, double(step_));
    const Real b1 = Real(config_.beta1), b2 = Real(config_.beta2);
    const Real decay = Real(1.0 - config_.lr * config_.weight_decay);
    const Real step_size = Real(config_.lr / bc1);
    const Real inv_sqrt_bc2 = Real(1.0 / std::sqrt(bc2));
    const Real eps = Real(config_.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter<Real>& p = params[i];
      if (!p.trainable) continue;
      Moments& mo = state_[p.name];
      if (mo.m.size() != p.value.size()) {
        mo.m.assign(p.value.size(), Real(0));
        mo.v.assign(p.value.size(), Real(0));
      }
      Real* w = p.value.ptr();
      const Real* g = p.grad.ptr();
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        mo.m[j] = b1 * mo.m[j] + (Real(1) - b1) * g[j];
        mo.v[j] = b2 * mo.v[j] + (Real(1) - b2) * g[j] * g[j];
        const Real denom = std::sqrt(mo.v[j]) * inv_sqrt_bc2 + eps;
        w[j] = w[j] * decay - step_size * mo.m[j] / denom;
      }
    }
  }

 private:
  struct Moments {
    std::vector<Real> m;
    std::vector<Real> v;
  };

  AdamWConfig config_;
  long step_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace aquila
