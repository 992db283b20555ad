// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

#include "aquila/rng.hpp"
#include "aquila/tensor.hpp"

namespace aquila {

inline constexpr std::size_t kPyramidLevels = 4;
inline constexpr std::array<std::size_t, kPyramidLevels> kPyramidChannels{16, 32, 64, 128};
inline constexpr std::array<std::size_t, kPyramidLevels> kPyramidStrides{4, 8, 16, 32};

struct ModelConfig {
  std::size_t image_size = 128;
  std::size_t d_model = 64;
  std::size_t spatial_size = 224;
  std::size_t lm_layers = 2;
  std::size_t lm_heads = 4;
  std::size_t lm_ffn = 256;
  std::size_t lm_max_pos = 256;
  std::size_t vocab_size = 0;
  double init_std = 0.02;

  // Throws ConfigError on inconsistent values.
  void validate() const;
};

template <typename Real>
Tensor<Real> normal_tensor(Shape shape, Rng& rng, double stddev) {
  Tensor<Real> t(std::move(shape));
  for (Real& v : t.data()) v = Real(rng.normal(0.0, stddev));
  return t;
}

}  // namespace aquila
