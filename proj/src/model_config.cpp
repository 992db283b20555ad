// SPDX-License-Identifier: Apache-2.0

#include "aquila/model_config.hpp"

#include <string>

#include "aquila/error.hpp"

namespace aquila {

void ModelConfig::validate() const {
  if (image_size == 0 || image_size % kPyramidStrides.back() != 0) {
    throw ConfigError("image_size must be a positive multiple of 32, got " + std::to_string(image_size));
  }
  if (d_model == 0 || lm_heads == 0 || d_model % lm_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by lm.heads (" +
                      std::to_string(lm_heads) + ")");
  }
  if (spatial_size == 0) throw ConfigError("spatial_size must be positive");
  if (lm_layers == 0 || lm_ffn == 0) throw ConfigError("lm.layers and lm.ffn must be positive");
  if (lm_max_pos == 0) throw ConfigError("lm.max_pos must be positive");
  if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
}

}  // namespace aquila
