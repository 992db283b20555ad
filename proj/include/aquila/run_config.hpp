// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "aquila/model_config.hpp"
#include "aquila/optim.hpp"

namespace aquila {

struct StageSettings {
  double lr = 1e-3;
  std::size_t epochs = 1;
  // When nonzero, the exact number of optimizer steps; overrides epochs.
  std::size_t steps = 0;
  // Sample kinds used by the stage; empty means all.
  std::vector<std::string> kinds;
};

// `key = value` run configuration. '#' starts a comment. Unknown keys are an
// error.
//   seed, image_size, d_model, spatial_size, lm.layers, lm.heads, lm.ffn,
//   lm.max_pos, init_std, optim.beta1, optim.beta2, optim.eps,
//   optim.weight_decay, batch, stage1.{lr,epochs,steps,kinds},
//   stage2.{lr,epochs,steps,kinds}, data, out
struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  AdamWConfig optim;
  std::size_t batch = 8;
  StageSettings stage1{1e-3, 1, 0, {}};
  StageSettings stage2{3e-4, 1, 0, {}};
  std::string data;
  std::string out;

  const StageSettings& stage(int s) const;
  AdamWConfig optim_for(int s) const;

  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);
  std::string to_text() const;
};

// Architecture keys only, one `key = value` per line, including vocab_size.
std::string model_config_text(const ModelConfig& config);
ModelConfig parse_model_config(std::string_view text);

// FNV-1a (64-bit) over model_config_text, as 16 hex digits. Two configs with
// the same hash build parameter sets with identical names and shapes.
std::string config_hash(const ModelConfig& config);

}  // namespace aquila
