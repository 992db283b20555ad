// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include "aquila/model.hpp"
#include "aquila/vocab.hpp"

namespace aquila {

struct CheckpointMeta {
  int stage = 0;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
};

// A checkpoint is a directory:
//   manifest.json  format, version, stage, step, seed, config_hash and, per
//                  parameter in model order, {name, shape, offset, trainable}
//                  (offset in bytes into weights.bin)
//   weights.bin    every parameter as little-endian f32, concatenated
//   config.txt     architecture keys, including vocab_size
//   vocab.txt      the vocabulary, one token per line
void save_checkpoint(const std::filesystem::path& dir, const AquilaModel<float>& model, const Vocab& vocab,
                     const CheckpointMeta& meta);

struct Checkpoint {
  std::unique_ptr<AquilaModel<float>> model;
  Vocab vocab;
  CheckpointMeta meta;
  std::string config_hash;
};

// Rebuilds the model from the stored configuration and fills in every
// parameter. Throws FormatError on corrupt or truncated files.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Reads only the manifest's config_hash.
std::string checkpoint_config_hash(const std::filesystem::path& dir);

// Copies stored values into an existing model. All parameters are validated
// before any is written; mismatched shapes raise ShapeError naming every
// offending parameter, and the model is left untouched on any error.
// Trainability flags are not changed.
CheckpointMeta load_parameters(const std::filesystem::path& dir, AquilaModel<float>& model);

}  // namespace aquila
