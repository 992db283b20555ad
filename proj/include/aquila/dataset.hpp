// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "aquila/scene.hpp"
#include "aquila/sequence.hpp"
#include "aquila/vocab.hpp"

namespace aquila {

struct DatasetOptions {
  std::uint64_t seed = 0;
  std::size_t scenes = 512;
  bool negatives = false;
  bool parts = false;
  SceneConfig scene;
  // 0 picks the hardware concurrency. Output never depends on it.
  std::size_t threads = 0;
};

struct GeneratedScene {
  Scene scene;
  std::vector<InstructionSample> samples;
  std::vector<std::string> log;
};

// Scene i uses seed options.seed + i, so datasets made from disjoint seed
// ranges share no scenes.
GeneratedScene generate_scene_samples(std::uint64_t scene_seed, const DatasetOptions& options);
std::vector<GeneratedScene> generate_dataset(const DatasetOptions& options);

// The closed vocabulary of the template corpus.
Vocab dataset_vocab();

struct DatasetSummary {
  std::map<std::string, std::size_t> counts;  // per kind
  std::size_t total = 0;
  std::vector<std::string> log;
};

// Writes manifest.jsonl, vocab.txt, images/*.aqtf and masks/*.aqtf. Refuses a
// non-empty directory unless force is set.
DatasetSummary write_dataset(const std::filesystem::path& dir, const DatasetOptions& options, bool force);

struct DatasetSample {
  std::string id;
  std::string kind;
  std::uint64_t scene = 0;
  std::size_t image_index = 0;  // into Dataset::images
  std::string image_path;
  std::vector<std::string> mask_paths;
  PromptRecord record;
};

struct Dataset {
  Vocab vocab;
  std::vector<Tensor<float>> images;
  std::vector<DatasetSample> samples;
};

// Loads a dataset directory. With a non-empty kind filter only those kinds
// are kept. Throws FormatError on malformed manifests or tensors.
Dataset load_dataset(const std::filesystem::path& dir, const std::vector<std::string>& kinds = {});

}  // namespace aquila
