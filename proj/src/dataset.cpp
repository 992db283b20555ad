// SPDX-License-Identifier: Apache-2.0

#include "aquila/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "aquila/error.hpp"
#include "aquila/tensor_io.hpp"

namespace aquila {

namespace fs = std::filesystem;

namespace {

std::string scene_stem(std::uint64_t seed) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%06llu", static_cast<unsigned long long>(seed));
  return buf;
}

}  // namespace

GeneratedScene generate_scene_samples(std::uint64_t scene_seed, const DatasetOptions& options) {
  GeneratedScene out;
  out.scene = generate_scene(scene_seed, options.scene);
  const TemplateBook templates;
  out.samples = render_instructions(out.scene, templates, scene_seed, options.parts);
  if (options.negatives) {
    auto neg = mine_negatives(out.scene, templates, scene_seed, &out.log, options.scene.max_rejections);
    for (auto& s : neg) out.samples.push_back(std::move(s));
  }
  return out;
}

std::vector<GeneratedScene> generate_dataset(const DatasetOptions& options) {
  std::vector<GeneratedScene> out(options.scenes);
  std::size_t threads = options.threads ? options.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, std::max<std::size_t>(1, options.scenes));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < options.scenes; i = next++) {
      try {
        out[i] = generate_scene_samples(options.seed + i, options);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

Vocab dataset_vocab() {
  const auto corpus = template_corpus();
  return Vocab::build(corpus);
}

DatasetSummary write_dataset(const fs::path& dir, const DatasetOptions& options, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force) throw UsageError(dir.string() + " is not empty (use --force to overwrite)");
      for (const char* sub : {"images", "masks"}) fs::remove_all(dir / sub);
      fs::remove(dir / "manifest.jsonl");
      fs::remove(dir / "vocab.txt");
    }
  }
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");

  const std::vector<GeneratedScene> scenes = generate_dataset(options);
  const Vocab vocab = dataset_vocab();
  DatasetSummary summary;
  std::string manifest;
  for (const GeneratedScene& g : scenes) {
    const std::string stem = scene_stem(g.scene.seed);
    const std::string image_rel = "images/" + stem + ".aqtf";
    write_aqtf(dir / image_rel, g.scene.image);
    std::set<std::string> written;
    for (std::size_t k = 0; k < g.samples.size(); ++k) {
      const InstructionSample& s = g.samples[k];
      nlohmann::ordered_json j;
      j["id"] = stem + "_" + std::to_string(k);
      j["kind"] = s.kind;
      j["scene"] = g.scene.seed;
      j["prompt_text"] = s.prompt_text;
      j["response_text"] = s.response_text;
      j["image"] = image_rel;
      auto paths = nlohmann::ordered_json::array();
      for (std::size_t m = 0; m < s.region_masks.size(); ++m) {
        const std::string rel = "masks/" + stem + "_" + s.mask_keys[m] + ".aqtf";
        if (written.insert(rel).second) write_aqtf(dir / rel, s.region_masks[m].grid());
        paths.push_back(rel);
      }
      j["masks"] = paths;
      manifest += j.dump() + "\n";
      ++summary.counts[s.kind];
      ++summary.total;
    }
    for (const auto& line : g.log) summary.log.push_back(line);
  }
  write_file(dir / "manifest.jsonl", manifest);
  write_file(dir / "vocab.txt", vocab.to_text());
  return summary;
}

Dataset load_dataset(const fs::path& dir, const std::vector<std::string>& kinds) {
  Dataset ds;
  ds.vocab = Vocab::from_text(read_file(dir / "vocab.txt"));
  std::istringstream manifest(read_file(dir / "manifest.jsonl"));
  std::map<std::string, std::size_t> image_ids;
  std::map<std::string, RegionMask> mask_cache;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    DatasetSample s;
    try {
      const auto j = nlohmann::json::parse(line);
      s.kind = j.at("kind").get<std::string>();
      if (!kinds.empty() && std::find(kinds.begin(), kinds.end(), s.kind) == kinds.end()) continue;
      s.id = j.at("id").get<std::string>();
      s.scene = j.at("scene").get<std::uint64_t>();
      s.record.prompt_text = j.at("prompt_text").get<std::string>();
      s.record.response_text = j.at("response_text").get<std::string>();
      s.image_path = j.at("image").get<std::string>();
      s.mask_paths = j.at("masks").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    auto [it, inserted] = image_ids.try_emplace(s.image_path, ds.images.size());
    if (inserted) ds.images.push_back(read_aqtf(dir / s.image_path));
    s.image_index = it->second;
    for (const std::string& m : s.mask_paths) {
      auto mit = mask_cache.find(m);
      if (mit == mask_cache.end()) {
        Tensor<float> grid = read_aqtf(dir / m);
        if (grid.rank() != 2) throw FormatError(m + ": mask must be rank 2");
        mit = mask_cache.emplace(m, RegionMask(std::move(grid))).first;
      }
      s.record.region_masks.push_back(mit->second);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace aquila
