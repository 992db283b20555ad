// SPDX-License-Identifier: Apache-2.0

#include "aquila/checkpoint.hpp"

#include <cstring>

#include "json.hpp"

#include "aquila/error.hpp"
#include "aquila/run_config.hpp"
#include "aquila/tensor_io.hpp"

namespace aquila {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFormat = "aquila-checkpoint";
constexpr int kVersion = 1;

struct StoredParam {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;
  bool trainable = true;
};

struct Stored {
  CheckpointMeta meta;
  std::string config_hash;
  std::vector<StoredParam> params;
  std::string weights;
};

Stored read_stored(const fs::path& dir) {
  Stored s;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(dir / "manifest.json"));
    if (j.at("format").get<std::string>() != kFormat) throw FormatError(dir.string() + ": not a checkpoint");
    if (j.at("version").get<int>() != kVersion)
      throw FormatError(dir.string() + ": unsupported checkpoint version " + j.at("version").dump());
    s.meta.stage = j.at("stage").get<int>();
    s.meta.step = j.at("step").get<std::uint64_t>();
    s.meta.seed = j.at("seed").get<std::uint64_t>();
    s.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& p : j.at("params")) {
      s.params.push_back({p.at("name").get<std::string>(), p.at("shape").get<Shape>(),
                          p.at("offset").get<std::uint64_t>(), p.at("trainable").get<bool>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir.string() + "/manifest.json: " + e.what());
  }
  s.weights = read_file(dir / "weights.bin");
  std::uint64_t expected = 0;
  for (const StoredParam& p : s.params) {
    if (p.offset != expected)
      throw FormatError("checkpoint parameter " + p.name + ": offset " + std::to_string(p.offset) +
                        " does not follow the previous parameter");
    expected += 4 * shape_numel(p.shape);
    if (expected > s.weights.size())
      throw FormatError("checkpoint parameter " + p.name + ": weights.bin is truncated (" +
                        std::to_string(s.weights.size()) + " bytes)");
  }
  if (expected != s.weights.size())
    throw FormatError("checkpoint weights.bin has " + std::to_string(s.weights.size() - expected) +
                      " trailing bytes");
  return s;
}

// Validates every parameter of `model` against `stored`, then copies.
void apply(const Stored& stored, AquilaModel<float>& model, bool set_trainable) {
  ParameterSet<float>& params = model.params();
  std::string mismatches;
  std::vector<const StoredParam*> order(params.size(), nullptr);
  for (const StoredParam& sp : stored.params) {
    const Parameter<float>* p = params.find(sp.name);
    if (!p) {
      mismatches += "\n  " + sp.name + ": not a parameter of this model";
      continue;
    }
    if (p->value.shape() != sp.shape) {
      mismatches += "\n  " + sp.name + ": stored " + shape_str(sp.shape) + ", model expects " +
                    shape_str(p->value.shape());
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (const StoredParam& sp : stored.params)
      if (sp.name == params[i].name) order[i] = &sp;
    if (!order[i]) mismatches += "\n  " + params[i].name + ": missing from checkpoint";
  }
  if (!mismatches.empty()) throw ShapeError("checkpoint does not match the model configuration:" + mismatches);

  const auto* bytes = reinterpret_cast<const unsigned char*>(stored.weights.data());
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<float>& p = params[i];
    const unsigned char* src = bytes + order[i]->offset;
    for (std::size_t k = 0; k < p.value.size(); ++k) p.value[k] = load_f32(src + 4 * k);
    if (set_trainable) p.trainable = order[i]->trainable;
  }
}

}  // namespace

void save_checkpoint(const fs::path& dir, const AquilaModel<float>& model, const Vocab& vocab,
                     const CheckpointMeta& meta) {
  const ParameterSet<float>& params = model.params();
  nlohmann::ordered_json j;
  j["format"] = kFormat;
  j["version"] = kVersion;
  j["stage"] = meta.stage;
  j["step"] = meta.step;
  j["seed"] = meta.seed;
  j["config_hash"] = config_hash(model.config());
  auto list = nlohmann::ordered_json::array();
  std::string weights;
  weights.reserve(4 * params.numel());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter<float>& p = params[i];
    nlohmann::ordered_json e;
    e["name"] = p.name;
    e["shape"] = p.value.shape();
    e["offset"] = weights.size();
    e["trainable"] = p.trainable;
    list.push_back(std::move(e));
    for (float v : p.value.data()) append_f32(weights, v);
  }
  j["params"] = std::move(list);
  fs::create_directories(dir);
  write_file(dir / "manifest.json", j.dump(1) + "\n");
  write_file(dir / "weights.bin", weights);
  write_file(dir / "config.txt", model_config_text(model.config()));
  write_file(dir / "vocab.txt", vocab.to_text());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  Stored stored = read_stored(dir);
  ModelConfig config;
  try {
    config = parse_model_config(read_file(dir / "config.txt"));
  } catch (const ConfigError& e) {
    throw FormatError(dir.string() + "/config.txt: " + e.what());
  }
  if (config_hash(config) != stored.config_hash)
    throw FormatError(dir.string() + ": config.txt does not match the manifest config_hash");
  Checkpoint ck;
  ck.vocab = Vocab::from_text(read_file(dir / "vocab.txt"));
  if (ck.vocab.size() != config.vocab_size)
    throw FormatError(dir.string() + ": vocabulary has " + std::to_string(ck.vocab.size()) +
                      " tokens, config expects " + std::to_string(config.vocab_size));
  ck.model = std::make_unique<AquilaModel<float>>(config, stored.meta.seed);
  apply(stored, *ck.model, true);
  ck.meta = stored.meta;
  ck.config_hash = stored.config_hash;
  return ck;
}

std::string checkpoint_config_hash(const fs::path& dir) {
  try {
    return nlohmann::json::parse(read_file(dir / "manifest.json")).at("config_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir.string() + "/manifest.json: " + e.what());
  }
}

CheckpointMeta load_parameters(const fs::path& dir, AquilaModel<float>& model) {
  Stored stored = read_stored(dir);
  apply(stored, model, false);
  return stored.meta;
}

}  // namespace aquila
