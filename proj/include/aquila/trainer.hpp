// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "aquila/dataset.hpp"
#include "aquila/model.hpp"
#include "aquila/optim.hpp"

namespace aquila {

// Which parameter-name prefixes a stage updates. Stage 1 trains only the two
// projectors; stage 2 also trains the language model. The encoder is frozen
// in both.
struct StagePlan {
  int stage = 1;
  std::vector<std::string> trainable_prefixes;
  std::vector<std::string> frozen_prefixes;

  static StagePlan for_stage(int stage);
  void apply(ParameterSet<float>& params) const;
};

struct TrainOptions {
  AdamWConfig optim;
  std::size_t batch = 8;
  std::size_t epochs = 1;
  std::size_t steps = 0;  // nonzero overrides epochs
  std::uint64_t seed = 0;
  std::vector<std::string> kinds;  // empty: all samples
  // Called after every optimizer step with the mean batch loss.
  std::function<void(std::size_t step, double loss)> on_step;
};

struct TrainResult {
  std::vector<double> losses;  // one per step
  std::size_t samples = 0;
};

// Runs one stage over the dataset: seeded Fisher-Yates shuffles per epoch,
// batches whose gradients are averaged, one AdamW step per batch on the
// stage's trainable parameters only. Throws PreconditionError for an empty
// (filtered) dataset and TrainingError on a non-finite loss.
TrainResult train_stage(AquilaModel<float>& model, const StagePlan& plan, const Dataset& data,
                        const TrainOptions& options);

// Greedy response for one sample.
std::string respond_text(const AquilaModel<float>& model, const Vocab& vocab, const Tensor<float>& image,
                         const PromptRecord& record, std::size_t max_new = 64);

struct KindScore {
  std::size_t count = 0;
  double exact_match = 0;
  double token_f1 = 0;
};

struct EvalReport {
  std::map<std::string, KindScore> kinds;
  // `kind.metric=value` lines, sorted by kind.
  std::vector<std::string> lines() const;
};

// Scores greedy responses against references, per kind. Throws
// PreconditionError when the dataset holds no samples of the requested kinds.
EvalReport evaluate(const AquilaModel<float>& model, const Dataset& data, const std::vector<std::string>& kinds,
                    std::size_t max_new = 64);

}  // namespace aquila
