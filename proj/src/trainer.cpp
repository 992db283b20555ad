// SPDX-License-Identifier: Apache-2.0

#include "aquila/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>

#include "aquila/error.hpp"
#include "aquila/metrics.hpp"

namespace aquila {

namespace {

bool has_prefix(std::string_view name, std::string_view prefix) { return name.substr(0, prefix.size()) == prefix; }

bool encoder_frozen(const ParameterSet<float>& params) {
  for (std::size_t i = 0; i < params.size(); ++i)
    if (has_prefix(params[i].name, "encoder.") && params[i].trainable) return false;
  return true;
}

}  // namespace

StagePlan StagePlan::for_stage(int stage) {
  if (stage == 1) return {1, {"projector.image.", "projector.region."}, {"encoder.", "lm."}};
  if (stage == 2) return {2, {"projector.image.", "projector.region.", "lm."}, {"encoder."}};
  throw ConfigError("stage must be 1 or 2, got " + std::to_string(stage));
}

void StagePlan::apply(ParameterSet<float>& params) const {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<float>& p = params[i];
    p.trainable = std::any_of(trainable_prefixes.begin(), trainable_prefixes.end(),
                              [&](const std::string& pre) { return has_prefix(p.name, pre); });
  }
}

TrainResult train_stage(AquilaModel<float>& model, const StagePlan& plan, const Dataset& data,
                        const TrainOptions& options) {
  if (options.batch == 0) throw ConfigError("batch must be positive");
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& kinds = options.kinds;
    if (kinds.empty() || std::find(kinds.begin(), kinds.end(), data.samples[i].kind) != kinds.end())
      pool.push_back(i);
  }
  if (pool.empty()) throw PreconditionError("training set is empty");
  const std::size_t side = model.config().image_size;
  for (const Tensor<float>& img : data.images) {
    if (img.shape() != Shape{3, side, side})
      throw ConfigError("dataset image " + shape_str(img.shape()) + " does not match image_size " +
                        std::to_string(side));
  }

  plan.apply(model.params());
  ParameterSet<float>& params = model.params();
  params.zero_grad();
  AdamW<float> optimizer(options.optim);

  // A frozen encoder makes every image's pyramid a constant.
  const bool cache = encoder_frozen(params);
  std::vector<std::optional<FeaturePyramid<float>>> pyramids(data.images.size());

  const std::size_t per_epoch = (pool.size() + options.batch - 1) / options.batch;
  const std::size_t total = options.steps ? options.steps : options.epochs * per_epoch;
  Rng shuffle_rng(Rng::derive(options.seed, 0x5417f + static_cast<std::uint64_t>(plan.stage)));
  std::vector<std::size_t> order = pool;
  std::size_t cursor = order.size();

  TrainResult result;
  result.samples = pool.size();
  result.losses.reserve(total);
  for (std::size_t step = 0; step < total; ++step) {
    if (cursor >= order.size()) {
      order = pool;
      shuffle_rng.shuffle(std::span<std::size_t>(order));
      cursor = 0;
    }
    const std::size_t n = std::min(options.batch, order.size() - cursor);
    double batch_loss = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const DatasetSample& s = data.samples[order[cursor + b]];
      Tape<float> tape;
      PyramidVars<float> vars;
      if (cache) {
        auto& slot = pyramids[s.image_index];
        if (!slot) slot = model.encode(data.images[s.image_index]);
        vars = as_constants(tape, *slot);
      } else {
        vars = model.encoder().forward(tape, tape.constant(data.images[s.image_index]));
      }
      Var<float> loss = model.loss(tape, vars, s.record, data.vocab);
      const float value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw TrainingError("non-finite loss at stage " + std::to_string(plan.stage) + " step " +
                            std::to_string(step + 1) + " on sample " + s.id);
      }
      batch_loss += value;
      tape.backward(loss, 1.0f / static_cast<float>(n));
    }
    cursor += n;
    optimizer.step(params);
    params.zero_grad();
    batch_loss /= static_cast<double>(n);
    result.losses.push_back(batch_loss);
    if (options.on_step) options.on_step(step + 1, batch_loss);
  }
  return result;
}

std::string respond_text(const AquilaModel<float>& model, const Vocab& vocab, const Tensor<float>& image,
                         const PromptRecord& record, std::size_t max_new) {
  const auto ids = model.respond(model.encode(image), record, vocab, max_new);
  return detokenize(ids, vocab);
}

std::vector<std::string> EvalReport::lines() const {
  std::vector<std::string> out;
  char buf[160];
  for (const auto& [kind, s] : kinds) {
    std::snprintf(buf, sizeof(buf), "%s.count=%zu", kind.c_str(), s.count);
    out.emplace_back(buf);
    std::snprintf(buf, sizeof(buf), "%s.exact_match=%.6f", kind.c_str(), s.exact_match);
    out.emplace_back(buf);
    std::snprintf(buf, sizeof(buf), "%s.token_f1=%.6f", kind.c_str(), s.token_f1);
    out.emplace_back(buf);
  }
  return out;
}

EvalReport evaluate(const AquilaModel<float>& model, const Dataset& data, const std::vector<std::string>& kinds,
                    std::size_t max_new) {
  EvalReport report;
  std::vector<std::optional<FeaturePyramid<float>>> pyramids(data.images.size());
  for (const DatasetSample& s : data.samples) {
    if (!kinds.empty() && std::find(kinds.begin(), kinds.end(), s.kind) == kinds.end()) continue;
    auto& slot = pyramids[s.image_index];
    if (!slot) slot = model.encode(data.images[s.image_index]);
    const std::string pred = detokenize(model.respond(*slot, s.record, data.vocab, max_new), data.vocab);
    KindScore& k = report.kinds[s.kind];
    ++k.count;
    k.exact_match += exact_match(pred, s.record.response_text) ? 1.0 : 0.0;
    k.token_f1 += token_f1(pred, s.record.response_text);
  }
  if (report.kinds.empty()) throw PreconditionError("no samples of the requested kinds");
  for (auto& [kind, k] : report.kinds) {
    k.exact_match /= double(k.count);
    k.token_f1 /= double(k.count);
  }
  return report;
}

}  // namespace aquila
