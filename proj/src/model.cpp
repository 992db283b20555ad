// SPDX-License-Identifier: Apache-2.0

#include "aquila/model.hpp"

#include "aquila/ops.hpp"

namespace aquila {

namespace {
enum InitStream : std::uint64_t { kEncoderStream = 1, kImageStream = 2, kRegionStream = 3, kLmStream = 4 };

const ModelConfig& validated(const ModelConfig& c) {
  c.validate();
  return c;
}
}  // namespace

template <typename Real>
AquilaModel<Real>::AquilaModel(const ModelConfig& config, std::uint64_t seed)
    : config_(validated(config)),
      params_(),
      encoder_(params_, config_, Rng(Rng::derive(seed, kEncoderStream))),
      image_projector_(params_, config_, Rng(Rng::derive(seed, kImageStream))),
      region_projector_(params_, config_, Rng(Rng::derive(seed, kRegionStream))),
      lm_(params_, config_, Rng(Rng::derive(seed, kLmStream))) {
  params_.set_trainable_prefix("encoder.", false);
}

template <typename Real>
Var<Real> AquilaModel<Real>::image_tokens(Tape<Real>& tape, const PyramidVars<Real>& pyramid) const {
  return image_projector_.forward(tape, pyramid.levels.back());
}

template <typename Real>
std::vector<RegionEmbedding<Real>> AquilaModel<Real>::regions(Tape<Real>& tape, const PyramidVars<Real>& pyramid,
                                                              const std::vector<RegionMask>& masks) const {
  std::vector<RegionEmbedding<Real>> out;
  out.reserve(masks.size());
  for (const RegionMask& m : masks) out.push_back(extract_region(tape, pyramid, m, region_projector_));
  return out;
}

template <typename Real>
EmbeddedSequence<Real> AquilaModel<Real>::embed(Tape<Real>& tape, const PyramidVars<Real>& pyramid,
                                                const PromptRecord& record, const Vocab& vocab) const {
  Var<Real> image = image_tokens(tape, pyramid);
  std::vector<RegionEmbedding<Real>> embs = regions(tape, pyramid, record.region_masks);
  return assemble(record, image, std::span<const RegionEmbedding<Real>>(embs), lm_.embed_table(tape), vocab);
}

template <typename Real>
Var<Real> AquilaModel<Real>::loss(Tape<Real>& tape, const PyramidVars<Real>& pyramid, const PromptRecord& record,
                                  const Vocab& vocab) const {
  EmbeddedSequence<Real> seq = embed(tape, pyramid, record, vocab);
  Var<Real> logits = lm_.forward(tape, seq.embeddings);
  return ops::cross_entropy(logits, std::span<const std::int32_t>(seq.plan.target_ids),
                            std::span<const std::uint8_t>(seq.plan.loss_mask));
}

template <typename Real>
std::vector<std::int32_t> AquilaModel<Real>::respond(const FeaturePyramid<Real>& pyramid, const PromptRecord& record,
                                                     const Vocab& vocab, std::size_t max_new) const {
  Tape<Real> tape(false);
  PyramidVars<Real> vars = as_constants(tape, pyramid);
  Var<Real> image = image_tokens(tape, vars);
  std::vector<RegionEmbedding<Real>> embs = regions(tape, vars, record.region_masks);
  const auto prompt = tokenize(record.prompt_text, vocab);
  SequencePlan plan = plan_sequence(prompt, {}, image.value().rows(), record.region_masks.size()).prefix();
  Var<Real> prefix = embed_plan(plan, image, std::span<const RegionEmbedding<Real>>(embs), lm_.embed_table(tape));
  return generate(lm_, prefix.value(), max_new);
}

template class AquilaModel<float>;
template class AquilaModel<double>;

}  // namespace aquila
