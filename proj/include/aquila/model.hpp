// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "aquila/encoder.hpp"
#include "aquila/language_model.hpp"
#include "aquila/mask_extractor.hpp"
#include "aquila/sequence.hpp"

namespace aquila {

// The full region-aware vision-language model: frozen convolutional encoder,
// image-level projector, region-level projector and language model sharing
// one parameter set. The encoder is frozen at construction.
template <typename Real>
class AquilaModel {
 public:
  AquilaModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterSet<Real>& params() { return params_; }
  const ParameterSet<Real>& params() const { return params_; }

  const VisualEncoder<Real>& encoder() const { return encoder_; }
  const ImageProjector<Real>& image_projector() const { return image_projector_; }
  const RegionProjector<Real>& region_projector() const { return region_projector_; }
  const LanguageModel<Real>& lm() const { return lm_; }

  FeaturePyramid<Real> encode(const Tensor<Real>& image) const { return encoder_.encode(image); }

  Var<Real> image_tokens(Tape<Real>& tape, const PyramidVars<Real>& pyramid) const;

  std::vector<RegionEmbedding<Real>> regions(Tape<Real>& tape, const PyramidVars<Real>& pyramid,
                                             const std::vector<RegionMask>& masks) const;

  EmbeddedSequence<Real> embed(Tape<Real>& tape, const PyramidVars<Real>& pyramid, const PromptRecord& record,
                               const Vocab& vocab) const;

  // Masked next-token cross-entropy of the record's response.
  Var<Real> loss(Tape<Real>& tape, const PyramidVars<Real>& pyramid, const PromptRecord& record,
                 const Vocab& vocab) const;

  // Greedy response ids for the record's prompt; its response is ignored.
  std::vector<std::int32_t> respond(const FeaturePyramid<Real>& pyramid, const PromptRecord& record,
                                    const Vocab& vocab, std::size_t max_new) const;

 private:
  ModelConfig config_;
  ParameterSet<Real> params_;
  VisualEncoder<Real> encoder_;
  ImageProjector<Real> image_projector_;
  RegionProjector<Real> region_projector_;
  LanguageModel<Real> lm_;
};

}  // namespace aquila
