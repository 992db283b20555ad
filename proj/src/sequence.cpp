// SPDX-License-Identifier: Apache-2.0

#include "aquila/sequence.hpp"

#include <algorithm>

#include "aquila/ops.hpp"

namespace aquila {

std::string with_image_prefix(std::string_view instruction) {
  const std::string norm = normalize_text(instruction);
  if (norm.starts_with("<image>")) return norm;
  return normalize_text(std::string(kImagePrefix) + " <user> " + norm);
}

std::size_t SequencePlan::loss_positions() const {
  return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), std::uint8_t{1}));
}

SequencePlan SequencePlan::prefix() const {
  SequencePlan p;
  const std::size_t n = assistant_pos + 1;
  p.tags.assign(tags.begin(), tags.begin() + n);
  p.source.assign(source.begin(), source.begin() + n);
  p.target_ids.assign(target_ids.begin(), target_ids.begin() + n);
  p.loss_mask.assign(loss_mask.begin(), loss_mask.begin() + n);
  p.assistant_pos = assistant_pos;
  return p;
}

SequencePlan plan_sequence(std::span<const std::int32_t> prompt_ids, std::span<const std::int32_t> response_ids,
                           std::size_t n_image_tokens, std::size_t n_regions) {
  if (prompt_ids.empty() || prompt_ids.front() != special::kImage) {
    throw AssemblyError("prompt must start with the <image> placeholder");
  }
  if (n_image_tokens == 0) throw AssemblyError("no image tokens supplied");
  const auto images = std::count(prompt_ids.begin(), prompt_ids.end(), special::kImage);
  if (images != 1) throw AssemblyError("prompt contains " + std::to_string(images) + " <image> placeholders");
  const auto region_slots = std::size_t(std::count(prompt_ids.begin(), prompt_ids.end(), special::kRegion));
  if (region_slots != n_regions) {
    throw AssemblyError("prompt has " + std::to_string(region_slots) + " <region> placeholders but " +
                        std::to_string(n_regions) + " region masks were given");
  }
  auto reserved = [](std::int32_t id) {
    return id == special::kBos || id == special::kEos || id == special::kPad || id == special::kMask ||
           id == special::kPosition;
  };
  for (std::int32_t id : prompt_ids) {
    if (reserved(id)) throw AssemblyError("prompt contains reserved token id " + std::to_string(id));
  }
  for (std::int32_t id : response_ids) {
    if (id < special::kCount && id != special::kUnk) {
      throw AssemblyError("response contains special token id " + std::to_string(id));
    }
  }

  SequencePlan plan;
  auto emit = [&](SegmentTag tag, std::int32_t source) {
    plan.tags.push_back(tag);
    plan.source.push_back(source);
  };
  emit(SegmentTag::text, special::kBos);
  for (std::size_t i = 0; i < n_image_tokens; ++i) emit(SegmentTag::image, std::int32_t(i));
  std::int32_t region = 0;
  for (std::size_t i = 1; i < prompt_ids.size(); ++i) {
    if (prompt_ids[i] == special::kRegion) {
      emit(SegmentTag::mask, region);
      emit(SegmentTag::position, region);
      ++region;
    } else {
      emit(SegmentTag::text, prompt_ids[i]);
    }
  }
  plan.assistant_pos = plan.tags.size();
  emit(SegmentTag::text, special::kAssistant);
  for (std::int32_t id : response_ids) emit(SegmentTag::text, id);
  emit(SegmentTag::text, special::kEos);

  const std::size_t t_len = plan.tags.size();
  plan.target_ids.assign(t_len, kIgnoreTarget);
  plan.loss_mask.assign(t_len, 0);
  for (std::size_t t = 0; t + 1 < t_len; ++t) {
    if (plan.tags[t + 1] == SegmentTag::text) plan.target_ids[t] = plan.source[t + 1];
    if (t >= plan.assistant_pos) plan.loss_mask[t] = 1;
  }
  return plan;
}

SequencePlan plan_sequence(const PromptRecord& record, const Vocab& vocab, std::size_t n_image_tokens) {
  const auto prompt = tokenize(record.prompt_text, vocab);
  const auto response = tokenize(record.response_text, vocab);
  return plan_sequence(prompt, response, n_image_tokens, record.region_masks.size());
}

template <typename Real>
Var<Real> embed_plan(const SequencePlan& plan, Var<Real> image_tokens, std::span<const RegionEmbedding<Real>> regions,
                     Var<Real> embed_table) {
  const std::size_t n_image = image_tokens.value().rows();
  std::vector<Var<Real>> pieces;
  std::vector<std::int32_t> run;
  auto flush = [&] {
    if (run.empty()) return;
    pieces.push_back(ops::gather_rows(embed_table, std::span<const std::int32_t>(run)));
    run.clear();
  };
  bool image_done = false;
  for (std::size_t t = 0; t < plan.length(); ++t) {
    switch (plan.tags[t]) {
      case SegmentTag::text:
        run.push_back(plan.source[t]);
        break;
      case SegmentTag::image:
        flush();
        if (!image_done) {
          if (std::size_t(std::count(plan.tags.begin(), plan.tags.end(), SegmentTag::image)) != n_image) {
            throw AssemblyError("plan expects a different number of image tokens than supplied (" +
                                std::to_string(n_image) + ")");
          }
          pieces.push_back(image_tokens);
          image_done = true;
        }
        break;
      case SegmentTag::mask:
      case SegmentTag::position: {
        flush();
        const auto r = std::size_t(plan.source[t]);
        if (r >= regions.size()) {
          throw AssemblyError("plan references region " + std::to_string(r) + " but only " +
                              std::to_string(regions.size()) + " were supplied");
        }
        pieces.push_back(plan.tags[t] == SegmentTag::mask ? regions[r].mask_token : regions[r].spatial_token);
        break;
      }
    }
  }
  flush();
  return ops::concat_rows(std::span<const Var<Real>>(pieces));
}

template <typename Real>
EmbeddedSequence<Real> assemble(const PromptRecord& record, Var<Real> image_tokens,
                                std::span<const RegionEmbedding<Real>> regions, Var<Real> embed_table,
                                const Vocab& vocab) {
  if (regions.size() != record.region_masks.size()) {
    throw AssemblyError(std::to_string(regions.size()) + " region embeddings for " +
                        std::to_string(record.region_masks.size()) + " region masks");
  }
  EmbeddedSequence<Real> out;
  out.plan = plan_sequence(record, vocab, image_tokens.value().rows());
  out.embeddings = embed_plan(out.plan, image_tokens, regions, embed_table);
  return out;
}

template Var<float> embed_plan(const SequencePlan&, Var<float>, std::span<const RegionEmbedding<float>>, Var<float>);
template Var<double> embed_plan(const SequencePlan&, Var<double>, std::span<const RegionEmbedding<double>>, Var<double>);
template EmbeddedSequence<float> assemble(const PromptRecord&, Var<float>, std::span<const RegionEmbedding<float>>,
                                          Var<float>, const Vocab&);
template EmbeddedSequence<double> assemble(const PromptRecord&, Var<double>, std::span<const RegionEmbedding<double>>,
                                           Var<double>, const Vocab&);

}  // namespace aquila
