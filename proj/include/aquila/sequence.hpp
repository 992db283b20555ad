// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aquila/autograd.hpp"
#include "aquila/mask_extractor.hpp"
#include "aquila/vocab.hpp"

namespace aquila {

// Every prompt starts with this prefix; <image> expands to the image tokens.
inline constexpr std::string_view kImagePrefix = "<image>\n an overview of the given image is provided .";

// Prefix + " <user> " + instruction. Prompts that already begin with <image>
// are returned normalised but otherwise unchanged.
std::string with_image_prefix(std::string_view instruction);

struct PromptRecord {
  std::string prompt_text;
  std::vector<RegionMask> region_masks;
  std::string response_text;
};

enum class SegmentTag : std::uint8_t { text, image, mask, position };

inline constexpr std::int32_t kIgnoreTarget = -1;

// Position-by-position layout of one sequence:
//   <bos> . image rows . prompt text (each <region> -> <mask>,<position>)
//   . <assistant> . response . <eos>
// source[t] is the vocabulary id for text positions, the image row for image
// positions and the region index for mask/position positions.
struct SequencePlan {
  std::vector<SegmentTag> tags;
  std::vector<std::int32_t> source;
  std::vector<std::int32_t> target_ids;
  std::vector<std::uint8_t> loss_mask;
  std::size_t assistant_pos = 0;

  std::size_t length() const { return tags.size(); }
  std::size_t loss_positions() const;
  // Layout up to and including <assistant>, the prefix for generation.
  SequencePlan prefix() const;
};

// Throws AssemblyError when the prompt lacks a leading <image>, has more than
// one, contains reserved specials, or its <region> count differs from
// n_regions.
SequencePlan plan_sequence(std::span<const std::int32_t> prompt_ids, std::span<const std::int32_t> response_ids,
                           std::size_t n_image_tokens, std::size_t n_regions);

SequencePlan plan_sequence(const PromptRecord& record, const Vocab& vocab, std::size_t n_image_tokens);

// Length predicted by the expansion arithmetic.
inline std::size_t expected_length(std::size_t prompt_tokens, std::size_t n_regions, std::size_t n_image_tokens,
                                   std::size_t response_tokens) {
  return 3 + n_image_tokens + (prompt_tokens - 1 - n_regions) + 2 * n_regions + response_tokens;
}

template <typename Real>
struct EmbeddedSequence {
  Var<Real> embeddings;  // [T, D]
  SequencePlan plan;
};

// Materialises a plan: text rows come from the embedding table, image rows
// from image_tokens, and region i contributes its mask token then its
// spatial token.
template <typename Real>
Var<Real> embed_plan(const SequencePlan& plan, Var<Real> image_tokens,
                     std::span<const RegionEmbedding<Real>> regions, Var<Real> embed_table);

template <typename Real>
EmbeddedSequence<Real> assemble(const PromptRecord& record, Var<Real> image_tokens,
                                std::span<const RegionEmbedding<Real>> regions, Var<Real> embed_table,
                                const Vocab& vocab);

}  // namespace aquila
