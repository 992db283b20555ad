// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "aquila/mask_extractor.hpp"
#include "aquila/tensor.hpp"

namespace aquila {

struct NamedColor {
  std::string_view name;
  std::array<float, 3> rgb;
};

struct CategoryStyle {
  std::string_view name;
  std::array<NamedColor, 2> colors;
};

// Each category owns two colours; no colour is shared between categories.
const std::vector<CategoryStyle>& category_styles();
std::vector<std::string> category_names();
const std::vector<std::string>& position_words();
const std::vector<std::string>& size_words();

struct SceneObject {
  std::string category;
  std::string color;
  std::string size;
  std::string position;
  RegionMask mask;
};

struct Scene {
  std::uint64_t seed = 0;
  Tensor<float> image;  // [3, H, W] in [0, 1]
  std::vector<SceneObject> objects;
};

struct SceneConfig {
  std::size_t image_size = 128;
  std::size_t min_objects = 2;
  std::size_t max_objects = 5;
  std::size_t max_rejections = 1000;
};

// Places 2-5 coloured shapes on a textured background by rejection sampling
// until they are pairwise disjoint. Deterministic per seed; throws
// GenerationError when an object cannot be placed.
Scene generate_scene(std::uint64_t seed, const SceneConfig& config = {});

// 3x3 grid word for the cell holding the mask centroid.
std::string position_word(const Tensor<float>& mask);

struct InstructionSample {
  std::string kind;
  std::string prompt_text;    // includes the image prefix
  std::string response_text;
  std::vector<RegionMask> region_masks;
  // Storage keys of region_masks: "obj{i}", "obj{i}_part" or "neg".
  std::vector<std::string> mask_keys;
};

inline constexpr std::array<std::string_view, 6> kSampleKinds{
    "caption", "region_describe", "region_short", "negative_spatial", "negative_category", "conversation"};

// Closed instruction templates. Placeholders: {size} {color} {category}
// {position} {absent} {count} {objects} {first} {second}.
struct TemplateBook {
  std::vector<std::string> describe_prompts{"describe region1 <region> .",
                                            "what can you see in region1 <region> ?",
                                            "give a short description of region1 <region> ."};
  std::string describe_response = "a {size} {color} {category} in the {position} of the image .";
  std::string part_response = "part of a {category} .";
  std::string short_prompt = "what is region1 <region> ? answer with a single word or phrase .";
  std::string caption_prompt = "describe the whole image .";
  std::string caption_item = "a {size} {color} {category} in the {position}";
  std::string caption_response = "there are {count} objects : {objects} .";
  std::string conversation_prompt =
      "what is region1 <region> ? <assistant> a {first} . <user> and what is region2 <region> ?";
  std::string conversation_response = "a {second} .";
  std::string spatial_negative_prompt = "describe region1 <region> .";
  std::string spatial_negative_response = "there is no object in this region .";
  std::string category_negative_prompt = "is this a {absent} ? <region>";
  std::string category_negative_response = "no , it is a {category} .";
};

// Every word the templates can emit, one document per template expansion
// family. Building a vocabulary from it closes the vocabulary.
std::vector<std::string> template_corpus(const TemplateBook& templates = {});

// Per object: one region_describe and one region_short sample; per scene: one
// caption and one two-region conversation. With parts, large objects also get
// a half-mask "part of" region_describe sample.
std::vector<InstructionSample> render_instructions(const Scene& scene, const TemplateBook& templates,
                                                   std::uint64_t seed, bool parts = false);

// Spatial negative: a background blob disjoint from every object. Category
// negative: a real object queried with a category absent from the scene. A
// blob that cannot be placed in max_rejections tries is skipped and noted in
// log (when given).
std::vector<InstructionSample> mine_negatives(const Scene& scene, const TemplateBook& templates, std::uint64_t seed,
                                              std::vector<std::string>* log = nullptr,
                                              std::size_t max_rejections = 1000);

}  // namespace aquila
