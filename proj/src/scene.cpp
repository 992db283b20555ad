// SPDX-License-Identifier: Apache-2.0

#include "aquila/scene.hpp"

#include <algorithm>
#include <cmath>

#include "aquila/error.hpp"
#include "aquila/rng.hpp"
#include "aquila/sequence.hpp"

namespace aquila {

namespace {

// Colours are chosen so that no two categories share a direction away from
// mid-gray: the encoder's channel normalisation cannot tell apart colours
// that differ only in distance from gray.
const std::vector<CategoryStyle> kStyles{
    {"airplane", {{{"white", {0.95f, 0.95f, 0.95f}}, {"light-gray", {0.78f, 0.78f, 0.78f}}}}},
    {"building", {{{"red", {0.85f, 0.15f, 0.15f}}, {"brown", {0.55f, 0.30f, 0.10f}}}}},
    {"lake", {{{"blue", {0.15f, 0.30f, 0.85f}}, {"navy", {0.10f, 0.15f, 0.50f}}}}},
    {"field", {{{"green", {0.20f, 0.75f, 0.20f}}, {"olive", {0.50f, 0.55f, 0.15f}}}}},
    {"boat", {{{"yellow", {0.95f, 0.90f, 0.10f}}, {"orange", {0.95f, 0.55f, 0.10f}}}}},
    {"pool", {{{"cyan", {0.10f, 0.90f, 0.95f}}, {"teal", {0.10f, 0.55f, 0.55f}}}}},
    {"roundabout", {{{"purple", {0.55f, 0.15f, 0.75f}}, {"pink", {0.95f, 0.55f, 0.75f}}}}},
    {"road", {{{"black", {0.05f, 0.05f, 0.05f}}, {"dark-gray", {0.25f, 0.25f, 0.25f}}}}},
};

const std::vector<std::string> kPositions{"top-left",    "top-center", "top-right",
                                          "center-left", "center",     "center-right",
                                          "bottom-left", "bottom-center", "bottom-right"};

const std::vector<std::string> kSizes{"small", "large"};

const std::vector<std::string> kCountWords{"zero", "one", "two", "three", "four", "five"};

using Grid = Tensor<float>;

struct Box {
  long r0, c0, r1, c1;  // inclusive-exclusive
};

void fill_rect(Grid& g, Box b) {
  const long H = static_cast<long>(g.dim(0)), W = static_cast<long>(g.dim(1));
  for (long r = std::max(0L, b.r0); r < std::min(H, b.r1); ++r)
    for (long c = std::max(0L, b.c0); c < std::min(W, b.c1); ++c) g.at(r, c) = 1.0f;
}

// Pixel centres inside the ellipse ((y-cy)/ry)^2 + ((x-cx)/rx)^2 <= 1, and
// outside the inner ellipse when inner > 0.
void fill_ellipse(Grid& g, double cy, double cx, double ry, double rx, double inner = 0.0) {
  const long H = static_cast<long>(g.dim(0)), W = static_cast<long>(g.dim(1));
  for (long r = 0; r < H; ++r) {
    for (long c = 0; c < W; ++c) {
      const double dy = (r + 0.5 - cy) / ry, dx = (c + 0.5 - cx) / rx;
      const double d = dy * dy + dx * dx;
      if (d <= 1.0 && d >= inner * inner) g.at(r, c) = 1.0f;
    }
  }
}

// Draws one shape of the given category centred at (cy, cx).
Grid draw_shape(std::string_view category, bool large, double cy, double cx, std::size_t n, Rng& rng) {
  Grid g({n, n});
  const double k = static_cast<double>(n) / 128.0;
  auto span = [&](double lo_s, double hi_s, double lo_l, double hi_l) {
    return large ? rng.uniform(lo_l, hi_l) * k : rng.uniform(lo_s, hi_s) * k;
  };
  const bool horizontal = rng.below(2) == 1;
  auto rect = [&](double h, double w) {
    if (horizontal) std::swap(h, w);
    const long r0 = std::lround(cy - h / 2), c0 = std::lround(cx - w / 2);
    fill_rect(g, {r0, c0, r0 + std::max(1L, std::lround(h)), c0 + std::max(1L, std::lround(w))});
  };
  if (category == "airplane") {
    const double len = span(12, 15, 20, 26);
    rect(len, std::max(2.0, len / 4));
    const double wing = len * 0.8, thick = std::max(2.0, len / 5);
    const double wing_cy = cy - len * 0.08;
    const long r0 = std::lround((horizontal ? cy : wing_cy) - (horizontal ? wing : thick) / 2);
    const long c0 = std::lround((horizontal ? cx - len * 0.08 : cx) - (horizontal ? thick : wing) / 2);
    fill_rect(g, {r0, c0, r0 + std::lround(horizontal ? wing : thick), c0 + std::lround(horizontal ? thick : wing)});
  } else if (category == "building") {
    rect(span(8, 12, 16, 22), span(8, 12, 16, 22));
  } else if (category == "lake") {
    fill_ellipse(g, cy, cx, span(5, 8, 10, 15), span(5, 8, 10, 15));
  } else if (category == "field") {
    rect(span(11, 14, 22, 30), span(14, 18, 26, 34));
  } else if (category == "boat") {
    const double a = span(6, 8, 10, 14), b = span(2.5, 3.5, 4, 5);
    if (horizontal)
      fill_ellipse(g, cy, cx, b, a);
    else
      fill_ellipse(g, cy, cx, a, b);
  } else if (category == "pool") {
    rect(span(6, 9, 12, 16), span(9, 12, 16, 20));
  } else if (category == "roundabout") {
    const double r = span(6, 8, 11, 15);
    fill_ellipse(g, cy, cx, r, r, 0.5);
  } else if (category == "road") {
    rect(span(3, 4, 5, 7), span(36, 48, 64, 90));
  } else {
    throw GenerationError("unknown category " + std::string(category));
  }
  return g;
}

bool overlaps(const Grid& a, const Grid& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] > 0 && b[i] > 0) return true;
  return false;
}

// Whether the drawn shape stays at least `margin` pixels from the border.
bool inside(const Grid& g, long margin) {
  const long H = static_cast<long>(g.dim(0)), W = static_cast<long>(g.dim(1));
  bool any = false;
  for (long r = 0; r < H; ++r) {
    for (long c = 0; c < W; ++c) {
      if (g.at(r, c) == 0) continue;
      any = true;
      if (r < margin || c < margin || r >= H - margin || c >= W - margin) return false;
    }
  }
  return any;
}

Grid dilate(const Grid& g, long radius) {
  const long H = static_cast<long>(g.dim(0)), W = static_cast<long>(g.dim(1));
  Grid out(g.shape());
  for (long r = 0; r < H; ++r) {
    for (long c = 0; c < W; ++c) {
      if (g.at(r, c) == 0) continue;
      for (long dr = -radius; dr <= radius; ++dr)
        for (long dc = -radius; dc <= radius; ++dc) {
          const long rr = r + dr, cc = c + dc;
          if (rr >= 0 && cc >= 0 && rr < H && cc < W) out.at(rr, cc) = 1.0f;
        }
    }
  }
  return out;
}

void stamp(Grid& occupancy, const Grid& g) {
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g[i] > 0) occupancy[i] = 1.0f;
}

std::string replace_all(std::string text, std::string_view key, std::string_view value) {
  for (std::size_t pos = text.find(key); pos != std::string::npos; pos = text.find(key, pos + value.size()))
    text.replace(pos, key.size(), value);
  return text;
}

struct Fields {
  std::vector<std::pair<std::string_view, std::string>> items;
  std::string apply(std::string text) const {
    for (const auto& [k, v] : items) text = replace_all(std::move(text), k, v);
    return text;
  }
};

Fields object_fields(const SceneObject& o) {
  return {{{"{size}", o.size}, {"{color}", o.color}, {"{category}", o.category}, {"{position}", o.position}}};
}

// One half of the mask's bounding box, split across its longer side.
RegionMask half_mask(const RegionMask& mask, bool second) {
  const Grid& g = mask.grid();
  const long H = static_cast<long>(g.dim(0)), W = static_cast<long>(g.dim(1));
  long r0 = H, r1 = 0, c0 = W, c1 = 0;
  for (long r = 0; r < H; ++r)
    for (long c = 0; c < W; ++c)
      if (g.at(r, c) > 0) {
        r0 = std::min(r0, r), r1 = std::max(r1, r + 1);
        c0 = std::min(c0, c), c1 = std::max(c1, c + 1);
      }
  Grid out(g.shape());
  const bool by_rows = (r1 - r0) >= (c1 - c0);
  const long mid = by_rows ? (r0 + r1) / 2 : (c0 + c1) / 2;
  for (long r = 0; r < H; ++r)
    for (long c = 0; c < W; ++c) {
      if (g.at(r, c) == 0) continue;
      const long key = by_rows ? r : c;
      if ((key >= mid) == second) out.at(r, c) = 1.0f;
    }
  return RegionMask(std::move(out));
}

}  // namespace

const std::vector<CategoryStyle>& category_styles() { return kStyles; }

std::vector<std::string> category_names() {
  std::vector<std::string> out;
  for (const auto& s : kStyles) out.emplace_back(s.name);
  return out;
}

const std::vector<std::string>& position_words() { return kPositions; }
const std::vector<std::string>& size_words() { return kSizes; }

std::string position_word(const Tensor<float>& mask) {
  const std::size_t H = mask.dim(0), W = mask.dim(1);
  double sy = 0, sx = 0, n = 0;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      if (mask.at(r, c) > 0) sy += r + 0.5, sx += c + 0.5, n += 1;
  if (n == 0) throw PreconditionError("position of an empty mask");
  const std::size_t row = std::min<std::size_t>(2, static_cast<std::size_t>(3 * (sy / n) / H));
  const std::size_t col = std::min<std::size_t>(2, static_cast<std::size_t>(3 * (sx / n) / W));
  return kPositions[row * 3 + col];
}

Scene generate_scene(std::uint64_t seed, const SceneConfig& config) {
  if (config.image_size < 32 || config.image_size % 32 != 0 || config.min_objects < 1 || config.min_objects > config.max_objects)
    throw ConfigError("invalid scene configuration");
  Rng rng(Rng::derive(seed, 0x5ce7e));
  const std::size_t n = config.image_size;
  Scene scene;
  scene.seed = seed;
  scene.image = Tensor<float>({3, n, n});
  const float tint = static_cast<float>(rng.uniform(-0.03, 0.03));
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < n * n; ++i)
      scene.image[ch * n * n + i] = 0.5f + tint + static_cast<float>(rng.uniform(-0.08, 0.08));

  const std::size_t count = static_cast<std::size_t>(
      rng.range(static_cast<std::int64_t>(config.min_objects), static_cast<std::int64_t>(config.max_objects)));
  Grid occupancy({n, n});
  for (std::size_t k = 0; k < count; ++k) {
    const CategoryStyle& style = kStyles[rng.below(kStyles.size())];
    const NamedColor& color = style.colors[rng.below(2)];
    const bool large = rng.below(2) == 1;
    bool placed = false;
    for (std::size_t attempt = 0; attempt < config.max_rejections && !placed; ++attempt) {
      const double cy = rng.uniform(0, static_cast<double>(n));
      const double cx = rng.uniform(0, static_cast<double>(n));
      Grid shape = draw_shape(style.name, large, cy, cx, n, rng);
      if (!inside(shape, 1) || overlaps(shape, occupancy)) continue;
      stamp(occupancy, dilate(shape, 2));
      for (std::size_t i = 0; i < n * n; ++i)
        if (shape[i] > 0)
          for (std::size_t ch = 0; ch < 3; ++ch) scene.image[ch * n * n + i] = color.rgb[ch];
      SceneObject obj{std::string(style.name), std::string(color.name), kSizes[large ? 1 : 0],
                      position_word(shape), RegionMask(std::move(shape))};
      scene.objects.push_back(std::move(obj));
      placed = true;
    }
    if (!placed) {
      throw GenerationError("scene " + std::to_string(seed) + ": could not place object " + std::to_string(k) +
                            " after " + std::to_string(config.max_rejections) + " rejections");
    }
  }
  return scene;
}

std::vector<std::string> template_corpus(const TemplateBook& t) {
  std::vector<std::string> docs{std::string(kImagePrefix) + " <user> <assistant>"};
  auto add = [&](const std::string& s) {
    std::string clean = s;
    for (std::string_view key :
         {"{size}", "{color}", "{category}", "{position}", "{absent}", "{count}", "{objects}", "{first}", "{second}"})
      clean = replace_all(std::move(clean), key, " ");
    docs.push_back(std::move(clean));
  };
  for (const auto& p : t.describe_prompts) add(p);
  for (const std::string* s : {&t.describe_response, &t.part_response, &t.short_prompt, &t.caption_prompt,
                               &t.caption_item, &t.caption_response, &t.conversation_prompt,
                               &t.conversation_response, &t.spatial_negative_prompt, &t.spatial_negative_response,
                               &t.category_negative_prompt, &t.category_negative_response})
    add(*s);
  // Caption items are joined with commas.
  docs.emplace_back(",");
  for (const auto& s : kStyles) {
    docs.emplace_back(s.name);
    for (const auto& c : s.colors) docs.emplace_back(c.name);
  }
  for (const auto& p : kPositions) docs.push_back(p);
  for (const auto& s : kSizes) docs.push_back(s);
  for (const auto& w : kCountWords) docs.push_back(w);
  return docs;
}

std::vector<InstructionSample> render_instructions(const Scene& scene, const TemplateBook& t, std::uint64_t seed,
                                                   bool parts) {
  Rng rng(Rng::derive(seed, 0x7e47));
  std::vector<InstructionSample> out;
  const auto& objs = scene.objects;
  for (std::size_t i = 0; i < objs.size(); ++i) {
    const Fields f = object_fields(objs[i]);
    const std::string key = "obj" + std::to_string(i);
    const std::string& prompt = t.describe_prompts[rng.below(t.describe_prompts.size())];
    out.push_back({"region_describe", with_image_prefix(f.apply(prompt)), normalize_text(f.apply(t.describe_response)),
                   {objs[i].mask}, {key}});
    out.push_back({"region_short", with_image_prefix(t.short_prompt), normalize_text(objs[i].category),
                   {objs[i].mask}, {key}});
    if (parts && objs[i].size == "large") {
      RegionMask part = half_mask(objs[i].mask, rng.below(2) == 1);
      out.push_back({"region_describe", with_image_prefix(t.describe_prompts[0]),
                     normalize_text(f.apply(t.part_response)), {std::move(part)}, {key + "_part"}});
    }
  }

  // Caption: objects in reading order of their grid cell, then centroid.
  std::vector<std::size_t> order(objs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto cell = [&](std::size_t i) {
    return std::find(kPositions.begin(), kPositions.end(), objs[i].position) - kPositions.begin();
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return cell(a) < cell(b); });
  std::string items;
  for (std::size_t i : order) {
    if (!items.empty()) items += " , ";
    items += object_fields(objs[i]).apply(t.caption_item);
  }
  const Fields cap{{{"{count}", kCountWords.at(objs.size())}, {"{objects}", items}}};
  out.push_back({"caption", with_image_prefix(t.caption_prompt), normalize_text(cap.apply(t.caption_response)), {}, {}});

  if (objs.size() >= 2) {
    const std::size_t a = rng.below(objs.size());
    std::size_t b = rng.below(objs.size() - 1);
    if (b >= a) ++b;
    const Fields conv{{{"{first}", objs[a].category}, {"{second}", objs[b].category}}};
    out.push_back({"conversation", with_image_prefix(conv.apply(t.conversation_prompt)),
                   normalize_text(conv.apply(t.conversation_response)),
                   {objs[a].mask, objs[b].mask},
                   {"obj" + std::to_string(a), "obj" + std::to_string(b)}});
  }
  return out;
}

std::vector<InstructionSample> mine_negatives(const Scene& scene, const TemplateBook& t, std::uint64_t seed,
                                              std::vector<std::string>* log, std::size_t max_rejections) {
  Rng rng(Rng::derive(seed, 0x4e9));
  std::vector<InstructionSample> out;
  const std::size_t n = scene.image.dim(1);

  Grid occupancy({n, n});
  for (const auto& o : scene.objects) stamp(occupancy, dilate(o.mask.grid(), 1));
  bool placed = false;
  for (std::size_t attempt = 0; attempt < max_rejections && !placed; ++attempt) {
    const double k = static_cast<double>(n) / 128.0;
    const double cy = rng.uniform(0, static_cast<double>(n)), cx = rng.uniform(0, static_cast<double>(n));
    Grid blob({n, n});
    fill_ellipse(blob, cy, cx, rng.uniform(4, 8) * k, rng.uniform(4, 8) * k);
    if (!inside(blob, 1) || overlaps(blob, occupancy)) continue;
    out.push_back({"negative_spatial", with_image_prefix(t.spatial_negative_prompt),
                   normalize_text(t.spatial_negative_response), {RegionMask(std::move(blob))}, {"neg"}});
    placed = true;
  }
  if (!placed && log) {
    log->push_back("scene " + std::to_string(scene.seed) + ": spatial negative skipped after " +
                   std::to_string(max_rejections) + " tries");
  }

  if (!scene.objects.empty()) {
    std::vector<std::string> absent;
    for (const auto& s : kStyles) {
      const bool present = std::any_of(scene.objects.begin(), scene.objects.end(),
                                       [&](const SceneObject& o) { return o.category == s.name; });
      if (!present) absent.emplace_back(s.name);
    }
    if (!absent.empty()) {
      const std::size_t i = rng.below(scene.objects.size());
      const SceneObject& o = scene.objects[i];
      Fields f = object_fields(o);
      f.items.emplace_back("{absent}", absent[rng.below(absent.size())]);
      out.push_back({"negative_category", with_image_prefix(f.apply(t.category_negative_prompt)),
                     normalize_text(f.apply(t.category_negative_response)), {o.mask},
                     {"obj" + std::to_string(i)}});
    }
  }
  return out;
}

}  // namespace aquila
