// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <vector>

#include "aquila/dataset.hpp"
#include "aquila/gradcheck.hpp"
#include "aquila/model_config.hpp"
#include "aquila/ops.hpp"
#include "aquila/rng.hpp"
#include "aquila/sequence.hpp"

namespace aquila::testing {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
  return normal_tensor<double>(std::move(shape), rng, sd);
}

using OpBuilder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Reverse-mode vs central differences for every input of an op, with a
// random linear readout sum(out * w) as the scalar. Returns the worst
// relative error over the inputs.
inline double op_gradient_error(const std::vector<Tensor<double>>& inputs, const OpBuilder& build, Rng& rng) {
  Tensor<double> readout;
  {
    Tape<double> tape(false);
    std::vector<Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(tape.constant(x));
    readout = random_tensor(build(tape, vars).value().shape(), rng);
  }
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& x : inputs) vars.push_back(tape.variable(x));
  tape.backward(ops::dot_constant(build(tape, vars), readout));

  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const Tensor<double>& probe) {
      Tape<double> t(false);
      std::vector<Var<double>> vs;
      for (std::size_t j = 0; j < inputs.size(); ++j) vs.push_back(t.constant(j == k ? probe : inputs[j]));
      return ops::dot_constant(build(t, vs), readout).value()[0];
    };
    const Tensor<double> numeric = finite_diff_grad(f, inputs[k]);
    const Tensor<double> analytic = tape.has_grad(vars[k].id) ? tape.grad(vars[k].id) : Tensor<double>(inputs[k].shape());
    worst = std::max(worst, relative_error(analytic.data(), numeric.data()));
  }
  return worst;
}

struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  OpBuilder build;
};

// Every differentiable op with small input shapes, for gradient checks.
inline std::vector<OpCase> op_cases() {
  using V = std::vector<Var<double>>;
  static const std::vector<std::int32_t> ids{2, 0, 2, 4};
  static const std::vector<std::int32_t> targets{1, 4, 0, 2};
  static const std::vector<std::uint8_t> mask{1, 0, 1, 1};
  return {
      {"linear", {{3, 4}, {4, 5}, {5}}, [](Tape<double>&, const V& v) { return ops::linear(v[0], v[1], v[2]); }},
      {"linear rank1", {{4}, {4, 3}}, [](Tape<double>&, const V& v) { return ops::linear(v[0], v[1]); }},
      {"matmul", {{3, 4}, {4, 2}}, [](Tape<double>&, const V& v) { return ops::matmul(v[0], v[1]); }},
      {"matmul_nt", {{3, 4}, {5, 4}}, [](Tape<double>&, const V& v) { return ops::matmul_nt(v[0], v[1]); }},
      {"add", {{3, 4}, {3, 4}}, [](Tape<double>&, const V& v) { return ops::add(v[0], v[1]); }},
      {"scale", {{3, 4}}, [](Tape<double>&, const V& v) { return ops::scale(v[0], 0.37); }},
      {"gelu", {{3, 5}}, [](Tape<double>&, const V& v) { return ops::gelu(v[0]); }},
      {"softmax", {{3, 5}}, [](Tape<double>&, const V& v) { return ops::softmax(v[0]); }},
      {"causal_softmax", {{5, 5}}, [](Tape<double>&, const V& v) { return ops::causal_softmax(v[0]); }},
      {"layer_norm", {{3, 6}, {6}, {6}}, [](Tape<double>&, const V& v) { return ops::layer_norm(v[0], v[1], v[2]); }},
      {"channel_layer_norm", {{4, 3, 2}, {4}, {4}},
       [](Tape<double>&, const V& v) { return ops::channel_layer_norm(v[0], v[1], v[2]); }},
      {"conv2d stride 2", {{2, 6, 6}, {3, 2, 2, 2}, {3}},
       [](Tape<double>&, const V& v) { return ops::conv2d(v[0], v[1], v[2], 2, 0); }},
      {"conv2d 3x3 pad 1", {{2, 5, 4}, {3, 2, 3, 3}, {3}},
       [](Tape<double>&, const V& v) { return ops::conv2d(v[0], v[1], v[2], 1, 1); }},
      {"reshape", {{3, 4}}, [](Tape<double>&, const V& v) { return ops::reshape(v[0], {2, 6}); }},
      {"transpose", {{3, 4}}, [](Tape<double>&, const V& v) { return ops::transpose(v[0]); }},
      {"slice_rows", {{5, 3}}, [](Tape<double>&, const V& v) { return ops::slice_rows(v[0], 1, 3); }},
      {"slice_cols", {{3, 6}}, [](Tape<double>&, const V& v) { return ops::slice_cols(v[0], 2, 3); }},
      {"concat_rows", {{2, 3}, {3}, {1, 3}},
       [](Tape<double>&, const V& v) { return ops::concat_rows<double>(std::span<const Var<double>>(v)); }},
      {"concat_cols", {{3, 2}, {3, 4}},
       [](Tape<double>&, const V& v) { return ops::concat_cols<double>(std::span<const Var<double>>(v)); }},
      {"gather_rows", {{5, 3}}, [](Tape<double>&, const V& v) { return ops::gather_rows(v[0], ids); }},
      {"weighted_spatial_mean", {{3, 4, 4}},
       [](Tape<double>&, const V& v) {
         Tensor<double> w({4, 4});
         for (std::size_t i = 0; i < w.size(); ++i) w[i] = double(i % 3) * 0.25;
         return ops::weighted_spatial_mean(v[0], w);
       }},
      {"sum", {{3, 4}}, [](Tape<double>&, const V& v) { return ops::sum(v[0]); }},
      {"cross_entropy", {{4, 5}},
       [](Tape<double>&, const V& v) { return ops::cross_entropy(v[0], targets, mask); }},
  };
}

// Analytic gradients of every trainable parameter against finite differences
// on at most `per_param` sampled entries each. Returns the worst
// per-parameter relative error; gradients below 1e-7 in norm are compared
// against that floor instead, since finite-difference noise dominates there.
inline double param_gradient_error(ParameterSet<double>& params, const std::function<Var<double>(Tape<double>&)>& loss,
                                   Rng& rng, std::size_t per_param = 6) {
  params.zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss(tape));
  }
  auto value = [&] {
    Tape<double> tape(false);
    return loss(tape).value()[0];
  };
  double worst = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<double>& p = params[i];
    if (!p.trainable) continue;
    std::vector<std::size_t> idx;
    for (std::size_t k = 0; k < std::min(per_param, p.value.size()); ++k) idx.push_back(rng.below(p.value.size()));
    const auto numeric = finite_diff_param(value, p, idx);
    std::vector<double> analytic;
    double diff = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const double a = p.grad[idx[k]], b = numeric[k];
      diff += (a - b) * (a - b);
      na += a * a;
      nb += b * b;
    }
    worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-7}));
  }
  return worst;
}

struct RandomPrompt {
  std::vector<std::int32_t> prompt;
  std::vector<std::int32_t> response;
  std::size_t regions = 0;
};

// A prompt of <image> followed by ordinary words, <user>/<assistant> markers
// and 0-3 <region> placeholders, with a 0-12 word response.
inline RandomPrompt random_prompt(Rng& rng, std::int32_t vocab_size) {
  RandomPrompt r;
  r.prompt.push_back(special::kImage);
  const std::size_t words = rng.below(20);
  r.regions = rng.below(4);
  std::vector<std::int32_t> body;
  for (std::size_t i = 0; i < words; ++i) {
    const auto k = rng.below(10);
    body.push_back(k == 0 ? special::kUser : k == 1 ? special::kAssistant
                                          : static_cast<std::int32_t>(rng.range(special::kCount, vocab_size - 1)));
  }
  for (std::size_t i = 0; i < r.regions; ++i) body.insert(body.begin() + rng.below(body.size() + 1), special::kRegion);
  r.prompt.insert(r.prompt.end(), body.begin(), body.end());
  const std::size_t resp = rng.below(13);
  for (std::size_t i = 0; i < resp; ++i) r.response.push_back(static_cast<std::int32_t>(rng.range(special::kCount, vocab_size - 1)));
  return r;
}

// The dataset write_dataset would produce, kept in memory.
inline Dataset in_memory_dataset(const DatasetOptions& options) {
  Dataset ds;
  ds.vocab = dataset_vocab();
  for (const GeneratedScene& g : generate_dataset(options)) {
    const std::size_t image = ds.images.size();
    ds.images.push_back(g.scene.image);
    for (std::size_t k = 0; k < g.samples.size(); ++k) {
      const InstructionSample& x = g.samples[k];
      DatasetSample s;
      s.id = "scene_" + std::to_string(g.scene.seed) + "_" + std::to_string(k);
      s.kind = x.kind;
      s.scene = g.scene.seed;
      s.image_index = image;
      s.record = {x.prompt_text, x.region_masks, x.response_text};
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

// Small architecture for fast tests: 64x64 images, D=32, S=32, one layer.
inline ModelConfig toy_model_config(std::size_t vocab_size) {
  ModelConfig c;
  c.image_size = 64;
  c.d_model = 32;
  c.spatial_size = 32;
  c.lm_layers = 1;
  c.lm_heads = 4;
  c.lm_ffn = 64;
  c.lm_max_pos = 128;
  c.vocab_size = vocab_size;
  return c;
}

}  // namespace aquila::testing
