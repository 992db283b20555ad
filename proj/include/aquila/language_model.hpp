// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "aquila/autograd.hpp"
#include "aquila/model_config.hpp"

namespace aquila {

// Small pre-norm decoder-only transformer: learned absolute positions,
// causal multi-head self-attention, GELU feed-forward, untied output head.
// Parameters: lm.embed.*, lm.pos.*, lm.block{i}.*, lm.head.*.
template <typename Real>
class LanguageModel {
 public:
  LanguageModel(ParameterSet<Real>& params, const ModelConfig& config, Rng rng);

  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t max_positions() const { return max_pos_; }

  Var<Real> embed_table(Tape<Real>& tape) const { return tape.param(*embed_); }

  // [T, D] embeddings -> [T, V] logits. Throws SequenceLengthError when T
  // exceeds the positional table.
  Var<Real> forward(Tape<Real>& tape, Var<Real> embeddings) const;

 private:
  struct Block {
    Parameter<Real>* ln1_w;
    Parameter<Real>* ln1_b;
    Parameter<Real>* qkv_w;
    Parameter<Real>* qkv_b;
    Parameter<Real>* out_w;
    Parameter<Real>* out_b;
    Parameter<Real>* ln2_w;
    Parameter<Real>* ln2_b;
    Parameter<Real>* fc1_w;
    Parameter<Real>* fc1_b;
    Parameter<Real>* fc2_w;
    Parameter<Real>* fc2_b;
  };

  Var<Real> attention(Tape<Real>& tape, const Block& b, Var<Real> x) const;

  std::size_t d_model_;
  std::size_t heads_;
  std::size_t max_pos_;
  std::size_t vocab_size_;
  Parameter<Real>* embed_;
  Parameter<Real>* pos_;
  std::vector<Block> blocks_;
  Parameter<Real>* norm_w_;
  Parameter<Real>* norm_b_;
  Parameter<Real>* head_w_;
  Parameter<Real>* head_b_;
};

// Greedy decoding from a prefix that ends at <assistant>. Appends the argmax
// token (ties -> lowest id) until <eos>, max_new tokens, or the positional
// table is full. The returned ids exclude <eos>.
template <typename Real>
std::vector<std::int32_t> generate(const LanguageModel<Real>& lm, const Tensor<Real>& prefix_embeddings,
                                   std::size_t max_new);

}  // namespace aquila
