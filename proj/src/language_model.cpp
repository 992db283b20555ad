// SPDX-License-Identifier: Apache-2.0

#include "aquila/language_model.hpp"

#include <cmath>
#include <string>

#include "aquila/ops.hpp"
#include "aquila/vocab.hpp"

namespace aquila {

template <typename Real>
LanguageModel<Real>::LanguageModel(ParameterSet<Real>& params, const ModelConfig& config, Rng rng)
    : d_model_(config.d_model),
      heads_(config.lm_heads),
      max_pos_(config.lm_max_pos),
      vocab_size_(config.vocab_size) {
  config.validate();
  if (vocab_size_ <= std::size_t(special::kCount)) {
    throw ConfigError("vocabulary size " + std::to_string(vocab_size_) + " leaves no room for words");
  }
  const std::size_t d = d_model_, f = config.lm_ffn;
  const double sd = config.init_std;
  embed_ = &params.add("lm.embed.weight", normal_tensor<Real>({vocab_size_, d}, rng, sd));
  pos_ = &params.add("lm.pos.weight", normal_tensor<Real>({max_pos_, d}, rng, sd));
  for (std::size_t i = 0; i < config.lm_layers; ++i) {
    const std::string p = "lm.block" + std::to_string(i) + ".";
    Block b;
    b.ln1_w = &params.add(p + "ln1.weight", Tensor<Real>({d}, Real(1)));
    b.ln1_b = &params.add(p + "ln1.bias", Tensor<Real>({d}));
    b.qkv_w = &params.add(p + "attn.qkv.weight", normal_tensor<Real>({d, 3 * d}, rng, sd));
    b.qkv_b = &params.add(p + "attn.qkv.bias", Tensor<Real>({3 * d}));
    b.out_w = &params.add(p + "attn.out.weight", normal_tensor<Real>({d, d}, rng, sd));
    b.out_b = &params.add(p + "attn.out.bias", Tensor<Real>({d}));
    b.ln2_w = &params.add(p + "ln2.weight", Tensor<Real>({d}, Real(1)));
    b.ln2_b = &params.add(p + "ln2.bias", Tensor<Real>({d}));
    b.fc1_w = &params.add(p + "ffn.fc1.weight", normal_tensor<Real>({d, f}, rng, sd));
    b.fc1_b = &params.add(p + "ffn.fc1.bias", Tensor<Real>({f}));
    b.fc2_w = &params.add(p + "ffn.fc2.weight", normal_tensor<Real>({f, d}, rng, sd));
    b.fc2_b = &params.add(p + "ffn.fc2.bias", Tensor<Real>({d}));
    blocks_.push_back(b);
  }
  norm_w_ = &params.add("lm.head.norm.weight", Tensor<Real>({d}, Real(1)));
  norm_b_ = &params.add("lm.head.norm.bias", Tensor<Real>({d}));
  head_w_ = &params.add("lm.head.weight", normal_tensor<Real>({d, vocab_size_}, rng, sd));
  head_b_ = &params.add("lm.head.bias", Tensor<Real>({vocab_size_}));
}

template <typename Real>
Var<Real> LanguageModel<Real>::attention(Tape<Real>& tape, const Block& b, Var<Real> x) const {
  const std::size_t dh = d_model_ / heads_;
  const Real inv_scale = Real(1) / std::sqrt(Real(dh));
  Var<Real> qkv = ops::linear(x, tape.param(*b.qkv_w), std::optional(tape.param(*b.qkv_b)));
  std::vector<Var<Real>> heads;
  heads.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    Var<Real> q = ops::slice_cols(qkv, h * dh, dh);
    Var<Real> k = ops::slice_cols(qkv, d_model_ + h * dh, dh);
    Var<Real> v = ops::slice_cols(qkv, 2 * d_model_ + h * dh, dh);
    Var<Real> p = ops::causal_softmax(ops::scale(ops::matmul_nt(q, k), inv_scale));
    heads.push_back(ops::matmul(p, v));
  }
  Var<Real> merged = heads.size() == 1 ? heads.front() : ops::concat_cols(std::span<const Var<Real>>(heads));
  return ops::linear(merged, tape.param(*b.out_w), std::optional(tape.param(*b.out_b)));
}

template <typename Real>
Var<Real> LanguageModel<Real>::forward(Tape<Real>& tape, Var<Real> embeddings) const {
  const Tensor<Real>& ev = embeddings.value();
  if (ev.rank() != 2 || ev.dim(1) != d_model_) {
    throw ShapeError("language model expects [T," + std::to_string(d_model_) + "] embeddings, got " +
                     shape_str(ev.shape()));
  }
  const std::size_t t_len = ev.dim(0);
  if (t_len > max_pos_) {
    throw SequenceLengthError("sequence of " + std::to_string(t_len) + " positions exceeds the maximum of " +
                              std::to_string(max_pos_));
  }
  Var<Real> h = ops::add(embeddings, ops::slice_rows(tape.param(*pos_), 0, t_len));
  for (const Block& b : blocks_) {
    Var<Real> a = ops::layer_norm(h, tape.param(*b.ln1_w), tape.param(*b.ln1_b));
    h = ops::add(h, attention(tape, b, a));
    Var<Real> m = ops::layer_norm(h, tape.param(*b.ln2_w), tape.param(*b.ln2_b));
    m = ops::gelu(ops::linear(m, tape.param(*b.fc1_w), std::optional(tape.param(*b.fc1_b))));
    m = ops::linear(m, tape.param(*b.fc2_w), std::optional(tape.param(*b.fc2_b)));
    h = ops::add(h, m);
  }
  h = ops::layer_norm(h, tape.param(*norm_w_), tape.param(*norm_b_));
  return ops::linear(h, tape.param(*head_w_), std::optional(tape.param(*head_b_)));
}

template <typename Real>
std::vector<std::int32_t> generate(const LanguageModel<Real>& lm, const Tensor<Real>& prefix_embeddings,
                                   std::size_t max_new) {
  std::vector<std::int32_t> out;
  Tensor<Real> seq = prefix_embeddings;
  while (out.size() < max_new && seq.dim(0) <= lm.max_positions()) {
    Tape<Real> tape(false);
    Var<Real> logits = lm.forward(tape, tape.constant(seq));
    const Tensor<Real>& lv = logits.value();
    const std::size_t v = lv.dim(1);
    const Real* last = lv.ptr() + (lv.dim(0) - 1) * v;
    std::int32_t best = 0;
    for (std::size_t j = 1; j < v; ++j) {
      if (last[j] > last[best]) best = std::int32_t(j);
    }
    if (best == special::kEos) break;
    out.push_back(best);
    if (seq.dim(0) == lm.max_positions()) break;
    const Tensor<Real>& table = lm.embed_table(tape).value();
    const std::size_t d = seq.dim(1);
    std::vector<Real> grown(seq.vec());
    grown.insert(grown.end(), table.ptr() + best * d, table.ptr() + (best + 1) * d);
    seq = Tensor<Real>({seq.dim(0) + 1, d}, std::move(grown));
  }
  return out;
}

template class LanguageModel<float>;
template class LanguageModel<double>;
template std::vector<std::int32_t> generate(const LanguageModel<float>&, const Tensor<float>&, std::size_t);
template std::vector<std::int32_t> generate(const LanguageModel<double>&, const Tensor<double>&, std::size_t);

}  // namespace aquila
