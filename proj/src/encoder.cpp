// SPDX-License-Identifier: Apache-2.0

#include "aquila/encoder.hpp"

#include <string>

#include "aquila/ops.hpp"

namespace aquila {

namespace {
// Pixels in [0,1] are centred and scaled before the stem so that flat colours
// keep distinct directions after channel normalisation.
constexpr double kPixelMean = 0.5;
constexpr double kPixelScale = 4.0;
}  // namespace

template <typename Real>
PyramidVars<Real> as_constants(Tape<Real>& tape, const FeaturePyramid<Real>& pyramid) {
  PyramidVars<Real> out;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) out.levels[l] = tape.constant(pyramid.levels[l]);
  return out;
}

template <typename Real>
void check_image(const Tensor<Real>& image) {
  const std::size_t deepest = kPyramidStrides.back();
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) % deepest != 0 || image.dim(2) % deepest != 0) {
    throw ShapeError("image must be [3,H,W] with H and W divisible by " + std::to_string(deepest) +
                     ", got " + shape_str(image.shape()));
  }
}

template <typename Real>
VisualEncoder<Real>::VisualEncoder(ParameterSet<Real>& params, const ModelConfig& config, Rng rng) {
  std::size_t in_ch = 3;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    const std::size_t out_ch = kPyramidChannels[l];
    const std::size_t kernel = l == 0 ? kPyramidStrides[0] : kPyramidStrides[l] / kPyramidStrides[l - 1];
    const std::string prefix = "encoder.stage" + std::to_string(l + 1) + ".";
    Stage& s = stages_[l];
    s.kernel = kernel;
    s.down_w = &params.add(prefix + "down.weight",
                           normal_tensor<Real>({out_ch, in_ch, kernel, kernel}, rng, config.init_std));
    s.down_b = &params.add(prefix + "down.bias", Tensor<Real>({out_ch}));
    s.norm_w = &params.add(prefix + "norm.weight", Tensor<Real>({out_ch}, Real(1)));
    s.norm_b = &params.add(prefix + "norm.bias", Tensor<Real>({out_ch}));
    s.block_w = &params.add(prefix + "block.weight",
                            normal_tensor<Real>({out_ch, out_ch, 3, 3}, rng, config.init_std));
    s.block_b = &params.add(prefix + "block.bias", Tensor<Real>({out_ch}));
    in_ch = out_ch;
  }
}

template <typename Real>
PyramidVars<Real> VisualEncoder<Real>::forward(Tape<Real>& tape, Var<Real> image) const {
  check_image(image.value());
  Tensor<Real> centred = image.value();
  for (Real& v : centred.data()) v = (v - Real(kPixelMean)) * Real(kPixelScale);
  // Preprocessing is affine, so gradients w.r.t. the raw image are not needed.
  Var<Real> x = tape.constant(std::move(centred));
  PyramidVars<Real> out;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    const Stage& s = stages_[l];
    x = ops::conv2d(x, tape.param(*s.down_w), tape.param(*s.down_b), s.kernel, 0);
    x = ops::gelu(ops::channel_layer_norm(x, tape.param(*s.norm_w), tape.param(*s.norm_b)));
    Var<Real> r = ops::gelu(ops::conv2d(x, tape.param(*s.block_w), tape.param(*s.block_b), 1, 1));
    x = ops::add(x, r);
    out.levels[l] = x;
  }
  return out;
}

template <typename Real>
FeaturePyramid<Real> VisualEncoder<Real>::encode(const Tensor<Real>& image) const {
  Tape<Real> tape(false);
  PyramidVars<Real> vars = forward(tape, tape.constant(image));
  FeaturePyramid<Real> out;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) out.levels[l] = vars.levels[l].value();
  return out;
}

template <typename Real>
ImageProjector<Real>::ImageProjector(ParameterSet<Real>& params, const ModelConfig& config, Rng rng) {
  const std::size_t c = kPyramidChannels.back();
  const std::size_t d = config.d_model;
  fc1_w_ = &params.add("projector.image.fc1.weight", normal_tensor<Real>({c, d}, rng, config.init_std));
  fc1_b_ = &params.add("projector.image.fc1.bias", Tensor<Real>({d}));
  fc2_w_ = &params.add("projector.image.fc2.weight", normal_tensor<Real>({d, d}, rng, config.init_std));
  fc2_b_ = &params.add("projector.image.fc2.bias", Tensor<Real>({d}));
}

template <typename Real>
Var<Real> ImageProjector<Real>::forward(Tape<Real>& tape, Var<Real> last_level) const {
  const Shape& s = last_level.shape();
  if (s.size() != 3 || s[0] != fc1_w_->value.dim(0)) {
    throw ShapeError("image projector expects [" + std::to_string(fc1_w_->value.dim(0)) +
                     ",h,w], got " + shape_str(s));
  }
  Var<Real> cells = ops::transpose(ops::reshape(last_level, {s[0], s[1] * s[2]}));
  Var<Real> h = ops::gelu(ops::linear(cells, tape.param(*fc1_w_), std::optional(tape.param(*fc1_b_))));
  return ops::linear(h, tape.param(*fc2_w_), std::optional(tape.param(*fc2_b_)));
}

template PyramidVars<float> as_constants(Tape<float>&, const FeaturePyramid<float>&);
template PyramidVars<double> as_constants(Tape<double>&, const FeaturePyramid<double>&);
template void check_image(const Tensor<float>&);
template void check_image(const Tensor<double>&);
template class VisualEncoder<float>;
template class VisualEncoder<double>;
template class ImageProjector<float>;
template class ImageProjector<double>;

}  // namespace aquila
