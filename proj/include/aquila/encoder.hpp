// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>

#include "aquila/autograd.hpp"
#include "aquila/model_config.hpp"

namespace aquila {

// One feature map per encoder stage, level l shaped [C_l, H/s_l, W/s_l].
template <typename Real>
struct FeaturePyramid {
  std::array<Tensor<Real>, kPyramidLevels> levels;
};

template <typename Real>
struct PyramidVars {
  std::array<Var<Real>, kPyramidLevels> levels;
};

template <typename Real>
PyramidVars<Real> as_constants(Tape<Real>& tape, const FeaturePyramid<Real>& pyramid);

// Throws ShapeError unless image is [3,H,W] with H and W multiples of 32.
template <typename Real>
void check_image(const Tensor<Real>& image);

// Four-stage convolutional pyramid. Every stage is a strided patchify conv,
// a channel layer norm and GELU, followed by a residual 3x3 conv block.
// Parameters: encoder.stage{1..4}.{down,norm,block}.{weight,bias}.
template <typename Real>
class VisualEncoder {
 public:
  VisualEncoder(ParameterSet<Real>& params, const ModelConfig& config, Rng rng);

  PyramidVars<Real> forward(Tape<Real>& tape, Var<Real> image) const;

  // Gradient-free evaluation.
  FeaturePyramid<Real> encode(const Tensor<Real>& image) const;

 private:
  struct Stage {
    Parameter<Real>* down_w;
    Parameter<Real>* down_b;
    Parameter<Real>* norm_w;
    Parameter<Real>* norm_b;
    Parameter<Real>* block_w;
    Parameter<Real>* block_b;
    std::size_t kernel;
  };
  std::array<Stage, kPyramidLevels> stages_;
};

// Two-layer MLP (C_4 -> D -> D, GELU between) applied to every cell of the
// last pyramid level. Parameters: projector.image.fc{1,2}.{weight,bias}.
template <typename Real>
class ImageProjector {
 public:
  ImageProjector(ParameterSet<Real>& params, const ModelConfig& config, Rng rng);

  // [C,h,w] -> [h*w, D], rows in row-major cell order.
  Var<Real> forward(Tape<Real>& tape, Var<Real> last_level) const;

 private:
  Parameter<Real>* fc1_w_;
  Parameter<Real>* fc1_b_;
  Parameter<Real>* fc2_w_;
  Parameter<Real>* fc2_b_;
};

}  // namespace aquila
