// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>

#include "aquila/autograd.hpp"
#include "aquila/encoder.hpp"
#include "aquila/model_config.hpp"

namespace aquila {

// Binary [H,W] region mask at image resolution with at least one set pixel.
class RegionMask {
 public:
  RegionMask() = default;
  // Throws PreconditionError for non-binary or empty grids.
  explicit RegionMask(Tensor<float> grid);

  const Tensor<float>& grid() const { return grid_; }
  std::size_t height() const { return grid_.dim(0); }
  std::size_t width() const { return grid_.dim(1); }
  std::size_t pixel_count() const;

  friend bool operator==(const RegionMask& a, const RegionMask& b) { return a.grid_ == b.grid_; }

 private:
  Tensor<float> grid_;
};

// Fraction of each source block covered by the mask. The source extents must
// be multiples of the target extents.
template <typename Real>
Tensor<Real> downsample_mask(const Tensor<float>& mask, std::size_t rows, std::size_t cols);

// Area-weighted resize to size x size (fractional coverage values). Handles
// both up- and down-sampling with non-integer ratios.
template <typename Real>
Tensor<Real> area_resize(const Tensor<float>& mask, std::size_t size);

// One-hot [rows,cols] grid at the cell whose centre is nearest to the mask
// centroid; ties go to the lowest row-major index.
template <typename Real>
Tensor<Real> nearest_cell_weights(const Tensor<float>& mask, std::size_t rows, std::size_t cols);

// Pooling weights for one level: coverage, or the nearest-centroid cell when
// coverage sums below 1e-8.
template <typename Real>
Tensor<Real> level_pool_weights(const Tensor<float>& mask, std::size_t rows, std::size_t cols);

// Coverage-weighted mean of every pyramid level under the mask; [C_l] each.
template <typename Real>
std::array<Var<Real>, kPyramidLevels> mask_pool(const PyramidVars<Real>& pyramid, const RegionMask& mask);

template <typename Real>
struct RegionEmbedding {
  Var<Real> mask_token;
  Var<Real> spatial_token;
};

// The region-level projector: per-level linears C_l -> D summed together, a
// 2-layer GELU MLP D -> D on the sum, and a linear S*S -> D spatial
// projection of the resized mask.
// Parameters: projector.region.level{1..4}.*, projector.region.mlp.fc{1,2}.*,
// projector.region.spatial.*.
template <typename Real>
class RegionProjector {
 public:
  RegionProjector(ParameterSet<Real>& params, const ModelConfig& config, Rng rng);

  std::size_t spatial_size() const { return spatial_size_; }

  // sum_l Linear_l(v_l), before the MLP.
  Var<Real> fuse_levels(Tape<Real>& tape, const std::array<Var<Real>, kPyramidLevels>& pooled) const;

  Var<Real> mask_token(Tape<Real>& tape, const std::array<Var<Real>, kPyramidLevels>& pooled) const;

  // Projection of an already resized, flattened [S*S] mask.
  Var<Real> spatial_token_from_resized(Tape<Real>& tape, const Tensor<Real>& resized) const;

  Var<Real> spatial_token(Tape<Real>& tape, const RegionMask& mask) const;

 private:
  std::size_t spatial_size_;
  std::array<Parameter<Real>*, kPyramidLevels> level_w_;
  std::array<Parameter<Real>*, kPyramidLevels> level_b_;
  Parameter<Real>* mlp_fc1_w_;
  Parameter<Real>* mlp_fc1_b_;
  Parameter<Real>* mlp_fc2_w_;
  Parameter<Real>* mlp_fc2_b_;
  Parameter<Real>* spatial_w_;
  Parameter<Real>* spatial_b_;
};

template <typename Real>
RegionEmbedding<Real> extract_region(Tape<Real>& tape, const PyramidVars<Real>& pyramid,
                                     const RegionMask& mask, const RegionProjector<Real>& projector);

}  // namespace aquila
