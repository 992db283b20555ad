// SPDX-License-Identifier: Apache-2.0

#include "aquila/mask_extractor.hpp"

#include <limits>
#include <string>
#include <vector>

#include "aquila/ops.hpp"

namespace aquila {

namespace {

struct AxisWeights {
  std::size_t first = 0;
  std::vector<double> weights;
};

// Overlap of each target interval with the source pixels along one axis, in
// exact integer units of 1/(src*dst).
std::vector<AxisWeights> area_axis(std::size_t src, std::size_t dst) {
  std::vector<AxisWeights> out(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    const std::size_t lo = i * src, hi = (i + 1) * src;
    const std::size_t y0 = lo / dst;
    const std::size_t y1 = (hi + dst - 1) / dst;
    out[i].first = y0;
    for (std::size_t y = y0; y < y1 && y < src; ++y) {
      const std::size_t a = std::max(lo, y * dst);
      const std::size_t b = std::min(hi, (y + 1) * dst);
      out[i].weights.push_back(b > a ? double(b - a) / double(src) : 0.0);
    }
  }
  return out;
}

void check_mask_grid(const Tensor<float>& mask) {
  if (mask.rank() != 2) throw ShapeError("region mask must be [H,W], got " + shape_str(mask.shape()));
}

}  // namespace

RegionMask::RegionMask(Tensor<float> grid) : grid_(std::move(grid)) {
  check_mask_grid(grid_);
  bool any = false;
  for (float v : grid_.data()) {
    if (v != 0.0f && v != 1.0f) throw PreconditionError("region mask values must be exactly 0 or 1");
    any = any || v == 1.0f;
  }
  if (!any) throw PreconditionError("region mask is empty");
}

std::size_t RegionMask::pixel_count() const {
  std::size_t n = 0;
  for (float v : grid_.data()) n += v == 1.0f;
  return n;
}

template <typename Real>
Tensor<Real> downsample_mask(const Tensor<float>& mask, std::size_t rows, std::size_t cols) {
  check_mask_grid(mask);
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  if (rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0) {
    throw ShapeError("cannot downsample mask " + shape_str(mask.shape()) + " to [" +
                     std::to_string(rows) + "," + std::to_string(cols) + "]");
  }
  const std::size_t bh = h / rows, bw = w / cols;
  Tensor<Real> out({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::size_t count = 0;
      for (std::size_t y = r * bh; y < (r + 1) * bh; ++y)
        for (std::size_t x = c * bw; x < (c + 1) * bw; ++x) count += mask[y * w + x] != 0.0f;
      out[r * cols + c] = Real(count) / Real(bh * bw);
    }
  }
  return out;
}

template <typename Real>
Tensor<Real> area_resize(const Tensor<float>& mask, std::size_t size) {
  check_mask_grid(mask);
  if (size == 0) throw ShapeError("area_resize: target size must be positive");
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  const auto wy = area_axis(h, size);
  const auto wx = area_axis(w, size);
  // Horizontal pass over every source row, then vertical pass.
  std::vector<double> tmp(h * size, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    const float* row = mask.ptr() + y * w;
    for (std::size_t j = 0; j < size; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < wx[j].weights.size(); ++k) acc += wx[j].weights[k] * row[wx[j].first + k];
      tmp[y * size + j] = acc;
    }
  }
  Tensor<Real> out({size, size});
  for (std::size_t i = 0; i < size; ++i) {
    for (std::size_t j = 0; j < size; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < wy[i].weights.size(); ++k) acc += wy[i].weights[k] * tmp[(wy[i].first + k) * size + j];
      out[i * size + j] = Real(acc);
    }
  }
  return out;
}

template <typename Real>
Tensor<Real> nearest_cell_weights(const Tensor<float>& mask, std::size_t rows, std::size_t cols) {
  check_mask_grid(mask);
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  double sy = 0, sx = 0, n = 0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (mask[y * w + x] == 0.0f) continue;
      sy += double(y) + 0.5;
      sx += double(x) + 0.5;
      n += 1;
    }
  }
  // An empty grid falls back to the image centre.
  const double cy = n > 0 ? sy / n : double(h) / 2;
  const double cx = n > 0 ? sx / n : double(w) / 2;
  const double cell_h = double(h) / double(rows), cell_w = double(w) / double(cols);
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double dy = (double(r) + 0.5) * cell_h - cy;
      const double dx = (double(c) + 0.5) * cell_w - cx;
      const double d = dy * dy + dx * dx;
      if (d < best_d) {
        best_d = d;
        best = r * cols + c;
      }
    }
  }
  Tensor<Real> out({rows, cols});
  out[best] = Real(1);
  return out;
}

template <typename Real>
Tensor<Real> level_pool_weights(const Tensor<float>& mask, std::size_t rows, std::size_t cols) {
  Tensor<Real> cover = downsample_mask<Real>(mask, rows, cols);
  double total = 0;
  for (Real v : cover.data()) total += double(v);
  if (total < 1e-8) return nearest_cell_weights<Real>(mask, rows, cols);
  return cover;
}

template <typename Real>
std::array<Var<Real>, kPyramidLevels> mask_pool(const PyramidVars<Real>& pyramid, const RegionMask& mask) {
  std::array<Var<Real>, kPyramidLevels> out;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    const Shape& s = pyramid.levels[l].shape();
    if (s.size() != 3 || s[1] * kPyramidStrides[l] != mask.height() || s[2] * kPyramidStrides[l] != mask.width()) {
      throw PreconditionError("mask " + shape_str(mask.grid().shape()) + " does not match pyramid level " +
                              std::to_string(l + 1) + " " + shape_str(s));
    }
    out[l] = ops::weighted_spatial_mean(pyramid.levels[l], level_pool_weights<Real>(mask.grid(), s[1], s[2]));
  }
  return out;
}

template <typename Real>
RegionProjector<Real>::RegionProjector(ParameterSet<Real>& params, const ModelConfig& config, Rng rng)
    : spatial_size_(config.spatial_size) {
  const std::size_t d = config.d_model;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    const std::string prefix = "projector.region.level" + std::to_string(l + 1) + ".";
    level_w_[l] = &params.add(prefix + "weight", normal_tensor<Real>({kPyramidChannels[l], d}, rng, config.init_std));
    level_b_[l] = &params.add(prefix + "bias", Tensor<Real>({d}));
  }
  mlp_fc1_w_ = &params.add("projector.region.mlp.fc1.weight", normal_tensor<Real>({d, d}, rng, config.init_std));
  mlp_fc1_b_ = &params.add("projector.region.mlp.fc1.bias", Tensor<Real>({d}));
  mlp_fc2_w_ = &params.add("projector.region.mlp.fc2.weight", normal_tensor<Real>({d, d}, rng, config.init_std));
  mlp_fc2_b_ = &params.add("projector.region.mlp.fc2.bias", Tensor<Real>({d}));
  const std::size_t s2 = spatial_size_ * spatial_size_;
  spatial_w_ = &params.add("projector.region.spatial.weight", normal_tensor<Real>({s2, d}, rng, config.init_std));
  spatial_b_ = &params.add("projector.region.spatial.bias", Tensor<Real>({d}));
}

template <typename Real>
Var<Real> RegionProjector<Real>::fuse_levels(Tape<Real>& tape,
                                             const std::array<Var<Real>, kPyramidLevels>& pooled) const {
  Var<Real> acc;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    Var<Real> y = ops::linear(pooled[l], tape.param(*level_w_[l]), std::optional(tape.param(*level_b_[l])));
    acc = l == 0 ? y : ops::add(acc, y);
  }
  return acc;
}

template <typename Real>
Var<Real> RegionProjector<Real>::mask_token(Tape<Real>& tape,
                                            const std::array<Var<Real>, kPyramidLevels>& pooled) const {
  Var<Real> fused = fuse_levels(tape, pooled);
  Var<Real> h = ops::gelu(ops::linear(fused, tape.param(*mlp_fc1_w_), std::optional(tape.param(*mlp_fc1_b_))));
  return ops::linear(h, tape.param(*mlp_fc2_w_), std::optional(tape.param(*mlp_fc2_b_)));
}

template <typename Real>
Var<Real> RegionProjector<Real>::spatial_token_from_resized(Tape<Real>& tape, const Tensor<Real>& resized) const {
  const std::size_t s2 = spatial_size_ * spatial_size_;
  if (resized.size() != s2) {
    throw ShapeError("spatial token expects " + std::to_string(s2) + " resized values, got " +
                     shape_str(resized.shape()));
  }
  Var<Real> flat = tape.constant(resized.reshaped({s2}));
  return ops::linear(flat, tape.param(*spatial_w_), std::optional(tape.param(*spatial_b_)));
}

template <typename Real>
Var<Real> RegionProjector<Real>::spatial_token(Tape<Real>& tape, const RegionMask& mask) const {
  return spatial_token_from_resized(tape, area_resize<Real>(mask.grid(), spatial_size_));
}

template <typename Real>
RegionEmbedding<Real> extract_region(Tape<Real>& tape, const PyramidVars<Real>& pyramid, const RegionMask& mask,
                                     const RegionProjector<Real>& projector) {
  RegionEmbedding<Real> out;
  out.mask_token = projector.mask_token(tape, mask_pool(pyramid, mask));
  out.spatial_token = projector.spatial_token(tape, mask);
  return out;
}

#define AQUILA_INSTANTIATE_MASK(Real)                                                                          \
  template Tensor<Real> downsample_mask<Real>(const Tensor<float>&, std::size_t, std::size_t);                 \
  template Tensor<Real> area_resize<Real>(const Tensor<float>&, std::size_t);                                  \
  template Tensor<Real> nearest_cell_weights<Real>(const Tensor<float>&, std::size_t, std::size_t);            \
  template Tensor<Real> level_pool_weights<Real>(const Tensor<float>&, std::size_t, std::size_t);              \
  template std::array<Var<Real>, kPyramidLevels> mask_pool(const PyramidVars<Real>&, const RegionMask&);       \
  template class RegionProjector<Real>;                                                                        \
  template RegionEmbedding<Real> extract_region(Tape<Real>&, const PyramidVars<Real>&, const RegionMask&,     \
                                                const RegionProjector<Real>&);

AQUILA_INSTANTIATE_MASK(float)
AQUILA_INSTANTIATE_MASK(double)

#undef AQUILA_INSTANTIATE_MASK

}  // namespace aquila
