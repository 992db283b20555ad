// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>

#include "aquila/mask_extractor.hpp"
#include "support.hpp"

using namespace aquila;

namespace {

Tensor<float> random_mask(std::size_t h, std::size_t w, Rng& rng, double p = 0.3) {
  Tensor<float> m({h, w});
  for (float& v : m.data()) v = rng.uniform() < p ? 1.0f : 0.0f;
  m[rng.below(m.size())] = 1.0f;
  return m;
}

// Per-block mean with explicit double loops.
Tensor<double> block_mean_oracle(const Tensor<float>& m, std::size_t rows, std::size_t cols) {
  const std::size_t bh = m.dim(0) / rows, bw = m.dim(1) / cols;
  Tensor<double> out({rows, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      double s = 0;
      for (std::size_t y = 0; y < bh; ++y)
        for (std::size_t x = 0; x < bw; ++x) s += m.at(r * bh + y, c * bw + x);
      out.at(r, c) = s / double(bh * bw);
    }
  return out;
}

// Area resize by supersampling: blow every source pixel up to S x S, then
// average H x W blocks of the blown-up grid.
Tensor<double> area_resize_oracle(const Tensor<float>& m, std::size_t S) {
  const std::size_t H = m.dim(0), W = m.dim(1);
  Tensor<double> out({S, S});
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < S; ++j) {
      double s = 0;
      for (std::size_t y = i * H; y < (i + 1) * H; ++y)
        for (std::size_t x = j * W; x < (j + 1) * W; ++x) s += m.at(y / S, x / S);
      out.at(i, j) = s / double(H * W);
    }
  return out;
}

FeaturePyramid<double> random_pyramid(std::size_t side, Rng& rng) {
  FeaturePyramid<double> p;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    const std::size_t n = side / kPyramidStrides[l];
    p.levels[l] = testing::random_tensor({kPyramidChannels[l], n, n}, rng);
  }
  return p;
}

std::array<Tensor<double>, kPyramidLevels> pool_values(const FeaturePyramid<double>& pyr, const RegionMask& m) {
  Tape<double> tape(false);
  auto vars = as_constants(tape, pyr);
  auto pooled = mask_pool(vars, m);
  std::array<Tensor<double>, kPyramidLevels> out;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) out[l] = pooled[l].value();
  return out;
}

ModelConfig toy_config() {
  ModelConfig c;
  c.image_size = 64;
  c.d_model = 32;
  c.spatial_size = 32;
  return c;
}

}  // namespace

TEST_CASE("region masks are binary and nonempty") {
  CHECK_THROWS_AS(RegionMask(Tensor<float>({4, 4})), PreconditionError);
  Tensor<float> g({4, 4});
  g[3] = 0.5f;
  CHECK_THROWS_AS(RegionMask{g}, PreconditionError);
  g[3] = 1.0f;
  CHECK(RegionMask(g).pixel_count() == 1);
}

TEST_CASE("downsample_mask examples") {
  Tensor<float> m({4, 4});
  m.at(0, 0) = m.at(0, 1) = m.at(1, 0) = m.at(1, 1) = 1;
  CHECK(downsample_mask<double>(m, 2, 2).vec() == std::vector<double>{1, 0, 0, 0});
  Tensor<float> q({2, 2}, std::vector<float>{1, 0, 0, 0});
  CHECK(downsample_mask<double>(q, 1, 1).vec() == std::vector<double>{0.25});
  CHECK_THROWS_AS(downsample_mask<double>(m, 3, 3), ShapeError);

  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = random_mask(32, 32, rng);
    const auto d = downsample_mask<double>(r, 8, 8);
    CHECK(d == block_mean_oracle(r, 8, 8));
    double mass = 0;
    for (double v : d.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      mass += v * 16;
    }
    CHECK(mass == double(RegionMask(r).pixel_count()));
  }
}

TEST_CASE("area_resize matches the supersampling oracle") {
  Rng rng(8);
  for (auto [h, s] : {std::pair<std::size_t, std::size_t>{64, 32}, {32, 224}, {48, 20}, {128, 224}, {20, 48}}) {
    const auto m = random_mask(h, h, rng);
    const auto got = area_resize<double>(m, s);
    const auto want = area_resize_oracle(m, s);
    double worst = 0;
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("mask_pool examples") {
  Rng rng(2);
  FeaturePyramid<double> constant;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    const std::size_t n = 64 / kPyramidStrides[l];
    constant.levels[l] = Tensor<double>({kPyramidChannels[l], n, n}, 3.0);
  }
  const RegionMask m(random_mask(64, 64, rng));
  for (const auto& v : pool_values(constant, m))
    for (double x : v.data()) CHECK(std::abs(x - 3.0) < 1e-12);

  const auto pyr = random_pyramid(64, rng);
  const auto full = pool_values(pyr, RegionMask(Tensor<float>({64, 64}, 1.0f)));
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    const auto& f = pyr.levels[l];
    const std::size_t cells = f.dim(1) * f.dim(2);
    for (std::size_t c = 0; c < f.dim(0); ++c) {
      double s = 0;
      for (std::size_t k = 0; k < cells; ++k) s += f[c * cells + k];
      CHECK(std::abs(full[l][c] - s / double(cells)) < 1e-12);
    }
  }
  CHECK_THROWS_AS(pool_values(pyr, RegionMask(Tensor<float>({32, 32}, 1.0f))), PreconditionError);
}

TEST_CASE("mask_pool falls back to the nearest cell when coverage vanishes") {
  // A single pixel covers 1/1024 of a stride-32 cell: coverage is tiny but
  // positive, so the fallback only triggers for weights that sum below 1e-8.
  Tensor<float> g({64, 64});
  g.at(40, 9) = 1.0f;
  const auto w = level_pool_weights<double>(g, 2, 2);
  CHECK(w.at(1, 0) == doctest::Approx(1.0 / 1024));
  const auto nearest = nearest_cell_weights<double>(g, 2, 2);
  CHECK(nearest.vec() == std::vector<double>{0, 0, 1, 0});
}

TEST_CASE("mask_pool is linear in features and ignores uncovered cells") {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const auto F = random_pyramid(64, rng), G = random_pyramid(64, rng);
    FeaturePyramid<double> sum;
    for (std::size_t l = 0; l < kPyramidLevels; ++l) {
      sum.levels[l] = F.levels[l];
      for (std::size_t i = 0; i < sum.levels[l].size(); ++i) sum.levels[l][i] += G.levels[l][i];
    }
    Tensor<float> g({64, 64});
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 24; ++x) g.at(y, x) = rng.uniform() < 0.5 ? 1.0f : 0.0f;
    g.at(3, 3) = 1.0f;
    const RegionMask m(g);
    const auto a = pool_values(F, m), b = pool_values(G, m), ab = pool_values(sum, m);
    for (std::size_t l = 0; l < kPyramidLevels; ++l)
      for (std::size_t c = 0; c < a[l].size(); ++c) CHECK(std::abs(ab[l][c] - a[l][c] - b[l][c]) < 1e-5);

    // Shuffle level-1 features among cells with zero weight (rows >= 4).
    FeaturePyramid<double> shuffled = F;
    auto& f1 = shuffled.levels[0];
    for (std::size_t c = 0; c < f1.dim(0); ++c) {
      std::vector<double> tail(f1.ptr() + c * 256 + 4 * 16, f1.ptr() + (c + 1) * 256);
      rng.shuffle(std::span<double>(tail));
      std::copy(tail.begin(), tail.end(), f1.ptr() + c * 256 + 4 * 16);
    }
    CHECK(pool_values(shuffled, m)[0] == a[0]);
  }
}

TEST_CASE("fused mask token behaves as an affine sum before the MLP") {
  ParameterSet<double> params;
  RegionProjector<double> proj(params, toy_config(), Rng(3));
  Rng rng(12);
  std::array<Tensor<double>, kPyramidLevels> zero, v, w, vw;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    zero[l] = Tensor<double>({kPyramidChannels[l]});
    v[l] = testing::random_tensor({kPyramidChannels[l]}, rng);
    w[l] = testing::random_tensor({kPyramidChannels[l]}, rng);
    vw[l] = v[l];
    for (std::size_t i = 0; i < vw[l].size(); ++i) vw[l][i] += w[l][i];
  }
  auto run = [&](const std::array<Tensor<double>, kPyramidLevels>& in, bool fuse_only) {
    Tape<double> tape(false);
    std::array<Var<double>, kPyramidLevels> vars;
    for (std::size_t l = 0; l < kPyramidLevels; ++l) vars[l] = tape.constant(in[l]);
    return (fuse_only ? proj.fuse_levels(tape, vars) : proj.mask_token(tape, vars)).value();
  };
  // Biases start at zero, so zero inputs give a zero token.
  for (double x : run(zero, false).data()) CHECK(x == 0.0);

  const auto a = run(vw, true), b = run(v, true), c = run(w, true), z = run(zero, true);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - (b[i] + c[i] - z[i])) < 1e-12);

  // Bias-only path: zero level weights, random level biases.
  Tensor<double> bias_sum({32});
  for (int l = 1; l <= 4; ++l) {
    auto& W = params.get("projector.region.level" + std::to_string(l) + ".weight");
    auto& B = params.get("projector.region.level" + std::to_string(l) + ".bias");
    W.value.fill(0.0);
    B.value = testing::random_tensor(B.value.shape(), rng);
    for (std::size_t i = 0; i < 32; ++i) bias_sum[i] += B.value[i];
  }
  Tape<double> tape(false);
  auto mlp = [&](Var<double> x) {
    auto h = ops::gelu(ops::linear(x, tape.param(params.get("projector.region.mlp.fc1.weight")),
                                   tape.param(params.get("projector.region.mlp.fc1.bias"))));
    return ops::linear(h, tape.param(params.get("projector.region.mlp.fc2.weight")),
                       tape.param(params.get("projector.region.mlp.fc2.bias")));
  };
  const auto expect = mlp(tape.constant(bias_sum)).value();
  const auto got = run(v, false);
  for (std::size_t i = 0; i < 32; ++i) CHECK(std::abs(got[i] - expect[i]) < 1e-12);
}

TEST_CASE("spatial token") {
  ParameterSet<double> params;
  RegionProjector<double> proj(params, toy_config(), Rng(5));
  Rng rng(1);
  auto& b = params.get("projector.region.spatial.bias");
  b.value = testing::random_tensor(b.value.shape(), rng);
  const auto& W = params.get("projector.region.spatial.weight").value;
  Tape<double> tape(false);
  CHECK(proj.spatial_token_from_resized(tape, Tensor<double>({32 * 32})).value() == b.value);

  const auto ones = proj.spatial_token(tape, RegionMask(Tensor<float>({64, 64}, 1.0f))).value();
  for (std::size_t j = 0; j < 32; ++j) {
    double s = b.value[j];
    for (std::size_t i = 0; i < 32 * 32; ++i) s += W.at(i, j);
    CHECK(std::abs(ones[j] - s) < 1e-9);
  }

  Tensor<float> tl({64, 64}), br({64, 64});
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) tl.at(y, x) = br.at(56 + y, 56 + x) = 1.0f;
  const auto a = proj.spatial_token(tape, RegionMask(tl)).value();
  const auto c = proj.spatial_token(tape, RegionMask(br)).value();
  double dist = 0;
  for (std::size_t j = 0; j < 32; ++j) dist += (a[j] - c[j]) * (a[j] - c[j]);
  CHECK(dist > 0);

  // Moving a pixel inside its 2x2 resize block keeps the token.
  Tensor<float> p = tl, q = tl;
  p.at(20, 20) = 1.0f;
  q.at(21, 21) = 1.0f;
  CHECK(proj.spatial_token(tape, RegionMask(p)).value() == proj.spatial_token(tape, RegionMask(q)).value());
}

TEST_CASE("extract_region determinism and position sensitivity") {
  ParameterSet<double> params;
  RegionProjector<double> proj(params, toy_config(), Rng(8));
  Rng rng(3);
  const auto pyr = random_pyramid(64, rng);
  Tape<double> tape(false);
  auto vars = as_constants(tape, pyr);
  Tensor<float> g({64, 64});
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) g.at(y, x) = 1.0f;
  const auto a = extract_region(tape, vars, RegionMask(g), proj);
  const auto b = extract_region(tape, vars, RegionMask(g), proj);
  CHECK(a.mask_token.value() == b.mask_token.value());
  CHECK(a.spatial_token.value() == b.spatial_token.value());

  // Over a spatially constant pyramid, a translated block pools identically.
  FeaturePyramid<double> flat;
  for (std::size_t l = 0; l < kPyramidLevels; ++l) {
    const std::size_t n = 64 / kPyramidStrides[l];
    flat.levels[l] = Tensor<double>({kPyramidChannels[l], n, n});
    for (std::size_t c = 0; c < kPyramidChannels[l]; ++c)
      for (std::size_t k = 0; k < n * n; ++k) flat.levels[l][c * n * n + k] = double(c) * 0.1 - 0.5;
  }
  auto flat_vars = as_constants(tape, flat);
  Tensor<float> moved({64, 64});
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) moved.at(32 + y, 32 + x) = 1.0f;
  const auto p = extract_region(tape, flat_vars, RegionMask(g), proj);
  const auto q = extract_region(tape, flat_vars, RegionMask(moved), proj);
  for (std::size_t i = 0; i < 32; ++i) CHECK(std::abs(p.mask_token.value()[i] - q.mask_token.value()[i]) < 1e-12);
  CHECK(!(p.spatial_token.value() == q.spatial_token.value()));
}

TEST_CASE("region projector gradients match finite differences") {
  for (std::uint64_t seed : {31, 32, 33}) {
    ParameterSet<double> params;
    RegionProjector<double> proj(params, toy_config(), Rng(seed));
    Rng rng(seed);
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name.find("bias") != std::string::npos) params[i].value = testing::random_tensor(params[i].value.shape(), rng, 0.1);
    const auto pyr = random_pyramid(64, rng);
    const RegionMask m(random_mask(64, 64, rng, 0.2));
    const auto readout = testing::random_tensor({32}, rng);
    auto loss = [&](Tape<double>& tape) {
      auto vars = as_constants(tape, pyr);
      auto r = extract_region(tape, vars, m, proj);
      return ops::add(ops::dot_constant(r.mask_token, readout), ops::dot_constant(r.spatial_token, readout));
    };
    CHECK(testing::param_gradient_error(params, loss, rng, 8) < 1e-4);
  }
}
