// SPDX-License-Identifier: Apache-2.0

#include "aquila/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace aquila::ops {

namespace {

template <typename Real>
Tape<Real>& same_tape(Var<Real> a, Var<Real> b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw Error(std::string(op) + ": operands live on different tapes");
  }
  return *a.tape;
}

template <typename Real>
void require_rank(const Tensor<Real>& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " +
                     std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

template <typename Real>
void axpy(std::size_t n, Real a, const Real* x, Real* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename Real>
Real dot(std::size_t n, const Real* x, const Real* y) {
  Real s = 0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

// out[m,n] += a[m,k] * b[k,n]; zero entries of a are skipped.
template <typename Real>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* out) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* orow = out + i * n;
    const Real* arow = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const Real av = arow[l];
      if (av == Real(0)) continue;
      axpy(n, av, b + l * n, orow);
    }
  }
}

// out[m,k] += g[m,n] * b[k,n]^T
template <typename Real>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const Real* g, const Real* b, Real* out) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* grow = g + i * n;
    Real* orow = out + i * k;
    for (std::size_t l = 0; l < k; ++l) orow[l] += dot(n, grow, b + l * n);
  }
}

// out[k,n] += a[m,k]^T * g[m,n]; zero entries of a are skipped.
template <typename Real>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* g, Real* out) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    const Real* grow = g + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const Real av = arow[l];
      if (av == Real(0)) continue;
      axpy(n, av, grow, out + l * n);
    }
  }
}

template <typename Real>
Real gelu_value(Real x) {
  return Real(0.5) * x * (Real(1) + std::erf(x * Real(std::numbers::sqrt2 / 2)));
}

template <typename Real>
Real gelu_slope(Real x) {
  const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(std::numbers::sqrt2 / 2)));
  const Real pdf = std::exp(Real(-0.5) * x * x) * Real(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

}  // namespace

template <typename Real>
Tensor<Real> softmax_rows(const Tensor<Real>& x) {
  Tensor<Real> y(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const Real* xr = x.ptr() + r * n;
    Real* yr = y.ptr() + r * n;
    const Real mx = *std::max_element(xr, xr + n);
    Real total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= total;
  }
  return y;
}

template <typename Real>
Var<Real> linear(Var<Real> x, Var<Real> w, std::optional<Var<Real>> b) {
  Tape<Real>& t = same_tape(x, w, "linear");
  const Tensor<Real>& xv = x.value();
  const Tensor<Real>& wv = w.value();
  require_rank(wv, 2, "linear", "weight");
  const std::size_t in = wv.dim(0);
  const std::size_t out = wv.dim(1);
  if (xv.cols() != in) {
    throw ShapeError("linear: input " + shape_str(xv.shape()) + " does not match weight " +
                     shape_str(wv.shape()));
  }
  if (b) {
    same_tape(x, *b, "linear");
    if (b->value().size() != out) {
      throw ShapeError("linear: bias " + shape_str(b->value().shape()) +
                       " does not match weight " + shape_str(wv.shape()));
    }
  }
  Shape yshape = xv.shape();
  yshape.back() = out;
  Tensor<Real> y(yshape);
  const std::size_t rows = xv.rows();
  if (b) {
    const Real* bv = b->value().ptr();
    for (std::size_t r = 0; r < rows; ++r) std::copy(bv, bv + out, y.ptr() + r * out);
  }
  gemm_nn(rows, in, out, xv.ptr(), wv.ptr(), y.ptr());

  const bool needs = x.requires_grad() || w.requires_grad() || (b && b->requires_grad());
  return t.push(std::move(y), needs, [x, w, b, rows, in, out](Tape<Real>& tp, const Tensor<Real>& g) {
    if (x.requires_grad()) gemm_nt(rows, out, in, g.ptr(), w.value().ptr(), tp.grad(x.id).ptr());
    if (w.requires_grad()) gemm_tn(rows, in, out, x.value().ptr(), g.ptr(), tp.grad(w.id).ptr());
    if (b && b->requires_grad()) {
      Real* gb = tp.grad(b->id).ptr();
      for (std::size_t r = 0; r < rows; ++r) axpy(out, Real(1), g.ptr() + r * out, gb);
    }
  });
}

template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
  Tape<Real>& t = same_tape(a, b, "matmul");
  const Tensor<Real>& av = a.value();
  const Tensor<Real>& bv = b.value();
  require_rank(av, 2, "matmul", "lhs");
  require_rank(bv, 2, "matmul", "rhs");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw ShapeError("matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  Tensor<Real> y({m, n});
  gemm_nn(m, k, n, av.ptr(), bv.ptr(), y.ptr());
  const bool needs = a.requires_grad() || b.requires_grad();
  return t.push(std::move(y), needs, [a, b, m, k, n](Tape<Real>& tp, const Tensor<Real>& g) {
    if (a.requires_grad()) gemm_nt(m, n, k, g.ptr(), b.value().ptr(), tp.grad(a.id).ptr());
    if (b.requires_grad()) gemm_tn(m, k, n, a.value().ptr(), g.ptr(), tp.grad(b.id).ptr());
  });
}

template <typename Real>
Var<Real> matmul_nt(Var<Real> a, Var<Real> b) {
  Tape<Real>& t = same_tape(a, b, "matmul_nt");
  const Tensor<Real>& av = a.value();
  const Tensor<Real>& bv = b.value();
  require_rank(av, 2, "matmul_nt", "lhs");
  require_rank(bv, 2, "matmul_nt", "rhs");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  if (bv.dim(1) != k) {
    throw ShapeError("matmul_nt: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()) + "^T");
  }
  Tensor<Real> y({m, n});
  gemm_nt(m, k, n, av.ptr(), bv.ptr(), y.ptr());
  const bool needs = a.requires_grad() || b.requires_grad();
  return t.push(std::move(y), needs, [a, b, m, k, n](Tape<Real>& tp, const Tensor<Real>& g) {
    // y = a b^T: da = g b, db = g^T a
    if (a.requires_grad()) gemm_nn(m, n, k, g.ptr(), b.value().ptr(), tp.grad(a.id).ptr());
    if (b.requires_grad()) gemm_tn(m, n, k, g.ptr(), a.value().ptr(), tp.grad(b.id).ptr());
  });
}

template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  Tape<Real>& t = same_tape(a, b, "add");
  if (a.shape() != b.shape()) {
    throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<Real> y = a.value();
  axpy(y.size(), Real(1), b.value().ptr(), y.ptr());
  const bool needs = a.requires_grad() || b.requires_grad();
  return t.push(std::move(y), needs, [a, b](Tape<Real>& tp, const Tensor<Real>& g) {
    if (a.requires_grad()) axpy(g.size(), Real(1), g.ptr(), tp.grad(a.id).ptr());
    if (b.requires_grad()) axpy(g.size(), Real(1), g.ptr(), tp.grad(b.id).ptr());
  });
}

template <typename Real>
Var<Real> scale(Var<Real> x, Real factor) {
  Tensor<Real> y = x.value();
  for (Real& v : y.data()) v *= factor;
  return x.tape->push(std::move(y), x.requires_grad(), [x, factor](Tape<Real>& tp, const Tensor<Real>& g) {
    axpy(g.size(), factor, g.ptr(), tp.grad(x.id).ptr());
  });
}

template <typename Real>
Var<Real> gelu(Var<Real> x) {
  const Tensor<Real>& xv = x.value();
  Tensor<Real> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = gelu_value(xv[i]);
  return x.tape->push(std::move(y), x.requires_grad(), [x](Tape<Real>& tp, const Tensor<Real>& g) {
    const Tensor<Real>& xv = x.value();
    Tensor<Real>& gx = tp.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gelu_slope(xv[i]);
  });
}

template <typename Real>
Var<Real> softmax(Var<Real> x) {
  Tensor<Real> y = softmax_rows(x.value());
  Tensor<Real> saved = x.requires_grad() ? y : Tensor<Real>();
  return x.tape->push(std::move(y), x.requires_grad(),
                      [x, saved = std::move(saved)](Tape<Real>& tp, const Tensor<Real>& g) {
    const std::size_t n = saved.cols();
    Tensor<Real>& gx = tp.grad(x.id);
    for (std::size_t r = 0; r < saved.rows(); ++r) {
      const Real* yr = saved.ptr() + r * n;
      const Real* gr = g.ptr() + r * n;
      const Real inner = dot(n, yr, gr);
      Real* out = gx.ptr() + r * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += yr[j] * (gr[j] - inner);
    }
  });
}

template <typename Real>
Var<Real> causal_softmax(Var<Real> scores) {
  const Tensor<Real>& sv = scores.value();
  require_rank(sv, 2, "causal_softmax", "scores");
  const std::size_t n = sv.dim(0);
  if (sv.dim(1) != n) throw ShapeError("causal_softmax: scores must be square, got " + shape_str(sv.shape()));
  Tensor<Real> y({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    const Real* xr = sv.ptr() + i * n;
    Real* yr = y.ptr() + i * n;
    const Real mx = *std::max_element(xr, xr + i + 1);
    Real total = 0;
    for (std::size_t j = 0; j <= i; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    for (std::size_t j = 0; j <= i; ++j) yr[j] /= total;
  }
  Tensor<Real> saved = scores.requires_grad() ? y : Tensor<Real>();
  return scores.tape->push(std::move(y), scores.requires_grad(),
                           [scores, n, saved = std::move(saved)](Tape<Real>& tp, const Tensor<Real>& g) {
    Tensor<Real>& gx = tp.grad(scores.id);
    for (std::size_t i = 0; i < n; ++i) {
      const Real* yr = saved.ptr() + i * n;
      const Real* gr = g.ptr() + i * n;
      const Real inner = dot(i + 1, yr, gr);
      Real* out = gx.ptr() + i * n;
      for (std::size_t j = 0; j <= i; ++j) out[j] += yr[j] * (gr[j] - inner);
    }
  });
}

template <typename Real>
Var<Real> layer_norm(Var<Real> x, Var<Real> gamma, Var<Real> beta, Real eps) {
  Tape<Real>& t = same_tape(x, gamma, "layer_norm");
  same_tape(x, beta, "layer_norm");
  const Tensor<Real>& xv = x.value();
  const std::size_t d = xv.cols();
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw ShapeError("layer_norm: input " + shape_str(xv.shape()) + " with gamma " +
                     shape_str(gamma.value().shape()) + " and beta " + shape_str(beta.value().shape()));
  }
  const std::size_t rows = xv.rows();
  Tensor<Real> y(xv.shape());
  Tensor<Real> xhat(xv.shape());
  std::vector<Real> rstd(rows);
  const Real* gv = gamma.value().ptr();
  const Real* bv = beta.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = xv.ptr() + r * d;
    Real mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= Real(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= Real(d);
    rstd[r] = Real(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const Real h = (xr[j] - mean) * rstd[r];
      xhat[r * d + j] = h;
      y[r * d + j] = h * gv[j] + bv[j];
    }
  }
  const bool needs = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  if (!needs) return t.push(std::move(y), false, nullptr);
  return t.push(std::move(y), true,
                [x, gamma, beta, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](
                    Tape<Real>& tp, const Tensor<Real>& g) {
    const Real* gv = gamma.value().ptr();
    if (gamma.requires_grad() || beta.requires_grad()) {
      Real* gg = gamma.requires_grad() ? tp.grad(gamma.id).ptr() : nullptr;
      Real* gb = beta.requires_grad() ? tp.grad(beta.id).ptr() : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
          if (gg) gg[j] += g[r * d + j] * xhat[r * d + j];
          if (gb) gb[j] += g[r * d + j];
        }
      }
    }
    if (x.requires_grad()) {
      Real* gx = tp.grad(x.id).ptr();
      for (std::size_t r = 0; r < rows; ++r) {
        Real mean_g = 0, mean_gh = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const Real gh = g[r * d + j] * gv[j];
          mean_g += gh;
          mean_gh += gh * xhat[r * d + j];
        }
        mean_g /= Real(d);
        mean_gh /= Real(d);
        for (std::size_t j = 0; j < d; ++j) {
          const Real gh = g[r * d + j] * gv[j];
          gx[r * d + j] += rstd[r] * (gh - mean_g - xhat[r * d + j] * mean_gh);
        }
      }
    }
  });
}

template <typename Real>
Var<Real> channel_layer_norm(Var<Real> x, Var<Real> gamma, Var<Real> beta, Real eps) {
  Tape<Real>& t = same_tape(x, gamma, "channel_layer_norm");
  same_tape(x, beta, "channel_layer_norm");
  const Tensor<Real>& xv = x.value();
  require_rank(xv, 3, "channel_layer_norm", "input");
  const std::size_t c = xv.dim(0);
  const std::size_t cells = xv.dim(1) * xv.dim(2);
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw ShapeError("channel_layer_norm: input " + shape_str(xv.shape()) + " with gamma " +
                     shape_str(gamma.value().shape()));
  }
  Tensor<Real> y(xv.shape());
  Tensor<Real> xhat(xv.shape());
  std::vector<Real> rstd(cells);
  const Real* gv = gamma.value().ptr();
  const Real* bv = beta.value().ptr();
  for (std::size_t p = 0; p < cells; ++p) {
    Real mean = 0;
    for (std::size_t k = 0; k < c; ++k) mean += xv[k * cells + p];
    mean /= Real(c);
    Real var = 0;
    for (std::size_t k = 0; k < c; ++k) {
      const Real dlt = xv[k * cells + p] - mean;
      var += dlt * dlt;
    }
    var /= Real(c);
    rstd[p] = Real(1) / std::sqrt(var + eps);
    for (std::size_t k = 0; k < c; ++k) {
      const Real h = (xv[k * cells + p] - mean) * rstd[p];
      xhat[k * cells + p] = h;
      y[k * cells + p] = h * gv[k] + bv[k];
    }
  }
  const bool needs = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  if (!needs) return t.push(std::move(y), false, nullptr);
  return t.push(std::move(y), true,
                [x, gamma, beta, c, cells, xhat = std::move(xhat), rstd = std::move(rstd)](
                    Tape<Real>& tp, const Tensor<Real>& g) {
    const Real* gv = gamma.value().ptr();
    if (gamma.requires_grad() || beta.requires_grad()) {
      Real* gg = gamma.requires_grad() ? tp.grad(gamma.id).ptr() : nullptr;
      Real* gb = beta.requires_grad() ? tp.grad(beta.id).ptr() : nullptr;
      for (std::size_t k = 0; k < c; ++k) {
        for (std::size_t p = 0; p < cells; ++p) {
          if (gg) gg[k] += g[k * cells + p] * xhat[k * cells + p];
          if (gb) gb[k] += g[k * cells + p];
        }
      }
    }
    if (x.requires_grad()) {
      Real* gx = tp.grad(x.id).ptr();
      for (std::size_t p = 0; p < cells; ++p) {
        Real mean_g = 0, mean_gh = 0;
        for (std::size_t k = 0; k < c; ++k) {
          const Real gh = g[k * cells + p] * gv[k];
          mean_g += gh;
          mean_gh += gh * xhat[k * cells + p];
        }
        mean_g /= Real(c);
        mean_gh /= Real(c);
        for (std::size_t k = 0; k < c; ++k) {
          const Real gh = g[k * cells + p] * gv[k];
          gx[k * cells + p] += rstd[p] * (gh - mean_g - xhat[k * cells + p] * mean_gh);
        }
      }
    }
  });
}

template <typename Real>
Var<Real> conv2d(Var<Real> x, Var<Real> w, Var<Real> b, std::size_t stride, std::size_t padding) {
  Tape<Real>& t = same_tape(x, w, "conv2d");
  same_tape(x, b, "conv2d");
  const Tensor<Real>& xv = x.value();
  const Tensor<Real>& wv = w.value();
  require_rank(xv, 3, "conv2d", "input");
  require_rank(wv, 4, "conv2d", "weight");
  const std::size_t cin = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const std::size_t cout = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != cin || wv.dim(3) != k || b.value().size() != cout) {
    throw ShapeError("conv2d: input " + shape_str(xv.shape()) + " with weight " +
                     shape_str(wv.shape()) + " and bias " + shape_str(b.value().shape()));
  }
  if (stride == 0 || h + 2 * padding < k || wd + 2 * padding < k) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " does not fit input " +
                     shape_str(xv.shape()));
  }
  const std::size_t oh = (h + 2 * padding - k) / stride + 1;
  const std::size_t ow = (wd + 2 * padding - k) / stride + 1;
  Tensor<Real> y({cout, oh, ow});

  // Visits every (output cell, input cell) pair touched by one kernel tap.
  auto for_each_tap = [=](std::size_t ky, std::size_t kx, auto&& fn) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(padding);
      if (iy < 0 || iy >= std::ptrdiff_t(h)) continue;
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(padding);
        if (ix < 0 || ix >= std::ptrdiff_t(wd)) continue;
        fn(oy * ow + ox, std::size_t(iy) * wd + std::size_t(ix));
      }
    }
  };

  const Real* bv = b.value().ptr();
  for (std::size_t o = 0; o < cout; ++o) {
    Real* yo = y.ptr() + o * oh * ow;
    std::fill(yo, yo + oh * ow, bv[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const Real* xc = xv.ptr() + c * h * wd;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const Real wt = wv[((o * cin + c) * k + ky) * k + kx];
          for_each_tap(ky, kx, [&](std::size_t out_i, std::size_t in_i) { yo[out_i] += wt * xc[in_i]; });
        }
      }
    }
  }

  const bool needs = x.requires_grad() || w.requires_grad() || b.requires_grad();
  return t.push(std::move(y), needs, [=](Tape<Real>& tp, const Tensor<Real>& g) {
    const Tensor<Real>& xv = x.value();
    const Tensor<Real>& wv = w.value();
    Real* gx = x.requires_grad() ? tp.grad(x.id).ptr() : nullptr;
    Real* gw = w.requires_grad() ? tp.grad(w.id).ptr() : nullptr;
    if (b.requires_grad()) {
      Real* gb = tp.grad(b.id).ptr();
      for (std::size_t o = 0; o < cout; ++o) {
        for (std::size_t i = 0; i < oh * ow; ++i) gb[o] += g[o * oh * ow + i];
      }
    }
    if (!gx && !gw) return;
    for (std::size_t o = 0; o < cout; ++o) {
      const Real* go = g.ptr() + o * oh * ow;
      for (std::size_t c = 0; c < cin; ++c) {
        const Real* xc = xv.ptr() + c * h * wd;
        Real* gxc = gx ? gx + c * h * wd : nullptr;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t widx = ((o * cin + c) * k + ky) * k + kx;
            const Real wt = wv[widx];
            Real acc = 0;
            for_each_tap(ky, kx, [&](std::size_t out_i, std::size_t in_i) {
              if (gxc) gxc[in_i] += wt * go[out_i];
              acc += xc[in_i] * go[out_i];
            });
            if (gw) gw[widx] += acc;
          }
        }
      }
    }
  });
}

template <typename Real>
Var<Real> reshape(Var<Real> x, Shape shape) {
  Tensor<Real> y = x.value().reshaped(std::move(shape));
  return x.tape->push(std::move(y), x.requires_grad(), [x](Tape<Real>& tp, const Tensor<Real>& g) {
    axpy(g.size(), Real(1), g.ptr(), tp.grad(x.id).ptr());
  });
}

template <typename Real>
Var<Real> transpose(Var<Real> x) {
  const Tensor<Real>& xv = x.value();
  require_rank(xv, 2, "transpose", "input");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor<Real> y({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = xv[i * n + j];
  return x.tape->push(std::move(y), x.requires_grad(), [x, m, n](Tape<Real>& tp, const Tensor<Real>& g) {
    Tensor<Real>& gx = tp.grad(x.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
  });
}

template <typename Real>
Var<Real> slice_rows(Var<Real> x, std::size_t start, std::size_t count) {
  const Tensor<Real>& xv = x.value();
  require_rank(xv, 2, "slice_rows", "input");
  const std::size_t n = xv.dim(1);
  if (count == 0 || start + count > xv.dim(0)) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of " + shape_str(xv.shape()));
  }
  std::vector<Real> data(xv.ptr() + start * n, xv.ptr() + (start + count) * n);
  Tensor<Real> y({count, n}, std::move(data));
  return x.tape->push(std::move(y), x.requires_grad(), [x, start, n](Tape<Real>& tp, const Tensor<Real>& g) {
    axpy(g.size(), Real(1), g.ptr(), tp.grad(x.id).ptr() + start * n);
  });
}

template <typename Real>
Var<Real> slice_cols(Var<Real> x, std::size_t start, std::size_t count) {
  const Tensor<Real>& xv = x.value();
  require_rank(xv, 2, "slice_cols", "input");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (count == 0 || start + count > n) {
    throw ShapeError("slice_cols: cols [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of " + shape_str(xv.shape()));
  }
  Tensor<Real> y({m, count});
  for (std::size_t i = 0; i < m; ++i)
    std::copy(xv.ptr() + i * n + start, xv.ptr() + i * n + start + count, y.ptr() + i * count);
  return x.tape->push(std::move(y), x.requires_grad(), [x, start, count, m, n](Tape<Real>& tp, const Tensor<Real>& g) {
    Real* gx = tp.grad(x.id).ptr();
    for (std::size_t i = 0; i < m; ++i) axpy(count, Real(1), g.ptr() + i * count, gx + i * n + start);
  });
}

template <typename Real>
Var<Real> concat_rows(std::span<const Var<Real>> pieces) {
  if (pieces.empty()) throw ShapeError("concat_rows: no pieces");
  Tape<Real>* t = pieces.front().tape;
  const std::size_t width = pieces.front().value().cols();
  std::size_t rows = 0;
  bool needs = false;
  for (const auto& p : pieces) {
    same_tape(pieces.front(), p, "concat_rows");
    const Tensor<Real>& v = p.value();
    if (v.rank() > 2 || v.cols() != width) {
      throw ShapeError("concat_rows: piece " + shape_str(v.shape()) + " does not have width " +
                       std::to_string(width));
    }
    rows += v.rows();
    needs = needs || p.requires_grad();
  }
  Tensor<Real> y({rows, width});
  std::size_t offset = 0;
  for (const auto& p : pieces) {
    const Tensor<Real>& v = p.value();
    std::copy(v.ptr(), v.ptr() + v.size(), y.ptr() + offset);
    offset += v.size();
  }
  std::vector<Var<Real>> inputs(pieces.begin(), pieces.end());
  return t->push(std::move(y), needs, [inputs = std::move(inputs)](Tape<Real>& tp, const Tensor<Real>& g) {
    std::size_t offset = 0;
    for (const auto& p : inputs) {
      const std::size_t n = p.value().size();
      if (p.requires_grad()) axpy(n, Real(1), g.ptr() + offset, tp.grad(p.id).ptr());
      offset += n;
    }
  });
}

template <typename Real>
Var<Real> concat_cols(std::span<const Var<Real>> pieces) {
  if (pieces.empty()) throw ShapeError("concat_cols: no pieces");
  Tape<Real>* t = pieces.front().tape;
  const std::size_t m = pieces.front().value().rows();
  std::size_t width = 0;
  bool needs = false;
  for (const auto& p : pieces) {
    same_tape(pieces.front(), p, "concat_cols");
    const Tensor<Real>& v = p.value();
    if (v.rank() != 2 || v.dim(0) != m) {
      throw ShapeError("concat_cols: piece " + shape_str(v.shape()) + " does not have " +
                       std::to_string(m) + " rows");
    }
    width += v.dim(1);
    needs = needs || p.requires_grad();
  }
  Tensor<Real> y({m, width});
  std::size_t col = 0;
  for (const auto& p : pieces) {
    const Tensor<Real>& v = p.value();
    const std::size_t n = v.dim(1);
    for (std::size_t i = 0; i < m; ++i) std::copy(v.ptr() + i * n, v.ptr() + (i + 1) * n, y.ptr() + i * width + col);
    col += n;
  }
  std::vector<Var<Real>> inputs(pieces.begin(), pieces.end());
  return t->push(std::move(y), needs, [inputs = std::move(inputs), m, width](Tape<Real>& tp, const Tensor<Real>& g) {
    std::size_t col = 0;
    for (const auto& p : inputs) {
      const std::size_t n = p.value().dim(1);
      if (p.requires_grad()) {
        Real* gp = tp.grad(p.id).ptr();
        for (std::size_t i = 0; i < m; ++i) axpy(n, Real(1), g.ptr() + i * width + col, gp + i * n);
      }
      col += n;
    }
  });
}

template <typename Real>
Var<Real> gather_rows(Var<Real> table, std::span<const std::int32_t> ids) {
  const Tensor<Real>& tv = table.value();
  require_rank(tv, 2, "gather_rows", "table");
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  const std::size_t v = tv.dim(0), d = tv.dim(1);
  Tensor<Real> y({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || std::size_t(ids[i]) >= v) {
      throw ShapeError("gather_rows: id " + std::to_string(ids[i]) + " outside table " + shape_str(tv.shape()));
    }
    std::copy(tv.ptr() + ids[i] * d, tv.ptr() + (ids[i] + 1) * d, y.ptr() + i * d);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return table.tape->push(std::move(y), table.requires_grad(),
                          [table, d, saved = std::move(saved)](Tape<Real>& tp, const Tensor<Real>& g) {
    Real* gt = tp.grad(table.id).ptr();
    for (std::size_t i = 0; i < saved.size(); ++i) axpy(d, Real(1), g.ptr() + i * d, gt + saved[i] * d);
  });
}

template <typename Real>
Var<Real> weighted_spatial_mean(Var<Real> features, const Tensor<Real>& weights) {
  const Tensor<Real>& fv = features.value();
  require_rank(fv, 3, "weighted_spatial_mean", "features");
  const std::size_t c = fv.dim(0), cells = fv.dim(1) * fv.dim(2);
  if (weights.rank() != 2 || weights.dim(0) != fv.dim(1) || weights.dim(1) != fv.dim(2)) {
    throw ShapeError("weighted_spatial_mean: weights " + shape_str(weights.shape()) +
                     " do not match features " + shape_str(fv.shape()));
  }
  Real total = 0;
  for (Real w : weights.data()) total += w;
  if (!(total > Real(0))) throw PreconditionError("weighted_spatial_mean: weights sum to zero");
  Tensor<Real> norm = weights;
  for (Real& w : norm.data()) w /= total;
  Tensor<Real> y({c});
  for (std::size_t k = 0; k < c; ++k) y[k] = dot(cells, norm.ptr(), fv.ptr() + k * cells);
  return features.tape->push(std::move(y), features.requires_grad(),
                             [features, c, cells, norm = std::move(norm)](Tape<Real>& tp, const Tensor<Real>& g) {
    Real* gf = tp.grad(features.id).ptr();
    for (std::size_t k = 0; k < c; ++k) axpy(cells, g[k], norm.ptr(), gf + k * cells);
  });
}

template <typename Real>
Var<Real> sum(Var<Real> x) {
  Real s = 0;
  for (Real v : x.value().data()) s += v;
  return x.tape->push(Tensor<Real>::scalar(s), x.requires_grad(), [x](Tape<Real>& tp, const Tensor<Real>& g) {
    Tensor<Real>& gx = tp.grad(x.id);
    for (Real& v : gx.data()) v += g[0];
  });
}

template <typename Real>
Var<Real> dot_constant(Var<Real> x, const Tensor<Real>& w) {
  if (x.value().size() != w.size()) {
    throw ShapeError("dot_constant: " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  }
  const Real s = dot(w.size(), x.value().ptr(), w.ptr());
  return x.tape->push(Tensor<Real>::scalar(s), x.requires_grad(), [x, w](Tape<Real>& tp, const Tensor<Real>& g) {
    axpy(w.size(), g[0], w.ptr(), tp.grad(x.id).ptr());
  });
}

template <typename Real>
Var<Real> cross_entropy(Var<Real> logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> loss_mask) {
  const Tensor<Real>& lv = logits.value();
  require_rank(lv, 2, "cross_entropy", "logits");
  const std::size_t rows = lv.dim(0), v = lv.dim(1);
  if (targets.size() != rows || loss_mask.size() != rows) {
    throw ShapeError("cross_entropy: logits " + shape_str(lv.shape()) + " with " +
                     std::to_string(targets.size()) + " targets and " +
                     std::to_string(loss_mask.size()) + " mask entries");
  }
  std::vector<std::size_t> active;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!loss_mask[r]) continue;
    if (targets[r] < 0 || std::size_t(targets[r]) >= v) {
      throw ShapeError("cross_entropy: target " + std::to_string(targets[r]) + " at position " +
                       std::to_string(r) + " outside vocabulary of " + std::to_string(v));
    }
    active.push_back(r);
  }
  if (active.empty()) throw EmptyLossError("cross_entropy: loss mask selects no positions");

  const Real inv = Real(1) / Real(active.size());
  Real loss = 0;
  Tensor<Real> probs({active.size(), v});
  for (std::size_t a = 0; a < active.size(); ++a) {
    const std::size_t r = active[a];
    const Real* lr = lv.ptr() + r * v;
    Real* pr = probs.ptr() + a * v;
    const Real mx = *std::max_element(lr, lr + v);
    Real total = 0;
    for (std::size_t j = 0; j < v; ++j) {
      pr[j] = std::exp(lr[j] - mx);
      total += pr[j];
    }
    for (std::size_t j = 0; j < v; ++j) pr[j] /= total;
    loss += (std::log(total) + mx - lr[targets[r]]) * inv;
  }
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return logits.tape->push(
      Tensor<Real>::scalar(loss), logits.requires_grad(),
      [logits, v, inv, active = std::move(active), probs = std::move(probs), tgt = std::move(tgt)](
          Tape<Real>& tp, const Tensor<Real>& g) {
        Real* gl = tp.grad(logits.id).ptr();
        const Real s = g[0] * inv;
        for (std::size_t a = 0; a < active.size(); ++a) {
          const std::size_t r = active[a];
          Real* out = gl + r * v;
          const Real* pr = probs.ptr() + a * v;
          for (std::size_t j = 0; j < v; ++j) out[j] += s * pr[j];
          out[tgt[r]] -= s;
        }
      });
}

#define AQUILA_INSTANTIATE_OPS(Real)                                                              \
  template Tensor<Real> softmax_rows(const Tensor<Real>&);                                        \
  template Var<Real> linear(Var<Real>, Var<Real>, std::optional<Var<Real>>);                     \
  template Var<Real> matmul(Var<Real>, Var<Real>);                                                \
  template Var<Real> matmul_nt(Var<Real>, Var<Real>);                                             \
  template Var<Real> add(Var<Real>, Var<Real>);                                                   \
  template Var<Real> scale(Var<Real>, Real);                                                      \
  template Var<Real> gelu(Var<Real>);                                                             \
  template Var<Real> softmax(Var<Real>);                                                          \
  template Var<Real> causal_softmax(Var<Real>);                                                   \
  template Var<Real> layer_norm(Var<Real>, Var<Real>, Var<Real>, Real);                           \
  template Var<Real> channel_layer_norm(Var<Real>, Var<Real>, Var<Real>, Real);                   \
  template Var<Real> conv2d(Var<Real>, Var<Real>, Var<Real>, std::size_t, std::size_t);           \
  template Var<Real> reshape(Var<Real>, Shape);                                                   \
  template Var<Real> transpose(Var<Real>);                                                        \
  template Var<Real> slice_rows(Var<Real>, std::size_t, std::size_t);                             \
  template Var<Real> slice_cols(Var<Real>, std::size_t, std::size_t);                             \
  template Var<Real> concat_rows(std::span<const Var<Real>>);                                     \
  template Var<Real> concat_cols(std::span<const Var<Real>>);                                     \
  template Var<Real> gather_rows(Var<Real>, std::span<const std::int32_t>);                       \
  template Var<Real> weighted_spatial_mean(Var<Real>, const Tensor<Real>&);                       \
  template Var<Real> sum(Var<Real>);                                                              \
  template Var<Real> dot_constant(Var<Real>, const Tensor<Real>&);                                \
  template Var<Real> cross_entropy(Var<Real>, std::span<const std::int32_t>,                      \
                                   std::span<const std::uint8_t>);

AQUILA_INSTANTIATE_OPS(float)
AQUILA_INSTANTIATE_OPS(double)

#undef AQUILA_INSTANTIATE_OPS

}  // namespace aquila::ops
