#include "inn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>
#include <utility>

#include "inn/errors.hpp"

namespace inn::kernels {

float dot(const float* a, const float* b, std::size_t n) {
  constexpr std::size_t kLanes = 16;
  float acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] += a[i + l] * b[i + l];
  }
  float s = 0.0f;
  for (std::size_t l = 0; l < kLanes; ++l) s += acc[l];
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace inn::kernels

namespace inn::ops {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

// Accumulates `values` into t's gradient when t is tracked.
void accumulate(const Tensor& t, std::span<const float> values) {
  if (!t.requires_grad()) return;
  auto g = t.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += values[i];
}

constexpr std::size_t kDenseBlock = 16;

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, oh, ow;
  int stride, pad;
  std::size_t k_dim() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

// Output columns ox whose input column ox*stride - pad + j lies inside the image.
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t j) {
  const long s = g.stride;
  const long off = static_cast<long>(j) - g.pad;
  const long lo = std::min<long>(static_cast<long>(g.ow), off >= 0 ? 0 : (-off + s - 1) / s);
  const long hi = std::min<long>(static_cast<long>(g.ow), (static_cast<long>(g.w) - off + s - 1) / s);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
}

// col[(ci*kh + i)*kw + j][oy*ow + ox] = in[ci][oy*s - p + i][ox*s - p + j]
void im2col(const ConvGeometry& g, const float* in, float* col) {
  const std::size_t positions = g.positions();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        float* row = col + ((ci * g.kh + i) * g.kw + j) * positions;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long y = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(i);
          float* dst = row + oy * g.ow;
          if (y < 0 || y >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0f);
            continue;
          }
          const float* src = in + (ci * g.h + static_cast<std::size_t>(y)) * g.w;
          const auto [lo, hi] = valid_columns(g, j);
          std::fill(dst, dst + lo, 0.0f);
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride - g.pad + j];
          std::fill(dst + hi, dst + g.ow, 0.0f);
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const float* col, float* in) {
  const std::size_t positions = g.positions();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const float* row = col + ((ci * g.kh + i) * g.kw + j) * positions;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long y = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(i);
          if (y < 0 || y >= static_cast<long>(g.h)) continue;
          float* dst = in + (ci * g.h + static_cast<std::size_t>(y)) * g.w;
          const float* src = row + oy * g.ow;
          const auto [lo, hi] = valid_columns(g, j);
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride - g.pad + j] += src[ox];
        }
      }
    }
  }
}

using vec8 = float __attribute__((vector_size(32)));

using vec8u = float __attribute__((vector_size(32), aligned(4), may_alias));

inline vec8 load8(const float* p) { return *reinterpret_cast<const vec8u*>(p); }
inline void store8(float* p, vec8 v) { *reinterpret_cast<vec8u*>(p) = v; }

constexpr std::size_t kRows = 4;
constexpr std::size_t kVecs = 3;
constexpr std::size_t kCols = 8 * kVecs;

// out[r][p] += sum_k a(r,k) * b[k][p], k ascending for every element; the
// register tiling leaves the per-element accumulation order unchanged.
template <typename AAt>
void gemm_tile_loop(AAt a_at, const float* b, float* out, std::size_t rows, std::size_t inner,
                    std::size_t cols) {
  const std::size_t row_end = rows - rows % kRows;
  const std::size_t col_end = cols - cols % kCols;
  // Column panels outermost so the inner x kCols slice of b stays in cache
  // while every row tile passes over it.
  for (std::size_t p0 = 0; p0 < col_end; p0 += kCols) {
    for (std::size_t r0 = 0; r0 < row_end; r0 += kRows) {
      vec8 acc[kRows][kVecs];
      for (std::size_t r = 0; r < kRows; ++r) {
        for (std::size_t v = 0; v < kVecs; ++v) acc[r][v] = load8(out + (r0 + r) * cols + p0 + 8 * v);
      }
      for (std::size_t k = 0; k < inner; ++k) {
        const float* bk = b + k * cols + p0;
        vec8 bv[kVecs];
        for (std::size_t v = 0; v < kVecs; ++v) bv[v] = load8(bk + 8 * v);
        for (std::size_t r = 0; r < kRows; ++r) {
          const float w = a_at(r0 + r, k);
          for (std::size_t v = 0; v < kVecs; ++v) acc[r][v] += w * bv[v];
        }
      }
      for (std::size_t r = 0; r < kRows; ++r) {
        for (std::size_t v = 0; v < kVecs; ++v) store8(out + (r0 + r) * cols + p0 + 8 * v, acc[r][v]);
      }
    }
  }
  if (col_end < cols) {
    for (std::size_t r = 0; r < row_end; ++r) {
      for (std::size_t k = 0; k < inner; ++k) {
        const float w = a_at(r, k);
        for (std::size_t p = col_end; p < cols; ++p) out[r * cols + p] += w * b[k * cols + p];
      }
    }
  }
  for (std::size_t r = row_end; r < rows; ++r) {
    for (std::size_t k = 0; k < inner; ++k) kernels::axpy(a_at(r, k), b + k * cols, out + r * cols, cols);
  }
}

// out[f][p] += sum_k w[f][k] * col[k][p]
void gemm_wcol(const float* w, const float* col, float* out, std::size_t filters, std::size_t k_dim,
               std::size_t positions) {
  gemm_tile_loop([w, k_dim](std::size_t f, std::size_t k) { return w[f * k_dim + k]; }, col, out, filters, k_dim,
                 positions);
}

// gcol[k][p] = sum_f w[f][k] * gout[f][p]
void gemm_wt_gout(const float* w, const float* gout, float* gcol, std::size_t filters, std::size_t k_dim,
                  std::size_t positions) {
  std::fill(gcol, gcol + k_dim * positions, 0.0f);
  gemm_tile_loop([w, k_dim](std::size_t k, std::size_t f) { return w[f * k_dim + k]; }, gout, gcol, k_dim, filters,
                 positions);
}

inline float hsum(vec8 v) {
  float s = 0.0f;
  for (int l = 0; l < 8; ++l) s += v[l];
  return s;
}

constexpr std::size_t kTileF = 4;
constexpr std::size_t kTileK = 2;

// gw[f][k] += sum_p gout[f][p] * col[k][p], as 8-lane partial sums over p
// followed by a fixed-order lane reduction and the scalar tail.
void gemm_gout_colt(const float* gout, const float* col, float* gw, std::size_t filters, std::size_t k_dim,
                    std::size_t positions) {
  const std::size_t vec_end = positions - positions % 8;
  auto one = [&](std::size_t f, std::size_t k) {
    const float* a = gout + f * positions;
    const float* b = col + k * positions;
    vec8 acc = {};
    for (std::size_t p = 0; p < vec_end; p += 8) acc += load8(a + p) * load8(b + p);
    float s = hsum(acc);
    for (std::size_t p = vec_end; p < positions; ++p) s += a[p] * b[p];
    gw[f * k_dim + k] += s;
  };
  std::size_t f0 = 0;
  for (; f0 + kTileF <= filters; f0 += kTileF) {
    std::size_t k0 = 0;
    for (; k0 + kTileK <= k_dim; k0 += kTileK) {
      vec8 acc[kTileF][kTileK] = {};
      for (std::size_t p = 0; p < vec_end; p += 8) {
        vec8 bv[kTileK];
        for (std::size_t j = 0; j < kTileK; ++j) bv[j] = load8(col + (k0 + j) * positions + p);
        for (std::size_t i = 0; i < kTileF; ++i) {
          const vec8 av = load8(gout + (f0 + i) * positions + p);
          for (std::size_t j = 0; j < kTileK; ++j) acc[i][j] += av * bv[j];
        }
      }
      for (std::size_t i = 0; i < kTileF; ++i) {
        for (std::size_t j = 0; j < kTileK; ++j) {
          const float* a = gout + (f0 + i) * positions;
          const float* b = col + (k0 + j) * positions;
          float s = hsum(acc[i][j]);
          for (std::size_t p = vec_end; p < positions; ++p) s += a[p] * b[p];
          gw[(f0 + i) * k_dim + k0 + j] += s;
        }
      }
    }
    for (; k0 < k_dim; ++k0) {
      for (std::size_t i = 0; i < kTileF; ++i) one(f0 + i, k0);
    }
  }
  for (; f0 < filters; ++f0) {
    for (std::size_t k = 0; k < k_dim; ++k) one(f0, k);
  }
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  check_finite(o, "add");
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a, b](std::span<const float> g) {
      accumulate(a, g);
      accumulate(b, g);
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  check_finite(o, "mul");
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a, b](std::span<const float> g) {
      const std::size_t n = g.size();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        auto yb = b.data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * yb[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        auto xa = a.data();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * xa[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, float factor) {
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  check_finite(o, "scale");
  if (tape.tracks({&a})) {
    tape.record(out, [a, factor](std::span<const float> g) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& a) {
  double s = 0.0;
  for (float v : a.data()) s += v;
  Tensor out = Tensor::scalar(static_cast<float>(s));
  check_finite(out.data(), "sum");
  if (tape.tracks({&a})) {
    tape.record(out, [a](std::span<const float> g) {
      auto ga = a.grad_buffer();
      for (auto& v : ga) v += g[0];
    });
  }
  return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] > 0.0f ? in[i] : 0.0f;
  check_finite(o, "relu");
  if (tape.tracks({&x})) {
    tape.record(out, [x](std::span<const float> g) {
      auto gx = x.grad_buffer();
      auto in = x.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (in[i] > 0.0f) gx[i] += g[i];
      }
    });
  }
  return out;
}

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  require_rank(bias, 1, "conv2d", "bias");
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1, got " + std::to_string(stride));
  if (padding < 0) throw DimensionError("conv2d: padding must be >= 0, got " + std::to_string(padding));
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.f = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (kernel.dim(1) != g.c) {
    throw DimensionError("conv2d: input channel axis (1) is " + std::to_string(g.c) + " but kernel channel axis (1) is " +
                         std::to_string(kernel.dim(1)));
  }
  if (bias.dim(0) != g.f) {
    throw DimensionError("conv2d: bias axis 0 is " + std::to_string(bias.dim(0)) + " but kernel filter axis (0) is " +
                         std::to_string(g.f));
  }
  if (g.kh > g.h + 2 * static_cast<std::size_t>(padding)) {
    throw DimensionError("conv2d: kernel height axis (2) " + std::to_string(g.kh) + " exceeds padded input height axis (2)");
  }
  if (g.kw > g.w + 2 * static_cast<std::size_t>(padding)) {
    throw DimensionError("conv2d: kernel width axis (3) " + std::to_string(g.kw) + " exceeds padded input width axis (3)");
  }
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t k_dim = g.k_dim();
  const std::size_t positions = g.positions();
  Tensor out({g.n, g.f, g.oh, g.ow});
  std::vector<float> col(k_dim * positions);
  const float* in = input.data().data();
  const float* w = kernel.data().data();
  const float* b = bias.data().data();
  float* o = out.data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(g, in + n * g.c * g.h * g.w, col.data());
    float* on = o + n * g.f * positions;
    for (std::size_t f = 0; f < g.f; ++f) std::fill(on + f * positions, on + (f + 1) * positions, b[f]);
    gemm_wcol(w, col.data(), on, g.f, k_dim, positions);
  }
  check_finite(out.data(), "conv2d");

  if (tape.tracks({&input, &kernel, &bias})) {
    tape.record(out, [g, input, kernel, bias](std::span<const float> grad_out) {
      const std::size_t k_dim = g.k_dim();
      const std::size_t positions = g.positions();
      std::vector<float> col(k_dim * positions);
      std::vector<float> gcol(input.requires_grad() ? k_dim * positions : 0);
      const float* in = input.data().data();
      const float* w = kernel.data().data();
      float* gw = kernel.requires_grad() ? kernel.grad_buffer().data() : nullptr;
      float* gb = bias.requires_grad() ? bias.grad_buffer().data() : nullptr;
      float* gin = input.requires_grad() ? input.grad_buffer().data() : nullptr;
      for (std::size_t n = 0; n < g.n; ++n) {
        const float* gout = grad_out.data() + n * g.f * positions;
        if (gb) {
          for (std::size_t f = 0; f < g.f; ++f) {
            float s = 0.0f;
            for (std::size_t p = 0; p < positions; ++p) s += gout[f * positions + p];
            gb[f] += s;
          }
        }
        if (gw) {
          im2col(g, in + n * g.c * g.h * g.w, col.data());
          gemm_gout_colt(gout, col.data(), gw, g.f, k_dim, positions);
        }
        if (gin) {
          gemm_wt_gout(w, gout, gcol.data(), g.f, k_dim, positions);
          col2im(g, gcol.data(), gin + n * g.c * g.h * g.w);
        }
      }
    });
  }
  return out;
}

Tensor maxpool2d(Tape& tape, const Tensor& input, int window) {
  require_rank(input, 4, "maxpool2d", "input");
  if (window < 1) throw DimensionError("maxpool2d: window must be >= 1");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto win = static_cast<std::size_t>(window);
  if (h % win != 0) {
    throw DimensionError("maxpool2d: height axis (2) of size " + std::to_string(h) + " not divisible by window " +
                         std::to_string(win));
  }
  if (w % win != 0) {
    throw DimensionError("maxpool2d: width axis (3) of size " + std::to_string(w) + " not divisible by window " +
                         std::to_string(win));
  }
  const std::size_t oh = h / win, ow = w / win;
  Tensor out({n, c, oh, ow});
  std::vector<std::size_t> argmax(out.numel());
  const float* in = input.data().data();
  float* o = out.data().data();
  std::size_t idx = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const float* src = in + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++idx) {
        std::size_t best = (oy * win) * w + ox * win;
        float best_v = src[best];
        for (std::size_t i = 0; i < win; ++i) {
          for (std::size_t j = 0; j < win; ++j) {
            const std::size_t pos = (oy * win + i) * w + ox * win + j;
            if (src[pos] > best_v) {
              best_v = src[pos];
              best = pos;
            }
          }
        }
        o[idx] = best_v;
        argmax[idx] = plane * h * w + best;
      }
    }
  }
  check_finite(out.data(), "maxpool2d");
  if (tape.tracks({&input})) {
    tape.record(out, [input, argmax = std::move(argmax)](std::span<const float> g) {
      auto gin = input.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gin[argmax[i]] += g[i];
    });
  }
  return out;
}

Tensor flatten(Tape& tape, const Tensor& input) {
  if (input.rank() < 2) throw DimensionError("flatten: input must have rank >= 2, got " + shape_str(input.shape()));
  const std::size_t n = input.dim(0);
  Tensor out({n, input.numel() / n});
  std::copy(input.data().begin(), input.data().end(), out.data().begin());
  if (tape.tracks({&input})) {
    tape.record(out, [input](std::span<const float> g) { accumulate(input, g); });
  }
  return out;
}

Tensor dense(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "dense", "input");
  require_rank(weight, 2, "dense", "weight");
  require_rank(bias, 1, "dense", "bias");
  const std::size_t n = input.dim(0), d = input.dim(1), m = weight.dim(1);
  if (weight.dim(0) != d) {
    throw DimensionError("dense: input axis 1 is " + std::to_string(d) + " but weight axis 0 is " +
                         std::to_string(weight.dim(0)));
  }
  if (bias.dim(0) != m) {
    throw DimensionError("dense: bias axis 0 is " + std::to_string(bias.dim(0)) + " but weight axis 1 is " +
                         std::to_string(m));
  }
  Tensor out({n, m});
  const float* x = input.data().data();
  const float* w = weight.data().data();
  const float* b = bias.data().data();
  float* o = out.data().data();
  // Rows are processed in blocks so each weight row is read once per block;
  // every output element still accumulates k in ascending order.
  for (std::size_t i = 0; i < n; ++i) std::copy(b, b + m, o + i * m);
  for (std::size_t i0 = 0; i0 < n; i0 += kDenseBlock) {
    const std::size_t i1 = std::min(n, i0 + kDenseBlock);
    for (std::size_t k = 0; k < d; ++k) {
      for (std::size_t i = i0; i < i1; ++i) kernels::axpy(x[i * d + k], w + k * m, o + i * m, m);
    }
  }
  check_finite(out.data(), "dense");
  if (tape.tracks({&input, &weight, &bias})) {
    tape.record(out, [input, weight, bias, n, d, m](std::span<const float> g) {
      const float* x = input.data().data();
      const float* w = weight.data().data();
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) kernels::axpy(1.0f, g.data() + i * m, gb.data(), m);
      }
      if (weight.requires_grad()) {
        float* gw = weight.grad_buffer().data();
        for (std::size_t i0 = 0; i0 < n; i0 += kDenseBlock) {
          const std::size_t i1 = std::min(n, i0 + kDenseBlock);
          for (std::size_t k = 0; k < d; ++k) {
            for (std::size_t i = i0; i < i1; ++i) kernels::axpy(x[i * d + k], g.data() + i * m, gw + k * m, m);
          }
        }
      }
      if (input.requires_grad()) {
        float* gx = input.grad_buffer().data();
        for (std::size_t i0 = 0; i0 < n; i0 += kDenseBlock) {
          const std::size_t i1 = std::min(n, i0 + kDenseBlock);
          for (std::size_t k = 0; k < d; ++k) {
            for (std::size_t i = i0; i < i1; ++i) gx[i * d + k] += kernels::dot(w + k * m, g.data() + i * m, m);
          }
        }
      }
    });
  }
  return out;
}

namespace {

float log_sum_exp(const float* z, std::size_t n) {
  float mx = -std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, z[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(z[i] - mx);
  return static_cast<float>(static_cast<double>(mx) + std::log(s));
}

void check_labels(const Tensor& logits, std::span<const int> labels, std::size_t classes, const char* op) {
  require_rank(logits, 2, op, "logits");
  if (labels.size() != logits.dim(0)) {
    throw LabelError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(logits.dim(0)));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw LabelError(std::string(op) + ": label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                       " outside [0," + std::to_string(classes) + ")");
    }
  }
}

}  // namespace

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels, Reduction reduction) {
  const std::size_t classes = logits.rank() == 2 ? logits.dim(1) : 0;
  check_labels(logits, labels, classes, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0);
  const float* z = logits.data().data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += log_sum_exp(z + i * classes, classes) - z[i * classes + labels[i]];
  const float divisor = reduction == Reduction::mean ? static_cast<float>(n) : 1.0f;
  Tensor out = Tensor::scalar(static_cast<float>(total / divisor));
  check_finite(out.data(), "softmax_cross_entropy");
  if (tape.tracks({&logits})) {
    std::vector<int> saved(labels.begin(), labels.end());
    tape.record(out, [logits, saved = std::move(saved), n, classes, divisor](std::span<const float> g) {
      const float* z = logits.data().data();
      float* gz = logits.grad_buffer().data();
      const float coeff = g[0] / divisor;
      for (std::size_t i = 0; i < n; ++i) {
        const float* row = z + i * classes;
        const float lse = log_sum_exp(row, classes);
        for (std::size_t j = 0; j < classes; ++j) {
          float p = std::exp(row[j] - lse);
          if (static_cast<int>(j) == saved[i]) p -= 1.0f;
          gz[i * classes + j] += coeff * p;
        }
      }
    });
  }
  return out;
}

Tensor marginal_cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> base_labels, int group,
                              Reduction reduction) {
  if (group < 1) throw LabelError("marginal_cross_entropy: group size must be >= 1");
  require_rank(logits, 2, "marginal_cross_entropy", "logits");
  const std::size_t classes = logits.dim(1);
  const auto k = static_cast<std::size_t>(group);
  if (classes % k != 0) {
    throw DimensionError("marginal_cross_entropy: logit axis 1 of size " + std::to_string(classes) +
                         " is not a multiple of group " + std::to_string(k));
  }
  check_labels(logits, base_labels, classes / k, "marginal_cross_entropy");
  const std::size_t n = logits.dim(0);
  const float* z = logits.data().data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = z + i * classes;
    total += log_sum_exp(row, classes) - log_sum_exp(row + base_labels[i] * k, k);
  }
  const float divisor = reduction == Reduction::mean ? static_cast<float>(n) : 1.0f;
  Tensor out = Tensor::scalar(static_cast<float>(total / divisor));
  check_finite(out.data(), "marginal_cross_entropy");
  if (tape.tracks({&logits})) {
    std::vector<int> saved(base_labels.begin(), base_labels.end());
    tape.record(out, [logits, saved = std::move(saved), n, classes, k, divisor](std::span<const float> g) {
      const float* z = logits.data().data();
      float* gz = logits.grad_buffer().data();
      const float coeff = g[0] / divisor;
      for (std::size_t i = 0; i < n; ++i) {
        const float* row = z + i * classes;
        const float lse = log_sum_exp(row, classes);
        const std::size_t first = static_cast<std::size_t>(saved[i]) * k;
        const float lse_group = log_sum_exp(row + first, k);
        for (std::size_t j = 0; j < classes; ++j) {
          float v = std::exp(row[j] - lse);
          if (j >= first && j < first + k) v -= std::exp(row[j] - lse_group);
          gz[i * classes + j] += coeff * v;
        }
      }
    });
  }
  return out;
}

std::vector<float> cross_entropy_rows(const Tensor& logits, std::span<const int> labels) {
  const std::size_t classes = logits.rank() == 2 ? logits.dim(1) : 0;
  check_labels(logits, labels, classes, "cross_entropy_rows");
  std::vector<float> out(labels.size());
  const float* z = logits.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = log_sum_exp(z + i * classes, classes) - z[i * classes + labels[i]];
  }
  return out;
}

std::vector<float> marginal_cross_entropy_rows(const Tensor& logits, std::span<const int> base_labels, int group) {
  require_rank(logits, 2, "marginal_cross_entropy_rows", "logits");
  if (group < 1 || logits.dim(1) % static_cast<std::size_t>(group) != 0) {
    throw DimensionError("marginal_cross_entropy_rows: group does not divide the logit width");
  }
  const std::size_t classes = logits.dim(1), k = static_cast<std::size_t>(group);
  check_labels(logits, base_labels, classes / k, "marginal_cross_entropy_rows");
  std::vector<float> out(base_labels.size());
  const float* z = logits.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float* row = z + i * classes;
    out[i] = log_sum_exp(row, classes) - log_sum_exp(row + base_labels[i] * k, k);
  }
  return out;
}

std::vector<float> softmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "softmax_rows", "logits");
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  std::vector<float> probs(n * classes);
  const float* z = logits.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const float lse = log_sum_exp(z + i * classes, classes);
    for (std::size_t j = 0; j < classes; ++j) probs[i * classes + j] = std::exp(z[i * classes + j] - lse);
  }
  return probs;
}

}  // namespace inn::ops
