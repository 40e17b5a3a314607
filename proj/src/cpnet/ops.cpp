#include "cpnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

#include "cpnet/errors.hpp"
#include "cpnet/parallel.hpp"

namespace cpnet {

namespace {

// GCC's loop vectorizer turns the narrow fixed-width kernels below into
// shuffle-heavy code; straight-line (SLP) vectorization of the unrolled inner
// loop is several times faster.
#if defined(__GNUC__) && !defined(__clang__)
#define CPNET_SLP_ONLY __attribute__((optimize("no-tree-loop-vectorize")))
#else
#define CPNET_SLP_ONLY
#endif

void accumulate(Tape& tape, Var target, Tensor&& src) { tape.accumulate(target.id, std::move(src)); }
void accumulate(Tape& tape, Var target, const Tensor& src) { tape.accumulate(target.id, src); }

constexpr std::size_t kRowBlock = 4096;

// Runs body(lo, hi) over [0, rows) in fixed blocks.
template <typename F>
void for_row_blocks(std::size_t rows, F&& body) {
  parallel_for((rows + kRowBlock - 1) / kRowBlock, [&](std::size_t b) {
    body(b * kRowBlock, std::min(rows, (b + 1) * kRowBlock));
  });
}

std::size_t trailing(const Shape& s, std::size_t from) {
  std::size_t n = 1;
  for (std::size_t i = from; i < s.size(); ++i) n *= s[i];
  return n;
}

void same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape) fail_validation(std::string(op) + ": inputs on different tapes");
}

// o[r, :] = (init ? init : 0) + sum_i x[r, i] * m[i, :] for rows [lo, hi), where
// x is [R, a] and m is [a, b]. The inner loop runs over b so it vectorizes; B
// fixes b at compile time for the common narrow widths.
template <std::size_t B>
CPNET_SLP_ONLY void rows_times_matrix(const float* x, std::size_t a, const float* m, std::size_t b, const float* init, float* o,
                       std::size_t lo, std::size_t hi) {
  if constexpr (B == 0) {
    for (std::size_t r = lo; r < hi; ++r) {
      const float* xr = x + r * a;
      float* orow = o + r * b;
      for (std::size_t j = 0; j < b; ++j) orow[j] = init ? init[j] : 0.0f;
      for (std::size_t i = 0; i < a; ++i) {
        const float xi = xr[i];
        const float* mi = m + i * b;
        for (std::size_t j = 0; j < b; ++j) orow[j] += xi * mi[j];
      }
    }
  } else {
    float start[B] = {};
    if (init)
      for (std::size_t j = 0; j < B; ++j) start[j] = init[j];
    for (std::size_t r = lo; r < hi; ++r) {
      const float* xr = x + r * a;
      float acc[B];
      for (std::size_t j = 0; j < B; ++j) acc[j] = start[j];
      for (std::size_t i = 0; i < a; ++i) {
        const float xi = xr[i];
        const float* mi = m + i * B;
        for (std::size_t j = 0; j < B; ++j) acc[j] += xi * mi[j];
      }
      std::copy_n(acc, B, o + r * B);
    }
  }
}

void rows_times_matrix(const float* x, std::size_t a, const float* m, std::size_t b, const float* init, float* o,
                       std::size_t lo, std::size_t hi) {
  switch (b) {
    case 3: return rows_times_matrix<3>(x, a, m, b, init, o, lo, hi);
    case 4: return rows_times_matrix<4>(x, a, m, b, init, o, lo, hi);
    case 8: return rows_times_matrix<8>(x, a, m, b, init, o, lo, hi);
    case 16: return rows_times_matrix<16>(x, a, m, b, init, o, lo, hi);
    default: return rows_times_matrix<0>(x, a, m, b, init, o, lo, hi);
  }
}

void rows_times_matrix(const float* x, std::size_t a, const float* m, std::size_t b, const float* init, float* o,
                       std::size_t rows) {
  for_row_blocks(rows, [&](std::size_t lo, std::size_t hi) { rows_times_matrix(x, a, m, b, init, o, lo, hi); });
}

// acc[j, :] += g[r, j] * x[r, :] over rows [lo, hi); g is [R, a], x is [R, b].
template <std::size_t B>
CPNET_SLP_ONLY void outer_accumulate(const float* g, std::size_t a, const float* x, std::size_t b, float* acc, std::size_t lo,
                      std::size_t hi) {
  const std::size_t w = B == 0 ? b : B;
  for (std::size_t r = lo; r < hi; ++r) {
    const float* gr = g + r * a;
    const float* xr = x + r * w;
    for (std::size_t j = 0; j < a; ++j) {
      const float gj = gr[j];
      float* aj = acc + j * w;
      for (std::size_t i = 0; i < w; ++i) aj[i] += gj * xr[i];
    }
  }
}

void outer_accumulate(const float* g, std::size_t a, const float* x, std::size_t b, float* acc, std::size_t lo,
                      std::size_t hi) {
  switch (b) {
    case 3: return outer_accumulate<3>(g, a, x, b, acc, lo, hi);
    case 4: return outer_accumulate<4>(g, a, x, b, acc, lo, hi);
    case 8: return outer_accumulate<8>(g, a, x, b, acc, lo, hi);
    case 16: return outer_accumulate<16>(g, a, x, b, acc, lo, hi);
    default: return outer_accumulate<0>(g, a, x, b, acc, lo, hi);
  }
}

}  // namespace

BatchNorm::BatchNorm(const std::string& name, std::size_t channels)
    : gamma(name + ".gamma", Tensor({channels}, 1.0f)),
      beta(name + ".beta", Tensor({channels}, 0.0f)),
      running_mean({channels}, 0.0f),
      running_var({channels}, 1.0f) {}

// ---------------------------------------------------------------- conv2d

namespace {

// Transposed patch matrix [Ci*9, HW]: row ci*9 + tap is channel ci shifted by
// the tap offset, zero where the shift leaves the image.
void im2col_t(const float* img, std::size_t Ci, std::size_t H, std::size_t W, float* cols) {
  const std::size_t plane = H * W;
  for (std::size_t ci = 0; ci < Ci; ++ci)
    for (int t = 0; t < 9; ++t) {
      const int dy = t / 3 - 1, dx = t % 3 - 1;
      float* row = cols + (ci * 9 + static_cast<std::size_t>(t)) * plane;
      for (std::size_t y = 0; y < H; ++y) {
        float* dst = row + y * W;
        const auto sy = static_cast<std::ptrdiff_t>(y) + dy;
        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) {
          std::fill(dst, dst + W, 0.0f);
          continue;
        }
        const float* src = img + (ci * H + static_cast<std::size_t>(sy)) * W;
        for (std::size_t x = 0; x < W; ++x) {
          const auto sx = static_cast<std::ptrdiff_t>(x) + dx;
          dst[x] = sx >= 0 && sx < static_cast<std::ptrdiff_t>(W) ? src[sx] : 0.0f;
        }
      }
    }
}

void transpose(const float* src, std::size_t rows, std::size_t cols, float* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// One image of a 3x3 pad-1 convolution with kernel w viewed as [Co, Ci*9].
// cols is scratch of Ci*9*HW floats.
void conv_image(const float* img, std::size_t Ci, std::size_t H, std::size_t W, const float* w, std::size_t Co,
                const float* bias, float* out, float* cols) {
  const std::size_t plane = H * W, Q = Ci * 9;
  im2col_t(img, Ci, H, W, cols);
  for (std::size_t co = 0; co < Co; ++co) {
    float* o = out + co * plane;
    std::fill(o, o + plane, bias ? bias[co] : 0.0f);
    // One pass over the output per input channel, covering all nine taps.
    for (std::size_t ci = 0; ci < Ci; ++ci) {
      const float* k = w + co * Q + ci * 9;
      const float* c0 = cols + ci * 9 * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        float s = 0.0f;
        for (std::size_t t = 0; t < 9; ++t) s += k[t] * c0[t * plane + p];
        o[p] += s;
      }
    }
  }
}

}  // namespace

// Each image is lowered to a shifted-channel matrix [Ci*9, HW] and multiplied
// by the kernel viewed as [Co, Ci*9].
Var conv2d(Var input, Var kernel, Var bias) {
  same_tape(input, kernel, "conv2d");
  same_tape(input, bias, "conv2d");
  const Tensor& x = input.value();
  const Tensor& w = kernel.value();
  const Tensor& b = bias.value();
  require(x.rank() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  require(w.rank() == 4 && w.dim(2) == 3 && w.dim(3) == 3,
          "conv2d: kernel must be [Cout,Cin,3,3], got " + shape_str(w.shape()));
  require(w.dim(1) == x.dim(1), "conv2d: kernel expects " + std::to_string(w.dim(1)) +
                                    " input channels but input has " + std::to_string(x.dim(1)));
  require(b.rank() == 1 && b.dim(0) == w.dim(0), "conv2d: bias must be [Cout]");

  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3), Co = w.dim(0);
  const std::size_t plane = H * W, Q = Ci * 9;
  Tensor out = Tensor::uninitialized({N, Co, H, W});
  parallel_for(N, [&](std::size_t n) {
    std::vector<float> cols(Q * plane);
    conv_image(x.ptr() + n * Ci * plane, Ci, H, W, w.ptr(), Co, b.ptr(), out.ptr() + n * Co * plane, cols.data());
  });

  return input.tape->record(std::move(out), {input, kernel, bias}, [=](Tape& tape, std::size_t self) {
    const Tensor& g = tape.grad(self);
    const Tensor& xv = tape.value(input.id);
    const Tensor& wv = tape.value(kernel.id);
    const bool want_x = tape.requires_grad(input.id);
    const bool want_w = tape.requires_grad(kernel.id) || tape.requires_grad(bias.id);
    Tensor gx;
    // The input gradient is itself a 3x3 convolution of g, with the kernel's
    // channel axes swapped and its taps mirrored.
    std::vector<float> wflip;
    if (want_x) {
      gx = Tensor::uninitialized(xv.shape());
      wflip.resize(Co * 9 * Ci);
      for (std::size_t co = 0; co < Co; ++co)
        for (std::size_t ci = 0; ci < Ci; ++ci)
          for (std::size_t t = 0; t < 9; ++t) wflip[(ci * Co + co) * 9 + (8 - t)] = wv[(co * Ci + ci) * 9 + t];
    }
    // Per-image kernel and bias partials, folded in image order afterwards.
    // Kernel partials are laid out [Ci*9, Co].
    std::vector<float> part_w(want_w ? N * Q * Co : 0), part_b(want_w ? N * Co : 0);
    parallel_for(N, [&](std::size_t n) {
      std::vector<float> cols(plane * std::max(Q, Co * 9)), pix(plane * Co);
      if (want_x)
        conv_image(g.ptr() + n * Co * plane, Co, H, W, wflip.data(), Ci, nullptr, gx.ptr() + n * Ci * plane,
                   cols.data());
      if (want_w) {
        transpose(g.ptr() + n * Co * plane, Co, plane, pix.data());
        im2col_t(xv.ptr() + n * Ci * plane, Ci, H, W, cols.data());
        rows_times_matrix(cols.data(), plane, pix.data(), Co, nullptr, part_w.data() + n * Q * Co, 0, Q);
        float* pb = part_b.data() + n * Co;
        for (std::size_t p = 0; p < plane; ++p)
          for (std::size_t co = 0; co < Co; ++co) pb[co] += pix[p * Co + co];
      }
    });
    if (want_x) accumulate(tape, input, std::move(gx));
    if (want_w) {
      std::vector<double> gw(Q * Co, 0.0), gb(Co, 0.0);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < Q * Co; ++i) gw[i] += part_w[n * Q * Co + i];
        for (std::size_t co = 0; co < Co; ++co) gb[co] += part_b[n * Co + co];
      }
      Tensor gwt(wv.shape()), gbt({Co});
      for (std::size_t q = 0; q < Q; ++q)
        for (std::size_t co = 0; co < Co; ++co) gwt[co * Q + q] = static_cast<float>(gw[q * Co + co]);
      for (std::size_t co = 0; co < Co; ++co) gbt[co] = static_cast<float>(gb[co]);
      accumulate(tape, kernel, std::move(gwt));
      accumulate(tape, bias, std::move(gbt));
    }
  });
}

// ------------------------------------------------------------ batch_norm

namespace {

// Per-channel sums of term(flat index, channel) over an [N, C, S] layout,
// visited in memory order. Partial sums run in float over short stretches and
// are folded into double, so the order (and result) is fixed.
template <typename F>
std::vector<double> channel_sums(std::size_t N, std::size_t C, std::size_t S, F term) {
  constexpr std::size_t kRun = 256;
  std::vector<double> out(C, 0.0);
  if (S == 1) {
    std::vector<float> run(C);
    for (std::size_t lo = 0; lo < N; lo += kRun) {
      std::fill(run.begin(), run.end(), 0.0f);
      const std::size_t hi = std::min(N, lo + kRun);
      for (std::size_t r = lo; r < hi; ++r)
        for (std::size_t c = 0; c < C; ++c) run[c] += term(r * C + c, c);
      for (std::size_t c = 0; c < C; ++c) out[c] += run[c];
    }
    return out;
  }
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * S;
      for (std::size_t lo = 0; lo < S; lo += kRun) {
        const std::size_t hi = std::min(S, lo + kRun);
        float run = 0.0f;
        for (std::size_t i = lo; i < hi; ++i) run += term(base + i, c);
        out[c] += run;
      }
    }
  return out;
}

// x, y = min(x, y), max(x, y) element-wise. GCC will not if-convert the
// scalar form without finite-math flags, hence the intrinsics.
inline void compare_exchange(float* x, float* y, std::size_t n) {
  std::size_t e = 0;
#if defined(__SSE__)
  for (; e + 4 <= n; e += 4) {
    const __m128 u = _mm_loadu_ps(x + e), v = _mm_loadu_ps(y + e);
    _mm_storeu_ps(x + e, _mm_min_ps(u, v));
    _mm_storeu_ps(y + e, _mm_max_ps(u, v));
  }
#endif
  for (; e < n; ++e) {
    const float u = x[e], v = y[e];
    x[e] = u < v ? u : v;  // same operand order as minps/maxps
    y[e] = u > v ? u : v;
  }
}

// Per-channel sums of term(flat index, channel) over a [G, K, C] layout. Each
// group's K values are sorted before they are added, so reordering the rows
// inside a group leaves the sums bitwise unchanged. Groups are handled in
// blocks laid out as [K][block * C] so the sorting network runs on long rows.
template <typename F>
std::vector<double> set_channel_sums(std::size_t G, std::size_t K, std::size_t C, F term) {
  constexpr std::size_t kBlock = 32;
  const std::size_t width = kBlock * C;
  std::vector<double> out(C, 0.0);
  std::vector<float> slots(K * width), total(width);
  for (std::size_t lo = 0; lo < G; lo += kBlock) {
    const std::size_t groups = std::min(G - lo, kBlock), used = groups * C;
    for (std::size_t b = 0; b < groups; ++b)
      for (std::size_t j = 0; j < K; ++j) {
        const std::size_t src = ((lo + b) * K + j) * C;
        float* dst = slots.data() + j * width + b * C;
        for (std::size_t c = 0; c < C; ++c) dst[c] = term(src + c, c);
      }
    for (std::size_t j = 1; j < K; ++j)
      for (std::size_t i = j; i > 0; --i) compare_exchange(slots.data() + (i - 1) * width, slots.data() + i * width, used);
    std::copy_n(slots.data(), used, total.data());
    for (std::size_t j = 1; j < K; ++j) {
      const float* row = slots.data() + j * width;
      for (std::size_t e = 0; e < used; ++e) total[e] += row[e];
    }
    for (std::size_t b = 0; b < groups; ++b)
      for (std::size_t c = 0; c < C; ++c) out[c] += total[b * C + c];
  }
  return out;
}

// Applies f(flat index, channel) to every element of an [N, C, S] layout.
template <typename F>
void for_each_channel(std::size_t N, std::size_t C, std::size_t S, F f) {
  if (S == 1) {
    for (std::size_t r = 0; r < N; ++r)
      for (std::size_t c = 0; c < C; ++c) f(r * C + c, c);
    return;
  }
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) f(base + i, c);
    }
}

}  // namespace

// Serves both conv maps [N,C,H,W] and pair rows [R,C].
namespace {

// Normalizes x viewed as [N, C, S] per channel. With set > 1 (only for S == 1)
// the N rows form groups of `set` whose order does not affect the statistics.
Var batch_norm_impl(Var input, std::size_t N, std::size_t C, std::size_t S, BatchNorm& bn, Var gamma, Var beta,
                    Mode mode, bool update_running, std::size_t set = 1) {
  same_tape(input, gamma, "batch_norm");
  same_tape(input, beta, "batch_norm");
  const Tensor& x = input.value();
  require(gamma.value().numel() == C && beta.value().numel() == C,
          "batch_norm: gamma/beta width " + std::to_string(gamma.value().numel()) + " does not match " +
              std::to_string(C) + " channels");
  const std::size_t population = N * S;
  const float* gv = gamma.value().ptr();
  const float* bv = beta.value().ptr();
  const float* xp = x.ptr();

  std::vector<float> shift(C), inv_std(C);
  if (mode == Mode::Train) {
    require(population >= 2, "batch_norm: train mode needs at least 2 values per channel");
    auto sums = [&](auto term) { return set > 1 ? set_channel_sums(N / set, set, C, term) : channel_sums(N, C, S, term); };
    std::vector<double> mean = sums([&](std::size_t i, std::size_t) { return xp[i]; });
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] /= static_cast<double>(population);
      shift[c] = static_cast<float>(mean[c]);
    }
    std::vector<double> var = sums([&](std::size_t i, std::size_t c) {
      const float d = xp[i] - shift[c];
      return d * d;
    });
    for (std::size_t c = 0; c < C; ++c) {
      var[c] /= static_cast<double>(population);
      inv_std[c] = static_cast<float>(1.0 / std::sqrt(var[c] + kBatchNormEpsilon));
    }
    if (update_running) {
      const double unbias = static_cast<double>(population) / static_cast<double>(population - 1);
      for (std::size_t c = 0; c < C; ++c) {
        bn.running_mean[c] = kBatchNormMomentum * bn.running_mean[c] +
                             (1.0f - kBatchNormMomentum) * static_cast<float>(mean[c]);
        bn.running_var[c] = kBatchNormMomentum * bn.running_var[c] +
                            (1.0f - kBatchNormMomentum) * static_cast<float>(var[c] * unbias);
      }
    }
  } else {
    require(bn.running_mean.numel() == C && bn.running_var.numel() == C, "batch_norm: running stats width mismatch");
    for (std::size_t c = 0; c < C; ++c) {
      shift[c] = bn.running_mean[c];
      inv_std[c] = 1.0f / std::sqrt(bn.running_var[c] + kBatchNormEpsilon);
    }
  }

  Tensor out = Tensor::uninitialized(x.shape());
  float* op = out.ptr();
  for_each_channel(N, C, S,
                   [&](std::size_t i, std::size_t c) { op[i] = gv[c] * ((xp[i] - shift[c]) * inv_std[c]) + bv[c]; });

  const bool train = mode == Mode::Train;
  return input.tape->record(
      std::move(out), {input, gamma, beta},
      [=, shift = std::move(shift), inv_std = std::move(inv_std)](Tape& tape, std::size_t self) {
        const float* gp = tape.grad(self).ptr();
        const float* xv = tape.value(input.id).ptr();
        const float* gam = tape.value(gamma.id).ptr();
        auto xhat = [&](std::size_t i, std::size_t c) { return (xv[i] - shift[c]) * inv_std[c]; };
        const std::vector<double> sum_g = channel_sums(N, C, S, [&](std::size_t i, std::size_t) { return gp[i]; });
        const std::vector<double> sum_gx =
            channel_sums(N, C, S, [&](std::size_t i, std::size_t c) { return gp[i] * xhat(i, c); });
        if (tape.requires_grad(input.id)) {
          Tensor gx = Tensor::uninitialized(tape.value(input.id).shape());
          float* gi = gx.ptr();
          std::vector<float> scale(C), mg(C), mgx(C);
          for (std::size_t c = 0; c < C; ++c) {
            scale[c] = gam[c] * inv_std[c];
            mg[c] = train ? static_cast<float>(sum_g[c] / static_cast<double>(population)) : 0.0f;
            mgx[c] = train ? static_cast<float>(sum_gx[c] / static_cast<double>(population)) : 0.0f;
          }
          // train: dx = gamma*inv_std * (g - mean(g) - xhat * mean(g*xhat))
          // eval:  dx = gamma*inv_std * g
          for_each_channel(N, C, S, [&](std::size_t i, std::size_t c) {
            gi[i] = scale[c] * (gp[i] - mg[c] - xhat(i, c) * mgx[c]);
          });
          accumulate(tape, input, std::move(gx));
        }
        Tensor ggamma({C}), gbeta({C});
        for (std::size_t c = 0; c < C; ++c) {
          ggamma[c] = static_cast<float>(sum_gx[c]);
          gbeta[c] = static_cast<float>(sum_g[c]);
        }
        accumulate(tape, gamma, std::move(ggamma));
        accumulate(tape, beta, std::move(gbeta));
      });
}

}  // namespace

Var batch_norm(Var input, BatchNorm& bn, Var gamma, Var beta, Mode mode, bool update_running) {
  const Shape& s = input.shape();
  require(s.size() >= 2, "batch_norm: input must be [N,C,...], got " + shape_str(s));
  return batch_norm_impl(input, s[0], s[1], trailing(s, 2), bn, gamma, beta, mode, update_running);
}

Var batch_norm_channels_last(Var input, BatchNorm& bn, Var gamma, Var beta, Mode mode, bool update_running) {
  const Shape& s = input.shape();
  require(s.size() >= 2, "batch_norm_channels_last: input must be [...,C], got " + shape_str(s));
  return batch_norm_impl(input, input.value().numel() / s.back(), s.back(), 1, bn, gamma, beta, mode, update_running);
}

Var batch_norm_over_sets(Var input, BatchNorm& bn, Var gamma, Var beta, Mode mode, bool update_running) {
  const Shape& s = input.shape();
  require(s.size() == 3, "batch_norm_over_sets: input must be [M,k,C], got " + shape_str(s));
  return batch_norm_impl(input, s[0] * s[1], s[2], 1, bn, gamma, beta, mode, update_running, s[1]);
}

// ------------------------------------------------------------ elementwise

Var relu(Var x) {
  const Tensor& v = x.value();
  Tensor out = Tensor::uninitialized(v.shape());
  const std::size_t n = v.numel();
  const float* src = v.ptr();
  float* dst = out.ptr();
  for (std::size_t i = 0; i < n; ++i) dst[i] = src[i] > 0.0f ? src[i] : 0.0f;
  if (x.tape->tracking_selections()) {
    std::vector<std::uint8_t> mask(n);
    for (std::size_t i = 0; i < n; ++i) mask[i] = src[i] > 0.0f;
    x.tape->note_selection(mask);
  }
  // out > 0 exactly where the input was positive, so the output doubles as the mask.
  return x.tape->record(std::move(out), {x}, [x](Tape& tape, std::size_t self) {
    Tensor gx = std::move(tape.grad(self));
    const float* o = tape.value(self).ptr();
    float* g = gx.ptr();
    for (std::size_t i = 0, e = gx.numel(); i < e; ++i) g[i] = o[i] > 0.0f ? g[i] : 0.0f;
    accumulate(tape, x, std::move(gx));
  });
}

Var add(Var a, Var b) {
  same_tape(a, b, "add");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.shape() == bv.shape(), "add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor out = Tensor::uninitialized(av.shape());
  for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tape, std::size_t self) {
    accumulate(tape, a, tape.grad(self));
    accumulate(tape, b, std::move(tape.grad(self)));
  });
}

Var add_over_set(Var x, Var a) {
  same_tape(x, a, "add_over_set");
  const Tensor& xv = x.value();
  const Tensor& av = a.value();
  require(xv.rank() == 3 && av.rank() == 2 && xv.dim(0) == av.dim(0) && xv.dim(2) == av.dim(1),
          "add_over_set: expected [M,k,C] and [M,C], got " + shape_str(xv.shape()) + " and " + shape_str(av.shape()));
  const std::size_t M = xv.dim(0), K = xv.dim(1), C = xv.dim(2);
  Tensor out = Tensor::uninitialized(xv.shape());
  const float* xp = xv.ptr();
  const float* ap = av.ptr();
  float* op = out.ptr();
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < K; ++j)
      for (std::size_t c = 0; c < C; ++c) op[(i * K + j) * C + c] = xp[(i * K + j) * C + c] + ap[i * C + c];
  return x.tape->record(std::move(out), {x, a}, [=](Tape& tape, std::size_t self) {
    const float* g = tape.grad(self).ptr();
    if (tape.requires_grad(a.id)) {
      Tensor ga({M, C});
      float* gp = ga.ptr();
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < K; ++j)
          for (std::size_t c = 0; c < C; ++c) gp[i * C + c] += g[(i * K + j) * C + c];
      accumulate(tape, a, std::move(ga));
    }
    accumulate(tape, x, std::move(tape.grad(self)));
  });
}

Var mul(Var a, Var b) {
  same_tape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.shape() == bv.shape(), "mul: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor out = Tensor::uninitialized(av.shape());
  for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tape, std::size_t self) {
    const Tensor& g = tape.grad(self);
    const Tensor& av = tape.value(a.id);
    const Tensor& bv = tape.value(b.id);
    Tensor ga = Tensor::uninitialized(g.shape()), gb = Tensor::uninitialized(g.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) {
      ga[i] = g[i] * bv[i];
      gb[i] = g[i] * av[i];
    }
    accumulate(tape, a, std::move(ga));
    accumulate(tape, b, std::move(gb));
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (float v : x.value().data()) s += v;
  return x.tape->record(Tensor::scalar(static_cast<float>(s)), {x}, [x](Tape& tape, std::size_t self) {
    const float g = tape.grad(self)[0];
    accumulate(tape, x, Tensor(tape.value(x.id).shape(), g));
  });
}

Var reshape(Var x, Shape shape) {
  const Shape original = x.value().shape();
  require(shape_numel(shape) == x.value().numel(),
          "reshape: cannot view " + shape_str(original) + " as " + shape_str(shape));
  return x.tape->record(x.value().reshaped(std::move(shape)), {x}, [x, original](Tape& tape, std::size_t self) {
    accumulate(tape, x, std::move(tape.grad(self)).reshaped(original));
  });
}

Var slice_cols(Var x, std::size_t offset, std::size_t count) {
  const Tensor& v = x.value();
  require(v.rank() == 2, "slice_cols: rank-2 input required");
  require(count > 0 && offset + count <= v.dim(1), "slice_cols: column range out of bounds");
  const std::size_t R = v.dim(0), C = v.dim(1);
  Tensor out = Tensor::uninitialized({R, count});
  for (std::size_t r = 0; r < R; ++r)
    std::copy_n(v.ptr() + r * C + offset, count, out.ptr() + r * count);
  return x.tape->record(std::move(out), {x}, [=](Tape& tape, std::size_t self) {
    const Tensor& g = tape.grad(self);
    Tensor gx({R, C});
    for (std::size_t r = 0; r < R; ++r) std::copy_n(g.ptr() + r * count, count, gx.ptr() + r * C + offset);
    accumulate(tape, x, std::move(gx));
  });
}

// ------------------------------------------------------------ layout

Var frames_to_points(Var x) {
  const Tensor& v = x.value();
  require(v.rank() == 4, "frames_to_points: input must be [N*T,C,H,W]");
  const std::size_t I = v.dim(0), C = v.dim(1), S = v.dim(2) * v.dim(3);
  Tensor out = Tensor::uninitialized({I * S, C});
  for (std::size_t i = 0; i < I; ++i)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < S; ++s) out[(i * S + s) * C + c] = v[(i * C + c) * S + s];
  const Shape original = v.shape();
  return x.tape->record(std::move(out), {x}, [=](Tape& tape, std::size_t self) {
    const Tensor& g = tape.grad(self);
    Tensor gx = Tensor::uninitialized(original);
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t s = 0; s < S; ++s) gx[(i * C + c) * S + s] = g[(i * S + s) * C + c];
    accumulate(tape, x, std::move(gx));
  });
}

Var points_to_frames(Var points, std::size_t images, std::size_t height, std::size_t width) {
  const Tensor& v = points.value();
  const std::size_t S = height * width;
  require(v.rank() == 2 && v.dim(0) == images * S, "points_to_frames: row count does not match image layout");
  const std::size_t C = v.dim(1), I = images;
  Tensor out = Tensor::uninitialized({I, C, height, width});
  for (std::size_t i = 0; i < I; ++i)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < S; ++s) out[(i * C + c) * S + s] = v[(i * S + s) * C + c];
  return points.tape->record(std::move(out), {points}, [=](Tape& tape, std::size_t self) {
    const Tensor& g = tape.grad(self);
    Tensor gp = Tensor::uninitialized({I * S, C});
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t s = 0; s < S; ++s) gp[(i * S + s) * C + c] = g[(i * C + c) * S + s];
    accumulate(tape, points, std::move(gp));
  });
}

// ------------------------------------------------------------ pooling / fc

Var global_avg_pool(Var input, std::size_t frames) {
  const Tensor& x = input.value();
  require(x.rank() >= 2, "global_avg_pool: input must be [N*frames,C,...]");
  require(frames >= 1 && x.dim(0) % frames == 0, "global_avg_pool: leading extent not divisible by frame count");
  const std::size_t N = x.dim(0) / frames, C = x.dim(1), S = trailing(x.shape(), 2);
  const double count = static_cast<double>(frames * S);
  Tensor out({N, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t f = 0; f < frames; ++f) {
        const float* p = x.ptr() + ((n * frames + f) * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) s += p[i];
      }
      out[n * C + c] = static_cast<float>(s / count);
    }
  const Shape original = x.shape();
  return input.tape->record(std::move(out), {input}, [=](Tape& tape, std::size_t self) {
    const Tensor& g = tape.grad(self);
    Tensor gx = Tensor::uninitialized(original);
    const float inv = static_cast<float>(1.0 / count);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t f = 0; f < frames; ++f)
        for (std::size_t c = 0; c < C; ++c) {
          float* p = gx.ptr() + ((n * frames + f) * C + c) * S;
          std::fill(p, p + S, g[n * C + c] * inv);
        }
    accumulate(tape, input, std::move(gx));
  });
}

namespace {

Var linear_impl(Var x, Var weight, const Var* bias) {
  same_tape(x, weight, "linear");
  const Tensor& xv = x.value();
  const Tensor& w = weight.value();
  require(w.rank() == 2, "linear: weight must be [out,in]");
  const std::size_t in = w.dim(1), outw = w.dim(0);
  require(xv.shape().back() == in, "linear: input width " + std::to_string(xv.shape().back()) +
                                       " does not match weight fan-in " + std::to_string(in));
  const std::size_t R = xv.numel() / in;
  const float* bptr = nullptr;
  if (bias != nullptr) {
    same_tape(x, *bias, "linear");
    require(bias->value().rank() == 1 && bias->value().numel() == outw, "linear: bias must be [out]");
    bptr = bias->value().ptr();
  }
  Shape oshape = xv.shape();
  oshape.back() = outw;
  Tensor out = Tensor::uninitialized(oshape);
  std::vector<float> wt(in * outw);
  for (std::size_t j = 0; j < outw; ++j)
    for (std::size_t i = 0; i < in; ++i) wt[i * outw + j] = w.ptr()[j * in + i];
  rows_times_matrix(xv.ptr(), in, wt.data(), outw, bptr, out.ptr(), R);
  const bool has_bias = bias != nullptr;
  const Var b = has_bias ? *bias : Var{};
  auto fn = [=](Tape& tape, std::size_t self) {
    const Tensor& g = tape.grad(self);
    const Tensor& xv = tape.value(x.id);
    const Tensor& wv = tape.value(weight.id);
    if (tape.requires_grad(x.id)) {
      Tensor gx = Tensor::uninitialized(xv.shape());
      rows_times_matrix(g.ptr(), outw, wv.ptr(), in, nullptr, gx.ptr(), R);
      accumulate(tape, x, std::move(gx));
    }
    if (tape.requires_grad(weight.id) || (has_bias && tape.requires_grad(b.id))) {
      // Row blocks are summed in float, then folded into double in block order.
      std::vector<double> gw(outw * in, 0.0), gb(outw, 0.0);
      std::vector<float> blk(outw * in), blkb(outw);
      for (std::size_t lo = 0; lo < R; lo += kRowBlock) {
        const std::size_t hi = std::min(R, lo + kRowBlock);
        std::fill(blk.begin(), blk.end(), 0.0f);
        std::fill(blkb.begin(), blkb.end(), 0.0f);
        outer_accumulate(g.ptr(), outw, xv.ptr(), in, blk.data(), lo, hi);
        for (std::size_t r = lo; r < hi; ++r) {
          const float* gr = g.ptr() + r * outw;
          for (std::size_t j = 0; j < outw; ++j) blkb[j] += gr[j];
        }
        for (std::size_t e = 0; e < gw.size(); ++e) gw[e] += blk[e];
        for (std::size_t j = 0; j < outw; ++j) gb[j] += blkb[j];
      }
      Tensor gwt(wv.shape());
      for (std::size_t i = 0; i < gw.size(); ++i) gwt[i] = static_cast<float>(gw[i]);
      accumulate(tape, weight, std::move(gwt));
      if (has_bias) {
        Tensor gbt({outw});
        for (std::size_t j = 0; j < outw; ++j) gbt[j] = static_cast<float>(gb[j]);
        accumulate(tape, b, std::move(gbt));
      }
    }
  };
  if (has_bias) return x.tape->record(std::move(out), {x, weight, b}, fn);
  return x.tape->record(std::move(out), {x, weight}, fn);
}

}  // namespace

Var linear(Var x, Var weight) { return linear_impl(x, weight, nullptr); }
Var linear(Var x, Var weight, Var bias) { return linear_impl(x, weight, &bias); }

CrossEntropy softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  require(z.rank() == 2, "softmax_cross_entropy: logits must be [N,K]");
  const std::size_t N = z.dim(0), K = z.dim(1);
  require(labels.size() == N, "softmax_cross_entropy: label count does not match batch");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= K)
      fail_validation("softmax_cross_entropy: label " + std::to_string(l) + " outside [0," + std::to_string(K) + ")");
  Tensor probs({N, K});
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const float* row = z.ptr() + n * K;
    const float mx = *std::max_element(row, row + K);
    double denom = 0.0;
    for (std::size_t j = 0; j < K; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    for (std::size_t j = 0; j < K; ++j)
      probs[n * K + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / denom);
    loss += std::log(denom) + mx - row[labels[static_cast<std::ptrdiff_t>(n)]];
  }
  loss /= static_cast<double>(N);
  std::vector<int> lab(labels.begin(), labels.end());
  Var out = logits.tape->record(Tensor::scalar(static_cast<float>(loss)), {logits},
                                [=](Tape& tape, std::size_t self) {
                                  const float g = tape.grad(self)[0] / static_cast<float>(N);
                                  Tensor gz({N, K});
                                  for (std::size_t n = 0; n < N; ++n)
                                    for (std::size_t j = 0; j < K; ++j)
                                      gz[n * K + j] = g * (probs[n * K + j] - (static_cast<int>(j) == lab[n] ? 1.0f : 0.0f));
                                  accumulate(tape, logits, std::move(gz));
                                });
  return {out, std::move(probs)};
}

// ------------------------------------------------------------ set ops

Var gather_rows(Var source, const IndexMatrix& indices) {
  const Tensor& src = source.value();
  require(src.rank() == 2, "gather_rows: source must be [M,C]");
  require(indices.k >= 1 && indices.values.size() == indices.rows * indices.k, "gather_rows: malformed index matrix");
  const std::size_t M = src.dim(0), C = src.dim(1), R = indices.rows, K = indices.k;
  for (auto idx : indices.values)
    if (idx < 0 || static_cast<std::size_t>(idx) >= M)
      fail_validation("gather_rows: index " + std::to_string(idx) + " outside [0," + std::to_string(M) + ")");
  Tensor out = Tensor::uninitialized({R, K, C});
  for (std::size_t e = 0; e < R * K; ++e)
    std::copy_n(src.ptr() + static_cast<std::size_t>(indices.values[e]) * C, C, out.ptr() + e * C);
  return source.tape->record(std::move(out), {source}, [=, idx = indices.values](Tape& tape, std::size_t self) {
    const Tensor& g = tape.grad(self);
    Tensor gs({M, C});
    for (std::size_t e = 0; e < R * K; ++e) {
      float* dst = gs.ptr() + static_cast<std::size_t>(idx[e]) * C;
      const float* s = g.ptr() + e * C;
      for (std::size_t c = 0; c < C; ++c) dst[c] += s[c];
    }
    accumulate(tape, source, std::move(gs));
  });
}

SetMax max_over_set(Var input) {
  const Tensor& x = input.value();
  require(x.rank() == 3 && x.dim(1) >= 1, "max_over_set: input must be [M,k,C] with k >= 1");
  const std::size_t M = x.dim(0), K = x.dim(1), C = x.dim(2);
  Tensor out = Tensor::uninitialized({M, C});
  ArgmaxRecord rec{M, C, K, std::vector<std::int32_t>(M * C, 0)};
  for (std::size_t i = 0; i < M; ++i) {
    const float* base = x.ptr() + i * K * C;
    float* o = out.ptr() + i * C;
    std::int32_t* w = rec.winner.data() + i * C;
    std::copy_n(base, C, o);
    for (std::size_t j = 1; j < K; ++j) {
      const float* row = base + j * C;
      for (std::size_t c = 0; c < C; ++c)
        if (row[c] > o[c]) {
          o[c] = row[c];
          w[c] = static_cast<std::int32_t>(j);
        }
    }
  }
  input.tape->note_selection({reinterpret_cast<const std::uint8_t*>(rec.winner.data()),
                              rec.winner.size() * sizeof(std::int32_t)});
  Var v = input.tape->record(std::move(out), {input}, [=, win = rec.winner](Tape& tape, std::size_t self) {
    const float* g = tape.grad(self).ptr();
    Tensor gx({M, K, C});
    float* gp = gx.ptr();
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t c = 0; c < C; ++c) gp[(i * K + static_cast<std::size_t>(win[i * C + c])) * C + c] += g[i * C + c];
    accumulate(tape, input, std::move(gx));
  });
  return {v, std::move(rec)};
}

}  // namespace cpnet
