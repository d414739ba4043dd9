#pragma once

// Reference evaluators used by the self-test and the test suite. These are
// deliberately naive, loop-level transcriptions of the attention definitions
// and share no code with the fast paths in ops.hpp / attention.hpp (no Eigen,
// no tape, no shared softmax). Keep them dumb: their value is independence.

#include <cmath>
#include <vector>

#include "attention.hpp"
#include "tensor.hpp"

namespace davit::oracle {

// Plain 2-D triple-loop matrix product.
template <typename T>
Tensor<T> matmul_loop(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
    throw ShapeError("matmul_loop: bad shapes " + shape_str(a.shape) + " x " +
                     shape_str(b.shape));
  const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor<T> c({m, n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      T acc = T(0);
      for (int64_t l = 0; l < k; ++l) acc += a[i * k + l] * b[l * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

// Standard normal CDF via the erf Maclaurin series (independent of std::erf).
inline double normal_cdf_series(double x) {
  const double z = x * 0.70710678118654752440;  // x / sqrt(2)
  double a = z;         // (-1)^n z^(2n+1) / n!
  double sum = 0.0;
  for (int n = 0; n < 200; ++n) {
    const double term = a / (2.0 * n + 1.0);
    sum += term;
    a *= -z * z / (n + 1.0);
    if (std::fabs(term) < 1e-18) break;
  }
  const double erf = 1.1283791670955125739 * sum;  // 2/sqrt(pi)
  return 0.5 * (1.0 + erf);
}

namespace detail {

// y[b,p,:] = x[b,p,:]·W + bias, all explicit loops.
template <typename T>
Tensor<T> project(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  const int64_t B = x.shape[0], P = x.shape[1], C = x.shape[2];
  Tensor<T> y({B, P, C});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < P; ++p)
      for (int64_t o = 0; o < C; ++o) {
        T acc = bias[o];
        for (int64_t i = 0; i < C; ++i) acc += x.at(b, p, i) * w.at(i, o);
        y.at(b, p, o) = acc;
      }
  return y;
}

}  // namespace detail

// Multi-head self-attention over [B,P,C], evaluated head by head with
// explicit score/softmax/mix loops.
template <typename T>
Tensor<T> mhsa_loop(const Tensor<T>& x, const AttentionParams<T>& p) {
  p.validate();
  const int64_t B = x.shape[0], P = x.shape[1], C = x.shape[2];
  const int64_t Nh = p.num_heads, Ch = C / Nh;
  const Tensor<T> q = detail::project(x, p.w_q, p.b_q);
  const Tensor<T> k = detail::project(x, p.w_k, p.b_k);
  const Tensor<T> v = detail::project(x, p.w_v, p.b_v);
  const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(Ch)));
  Tensor<T> ctx({B, P, C});
  std::vector<T> row(static_cast<size_t>(P));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < Nh; ++h)
      for (int64_t i = 0; i < P; ++i) {
        for (int64_t j = 0; j < P; ++j) {
          T s = T(0);
          for (int64_t d = 0; d < Ch; ++d) s += q.at(b, i, h * Ch + d) * k.at(b, j, h * Ch + d);
          row[static_cast<size_t>(j)] = s * sc;
        }
        T denom = T(0);
        for (int64_t j = 0; j < P; ++j) {
          row[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)]);
          denom += row[static_cast<size_t>(j)];
        }
        for (int64_t d = 0; d < Ch; ++d) {
          T acc = T(0);
          for (int64_t j = 0; j < P; ++j)
            acc += row[static_cast<size_t>(j)] / denom * v.at(b, j, h * Ch + d);
          ctx.at(b, i, h * Ch + d) = acc;
        }
      }
  return detail::project(ctx, p.w_o, p.b_o);
}

// Window attention by explicit window gather/scatter around mhsa_loop.
// Divisible geometry only — callers choose grids that fit.
template <typename T>
Tensor<T> window_attention_loop(const Tensor<T>& x, const AttentionParams<T>& p, int64_t s) {
  const int64_t N = x.shape[0], h = x.shape[1], w = x.shape[2], C = x.shape[3];
  if (h % s != 0 || w % s != 0)
    throw GeometryError("window_attention_loop: indivisible grid");
  Tensor<T> out(x.shape);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t wr = 0; wr < h / s; ++wr)
      for (int64_t wc = 0; wc < w / s; ++wc) {
        Tensor<T> win({1, s * s, C});
        for (int64_t r = 0; r < s; ++r)
          for (int64_t c = 0; c < s; ++c)
            for (int64_t ch = 0; ch < C; ++ch)
              win.at(0, r * s + c, ch) = x.at(n, wr * s + r, wc * s + c, ch);
        const Tensor<T> res = mhsa_loop(win, p);
        for (int64_t r = 0; r < s; ++r)
          for (int64_t c = 0; c < s; ++c)
            for (int64_t ch = 0; ch < C; ++ch)
              out.at(n, wr * s + r, wc * s + c, ch) = res.at(0, r * s + c, ch);
      }
  return out;
}

// Grouped channel attention via direct transposition: per group, a
// C_g×C_g score matrix summed over all positions, softmaxed rows, applied
// to the transposed values, transposed back, then output-projected.
template <typename T>
Tensor<T> channel_attention_loop(const Tensor<T>& x, const AttentionParams<T>& p,
                                 ChannelScale mode = ChannelScale::InvSqrtGroupDim) {
  p.validate();
  const int64_t B = x.shape[0], P = x.shape[1], C = x.shape[2];
  const int64_t Ng = p.num_heads, Cg = C / Ng;
  const Tensor<T> q = detail::project(x, p.w_q, p.b_q);
  const Tensor<T> k = detail::project(x, p.w_k, p.b_k);
  const Tensor<T> v = detail::project(x, p.w_v, p.b_v);
  const T sc = static_cast<T>(mode == ChannelScale::InvSqrtGroupDim
                                  ? 1.0 / std::sqrt(static_cast<double>(Cg))
                                  : 1.0 / std::sqrt(static_cast<double>(P)));
  Tensor<T> pre({B, P, C});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t g = 0; g < Ng; ++g) {
      Tensor<T> attn({Cg, Cg});
      for (int64_t a = 0; a < Cg; ++a) {
        T denom = T(0);
        for (int64_t c = 0; c < Cg; ++c) {
          T s = T(0);
          for (int64_t pos = 0; pos < P; ++pos)
            s += q.at(b, pos, g * Cg + a) * k.at(b, pos, g * Cg + c);
          attn.at(a, c) = std::exp(s * sc);
          denom += attn.at(a, c);
        }
        for (int64_t c = 0; c < Cg; ++c) attn.at(a, c) /= denom;
      }
      for (int64_t pos = 0; pos < P; ++pos)
        for (int64_t a = 0; a < Cg; ++a) {
          T acc = T(0);
          for (int64_t c = 0; c < Cg; ++c) acc += attn.at(a, c) * v.at(b, pos, g * Cg + c);
          pre.at(b, pos, g * Cg + a) = acc;
        }
    }
  return detail::project(pre, p.w_o, p.b_o);
}

}  // namespace davit::oracle
