#pragma once

// Differentiable operations over the tape. Each op evaluates eagerly and, when
// some input requires gradients, records a closure implementing its backward
// rule. Matrix products are delegated to Eigen per batch slice; everything
// else is direct loops. All loops have fixed iteration order, so results and
// gradient accumulation are deterministic regardless of DAVIT_THREADS (each
// output element is written by exactly one thread, with a sequential inner
// reduction).

#include <Eigen/Core>

#include <cmath>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

#include "rng.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace davit {

// ---------------------------------------------------------------------------
// Intra-op parallelism. DAVIT_THREADS caps the thread count (0/unset = number
// of hardware threads). Work is split into contiguous chunks; the callee
// receives [begin, end).
// ---------------------------------------------------------------------------

inline int thread_count() {
  int n = 0;
  if (const char* e = std::getenv("DAVIT_THREADS"); e && *e) n = std::atoi(e);
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  return n > 0 ? n : 1;
}

template <typename F>
void parallel_for(int64_t n, F&& f) {
  const int64_t t = std::min<int64_t>(thread_count(), n);
  if (t <= 1) {
    if (n > 0) f(int64_t(0), n);
    return;
  }
  const int64_t chunk = (n + t - 1) / t;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i) {
    const int64_t lo = i * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&f, lo, hi] { f(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// Raw (tape-free) tensor helpers shared by forward and backward paths.
// ---------------------------------------------------------------------------

// Batched matrix product with optional transposes of the operand slices.
// Leading batch dims broadcast against each other (singleton repetition).
template <typename T>
Tensor<T> matmul_raw(const Tensor<T>& A, const Tensor<T>& B, bool ta = false, bool tb = false) {
  if (A.rank() < 2 || B.rank() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(A.shape) + " and " +
                     shape_str(B.shape));
  const int64_t ar = A.shape[A.rank() - 2], ac = A.shape[A.rank() - 1];
  const int64_t br = B.shape[B.rank() - 2], bc = B.shape[B.rank() - 1];
  const int64_t m = ta ? ac : ar, ka = ta ? ar : ac;
  const int64_t kb = tb ? bc : br, n = tb ? br : bc;
  if (ka != kb)
    throw ShapeError("matmul: inner dimensions do not conform: " + shape_str(A.shape) +
                     (ta ? " (transposed)" : "") + " vs " + shape_str(B.shape) +
                     (tb ? " (transposed)" : ""));
  const Shape abatch(A.shape.begin(), A.shape.end() - 2);
  const Shape bbatch(B.shape.begin(), B.shape.end() - 2);
  const Shape obatch = broadcast_shapes(abatch, bbatch, "matmul");
  Shape oshape = obatch;
  oshape.push_back(m);
  oshape.push_back(n);
  Tensor<T> C(oshape);

  // Per-output-batch slice strides into A and B (0 where broadcast).
  const size_t nb_dims = obatch.size();
  std::vector<int64_t> astride(nb_dims, 0), bstride(nb_dims, 0);
  {
    const Shape as = row_major_strides(abatch), bs = row_major_strides(bbatch);
    for (size_t i = 0; i < nb_dims; ++i) {
      size_t off = nb_dims - abatch.size();
      if (i >= off && abatch[i - off] != 1) astride[i] = as[i - off];
      off = nb_dims - bbatch.size();
      if (i >= off && bbatch[i - off] != 1) bstride[i] = bs[i - off];
    }
  }
  const int64_t aslice = ar * ac, bslice = br * bc, cslice = m * n;
  const int64_t batches = shape_numel(obatch);
  const Shape obst = row_major_strides(obatch);

  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;

  parallel_for(batches, [&](int64_t lo, int64_t hi) {
    for (int64_t bi = lo; bi < hi; ++bi) {
      int64_t rem = bi, aoff = 0, boff = 0;
      for (size_t d = 0; d < nb_dims; ++d) {
        const int64_t digit = rem / obst[d];
        rem %= obst[d];
        aoff += digit * astride[d];
        boff += digit * bstride[d];
      }
      CMap Am(A.data.data() + aoff * aslice, ar, ac);
      CMap Bm(B.data.data() + boff * bslice, br, bc);
      MMap Cm(C.data.data() + bi * cslice, m, n);
      if (!ta && !tb)
        Cm.noalias() = Am * Bm;
      else if (ta && !tb)
        Cm.noalias() = Am.transpose() * Bm;
      else if (!ta && tb)
        Cm.noalias() = Am * Bm.transpose();
      else
        Cm.noalias() = Am.transpose() * Bm.transpose();
    }
  });
  return C;
}

// Sum g down to `target` (right-aligned broadcast inverse). Exact copy when
// the shapes already match.
template <typename T>
Tensor<T> reduce_to_shape(const Tensor<T>& g, const Shape& target) {
  if (g.shape == target) return g;
  if (g.rank() < static_cast<int>(target.size()))
    throw ShapeError("reduce_to_shape: cannot reduce " + shape_str(g.shape) + " to " +
                     shape_str(target));
  Tensor<T> out(target);
  const Shape gst = row_major_strides(g.shape);
  const Shape tst = row_major_strides(target);
  const size_t off = g.shape.size() - target.size();
  // Map every g element to its target slot.
  for (int64_t i = 0; i < g.numel(); ++i) {
    int64_t rem = i, ti = 0;
    for (size_t d = 0; d < g.shape.size(); ++d) {
      const int64_t digit = rem / gst[d];
      rem %= gst[d];
      if (d >= off && target[d - off] != 1) ti += digit * tst[d - off];
    }
    out[ti] += g[i];
  }
  return out;
}

inline std::vector<int> inverse_permutation(const std::vector<int>& axes) {
  std::vector<int> inv(axes.size());
  std::vector<bool> seen(axes.size(), false);
  for (size_t i = 0; i < axes.size(); ++i) {
    const int a = axes[i];
    if (a < 0 || a >= static_cast<int>(axes.size()) || seen[static_cast<size_t>(a)])
      throw ShapeError("permute: axes are not a permutation");
    seen[static_cast<size_t>(a)] = true;
    inv[static_cast<size_t>(a)] = static_cast<int>(i);
  }
  return inv;
}

template <typename T>
Tensor<T> permute_raw(const Tensor<T>& x, const std::vector<int>& axes) {
  if (static_cast<int>(axes.size()) != x.rank())
    throw ShapeError("permute: " + std::to_string(axes.size()) + " axes for rank " +
                     std::to_string(x.rank()));
  inverse_permutation(axes);  // validates
  Shape oshape(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) oshape[i] = x.shape[static_cast<size_t>(axes[i])];
  Tensor<T> out(oshape);
  const Shape xst = row_major_strides(x.shape);
  const Shape ost = row_major_strides(oshape);
  // out[idx] = x[idx mapped through axes]
  std::vector<int64_t> in_stride(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) in_stride[i] = xst[static_cast<size_t>(axes[i])];
  const int64_t n = out.numel();
  parallel_for(n, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      int64_t rem = i, xi = 0;
      for (size_t d = 0; d < oshape.size(); ++d) {
        xi += (rem / ost[d]) * in_stride[d];
        rem %= ost[d];
      }
      out[i] = x.data[static_cast<size_t>(xi)];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Tape ops.
// ---------------------------------------------------------------------------

template <typename T>
Value constant(Tape<T>& t, Tensor<T> v) {
  return t.leaf(std::move(v), false);
}

template <typename T>
Value reshape(Tape<T>& t, Value x, Shape shape) {
  const Tensor<T>& X = t.value(x);
  if (shape_numel(shape) != X.numel())
    throw ShapeError("reshape: cannot view " + shape_str(X.shape) + " as " + shape_str(shape));
  Tensor<T> out(shape, X.data);
  const bool rg = t.requires_grad(x);
  std::function<void(Tape<T>&)> bp;
  if (t.grad_enabled() && rg) {
    const Value out_v{static_cast<int32_t>(t.size())};
    const Shape xshape = X.shape;
    bp = [x, out_v, xshape](Tape<T>& tt) {
      const Tensor<T>& g = tt.grad_buffer(out_v);
      tt.accumulate(x, Tensor<T>(xshape, g.data));
    };
  }
  return t.push(std::move(out), rg, std::move(bp));
}

template <typename T>
Value permute(Tape<T>& t, Value x, std::vector<int> axes) {
  Tensor<T> out = permute_raw(t.value(x), axes);
  const bool rg = t.requires_grad(x);
  std::function<void(Tape<T>&)> bp;
  if (t.grad_enabled() && rg) {
    const Value out_v{static_cast<int32_t>(t.size())};
    const std::vector<int> inv = inverse_permutation(axes);
    bp = [x, out_v, inv](Tape<T>& tt) {
      tt.accumulate(x, permute_raw(tt.grad_buffer(out_v), inv));
    };
  }
  return t.push(std::move(out), rg, std::move(bp));
}

template <typename T>
Value add(Tape<T>& t, Value a, Value b) {
  const Tensor<T>& A = t.value(a);
  const Tensor<T>& B = t.value(b);
  Tensor<T> out;
  if (A.shape == B.shape) {
    out = A;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += B[i];
  } else {
    const Shape oshape = broadcast_shapes(A.shape, B.shape, "add");
    out = Tensor<T>(oshape);
    const BroadcastIter it(A.shape, B.shape, oshape);
    const Shape ost = row_major_strides(oshape);
    for (int64_t i = 0; i < out.numel(); ++i) {
      int64_t rem = i, ai = 0, bi = 0;
      for (size_t d = 0; d < oshape.size(); ++d) {
        const int64_t digit = rem / ost[d];
        rem %= ost[d];
        ai += digit * it.a_stride[d];
        bi += digit * it.b_stride[d];
      }
      out[i] = A[ai] + B[bi];
    }
  }
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  std::function<void(Tape<T>&)> bp;
  if (t.grad_enabled() && rg) {
    const Value out_v{static_cast<int32_t>(t.size())};
    const Shape as = A.shape, bs = B.shape;
    bp = [a, b, out_v, as, bs](Tape<T>& tt) {
      const Tensor<T>& g = tt.grad_buffer(out_v);
      if (tt.requires_grad(a)) tt.accumulate(a, reduce_to_shape(g, as));
      if (tt.requires_grad(b)) tt.accumulate(b, reduce_to_shape(g, bs));
    };
  }
  return t.push(std::move(out), rg, std::move(bp));
}

template <typename T>
Value mul(Tape<T>& t, Value a, Value b) {
  const Tensor<T>& A = t.value(a);
  const Tensor<T>& B = t.value(b);
  const Shape oshape = broadcast_shapes(A.shape, B.shape, "mul");
  Tensor<T> out(oshape);
  const BroadcastIter it(A.shape, B.shape, oshape);
  const Shape ost = row_major_strides(oshape);
  for (int64_t i = 0; i < out.numel(); ++i) {
    int64_t rem = i, ai = 0, bi = 0;
    for (size_t d = 0; d < oshape.size(); ++d) {
      const int64_t digit = rem / ost[d];
      rem %= ost[d];
      ai += digit * it.a_stride[d];
      bi += digit * it.b_stride[d];
    }
    out[i] = A[ai] * B[bi];
  }
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  std::function<void(Tape<T>&)> bp;
  if (t.grad_enabled() && rg) {
    const Value out_v{static_cast<int32_t>(t.size())};
    const Shape as = A.shape, bs = B.shape;
    bp = [a, b, out_v, as, bs, it, ost, oshape](Tape<T>& tt) {
      const Tensor<T>& g = tt.grad_buffer(out_v);
      const Tensor<T>& Av = tt.value(a);
      const Tensor<T>& Bv = tt.value(b);
      Tensor<T> da_full(oshape), db_full(oshape);
      for (int64_t i = 0; i < g.numel(); ++i) {
        int64_t rem = i, ai = 0, bi = 0;
        for (size_t d = 0; d < oshape.size(); ++d) {
          const int64_t digit = rem / ost[d];
          rem %= ost[d];
          ai += digit * it.a_stride[d];
          bi += digit * it.b_stride[d];
        }
        da_full[i] = g[i] * Bv[bi];
        db_full[i] = g[i] * Av[ai];
      }
      if (tt.requires_grad(a)) tt.accumulate(a, reduce_to_shape(da_full, as));
      if (tt.requires_grad(b)) tt.accumulate(b, reduce_to_shape(db_full, bs));
    };
  }
  return t.push(std::move(out), rg, std::move(bp));
}

template <typename T>
Value scale(Tape<T>& t, Value x, double c) {
  const Tensor<T>& X = t.value(x);
  Tensor<T> out = X;
  const T tc = static_cast<T>(c);
  for (auto& v : out.data) v *= tc;
  const bool rg = t.requires_grad(x);
  std::function<void(Tape<T>&)> bp;
  if (t.grad_enabled() && rg) {
    const Value out_v{static_cast<int32_t>(t.size())};
    bp = [x, out_v, tc](Tape<T>& tt) {
      const Tensor<T>& g = tt.grad_buffer(out_v);
      Tensor<T>& xg = tt.grad_buffer(x);
      for (int64_t i = 0; i < g.numel(); ++i) xg[i] += g[i] * tc;
    };
  }
  return t.push(std::move(out), rg, std::move(bp));
}

template <typename T>
Value sub(Tape<T>& t, Value a, Value b) {
  return add(t, a, scale(t, b, -1.0));
}

template <typename T>
Value matmul(Tape<T>& t, Value a, Value b) {
  const Tensor<T>& A = t.value(a);
  const Tensor<T>& B = t.value(b);
  Tensor<T> C = matmul_raw(A, B, false, false);
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  std::function<void(Tape<T>&)> bp;
  if (t.grad_enabled() && rg) {
    const Value out_v{static_cast<int32_t>(t.size())};
    const Shape as = A.shape, bs = B.shape;
    bp = [a, b, out_v, as, bs](Tape<T>& tt) {
      const Tensor<T>& g = tt.grad_buffer(out_v);
      if (tt.requires_grad(a))
        tt.accumulate(a, reduce_to_shape(matmul_raw(g, tt.value(b), false, true), as));
      if (tt.requires_grad(b))
        tt.accumulate(b, reduce_to_shape(matmul_raw(tt.value(a), g, true, false), bs));
    };
  }
  return t.push(std::move(C), rg, std::move(bp));
}

// y = x·W + b for x [..., in], W [in, out], b [out].
template <typename T>
Value linear(Tape<T>& t, Value x, Value w, Value b) {
  return add(t, matmul(t, x, w), b);
}

template <typename T>
Value softmax_lastaxis(Tape<T>& t, Value x) {
  const Tensor<T>& X = t.value(x);
  if (X.rank() < 1 || X.shape.back() < 1)
    throw ShapeError("softmax_lastaxis: need a non-empty last axis, got " + shape_str(X.shape));
  for (const T v : X.data)
    if (std::isnan(static_cast<double>(v)))
      throw NumericError("softmax_lastaxis: NaN in input");
  const int64_t L = X.shape.back();
  const int64_t rows = X.numel() / L;
  Tensor<T> out(X.shape);
  parallel_for(rows, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      const T* in = X.data.data() + r * L;
      T* o = out.data.data() + r * L;
      T mx = in[0];
      for (int64_t i = 1; i < L; ++i) mx = std::max(mx, in[i]);
      T sum = T(0);
      for (int64_t i = 0; i < L; ++i) {
        o[i] = std::exp(in[i] - mx);
        sum += o[i];
      }
      const T inv = T(1) / sum;
      for (int64_t i = 0; i < L; ++i) o[i] *= inv;
    }
  });
  const bool rg = t.requires_grad(x);
  std::function<void(Tape<T>&)> bp;
  if (t.grad_enabled() && rg) {
    const Value out_v{static_cast<int32_t>(t.size())};
    bp = [x, out_v, L, rows](Tape<T>& tt) {
      const Tensor<T>& g = tt.grad_buffer(out_v);
      const Tensor<T>& y = tt.value(out_v);
      Tensor<T>& xg = tt.grad_buffer(x);
      for (int64_t r = 0; r < rows; ++r) {
        const T* gr = g.data.data() + r * L;
        const T* yr = y.data.data() + r * L;
        T dot = T(0);
        for (int64_t i = 0; i < L; ++i) dot += gr[i] * yr[i];
        T* xo = xg.data.data() + r * L;
        for (int64_t i = 0; i < L; ++i) xo[i] += yr[i] * (gr[i] - dot);
      }
    };
  }
  return t.push(std::move(out), rg, std::move(bp));
}

// Normalization over the last axis with affine parameters gamma, beta of
// shape [C] where C is the last dimension of x.
template <typename T>
Value layer_norm(Tape<T>& t, Value x, Value gamma, Value beta, double eps = 1e-5) {
  const Tensor<T>& X = t.value(x);
  const Tensor<T>& G = t.value(gamma);
  const Tensor<T>& Bt = t.value(beta);
  if (X.rank() < 1) throw ShapeError("layer_norm: input must have rank >= 1");
  const int64_t C = X.shape.back();
  if (G.shape != Shape{C} || Bt.shape != Shape{C})
    throw ShapeError("layer_norm: affine params must be [" + std::to_string(C) + "], got " +
                     shape_str(G.shape) + " and " + shape_str(Bt.shape));
  if (eps <= 0) throw ConfigError("layer_norm: eps must be positive");
  const int64_t rows = X.numel() / C;
  Tensor<T> out(X.shape);
  Tensor<T> mean({rows}), rstd({rows});
  parallel_for(rows, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      const T* in = X.data.data() + r * C;
      T mu = T(0);
      for (int64_t i = 0; i < C; ++i) mu += in[i];
      mu /= static_cast<T>(C);
      T var = T(0);
      for (int64_t i = 0; i < C; ++i) {
        const T d = in[i] - mu;
        var += d * d;
      }
      var /= static_cast<T>(C);
      const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
      mean[r] = mu;
      rstd[r] = rs;
      T* o = out.data.data() + r * C;
      for (int64_t i = 0; i < C; ++i) o[i] = (in[i] - mu) * rs * G[i] + Bt[i];
    }
  });
  const bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
  std::function<void(Tape<T>&)> bp;
  if (t.grad_enabled() && rg) {
    const Value out_v{static_cast<int32_t>(t.size())};
    bp = [x, gamma, beta, out_v, mean, rstd, C, rows](Tape<T>& tt) {
      const Tensor<T>& g = tt.grad_buffer(out_v);
      const Tensor<T>& Xv = tt.value(x);
      const Tensor<T>& Gv = tt.value(gamma);
      const bool need_x = tt.requires_grad(x);
      const bool need_g = tt.requires_grad(gamma);
      const bool need_b = tt.requires_grad(beta);
      Tensor<T> dgamma({C}), dbeta({C});
      for (int64_t r = 0; r < rows; ++r) {
        const T* gr = g.data.data() + r * C;
        const T* in = Xv.data.data() + r * C;
        const T mu = mean[r], rs = rstd[r];
        if (need_g || need_b) {
          for (int64_t i = 0; i < C; ++i) {
            const T xhat = (in[i] - mu) * rs;
            dgamma[i] += gr[i] * xhat;
            dbeta[i] += gr[i];
          }
        }
        if (need_x) {
          T m1 = T(0), m2 = T(0);
          for (int64_t i = 0; i < C; ++i) {
            const T dyh = gr[i] * Gv[i];
            const T xhat = (in[i] - mu) * rs;
            m1 += dyh;
            m2 += dyh * xhat;
          }
          m1 /= static_cast<T>(C);
          m2 /= static_cast<T>(C);
          T* xo = tt.grad_buffer(x).data.data() + r * C;
          for (int64_t i = 0; i < C; ++i) {
            const T dyh = gr[i] * Gv[i];
            const T xhat = (in[i] - mu) * rs;
            xo[i] += rs * (dyh - m1 - xhat * m2);
          }
        }
      }
      if (need_g) tt.accumulate(gamma, dgamma);
      if (need_b) tt.accumulate(beta, dbeta);
    };
  }
  return t.push(std::move(out), rg, std::move(bp));
}

// Exact Gaussian-CDF gelu: y = x * Phi(x).
template <typename T>
Value gelu(Tape<T>& t, Value x) {
  const Tensor<T>& X = t.value(x);
  Tensor<T> out(X.shape);
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  for (int64_t i = 0; i < X.numel(); ++i) {
    const double v = static_cast<double>(X[i]);
    out[i] = static_cast<T>(v * 0.5 * (1.0 + std::erf(v * kInvSqrt2)));
  }
  const bool rg = t.requires_grad(x);
  std::function<void(Tape<T>&)> bp;
  if (t.grad_enabled() && rg) {
    const Value out_v{static_cast<int32_t>(t.size())};
    bp = [x, out_v](Tape<T>& tt) {
      const Tensor<T>& g = tt.grad_buffer(out_v);
      const Tensor<T>& Xv = tt.value(x);
      Tensor<T>& xg = tt.grad_buffer(x);
      constexpr double kInvSqrt2 = 0.70710678118654752440;
      constexpr double kInvSqrt2Pi = 0.39894228040143267794;
      for (int64_t i = 0; i < g.numel(); ++i) {
        const double v = static_cast<double>(Xv[i]);
        const double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        xg[i] += g[i] * static_cast<T>(phi + v * pdf);
      }
    };
  }
  return t.push(std::move(out), rg, std::move(bp));
}

// Direct 2-D convolution, NCHW layout, zero padding, floor output rule.
// w is [C_out, C_in/groups, kh, kw]; depthwise = groups == C_in == C_out.
template <typename T>
Value conv2d(Tape<T>& t, Value x, Value w, Value b, int stride, int pad, int groups = 1) {
  const Tensor<T>& X = t.value(x);
  const Tensor<T>& W = t.value(w);
  const Tensor<T>& Bv = t.value(b);
  if (X.rank() != 4 || W.rank() != 4)
    throw ShapeError("conv2d: need x [N,C,H,W] and w [Co,Ci/g,kh,kw], got " +
                     shape_str(X.shape) + " and " + shape_str(W.shape));
  const int64_t N = X.shape[0], Ci = X.shape[1], H = X.shape[2], Wd = X.shape[3];
  const int64_t Co = W.shape[0], Cig = W.shape[1], kh = W.shape[2], kw = W.shape[3];
  if (stride < 1 || pad < 0 || groups < 1)
    throw ConfigError("conv2d: stride must be >= 1, pad >= 0, groups >= 1");
  if (Ci % groups != 0 || Co % groups != 0 || Cig != Ci / groups)
    throw ShapeError("conv2d: group mismatch: C_in=" + std::to_string(Ci) + " C_out=" +
                     std::to_string(Co) + " groups=" + std::to_string(groups) +
                     " kernel-in=" + std::to_string(Cig));
  if (Bv.shape != Shape{Co})
    throw ShapeError("conv2d: bias must be [" + std::to_string(Co) + "], got " +
                     shape_str(Bv.shape));
  const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const int64_t Wo = (Wd + 2 * pad - kw) / stride + 1;
  if (H + 2 * pad < kh || Wd + 2 * pad < kw || Ho < 1 || Wo < 1)
    throw ShapeError("conv2d: non-positive output size for input " + shape_str(X.shape) +
                     ", kernel " + shape_str(W.shape) + ", stride " + std::to_string(stride) +
                     ", pad " + std::to_string(pad));
  Tensor<T> out({N, Co, Ho, Wo});
  const int64_t co_per_g = Co / groups;
  parallel_for(N * Co, [&](int64_t lo, int64_t hi) {
    for (int64_t nc = lo; nc < hi; ++nc) {
      const int64_t n = nc / Co, co = nc % Co;
      const int64_t g = co / co_per_g;
      const T* wp = W.data.data() + co * Cig * kh * kw;
      T* op = out.data.data() + (n * Co + co) * Ho * Wo;
      for (int64_t oh = 0; oh < Ho; ++oh) {
        for (int64_t ow = 0; ow < Wo; ++ow) {
          T acc = Bv[co];
          for (int64_t cg = 0; cg < Cig; ++cg) {
            const int64_t ci = g * Cig + cg;
            const T* xp = X.data.data() + (n * Ci + ci) * H * Wd;
            for (int64_t r = 0; r < kh; ++r) {
              const int64_t ih = oh * stride + r - pad;
              if (ih < 0 || ih >= H) continue;
              for (int64_t c = 0; c < kw; ++c) {
                const int64_t iw = ow * stride + c - pad;
                if (iw < 0 || iw >= Wd) continue;
                acc += xp[ih * Wd + iw] * wp[(cg * kh + r) * kw + c];
              }
            }
          }
          op[oh * Wo + ow] = acc;
        }
      }
    }
  });
  const bool rg = t.requires_grad(x) || t.requires_grad(w) || t.requires_grad(b);
  std::function<void(Tape<T>&)> bp;
  if (t.grad_enabled() && rg) {
    const Value out_v{static_cast<int32_t>(t.size())};
    bp = [x, w, b, out_v, stride, pad, groups](Tape<T>& tt) {
      const Tensor<T>& g = tt.grad_buffer(out_v);
      const Tensor<T>& Xv = tt.value(x);
      const Tensor<T>& Wv = tt.value(w);
      const int64_t N = Xv.shape[0], Ci = Xv.shape[1], H = Xv.shape[2], Wd = Xv.shape[3];
      const int64_t Co = Wv.shape[0], Cig = Wv.shape[1], kh = Wv.shape[2], kw = Wv.shape[3];
      const int64_t Ho = g.shape[2], Wo = g.shape[3];
      const int64_t co_per_g = Co / groups;
      const bool need_x = tt.requires_grad(x);
      const bool need_w = tt.requires_grad(w);
      const bool need_b = tt.requires_grad(b);
      Tensor<T> dx = need_x ? Tensor<T>(Xv.shape) : Tensor<T>{};
      Tensor<T> dw = need_w ? Tensor<T>(Wv.shape) : Tensor<T>{};
      Tensor<T> db = need_b ? Tensor<T>({Co}) : Tensor<T>{};
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t co = 0; co < Co; ++co) {
          const int64_t grp = co / co_per_g;
          const T* gp = g.data.data() + (n * Co + co) * Ho * Wo;
          const T* wp = Wv.data.data() + co * Cig * kh * kw;
          T* dwp = need_w ? dw.data.data() + co * Cig * kh * kw : nullptr;
          for (int64_t oh = 0; oh < Ho; ++oh) {
            for (int64_t ow = 0; ow < Wo; ++ow) {
              const T gv = gp[oh * Wo + ow];
              if (need_b) db[co] += gv;
              for (int64_t cg = 0; cg < Cig; ++cg) {
                const int64_t ci = grp * Cig + cg;
                const int64_t xbase = (n * Ci + ci) * H * Wd;
                for (int64_t r = 0; r < kh; ++r) {
                  const int64_t ih = oh * stride + r - pad;
                  if (ih < 0 || ih >= H) continue;
                  for (int64_t c = 0; c < kw; ++c) {
                    const int64_t iw = ow * stride + c - pad;
                    if (iw < 0 || iw >= Wd) continue;
                    if (need_x)
                      dx.data[static_cast<size_t>(xbase + ih * Wd + iw)] +=
                          gv * wp[(cg * kh + r) * kw + c];
                    if (need_w)
                      dwp[(cg * kh + r) * kw + c] +=
                          gv * Xv.data[static_cast<size_t>(xbase + ih * Wd + iw)];
                  }
                }
              }
            }
          }
        }
      }
      if (need_x) tt.accumulate(x, dx);
      if (need_w) tt.accumulate(w, dw);
      if (need_b) tt.accumulate(b, db);
    };
  }
  return t.push(std::move(out), rg, std::move(bp));
}

// Zero-pad the H and W axes of an [N,H,W,C] tensor at the bottom/right.
template <typename T>
Value pad_hw(Tape<T>& t, Value x, int64_t ph, int64_t pw) {
  const Tensor<T>& X = t.value(x);
  if (X.rank() != 4) throw ShapeError("pad_hw: need [N,H,W,C], got " + shape_str(X.shape));
  if (ph < 0 || pw < 0) throw ConfigError("pad_hw: negative padding");
  const int64_t N = X.shape[0], H = X.shape[1], W = X.shape[2], C = X.shape[3];
  Tensor<T> out({N, H + ph, W + pw, C});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w) {
        const T* src = X.data.data() + ((n * H + h) * W + w) * C;
        T* dst = out.data.data() + ((n * (H + ph) + h) * (W + pw) + w) * C;
        for (int64_t c = 0; c < C; ++c) dst[c] = src[c];
      }
  const bool rg = t.requires_grad(x);
  std::function<void(Tape<T>&)> bp;
  if (t.grad_enabled() && rg) {
    const Value out_v{static_cast<int32_t>(t.size())};
    bp = [x, out_v, N, H, W, C, ph, pw](Tape<T>& tt) {
      const Tensor<T>& g = tt.grad_buffer(out_v);
      Tensor<T>& xg = tt.grad_buffer(x);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t h = 0; h < H; ++h)
          for (int64_t w = 0; w < W; ++w) {
            const T* src = g.data.data() + ((n * (H + ph) + h) * (W + pw) + w) * C;
            T* dst = xg.data.data() + ((n * H + h) * W + w) * C;
            for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
          }
    };
  }
  return t.push(std::move(out), rg, std::move(bp));
}

// Top-left crop of the H and W axes of an [N,H,W,C] tensor.
template <typename T>
Value crop_hw(Tape<T>& t, Value x, int64_t nh, int64_t nw) {
  const Tensor<T>& X = t.value(x);
  if (X.rank() != 4) throw ShapeError("crop_hw: need [N,H,W,C], got " + shape_str(X.shape));
  const int64_t N = X.shape[0], H = X.shape[1], W = X.shape[2], C = X.shape[3];
  if (nh < 1 || nw < 1 || nh > H || nw > W)
    throw ShapeError("crop_hw: crop " + std::to_string(nh) + "x" + std::to_string(nw) +
                     " out of range for " + shape_str(X.shape));
  Tensor<T> out({N, nh, nw, C});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t h = 0; h < nh; ++h)
      for (int64_t w = 0; w < nw; ++w) {
        const T* src = X.data.data() + ((n * H + h) * W + w) * C;
        T* dst = out.data.data() + ((n * nh + h) * nw + w) * C;
        for (int64_t c = 0; c < C; ++c) dst[c] = src[c];
      }
  const bool rg = t.requires_grad(x);
  std::function<void(Tape<T>&)> bp;
  if (t.grad_enabled() && rg) {
    const Value out_v{static_cast<int32_t>(t.size())};
    bp = [x, out_v, N, H, W, C, nh, nw](Tape<T>& tt) {
      const Tensor<T>& g = tt.grad_buffer(out_v);
      Tensor<T>& xg = tt.grad_buffer(x);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t h = 0; h < nh; ++h)
          for (int64_t w = 0; w < nw; ++w) {
            const T* src = g.data.data() + ((n * nh + h) * nw + w) * C;
            T* dst = xg.data.data() + ((n * H + h) * W + w) * C;
            for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
          }
    };
  }
  return t.push(std::move(out), rg, std::move(bp));
}

// Mean over one axis (the axis is removed from the shape).
template <typename T>
Value mean_axis(Tape<T>& t, Value x, int axis) {
  const Tensor<T>& X = t.value(x);
  const int r = X.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ShapeError("mean_axis: axis " + std::to_string(axis) + " for rank " + std::to_string(r));
  const int64_t n = X.shape[static_cast<size_t>(axis)];
  Shape oshape;
  for (int i = 0; i < r; ++i)
    if (i != axis) oshape.push_back(X.shape[static_cast<size_t>(i)]);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= X.shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= X.shape[static_cast<size_t>(i)];
  Tensor<T> out(oshape);
  const T invn = T(1) / static_cast<T>(n);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t a = 0; a < n; ++a) {
      const T* src = X.data.data() + (o * n + a) * inner;
      T* dst = out.data.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i] * invn;
    }
  const bool rg = t.requires_grad(x);
  std::function<void(Tape<T>&)> bp;
  if (t.grad_enabled() && rg) {
    const Value out_v{static_cast<int32_t>(t.size())};
    bp = [x, out_v, outer, inner, n, invn](Tape<T>& tt) {
      const Tensor<T>& g = tt.grad_buffer(out_v);
      Tensor<T>& xg = tt.grad_buffer(x);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t a = 0; a < n; ++a) {
          const T* src = g.data.data() + o * inner;
          T* dst = xg.data.data() + (o * n + a) * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i] * invn;
        }
    };
  }
  return t.push(std::move(out), rg, std::move(bp));
}

// Mean over the spatial axes of an [N,H,W,C] tensor -> [N,C].
template <typename T>
Value global_avg_pool(Tape<T>& t, Value x) {
  const Tensor<T>& X = t.value(x);
  if (X.rank() != 4)
    throw ShapeError("global_avg_pool: need [N,H,W,C], got " + shape_str(X.shape));
  const int64_t N = X.shape[0], P = X.shape[1] * X.shape[2], C = X.shape[3];
  return mean_axis(t, reshape(t, x, {N, P, C}), 1);
}

template <typename T>
Value sum_all(Tape<T>& t, Value x) {
  const Tensor<T>& X = t.value(x);
  T s = T(0);
  for (const T v : X.data) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  const bool rg = t.requires_grad(x);
  std::function<void(Tape<T>&)> bp;
  if (t.grad_enabled() && rg) {
    const Value out_v{static_cast<int32_t>(t.size())};
    bp = [x, out_v](Tape<T>& tt) {
      const T g = tt.grad_buffer(out_v)[0];
      Tensor<T>& xg = tt.grad_buffer(x);
      for (int64_t i = 0; i < xg.numel(); ++i) xg[i] += g;
    };
  }
  return t.push(std::move(out), rg, std::move(bp));
}

// Mean cross-entropy from logits [B,K] against integer labels, with
// log-sum-exp stabilization. Non-finite loss raises a numeric error.
template <typename T>
Value cross_entropy(Tape<T>& t, Value logits, const std::vector<int64_t>& labels) {
  const Tensor<T>& Z = t.value(logits);
  if (Z.rank() != 2)
    throw ShapeError("cross_entropy: logits must be [B,K], got " + shape_str(Z.shape));
  const int64_t B = Z.shape[0], K = Z.shape[1];
  if (static_cast<int64_t>(labels.size()) != B)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(B));
  for (const int64_t y : labels)
    if (y < 0 || y >= K)
      throw ShapeError("cross_entropy: label " + std::to_string(y) + " out of range [0," +
                       std::to_string(K) + ")");
  Tensor<T> probs({B, K});
  double loss = 0.0;
  for (int64_t r = 0; r < B; ++r) {
    const T* z = Z.data.data() + r * K;
    T mx = z[0];
    for (int64_t i = 1; i < K; ++i) mx = std::max(mx, z[i]);
    double sum = 0.0;
    for (int64_t i = 0; i < K; ++i) sum += std::exp(static_cast<double>(z[i] - mx));
    const double lse = static_cast<double>(mx) + std::log(sum);
    loss += lse - static_cast<double>(z[labels[static_cast<size_t>(r)]]);
    for (int64_t i = 0; i < K; ++i)
      probs.data[static_cast<size_t>(r * K + i)] =
          static_cast<T>(std::exp(static_cast<double>(z[i]) - lse));
  }
  loss /= static_cast<double>(B);
  if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
  const bool rg = t.requires_grad(logits);
  std::function<void(Tape<T>&)> bp;
  if (t.grad_enabled() && rg) {
    const Value out_v{static_cast<int32_t>(t.size())};
    bp = [logits, out_v, probs, labels, B, K](Tape<T>& tt) {
      const T g = tt.grad_buffer(out_v)[0];
      Tensor<T>& zg = tt.grad_buffer(logits);
      const T invb = T(1) / static_cast<T>(B);
      for (int64_t r = 0; r < B; ++r)
        for (int64_t i = 0; i < K; ++i) {
          T p = probs[r * K + i];
          if (i == labels[static_cast<size_t>(r)]) p -= T(1);
          zg[r * K + i] += g * p * invb;
        }
    };
  }
  return t.push(Tensor<T>::scalar(static_cast<T>(loss)), rg, std::move(bp));
}

// Stochastic depth over the leading (sample) axis: each sample's residual
// branch is kept with probability 1-p and scaled by 1/(1-p), or zeroed.
// Identity (same tape value, no node) in eval mode or when p == 0.
// Consumes exactly one uniform draw per sample in train mode.
template <typename T>
Value drop_path(Tape<T>& t, Value x, double p, bool train, Rng& rng) {
  if (p < 0.0 || p >= 1.0)
    throw ConfigError("drop_path: drop probability must be in [0,1), got " + std::to_string(p));
  if (!train || p == 0.0) return x;
  const Tensor<T>& X = t.value(x);
  if (X.rank() < 1) throw ShapeError("drop_path: input must have a sample axis");
  const int64_t N = X.shape[0];
  const int64_t per = X.numel() / std::max<int64_t>(N, 1);
  std::vector<T> factor(static_cast<size_t>(N));
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (int64_t n = 0; n < N; ++n)
    factor[static_cast<size_t>(n)] = rng.uniform() >= p ? keep_scale : T(0);
  Tensor<T> out(X.shape);
  for (int64_t n = 0; n < N; ++n) {
    const T f = factor[static_cast<size_t>(n)];
    const T* src = X.data.data() + n * per;
    T* dst = out.data.data() + n * per;
    for (int64_t i = 0; i < per; ++i) dst[i] = src[i] * f;
  }
  const bool rg = t.requires_grad(x);
  std::function<void(Tape<T>&)> bp;
  if (t.grad_enabled() && rg) {
    const Value out_v{static_cast<int32_t>(t.size())};
    bp = [x, out_v, factor, N, per](Tape<T>& tt) {
      const Tensor<T>& g = tt.grad_buffer(out_v);
      Tensor<T>& xg = tt.grad_buffer(x);
      for (int64_t n = 0; n < N; ++n) {
        const T f = factor[static_cast<size_t>(n)];
        const T* src = g.data.data() + n * per;
        T* dst = xg.data.data() + n * per;
        for (int64_t i = 0; i < per; ++i) dst[i] += src[i] * f;
      }
    };
  }
  return t.push(std::move(out), rg, std::move(bp));
}

}  // namespace davit
