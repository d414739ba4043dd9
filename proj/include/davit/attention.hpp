#pragma once

// Attention building blocks:
//  - global multi-head self-attention over token sequences,
//  - spatial window attention (attention restricted to non-overlapping s×s
//    windows of the feature grid),
//  - grouped channel attention (tokens and channels swap roles; scores are
//    C_g×C_g per group, computed over all spatial positions).
// All three share one projection parameter bundle (q/k/v/output, each C×C
// with bias). Everything is composed from tape primitives, so gradients fall
// out of the op-level backward rules.

#include <cmath>
#include <string>

#include "ops.hpp"
#include "rng.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace davit {

// How channel-attention scores are scaled: by 1/sqrt(group width) (default)
// or by 1/sqrt(token count) (used by the scaled-up presets).
enum class ChannelScale { InvSqrtGroupDim, InvSqrtTokens };

inline std::string to_string(ChannelScale s) {
  return s == ChannelScale::InvSqrtGroupDim ? "inv_sqrt_group_dim" : "inv_sqrt_tokens";
}

inline ChannelScale channel_scale_from_string(const std::string& s) {
  if (s == "inv_sqrt_group_dim") return ChannelScale::InvSqrtGroupDim;
  if (s == "inv_sqrt_tokens") return ChannelScale::InvSqrtTokens;
  throw ConfigError("unknown channel scale mode: " + s);
}

template <typename T>
struct AttentionParams {
  Tensor<T> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  int num_heads = 1;  // heads for spatial attention, groups for channel attention

  void validate() const {
    const Shape sq{dim(), dim()};
    if (w_q.shape != sq || w_k.shape != sq || w_v.shape != sq || w_o.shape != sq)
      throw ConfigError("AttentionParams: projections must all be square of matching size");
    const Shape sb{dim()};
    if (b_q.shape != sb || b_k.shape != sb || b_v.shape != sb || b_o.shape != sb)
      throw ConfigError("AttentionParams: bias shapes must match the projection size");
    if (num_heads < 1 || dim() % num_heads != 0)
      throw ConfigError("AttentionParams: dim " + std::to_string(dim()) +
                        " is not divisible into " + std::to_string(num_heads) + " heads");
  }

  int64_t dim() const { return w_q.rank() == 2 ? w_q.shape[0] : 0; }

  static AttentionParams init(int64_t dim, int heads, Rng& rng, double stddev = 0.02) {
    AttentionParams p;
    p.num_heads = heads;
    p.w_q = trunc_normal<T>(rng, {dim, dim}, stddev);
    p.b_q = Tensor<T>({dim});
    p.w_k = trunc_normal<T>(rng, {dim, dim}, stddev);
    p.b_k = Tensor<T>({dim});
    p.w_v = trunc_normal<T>(rng, {dim, dim}, stddev);
    p.b_v = Tensor<T>({dim});
    p.w_o = trunc_normal<T>(rng, {dim, dim}, stddev);
    p.b_o = Tensor<T>({dim});
    p.validate();
    return p;
  }
};

// Tape handles for one attention parameter bundle.
struct AttentionValues {
  Value w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  int num_heads = 1;
};

template <typename T>
AttentionValues place(Tape<T>& t, const AttentionParams<T>& p, bool requires_grad = false) {
  p.validate();
  AttentionValues v;
  v.w_q = t.leaf(p.w_q, requires_grad);
  v.b_q = t.leaf(p.b_q, requires_grad);
  v.w_k = t.leaf(p.w_k, requires_grad);
  v.b_k = t.leaf(p.b_k, requires_grad);
  v.w_v = t.leaf(p.w_v, requires_grad);
  v.b_v = t.leaf(p.b_v, requires_grad);
  v.w_o = t.leaf(p.w_o, requires_grad);
  v.b_o = t.leaf(p.b_o, requires_grad);
  v.num_heads = p.num_heads;
  return v;
}

// Geometry of a feature grid split into non-overlapping square windows.
struct WindowGrid {
  int64_t h, w;
  int64_t s;

  WindowGrid(int64_t h_, int64_t w_, int64_t s_) : h(h_), w(w_), s(s_) {
    if (s < 1 || h < 1 || w < 1)
      throw GeometryError("WindowGrid: non-positive geometry h=" + std::to_string(h) +
                          " w=" + std::to_string(w) + " s=" + std::to_string(s));
    if (h % s != 0 || w % s != 0)
      throw GeometryError("WindowGrid: grid " + std::to_string(h) + "x" + std::to_string(w) +
                          " is not divisible by window side " + std::to_string(s));
  }

  int64_t windows_h() const { return h / s; }
  int64_t windows_w() const { return w / s; }
  int64_t windows() const { return windows_h() * windows_w(); }
  int64_t window_patches() const { return s * s; }
};

// [N,h,w,C] -> [N·N_w, s², C]; windows ordered row-major over the grid,
// patches row-major within each window. Pure data movement.
template <typename T>
Value window_partition(Tape<T>& t, Value x, int64_t s) {
  const Shape& xs = t.value(x).shape;
  if (xs.size() != 4)
    throw ShapeError("window_partition: need [N,h,w,C], got " + shape_str(xs));
  const int64_t N = xs[0], h = xs[1], w = xs[2], C = xs[3];
  const WindowGrid grid(h, w, s);  // validates divisibility
  Value v = reshape(t, x, {N, h / s, s, w / s, s, C});
  v = permute(t, v, {0, 1, 3, 2, 4, 5});
  return reshape(t, v, {N * grid.windows(), s * s, C});
}

// Exact inverse of window_partition for the given grid.
template <typename T>
Value window_reverse(Tape<T>& t, Value x, const WindowGrid& grid) {
  const Shape& xs = t.value(x).shape;
  if (xs.size() != 3)
    throw ShapeError("window_reverse: need [B,P_w,C], got " + shape_str(xs));
  const int64_t B = xs[0], Pw = xs[1], C = xs[2];
  if (Pw != grid.window_patches())
    throw GeometryError("window_reverse: " + std::to_string(Pw) +
                        " patches per window, grid expects " +
                        std::to_string(grid.window_patches()));
  if (B % grid.windows() != 0)
    throw GeometryError("window_reverse: batch " + std::to_string(B) +
                        " is not a multiple of the " + std::to_string(grid.windows()) +
                        "-window grid");
  const int64_t N = B / grid.windows();
  Value v = reshape(t, x, {N, grid.windows_h(), grid.windows_w(), grid.s, grid.s, C});
  v = permute(t, v, {0, 1, 3, 2, 4, 5});
  return reshape(t, v, {N, grid.h, grid.w, C});
}

// Multi-head self-attention over [B,P,C] tokens: per head, softmax-weighted
// mixing of value rows with 1/sqrt(head dim) score scaling, heads
// concatenated, then the output projection.
template <typename T>
Value global_mhsa(Tape<T>& t, Value x, const AttentionValues& p) {
  const Shape& xs = t.value(x).shape;
  if (xs.size() != 3) throw ShapeError("global_mhsa: need [B,P,C], got " + shape_str(xs));
  const int64_t B = xs[0], P = xs[1], C = xs[2];
  if (t.value(p.w_q).shape != Shape{C, C})
    throw ShapeError("global_mhsa: token dim " + std::to_string(C) +
                     " does not match projection " + shape_str(t.value(p.w_q).shape));
  const int64_t Nh = p.num_heads;
  if (Nh < 1 || C % Nh != 0)
    throw ConfigError("global_mhsa: dim " + std::to_string(C) + " not divisible into " +
                      std::to_string(Nh) + " heads");
  const int64_t Ch = C / Nh;
  auto heads = [&](Value z) {
    return permute(t, reshape(t, z, {B, P, Nh, Ch}), {0, 2, 1, 3});  // [B,Nh,P,Ch]
  };
  Value q = heads(linear(t, x, p.w_q, p.b_q));
  Value k = heads(linear(t, x, p.w_k, p.b_k));
  Value v = heads(linear(t, x, p.w_v, p.b_v));
  Value scores = matmul(t, q, permute(t, k, {0, 1, 3, 2}));            // [B,Nh,P,P]
  scores = scale(t, scores, 1.0 / std::sqrt(static_cast<double>(Ch)));
  Value attn = softmax_lastaxis(t, scores);
  Value ctx = matmul(t, attn, v);                                      // [B,Nh,P,Ch]
  ctx = reshape(t, permute(t, ctx, {0, 2, 1, 3}), {B, P, C});
  return linear(t, ctx, p.w_o, p.b_o);
}

// Attention within non-overlapping square windows of an [N,h,w,C] grid.
// Window side 0 means "one window covering the whole grid". Grids that are
// not window-divisible are zero-padded at the bottom/right to the next
// multiple (padding participates in attention, output is cropped back);
// the side is clamped to the grid when the grid is smaller than the window.
template <typename T>
Value window_attention(Tape<T>& t, Value x, const AttentionValues& p, int64_t window_side) {
  const Shape& xs = t.value(x).shape;
  if (xs.size() != 4) throw ShapeError("window_attention: need [N,h,w,C], got " + shape_str(xs));
  if (window_side < 0) throw ConfigError("window_attention: negative window side");
  const int64_t h = xs[1], w = xs[2];
  if (window_side == 0) {  // full-grid window: plain global attention
    const int64_t N = xs[0], C = xs[3];
    Value flat = reshape(t, x, {N, h * w, C});
    return reshape(t, global_mhsa(t, flat, p), {N, h, w, C});
  }
  const int64_t s = std::min({window_side, h, w});
  const int64_t ph = (s - h % s) % s;
  const int64_t pw = (s - w % s) % s;
  Value xp = (ph || pw) ? pad_hw(t, x, ph, pw) : x;
  const WindowGrid grid(h + ph, w + pw, s);
  Value windows = window_partition(t, xp, s);
  Value attended = global_mhsa(t, windows, p);
  Value back = window_reverse(t, attended, grid);
  return (ph || pw) ? crop_hw(t, back, h, w) : back;
}

// Grouped channel attention over [B,P,C]: channels are split into groups of
// width C_g = C / num_groups; within a group, scores are the C_g×C_g matrix
// QᵀK (a sum over all P positions), scaled, softmaxed, and applied to Vᵀ; the
// result is transposed back so channels again index the last axis. Exposes
// the softmaxed score tensor via `attn_out` for inspection.
template <typename T>
Value channel_group_attention(Tape<T>& t, Value x, const AttentionValues& p,
                              ChannelScale scale_mode = ChannelScale::InvSqrtGroupDim,
                              Value* attn_out = nullptr) {
  const Shape& xs = t.value(x).shape;
  if (xs.size() != 3)
    throw ShapeError("channel_group_attention: need [B,P,C], got " + shape_str(xs));
  const int64_t B = xs[0], P = xs[1], C = xs[2];
  if (t.value(p.w_q).shape != Shape{C, C})
    throw ShapeError("channel_group_attention: channel dim " + std::to_string(C) +
                     " does not match projection " + shape_str(t.value(p.w_q).shape));
  const int64_t Ng = p.num_heads;
  if (Ng < 1 || C % Ng != 0)
    throw ConfigError("channel_group_attention: dim " + std::to_string(C) +
                      " not divisible into " + std::to_string(Ng) + " groups");
  const int64_t Cg = C / Ng;
  Value q = linear(t, x, p.w_q, p.b_q);
  Value k = linear(t, x, p.w_k, p.b_k);
  Value v = linear(t, x, p.w_v, p.b_v);
  Value qt = permute(t, reshape(t, q, {B, P, Ng, Cg}), {0, 2, 3, 1});  // [B,Ng,Cg,P] = Qᵀ
  Value kg = permute(t, reshape(t, k, {B, P, Ng, Cg}), {0, 2, 1, 3});  // [B,Ng,P,Cg]
  Value vt = permute(t, reshape(t, v, {B, P, Ng, Cg}), {0, 2, 3, 1});  // [B,Ng,Cg,P] = Vᵀ
  const double sc = scale_mode == ChannelScale::InvSqrtGroupDim
                        ? 1.0 / std::sqrt(static_cast<double>(Cg))
                        : 1.0 / std::sqrt(static_cast<double>(P));
  Value scores = scale(t, matmul(t, qt, kg), sc);  // [B,Ng,Cg,Cg]
  Value attn = softmax_lastaxis(t, scores);
  if (attn_out) *attn_out = attn;
  Value og = matmul(t, attn, vt);                                      // [B,Ng,Cg,P]
  Value out = reshape(t, permute(t, og, {0, 3, 1, 2}), {B, P, C});
  return linear(t, out, p.w_o, p.b_o);
}

// ---------------------------------------------------------------------------
// Tensor-level conveniences (fresh gradient-free tape per call).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> global_mhsa(const Tensor<T>& x, const AttentionParams<T>& p) {
  Tape<T> t(false);
  const AttentionValues pv = place(t, p, false);
  return t.value(global_mhsa(t, t.leaf(x), pv));
}

template <typename T>
Tensor<T> window_attention(const Tensor<T>& x, const AttentionParams<T>& p, int64_t window_side) {
  Tape<T> t(false);
  const AttentionValues pv = place(t, p, false);
  return t.value(window_attention(t, t.leaf(x), pv, window_side));
}

template <typename T>
Tensor<T> channel_group_attention(const Tensor<T>& x, const AttentionParams<T>& p,
                                  ChannelScale scale_mode = ChannelScale::InvSqrtGroupDim) {
  Tape<T> t(false);
  const AttentionValues pv = place(t, p, false);
  return t.value(channel_group_attention(t, t.leaf(x), pv, scale_mode));
}

template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, int64_t s) {
  Tape<T> t(false);
  return t.value(window_partition(t, t.leaf(x), s));
}

template <typename T>
Tensor<T> window_reverse(const Tensor<T>& x, const WindowGrid& grid) {
  Tape<T> t(false);
  return t.value(window_reverse(t, t.leaf(x), grid));
}

}  // namespace davit
