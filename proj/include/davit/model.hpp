#pragma once

// The backbone: four (configurable) stages of stride-convolution patch
// embedding followed by dual blocks. Each dual block runs a spatial
// window-attention sub-block and a grouped channel-attention sub-block, each
// sub-block being: depthwise-conv positional encoding added residually, then
// pre-norm attention with stochastic depth, then (optionally) a second conv
// positional encoding and a pre-norm 4x-expansion FFN. The classifier head is
// global average pool -> layer norm -> linear.

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "attention.hpp"
#include "io.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace davit {

enum class BlockOrder { WindowFirst, ChannelFirst, Parallel };

inline std::string to_string(BlockOrder o) {
  switch (o) {
    case BlockOrder::WindowFirst: return "window_first";
    case BlockOrder::ChannelFirst: return "channel_first";
    default: return "parallel";
  }
}

inline BlockOrder block_order_from_string(const std::string& s) {
  if (s == "window_first") return BlockOrder::WindowFirst;
  if (s == "channel_first") return BlockOrder::ChannelFirst;
  if (s == "parallel") return BlockOrder::Parallel;
  throw ConfigError("unknown block order: " + s);
}

enum class RunMode { Train, Eval };

struct ModelConfig {
  int base_dim = 96;
  std::vector<int> depths{1, 1, 3, 1};
  std::vector<int> num_heads{3, 6, 12, 24};
  int window_size = 7;
  int head_dim = 32;
  int ffn_ratio = 4;
  bool ffn_enabled = true;
  double drop_path_rate = 0.0;
  int num_classes = 1000;
  int in_channels = 3;
  ChannelScale scale_mode = ChannelScale::InvSqrtGroupDim;
  BlockOrder block_order = BlockOrder::WindowFirst;
  std::vector<int> patch_kernels{7, 2, 2, 2};
  std::vector<int> patch_strides{4, 2, 2, 2};
  std::vector<int> patch_pads{3, 0, 0, 0};

  int num_stages() const { return static_cast<int>(depths.size()); }
  int stage_dim(int s) const { return base_dim << s; }

  int stride_product() const {
    int p = 1;
    for (const int s : patch_strides) p *= s;
    return p;
  }

  int total_sub_blocks() const {
    int n = 0;
    for (const int d : depths) n += 2 * d;
    return n;
  }

  void validate() const {
    const size_t ns = depths.size();
    if (ns < 1) throw ConfigError("config: need at least one stage");
    if (num_heads.size() != ns || patch_kernels.size() != ns || patch_strides.size() != ns ||
        patch_pads.size() != ns)
      throw ConfigError("config: depths/num_heads/patch_* must all have " + std::to_string(ns) +
                        " entries");
    if (base_dim < 1 || head_dim < 1 || ffn_ratio < 1 || num_classes < 1 || in_channels < 1)
      throw ConfigError("config: dims, ffn_ratio, classes and channels must be positive");
    if (window_size < 0) throw ConfigError("config: window_size must be >= 0");
    if (drop_path_rate < 0.0 || drop_path_rate >= 1.0)
      throw ConfigError("config: drop_path_rate must be in [0,1)");
    for (size_t s = 0; s < ns; ++s) {
      if (depths[s] < 1) throw ConfigError("config: stage depths must be >= 1");
      if (patch_kernels[s] < 1 || patch_strides[s] < 1 || patch_pads[s] < 0)
        throw ConfigError("config: invalid patch embed geometry at stage " + std::to_string(s + 1));
      const int dim = stage_dim(static_cast<int>(s));
      if (dim != num_heads[s] * head_dim)
        throw ConfigError("config: stage " + std::to_string(s + 1) + " dim " +
                          std::to_string(dim) + " != heads " + std::to_string(num_heads[s]) +
                          " x head_dim " + std::to_string(head_dim));
    }
  }

  // Linear ramp of stochastic-depth rates over the flattened sub-block
  // sequence: 0 at the first sub-block up to drop_path_rate at the last.
  std::vector<double> drop_path_schedule() const {
    const int total = total_sub_blocks();
    std::vector<double> rates(static_cast<size_t>(total), 0.0);
    if (total > 1)
      for (int i = 0; i < total; ++i)
        rates[static_cast<size_t>(i)] = drop_path_rate * i / (total - 1);
    return rates;
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"base_dim", base_dim},
                          {"depths", depths},
                          {"num_heads", num_heads},
                          {"window_size", window_size},
                          {"head_dim", head_dim},
                          {"ffn_ratio", ffn_ratio},
                          {"ffn_enabled", ffn_enabled},
                          {"drop_path_rate", drop_path_rate},
                          {"num_classes", num_classes},
                          {"in_channels", in_channels},
                          {"scale_mode", to_string(scale_mode)},
                          {"block_order", to_string(block_order)},
                          {"patch_kernels", patch_kernels},
                          {"patch_strides", patch_strides},
                          {"patch_pads", patch_pads}};
  }

  static ModelConfig preset(const std::string& name);
  static ModelConfig from_json(const nlohmann::json& j);
};

inline ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig c;  // defaults are the tiny layout
  if (name == "tiny") {
  } else if (name == "small") {
    c.depths = {1, 1, 9, 1};
  } else if (name == "base") {
    c.base_dim = 128;
    c.depths = {1, 1, 9, 1};
    c.num_heads = {4, 8, 16, 32};
  } else if (name == "large") {
    c.base_dim = 192;
    c.depths = {1, 1, 9, 1};
    c.num_heads = {6, 12, 24, 48};
    c.scale_mode = ChannelScale::InvSqrtTokens;
  } else if (name == "huge") {
    c.base_dim = 256;
    c.depths = {1, 1, 9, 1};
    c.num_heads = {8, 16, 32, 64};
    c.scale_mode = ChannelScale::InvSqrtTokens;
  } else if (name == "giant") {
    c.base_dim = 384;
    c.depths = {1, 1, 12, 3};
    c.num_heads = {12, 24, 48, 96};
    c.scale_mode = ChannelScale::InvSqrtTokens;
  } else if (name == "tiny_no_ffn") {
    c.depths = {2, 2, 11, 2};
    c.ffn_enabled = false;
  } else if (name == "small_no_ffn") {
    c.depths = {2, 2, 28, 2};
    c.ffn_enabled = false;
  } else if (name == "base_no_ffn") {
    c.base_dim = 128;
    c.depths = {2, 2, 28, 2};
    c.num_heads = {4, 8, 16, 32};
    c.ffn_enabled = false;
  } else if (name == "micro") {
    // Desk-scale config for the toy training task (32x32 inputs, 4 classes).
    c.base_dim = 32;
    c.num_heads = {1, 2, 4, 8};
    c.window_size = 4;
    c.num_classes = 4;
    c.drop_path_rate = 0.1;
  } else if (name == "micro_grad") {
    // Smallest end-to-end differentiable config: 8x8 inputs stay alive
    // through all four stages via a gentler stem.
    c.base_dim = 16;
    c.head_dim = 16;
    c.num_heads = {1, 2, 4, 8};
    c.window_size = 2;
    c.num_classes = 4;
    c.patch_kernels = {3, 2, 2, 1};
    c.patch_strides = {2, 2, 2, 1};
    c.patch_pads = {1, 0, 0, 0};
  } else {
    throw ConfigError(
        "unknown preset: " + name +
        " (known: tiny, small, base, large, huge, giant, tiny_no_ffn, small_no_ffn, "
        "base_no_ffn, micro, micro_grad)");
  }
  c.validate();
  return c;
}

inline ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  ModelConfig c;
  if (j.contains("preset")) c = preset(j.at("preset").get<std::string>());
  for (const auto& [key, val] : j.items()) {
    if (key == "preset") continue;
    if (key == "base_dim") c.base_dim = val.get<int>();
    else if (key == "depths") c.depths = val.get<std::vector<int>>();
    else if (key == "num_heads") c.num_heads = val.get<std::vector<int>>();
    else if (key == "window_size") c.window_size = val.get<int>();
    else if (key == "head_dim") c.head_dim = val.get<int>();
    else if (key == "ffn_ratio") c.ffn_ratio = val.get<int>();
    else if (key == "ffn_enabled") c.ffn_enabled = val.get<bool>();
    else if (key == "drop_path_rate") c.drop_path_rate = val.get<double>();
    else if (key == "num_classes") c.num_classes = val.get<int>();
    else if (key == "in_channels") c.in_channels = val.get<int>();
    else if (key == "scale_mode") c.scale_mode = channel_scale_from_string(val.get<std::string>());
    else if (key == "block_order") c.block_order = block_order_from_string(val.get<std::string>());
    else if (key == "patch_kernels") c.patch_kernels = val.get<std::vector<int>>();
    else if (key == "patch_strides") c.patch_strides = val.get<std::vector<int>>();
    else if (key == "patch_pads") c.patch_pads = val.get<std::vector<int>>();
    else throw ConfigError("config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parameter layout. Parameters live in a flat, name-addressed list whose
// order is frozen (it is also the initialization and serialization order);
// the index structs let forward find everything without string lookups.
// ---------------------------------------------------------------------------

struct AttnIdx {
  int q_w = -1, q_b = -1, k_w = -1, k_b = -1, v_w = -1, v_b = -1, o_w = -1, o_b = -1;
};

struct SubBlockIdx {
  int cpe1_w = -1, cpe1_b = -1;
  int n1_g = -1, n1_b = -1;
  AttnIdx attn;
  int cpe2_w = -1, cpe2_b = -1;
  int n2_g = -1, n2_b = -1;
  int fc1_w = -1, fc1_b = -1, fc2_w = -1, fc2_b = -1;
  double drop_rate = 0.0;
};

struct BlockIdx {
  SubBlockIdx spatial, channel;
};

struct StageIdx {
  int pe_w = -1, pe_b = -1, pe_ng = -1, pe_nb = -1;
  std::vector<BlockIdx> blocks;
};

struct ModelLayout {
  std::vector<StageIdx> stages;
  int head_ng = -1, head_nb = -1, head_w = -1, head_b = -1;
};

template <typename T>
struct Model {
  ModelConfig config;
  uint64_t seed = 0;
  std::vector<std::string> names;
  std::vector<Tensor<T>> params;
  std::vector<uint8_t> decay;  // 1 = weight decay applies (rank>=2 weights)
  ModelLayout layout;
  std::unordered_map<std::string, int> index;

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& p : params) n += p.numel();
    return n;
  }

  int find(const std::string& name) const {
    const auto it = index.find(name);
    if (it == index.end()) throw ConfigError("model: no parameter named " + name);
    return it->second;
  }
};

template <typename T>
Model<T> build_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model<T> m;
  m.config = cfg;
  m.seed = seed;
  Rng rng(seed);

  auto add_weight = [&](const std::string& name, Shape shape) {
    m.names.push_back(name);
    m.params.push_back(trunc_normal<T>(rng, std::move(shape), 0.02));
    m.decay.push_back(1);
    return static_cast<int>(m.params.size() - 1);
  };
  auto add_bias = [&](const std::string& name, Shape shape) {
    m.names.push_back(name);
    m.params.push_back(Tensor<T>(std::move(shape)));
    m.decay.push_back(0);
    return static_cast<int>(m.params.size() - 1);
  };
  auto add_norm = [&](const std::string& prefix, int64_t dim, int& g_out, int& b_out) {
    m.names.push_back(prefix + ".weight");
    m.params.push_back(Tensor<T>::full({dim}, T(1)));
    m.decay.push_back(0);
    g_out = static_cast<int>(m.params.size() - 1);
    b_out = add_bias(prefix + ".bias", {dim});
  };

  const std::vector<double> rates = cfg.drop_path_schedule();
  size_t sub_index = 0;

  for (int s = 0; s < cfg.num_stages(); ++s) {
    StageIdx stage;
    const int64_t C = cfg.stage_dim(s);
    const int64_t Cin = s == 0 ? cfg.in_channels : cfg.stage_dim(s - 1);
    const int64_t k = cfg.patch_kernels[static_cast<size_t>(s)];
    const std::string pe = "patch_embed" + std::to_string(s + 1);
    stage.pe_w = add_weight(pe + ".proj.weight", {C, Cin, k, k});
    stage.pe_b = add_bias(pe + ".proj.bias", {C});
    add_norm(pe + ".norm", C, stage.pe_ng, stage.pe_nb);

    for (int b = 0; b < cfg.depths[static_cast<size_t>(s)]; ++b) {
      BlockIdx block;
      for (const char* kind : {"spatial", "channel"}) {
        const std::string prefix = "stage" + std::to_string(s + 1) + ".block" +
                                   std::to_string(b + 1) + "." + kind;
        SubBlockIdx sb;
        sb.drop_rate = rates[sub_index++];
        sb.cpe1_w = add_weight(prefix + ".cpe1.weight", {C, 1, 3, 3});
        sb.cpe1_b = add_bias(prefix + ".cpe1.bias", {C});
        add_norm(prefix + ".norm1", C, sb.n1_g, sb.n1_b);
        sb.attn.q_w = add_weight(prefix + ".attn.q.weight", {C, C});
        sb.attn.q_b = add_bias(prefix + ".attn.q.bias", {C});
        sb.attn.k_w = add_weight(prefix + ".attn.k.weight", {C, C});
        sb.attn.k_b = add_bias(prefix + ".attn.k.bias", {C});
        sb.attn.v_w = add_weight(prefix + ".attn.v.weight", {C, C});
        sb.attn.v_b = add_bias(prefix + ".attn.v.bias", {C});
        sb.attn.o_w = add_weight(prefix + ".attn.o.weight", {C, C});
        sb.attn.o_b = add_bias(prefix + ".attn.o.bias", {C});
        if (cfg.ffn_enabled) {
          const int64_t hidden = C * cfg.ffn_ratio;
          sb.cpe2_w = add_weight(prefix + ".cpe2.weight", {C, 1, 3, 3});
          sb.cpe2_b = add_bias(prefix + ".cpe2.bias", {C});
          add_norm(prefix + ".norm2", C, sb.n2_g, sb.n2_b);
          sb.fc1_w = add_weight(prefix + ".ffn.fc1.weight", {C, hidden});
          sb.fc1_b = add_bias(prefix + ".ffn.fc1.bias", {hidden});
          sb.fc2_w = add_weight(prefix + ".ffn.fc2.weight", {hidden, C});
          sb.fc2_b = add_bias(prefix + ".ffn.fc2.bias", {C});
        }
        if (std::string(kind) == "spatial")
          block.spatial = sb;
        else
          block.channel = sb;
      }
      stage.blocks.push_back(block);
    }
    m.layout.stages.push_back(std::move(stage));
  }

  const int64_t Cf = cfg.stage_dim(cfg.num_stages() - 1);
  add_norm("head.norm", Cf, m.layout.head_ng, m.layout.head_nb);
  m.layout.head_w = add_weight("head.fc.weight", {Cf, cfg.num_classes});
  m.layout.head_b = add_bias("head.fc.bias", {cfg.num_classes});

  for (size_t i = 0; i < m.names.size(); ++i) m.index[m.names[i]] = static_cast<int>(i);
  return m;
}

template <typename T>
Model<T> build_model(const std::string& preset, uint64_t seed) {
  return build_model<T>(ModelConfig::preset(preset), seed);
}

// ---------------------------------------------------------------------------
// Forward pass.
// ---------------------------------------------------------------------------

// Captures the softmaxed channel-attention scores [B,Ng,Cg,Cg] of the last
// channel sub-block of one stage (1-based), for feature-map ranking.
template <typename T>
struct ChannelProbe {
  int stage = -1;
  Tensor<T> attn;
  bool captured = false;
};

template <typename T>
struct ForwardValues {
  Value logits;
  std::vector<Value> stage_features;  // [N,h,w,C] per stage
};

template <typename T>
std::vector<Value> place_params(Tape<T>& t, const Model<T>& m, bool requires_grad) {
  std::vector<Value> vals;
  vals.reserve(m.params.size());
  for (const auto& p : m.params) vals.push_back(t.leaf(p, requires_grad));
  return vals;
}

namespace detail {

template <typename T>
AttentionValues attn_values(const std::vector<Value>& pv, const AttnIdx& a, int heads) {
  AttentionValues v;
  v.w_q = pv[static_cast<size_t>(a.q_w)];
  v.b_q = pv[static_cast<size_t>(a.q_b)];
  v.w_k = pv[static_cast<size_t>(a.k_w)];
  v.b_k = pv[static_cast<size_t>(a.k_b)];
  v.w_v = pv[static_cast<size_t>(a.v_w)];
  v.b_v = pv[static_cast<size_t>(a.v_b)];
  v.w_o = pv[static_cast<size_t>(a.o_w)];
  v.b_o = pv[static_cast<size_t>(a.o_b)];
  v.num_heads = heads;
  return v;
}

// x + depthwise3x3(x), NHWC in and out.
template <typename T>
Value conv_pos_enc(Tape<T>& t, Value x, Value w, Value b) {
  const int64_t C = t.value(x).shape[3];
  Value nchw = permute(t, x, {0, 3, 1, 2});
  Value conv = conv2d(t, nchw, w, b, 1, 1, static_cast<int>(C));
  return add(t, x, permute(t, conv, {0, 2, 3, 1}));
}

template <typename T>
struct SubBlockCtx {
  const Model<T>& m;
  const std::vector<Value>& pv;
  RunMode mode;
  Rng* rng;
};

// One attention sub-block: CPE -> pre-norm attention (+drop-path residual),
// then optionally CPE -> pre-norm FFN (+drop-path residual).
template <typename T>
Value sub_block(Tape<T>& t, SubBlockCtx<T>& ctx, Value x, const SubBlockIdx& sb, int heads,
                bool spatial, Value* attn_cap) {
  const ModelConfig& cfg = ctx.m.config;
  const auto& pv = ctx.pv;
  const bool train = ctx.mode == RunMode::Train;
  const Shape& xs = t.value(x).shape;
  const int64_t N = xs[0], h = xs[1], w = xs[2], C = xs[3];

  Value c1 = conv_pos_enc(t, x, pv[static_cast<size_t>(sb.cpe1_w)],
                          pv[static_cast<size_t>(sb.cpe1_b)]);
  Value u = layer_norm(t, c1, pv[static_cast<size_t>(sb.n1_g)], pv[static_cast<size_t>(sb.n1_b)]);
  const AttentionValues av = attn_values<T>(pv, sb.attn, heads);
  Value a;
  if (spatial) {
    a = window_attention(t, u, av, cfg.window_size);
  } else {
    Value flat = reshape(t, u, {N, h * w, C});
    Value att = channel_group_attention(t, flat, av, cfg.scale_mode, attn_cap);
    a = reshape(t, att, {N, h, w, C});
  }
  Value out = add(t, c1, drop_path(t, a, train ? sb.drop_rate : 0.0, train, *ctx.rng));

  if (cfg.ffn_enabled) {
    Value c2 = conv_pos_enc(t, out, pv[static_cast<size_t>(sb.cpe2_w)],
                            pv[static_cast<size_t>(sb.cpe2_b)]);
    Value u2 =
        layer_norm(t, c2, pv[static_cast<size_t>(sb.n2_g)], pv[static_cast<size_t>(sb.n2_b)]);
    Value f = linear(t, gelu(t, linear(t, u2, pv[static_cast<size_t>(sb.fc1_w)],
                                       pv[static_cast<size_t>(sb.fc1_b)])),
                     pv[static_cast<size_t>(sb.fc2_w)], pv[static_cast<size_t>(sb.fc2_b)]);
    out = add(t, c2, drop_path(t, f, train ? sb.drop_rate : 0.0, train, *ctx.rng));
  }
  return out;
}

}  // namespace detail

template <typename T>
ForwardValues<T> model_forward(Tape<T>& t, const Model<T>& m, const std::vector<Value>& pv,
                               Value x, RunMode mode = RunMode::Eval, Rng* rng = nullptr,
                               ChannelProbe<T>* probe = nullptr) {
  const ModelConfig& cfg = m.config;
  const Shape& xs = t.value(x).shape;
  if (xs.size() != 4 || xs[1] != cfg.in_channels)
    throw ShapeError("forward: expected input [N," + std::to_string(cfg.in_channels) +
                     ",H,W], got " + shape_str(xs));
  const int sp = cfg.stride_product();
  if (xs[2] % sp != 0 || xs[3] % sp != 0)
    throw GeometryError("forward: input " + std::to_string(xs[2]) + "x" + std::to_string(xs[3]) +
                        " must be divisible by the total patch stride " + std::to_string(sp));
  Rng fallback(0);
  detail::SubBlockCtx<T> ctx{m, pv, mode, rng ? rng : &fallback};

  ForwardValues<T> out;
  Value cur = x;  // NCHW between stages
  for (int s = 0; s < cfg.num_stages(); ++s) {
    const StageIdx& st = m.layout.stages[static_cast<size_t>(s)];
    cur = conv2d(t, cur, pv[static_cast<size_t>(st.pe_w)], pv[static_cast<size_t>(st.pe_b)],
                 cfg.patch_strides[static_cast<size_t>(s)],
                 cfg.patch_pads[static_cast<size_t>(s)]);
    cur = permute(t, cur, {0, 2, 3, 1});  // NHWC
    cur = layer_norm(t, cur, pv[static_cast<size_t>(st.pe_ng)],
                     pv[static_cast<size_t>(st.pe_nb)]);
    const int heads = cfg.num_heads[static_cast<size_t>(s)];
    for (size_t b = 0; b < st.blocks.size(); ++b) {
      const BlockIdx& blk = st.blocks[b];
      const bool last_block = b + 1 == st.blocks.size();
      Value cap{-1};
      Value* capp =
          probe && probe->stage == s + 1 && last_block ? &cap : nullptr;
      switch (cfg.block_order) {
        case BlockOrder::WindowFirst: {
          Value y = detail::sub_block(t, ctx, cur, blk.spatial, heads, true, nullptr);
          cur = detail::sub_block(t, ctx, y, blk.channel, heads, false, capp);
          break;
        }
        case BlockOrder::ChannelFirst: {
          Value y = detail::sub_block(t, ctx, cur, blk.channel, heads, false, capp);
          cur = detail::sub_block(t, ctx, y, blk.spatial, heads, true, nullptr);
          break;
        }
        case BlockOrder::Parallel: {
          Value ys = detail::sub_block(t, ctx, cur, blk.spatial, heads, true, nullptr);
          Value yc = detail::sub_block(t, ctx, cur, blk.channel, heads, false, capp);
          cur = add(t, add(t, ys, yc), scale(t, cur, -1.0));
          break;
        }
      }
      if (capp && cap.id >= 0) {
        probe->attn = t.value(cap);
        probe->captured = true;
      }
    }
    out.stage_features.push_back(cur);
    if (s + 1 < cfg.num_stages()) cur = permute(t, cur, {0, 3, 1, 2});  // back to NCHW
  }

  Value pooled = global_avg_pool(t, cur);
  Value normed = layer_norm(t, pooled, pv[static_cast<size_t>(m.layout.head_ng)],
                            pv[static_cast<size_t>(m.layout.head_nb)]);
  out.logits = linear(t, normed, pv[static_cast<size_t>(m.layout.head_w)],
                      pv[static_cast<size_t>(m.layout.head_b)]);
  return out;
}

template <typename T>
Tensor<T> forward(const Model<T>& m, const Tensor<T>& x, RunMode mode = RunMode::Eval,
                  Rng* rng = nullptr) {
  Tape<T> t(false);
  const std::vector<Value> pv = place_params(t, m, false);
  return t.value(model_forward(t, m, pv, t.leaf(x), mode, rng).logits);
}

template <typename T>
std::vector<Tensor<T>> forward_features(const Model<T>& m, const Tensor<T>& x,
                                        ChannelProbe<T>* probe = nullptr) {
  Tape<T> t(false);
  const std::vector<Value> pv = place_params(t, m, false);
  const ForwardValues<T> out = model_forward(t, m, pv, t.leaf(x), RunMode::Eval, nullptr, probe);
  std::vector<Tensor<T>> feats;
  feats.reserve(out.stage_features.size());
  for (const Value v : out.stage_features) feats.push_back(t.value(v));
  return feats;
}

// Head applied to a final-stage feature map; decomposition helper so callers
// can verify stage features feed the classifier consistently.
template <typename T>
Tensor<T> apply_head(const Model<T>& m, const Tensor<T>& final_stage_nhwc) {
  Tape<T> t(false);
  const std::vector<Value> pv = place_params(t, m, false);
  Value pooled = global_avg_pool(t, t.leaf(final_stage_nhwc));
  Value normed = layer_norm(t, pooled, pv[static_cast<size_t>(m.layout.head_ng)],
                            pv[static_cast<size_t>(m.layout.head_nb)]);
  return t.value(linear(t, normed, pv[static_cast<size_t>(m.layout.head_w)],
                        pv[static_cast<size_t>(m.layout.head_b)]));
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "DVCP", version u16, manifest length u32 + manifest JSON
// (config, seed, tensor count), then per tensor a u16 name length, the name
// bytes, and a tensor container blob. Tensor order matches the build order.
// ---------------------------------------------------------------------------

inline constexpr uint16_t kCheckpointFormatVersion = 1;

template <typename T>
void save_checkpoint(const Model<T>& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("DVCP", 4);
  detail::write_raw<uint16_t>(os, kCheckpointFormatVersion);
  const nlohmann::json manifest{{"format_version", kCheckpointFormatVersion},
                                {"seed", m.seed},
                                {"config", m.config.to_json()},
                                {"tensor_count", m.params.size()}};
  const std::string mstr = manifest.dump();
  detail::write_raw<uint32_t>(os, static_cast<uint32_t>(mstr.size()));
  os.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
  for (size_t i = 0; i < m.params.size(); ++i) {
    detail::write_raw<uint16_t>(os, static_cast<uint16_t>(m.names[i].size()));
    os.write(m.names[i].data(), static_cast<std::streamsize>(m.names[i].size()));
    write_tensor(os, m.params[i]);
  }
  if (!os) throw IoError("checkpoint: write failed: " + path);
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DVCP", 4) != 0)
    throw IoError("checkpoint: bad magic (not a checkpoint file): " + path);
  const auto version = detail::read_raw<uint16_t>(is, "version");
  if (version != kCheckpointFormatVersion)
    throw IoError("checkpoint: unsupported format version " + std::to_string(version));
  const auto mlen = detail::read_raw<uint32_t>(is, "manifest length");
  std::string mstr(mlen, '\0');
  is.read(mstr.data(), static_cast<std::streamsize>(mlen));
  if (!is) throw IoError("checkpoint: truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mstr);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: manifest is not valid JSON: ") + e.what());
  }
  ModelConfig cfg;
  uint64_t seed = 0;
  size_t count = 0;
  try {
    cfg = ModelConfig::from_json(manifest.at("config"));
    seed = manifest.at("seed").get<uint64_t>();
    count = manifest.at("tensor_count").get<size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: manifest missing fields: ") + e.what());
  }
  Model<T> m = build_model<T>(cfg, seed);
  if (count != m.params.size())
    throw ConfigError("checkpoint: file has " + std::to_string(count) + " tensors, config needs " +
                      std::to_string(m.params.size()));
  for (size_t i = 0; i < count; ++i) {
    const auto nlen = detail::read_raw<uint16_t>(is, "tensor name length");
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    if (!is) throw IoError("checkpoint: truncated tensor name");
    const int idx = [&] {
      const auto it = m.index.find(name);
      if (it == m.index.end())
        throw ConfigError("checkpoint: tensor '" + name + "' does not exist in this config");
      return it->second;
    }();
    Tensor<T> t = read_tensor<T>(is);
    if (t.shape != m.params[static_cast<size_t>(idx)].shape)
      throw ConfigError("checkpoint: dimension mismatch for '" + name + "': file " +
                        shape_str(t.shape) + " vs config " +
                        shape_str(m.params[static_cast<size_t>(idx)].shape));
    m.params[static_cast<size_t>(idx)] = std::move(t);
  }
  return m;
}

// Load and insist the stored config matches an expected one (e.g. a preset
// the caller explicitly requested).
template <typename T>
Model<T> load_checkpoint(const std::string& path, const ModelConfig& expected) {
  Model<T> m = load_checkpoint<T>(path);
  if (m.config.to_json() != expected.to_json())
    throw ConfigError("checkpoint: stored config does not match the requested one");
  return m;
}

}  // namespace davit
