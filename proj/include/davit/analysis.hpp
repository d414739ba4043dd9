#pragma once

// Parameter and compute accounting, computed from the config alone (no model
// instantiation) by walking the same structure the builder walks. Convention:
// one multiply-accumulate = one FLOP (the convention under which ResNet-50 is
// 4.1G). Matmuls, convolutions and linear layers carry the headline figure;
// norm/softmax/activation element counts are itemized separately and excluded
// from it. All FLOP figures are per single image.

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "io.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace davit {

struct CostRow {
  std::string name;
  std::string term;  // attention | projection | ffn | patch_embed | cpe | norm | head
  long long params = 0;
  long long flops = 0;
  long long elementwise = 0;
};

struct CostReport {
  int resolution = 0;  // 0 = parameter counting only
  long long total_params = 0;
  long long total_params_no_head = 0;
  long long total_flops = 0;
  long long total_elementwise = 0;
  // Exact attention-term MACs (score + mixing matmuls only) vs the closed
  // form 2·P·C·(P_w + C_g) evaluated on unpadded token counts.
  long long attention_term_flops = 0;
  long long attention_term_formula = 0;
  std::vector<CostRow> rows;

  nlohmann::json to_json() const {
    nlohmann::json rj = nlohmann::json::array();
    for (const auto& r : rows)
      rj.push_back({{"name", r.name},
                    {"term", r.term},
                    {"params", r.params},
                    {"flops", r.flops},
                    {"elementwise", r.elementwise}});
    return nlohmann::json{{"resolution", resolution},
                          {"total_params", total_params},
                          {"total_params_no_head", total_params_no_head},
                          {"total_flops", total_flops},
                          {"total_elementwise", total_elementwise},
                          {"attention_term_flops", attention_term_flops},
                          {"attention_term_formula", attention_term_formula},
                          {"rows", rj}};
  }
};

namespace detail {

inline void push_row(CostReport& rep, CostRow row, bool head_term = false) {
  rep.total_params += row.params;
  if (!head_term) rep.total_params_no_head += row.params;
  rep.total_flops += row.flops;
  rep.total_elementwise += row.elementwise;
  rep.rows.push_back(std::move(row));
}

struct SpatialGeom {
  long long tokens = 0;         // real tokens h*w
  long long padded_tokens = 0;  // after padding to a window multiple
  long long window_patches = 0; // effective s^2
};

inline SpatialGeom window_geometry(long long h, long long w, int window) {
  SpatialGeom g;
  g.tokens = h * w;
  if (window == 0) {  // full-grid window: one window over all tokens, no padding
    g.padded_tokens = g.tokens;
    g.window_patches = g.tokens;
    return g;
  }
  const long long s = std::min<long long>({window, h, w});
  const long long hp = (h + s - 1) / s * s;
  const long long wp = (w + s - 1) / s * s;
  g.padded_tokens = hp * wp;
  g.window_patches = s * s;
  return g;
}

}  // namespace detail

// Shared walk for parameter and FLOP accounting. resolution 0 counts
// parameters only; otherwise per-image compute at that input size.
inline CostReport count_costs(const ModelConfig& cfg, int resolution) {
  cfg.validate();
  if (resolution < 0) throw ConfigError("analysis: negative resolution");
  if (resolution > 0) {
    const int sp = cfg.stride_product();
    if (resolution % sp != 0)
      throw GeometryError("analysis: resolution " + std::to_string(resolution) +
                          " must be divisible by the total patch stride " + std::to_string(sp));
  }
  CostReport rep;
  rep.resolution = resolution;
  const bool flops = resolution > 0;

  long long h = resolution, w = resolution;
  for (int s = 0; s < cfg.num_stages(); ++s) {
    const long long C = cfg.stage_dim(s);
    const long long Cin = s == 0 ? cfg.in_channels : cfg.stage_dim(s - 1);
    const long long k = cfg.patch_kernels[static_cast<size_t>(s)];
    const long long stride = cfg.patch_strides[static_cast<size_t>(s)];
    const long long pad = cfg.patch_pads[static_cast<size_t>(s)];
    if (flops) {
      h = (h + 2 * pad - k) / stride + 1;
      w = (w + 2 * pad - k) / stride + 1;
      if (h < 1 || w < 1)
        throw GeometryError("analysis: stage " + std::to_string(s + 1) +
                            " grid collapsed to zero");
    }
    const long long P = flops ? h * w : 0;
    const std::string pe = "patch_embed" + std::to_string(s + 1);
    detail::push_row(rep, {pe + ".proj", "patch_embed", C * Cin * k * k + C,
                           flops ? P * C * Cin * k * k : 0, 0});
    detail::push_row(rep, {pe + ".norm", "norm", 2 * C, 0, flops ? P * C : 0});

    const detail::SpatialGeom geom =
        flops ? detail::window_geometry(h, w, cfg.window_size) : detail::SpatialGeom{};
    const long long Cg = cfg.head_dim;
    const long long groups = cfg.num_heads[static_cast<size_t>(s)];

    for (int b = 0; b < cfg.depths[static_cast<size_t>(s)]; ++b) {
      for (const char* kind : {"spatial", "channel"}) {
        const bool spatial = std::string(kind) == "spatial";
        const std::string prefix = "stage" + std::to_string(s + 1) + ".block" +
                                   std::to_string(b + 1) + "." + kind;
        // Attention input tokens: the spatial sub-block projects and attends
        // on the padded grid; the channel sub-block sees real tokens only.
        const long long Pa = spatial ? geom.padded_tokens : P;
        detail::push_row(rep, {prefix + ".cpe1", "cpe", 10 * C, flops ? 9 * P * C : 0, 0});
        detail::push_row(rep, {prefix + ".norm1", "norm", 2 * C, 0, flops ? P * C : 0});
        detail::push_row(rep, {prefix + ".attn.proj", "projection", 4 * C * C + 4 * C,
                               flops ? 4 * Pa * C * C : 0, 0});
        long long attn_flops = 0, attn_elem = 0, attn_formula = 0;
        if (flops) {
          if (spatial) {
            attn_flops = 2 * geom.padded_tokens * geom.window_patches * C;
            attn_elem = groups * geom.padded_tokens * geom.window_patches;
            attn_formula = 2 * P * C * geom.window_patches;
          } else {
            attn_flops = 2 * P * C * Cg;
            attn_elem = groups * Cg * Cg;
            attn_formula = 2 * P * C * Cg;
          }
        }
        detail::push_row(rep, {prefix + ".attn.scores", "attention", 0, attn_flops, attn_elem});
        rep.attention_term_flops += attn_flops;
        rep.attention_term_formula += attn_formula;
        if (cfg.ffn_enabled) {
          const long long hidden = C * cfg.ffn_ratio;
          detail::push_row(rep, {prefix + ".cpe2", "cpe", 10 * C, flops ? 9 * P * C : 0, 0});
          detail::push_row(rep, {prefix + ".norm2", "norm", 2 * C, 0, flops ? P * C : 0});
          detail::push_row(rep, {prefix + ".ffn", "ffn",
                                 C * hidden + hidden + hidden * C + C,
                                 flops ? 2 * P * C * hidden : 0, flops ? P * hidden : 0});
        }
      }
    }
  }

  const long long Cf = cfg.stage_dim(cfg.num_stages() - 1);
  const long long Pf = flops ? h * w : 0;
  detail::push_row(rep, {"head.pool", "head", 0, 0, flops ? Pf * Cf : 0}, true);
  detail::push_row(rep, {"head.norm", "norm", 2 * Cf, 0, flops ? Cf : 0}, true);
  detail::push_row(rep, {"head.fc", "head", Cf * cfg.num_classes + cfg.num_classes,
                         flops ? Cf * cfg.num_classes : 0, 0},
                   true);
  return rep;
}

inline int64_t count_params(const ModelConfig& cfg) { return count_costs(cfg, 0).total_params; }

inline int64_t count_flops(const ModelConfig& cfg, int resolution) {
  if (resolution <= 0) throw ConfigError("analysis: resolution must be positive");
  return count_costs(cfg, resolution).total_flops;
}

// Attention-term scaling across input resolutions. For windowed + grouped
// attention the MACs-per-token ratio is constant (linear complexity); with a
// full-grid window (window_size = 0) it grows with the token count.
struct ProbeRow {
  int resolution = 0;
  long long tokens = 0;  // stage-1 token count
  long long attention_flops = 0;
  double flops_per_token = 0.0;
};

inline std::vector<ProbeRow> scaling_probe(const ModelConfig& cfg,
                                           const std::vector<int>& resolutions) {
  if (resolutions.size() < 2)
    throw ConfigError("scaling_probe: need at least two resolutions");
  std::vector<ProbeRow> out;
  for (const int res : resolutions) {
    const CostReport rep = count_costs(cfg, res);
    const long long k0 = cfg.patch_kernels[0], s0 = cfg.patch_strides[0],
                    p0 = cfg.patch_pads[0];
    const long long side = (res + 2 * p0 - k0) / s0 + 1;
    ProbeRow row;
    row.resolution = res;
    row.tokens = side * side;
    row.attention_flops = rep.attention_term_flops;
    row.flops_per_token = static_cast<double>(row.attention_flops) /
                          static_cast<double>(row.tokens);
    out.push_back(row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature-map export. Runs the image through the model, captures the selected
// stage's output [h,w,C] and the softmaxed channel-attention scores of that
// stage's last channel sub-block, then writes one min-max-normalized PGM per
// selected channel.
// ---------------------------------------------------------------------------

struct ExportSelection {
  std::vector<int64_t> channels;  // explicit channel list, or
  int top_k = 0;                  // k channels most attended by out_channel
  int64_t out_channel = 0;
};

template <typename T>
std::vector<std::string> export_feature_maps(const Model<T>& m, const Tensor<T>& image,
                                             int stage, const ExportSelection& sel,
                                             const std::string& out_dir) {
  const ModelConfig& cfg = m.config;
  if (stage < 1 || stage > cfg.num_stages())
    throw ConfigError("export: stage " + std::to_string(stage) + " out of range [1," +
                      std::to_string(cfg.num_stages()) + "]");
  const bool explicit_list = !sel.channels.empty();
  if (explicit_list && sel.top_k > 0)
    throw ConfigError("export: choose either an explicit channel list or top-k, not both");
  if (!explicit_list && sel.top_k <= 0)
    throw ConfigError("export: no channels selected");

  Tensor<T> x = image;
  if (x.rank() == 3) {
    Shape s = x.shape;
    s.insert(s.begin(), 1);
    x = Tensor<T>(s, x.data);
  }
  ChannelProbe<T> probe;
  probe.stage = stage;
  const std::vector<Tensor<T>> feats = forward_features(m, x, &probe);
  const Tensor<T>& f = feats[static_cast<size_t>(stage - 1)];  // [N,h,w,C]
  const int64_t h = f.shape[1], w = f.shape[2], C = f.shape[3];

  std::vector<std::pair<int64_t, int>> selected;  // (channel, rank or -1)
  if (explicit_list) {
    for (const int64_t c : sel.channels) {
      if (c < 0 || c >= C)
        throw ConfigError("export: channel " + std::to_string(c) + " out of range [0," +
                          std::to_string(C) + ")");
      selected.emplace_back(c, -1);
    }
  } else {
    if (sel.out_channel < 0 || sel.out_channel >= C)
      throw ConfigError("export: output channel " + std::to_string(sel.out_channel) +
                        " out of range [0," + std::to_string(C) + ")");
    if (!probe.captured) throw NumericError("export: attention probe failed to capture scores");
    const int64_t Ng = probe.attn.shape[1], Cg = probe.attn.shape[2];
    (void)Ng;
    if (sel.top_k > Cg)
      throw ConfigError("export: top-k " + std::to_string(sel.top_k) +
                        " exceeds the channel group width " + std::to_string(Cg));
    const int64_t g = sel.out_channel / Cg, r = sel.out_channel % Cg;
    std::vector<std::pair<double, int64_t>> ranked;  // (-score, source channel)
    for (int64_t c = 0; c < Cg; ++c)
      ranked.emplace_back(-static_cast<double>(probe.attn.at(int64_t(0), g, r, c)), g * Cg + c);
    std::sort(ranked.begin(), ranked.end());
    for (int i = 0; i < sel.top_k; ++i)
      selected.emplace_back(ranked[static_cast<size_t>(i)].second, i);
  }

  std::filesystem::create_directories(out_dir);
  std::vector<std::string> written;
  for (const auto& [c, rank] : selected) {
    Tensor<T> img({h, w});
    for (int64_t r = 0; r < h; ++r)
      for (int64_t cc = 0; cc < w; ++cc) img.at(r, cc) = f.at(int64_t(0), r, cc, c);
    char name[96];
    if (rank >= 0)
      std::snprintf(name, sizeof(name), "stage%d_rank%02d_ch%04lld.pgm", stage, rank,
                    static_cast<long long>(c));
    else
      std::snprintf(name, sizeof(name), "stage%d_ch%04lld.pgm", stage,
                    static_cast<long long>(c));
    const std::string path = (std::filesystem::path(out_dir) / name).string();
    write_pgm(path, img);
    written.push_back(path);
  }
  return written;
}

}  // namespace davit
