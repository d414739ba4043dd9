#pragma once

// Built-in diagnostics: a list of named checks comparing the fast kernels
// against slow reference implementations, verifying geometry contracts,
// serialization round-trips, determinism, and (at the "full" level)
// finite-difference gradient checks in float64.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "analysis.hpp"
#include "attention.hpp"
#include "grad_check.hpp"
#include "io.hpp"
#include "model.hpp"
#include "oracles.hpp"
#include "ops.hpp"
#include "train.hpp"

namespace davit {

enum class SelftestLevel { Quick, Full };

inline SelftestLevel selftest_level_from_string(const std::string& s) {
  if (s == "quick") return SelftestLevel::Quick;
  if (s == "full") return SelftestLevel::Full;
  throw ConfigError("unknown selftest level: " + s + " (expected quick|full)");
}

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double millis = 0.0;
};

namespace detail {

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <typename T>
double max_abs(const Tensor<T>& a) {
  double m = 0.0;
  for (const T v : a.data) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

class CheckRunner {
 public:
  void run(const std::string& name, const std::function<std::string()>& body) {
    CheckResult r;
    r.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      r.detail = body();  // empty string = pass with no commentary
      r.pass = true;
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = e.what();
    }
    const auto t1 = std::chrono::steady_clock::now();
    r.millis = std::chrono::duration<double, std::milli>(t1 - t0).count();
    results_.push_back(std::move(r));
  }

  std::vector<CheckResult> take() { return std::move(results_); }

 private:
  std::vector<CheckResult> results_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw NumericError(msg);
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

// Random attention inputs for equivalence sweeps.
struct AttnCase {
  Tensor<double> x;
  AttentionParams<double> p;
};

inline AttnCase random_attn_case(Rng& rng, int64_t B, int64_t P, int64_t C, int heads) {
  AttnCase c;
  c.x = rand_uniform<double>(rng, {B, P, C}, -1.0, 1.0);
  c.p = AttentionParams<double>::init(C, heads, rng, 0.2);
  for (auto* b : {&c.p.b_q, &c.p.b_k, &c.p.b_v, &c.p.b_o})
    *b = rand_uniform<double>(rng, {C}, -0.1, 0.1);
  return c;
}

}  // namespace detail

inline std::vector<CheckResult> run_selftest(SelftestLevel level) {
  using detail::fmt;
  using detail::max_abs;
  using detail::max_abs_diff;
  using detail::require;
  detail::CheckRunner cr;

  cr.run("rng_determinism", [] {
    Rng a(7), b(7);
    for (int i = 0; i < 64; ++i)
      require(a.next_u64() == b.next_u64(), "same-seed streams diverged");
    Rng c(7);
    double mean = 0;
    const int n = 4096;
    for (int i = 0; i < n; ++i) mean += c.normal();
    mean /= n;
    require(std::abs(mean) < 0.1, "normal sample mean off: " + fmt(mean));
    return std::string();
  });

  cr.run("broadcast_shapes", [] {
    const Shape s = broadcast_shapes({4, 1, 3}, {2, 1}, "selftest");
    require(s == Shape({4, 2, 3}), "broadcast result wrong");
    bool threw = false;
    try {
      broadcast_shapes({3}, {4}, "selftest");
    } catch (const ShapeError&) {
      threw = true;
    }
    require(threw, "incompatible broadcast not rejected");
    return std::string();
  });

  cr.run("matmul_vs_loop_reference", [&] {
    Rng rng(11);
    double worst = 0;
    for (int it = 0; it < 20; ++it) {
      const int64_t m = 1 + rng.uniform_int(8), k = 1 + rng.uniform_int(8),
                    n = 1 + rng.uniform_int(8);
      const auto a = rand_uniform<double>(rng, {m, k}, -2, 2);
      const auto b = rand_uniform<double>(rng, {k, n}, -2, 2);
      worst = std::max(worst, max_abs_diff(matmul_raw(a, b), oracle::matmul_loop(a, b)));
    }
    require(worst < 1e-12, "matmul mismatch " + fmt(worst));
    return "max diff " + fmt(worst);
  });

  cr.run("softmax_rows_sum_to_one", [] {
    Tape<double> t(false);
    Rng rng(3);
    const Value y = softmax_lastaxis(t, t.leaf(rand_uniform<double>(rng, {4, 9}, -5, 5)));
    const Tensor<double>& v = t.value(y);
    for (int64_t r = 0; r < 4; ++r) {
      double s = 0;
      for (int64_t c = 0; c < 9; ++c) s += v[r * 9 + c];
      require(std::abs(s - 1.0) < 1e-12, "row sum " + fmt(s));
    }
    return std::string();
  });

  cr.run("gelu_matches_series_cdf", [] {
    Tape<double> t(false);
    Tensor<double> x({5}, {-2.0, -0.5, 0.0, 0.5, 1.0});
    const Tensor<double>& y = t.value(gelu(t, t.leaf(x)));
    double worst = 0;
    for (int64_t i = 0; i < 5; ++i)
      worst = std::max(worst, std::abs(y[i] - x[i] * oracle::normal_cdf_series(x[i])));
    require(worst < 1e-12, "gelu mismatch " + fmt(worst));
    return std::string();
  });

  cr.run("layer_norm_standardizes_rows", [] {
    Tape<double> t(false);
    Rng rng(5);
    const int64_t R = 6, C = 16;
    const Value g = t.leaf(Tensor<double>::full({C}, 1.0));
    const Value b = t.leaf(Tensor<double>::zeros({C}));
    const Tensor<double>& y =
        t.value(layer_norm(t, t.leaf(rand_uniform<double>(rng, {R, C}, -3, 3)), g, b));
    for (int64_t r = 0; r < R; ++r) {
      double mu = 0, var = 0;
      for (int64_t c = 0; c < C; ++c) mu += y[r * C + c];
      mu /= C;
      for (int64_t c = 0; c < C; ++c) var += (y[r * C + c] - mu) * (y[r * C + c] - mu);
      var /= C;
      require(std::abs(mu) < 1e-10 && std::abs(var - 1.0) < 1e-3,
              "row stats mu=" + fmt(mu) + " var=" + fmt(var));
    }
    return std::string();
  });

  cr.run("conv_output_geometry", [] {
    Tape<double> t(false);
    const Value x = t.leaf(Tensor<double>::zeros({1, 3, 224, 224}));
    const Value w = t.leaf(Tensor<double>::zeros({8, 3, 7, 7}));
    const Value b = t.leaf(Tensor<double>::zeros({8}));
    const Shape s = t.value(conv2d(t, x, w, b, 4, 3)).shape;
    require(s == Shape({1, 8, 56, 56}), "7/4/3 stem on 224 gave " + shape_str(s));
    return std::string();
  });

  cr.run("window_partition_roundtrip", [] {
    Tape<double> t(false);
    Rng rng(9);
    const Tensor<double> x = rand_uniform<double>(rng, {2, 8, 12, 5}, -1, 1);
    const Value part = window_partition(t, t.leaf(x), 4);
    require(t.value(part).shape == Shape({2 * 2 * 3, 16, 5}), "partition shape wrong");
    const Tensor<double>& back = t.value(window_reverse(t, part, WindowGrid(8, 12, 4)));
    require(max_abs_diff(back, x) == 0.0, "roundtrip not exact");
    return std::string();
  });

  const int sweep = level == SelftestLevel::Full ? 120 : 12;

  cr.run("global_attention_matches_reference", [&] {
    Rng rng(21);
    double worst = 0;
    for (int it = 0; it < sweep; ++it) {
      const int heads = 1 << rng.uniform_int(3);
      const int64_t C = heads * (4 + 4 * rng.uniform_int(3));
      const auto c = detail::random_attn_case(rng, 1 + rng.uniform_int(2),
                                              4 + rng.uniform_int(29), C, heads);
      const Tensor<double> got = global_mhsa(c.x, c.p);
      const Tensor<double> want = oracle::mhsa_loop(c.x, c.p);
      worst = std::max(worst, max_abs_diff(got, want) / std::max(1.0, max_abs(want)));
    }
    require(worst < 1e-6, "mismatch " + fmt(worst));
    return std::to_string(sweep) + " cases, max rel diff " + fmt(worst);
  });

  cr.run("window_attention_matches_reference", [&] {
    Rng rng(22);
    double worst = 0;
    for (int it = 0; it < sweep; ++it) {
      const int heads = 1 << rng.uniform_int(3);
      const int64_t C = heads * (4 + 4 * rng.uniform_int(3));
      const int64_t s = 2 + rng.uniform_int(3);
      const int64_t h = s * (1 + rng.uniform_int(3)), w = s * (1 + rng.uniform_int(3));
      AttentionParams<double> p = AttentionParams<double>::init(C, heads, rng, 0.2);
      const Tensor<double> x = rand_uniform<double>(rng, {2, h, w, C}, -1, 1);
      const Tensor<double> got = window_attention(x, p, s);
      const Tensor<double> want = oracle::window_attention_loop(x, p, s);
      worst = std::max(worst, max_abs_diff(got, want) / std::max(1.0, max_abs(want)));
    }
    require(worst < 1e-6, "mismatch " + fmt(worst));
    return std::to_string(sweep) + " cases, max rel diff " + fmt(worst);
  });

  cr.run("channel_attention_matches_reference", [&] {
    Rng rng(23);
    double worst = 0;
    for (int it = 0; it < sweep; ++it) {
      const int groups = 1 << rng.uniform_int(3);
      const int64_t C = groups * (4 + 4 * rng.uniform_int(3));
      const auto mode = it % 2 == 0 ? ChannelScale::InvSqrtGroupDim : ChannelScale::InvSqrtTokens;
      const auto c = detail::random_attn_case(rng, 1 + rng.uniform_int(2),
                                              4 + rng.uniform_int(29), C, groups);
      const Tensor<double> got = channel_group_attention(c.x, c.p, mode);
      const Tensor<double> want = oracle::channel_attention_loop(c.x, c.p, mode);
      worst = std::max(worst, max_abs_diff(got, want) / std::max(1.0, max_abs(want)));
    }
    require(worst < 1e-6, "mismatch " + fmt(worst));
    return std::to_string(sweep) + " cases, max rel diff " + fmt(worst);
  });

  cr.run("model_forward_shape_and_finiteness", [] {
    const Model<float> m = build_model<float>("micro", 77);
    Rng rng(1);
    const Tensor<float> x = rand_uniform<float>(rng, {2, 3, 32, 32}, 0, 1);
    const Tensor<float> logits = forward(m, x);
    require(logits.shape == Shape({2, 4}), "logits shape " + shape_str(logits.shape));
    for (const float v : logits.data)
      require(std::isfinite(v), "non-finite logit");
    return std::string();
  });

  cr.run("forward_is_deterministic", [] {
    const Model<float> a = build_model<float>("micro", 123);
    const Model<float> b = build_model<float>("micro", 123);
    Rng rng(2);
    const Tensor<float> x = rand_uniform<float>(rng, {1, 3, 32, 32}, 0, 1);
    const Tensor<float> la = forward(a, x), lb = forward(b, x);
    require(la.data == lb.data, "same seed, same input, different logits");
    return std::string();
  });

  cr.run("checkpoint_roundtrip_bitexact", [] {
    const Model<float> m = build_model<float>("micro", 5);
    const std::string path = "/tmp/davit_selftest_ckpt.bin";
    save_checkpoint(m, path);
    const Model<float> r = load_checkpoint<float>(path);
    require(r.names == m.names, "parameter name order changed");
    for (size_t i = 0; i < m.params.size(); ++i)
      require(r.params[i].data == m.params[i].data, "payload differs at " + m.names[i]);
    std::remove(path.c_str());
    return std::string();
  });

  cr.run("tensor_file_roundtrip", [] {
    Rng rng(6);
    const Tensor<double> x = rand_uniform<double>(rng, {3, 5, 2}, -4, 4);
    const std::string path = "/tmp/davit_selftest_tensor.bin";
    write_tensor_file(path, x);
    const Tensor<double> y = read_tensor_file_as<double>(path);
    require(y.shape == x.shape && y.data == x.data, "tensor file roundtrip failed");
    std::remove(path.c_str());
    return std::string();
  });

  cr.run("cost_report_rows_sum_to_totals", [] {
    const CostReport rep = count_costs(ModelConfig::preset("tiny"), 224);
    int64_t p = 0, f = 0;
    for (const auto& row : rep.rows) {
      p += row.params;
      f += row.flops;
    }
    require(p == rep.total_params && f == rep.total_flops, "row totals drift");
    return std::string();
  });

  cr.run("schedule_triangle_shape", [] {
    TriangularSchedule s;
    s.peak_lr = 1.0;
    s.total_steps = 100;
    require(s.lr_at(0) == 0.0 && s.lr_at(100) == 0.0, "endpoints not at floor");
    require(std::abs(s.lr_at(50) - 1.0) < 1e-12, "peak not at midpoint");
    require(std::abs(s.lr_at(75) - 0.5) < 1e-12, "descent not linear");
    return std::string();
  });

  if (level == SelftestLevel::Full) {
    cr.run("grad_elementwise_ops_f64", [] {
      Rng rng(31);
      const auto x = rand_uniform<double>(rng, {3, 7}, -2, 2);
      double worst = 0;
      worst = std::max(worst, grad_check([](Tape<double>& t, Value v) {
                         return sum_all(t, gelu(t, v));
                       }, x));
      worst = std::max(worst, grad_check([](Tape<double>& t, Value v) {
                         return sum_all(t, mul(t, softmax_lastaxis(t, v), v));
                       }, x));
      require(worst < 1e-4, "max rel err " + fmt(worst));
      return "max rel err " + fmt(worst);
    });

    cr.run("grad_matmul_layernorm_f64", [] {
      Rng rng(32);
      const auto a = rand_uniform<double>(rng, {4, 6}, -1, 1);
      const auto b = rand_uniform<double>(rng, {6, 5}, -1, 1);
      const auto g = rand_uniform<double>(rng, {5}, 0.5, 1.5);
      const auto be = rand_uniform<double>(rng, {5}, -0.5, 0.5);
      const auto rep = grad_check_multi(
          [](Tape<double>& t, const std::vector<Value>& vs) {
            return sum_all(t, gelu(t, layer_norm(t, matmul(t, vs[0], vs[1]), vs[2], vs[3])));
          },
          {a, b, g, be});
      require(rep.max_rel_err < 1e-4, "max rel err " + fmt(rep.max_rel_err));
      return "max rel err " + fmt(rep.max_rel_err);
    });

    cr.run("grad_conv2d_f64", [] {
      Rng rng(33);
      const auto x = rand_uniform<double>(rng, {1, 2, 6, 6}, -1, 1);
      const auto w = rand_uniform<double>(rng, {3, 2, 3, 3}, -1, 1);
      const auto b = rand_uniform<double>(rng, {3}, -1, 1);
      const auto rep = grad_check_multi(
          [](Tape<double>& t, const std::vector<Value>& vs) {
            return sum_all(t, gelu(t, conv2d(t, vs[0], vs[1], vs[2], 2, 1)));
          },
          {x, w, b});
      require(rep.max_rel_err < 1e-4, "max rel err " + fmt(rep.max_rel_err));
      return "max rel err " + fmt(rep.max_rel_err);
    });

    cr.run("grad_window_attention_f64", [] {
      Rng rng(34);
      const auto x = rand_uniform<double>(rng, {1, 4, 6, 8}, -1, 1);
      AttentionParams<double> p = AttentionParams<double>::init(8, 2, rng, 0.25);
      const auto rep = grad_check_multi(
          [&](Tape<double>& t, const std::vector<Value>& vs) {
            AttentionValues av = place(t, p);
            av.w_q = vs[1];
            av.w_o = vs[2];
            return sum_all(t, window_attention(t, vs[0], av, 2));
          },
          {x, p.w_q, p.w_o}, 1e-5, 24);
      require(rep.max_rel_err < 1e-4, "max rel err " + fmt(rep.max_rel_err));
      return "max rel err " + fmt(rep.max_rel_err);
    });

    cr.run("grad_channel_attention_f64", [] {
      Rng rng(35);
      const auto x = rand_uniform<double>(rng, {1, 10, 8}, -1, 1);
      AttentionParams<double> p = AttentionParams<double>::init(8, 2, rng, 0.25);
      const auto rep = grad_check_multi(
          [&](Tape<double>& t, const std::vector<Value>& vs) {
            AttentionValues av = place(t, p);
            av.w_v = vs[1];
            av.w_o = vs[2];
            return sum_all(t, channel_group_attention(t, vs[0], av));
          },
          {x, p.w_v, p.w_o}, 1e-5, 24);
      require(rep.max_rel_err < 1e-4, "max rel err " + fmt(rep.max_rel_err));
      return "max rel err " + fmt(rep.max_rel_err);
    });

    cr.run("grad_end_to_end_micro_f64", [] {
      Model<double> m = build_model<double>("micro_grad", 17);
      Rng rng(36);
      const Tensor<double> img = rand_uniform<double>(rng, {2, 3, 8, 8}, 0, 1);
      const std::vector<int64_t> labels = {1, 3};
      std::vector<Tensor<double>> inputs;
      inputs.push_back(img);
      for (const auto& p : m.params) inputs.push_back(p);
      const auto rep = grad_check_multi(
          [&](Tape<double>& t, const std::vector<Value>& vs) {
            const std::vector<Value> pv(vs.begin() + 1, vs.end());
            const auto out = model_forward(t, m, pv, vs[0], RunMode::Eval);
            return cross_entropy(t, out.logits, labels);
          },
          inputs, 1e-4, 3, 99);
      require(rep.max_rel_err < 1e-3, "max rel err " + fmt(rep.max_rel_err));
      return "max rel err " + fmt(rep.max_rel_err) + " over " +
             std::to_string(rep.coords_checked) + " coords";
    });
  }

  return cr.take();
}

// Render results; returns true when everything passed.
inline bool print_selftest(const std::vector<CheckResult>& results, std::ostream& os) {
  bool all = true;
  for (const auto& r : results) {
    os << (r.pass ? "[PASS] " : "[FAIL] ") << r.name;
    if (!r.detail.empty()) os << " — " << r.detail;
    os << " (" << static_cast<int64_t>(r.millis) << " ms)\n";
    all = all && r.pass;
  }
  os << (all ? "selftest: all checks passed\n" : "selftest: FAILURES present\n");
  return all;
}

}  // namespace davit
