// Differentiable operator kernels: forward values against slow references and
// hand-computed cases, gradients against central finite differences (float64).

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>

#include <davit/grad_check.hpp>
#include <davit/oracles.hpp>
#include <davit/ops.hpp>

using namespace davit;

namespace {

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.same_shape(b));
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace

TEST_CASE("matmul matches a hand-computed product") {
  const Tensor<double> a({2, 2}, {1, 2, 3, 4});
  const Tensor<double> b({2, 2}, {5, 6, 7, 8});
  const Tensor<double> c = matmul_raw(a, b);
  REQUIRE(c.data == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul agrees with the loop reference across shapes") {
  Rng rng(42);
  for (int it = 0; it < 30; ++it) {
    const int64_t m = 1 + rng.uniform_int(9);
    const int64_t k = 1 + rng.uniform_int(9);
    const int64_t n = 1 + rng.uniform_int(9);
    const auto a = rand_uniform<double>(rng, {m, k}, -3, 3);
    const auto b = rand_uniform<double>(rng, {k, n}, -3, 3);
    REQUIRE(max_abs_diff(matmul_raw(a, b), oracle::matmul_loop(a, b)) < 1e-12);
  }
}

TEST_CASE("matmul transpose flags") {
  Rng rng(43);
  const auto a = rand_uniform<double>(rng, {4, 6}, -1, 1);
  const auto b = rand_uniform<double>(rng, {4, 5}, -1, 1);
  // a^T b via flags equals explicit transpose
  Tensor<double> at({6, 4});
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 6; ++j) at[j * 4 + i] = a[i * 6 + j];
  REQUIRE(max_abs_diff(matmul_raw(a, b, true, false), matmul_raw(at, b)) < 1e-13);

  const auto c = rand_uniform<double>(rng, {5, 6}, -1, 1);
  Tensor<double> ct({6, 5});
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t j = 0; j < 6; ++j) ct[j * 5 + i] = c[i * 6 + j];
  REQUIRE(max_abs_diff(matmul_raw(a, c, false, true), matmul_raw(a, ct)) < 1e-13);
}

TEST_CASE("matmul broadcasts batch dimensions") {
  Rng rng(44);
  const auto a = rand_uniform<double>(rng, {2, 1, 3, 4}, -1, 1);
  const auto b = rand_uniform<double>(rng, {5, 4, 2}, -1, 1);
  const Tensor<double> c = matmul_raw(a, b);
  REQUIRE(c.shape == Shape({2, 5, 3, 2}));
  // spot-check one slice against the 2-D reference
  Tensor<double> a_slice({3, 4}), b_slice({4, 2});
  for (int64_t i = 0; i < 12; ++i) a_slice[i] = a[1 * 12 + i];
  for (int64_t i = 0; i < 8; ++i) b_slice[i] = b[3 * 8 + i];
  const Tensor<double> want = oracle::matmul_loop(a_slice, b_slice);
  for (int64_t i = 0; i < 6; ++i)
    REQUIRE(c[(1 * 5 + 3) * 6 + i] == Catch::Approx(want[i]).epsilon(1e-12));

  REQUIRE_THROWS_AS(matmul_raw(rand_uniform<double>(rng, {2, 3}, 0, 1),
                               rand_uniform<double>(rng, {4, 2}, 0, 1)),
                    ShapeError);
}

TEST_CASE("matmul result is independent of the thread count") {
  Rng rng(45);
  const auto a = rand_uniform<double>(rng, {6, 9, 17}, -2, 2);
  const auto b = rand_uniform<double>(rng, {6, 17, 11}, -2, 2);
  setenv("DAVIT_THREADS", "1", 1);
  const Tensor<double> c1 = matmul_raw(a, b);
  setenv("DAVIT_THREADS", "4", 1);
  const Tensor<double> c4 = matmul_raw(a, b);
  unsetenv("DAVIT_THREADS");
  REQUIRE(c1.data == c4.data);  // bit-identical
}

TEST_CASE("add and mul broadcast and differentiate") {
  Rng rng(50);
  const auto a = rand_uniform<double>(rng, {3, 4}, -2, 2);
  const auto b = rand_uniform<double>(rng, {4}, -2, 2);

  Tape<double> t(false);
  const Tensor<double>& s = t.value(add(t, t.leaf(a), t.leaf(b)));
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 4; ++j)
      REQUIRE(s[i * 4 + j] == Catch::Approx(a[i * 4 + j] + b[j]));

  const auto rep = grad_check_multi(
      [](Tape<double>& tp, const std::vector<Value>& vs) {
        return sum_all(tp, mul(tp, add(tp, vs[0], vs[1]), vs[0]));
      },
      {a, b});
  REQUIRE(rep.max_rel_err < 1e-6);
}

TEST_CASE("sub and scale") {
  Rng rng(51);
  const auto a = rand_uniform<double>(rng, {5}, -1, 1);
  const auto b = rand_uniform<double>(rng, {5}, -1, 1);
  Tape<double> t(false);
  const Tensor<double>& d = t.value(sub(t, t.leaf(a), t.leaf(b)));
  for (int64_t i = 0; i < 5; ++i) REQUIRE(d[i] == Catch::Approx(a[i] - b[i]));
  const Tensor<double>& h = t.value(scale(t, t.leaf(a), 0.5));
  for (int64_t i = 0; i < 5; ++i) REQUIRE(h[i] == Catch::Approx(0.5 * a[i]));
}

TEST_CASE("reshape and permute round-trip with gradients") {
  Rng rng(52);
  const auto x = rand_uniform<double>(rng, {2, 3, 4}, -1, 1);

  Tape<double> t(false);
  const Value r = reshape(t, t.leaf(x), {4, 6});
  REQUIRE(t.value(r).shape == Shape({4, 6}));
  REQUIRE(t.value(r).data == x.data);
  REQUIRE_THROWS_AS(reshape(t, t.leaf(x), {5, 5}), ShapeError);

  const Value p = permute(t, t.leaf(x), {2, 0, 1});
  REQUIRE(t.value(p).shape == Shape({4, 2, 3}));
  REQUIRE(t.value(p).at(3, 1, 2) == x.at(1, 2, 3));
  REQUIRE_THROWS_AS(permute(t, t.leaf(x), {0, 0, 1}), ShapeError);

  const double err = grad_check(
      [](Tape<double>& tp, Value v) {
        const Value perm = permute(tp, v, {2, 0, 1});
        return sum_all(tp, mul(tp, perm, perm));
      },
      x);
  REQUIRE(err < 1e-6);
}

TEST_CASE("softmax values, stability, and NaN rejection") {
  Tape<double> t(false);
  const Tensor<double> x({3}, {std::log(1.0), std::log(2.0), std::log(3.0)});
  const Tensor<double>& y = t.value(softmax_lastaxis(t, t.leaf(x)));
  REQUIRE(y[0] == Catch::Approx(1.0 / 6.0));
  REQUIRE(y[1] == Catch::Approx(2.0 / 6.0));
  REQUIRE(y[2] == Catch::Approx(3.0 / 6.0));

  // huge logits stay finite thanks to max subtraction
  const Tensor<double>& big =
      t.value(softmax_lastaxis(t, t.leaf(Tensor<double>({2}, {1e4, 1e4 + 1}))));
  REQUIRE(std::isfinite(big[0]));
  REQUIRE(big[0] + big[1] == Catch::Approx(1.0));

  Tensor<double> bad({2}, {0.0, std::nan("")});
  REQUIRE_THROWS_AS(softmax_lastaxis(t, t.leaf(bad)), NumericError);
}

TEST_CASE("softmax gradient") {
  Rng rng(53);
  const auto x = rand_uniform<double>(rng, {3, 5}, -2, 2);
  const auto w = rand_uniform<double>(rng, {3, 5}, -1, 1);
  const double err = grad_check(
      [&](Tape<double>& tp, Value v) {
        return sum_all(tp, mul(tp, softmax_lastaxis(tp, v), tp.leaf(w)));
      },
      x);
  REQUIRE(err < 1e-6);
}

TEST_CASE("layer_norm standardizes and differentiates") {
  Rng rng(54);
  const auto x = rand_uniform<double>(rng, {4, 8}, -3, 3);
  const auto g = rand_uniform<double>(rng, {8}, 0.5, 1.5);
  const auto b = rand_uniform<double>(rng, {8}, -0.5, 0.5);

  Tape<double> t(false);
  const Tensor<double>& y =
      t.value(layer_norm(t, t.leaf(x), t.leaf(Tensor<double>::full({8}, 1.0)),
                         t.leaf(Tensor<double>::zeros({8}))));
  for (int64_t r = 0; r < 4; ++r) {
    double mu = 0;
    for (int64_t c = 0; c < 8; ++c) mu += y[r * 8 + c];
    REQUIRE(std::abs(mu / 8) < 1e-12);
  }

  const auto rep = grad_check_multi(
      [](Tape<double>& tp, const std::vector<Value>& vs) {
        return sum_all(tp, gelu(tp, layer_norm(tp, vs[0], vs[1], vs[2])));
      },
      {x, g, b});
  REQUIRE(rep.max_rel_err < 1e-6);

  REQUIRE_THROWS_AS(layer_norm(t, t.leaf(x), t.leaf(Tensor<double>::zeros({4})),
                               t.leaf(Tensor<double>::zeros({8}))),
                    ShapeError);
}

TEST_CASE("gelu matches the series-evaluated normal CDF") {
  Tape<double> t(false);
  for (double v : {-3.0, -1.0, -0.1, 0.0, 0.5, 1.0, 2.5}) {
    const double got = t.value(gelu(t, t.leaf(Tensor<double>::scalar(v))))[0];
    REQUIRE(got == Catch::Approx(v * oracle::normal_cdf_series(v)).margin(1e-12));
  }
  REQUIRE(t.value(gelu(t, t.leaf(Tensor<double>::scalar(1.0))))[0] ==
          Catch::Approx(0.8413447460685429).margin(1e-12));

  Rng rng(55);
  const double err = grad_check(
      [](Tape<double>& tp, Value v) { return sum_all(tp, gelu(tp, v)); },
      rand_uniform<double>(rng, {17}, -3, 3));
  REQUIRE(err < 1e-6);
}

TEST_CASE("conv2d geometry and a hand-checked case") {
  Tape<double> t(false);
  // 1x1x3x3 input, 1x1x2x2 kernel of ones, stride 1, no padding
  const Tensor<double> x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Tensor<double> w = Tensor<double>::full({1, 1, 2, 2}, 1.0);
  const Tensor<double> b({1}, {0.5});
  const Tensor<double>& y = t.value(conv2d(t, t.leaf(x), t.leaf(w), t.leaf(b), 1, 0));
  REQUIRE(y.shape == Shape({1, 1, 2, 2}));
  REQUIRE(y.data == std::vector<double>{12.5, 16.5, 24.5, 28.5});

  // output size floor rule: (224 + 2*3 - 7)/4 + 1 = 56
  const Value big = conv2d(t, t.leaf(Tensor<double>::zeros({1, 3, 224, 224})),
                           t.leaf(Tensor<double>::zeros({8, 3, 7, 7})),
                           t.leaf(Tensor<double>::zeros({8})), 4, 3);
  REQUIRE(t.value(big).shape == Shape({1, 8, 56, 56}));

  // a kernel bigger than the padded input must be rejected
  REQUIRE_THROWS_AS(conv2d(t, t.leaf(Tensor<double>::zeros({1, 1, 2, 2})),
                           t.leaf(Tensor<double>::zeros({1, 1, 5, 5})),
                           t.leaf(Tensor<double>::zeros({1})), 1, 0),
                    ShapeError);
}

TEST_CASE("depthwise conv2d applies one filter per channel") {
  Tape<double> t(false);
  // two channels, 3x3 identity-center kernels scaled differently
  Tensor<double> x({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  Tensor<double> w = Tensor<double>::zeros({2, 1, 3, 3});
  w.at(0, 0, 1, 1) = 2.0;
  w.at(1, 0, 1, 1) = 3.0;
  const Tensor<double>& y = t.value(conv2d(t, t.leaf(x), t.leaf(w),
                                           t.leaf(Tensor<double>::zeros({2})), 1, 1, 2));
  REQUIRE(y.shape == Shape({1, 2, 2, 2}));
  REQUIRE(y.data == std::vector<double>{2, 4, 6, 8, 30, 60, 90, 120});
}

TEST_CASE("conv2d gradients (dense and grouped)") {
  Rng rng(56);
  const auto x = rand_uniform<double>(rng, {2, 2, 5, 5}, -1, 1);
  const auto w = rand_uniform<double>(rng, {3, 2, 3, 3}, -1, 1);
  const auto b = rand_uniform<double>(rng, {3}, -1, 1);
  const auto rep = grad_check_multi(
      [](Tape<double>& tp, const std::vector<Value>& vs) {
        return sum_all(tp, gelu(tp, conv2d(tp, vs[0], vs[1], vs[2], 2, 1)));
      },
      {x, w, b});
  REQUIRE(rep.max_rel_err < 1e-6);

  const auto xd = rand_uniform<double>(rng, {1, 4, 4, 4}, -1, 1);
  const auto wd = rand_uniform<double>(rng, {4, 1, 3, 3}, -1, 1);
  const auto bd = rand_uniform<double>(rng, {4}, -1, 1);
  const auto repd = grad_check_multi(
      [](Tape<double>& tp, const std::vector<Value>& vs) {
        return sum_all(tp, gelu(tp, conv2d(tp, vs[0], vs[1], vs[2], 1, 1, 4)));
      },
      {xd, wd, bd});
  REQUIRE(repd.max_rel_err < 1e-6);
}

TEST_CASE("pad and crop are inverse and differentiable") {
  Rng rng(57);
  const auto x = rand_uniform<double>(rng, {1, 3, 4, 2}, -1, 1);
  Tape<double> t(false);
  const Value padded = pad_hw(t, t.leaf(x), 2, 1);
  REQUIRE(t.value(padded).shape == Shape({1, 5, 5, 2}));
  REQUIRE(t.value(padded).at(0, 4, 4, 0) == 0.0);
  const Tensor<double>& back = t.value(crop_hw(t, padded, 3, 4));
  REQUIRE(back.data == x.data);

  const double err = grad_check(
      [](Tape<double>& tp, Value v) {
        const Value p = pad_hw(tp, v, 1, 2);
        return sum_all(tp, mul(tp, p, p));
      },
      x);
  REQUIRE(err < 1e-6);
}

TEST_CASE("reductions: mean_axis, pooling, sum_all") {
  const Tensor<double> x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tape<double> t(false);
  const Tensor<double>& m0 = t.value(mean_axis(t, t.leaf(x), 0));
  REQUIRE(m0.shape == Shape({3}));
  REQUIRE(m0.data == std::vector<double>{2.5, 3.5, 4.5});
  const Tensor<double>& m1 = t.value(mean_axis(t, t.leaf(x), 1));
  REQUIRE(m1.data == std::vector<double>{2.0, 5.0});

  const Tensor<double> img({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});  // NHWC
  const Tensor<double>& pooled = t.value(global_avg_pool(t, t.leaf(img)));
  REQUIRE(pooled.shape == Shape({1, 2}));
  REQUIRE(pooled.data == std::vector<double>{4.0, 5.0});

  REQUIRE(t.value(sum_all(t, t.leaf(x)))[0] == 21.0);

  Rng rng(58);
  const double err = grad_check(
      [](Tape<double>& tp, Value v) {
        const Value m = mean_axis(tp, v, 1);
        return sum_all(tp, mul(tp, m, m));
      },
      rand_uniform<double>(rng, {3, 4}, -2, 2));
  REQUIRE(err < 1e-6);
}

TEST_CASE("cross_entropy values and gradient") {
  // two classes, logits (0, ln 3): p = (0.25, 0.75)
  Tape<double> t(false);
  const Tensor<double> logits({2, 2}, {0.0, std::log(3.0), std::log(3.0), 0.0});
  const double loss = t.value(cross_entropy(t, t.leaf(logits), {1, 1}))[0];
  REQUIRE(loss == Catch::Approx(0.5 * (-std::log(0.75) - std::log(0.25))));

  REQUIRE_THROWS_AS(cross_entropy(t, t.leaf(logits), {0, 2}), ShapeError);
  REQUIRE_THROWS_AS(cross_entropy(t, t.leaf(logits), {0}), ShapeError);

  Rng rng(59);
  const double err = grad_check(
      [](Tape<double>& tp, Value v) { return cross_entropy(tp, v, {2, 0, 1}); },
      rand_uniform<double>(rng, {3, 4}, -2, 2));
  REQUIRE(err < 1e-6);
}

TEST_CASE("stochastic depth: identity cases and scaling") {
  Rng rng(60);
  const auto x = rand_uniform<double>(rng, {4, 5}, -1, 1);
  Tape<double> t(false);
  const Value in = t.leaf(x);

  // p == 0 and eval mode are pass-throughs that add no node
  REQUIRE(drop_path(t, in, 0.0, true, rng).id == in.id);
  REQUIRE(drop_path(t, in, 0.5, false, rng).id == in.id);
  REQUIRE_THROWS_AS(drop_path(t, in, 1.0, true, rng), ConfigError);
  REQUIRE_THROWS_AS(drop_path(t, in, -0.1, true, rng), ConfigError);

  // across many draws, each sample row is either zero or x/(1-p),
  // and the keep rate approaches 1-p
  const double p = 0.3;
  int kept = 0, total = 0;
  Rng mc(61);
  const auto ones = Tensor<double>::full({50, 2}, 1.0);
  for (int it = 0; it < 200; ++it) {
    Tape<double> tp(false);
    const Tensor<double>& y = tp.value(drop_path(tp, tp.leaf(ones), p, true, mc));
    for (int64_t r = 0; r < 50; ++r) {
      const double v = y[r * 2];
      REQUIRE(y[r * 2 + 1] == v);  // whole sample shares one fate
      if (v != 0.0) {
        REQUIRE(v == Catch::Approx(1.0 / (1.0 - p)));
        ++kept;
      }
      ++total;
    }
  }
  const double keep_rate = static_cast<double>(kept) / total;
  REQUIRE(std::abs(keep_rate - (1.0 - p)) < 0.02);
}

TEST_CASE("grad_check harness sanity") {
  // exact gradient for sum(x^2) should measure as ~0 error
  Rng rng(62);
  const double err = grad_check(
      [](Tape<double>& tp, Value v) { return sum_all(tp, mul(tp, v, v)); },
      rand_uniform<double>(rng, {6}, -2, 2));
  REQUIRE(err < 1e-8);

  // non-scalar objective is rejected
  REQUIRE_THROWS_AS(
      grad_check([](Tape<double>& tp, Value v) { return v; },
                 rand_uniform<double>(rng, {3}, -1, 1)),
      ShapeError);
}

TEST_CASE("linear applies y = xW + b") {
  Rng rng(63);
  const auto x = rand_uniform<double>(rng, {2, 3}, -1, 1);
  const auto w = rand_uniform<double>(rng, {3, 4}, -1, 1);
  const auto b = rand_uniform<double>(rng, {4}, -1, 1);
  Tape<double> t(false);
  const Tensor<double>& y = t.value(linear(t, t.leaf(x), t.leaf(w), t.leaf(b)));
  REQUIRE(y.shape == Shape({2, 4}));
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t j = 0; j < 4; ++j) {
      double want = b[j];
      for (int64_t k = 0; k < 3; ++k) want += x[i * 3 + k] * w[k * 4 + j];
      REQUIRE(y[i * 4 + j] == Catch::Approx(want));
    }
}
