// Optimization stack: schedule shape, gradient clipping, AdamW against
// hand-computed steps, decay masking, the procedural dataset, and short
// training runs on the reduced model.

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include <json.hpp>

#include <davit/model.hpp>
#include <davit/train.hpp>

using namespace davit;

TEST_CASE("triangular schedule interpolates floor-peak-floor") {
  TriangularSchedule s;
  s.peak_lr = 2.0;
  s.floor_lr = 0.2;
  s.total_steps = 200;
  s.peak_fraction = 0.5;
  REQUIRE(s.lr_at(0) == Catch::Approx(0.2));
  REQUIRE(s.lr_at(50) == Catch::Approx(1.1));
  REQUIRE(s.lr_at(100) == Catch::Approx(2.0));
  REQUIRE(s.lr_at(150) == Catch::Approx(1.1));
  REQUIRE(s.lr_at(200) == Catch::Approx(0.2));
  REQUIRE_THROWS_AS(s.lr_at(-1), ConfigError);
  REQUIRE_THROWS_AS(s.lr_at(201), ConfigError);

  TriangularSchedule quarter;
  quarter.peak_lr = 1.0;
  quarter.total_steps = 100;
  quarter.peak_fraction = 0.25;
  REQUIRE(quarter.lr_at(25) == Catch::Approx(1.0));
  REQUIRE(quarter.lr_at(100) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("global-norm clipping rescales only when needed") {
  std::vector<Tensor<double>> grads;
  grads.push_back(Tensor<double>({2}, {3.0, 0.0}));
  grads.push_back(Tensor<double>({1}, {4.0}));  // total norm 5

  std::vector<Tensor<double>> copy = grads;
  const double n1 = clip_grad_global_norm(copy, 10.0);
  REQUIRE(n1 == Catch::Approx(5.0));
  REQUIRE(copy[0].data == grads[0].data);  // untouched below the threshold

  const double n2 = clip_grad_global_norm(copy, 1.0);
  REQUIRE(n2 == Catch::Approx(5.0));
  REQUIRE(copy[0][0] == Catch::Approx(0.6));
  REQUIRE(copy[1][0] == Catch::Approx(0.8));
  double sq = 0;
  for (const auto& g : copy)
    for (double v : g.data) sq += v * v;
  REQUIRE(std::sqrt(sq) == Catch::Approx(1.0));

  REQUIRE_THROWS_AS(clip_grad_global_norm(copy, 0.0), ConfigError);
}

namespace {

// one-parameter stand-in model for optimizer math
Model<double> scalar_model(double init, bool with_decay) {
  Model<double> m;
  m.names = {"p"};
  m.params = {Tensor<double>({1}, {init})};
  m.decay = {static_cast<uint8_t>(with_decay ? 1 : 0)};
  return m;
}

}  // namespace

TEST_CASE("adamw first step matches the hand-computed update") {
  // g = 0.5, lr = 0.1, beta = (0.9, 0.999):
  //   m1 = 0.05, v1 = 0.00025, mhat = 0.5, vhat = 0.25
  //   step = lr * 0.5 / (0.5 + eps) ~= lr
  SECTION("without decay") {
    Model<double> m = scalar_model(1.0, false);
    AdamW<double> opt;
    opt.weight_decay = 0.05;  // masked off by the model
    opt.step(m, {Tensor<double>({1}, {0.5})}, 0.1);
    REQUIRE(m.params[0][0] == Catch::Approx(0.9).margin(1e-6));
  }
  SECTION("with decoupled decay") {
    Model<double> m = scalar_model(1.0, true);
    AdamW<double> opt;
    opt.weight_decay = 0.05;
    opt.step(m, {Tensor<double>({1}, {0.5})}, 0.1);
    // decay first: p = 1 * (1 - 0.1*0.05) = 0.995, then the adaptive step
    REQUIRE(m.params[0][0] == Catch::Approx(0.995 - 0.1).margin(1e-6));
  }
}

TEST_CASE("adamw minimizes a quadratic") {
  Model<double> m = scalar_model(5.0, false);
  AdamW<double> opt;
  opt.weight_decay = 0.0;
  for (int i = 0; i < 400; ++i) {
    const double g = 2.0 * (m.params[0][0] - 3.0);
    opt.step(m, {Tensor<double>({1}, {g})}, 0.05);
  }
  REQUIRE(m.params[0][0] == Catch::Approx(3.0).margin(1e-2));
}

TEST_CASE("adamw rejects non-finite gradients and shape mismatches") {
  Model<double> m = scalar_model(1.0, false);
  AdamW<double> opt;
  REQUIRE_THROWS_AS(opt.step(m, {Tensor<double>({1}, {std::nan("")})}, 0.1), NumericError);
  REQUIRE_THROWS_AS(opt.step(m, {Tensor<double>({2}, {0.1, 0.2})}, 0.1), ShapeError);
  REQUIRE_THROWS_AS(opt.step(m, {}, 0.1), ShapeError);
}

TEST_CASE("decay mask: only rank>=2 weights shrink under zero gradients") {
  Model<float> m = build_model<float>("micro", 3);
  const Model<float> before = m;
  std::vector<Tensor<float>> zeros;
  for (const auto& p : m.params) zeros.push_back(Tensor<float>(p.shape));
  AdamW<float> opt;
  opt.step(m, zeros, 0.1);
  for (size_t i = 0; i < m.params.size(); ++i) {
    if (m.decay[i]) {
      // every nonzero entry moved toward zero by exactly (1 - lr*wd)
      for (int64_t j = 0; j < m.params[i].numel(); ++j)
        REQUIRE(m.params[i][j] == Catch::Approx(before.params[i][j] * (1.0f - 0.1f * 0.05f)));
    } else {
      REQUIRE(m.params[i].data == before.params[i].data);
    }
  }
}

TEST_CASE("toy dataset is deterministic, balanced, and bounded") {
  ToySpec spec;
  spec.train_per_class = 8;
  spec.test_per_class = 4;
  spec.seed = 77;
  const auto a = generate_toy_dataset<float>(spec);
  const auto b = generate_toy_dataset<float>(spec);
  REQUIRE(a.train.images.data == b.train.images.data);
  REQUIRE(a.test.images.data == b.test.images.data);

  REQUIRE(a.train.images.shape == Shape({32, 3, 32, 32}));
  REQUIRE(a.test.images.shape == Shape({16, 3, 32, 32}));

  int counts[4] = {0, 0, 0, 0};
  for (const int64_t l : a.train.labels) ++counts[l];
  for (int c = 0; c < 4; ++c) REQUIRE(counts[c] == 8);

  for (const float v : a.train.images.data) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
  }

  // different seed, different pixels
  spec.seed = 78;
  const auto c = generate_toy_dataset<float>(spec);
  REQUIRE(a.train.images.data != c.train.images.data);
}

TEST_CASE("toy patterns without noise match their definitions") {
  ToySpec spec;
  spec.train_per_class = 1;
  spec.test_per_class = 1;
  spec.noise = 0.0;
  const auto ds = generate_toy_dataset<float>(spec);
  const auto& img = ds.train.images;

  // sample 0 is class 0: alternating rows 0.75 / 0.25
  REQUIRE(ds.train.labels[0] == 0);
  REQUIRE(img.at(0, 0, 0, 5) == 0.75f);
  REQUIRE(img.at(0, 1, 1, 5) == 0.25f);
  // class 1: alternating columns
  REQUIRE(img.at(1, 0, 7, 0) == 0.75f);
  REQUIRE(img.at(1, 2, 7, 1) == 0.25f);
  // class 2: 4x4 checkerboard blocks
  REQUIRE(img.at(2, 0, 0, 0) == 0.75f);
  REQUIRE(img.at(2, 0, 0, 4) == 0.25f);
  REQUIRE(img.at(2, 0, 4, 4) == 0.75f);
  // class 3: blob peaks at the center, fades at corners
  REQUIRE(img.at(3, 0, 15, 15) > 0.7f);
  REQUIRE(img.at(3, 0, 0, 0) < 0.3f);
  // all three channels carry the same noiseless pattern
  REQUIRE(img.at(0, 0, 0, 5) == img.at(0, 2, 0, 5));
}

TEST_CASE("a few optimizer steps reduce the loss on a fixed batch") {
  Model<float> m = build_model<float>("micro", 5);
  ToySpec spec;
  spec.train_per_class = 4;
  spec.test_per_class = 1;
  spec.seed = 11;
  const auto ds = generate_toy_dataset<float>(spec);

  AdamW<float> opt;
  opt.weight_decay = 0.0;
  Rng rng(1);
  std::vector<double> losses;
  for (int i = 0; i < 8; ++i)
    losses.push_back(train_step(m, opt, ds.train.images, ds.train.labels, 1e-3, 1.0,
                                RunMode::Eval, rng));
  REQUIRE(losses.back() < losses.front());
}

TEST_CASE("train_loop records per-epoch progress and writes the log") {
  const std::string log = "/tmp/davit_test_train_log.jsonl";
  std::remove(log.c_str());

  ModelConfig cfg = ModelConfig::preset("micro");
  cfg.drop_path_rate = 0.05;
  Model<float> m = build_model<float>(cfg, 19);

  ToySpec spec;
  spec.train_per_class = 4;
  spec.test_per_class = 2;
  spec.seed = 3;
  const auto ds = generate_toy_dataset<float>(spec);

  TrainHparams hp;
  hp.epochs = 2;
  hp.batch_size = 8;
  hp.peak_lr = 1e-3;
  hp.seed = 7;
  hp.log_path = log;
  const TrainResult res = train_loop(m, ds, hp);

  REQUIRE(res.records.size() == 2);
  REQUIRE(res.steps == 4);  // 16 images / batch 8 * 2 epochs
  REQUIRE(res.records[0].epoch == 1);
  REQUIRE(res.records[1].step == 4);
  REQUIRE(res.final_accuracy >= 0.0);

  std::ifstream in(log);
  REQUIRE(in.good());
  int lines = 0;
  for (std::string line; std::getline(in, line);) {
    const auto j = nlohmann::json::parse(line);
    REQUIRE(j.contains("loss"));
    REQUIRE(j.contains("accuracy"));
    REQUIRE(j.contains("lr"));
    ++lines;
  }
  REQUIRE(lines == 2);
  std::remove(log.c_str());
}

TEST_CASE("train_loop reports the failing step when the loss blows up") {
  Model<float> m = build_model<float>("micro", 23);
  // poison one parameter so the very first forward pass goes non-finite
  m.params[m.find("head.fc.weight")].data[0] = std::numeric_limits<float>::quiet_NaN();

  ToySpec spec;
  spec.train_per_class = 2;
  spec.test_per_class = 1;
  const auto ds = generate_toy_dataset<float>(spec);
  TrainHparams hp;
  hp.epochs = 1;
  hp.batch_size = 8;

  try {
    train_loop(m, ds, hp);
    FAIL("expected a NumericError");
  } catch (const NumericError& e) {
    REQUIRE(std::string(e.what()).find("step 0") != std::string::npos);
  }
}

TEST_CASE("single-batch overfit drives the loss toward zero") {
  Model<float> m = build_model<float>("micro", 41);
  ToySpec spec;
  spec.train_per_class = 2;  // 8 images
  spec.test_per_class = 1;
  spec.noise = 0.05;
  spec.seed = 13;
  const auto ds = generate_toy_dataset<float>(spec);

  const auto trace =
      overfit_batch(m, ds.train.images, ds.train.labels, 120, 1e-3, 0.05);
  REQUIRE(trace.back() < 0.05);
  REQUIRE(trace.size() <= 120);
}

TEST_CASE("evaluate scores a model against labels") {
  const Model<float> m = build_model<float>("micro", 2);
  ToySpec spec;
  spec.train_per_class = 1;
  spec.test_per_class = 2;
  const auto ds = generate_toy_dataset<float>(spec);
  const double acc = evaluate(m, ds.test.images, ds.test.labels, 4);
  REQUIRE(acc >= 0.0);
  REQUIRE(acc <= 1.0);
}
