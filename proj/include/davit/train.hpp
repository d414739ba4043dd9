#pragma once

// Desk-scale optimization: AdamW (decoupled weight decay, no decay on biases
// and norm affines), global-norm gradient clipping, a triangular learning-rate
// schedule, a procedurally generated 4-class toy dataset, and a deterministic
// training loop that logs one JSON record per epoch.

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "model.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace davit {

struct TriangularSchedule {
  double peak_lr = 1e-3;
  int64_t total_steps = 1;
  double peak_fraction = 0.5;
  double floor_lr = 0.0;

  double lr_at(int64_t step) const {
    if (total_steps < 1) throw ConfigError("schedule: total_steps must be >= 1");
    if (peak_fraction <= 0.0 || peak_fraction >= 1.0)
      throw ConfigError("schedule: peak_fraction must be in (0,1)");
    if (step < 0 || step > total_steps)
      throw ConfigError("schedule: step " + std::to_string(step) + " outside [0," +
                        std::to_string(total_steps) + "]");
    const double peak_step = peak_fraction * static_cast<double>(total_steps);
    const double t = static_cast<double>(step);
    if (t <= peak_step)
      return floor_lr + (peak_lr - floor_lr) * (peak_step > 0 ? t / peak_step : 1.0);
    return floor_lr +
           (peak_lr - floor_lr) * (static_cast<double>(total_steps) - t) /
               (static_cast<double>(total_steps) - peak_step);
  }
};

// Global L2-norm clipping; returns the pre-clip norm.
template <typename T>
double clip_grad_global_norm(std::vector<Tensor<T>>& grads, double max_norm) {
  if (max_norm <= 0) throw ConfigError("clip: max_norm must be positive");
  double sq = 0.0;
  for (const auto& g : grads)
    for (const T v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& g : grads)
      for (T& v : g.data) v *= s;
  }
  return norm;
}

template <typename T>
struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.05;
  int64_t step_count = 0;
  std::vector<Tensor<T>> m, v;

  // One update. Decay is decoupled (p <- p - lr*wd*p, applied only where the
  // model's decay mask is set) and separate from the adaptive term.
  void step(Model<T>& model, const std::vector<Tensor<T>>& grads, double lr) {
    if (grads.size() != model.params.size())
      throw ShapeError("adamw: " + std::to_string(grads.size()) + " grads for " +
                       std::to_string(model.params.size()) + " params");
    if (m.empty()) {
      for (const auto& p : model.params) {
        m.push_back(Tensor<T>(p.shape));
        v.push_back(Tensor<T>(p.shape));
      }
    }
    for (size_t i = 0; i < grads.size(); ++i)
      for (const T g : grads[i].data)
        if (!std::isfinite(static_cast<double>(g)))
          throw NumericError("adamw: non-finite gradient in " + model.names[i]);
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (size_t i = 0; i < grads.size(); ++i) {
      Tensor<T>& p = model.params[i];
      if (!grads[i].same_shape(p))
        throw ShapeError("adamw: grad shape mismatch for " + model.names[i]);
      if (model.decay[i] && weight_decay != 0.0) {
        const T f = static_cast<T>(1.0 - lr * weight_decay);
        for (T& w : p.data) w *= f;
      }
      Tensor<T>& mi = m[i];
      Tensor<T>& vi = v[i];
      for (int64_t j = 0; j < p.numel(); ++j) {
        const double g = static_cast<double>(grads[i][j]);
        const double mj = beta1 * static_cast<double>(mi[j]) + (1.0 - beta1) * g;
        const double vj = beta2 * static_cast<double>(vi[j]) + (1.0 - beta2) * g * g;
        mi[j] = static_cast<T>(mj);
        vi[j] = static_cast<T>(vj);
        const double mhat = mj / bc1;
        const double vhat = vj / bc2;
        p[j] = static_cast<T>(static_cast<double>(p[j]) - lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Toy dataset: 32x32 RGB images of four low-frequency patterns (horizontal
// stripes, vertical stripes, checkerboard, centered blob) at two intensity
// levels, with seeded per-pixel uniform noise, clamped to [0,1]. Balanced
// class-interleaved order; fully determined by the seed.
// ---------------------------------------------------------------------------

struct ToySpec {
  int side = 32;
  int train_per_class = 64;
  int test_per_class = 32;
  double noise = 0.15;
  uint64_t seed = 1234;
  static constexpr int kClasses = 4;
};

template <typename T>
struct ToySplit {
  Tensor<T> images;  // [N,3,side,side]
  std::vector<int64_t> labels;
};

template <typename T>
struct ToyDataset {
  ToySplit<T> train, test;
};

namespace detail {

inline double toy_base(int cls, int r, int c, int side) {
  constexpr double lo = 0.25, hi = 0.75;
  switch (cls) {
    case 0: return r % 2 == 0 ? hi : lo;                       // horizontal stripes
    case 1: return c % 2 == 0 ? hi : lo;                       // vertical stripes
    case 2: return (r / 4 + c / 4) % 2 == 0 ? hi : lo;         // checkerboard
    default: {                                                 // centered blob
      const double cy = (side - 1) / 2.0, sigma = side / 5.0;
      const double d2 = (r - cy) * (r - cy) + (c - cy) * (c - cy);
      return lo + (hi - lo) * std::exp(-d2 / (2.0 * sigma * sigma));
    }
  }
}

template <typename T>
ToySplit<T> toy_split(const ToySpec& spec, int per_class, Rng& rng) {
  const int n = per_class * ToySpec::kClasses;
  const int side = spec.side;
  ToySplit<T> split;
  split.images = Tensor<T>({n, 3, side, side});
  split.labels.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int cls = i % ToySpec::kClasses;
    split.labels[static_cast<size_t>(i)] = cls;
    for (int ch = 0; ch < 3; ++ch)
      for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) {
          double v = toy_base(cls, r, c, side);
          if (spec.noise > 0) v += (2.0 * rng.uniform() - 1.0) * spec.noise;
          split.images.at(i, ch, r, c) = static_cast<T>(std::clamp(v, 0.0, 1.0));
        }
  }
  return split;
}

}  // namespace detail

template <typename T>
ToyDataset<T> generate_toy_dataset(const ToySpec& spec) {
  if (spec.side < 8 || spec.train_per_class < 1 || spec.test_per_class < 1 || spec.noise < 0)
    throw ConfigError("toy dataset: invalid spec");
  Rng rng(spec.seed);
  ToyDataset<T> ds;
  ds.train = detail::toy_split<T>(spec, spec.train_per_class, rng);
  ds.test = detail::toy_split<T>(spec, spec.test_per_class, rng);
  return ds;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct TrainHparams {
  int epochs = 30;
  int batch_size = 32;
  double peak_lr = 1e-3;
  double peak_fraction = 0.5;
  double weight_decay = 0.05;
  double clip_norm = 1.0;
  double stop_accuracy = 0.0;  // >0: stop once held-out accuracy reaches this
  uint64_t seed = 42;
  std::string log_path;  // JSONL per-epoch records; empty = no file
};

struct TrainRecord {
  int64_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double accuracy = 0.0;  // held-out accuracy after the epoch
};

struct TrainResult {
  std::vector<TrainRecord> records;
  double final_accuracy = 0.0;
  int64_t steps = 0;
};

namespace detail {

template <typename T>
Tensor<T> gather_batch(const Tensor<T>& images, const std::vector<int>& order, int64_t lo,
                       int64_t hi) {
  const int64_t per = images.numel() / images.shape[0];
  Shape s = images.shape;
  s[0] = hi - lo;
  Tensor<T> out(s);
  for (int64_t i = lo; i < hi; ++i) {
    const int64_t src = order[static_cast<size_t>(i)];
    std::copy_n(images.data.begin() + src * per, per, out.data.begin() + (i - lo) * per);
  }
  return out;
}

}  // namespace detail

template <typename T>
double evaluate(const Model<T>& m, const Tensor<T>& images, const std::vector<int64_t>& labels,
                int batch_size = 32) {
  const int64_t n = images.shape[0];
  const int64_t per = images.numel() / n;
  int64_t correct = 0;
  for (int64_t lo = 0; lo < n; lo += batch_size) {
    const int64_t hi = std::min(n, lo + batch_size);
    Shape s = images.shape;
    s[0] = hi - lo;
    Tensor<T> batch(s);
    std::copy_n(images.data.begin() + lo * per, (hi - lo) * per, batch.data.begin());
    const Tensor<T> logits = forward(m, batch, RunMode::Eval);
    const int64_t K = logits.shape[1];
    for (int64_t i = 0; i < hi - lo; ++i) {
      int64_t arg = 0;
      for (int64_t k = 1; k < K; ++k)
        if (logits[i * K + k] > logits[i * K + arg]) arg = k;
      if (arg == labels[static_cast<size_t>(lo + i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

// One gradient step on a batch; returns the loss. Mode selects whether
// stochastic depth is active (the rng drives it).
template <typename T>
double train_step(Model<T>& m, AdamW<T>& opt, const Tensor<T>& batch,
                  const std::vector<int64_t>& labels, double lr, double clip_norm, RunMode mode,
                  Rng& rng) {
  Tape<T> tape;
  const std::vector<Value> pv = place_params(tape, m, true);
  const Value x = tape.leaf(batch, false);
  const ForwardValues<T> out = model_forward(tape, m, pv, x, mode, &rng);
  const Value loss = cross_entropy(tape, out.logits, labels);
  const double loss_val = static_cast<double>(tape.value(loss)[0]);
  tape.backward(loss);
  std::vector<Tensor<T>> grads;
  grads.reserve(pv.size());
  for (const Value v : pv) grads.push_back(tape.grad_or_zeros(v));
  if (clip_norm > 0) clip_grad_global_norm(grads, clip_norm);
  opt.step(m, grads, lr);
  return loss_val;
}

template <typename T>
TrainResult train_loop(Model<T>& m, const ToyDataset<T>& ds, const TrainHparams& hp) {
  if (hp.epochs < 1 || hp.batch_size < 1) throw ConfigError("train: bad epochs/batch size");
  const int64_t n = ds.train.images.shape[0];
  const int64_t steps_per_epoch = (n + hp.batch_size - 1) / hp.batch_size;
  TriangularSchedule sched;
  sched.peak_lr = hp.peak_lr;
  sched.peak_fraction = hp.peak_fraction;
  sched.total_steps = hp.epochs * steps_per_epoch;
  AdamW<T> opt;
  opt.weight_decay = hp.weight_decay;
  Rng rng(hp.seed);

  std::ofstream log;
  if (!hp.log_path.empty()) {
    log.open(hp.log_path);
    if (!log) throw IoError("cannot open train log for writing: " + hp.log_path);
  }

  std::vector<int> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = static_cast<int>(i);

  TrainResult result;
  int64_t step = 0;
  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    int64_t batches = 0;
    double lr = 0.0;
    for (int64_t lo = 0; lo < n; lo += hp.batch_size) {
      const int64_t hi = std::min(n, lo + hp.batch_size);
      const Tensor<T> batch = detail::gather_batch(ds.train.images, order, lo, hi);
      std::vector<int64_t> labels(static_cast<size_t>(hi - lo));
      for (int64_t i = lo; i < hi; ++i)
        labels[static_cast<size_t>(i - lo)] =
            ds.train.labels[static_cast<size_t>(order[static_cast<size_t>(i)])];
      lr = sched.lr_at(step);
      double loss;
      try {
        loss = train_step(m, opt, batch, labels, lr, hp.clip_norm, RunMode::Train, rng);
      } catch (const NumericError& e) {
        throw NumericError("train_loop: aborted at step " + std::to_string(step) + ": " +
                           e.what());
      }
      if (!std::isfinite(loss))
        throw NumericError("train_loop: non-finite loss at step " + std::to_string(step));
      epoch_loss += loss;
      ++batches;
      ++step;
    }
    TrainRecord rec;
    rec.step = step;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.loss = epoch_loss / static_cast<double>(batches);
    rec.accuracy = evaluate(m, ds.test.images, ds.test.labels, hp.batch_size);
    result.records.push_back(rec);
    if (log.is_open()) {
      log << nlohmann::json{{"step", rec.step},
                            {"epoch", rec.epoch},
                            {"lr", rec.lr},
                            {"loss", rec.loss},
                            {"accuracy", rec.accuracy}}
                 .dump()
          << "\n";
      log.flush();
    }
    if (hp.stop_accuracy > 0 && rec.accuracy >= hp.stop_accuracy) break;
  }
  result.final_accuracy =
      result.records.empty() ? 0.0 : result.records.back().accuracy;
  result.steps = step;
  return result;
}

// Single-batch overfit harness (sanity oracle): constant learning rate, no
// weight decay, stochastic depth off. Returns the loss trace; stops early
// once `stop_loss` is reached.
template <typename T>
std::vector<double> overfit_batch(Model<T>& m, const Tensor<T>& batch,
                                  const std::vector<int64_t>& labels, int max_steps, double lr,
                                  double stop_loss, uint64_t seed = 0) {
  AdamW<T> opt;
  opt.weight_decay = 0.0;
  Rng rng(seed);
  std::vector<double> trace;
  for (int i = 0; i < max_steps; ++i) {
    const double loss =
        train_step(m, opt, batch, labels, lr, /*clip_norm=*/1.0, RunMode::Eval, rng);
    trace.push_back(loss);
    if (loss < stop_loss) break;
  }
  return trace;
}

}  // namespace davit
