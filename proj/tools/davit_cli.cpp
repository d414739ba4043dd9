// Command-line front end: model cost analysis, built-in diagnostics, toy
// training, inference, and attention feature-map export.
//
// Exit codes: 0 success; 1 runtime failure (numeric blow-up, I/O); 2 bad
// usage, bad configuration, or incompatible geometry. Set DAVIT_THREADS to
// cap intra-op parallelism (unset or 0 = all hardware threads).

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <davit/davit.hpp>

namespace {

using davit::ModelConfig;
using davit::Tensor;

ModelConfig resolve_config(const std::string& preset, const std::string& config_path,
                           const std::string& fallback_preset = "") {
  if (!preset.empty() && !config_path.empty())
    throw davit::UsageError("--preset and --config are mutually exclusive");
  if (!preset.empty()) return ModelConfig::preset(preset);
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw davit::IoError("cannot open config file: " + config_path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw davit::ConfigError("config file is not valid JSON: " + std::string(e.what()));
    }
    return ModelConfig::from_json(j);
  }
  if (!fallback_preset.empty()) return ModelConfig::preset(fallback_preset);
  throw davit::UsageError("one of --preset or --config is required");
}

// Inputs are accepted either as binary tensor containers or as P6 PPM images;
// the container magic disambiguates. Result is [N,C,H,W].
Tensor<float> load_input_image(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw davit::IoError("cannot open input: " + path);
  char magic[4] = {0, 0, 0, 0};
  probe.read(magic, 4);
  probe.close();
  Tensor<float> img = std::string(magic, 4) == "DAVT" ? davit::read_tensor_file_as<float>(path)
                                                      : davit::read_ppm<float>(path);
  if (img.rank() == 3) {
    davit::Shape s = img.shape;
    s.insert(s.begin(), 1);
    return Tensor<float>(s, std::move(img.data));
  }
  if (img.rank() == 4) return img;
  throw davit::ShapeError("input must be [C,H,W] or [N,C,H,W], got " +
                          davit::shape_str(img.shape));
}

std::string human_count(int64_t v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  if (v >= 1'000'000'000) os << static_cast<double>(v) / 1e9 << "G";
  else if (v >= 1'000'000) os << static_cast<double>(v) / 1e6 << "M";
  else if (v >= 1'000) os << static_cast<double>(v) / 1e3 << "K";
  else os << v << " ";
  return os.str();
}

int cmd_analyze(const std::string& preset, const std::string& config_path, int res,
                const std::string& out_path, const std::string& probe_list, bool full_table) {
  const ModelConfig cfg = resolve_config(preset, config_path);
  const davit::CostReport rep = davit::count_costs(cfg, res);

  std::cout << "configuration: " << (preset.empty() ? config_path : preset) << "  resolution: "
            << (res > 0 ? std::to_string(res) + "x" + std::to_string(res) : "n/a") << "\n";
  if (full_table) {
    std::cout << std::left << std::setw(44) << "component" << std::setw(12) << "term"
              << std::right << std::setw(14) << "params" << std::setw(16) << "mul-adds"
              << "\n";
    for (const auto& row : rep.rows)
      std::cout << std::left << std::setw(44) << row.name << std::setw(12) << row.term
                << std::right << std::setw(14) << row.params << std::setw(16) << row.flops
                << "\n";
  }
  std::cout << "total parameters:            " << rep.total_params << " ("
            << human_count(rep.total_params) << ")\n";
  std::cout << "parameters without head:     " << rep.total_params_no_head << " ("
            << human_count(rep.total_params_no_head) << ")\n";
  if (res > 0) {
    std::cout << "total mul-adds:              " << rep.total_flops << " ("
              << human_count(rep.total_flops) << ")\n";
    std::cout << "attention-term mul-adds:     " << rep.attention_term_flops << " ("
              << human_count(rep.attention_term_flops)
              << "); closed form 2*P*C*(Pw+Cg) = " << rep.attention_term_formula << "\n";
    std::cout << "elementwise ops (excluded):  " << rep.total_elementwise << " ("
              << human_count(rep.total_elementwise) << ")\n";
  }

  if (!probe_list.empty()) {
    std::vector<int> resolutions;
    std::stringstream ss(probe_list);
    for (std::string tok; std::getline(ss, tok, ',');)
      resolutions.push_back(std::stoi(tok));
    std::cout << "\nattention cost vs resolution (windowed+grouped / full-grid baseline):\n";
    const auto probe = davit::scaling_probe(cfg, resolutions);
    ModelConfig global_cfg = cfg;
    global_cfg.window_size = 0;  // full-grid window = quadratic baseline
    const auto base = davit::scaling_probe(global_cfg, resolutions);
    for (size_t i = 0; i < probe.size(); ++i)
      std::cout << "  res " << std::setw(4) << probe[i].resolution << "  tokens "
                << std::setw(7) << probe[i].tokens << "  per-token " << std::setw(10)
                << probe[i].flops_per_token << "  baseline per-token " << std::setw(12)
                << base[i].flops_per_token << "\n";
  }

  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw davit::IoError("cannot write report: " + out_path);
    out << rep.to_json().dump(2) << "\n";
    std::cout << "report written to " << out_path << "\n";
  }
  return 0;
}

int cmd_selftest(const std::string& level_str) {
  const auto level = davit::selftest_level_from_string(level_str);
  const auto results = davit::run_selftest(level);
  const bool ok = davit::print_selftest(results, std::cout);
  return ok ? 0 : 1;
}

int cmd_train_toy(const std::string& preset, const std::string& config_path, uint64_t seed,
                  const std::string& out_path, int epochs, int batch_size, double peak_lr,
                  int per_class, double noise, double stop_acc) {
  const ModelConfig cfg = resolve_config(preset, config_path, "micro");
  if (cfg.num_classes != davit::ToySpec::kClasses)
    throw davit::ConfigError("toy training needs num_classes == 4, config has " +
                             std::to_string(cfg.num_classes));
  davit::Model<float> model = davit::build_model<float>(cfg, seed);
  std::cout << "model: " << model.param_count() << " parameters, seed " << seed << "\n";

  davit::ToySpec spec;
  spec.train_per_class = per_class;
  spec.test_per_class = std::max(8, per_class / 2);
  spec.noise = noise;
  spec.seed = seed ^ 0x9e3779b97f4a7c15ULL;
  const auto ds = davit::generate_toy_dataset<float>(spec);
  std::cout << "toy dataset: " << ds.train.images.shape[0] << " train / "
            << ds.test.images.shape[0] << " test images, side " << spec.side << "\n";

  davit::TrainHparams hp;
  hp.epochs = epochs;
  hp.batch_size = batch_size;
  hp.peak_lr = peak_lr;
  hp.stop_accuracy = stop_acc;
  hp.seed = seed;
  hp.log_path = out_path.empty() ? "train_log.jsonl" : out_path + ".log.jsonl";
  const auto result = davit::train_loop(model, ds, hp);
  for (const auto& rec : result.records)
    std::cout << "epoch " << std::setw(3) << rec.epoch << "  step " << std::setw(5) << rec.step
              << "  lr " << std::scientific << std::setprecision(3) << rec.lr << "  loss "
              << std::fixed << std::setprecision(4) << rec.loss << "  test acc "
              << std::setprecision(4) << rec.accuracy << "\n";
  std::cout << "final held-out accuracy: " << result.final_accuracy << "\n";

  const std::string ckpt = out_path.empty() ? "toy_model.ckpt" : out_path;
  davit::save_checkpoint(model, ckpt);
  std::cout << "checkpoint written to " << ckpt << " (log: " << hp.log_path << ")\n";
  return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& input_path,
              const std::string& out_path, int top_k) {
  const davit::Model<float> model = davit::load_checkpoint<float>(ckpt_path);
  const Tensor<float> input = load_input_image(input_path);
  const Tensor<float> logits = davit::forward(model, input, davit::RunMode::Eval);
  const int64_t N = logits.shape[0], K = logits.shape[1];
  for (int64_t i = 0; i < N; ++i) {
    // stable softmax over the row for a readable probability printout
    double mx = logits[i * K];
    for (int64_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(logits[i * K + k]));
    double z = 0;
    std::vector<double> p(static_cast<size_t>(K));
    for (int64_t k = 0; k < K; ++k) z += p[static_cast<size_t>(k)] = std::exp(logits[i * K + k] - mx);
    std::vector<int64_t> idx(static_cast<size_t>(K));
    for (int64_t k = 0; k < K; ++k) idx[static_cast<size_t>(k)] = k;
    std::sort(idx.begin(), idx.end(),
              [&](int64_t a, int64_t b) { return p[static_cast<size_t>(a)] > p[static_cast<size_t>(b)]; });
    std::cout << "input " << i << ":";
    for (int64_t k = 0; k < std::min<int64_t>(top_k, K); ++k)
      std::cout << "  class " << idx[static_cast<size_t>(k)] << " p=" << std::fixed
                << std::setprecision(4) << p[static_cast<size_t>(idx[static_cast<size_t>(k)])] / z;
    std::cout << "\n";
  }
  if (!out_path.empty()) {
    davit::write_tensor_file(out_path, logits);
    std::cout << "logits written to " << out_path << "\n";
  }
  return 0;
}

int cmd_export_features(const std::string& ckpt_path, const std::string& input_path, int stage,
                        int top_k, const std::string& channels_list, int out_channel,
                        const std::string& out_dir) {
  const davit::Model<float> model = davit::load_checkpoint<float>(ckpt_path);
  const Tensor<float> input = load_input_image(input_path);
  davit::ExportSelection sel;
  sel.top_k = top_k;
  sel.out_channel = out_channel;
  if (!channels_list.empty()) {
    if (top_k > 0)
      throw davit::UsageError("--channels and --top-k are mutually exclusive");
    std::stringstream ss(channels_list);
    for (std::string tok; std::getline(ss, tok, ',');)
      sel.channels.push_back(std::stoll(tok));
    sel.top_k = 0;
  } else if (top_k <= 0) {
    throw davit::UsageError("one of --top-k or --channels is required");
  }
  const auto files = davit::export_feature_maps(model, input, stage, sel, out_dir);
  for (const auto& f : files) std::cout << f << "\n";
  std::cout << files.size() << " feature map(s) written to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-attention vision backbone: analysis, training, inference"};
  app.require_subcommand(1);

  std::string preset, config_path, out_path, level = "quick", input_path, ckpt_path;
  std::string probe_list, channels_list;
  int res = 224, stage = 3, top_k = 0, epochs = 30, batch_size = 32, per_class = 64;
  int infer_top_k = 5, out_channel = 0;
  bool full_table = false;
  uint64_t seed = 42;
  double peak_lr = 1e-3, noise = 0.15, stop_acc = 0.0;

  auto* analyze = app.add_subcommand("analyze", "parameter and mul-add accounting");
  analyze->add_option("--preset", preset, "named configuration (tiny|small|base|large|huge|giant|*_no_ffn|micro)");
  analyze->add_option("--config", config_path, "JSON configuration file");
  analyze->add_option("--res", res, "input resolution (0 = parameters only)")->capture_default_str();
  analyze->add_option("--out", out_path, "write the full report as JSON");
  analyze->add_option("--probe", probe_list, "comma-separated resolutions for the scaling probe");
  analyze->add_flag("--rows", full_table, "print the per-component table");

  auto* selftest = app.add_subcommand("selftest", "run built-in diagnostics");
  selftest->add_option("--level", level, "quick|full")->capture_default_str();

  auto* train = app.add_subcommand("train-toy", "train on the procedural toy dataset");
  train->add_option("--preset", preset, "named configuration (default micro)");
  train->add_option("--config", config_path, "JSON configuration file");
  train->add_option("--seed", seed, "rng seed for init, shuffling, stochastic depth")->capture_default_str();
  train->add_option("--out", out_path, "checkpoint output path (default toy_model.ckpt)");
  train->add_option("--epochs", epochs, "training epochs")->capture_default_str();
  train->add_option("--batch-size", batch_size, "batch size")->capture_default_str();
  train->add_option("--lr", peak_lr, "peak learning rate")->capture_default_str();
  train->add_option("--per-class", per_class, "training images per class")->capture_default_str();
  train->add_option("--noise", noise, "uniform pixel noise amplitude")->capture_default_str();
  train->add_option("--stop-acc", stop_acc, "stop early at this held-out accuracy (0 = off)")
      ->capture_default_str();

  auto* infer = app.add_subcommand("infer", "run a checkpoint on an input");
  infer->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  infer->add_option("--input", input_path, "input image (tensor container or P6 PPM)")->required();
  infer->add_option("--out", out_path, "write raw logits as a tensor file");
  infer->add_option("--top-k", infer_top_k, "classes to print per input")->capture_default_str();

  auto* feats = app.add_subcommand("export-features", "write attention feature maps as PGM");
  feats->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  feats->add_option("--input", input_path, "input image (tensor container or P6 PPM)")->required();
  feats->add_option("--stage", stage, "stage to probe (1-based)")->capture_default_str();
  feats->add_option("--top-k", top_k, "export the k channels most attended by --out-channel");
  feats->add_option("--out-channel", out_channel, "reference output channel for --top-k ranking")->capture_default_str();
  feats->add_option("--channels", channels_list, "explicit comma-separated channel list");
  feats->add_option("--out", out_path, "output directory (default features/)");

  try {
    app.parse(argc, argv);
    if (analyze->parsed())
      return cmd_analyze(preset, config_path, res, out_path, probe_list, full_table);
    if (selftest->parsed()) return cmd_selftest(level);
    if (train->parsed())
      return cmd_train_toy(preset, config_path, seed, out_path, epochs, batch_size, peak_lr,
                           per_class, noise, stop_acc);
    if (infer->parsed()) return cmd_infer(ckpt_path, input_path, out_path, infer_top_k);
    if (feats->parsed())
      return cmd_export_features(ckpt_path, input_path, stage, top_k, channels_list, out_channel,
                                 out_path.empty() ? "features" : out_path);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const std::invalid_argument& e) {  // usage / config / geometry / shape
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {  // numeric / io / anything else at runtime
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
