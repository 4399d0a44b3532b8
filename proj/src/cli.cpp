#include "xmed/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "xmed/dataset.hpp"
#include "xmed/error.hpp"
#include "xmed/gradcam.hpp"
#include "xmed/image.hpp"
#include "xmed/metrics.hpp"
#include "xmed/model_io.hpp"
#include "xmed/report.hpp"
#include "xmed/trainer.hpp"

namespace xmed {
namespace {

namespace fs = std::filesystem;

class UsageFailure : public Error {
 public:
  using Error::Error;
};

struct DataArgs {
  std::string dir;
  std::size_t synthetic = 0;
  std::uint64_t seed = 0;
  std::string positive;
};

struct TrainArgs {
  DataArgs data;
  std::string model = "resnet-mini";
  std::size_t epochs = 50;
  std::size_t batch = 32;
  double lr = 1e-4;
  std::size_t img = 64;
  std::size_t channels = 1;
  std::string out;
  std::string log;
  bool no_augment = false;
  bool quiet = false;
  std::vector<std::size_t> stages{2, 2, 2};
  std::size_t width = 8;
  std::vector<std::size_t> blocks{4, 4};
  std::size_t growth = 8;
};

struct EvalArgs {
  DataArgs data;
  std::string model;
  std::string split = "test";
  double threshold = 0.5;
  std::string report;
  std::string name;
};

struct ExplainArgs {
  std::string model;
  std::string image;
  std::optional<std::size_t> class_index;
  double alpha = 0.4;
  std::string layer;
  std::string out;
  std::string heatmap;
};

struct SynthArgs {
  std::string out;
  std::size_t n = 200;
  std::size_t img = 64;
  std::uint64_t seed = 0;
};

void add_data_options(CLI::App* cmd, DataArgs& a) {
  auto* dir = cmd->add_option("--data", a.dir, "Dataset root with one sub-folder of PNG images per class");
  auto* syn = cmd->add_option("--synthetic", a.synthetic, "Use N generated blob images instead of --data");
  dir->excludes(syn);
  cmd->add_option("--seed", a.seed, "Seed for splitting, synthetic data, initialization and shuffling");
  cmd->add_option("--positive", a.positive, "Positive class name for binary metrics");
}

Dataset obtain_dataset(const DataArgs& a, ImageShape shape, std::ostream& err) {
  if (a.dir.empty() == (a.synthetic == 0)) throw UsageFailure("exactly one of --data or --synthetic is required");
  Dataset ds;
  if (!a.dir.empty()) {
    LoadResult loaded = load_dataset(a.dir, shape);
    for (const auto& w : loaded.warnings) err << "warning: " << w << '\n';
    ds = std::move(loaded.dataset);
  } else {
    ds = generate_synthetic(a.synthetic, shape, a.seed);
  }
  if (!a.positive.empty()) {
    auto it = std::find(ds.class_names.begin(), ds.class_names.end(), a.positive);
    if (it == ds.class_names.end()) throw ConfigError("positive class '" + a.positive + "' is not a dataset class");
    ds.positive_class = static_cast<std::size_t>(it - ds.class_names.begin());
  }
  return ds;
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const ImageShape shape{a.channels, a.img, a.img};
  const Dataset ds = obtain_dataset(a.data, shape, err);
  const Splits splits = split_dataset(ds, SplitSpec{0.70, 0.15, 0.15, a.data.seed});

  Model model = a.model == "resnet-mini"
                    ? build_resnet_mini(a.stages, a.width, ds.class_names.size(), shape, a.data.seed)
                    : build_densenet_mini(a.blocks, a.growth, ds.class_names.size(), shape, a.data.seed);
  model.class_names = ds.class_names;
  model.positive_class = ds.positive_class;

  TrainConfig config;
  config.lr0 = a.lr;
  config.batch_size = a.batch;
  config.max_epochs = a.epochs;
  config.seed = a.data.seed;
  config.augment = !a.no_augment;
  config.checkpoint_path = fs::path(a.out);

  const TrainLog log = train(model, splits.train, splits.val, config, [&](const EpochRecord& e) {
    if (a.quiet) return;
    char line[160];
    std::snprintf(line, sizeof line, "epoch %3zu  train_loss %.5f  val_loss %.5f  val_acc %6.2f%%  lr %.2e", e.epoch,
                  e.train_loss, e.val_loss, e.val_accuracy, e.lr);
    out << line;
    for (const auto& ev : e.events) out << "  [" << ev << ']';
    out << '\n';
  });
  save_model(model, a.out);
  if (!a.log.empty()) {
    std::ofstream lf(a.log, std::ios::trunc);
    if (!lf) throw IoError("cannot open " + a.log + " for writing");
    log.write_jsonl(lf);
  }
  if (!a.quiet) {
    out << "best epoch " << log.best_epoch << " (val_loss " << log.best_val_loss << "), model written to " << a.out
        << '\n';
    if (!splits.test.empty()) {
      MetricsReport report = evaluate(model, splits.test);
      report.dataset = a.data.dir.empty() ? "synthetic" : fs::path(a.data.dir).filename().string();
      out << "test: " << render_table_row(report) << '\n';
    }
  }
  return 0;
}

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  const Model model = load_model(a.model);
  const ImageShape shape = model.input_shape();
  Dataset ds = obtain_dataset(a.data, shape, err);
  if (!model.class_names.empty()) {
    if (model.class_names != ds.class_names) throw ConfigError("dataset classes do not match the model's classes");
    if (a.data.positive.empty()) ds.positive_class = model.positive_class;
  }
  if (ds.class_names.size() != model.num_classes()) throw ConfigError("dataset class count does not match the model");

  Dataset split;
  if (a.split == "all") {
    split = ds;
  } else {
    Splits s = split_dataset(ds, SplitSpec{0.70, 0.15, 0.15, a.data.seed});
    split = a.split == "train" ? std::move(s.train) : a.split == "val" ? std::move(s.val) : std::move(s.test);
  }
  MetricsReport report = evaluate(model, split, a.threshold);
  report.dataset = !a.name.empty() ? a.name : (a.data.dir.empty() ? "synthetic" : fs::path(a.data.dir).filename().string());
  out << render_table_row(report) << '\n';
  out << "confusion tp=" << report.confusion.tp << " fp=" << report.confusion.fp << " tn=" << report.confusion.tn
      << " fn=" << report.confusion.fn << '\n';
  if (!a.report.empty()) write_report(report, a.report);
  return 0;
}

int cmd_explain(const ExplainArgs& a, std::ostream& out) {
  Model model = load_model(a.model);
  if (!a.layer.empty()) model.set_capture_layer(a.layer);
  const ImageShape& shape = model.input_shape();
  const Image8 image = read_png(a.image);
  const Tensor raw = resize_bilinear(image_to_tensor(image, shape.c), shape.h, shape.w);
  if (a.class_index && *a.class_index >= model.num_classes()) {
    throw UsageFailure("--class must be below " + std::to_string(model.num_classes()));
  }
  const Explanation ex = explain(model, raw, a.class_index, a.alpha);
  write_png(a.out, ex.overlay);
  if (!a.heatmap.empty()) {
    Image8 heat(ex.upsampled.height, ex.upsampled.width, 1);
    for (std::size_t i = 0; i < ex.upsampled.values.size(); ++i) {
      heat.pixels[i] = static_cast<std::uint8_t>(std::floor(ex.upsampled.values[i] * 255.0 + 0.5));
    }
    write_png(a.heatmap, heat);
  }
  const std::string label =
      ex.class_index < model.class_names.size() ? model.class_names[ex.class_index] : std::to_string(ex.class_index);
  char prob[32];
  std::snprintf(prob, sizeof prob, "%.4f", ex.probabilities[ex.class_index]);
  out << "class " << ex.class_index << " (" << label << ") probability " << prob << ", layer "
      << ex.heatmap.source_layer << '\n';
  return 0;
}

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  const Dataset ds = generate_synthetic(a.n, {1, a.img, a.img}, a.seed);
  nlohmann::ordered_json boxes = nlohmann::ordered_json::object();
  for (const auto& name : ds.class_names) fs::create_directories(fs::path(a.out) / name);
  for (const auto& s : ds.samples) {
    const fs::path file = fs::path(a.out) / (s.source + ".png");
    write_png(file, tensor_to_image(s.image));
    if (s.lesion_box) {
      const auto& b = *s.lesion_box;
      boxes[s.source + ".png"] = {b.x0, b.y0, b.x1, b.y1};
    }
  }
  std::ofstream bf(fs::path(a.out) / "boxes.json");
  bf << boxes.dump(2) << '\n';
  out << "wrote " << ds.size() << " images to " << a.out << '\n';
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Explainable CNN classifiers: train, evaluate and explain with Grad-CAM", "xmed"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a mini ResNet or DenseNet classifier");
  add_data_options(train_cmd, train_args.data);
  train_cmd->add_option("--model", train_args.model, "Architecture")
      ->check(CLI::IsMember({"resnet-mini", "densenet-mini"}))
      ->capture_default_str();
  train_cmd->add_option("--epochs", train_args.epochs)->capture_default_str();
  train_cmd->add_option("--batch", train_args.batch)->capture_default_str();
  train_cmd->add_option("--lr", train_args.lr)->capture_default_str();
  train_cmd->add_option("--img", train_args.img, "Square input size")->capture_default_str();
  train_cmd->add_option("--channels", train_args.channels, "1 (gray) or 3 (RGB)")
      ->check(CLI::IsMember({1, 3}))
      ->capture_default_str();
  train_cmd->add_option("--out", train_args.out, "Model file")->required();
  train_cmd->add_option("--log", train_args.log, "JSON-lines training log");
  train_cmd->add_flag("--no-augment", train_args.no_augment, "Disable training-time augmentation");
  train_cmd->add_flag("--quiet", train_args.quiet);
  train_cmd->add_option("--stages", train_args.stages, "resnet-mini blocks per stage")->delimiter(',');
  train_cmd->add_option("--width", train_args.width, "resnet-mini base width")->capture_default_str();
  train_cmd->add_option("--blocks", train_args.blocks, "densenet-mini layers per block")->delimiter(',');
  train_cmd->add_option("--growth", train_args.growth, "densenet-mini growth rate")->capture_default_str();

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a model and write a metrics report");
  eval_cmd->add_option("--model", eval_args.model, "Model file")->required();
  add_data_options(eval_cmd, eval_args.data);
  eval_cmd->add_option("--split", eval_args.split, "Which split of the data to score")
      ->check(CLI::IsMember({"test", "val", "train", "all"}))
      ->capture_default_str();
  eval_cmd->add_option("--threshold", eval_args.threshold)->capture_default_str();
  eval_cmd->add_option("--report", eval_args.report, "Metrics report JSON");
  eval_cmd->add_option("--name", eval_args.name, "Dataset label in the report");

  ExplainArgs explain_args;
  auto* explain_cmd = app.add_subcommand("explain", "Grad-CAM heatmap overlay for one image");
  explain_cmd->add_option("--model", explain_args.model, "Model file")->required();
  explain_cmd->add_option("--image", explain_args.image, "PNG image")->required();
  explain_cmd->add_option("--class", explain_args.class_index, "Target class (default: predicted)");
  explain_cmd->add_option("--alpha", explain_args.alpha, "Overlay blend weight")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  explain_cmd->add_option("--layer", explain_args.layer, "Capture layer name");
  explain_cmd->add_option("--out", explain_args.out, "Overlay PNG")->required();
  explain_cmd->add_option("--heatmap", explain_args.heatmap, "Gray heatmap PNG");

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "Write the synthetic blob dataset as class folders of PNGs");
  synth_cmd->add_option("--out", synth_args.out, "Output root")->required();
  synth_cmd->add_option("--n", synth_args.n)->capture_default_str();
  synth_cmd->add_option("--img", synth_args.img)->capture_default_str();
  synth_cmd->add_option("--seed", synth_args.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_args, out, err);
    if (eval_cmd->parsed()) return cmd_eval(eval_args, out, err);
    if (explain_cmd->parsed()) return cmd_explain(explain_args, out);
    return cmd_synth(synth_args, out);
  } catch (const UsageFailure& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace xmed
