#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

#include "distillforge/run.hpp"

namespace fs = std::filesystem;
using namespace distillforge;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> data;
  std::optional<std::string> out;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::size_t> batch;
  std::optional<double> temperature;
  std::optional<double> alpha;
  std::optional<std::string> optimizer;
  std::optional<std::string> feature_conversion;
  std::optional<std::size_t> image_size;
  std::optional<std::size_t> per_class;
  std::optional<std::size_t> max_steps;
  std::optional<std::string> teacher;
  std::optional<std::string> model;
  bool smoke = false;
  bool no_augment = false;
  std::vector<std::string> inputs;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "flat JSON run config");
  cmd->add_option("--seed", f.seed, "random seed");
  cmd->add_option("--data", f.data, "dataset root with benign/ and malignant/");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--image-size", f.image_size, "network input side length");
}

void add_training(CLI::App* cmd, Flags& f) {
  cmd->add_option("--epochs", f.epochs, "training epochs");
  cmd->add_option("--lr", f.lr, "learning rate");
  cmd->add_option("--batch", f.batch, "batch size");
  cmd->add_option("--optimizer", f.optimizer, "adam, nadam, rmsprop or adafactor");
  cmd->add_option("--max-steps", f.max_steps, "stop after this many optimizer steps");
  cmd->add_flag("--no-augment", f.no_augment, "disable online augmentation");
}

void add_distill(CLI::App* cmd, Flags& f) {
  cmd->add_option("--temperature", f.temperature, "distillation temperature");
  cmd->add_option("--alpha", f.alpha, "weight of the hard-label loss");
  cmd->add_option("--feature-conversion", f.feature_conversion, "flatten, global_avg or global_max");
  cmd->add_option("--teacher", f.teacher, "teacher archive (default <out>/teacher.dfkd)");
}

/// Precedence: flag, then config file, then built-in default.
run::RunConfig resolve(const Flags& f, const std::string& command) {
  run::RunConfig c;
  if (!f.config.empty()) c = run::load_config_file(f.config, c);
  const bool teacher = command == "train-teacher";
  if (f.seed) c.seed = *f.seed;
  if (f.data) c.data = *f.data;
  if (f.out) c.out = *f.out;
  if (f.image_size) c.image_size = *f.image_size;
  if (f.epochs) (teacher ? c.teacher_epochs : c.epochs) = *f.epochs;
  if (f.lr) (teacher ? c.teacher_lr : c.lr) = *f.lr;
  if (f.batch) (teacher ? c.teacher_batch : c.batch) = *f.batch;
  if (f.optimizer) (teacher ? c.teacher_optimizer : c.optimizer) = *f.optimizer;
  if (f.temperature) c.temperature = *f.temperature;
  if (f.alpha) c.alpha = *f.alpha;
  if (f.feature_conversion) c.feature_conversion = *f.feature_conversion;
  if (f.per_class) c.per_class = *f.per_class;
  if (f.max_steps) c.max_steps = *f.max_steps;
  if (f.teacher) c.teacher = *f.teacher;
  if (f.model) c.model = *f.model;
  if (f.smoke) c.smoke = true;
  if (f.no_augment) c.augment = false;
  if (command == "synth-data" && f.image_size) c.synth_size = *f.image_size;
  run::validate(c);
  return c;
}

std::vector<fs::path> paths(const std::vector<std::string>& inputs) { return {inputs.begin(), inputs.end()}; }

void print_summary(const char* what, const run::TrainSummary& s) {
  std::printf("%s: %zu parameters, best epoch %zu (val %.4f), test accuracy %.4f\n", what, s.parameters,
              s.history.best_epoch, s.history.best_val_accuracy, s.test.scalars.accuracy);
}

int execute(const std::string& command, const Flags& f) {
  const run::RunConfig c = resolve(f, command);
  run::echo_config(c, command);
  if (command == "synth-data") {
    const auto s = run::synth_data(c);
    std::printf("wrote %zu images to %s\n", s.files.size(), c.out.c_str());
  } else if (command == "ingest") {
    const auto m = run::ingest(c);
    for (const auto& w : m.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    std::printf("benign %zu, malignant %zu, train %zu, val %zu, test %zu\n", m.count(data::kBenign),
                m.count(data::kMalignant), m.in_split(data::Split::train).size(), m.in_split(data::Split::val).size(),
                m.in_split(data::Split::test).size());
  } else if (command == "preprocess") {
    run::preprocess(c, paths(f.inputs));
  } else if (command == "train-teacher") {
    print_summary("teacher", run::train_teacher(c));
  } else if (command == "distill") {
    print_summary("student", run::distill(c));
  } else if (command == "ablate") {
    const auto rows = run::ablate(c);
    std::size_t failed = 0;
    for (const auto& r : rows) failed += !r.error.empty();
    std::printf("%zu ablation rows, %zu failed cells\n", rows.size(), failed);
  } else if (command == "quantize") {
    const auto r = run::quantize(c);
    std::printf("payload %llu -> %llu bytes, test accuracy %.4f -> %.4f, %zu clamped\n",
                static_cast<unsigned long long>(r.payload_bytes_before),
                static_cast<unsigned long long>(r.payload_bytes_after), r.accuracy_before, r.accuracy_after,
                r.clamped);
  } else if (command == "evaluate") {
    for (const auto& [name, r] : run::evaluate(c, paths(f.inputs))) {
      std::printf("%s: accuracy %.4f, f1 %.4f, mcc %.4f, auc %.4f\n", name.c_str(), r.scalars.accuracy, r.scalars.f1,
                  r.scalars.mcc, r.roc.auc);
    }
  } else if (command == "infer") {
    for (const auto& p : run::infer(c, paths(f.inputs))) {
      std::printf("%s %s %.6f\n", p.path.c_str(), data::class_name(p.label).c_str(), p.malignant);
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"distillforge: skin-lesion knowledge distillation toolkit"};
  app.require_subcommand(1);
  Flags f;

  auto* synth = app.add_subcommand("synth-data", "generate a synthetic two-class corpus under --out");
  add_common(synth, f);
  synth->add_option("--per-class", f.per_class, "images per class");

  auto* ingest = app.add_subcommand("ingest", "scan --data and write manifest.csv");
  add_common(ingest, f);

  auto* preprocess = app.add_subcommand("preprocess", "run the preprocessing pipeline");
  add_common(preprocess, f);
  preprocess->add_option("images", f.inputs, "images to trace stage by stage");

  auto* teacher = app.add_subcommand("train-teacher", "train the two-stream teacher");
  add_common(teacher, f);
  add_training(teacher, f);

  auto* distill = app.add_subcommand("distill", "distill the student from a trained teacher");
  add_common(distill, f);
  add_training(distill, f);
  add_distill(distill, f);

  auto* ablate = app.add_subcommand("ablate", "sweep the ablation grid");
  add_common(ablate, f);
  add_training(ablate, f);
  add_distill(ablate, f);
  ablate->add_flag("--smoke", f.smoke, "one capped epoch per cell");

  auto* quantize = app.add_subcommand("quantize", "round a model to binary16 and report the accuracy change");
  add_common(quantize, f);
  quantize->add_option("--model", f.model, "archive to quantize (default <out>/student.dfkd)");

  auto* evaluate = app.add_subcommand("evaluate", "test-split metrics and ROC for model archives");
  add_common(evaluate, f);
  evaluate->add_option("--model", f.model, "archive to evaluate");
  evaluate->add_option("archives", f.inputs, "archives to evaluate");

  auto* infer = app.add_subcommand("infer", "classify images");
  add_common(infer, f);
  infer->add_option("--model", f.model, "archive to use (default <out>/student.dfkd)");
  infer->add_option("images", f.inputs, "images to classify")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: usage: %s\n", e.what());
    return 2;
  }

  try {
    return execute(app.get_subcommands().front()->get_name(), f);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", std::string(to_string(e.kind())).c_str(), e.what());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", e.what());
  }
  return 1;
}
