#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

#include "distillforge/dataset.hpp"
#include "distillforge/metrics.hpp"
#include "distillforge/model_io.hpp"
#include "distillforge/train.hpp"

namespace distillforge::run {

/// Everything a command needs, resolved before it runs. JSON config files use
/// these field names as a flat object.
struct RunConfig {
  std::uint64_t seed = 42;
  std::string data;
  std::string out = "out";
  std::size_t image_size = 64;

  // student and distillation
  std::string optimizer = "adafactor";
  double lr = 0.002;
  std::size_t batch = 64;
  std::size_t epochs = 70;
  double temperature = 1.0;
  double alpha = 0.5;
  std::string feature_conversion = "global_max";

  // teacher
  std::string teacher_optimizer = "adam";
  double teacher_lr = 1e-3;
  std::size_t teacher_batch = 32;
  std::size_t teacher_epochs = 15;
  std::size_t se_reduction = 4;

  // preprocessing
  std::size_t closing_size = 5;
  double bilateral_sigma_spatial = 3.0;
  double bilateral_sigma_range = 30.0;
  double blend_alpha = 1.14;
  double unsharp_sigma = 2.0;
  double unsharp_gain = 1.2;

  // augmentation
  bool augment = true;
  double rotation_deg = 20.0;
  double shift_fraction = 0.1;
  double shear_deg = 10.0;
  bool horizontal_flip = true;

  // synthetic corpus
  std::size_t per_class = 500;
  std::size_t synth_size = 64;

  // ablation
  bool smoke = false;
  std::size_t max_steps = 0;

  // archives; empty means the default name under `out`
  std::string teacher;
  std::string model;
};

nlohmann::json to_json(const RunConfig& config);
/// Overlays the keys of `j` on `base`. Unknown keys and wrong types are config errors.
RunConfig from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {});
void validate(const RunConfig& config);

imgproc::PipelineConfig pipeline(const RunConfig& config);
train::TrainConfig teacher_training(const RunConfig& config);
train::TrainConfig student_training(const RunConfig& config);

std::filesystem::path teacher_path(const RunConfig& config);
std::filesystem::path model_path(const RunConfig& config);

/// Writes config_<command>.json under `out`.
void echo_config(const RunConfig& config, const std::string& command);

struct Splits {
  data::Manifest manifest;
  data::Dataset train;
  data::Dataset val;
  data::Dataset test;
};

/// Ingests `data` with the run seed, writes manifest.csv, and preprocesses all splits.
Splits load_splits(const RunConfig& config);

metrics::MetricsReport evaluate_model(models::ModelGraph<float>& model, const data::Dataset& dataset);

struct TrainSummary {
  train::History history;
  metrics::MetricsReport test;
  std::size_t parameters = 0;
};

data::SynthSummary synth_data(const RunConfig& config);
data::Manifest ingest(const RunConfig& config);
/// With inputs, writes every pipeline stage of each image to out/<stem>/.
/// Without, writes the resized output of every manifest image to out/preprocessed/.
void preprocess(const RunConfig& config, const std::vector<std::filesystem::path>& inputs);
TrainSummary train_teacher(const RunConfig& config);
TrainSummary distill(const RunConfig& config);
std::vector<train::AblationRow> ablate(const RunConfig& config);
io::QuantizationReport quantize(const RunConfig& config);
/// Evaluates the given archives (default: those of teacher, student and
/// quantized student that exist under `out`) on the test split.
std::vector<std::pair<std::string, metrics::MetricsReport>> evaluate(const RunConfig& config,
                                                                     std::vector<std::filesystem::path> archives);
struct Prediction {
  std::string path;
  double benign = 0.0;
  double malignant = 0.0;
  int label = 0;
};
std::vector<Prediction> infer(const RunConfig& config, const std::vector<std::filesystem::path>& images);

}  // namespace distillforge::run
