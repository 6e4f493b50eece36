#pragma once

#include <cstdint>
#include <json.hpp>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "distillforge/nn.hpp"

namespace distillforge::models {

enum class FeatureConversion { flatten, global_avg, global_max };

std::string to_string(FeatureConversion conversion);
FeatureConversion parse_feature_conversion(const std::string& name);

struct StudentConfig {
  std::size_t input_size = 64;
  FeatureConversion feature = FeatureConversion::global_max;
  std::vector<std::size_t> conv_filters{32, 64, 128};
  std::vector<std::size_t> head_widths{256, 128, 32};
};

struct TeacherConfig {
  std::size_t input_size = 64;
  std::vector<std::size_t> cnn_a{16, 32, 64};
  std::vector<std::size_t> cnn_b{24, 48, 96};
  std::size_t se_reduction = 4;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t depth = 2;
  std::size_t mlp_ratio = 2;
  bool class_token = true;
  std::vector<std::size_t> head_widths{256, 128, 64};
  std::vector<double> dropout{0.5, 0.5, 0.2};
};

/// Architecture identifier plus the configuration needed to rebuild it.
struct ArchitectureSpec {
  std::string kind;  // "student" or "teacher_desk"
  nlohmann::json config;

  /// FNV-1a 64 over the kind and the canonical JSON dump of the config.
  std::uint64_t digest() const;
};

ArchitectureSpec describe(const StudentConfig& cfg);
ArchitectureSpec describe(const TeacherConfig& cfg);
StudentConfig student_config(const nlohmann::json& config);
TeacherConfig teacher_config(const nlohmann::json& config);

struct LayerCount {
  std::string path;
  std::string kind;
  std::size_t params = 0;
};

struct ParamCount {
  std::size_t total = 0;
  std::size_t trainable = 0;
  std::size_t frozen = 0;  // non-trainable buffers such as batch-norm running statistics
  std::vector<LayerCount> layers;  // every layer in depth-first order, own parameters only
};

template <typename T>
using NamedParameter = std::pair<std::string, Parameter<T>*>;

/// A built network: root layer, parameter table, expected per-sample input
/// shape and a train/infer mode. Moves keep parameter addresses stable.
template <typename T>
class ModelGraph {
 public:
  ModelGraph(ArchitectureSpec spec, Shape input_shape, std::unique_ptr<nn::Layer<T>> root);

  const ArchitectureSpec& spec() const noexcept { return spec_; }
  const Shape& input_shape() const noexcept { return input_shape_; }
  nn::Layer<T>& root() { return *root_; }
  nn::Mode mode() const noexcept { return mode_; }
  void set_mode(nn::Mode mode) noexcept { mode_ = mode; }

  /// Logits [b x 2] for x [b x C x H x W] in the current mode. `rng` drives dropout.
  Var<T> forward(Tape<T>& tape, const Var<T>& x, Rng* rng = nullptr);

  /// Class probabilities with dropout off and running batch-norm statistics,
  /// evaluated in chunks of at most `chunk` samples.
  Tensor<T> predict(const Tensor<T>& batch, std::size_t chunk = 64);
  Tensor<T> predict_logits(const Tensor<T>& batch, std::size_t chunk = 64);

  const std::vector<NamedParameter<T>>& parameters() const noexcept { return params_; }
  std::vector<Parameter<T>*> trainable_parameters() const;
  Parameter<T>* find_parameter(const std::string& name) const;
  ParamCount count_params();

  /// Copies of every parameter value (trainable and buffers) in table order.
  std::vector<Tensor<T>> snapshot() const;
  void restore(const std::vector<Tensor<T>>& values);

 private:
  void check_input(const Shape& shape) const;

  ArchitectureSpec spec_;
  Shape input_shape_;
  std::unique_ptr<nn::Layer<T>> root_;
  std::vector<NamedParameter<T>> params_;
  nn::Mode mode_ = nn::Mode::infer;
};

/// Three conv(3x3 same)-ReLU-maxpool blocks, feature conversion, SELU dense
/// head, two logits.
template <typename T>
ModelGraph<T> build_student(const StudentConfig& cfg, std::uint64_t seed);

/// Two-stream desk teacher: {CNN A || CNN B} -> BN -> SE -> GAP alongside
/// ViT -> BN, fused by concatenation into three dropout+dense SELU blocks.
template <typename T>
ModelGraph<T> build_teacher_desk(const TeacherConfig& cfg, std::uint64_t seed);

template <typename T>
ModelGraph<T> build_model(const ArchitectureSpec& spec, std::uint64_t seed);

/// Stacks per-sample [C x H x W] tensors into [b x C x H x W].
template <typename T>
Tensor<T> stack(const std::vector<const Tensor<T>*>& samples);

}  // namespace distillforge::models
