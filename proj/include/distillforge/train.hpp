#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "distillforge/dataset.hpp"
#include "distillforge/imgproc.hpp"
#include "distillforge/models.hpp"

namespace distillforge::train {

enum class OptimizerKind { adam, nadam, rmsprop, adafactor };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct OptimizerParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double rho = 0.9;                 // RMSprop decay
  double epsilon1 = 1e-30;          // Adafactor
  double epsilon2 = 1e-3;           // Adafactor parameter-scale floor
  double clip_threshold = 1.0;      // Adafactor update clipping
  double decay_exponent = -0.8;     // Adafactor beta2_t = 1 - t^decay
};

/// In-place optimizer over a fixed parameter list. State buffers are created
/// on the first step and keyed by position in the list.
template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate, OptimizerParams params = {});

  /// Applies one update using each parameter's grad(). Throws a state error
  /// when a gradient is missing or the parameter list changed shape.
  void step(const std::vector<Parameter<T>*>& params);

  OptimizerKind kind() const noexcept { return kind_; }
  double learning_rate() const noexcept { return lr_; }
  std::uint64_t steps() const noexcept { return t_; }

 private:
  struct Slot {
    Tensor<T> m;    // first moment
    Tensor<T> v;    // second moment / squared average / unfactored Adafactor moment
    Tensor<T> row;  // Adafactor row statistics
    Tensor<T> col;  // Adafactor column statistics
  };
  void update(Parameter<T>& p, Slot& slot);
  void adafactor(Parameter<T>& p, Slot& slot);

  OptimizerKind kind_;
  double lr_;
  OptimizerParams hp_;
  std::uint64_t t_ = 0;
  std::vector<Slot> slots_;
  std::vector<Shape> shapes_;
};

/// alpha * CE(labels, softmax(student)) + (1 - alpha) * T^2 *
/// KL(softmax(teacher / T) || softmax(student / T)). Teacher logits are constants.
template <typename T>
Var<T> kd_loss(const Var<T>& student_logits, const Tensor<T>& teacher_logits, std::span<const int> labels,
               double temperature, double alpha);

using data::Dataset;

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adafactor;
  double learning_rate = 0.002;
  std::size_t batch_size = 64;
  std::size_t epochs = 70;
  double temperature = 1.0;
  double alpha = 0.5;
  std::uint64_t seed = 42;
  bool augment = true;
  imgproc::AugmentParams augmentation{};
  /// Stop after this many optimizer steps in total; 0 means no limit.
  std::size_t max_steps = 0;
  /// Keep the weights of the epoch with the best validation accuracy.
  bool keep_best = true;
};

void validate(const TrainConfig& config);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct History {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based; 0 when no epoch ran
  double best_val_accuracy = 0.0;
  std::size_t steps = 0;
};

/// CSV with header epoch,train_loss,train_accuracy,val_loss,val_accuracy.
void write_history_csv(const History& history, std::ostream& out);

/// Called after every optimizer step with the 1-based step number.
using StepObserver = std::function<void(std::size_t step)>;

/// Plain cross-entropy training (teacher, or a student without distillation).
History train_supervised(models::ModelGraph<float>& model, const Dataset& train, const Dataset& val,
                         const TrainConfig& config, const StepObserver& observer = {});

History train_teacher(models::ModelGraph<float>& teacher, const Dataset& train, const Dataset& val,
                      const TrainConfig& config, const StepObserver& observer = {});

/// Student trained on kd_loss against the teacher's logits for the same
/// (augmented) batch. The teacher runs in inference mode without gradients.
History distill_student(models::ModelGraph<float>& student, models::ModelGraph<float>& teacher, const Dataset& train,
                        const Dataset& val, const TrainConfig& config, const StepObserver& observer = {});

/// Mean cross-entropy and accuracy of the model on a dataset (inference mode).
std::pair<double, double> evaluate_loss_accuracy(models::ModelGraph<float>& model, const Dataset& data);

struct AblationAxis {
  std::string name;  // optimizer, batch_size, learning_rate, temperature, alpha, feature_conversion, epochs
  std::vector<std::string> values;
};

/// The full sweep: 4 optimizers, 3 batch sizes, 4 learning rates,
/// 4 temperatures, 2 alphas, 3 feature conversions, 4 epoch counts.
std::vector<AblationAxis> full_grid();

struct AblationRow {
  std::string axis;
  std::string value;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double mcc = 0.0;
  std::string error;  // set when the cell failed; metrics are then zero
};

struct AblationOptions {
  /// Overrides every cell's epoch count (including the epochs axis) when nonzero.
  std::size_t epoch_cap = 0;
  std::size_t max_steps = 0;
  std::size_t input_size = 64;
};

/// Axes are swept in order; each candidate is trained against the running best
/// configuration, and the best value of an axis (by validation accuracy) is
/// carried into later axes. Metrics in the rows are measured on `test`.
std::vector<AblationRow> run_ablation(const std::vector<AblationAxis>& grid, models::ModelGraph<float>& teacher,
                                      const Dataset& train, const Dataset& val, const Dataset& test,
                                      const TrainConfig& base, models::FeatureConversion base_feature,
                                      const AblationOptions& options = {},
                                      const std::function<void(const AblationRow&)>& on_row = {});

/// Header axis,value,accuracy,precision,recall,f1,mcc; metrics with 4 decimals.
void write_ablation_csv(const std::vector<AblationRow>& rows, std::ostream& out);

}  // namespace distillforge::train
