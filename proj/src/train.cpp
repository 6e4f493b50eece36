#include "distillforge/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "distillforge/metrics.hpp"

namespace distillforge::train {
namespace {

double rms(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * x[i];
  return std::sqrt(s / static_cast<double>(n));
}

std::string fixed(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

int argmax2(const float* row) { return row[1] > row[0] ? 1 : 0; }

using BatchLoss = std::function<Var<float>(Tape<float>&, const Var<float>& logits, const Tensor<float>& batch,
                                           std::span<const int> labels)>;

History fit(models::ModelGraph<float>& model, const Dataset& train, const Dataset& val, const TrainConfig& config,
            const BatchLoss& loss_fn, const StepObserver& observer) {
  validate(config);
  require(train.size() > 0, ErrorKind::size, "training split is empty");
  require(val.size() > 0, ErrorKind::size, "validation split is empty");
  require(train.labels.size() == train.size() && val.labels.size() == val.size(), ErrorKind::size,
          "dataset labels and images differ in count");

  const Rng root(config.seed);
  Rng shuffle_rng = root.fork(1);
  Rng augment_rng = root.fork(2);
  Rng dropout_rng = root.fork(3);
  Optimizer<float> opt(config.optimizer, config.learning_rate);
  const std::vector<Parameter<float>*> params = model.trainable_parameters();

  History h;
  std::vector<Tensor<float>> best;
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    if (config.max_steps && h.steps >= config.max_steps) break;
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_rng.shuffle(order.begin(), order.end());

    model.set_mode(nn::Mode::train);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      if (config.max_steps && h.steps >= config.max_steps) break;
      const std::size_t count = std::min(config.batch_size, order.size() - start);
      std::vector<Tensor<float>> augmented;
      std::vector<const Tensor<float>*> samples;
      std::vector<int> labels;
      augmented.reserve(count);
      for (std::size_t k = 0; k < count; ++k) {
        const std::size_t idx = order[start + k];
        const Tensor<float>& img = train.images[idx];
        if (config.augment) {
          const auto sample = imgproc::sample_affine(config.augmentation, img.dim(2), img.dim(1), augment_rng);
          augmented.push_back(imgproc::apply_affine(img, sample));
          samples.push_back(&augmented.back());
        } else {
          samples.push_back(&img);
        }
        labels.push_back(train.labels[idx]);
      }
      Tensor<float> batch = models::stack(samples);
      Tape<float> tape;
      Var<float> logits = model.forward(tape, tape.constant(batch), &dropout_rng);
      Var<float> loss = loss_fn(tape, logits, batch, labels);
      tape.backward(loss);
      opt.step(params);
      ++h.steps;
      loss_sum += static_cast<double>(loss.value().item()) * static_cast<double>(count);
      for (std::size_t k = 0; k < count; ++k) correct += argmax2(logits.value().data() + 2 * k) == labels[k];
      seen += count;
      if (observer) observer(h.steps);
    }
    model.set_mode(nn::Mode::infer);
    if (seen == 0) break;
    const auto [val_loss, val_acc] = evaluate_loss_accuracy(model, val);
    h.epochs.push_back({epoch, loss_sum / static_cast<double>(seen),
                        static_cast<double>(correct) / static_cast<double>(seen), val_loss, val_acc});
    if (h.best_epoch == 0 || val_acc > h.best_val_accuracy) {
      h.best_epoch = epoch;
      h.best_val_accuracy = val_acc;
      if (config.keep_best) best = model.snapshot();
    }
  }
  if (config.keep_best && !best.empty()) model.restore(best);
  model.set_mode(nn::Mode::infer);
  return h;
}

}  // namespace

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::adam:
      return "adam";
    case OptimizerKind::nadam:
      return "nadam";
    case OptimizerKind::rmsprop:
      return "rmsprop";
    case OptimizerKind::adafactor:
      return "adafactor";
  }
  return "?";
}

OptimizerKind parse_optimizer(const std::string& name) {
  std::string n = name;
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
  if (n == "adam") return OptimizerKind::adam;
  if (n == "nadam") return OptimizerKind::nadam;
  if (n == "rmsprop") return OptimizerKind::rmsprop;
  if (n == "adafactor") return OptimizerKind::adafactor;
  throw Error(ErrorKind::config, "unknown optimizer '" + name + "' (adam, nadam, rmsprop, adafactor)");
}

template <typename T>
Optimizer<T>::Optimizer(OptimizerKind kind, double learning_rate, OptimizerParams params)
    : kind_(kind), lr_(learning_rate), hp_(params) {
  require(std::isfinite(learning_rate) && learning_rate >= 0.0, ErrorKind::config,
          "learning rate must be finite and nonnegative");
}

template <typename T>
void Optimizer<T>::step(const std::vector<Parameter<T>*>& params) {
  if (shapes_.empty() && slots_.empty()) {
    for (auto* p : params) shapes_.push_back(p->value().shape());
    slots_.resize(params.size());
  }
  require(params.size() == shapes_.size(), ErrorKind::state, "optimizer parameter list changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i]->value().shape() == shapes_[i], ErrorKind::state,
            "optimizer state shape mismatch for '" + params[i]->name() + "'");
    require(params[i]->grad().shape() == params[i]->value().shape(), ErrorKind::state,
            "missing gradient for '" + params[i]->name() + "'");
  }
  ++t_;
  for (std::size_t i = 0; i < params.size(); ++i) update(*params[i], slots_[i]);
}

template <typename T>
void Optimizer<T>::update(Parameter<T>& p, Slot& slot) {
  if (kind_ == OptimizerKind::adafactor) {
    adafactor(p, slot);
    return;
  }
  const std::size_t n = p.value().numel();
  T* w = p.value().data();
  const T* g = p.grad().data();
  const double t = static_cast<double>(t_);
  if (slot.v.empty()) slot.v = Tensor<T>(p.value().shape());
  T* v = slot.v.data();

  if (kind_ == OptimizerKind::rmsprop) {
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[i];
      const double vi = hp_.rho * static_cast<double>(v[i]) + (1.0 - hp_.rho) * gi * gi;
      v[i] = static_cast<T>(vi);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - lr_ * gi / std::sqrt(vi + hp_.epsilon));
    }
    return;
  }

  if (slot.m.empty()) slot.m = Tensor<T>(p.value().shape());
  T* m = slot.m.data();
  const double b1 = hp_.beta1, b2 = hp_.beta2;
  const double bc1 = 1.0 - std::pow(b1, t);
  const double bc1_next = 1.0 - std::pow(b1, t + 1.0);
  const double bc2 = 1.0 - std::pow(b2, t);
  for (std::size_t i = 0; i < n; ++i) {
    const double gi = g[i];
    const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
    const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double vhat = vi / bc2;
    double mhat = mi / bc1;
    if (kind_ == OptimizerKind::nadam) mhat = b1 * mi / bc1_next + (1.0 - b1) * gi / bc1;
    w[i] = static_cast<T>(static_cast<double>(w[i]) - lr_ * mhat / (std::sqrt(vhat) + hp_.epsilon));
  }
}

template <typename T>
void Optimizer<T>::adafactor(Parameter<T>& p, Slot& slot) {
  const Tensor<T>& grad = p.grad();
  Tensor<T>& value = p.value();
  const std::size_t n = value.numel();
  const double t = static_cast<double>(t_);
  const double beta = 1.0 - std::pow(t, hp_.decay_exponent);

  std::vector<double> g(n), v(n), w(n);
  for (std::size_t i = 0; i < n; ++i) {
    g[i] = grad[i];
    w[i] = value[i];
  }

  if (value.rank() >= 2) {
    // factored second moment over the [dim0 x rest] matrix view
    const std::size_t rows = value.dim(0), cols = n / rows;
    if (slot.row.empty()) {
      slot.row = Tensor<T>({rows});
      slot.col = Tensor<T>({cols});
    }
    std::vector<double> row_mean(rows, 0.0), col_mean(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const double sq = g[r * cols + c] * g[r * cols + c] + hp_.epsilon1;
        row_mean[r] += sq;
        col_mean[c] += sq;
      }
    }
    double r_avg = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      const double rv = beta * static_cast<double>(slot.row[r]) + (1.0 - beta) * row_mean[r] / static_cast<double>(cols);
      slot.row[r] = static_cast<T>(rv);
      r_avg += rv;
    }
    r_avg /= static_cast<double>(rows);
    for (std::size_t c = 0; c < cols; ++c) {
      slot.col[c] =
          static_cast<T>(beta * static_cast<double>(slot.col[c]) + (1.0 - beta) * col_mean[c] / static_cast<double>(rows));
    }
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        v[r * cols + c] = static_cast<double>(slot.row[r]) / r_avg * static_cast<double>(slot.col[c]);
      }
    }
  } else {
    if (slot.v.empty()) slot.v = Tensor<T>(value.shape());
    for (std::size_t i = 0; i < n; ++i) {
      const double vi = beta * static_cast<double>(slot.v[i]) + (1.0 - beta) * (g[i] * g[i] + hp_.epsilon1);
      slot.v[i] = static_cast<T>(vi);
      v[i] = vi;
    }
  }

  std::vector<double> u(n);
  for (std::size_t i = 0; i < n; ++i) u[i] = g[i] / std::sqrt(v[i]);
  const double clip = std::max(1.0, rms(u.data(), n) / hp_.clip_threshold);
  const double step = lr_ * std::max(hp_.epsilon2, rms(w.data(), n));
  for (std::size_t i = 0; i < n; ++i) value[i] = static_cast<T>(w[i] - step * (u[i] / clip));
}

template <typename T>
Var<T> kd_loss(const Var<T>& student_logits, const Tensor<T>& teacher_logits, std::span<const int> labels,
               double temperature, double alpha) {
  require(std::isfinite(temperature) && temperature > 0.0, ErrorKind::domain, "temperature must be positive");
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::domain, "alpha must lie in [0, 1]");
  require(student_logits.value().shape() == teacher_logits.shape(), ErrorKind::dimension,
          "student logits " + shape_str(student_logits.value().shape()) + " vs teacher logits " +
              shape_str(teacher_logits.shape()));
  Tape<T>& tape = student_logits.tape();
  const T temp = static_cast<T>(temperature);
  Var<T> hard = ops::cross_entropy(ops::softmax_t(student_logits, T(1)), labels);
  Var<T> soft_target = ops::softmax_t(tape.constant(teacher_logits), temp);
  Var<T> soft = ops::kl_divergence(soft_target, ops::softmax_t(student_logits, temp));
  return ops::add_scaled(hard, static_cast<T>(alpha), soft,
                         static_cast<T>((1.0 - alpha) * temperature * temperature));
}

void validate(const TrainConfig& c) {
  require(c.batch_size > 0, ErrorKind::config, "batch size must be positive");
  require(std::isfinite(c.learning_rate) && c.learning_rate >= 0.0, ErrorKind::config,
          "learning rate must be finite and nonnegative");
  require(std::isfinite(c.temperature) && c.temperature > 0.0, ErrorKind::config, "temperature must be positive");
  require(c.alpha >= 0.0 && c.alpha <= 1.0, ErrorKind::config, "alpha must lie in [0, 1]");
}

void write_history_csv(const History& history, std::ostream& out) {
  out << "epoch,train_loss,train_accuracy,val_loss,val_accuracy\n";
  for (const auto& e : history.epochs) {
    out << e.epoch << ',' << fixed(e.train_loss, 6) << ',' << fixed(e.train_accuracy, 4) << ','
        << fixed(e.val_loss, 6) << ',' << fixed(e.val_accuracy, 4) << '\n';
  }
}

std::pair<double, double> evaluate_loss_accuracy(models::ModelGraph<float>& model, const Dataset& data) {
  require(data.size() > 0, ErrorKind::size, "cannot evaluate an empty split");
  std::vector<const Tensor<float>*> samples;
  for (const auto& img : data.images) samples.push_back(&img);
  const Tensor<float> probs = model.predict(models::stack(samples));
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double p = std::max<double>(probs.at(i, static_cast<std::size_t>(data.labels[i])), ops::kLogClamp);
    loss -= std::log(p);
    correct += argmax2(probs.data() + 2 * i) == data.labels[i];
  }
  const auto n = static_cast<double>(data.size());
  return {loss / n, static_cast<double>(correct) / n};
}

History train_supervised(models::ModelGraph<float>& model, const Dataset& train, const Dataset& val,
                         const TrainConfig& config, const StepObserver& observer) {
  BatchLoss loss = [](Tape<float>&, const Var<float>& logits, const Tensor<float>&, std::span<const int> labels) {
    return ops::cross_entropy(ops::softmax_t(logits, 1.0f), labels);
  };
  return fit(model, train, val, config, loss, observer);
}

History train_teacher(models::ModelGraph<float>& teacher, const Dataset& train, const Dataset& val,
                      const TrainConfig& config, const StepObserver& observer) {
  return train_supervised(teacher, train, val, config, observer);
}

History distill_student(models::ModelGraph<float>& student, models::ModelGraph<float>& teacher, const Dataset& train,
                        const Dataset& val, const TrainConfig& config, const StepObserver& observer) {
  require(student.input_shape() == teacher.input_shape(), ErrorKind::dimension,
          "student input " + shape_str(student.input_shape()) + " differs from teacher input " +
              shape_str(teacher.input_shape()));
  teacher.set_mode(nn::Mode::infer);
  const double temperature = config.temperature, alpha = config.alpha;
  BatchLoss loss = [&teacher, temperature, alpha](Tape<float>&, const Var<float>& logits, const Tensor<float>& batch,
                                                  std::span<const int> labels) {
    const Tensor<float> teacher_logits = teacher.predict_logits(batch, batch.dim(0));
    return kd_loss(logits, teacher_logits, labels, temperature, alpha);
  };
  return fit(student, train, val, config, loss, observer);
}

std::vector<AblationAxis> full_grid() {
  return {{"optimizer", {"adam", "adafactor", "nadam", "rmsprop"}},
          {"batch_size", {"16", "32", "64"}},
          {"learning_rate", {"0.1", "0.01", "0.001", "0.002"}},
          {"temperature", {"1", "2", "5", "10"}},
          {"alpha", {"0.3", "0.5"}},
          {"feature_conversion", {"flatten", "global_avg", "global_max"}},
          {"epochs", {"30", "50", "70", "100"}}};
}

namespace {

struct Cell {
  TrainConfig train;
  models::FeatureConversion feature;
};

double parse_number(const std::string& axis, const std::string& value) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == value.size() && !value.empty(), ErrorKind::config,
          "ablation axis " + axis + ": '" + value + "' is not a number");
  return v;
}

std::size_t parse_count(const std::string& axis, const std::string& value) {
  const double v = parse_number(axis, value);
  require(v >= 0 && v == std::floor(v), ErrorKind::config,
          "ablation axis " + axis + ": '" + value + "' is not a nonnegative integer");
  return static_cast<std::size_t>(v);
}

void apply(Cell& cell, const std::string& axis, const std::string& value) {
  if (axis == "optimizer") {
    cell.train.optimizer = parse_optimizer(value);
  } else if (axis == "batch_size") {
    cell.train.batch_size = parse_count(axis, value);
  } else if (axis == "learning_rate") {
    cell.train.learning_rate = parse_number(axis, value);
  } else if (axis == "temperature") {
    cell.train.temperature = parse_number(axis, value);
  } else if (axis == "alpha") {
    cell.train.alpha = parse_number(axis, value);
  } else if (axis == "feature_conversion") {
    cell.feature = models::parse_feature_conversion(value);
  } else if (axis == "epochs") {
    cell.train.epochs = parse_count(axis, value);
  } else {
    throw Error(ErrorKind::config, "unknown ablation axis '" + axis + "'");
  }
}

}  // namespace

std::vector<AblationRow> run_ablation(const std::vector<AblationAxis>& grid, models::ModelGraph<float>& teacher,
                                      const Dataset& train, const Dataset& val, const Dataset& test,
                                      const TrainConfig& base, models::FeatureConversion base_feature,
                                      const AblationOptions& options,
                                      const std::function<void(const AblationRow&)>& on_row) {
  require(!grid.empty(), ErrorKind::config, "ablation grid has no axes");
  for (const auto& axis : grid) {
    require(!axis.values.empty(), ErrorKind::config, "ablation axis '" + axis.name + "' has no values");
    Cell probe{base, base_feature};
    for (const auto& v : axis.values) apply(probe, axis.name, v);
  }
  require(test.size() > 0, ErrorKind::size, "test split is empty");
  std::vector<const Tensor<float>*> test_samples;
  for (const auto& img : test.images) test_samples.push_back(&img);
  const Tensor<float> test_batch = models::stack(test_samples);

  Cell best{base, base_feature};
  std::vector<AblationRow> rows;
  for (const auto& axis : grid) {
    double best_val = -1.0;
    std::string best_value;
    for (const auto& value : axis.values) {
      Cell cell = best;
      apply(cell, axis.name, value);
      if (options.epoch_cap) cell.train.epochs = std::min(cell.train.epochs, options.epoch_cap);
      if (options.max_steps) cell.train.max_steps = options.max_steps;
      AblationRow row;
      row.axis = axis.name;
      row.value = value;
      try {
        models::StudentConfig scfg;
        scfg.input_size = options.input_size;
        scfg.feature = cell.feature;
        auto student = models::build_student<float>(scfg, cell.train.seed);
        const History h = distill_student(student, teacher, train, val, cell.train);
        const auto r = metrics::report(test.labels, student.predict(test_batch));
        row.accuracy = r.scalars.accuracy;
        row.precision = r.scalars.precision;
        row.recall = r.scalars.recall;
        row.f1 = r.scalars.f1;
        row.mcc = r.scalars.mcc;
        if (h.best_val_accuracy > best_val) {
          best_val = h.best_val_accuracy;
          best_value = value;
        }
      } catch (const Error& e) {
        row.error = std::string(to_string(e.kind())) + ": " + e.what();
      }
      rows.push_back(row);
      if (on_row) on_row(row);
    }
    if (!best_value.empty()) apply(best, axis.name, best_value);
  }
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, std::ostream& out) {
  out << "axis,value,accuracy,precision,recall,f1,mcc\n";
  for (const auto& r : rows) {
    out << r.axis << ',' << r.value << ',' << fixed(r.accuracy, 4) << ',' << fixed(r.precision, 4) << ','
        << fixed(r.recall, 4) << ',' << fixed(r.f1, 4) << ',' << fixed(r.mcc, 4) << '\n';
  }
}

template class Optimizer<float>;
template class Optimizer<double>;
template Var<float> kd_loss<float>(const Var<float>&, const Tensor<float>&, std::span<const int>, double, double);
template Var<double> kd_loss<double>(const Var<double>&, const Tensor<double>&, std::span<const int>, double, double);

}  // namespace distillforge::train
