#include "distillforge/models.hpp"

#include <algorithm>
#include <cstring>
#include <set>

namespace distillforge::models {
namespace {

using nlohmann::json;

template <typename T>
void walk(nn::Layer<T>& layer, const std::string& prefix, std::vector<LayerCount>& out) {
  const std::string path = prefix.empty() ? layer.name() : prefix + "/" + layer.name();
  std::size_t own = 0;
  for (Parameter<T>* p : layer.own_parameters()) own += p->value().numel();
  out.push_back({path, layer.kind(), own});
  for (nn::Layer<T>* child : layer.children()) walk(*child, path, out);
}

template <typename T>
void add_conv_blocks(nn::Sequential<T>& seq, const std::vector<std::size_t>& filters, Rng& rng) {
  std::size_t in = 3;
  for (std::size_t i = 0; i < filters.size(); ++i) {
    const std::string n = std::to_string(i + 1);
    seq.template add<nn::Conv2d<T>>("conv" + n, in, filters[i], rng);
    seq.template add<nn::Act<T>>("relu" + n, ops::Activation::relu);
    seq.template add<nn::Pool<T>>("pool" + n, ops::PoolKind::max2x2);
    in = filters[i];
  }
}

std::size_t halvings_divisor(std::size_t blocks) { return std::size_t{1} << blocks; }

template <typename V>
std::vector<V> vec_or(const json& j, const char* key, std::vector<V> fallback) {
  return j.contains(key) ? j.at(key).get<std::vector<V>>() : fallback;
}

template <typename V>
V value_or(const json& j, const char* key, V fallback) {
  return j.contains(key) ? j.at(key).get<V>() : fallback;
}

}  // namespace

std::string to_string(FeatureConversion conversion) {
  switch (conversion) {
    case FeatureConversion::flatten:
      return "flatten";
    case FeatureConversion::global_avg:
      return "global_avg";
    case FeatureConversion::global_max:
      return "global_max";
  }
  return "?";
}

FeatureConversion parse_feature_conversion(const std::string& name) {
  if (name == "flatten") return FeatureConversion::flatten;
  if (name == "global_avg" || name == "gap") return FeatureConversion::global_avg;
  if (name == "global_max" || name == "gmp") return FeatureConversion::global_max;
  throw Error(ErrorKind::config, "unknown feature conversion '" + name + "' (flatten, global_avg, global_max)");
}

std::uint64_t ArchitectureSpec::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  feed(kind);
  feed(std::string(1, '\0'));
  feed(config.dump());
  return h;
}

ArchitectureSpec describe(const StudentConfig& cfg) {
  return {"student", json{{"input_size", cfg.input_size},
                          {"feature_conversion", to_string(cfg.feature)},
                          {"conv_filters", cfg.conv_filters},
                          {"head_widths", cfg.head_widths}}};
}

ArchitectureSpec describe(const TeacherConfig& cfg) {
  return {"teacher_desk", json{{"input_size", cfg.input_size},
                               {"cnn_a", cfg.cnn_a},
                               {"cnn_b", cfg.cnn_b},
                               {"se_reduction", cfg.se_reduction},
                               {"patch_size", cfg.patch_size},
                               {"embed_dim", cfg.embed_dim},
                               {"num_heads", cfg.num_heads},
                               {"depth", cfg.depth},
                               {"mlp_ratio", cfg.mlp_ratio},
                               {"class_token", cfg.class_token},
                               {"head_widths", cfg.head_widths},
                               {"dropout", cfg.dropout}}};
}

StudentConfig student_config(const json& j) {
  try {
    StudentConfig cfg;
    cfg.input_size = value_or(j, "input_size", cfg.input_size);
    if (j.contains("feature_conversion")) cfg.feature = parse_feature_conversion(j.at("feature_conversion"));
    cfg.conv_filters = vec_or(j, "conv_filters", cfg.conv_filters);
    cfg.head_widths = vec_or(j, "head_widths", cfg.head_widths);
    return cfg;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("student config: ") + e.what());
  }
}

TeacherConfig teacher_config(const json& j) {
  try {
    TeacherConfig cfg;
    cfg.input_size = value_or(j, "input_size", cfg.input_size);
    cfg.cnn_a = vec_or(j, "cnn_a", cfg.cnn_a);
    cfg.cnn_b = vec_or(j, "cnn_b", cfg.cnn_b);
    cfg.se_reduction = value_or(j, "se_reduction", cfg.se_reduction);
    cfg.patch_size = value_or(j, "patch_size", cfg.patch_size);
    cfg.embed_dim = value_or(j, "embed_dim", cfg.embed_dim);
    cfg.num_heads = value_or(j, "num_heads", cfg.num_heads);
    cfg.depth = value_or(j, "depth", cfg.depth);
    cfg.mlp_ratio = value_or(j, "mlp_ratio", cfg.mlp_ratio);
    cfg.class_token = value_or(j, "class_token", cfg.class_token);
    cfg.head_widths = vec_or(j, "head_widths", cfg.head_widths);
    cfg.dropout = vec_or(j, "dropout", cfg.dropout);
    return cfg;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("teacher config: ") + e.what());
  }
}

template <typename T>
ModelGraph<T>::ModelGraph(ArchitectureSpec spec, Shape input_shape, std::unique_ptr<nn::Layer<T>> root)
    : spec_(std::move(spec)), input_shape_(std::move(input_shape)), root_(std::move(root)) {
  params_ = root_->named_parameters();
  std::set<std::string> seen;
  for (auto& [name, p] : params_) {
    require(seen.insert(name).second, ErrorKind::config, "duplicate parameter name '" + name + "'");
  }
}

template <typename T>
void ModelGraph<T>::check_input(const Shape& shape) const {
  bool ok = shape.size() == input_shape_.size() + 1 && shape[0] > 0;
  for (std::size_t i = 0; ok && i < input_shape_.size(); ++i) ok = shape[i + 1] == input_shape_[i];
  require(ok, ErrorKind::dimension,
          "model expects a batch of " + shape_str(input_shape_) + " samples, got " + shape_str(shape));
}

template <typename T>
Var<T> ModelGraph<T>::forward(Tape<T>& tape, const Var<T>& x, Rng* rng) {
  check_input(x.value().shape());
  nn::ForwardContext<T> ctx{tape, mode_, rng};
  Var<T> out = root_->forward(x, ctx);
  require(out.value().rank() == 2 && out.value().dim(1) == 2, ErrorKind::dimension,
          "model produced " + shape_str(out.value().shape()) + " instead of [b x 2]");
  return out;
}

template <typename T>
Tensor<T> ModelGraph<T>::predict_logits(const Tensor<T>& batch, std::size_t chunk) {
  check_input(batch.shape());
  const std::size_t n = batch.dim(0);
  const std::size_t per = batch.numel() / n;
  chunk = std::max<std::size_t>(chunk, 1);
  Tensor<T> out({n, 2});
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    Shape shape = batch.shape();
    shape[0] = count;
    Tensor<T> part(shape);
    std::memcpy(part.data(), batch.data() + start * per, count * per * sizeof(T));
    Tape<T> tape;
    tape.set_grad_enabled(false);
    nn::ForwardContext<T> ctx{tape, nn::Mode::infer, nullptr};
    Var<T> logits = root_->forward(tape.constant(std::move(part)), ctx);
    std::memcpy(out.data() + start * 2, logits.value().data(), count * 2 * sizeof(T));
  }
  return out;
}

template <typename T>
Tensor<T> ModelGraph<T>::predict(const Tensor<T>& batch, std::size_t chunk) {
  Tensor<T> logits = predict_logits(batch, chunk);
  Tape<T> tape;
  tape.set_grad_enabled(false);
  return ops::softmax_t(tape.constant(std::move(logits)), T(1)).value();
}

template <typename T>
std::vector<Parameter<T>*> ModelGraph<T>::trainable_parameters() const {
  std::vector<Parameter<T>*> out;
  for (auto& [name, p] : params_) {
    if (p->trainable()) out.push_back(p);
  }
  return out;
}

template <typename T>
Parameter<T>* ModelGraph<T>::find_parameter(const std::string& name) const {
  for (auto& [n, p] : params_) {
    if (n == name) return p;
  }
  return nullptr;
}

template <typename T>
ParamCount ModelGraph<T>::count_params() {
  ParamCount c;
  walk(*root_, "", c.layers);
  for (auto& [name, p] : params_) {
    const std::size_t n = p->value().numel();
    c.total += n;
    (p->trainable() ? c.trainable : c.frozen) += n;
  }
  return c;
}

template <typename T>
std::vector<Tensor<T>> ModelGraph<T>::snapshot() const {
  std::vector<Tensor<T>> out;
  out.reserve(params_.size());
  for (auto& [name, p] : params_) out.push_back(p->value());
  return out;
}

template <typename T>
void ModelGraph<T>::restore(const std::vector<Tensor<T>>& values) {
  require(values.size() == params_.size(), ErrorKind::state, "snapshot does not match the parameter table");
  for (std::size_t i = 0; i < values.size(); ++i) {
    require(values[i].shape() == params_[i].second->value().shape(), ErrorKind::state,
            "snapshot shape mismatch for '" + params_[i].first + "'");
    params_[i].second->value() = values[i];
  }
}

template <typename T>
ModelGraph<T> build_student(const StudentConfig& cfg, std::uint64_t seed) {
  const std::size_t div = halvings_divisor(cfg.conv_filters.size());
  require(!cfg.conv_filters.empty() && cfg.input_size > 0 && cfg.input_size % div == 0, ErrorKind::config,
          "student input size " + std::to_string(cfg.input_size) + " does not survive " +
              std::to_string(cfg.conv_filters.size()) + " 2x2 poolings");
  Rng rng(seed);
  auto root = std::make_unique<nn::Sequential<T>>("student");
  add_conv_blocks(*root, cfg.conv_filters, rng);
  const std::size_t channels = cfg.conv_filters.back();
  std::size_t features = channels;
  switch (cfg.feature) {
    case FeatureConversion::flatten: {
      const std::size_t side = cfg.input_size / div;
      features = channels * side * side;
      root->template add<nn::Flatten<T>>("feature");
      break;
    }
    case FeatureConversion::global_avg:
      root->template add<nn::Pool<T>>("feature", ops::PoolKind::global_avg);
      break;
    case FeatureConversion::global_max:
      root->template add<nn::Pool<T>>("feature", ops::PoolKind::global_max);
      break;
  }
  std::size_t in = features;
  for (std::size_t i = 0; i < cfg.head_widths.size(); ++i) {
    const std::string n = std::to_string(i + 1);
    root->template add<nn::Dense<T>>("dense" + n, in, cfg.head_widths[i], rng);
    root->template add<nn::Act<T>>("selu" + n, ops::Activation::selu);
    in = cfg.head_widths[i];
  }
  root->template add<nn::Dense<T>>("logits", in, 2, rng);
  return ModelGraph<T>(describe(cfg), {3, cfg.input_size, cfg.input_size}, std::move(root));
}

template <typename T>
ModelGraph<T> build_teacher_desk(const TeacherConfig& cfg, std::uint64_t seed) {
  require(!cfg.cnn_a.empty() && cfg.cnn_a.size() == cfg.cnn_b.size(), ErrorKind::config,
          "teacher CNN extractors need the same nonzero number of blocks");
  const std::size_t div = halvings_divisor(cfg.cnn_a.size());
  require(cfg.input_size > 0 && cfg.input_size % div == 0, ErrorKind::config,
          "teacher input size " + std::to_string(cfg.input_size) + " does not survive the CNN poolings");
  require(cfg.head_widths.size() == cfg.dropout.size() && !cfg.head_widths.empty(), ErrorKind::config,
          "teacher head needs one dropout rate per dense block");
  nn::ViTConfig vit{3, cfg.input_size, cfg.patch_size, cfg.embed_dim, cfg.num_heads, cfg.depth, cfg.mlp_ratio,
                    cfg.class_token};
  vit.validate();

  Rng rng(seed);
  auto root = std::make_unique<nn::Sequential<T>>("teacher");
  auto& streams = root->template add<nn::Parallel<T>>("streams");

  auto& cnn = streams.template add<nn::Sequential<T>>("cnn");
  auto& extractors = cnn.template add<nn::Parallel<T>>("extractors");
  add_conv_blocks(extractors.template add<nn::Sequential<T>>("cnn_a"), cfg.cnn_a, rng);
  add_conv_blocks(extractors.template add<nn::Sequential<T>>("cnn_b"), cfg.cnn_b, rng);
  const std::size_t channels = cfg.cnn_a.back() + cfg.cnn_b.back();
  cnn.template add<nn::BatchNorm<T>>("bn", channels);
  cnn.template add<nn::SEBlock<T>>("se", channels, cfg.se_reduction, rng);
  cnn.template add<nn::Pool<T>>("gap", ops::PoolKind::global_avg);

  auto& vit_stream = streams.template add<nn::Sequential<T>>("vit");
  vit_stream.template add<nn::ViTEncoder<T>>("encoder", vit, rng);
  vit_stream.template add<nn::BatchNorm<T>>("bn", cfg.embed_dim);

  std::size_t in = channels + cfg.embed_dim;
  for (std::size_t i = 0; i < cfg.head_widths.size(); ++i) {
    const std::string n = std::to_string(i + 1);
    root->template add<nn::Dropout<T>>("drop" + n, cfg.dropout[i]);
    root->template add<nn::Dense<T>>("fc" + n, in, cfg.head_widths[i], rng);
    root->template add<nn::Act<T>>("selu" + n, ops::Activation::selu);
    in = cfg.head_widths[i];
  }
  root->template add<nn::Dense<T>>("logits", in, 2, rng);
  return ModelGraph<T>(describe(cfg), {3, cfg.input_size, cfg.input_size}, std::move(root));
}

template <typename T>
ModelGraph<T> build_model(const ArchitectureSpec& spec, std::uint64_t seed) {
  if (spec.kind == "student") return build_student<T>(student_config(spec.config), seed);
  if (spec.kind == "teacher_desk") return build_teacher_desk<T>(teacher_config(spec.config), seed);
  throw Error(ErrorKind::config, "unknown architecture '" + spec.kind + "'");
}

template <typename T>
Tensor<T> stack(const std::vector<const Tensor<T>*>& samples) {
  require(!samples.empty(), ErrorKind::size, "cannot stack an empty batch");
  const Shape& first = samples.front()->shape();
  Shape shape{samples.size()};
  shape.insert(shape.end(), first.begin(), first.end());
  Tensor<T> out(shape);
  const std::size_t per = samples.front()->numel();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    require(samples[i]->shape() == first, ErrorKind::dimension,
            "sample " + std::to_string(i) + " has shape " + shape_str(samples[i]->shape()) + ", expected " +
                shape_str(first));
    std::memcpy(out.data() + i * per, samples[i]->data(), per * sizeof(T));
  }
  return out;
}

#define DISTILLFORGE_INSTANTIATE_MODELS(T)                                         \
  template class ModelGraph<T>;                                                    \
  template ModelGraph<T> build_student<T>(const StudentConfig&, std::uint64_t);    \
  template ModelGraph<T> build_teacher_desk<T>(const TeacherConfig&, std::uint64_t); \
  template ModelGraph<T> build_model<T>(const ArchitectureSpec&, std::uint64_t);   \
  template Tensor<T> stack<T>(const std::vector<const Tensor<T>*>&);

DISTILLFORGE_INSTANTIATE_MODELS(float)
DISTILLFORGE_INSTANTIATE_MODELS(double)

}  // namespace distillforge::models
