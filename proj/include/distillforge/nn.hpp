#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "distillforge/ops.hpp"

namespace distillforge::nn {

using ops::Mode;

template <typename T>
struct ForwardContext {
  Tape<T>& tape;
  Mode mode = Mode::infer;
  Rng* rng = nullptr;  // required by dropout in training mode
};

template <typename T>
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  const std::string& name() const noexcept { return name_; }
  virtual std::string kind() const = 0;
  virtual Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) = 0;

  /// Parameters owned directly by this layer (trainable and buffers).
  virtual std::vector<Parameter<T>*> own_parameters() { return {}; }
  virtual std::vector<Layer<T>*> children() { return {}; }

  /// All parameters below this layer with '/'-joined path names.
  std::vector<std::pair<std::string, Parameter<T>*>> named_parameters(const std::string& prefix = "");

 private:
  std::string name_;
};

template <typename T>
using LayerPtr = std::unique_ptr<Layer<T>>;

/// Glorot-uniform tensor, limit sqrt(6 / (fan_in + fan_out)).
template <typename T>
Tensor<T> glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

template <typename T>
class Dense : public Layer<T> {
 public:
  Dense(std::string name, std::size_t in, std::size_t out, Rng& rng, bool bias = true);
  std::string kind() const override { return "dense"; }
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override;
  std::vector<Parameter<T>*> own_parameters() override;

  Parameter<T>& kernel() { return kernel_; }  // [in x out]
  Parameter<T>& bias() { return bias_; }
  bool has_bias() const { return has_bias_; }

 private:
  Parameter<T> kernel_;
  Parameter<T> bias_;
  bool has_bias_;
};

template <typename T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels, Rng& rng,
         ops::Padding padding = ops::Padding::same);
  std::string kind() const override { return "conv2d"; }
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override;
  std::vector<Parameter<T>*> own_parameters() override { return {&kernel_, &bias_}; }

 private:
  Parameter<T> kernel_;  // [out x in x 3 x 3]
  Parameter<T> bias_;
  ops::Padding padding_;
};

template <typename T>
class Pool : public Layer<T> {
 public:
  Pool(std::string name, ops::PoolKind kind) : Layer<T>(std::move(name)), kind_(kind) {}
  std::string kind() const override { return "pool"; }
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override;

 private:
  ops::PoolKind kind_;
};

template <typename T>
class Act : public Layer<T> {
 public:
  Act(std::string name, ops::Activation kind) : Layer<T>(std::move(name)), kind_(kind) {}
  std::string kind() const override { return "activation"; }
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override;

 private:
  ops::Activation kind_;
};

template <typename T>
class Flatten : public Layer<T> {
 public:
  explicit Flatten(std::string name) : Layer<T>(std::move(name)) {}
  std::string kind() const override { return "flatten"; }
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override;
};

template <typename T>
class Dropout : public Layer<T> {
 public:
  Dropout(std::string name, double rate);
  std::string kind() const override { return "dropout"; }
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override;
  double rate() const { return rate_; }

 private:
  double rate_;
};

/// Batch normalization for [b x f] or [b x c x H x W]. Running statistics are
/// non-trainable parameters so they are saved with the model.
template <typename T>
class BatchNorm : public Layer<T> {
 public:
  BatchNorm(std::string name, std::size_t features);
  std::string kind() const override { return "batch_norm"; }
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override;
  std::vector<Parameter<T>*> own_parameters() override { return {&gamma_, &beta_, &running_mean_, &running_var_}; }

 private:
  Parameter<T> gamma_, beta_, running_mean_, running_var_;
};

template <typename T>
class LayerNorm : public Layer<T> {
 public:
  LayerNorm(std::string name, std::size_t features);
  std::string kind() const override { return "layer_norm"; }
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override;
  std::vector<Parameter<T>*> own_parameters() override { return {&gamma_, &beta_}; }

 private:
  Parameter<T> gamma_, beta_;
};

template <typename T>
struct SETrace {
  Tensor<T> x;  // input feature maps
  Tensor<T> z;  // [b x C] channel means
  Tensor<T> s;  // [b x C] excitation weights
  Tensor<T> y;  // recalibrated output
};

/// Squeeze-and-excitation: z = spatial mean, s = sigmoid(relu(z W1) W2),
/// y = s * x per channel. W1 is [C x C/r], W2 is [C/r x C], no biases.
template <typename T>
class SEBlock : public Layer<T> {
 public:
  SEBlock(std::string name, std::size_t channels, std::size_t reduction, Rng& rng);
  std::string kind() const override { return "se_block"; }
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override;
  std::vector<Parameter<T>*> own_parameters() override { return {&w1_, &w2_}; }

  Parameter<T>& w1() { return w1_; }
  Parameter<T>& w2() { return w2_; }
  const SETrace<T>& last_trace() const { return trace_; }

 private:
  Parameter<T> w1_, w2_;
  SETrace<T> trace_;
};

struct ViTConfig {
  std::size_t channels = 3;
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t depth = 2;
  std::size_t mlp_ratio = 2;
  bool class_token = true;

  std::size_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  void validate() const;
};

/// Patches -> shared linear projection -> class token -> position embeddings.
template <typename T>
class PatchEmbed : public Layer<T> {
 public:
  PatchEmbed(std::string name, const ViTConfig& cfg, Rng& rng);
  std::string kind() const override { return "patch_embed"; }
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override;
  std::vector<Parameter<T>*> own_parameters() override;
  std::vector<Layer<T>*> children() override { return {&proj_}; }

  Dense<T>& projection() { return proj_; }
  Parameter<T>& class_token() { return cls_; }
  Parameter<T>& position() { return pos_; }

 private:
  ViTConfig cfg_;
  Dense<T> proj_;
  Parameter<T> cls_;  // [D]
  Parameter<T> pos_;  // [tokens x D]
};

template <typename T>
class MultiHeadSelfAttention : public Layer<T> {
 public:
  MultiHeadSelfAttention(std::string name, std::size_t dim, std::size_t heads, Rng& rng);
  std::string kind() const override { return "mhsa"; }
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override;
  std::vector<Layer<T>*> children() override { return {&qkv_, &proj_}; }

  Dense<T>& qkv() { return qkv_; }
  Dense<T>& projection() { return proj_; }
  /// Attention probabilities of the last forward, [b x heads x n x n].
  const Tensor<T>& last_weights() const { return weights_; }

 private:
  std::size_t heads_;
  Dense<T> qkv_;
  Dense<T> proj_;
  Tensor<T> weights_;
};

/// Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.)) with a GELU hidden layer.
template <typename T>
class TransformerBlock : public Layer<T> {
 public:
  TransformerBlock(std::string name, std::size_t dim, std::size_t heads, std::size_t mlp_ratio, Rng& rng);
  std::string kind() const override { return "transformer_block"; }
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override;
  std::vector<Layer<T>*> children() override { return {&ln1_, &attn_, &ln2_, &fc1_, &fc2_}; }

  MultiHeadSelfAttention<T>& attention() { return attn_; }
  Dense<T>& mlp_out() { return fc2_; }

 private:
  LayerNorm<T> ln1_;
  MultiHeadSelfAttention<T> attn_;
  LayerNorm<T> ln2_;
  Dense<T> fc1_;
  Dense<T> fc2_;
};

/// Patch embedding, transformer blocks, final layer norm; emits the class-token
/// feature [b x D].
template <typename T>
class ViTEncoder : public Layer<T> {
 public:
  ViTEncoder(std::string name, const ViTConfig& cfg, Rng& rng);
  std::string kind() const override { return "vit"; }
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override;
  std::vector<Layer<T>*> children() override;

  PatchEmbed<T>& embed() { return *embed_; }
  TransformerBlock<T>& block(std::size_t i) { return *blocks_.at(i); }

 private:
  ViTConfig cfg_;
  std::unique_ptr<PatchEmbed<T>> embed_;
  std::vector<std::unique_ptr<TransformerBlock<T>>> blocks_;
  std::unique_ptr<LayerNorm<T>> norm_;
};

template <typename T>
class Sequential : public Layer<T> {
 public:
  explicit Sequential(std::string name) : Layer<T>(std::move(name)) {}
  std::string kind() const override { return "sequential"; }
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override;
  std::vector<Layer<T>*> children() override;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }
  void push(LayerPtr<T> layer) { layers_.push_back(std::move(layer)); }
  std::size_t size() const { return layers_.size(); }
  Layer<T>& at(std::size_t i) { return *layers_.at(i); }

 private:
  std::vector<LayerPtr<T>> layers_;
};

/// Feeds the same input to every branch and concatenates outputs on axis 1.
template <typename T>
class Parallel : public Layer<T> {
 public:
  explicit Parallel(std::string name) : Layer<T>(std::move(name)) {}
  std::string kind() const override { return "parallel"; }
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override;
  std::vector<Layer<T>*> children() override;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    branches_.push_back(std::move(layer));
    return ref;
  }
  Layer<T>& at(std::size_t i) { return *branches_.at(i); }

 private:
  std::vector<LayerPtr<T>> branches_;
};

/// Depth-first search for a layer by its '/'-joined path below `root`.
template <typename T>
Layer<T>* find_layer(Layer<T>& root, const std::string& path);

}  // namespace distillforge::nn
