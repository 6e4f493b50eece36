#include "distillforge/nn.hpp"

#include <cmath>

namespace distillforge::nn {
namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <typename T>
void collect(Layer<T>& layer, const std::string& prefix, std::vector<std::pair<std::string, Parameter<T>*>>& out) {
  const std::string here = prefix.empty() ? layer.name() : prefix + "/" + layer.name();
  for (Parameter<T>* p : layer.own_parameters()) out.emplace_back(here + "/" + p->name(), p);
  for (Layer<T>* child : layer.children()) collect(*child, here, out);
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Parameter<T>*>> Layer<T>::named_parameters(const std::string& prefix) {
  std::vector<std::pair<std::string, Parameter<T>*>> out;
  collect(*this, prefix, out);
  return out;
}

template <typename T>
Tensor<T> glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-limit, limit));
  return t;
}

template <typename T>
Dense<T>::Dense(std::string name, std::size_t in, std::size_t out, Rng& rng, bool bias)
    : Layer<T>(std::move(name)),
      kernel_("kernel", glorot_uniform<T>({in, out}, in, out, rng)),
      bias_("bias", Tensor<T>({out})),
      has_bias_(bias) {}

template <typename T>
Var<T> Dense<T>::forward(const Var<T>& x, ForwardContext<T>& ctx) {
  return ops::dense(x, ctx.tape.parameter(kernel_), has_bias_ ? ctx.tape.parameter(bias_) : Var<T>());
}

template <typename T>
std::vector<Parameter<T>*> Dense<T>::own_parameters() {
  if (has_bias_) return {&kernel_, &bias_};
  return {&kernel_};
}

template <typename T>
Conv2d<T>::Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels, Rng& rng,
                  ops::Padding padding)
    : Layer<T>(std::move(name)),
      kernel_("kernel",
              glorot_uniform<T>({out_channels, in_channels, 3, 3}, in_channels * 9, out_channels * 9, rng)),
      bias_("bias", Tensor<T>({out_channels})),
      padding_(padding) {}

template <typename T>
Var<T> Conv2d<T>::forward(const Var<T>& x, ForwardContext<T>& ctx) {
  return ops::conv2d(x, ctx.tape.parameter(kernel_), ctx.tape.parameter(bias_), padding_);
}

template <typename T>
Var<T> Pool<T>::forward(const Var<T>& x, ForwardContext<T>&) {
  return ops::pool(x, kind_);
}

template <typename T>
Var<T> Act<T>::forward(const Var<T>& x, ForwardContext<T>&) {
  return ops::activation(x, kind_);
}

template <typename T>
Var<T> Flatten<T>::forward(const Var<T>& x, ForwardContext<T>&) {
  const std::size_t batch = x.value().dim(0);
  return ops::reshape(x, {batch, x.value().numel() / batch});
}

template <typename T>
Dropout<T>::Dropout(std::string name, double rate) : Layer<T>(std::move(name)), rate_(rate) {
  require(rate >= 0.0 && rate < 1.0, ErrorKind::config, "dropout rate must lie in [0, 1)");
}

template <typename T>
Var<T> Dropout<T>::forward(const Var<T>& x, ForwardContext<T>& ctx) {
  if (ctx.mode == Mode::infer || rate_ == 0.0) return x;
  require(ctx.rng != nullptr, ErrorKind::state, "dropout in training mode needs a random stream");
  return ops::dropout(x, static_cast<T>(rate_), *ctx.rng, ctx.mode);
}

template <typename T>
BatchNorm<T>::BatchNorm(std::string name, std::size_t features)
    : Layer<T>(std::move(name)),
      gamma_("gamma", Tensor<T>({features}, T(1))),
      beta_("beta", Tensor<T>({features})),
      running_mean_("running_mean", Tensor<T>({features}), false),
      running_var_("running_var", Tensor<T>({features}, T(1)), false) {}

template <typename T>
Var<T> BatchNorm<T>::forward(const Var<T>& x, ForwardContext<T>& ctx) {
  return ops::batch_norm(x, ctx.tape.parameter(gamma_), ctx.tape.parameter(beta_), running_mean_.value(),
                         running_var_.value(), ctx.mode);
}

template <typename T>
LayerNorm<T>::LayerNorm(std::string name, std::size_t features)
    : Layer<T>(std::move(name)), gamma_("gamma", Tensor<T>({features}, T(1))), beta_("beta", Tensor<T>({features})) {}

template <typename T>
Var<T> LayerNorm<T>::forward(const Var<T>& x, ForwardContext<T>& ctx) {
  return ops::layer_norm(x, ctx.tape.parameter(gamma_), ctx.tape.parameter(beta_));
}

template <typename T>
SEBlock<T>::SEBlock(std::string name, std::size_t channels, std::size_t reduction, Rng& rng)
    : Layer<T>(std::move(name)) {
  require(reduction >= 1 && channels % reduction == 0, ErrorKind::config,
          "SE block: " + std::to_string(channels) + " channels are not divisible by reduction " +
              std::to_string(reduction));
  const std::size_t hidden = channels / reduction;
  w1_ = Parameter<T>("w1", glorot_uniform<T>({channels, hidden}, channels, hidden, rng));
  w2_ = Parameter<T>("w2", glorot_uniform<T>({hidden, channels}, hidden, channels, rng));
}

template <typename T>
Var<T> SEBlock<T>::forward(const Var<T>& x, ForwardContext<T>& ctx) {
  require(x.value().rank() == 4 && x.value().dim(1) == w1_.value().dim(0), ErrorKind::dimension,
          "SE block expects [b x " + std::to_string(w1_.value().dim(0)) + " x H x W], got " +
              shape_str(x.value().shape()));
  Var<T> z = ops::pool(x, ops::PoolKind::global_avg);
  Var<T> h = ops::activation(ops::dense(z, ctx.tape.parameter(w1_), Var<T>()), ops::Activation::relu);
  Var<T> s = ops::activation(ops::dense(h, ctx.tape.parameter(w2_), Var<T>()), ops::Activation::sigmoid);
  Var<T> y = ops::channel_scale(x, s);
  trace_ = {x.value(), z.value(), s.value(), y.value()};
  return y;
}

void ViTConfig::validate() const {
  require(patch_size > 0 && image_size % patch_size == 0, ErrorKind::config,
          "image size " + std::to_string(image_size) + " is not divisible by patch size " + std::to_string(patch_size));
  require(num_heads > 0 && embed_dim % num_heads == 0, ErrorKind::config,
          "embedding width " + std::to_string(embed_dim) + " is not divisible by " + std::to_string(num_heads) +
              " heads");
  require(depth >= 1 && mlp_ratio >= 1 && channels >= 1, ErrorKind::config, "invalid ViT depth/mlp/channels");
}

template <typename T>
PatchEmbed<T>::PatchEmbed(std::string name, const ViTConfig& cfg, Rng& rng)
    : Layer<T>(std::move(name)),
      cfg_((cfg.validate(), cfg)),
      proj_("proj", cfg.channels * cfg.patch_size * cfg.patch_size, cfg.embed_dim, rng),
      cls_("cls_token", normal_tensor<T>({cfg.embed_dim}, 0.02, rng)),
      pos_("pos_embed", normal_tensor<T>({cfg.num_patches() + (cfg.class_token ? 1 : 0), cfg.embed_dim}, 0.02, rng)) {}

template <typename T>
std::vector<Parameter<T>*> PatchEmbed<T>::own_parameters() {
  if (cfg_.class_token) return {&cls_, &pos_};
  return {&pos_};
}

template <typename T>
Var<T> PatchEmbed<T>::forward(const Var<T>& x, ForwardContext<T>& ctx) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 4 && xv.dim(1) == cfg_.channels && xv.dim(2) == cfg_.image_size &&
              xv.dim(3) == cfg_.image_size,
          ErrorKind::dimension,
          "patch embedding expects [b x " + std::to_string(cfg_.channels) + " x " + std::to_string(cfg_.image_size) +
              " x " + std::to_string(cfg_.image_size) + "], got " + shape_str(xv.shape()));
  Var<T> tokens = proj_.forward(ops::patchify(x, cfg_.patch_size), ctx);
  if (cfg_.class_token) tokens = ops::prepend_token(tokens, ctx.tape.parameter(cls_));
  return ops::add_broadcast(tokens, ctx.tape.parameter(pos_));
}

template <typename T>
MultiHeadSelfAttention<T>::MultiHeadSelfAttention(std::string name, std::size_t dim, std::size_t heads, Rng& rng)
    : Layer<T>(std::move(name)), heads_(heads), qkv_("qkv", dim, 3 * dim, rng), proj_("proj", dim, dim, rng) {
  require(heads > 0 && dim % heads == 0, ErrorKind::config,
          "embedding width " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) + " heads");
}

template <typename T>
Var<T> MultiHeadSelfAttention<T>::forward(const Var<T>& x, ForwardContext<T>& ctx) {
  Var<T> packed = qkv_.forward(x, ctx);
  Var<T> mixed = ops::attention(packed, heads_, &weights_);
  return proj_.forward(mixed, ctx);
}

template <typename T>
TransformerBlock<T>::TransformerBlock(std::string name, std::size_t dim, std::size_t heads, std::size_t mlp_ratio,
                                      Rng& rng)
    : Layer<T>(std::move(name)),
      ln1_("ln1", dim),
      attn_("attn", dim, heads, rng),
      ln2_("ln2", dim),
      fc1_("fc1", dim, dim * mlp_ratio, rng),
      fc2_("fc2", dim * mlp_ratio, dim, rng) {}

template <typename T>
Var<T> TransformerBlock<T>::forward(const Var<T>& x, ForwardContext<T>& ctx) {
  Var<T> h = ops::add(x, attn_.forward(ln1_.forward(x, ctx), ctx));
  Var<T> m = fc2_.forward(ops::activation(fc1_.forward(ln2_.forward(h, ctx), ctx), ops::Activation::gelu), ctx);
  return ops::add(h, m);
}

template <typename T>
ViTEncoder<T>::ViTEncoder(std::string name, const ViTConfig& cfg, Rng& rng) : Layer<T>(std::move(name)), cfg_(cfg) {
  cfg.validate();
  embed_ = std::make_unique<PatchEmbed<T>>("patch_embed", cfg, rng);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    blocks_.push_back(std::make_unique<TransformerBlock<T>>("block" + std::to_string(i), cfg.embed_dim,
                                                            cfg.num_heads, cfg.mlp_ratio, rng));
  }
  norm_ = std::make_unique<LayerNorm<T>>("norm", cfg.embed_dim);
}

template <typename T>
std::vector<Layer<T>*> ViTEncoder<T>::children() {
  std::vector<Layer<T>*> out{embed_.get()};
  for (auto& b : blocks_) out.push_back(b.get());
  out.push_back(norm_.get());
  return out;
}

template <typename T>
Var<T> ViTEncoder<T>::forward(const Var<T>& x, ForwardContext<T>& ctx) {
  Var<T> h = embed_->forward(x, ctx);
  for (auto& b : blocks_) h = b->forward(h, ctx);
  h = norm_->forward(h, ctx);
  if (cfg_.class_token) return ops::select_token(h, 0);
  return ops::token_mean(h);
}

template <typename T>
Var<T> Sequential<T>::forward(const Var<T>& x, ForwardContext<T>& ctx) {
  Var<T> h = x;
  for (auto& l : layers_) h = l->forward(h, ctx);
  return h;
}

template <typename T>
std::vector<Layer<T>*> Sequential<T>::children() {
  std::vector<Layer<T>*> out;
  for (auto& l : layers_) out.push_back(l.get());
  return out;
}

template <typename T>
Var<T> Parallel<T>::forward(const Var<T>& x, ForwardContext<T>& ctx) {
  require(!branches_.empty(), ErrorKind::config, "parallel block without branches");
  std::vector<Var<T>> outs;
  for (auto& b : branches_) outs.push_back(b->forward(x, ctx));
  return ops::concat(outs);
}

template <typename T>
std::vector<Layer<T>*> Parallel<T>::children() {
  std::vector<Layer<T>*> out;
  for (auto& b : branches_) out.push_back(b.get());
  return out;
}

template <typename T>
Layer<T>* find_layer(Layer<T>& root, const std::string& path) {
  const auto slash = path.find('/');
  const std::string head = path.substr(0, slash);
  for (Layer<T>* child : root.children()) {
    if (child->name() != head) continue;
    if (slash == std::string::npos) return child;
    return find_layer(*child, path.substr(slash + 1));
  }
  return nullptr;
}

#define DISTILLFORGE_INSTANTIATE_NN(T)                                               \
  template class Layer<T>;                                                           \
  template Tensor<T> glorot_uniform<T>(Shape, std::size_t, std::size_t, Rng&);       \
  template class Dense<T>;                                                           \
  template class Conv2d<T>;                                                          \
  template class Pool<T>;                                                            \
  template class Act<T>;                                                             \
  template class Flatten<T>;                                                         \
  template class Dropout<T>;                                                         \
  template class BatchNorm<T>;                                                       \
  template class LayerNorm<T>;                                                       \
  template class SEBlock<T>;                                                         \
  template class PatchEmbed<T>;                                                      \
  template class MultiHeadSelfAttention<T>;                                          \
  template class TransformerBlock<T>;                                                \
  template class ViTEncoder<T>;                                                      \
  template class Sequential<T>;                                                      \
  template class Parallel<T>;                                                        \
  template Layer<T>* find_layer<T>(Layer<T>&, const std::string&);

DISTILLFORGE_INSTANTIATE_NN(float)
DISTILLFORGE_INSTANTIATE_NN(double)

}  // namespace distillforge::nn
