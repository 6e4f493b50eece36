#pragma once

#include <span>
#include <vector>

#include "distillforge/autodiff.hpp"
#include "distillforge/rng.hpp"

namespace distillforge::ops {

enum class Mode { train, infer };
enum class Padding { same, valid };
enum class PoolKind { max2x2, global_max, global_avg };
enum class Activation { relu, selu, gelu, sigmoid };

inline constexpr double kSeluLambda = 1.0507009873554804934193349852946;
inline constexpr double kSeluAlpha = 1.6732632423543772848170429916717;
inline constexpr double kLogClamp = 1e-12;
inline constexpr double kNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

/// c = a . b for a[m x k], b[k x n].
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

/// y = x . kernel + bias over the last axis; x may carry any leading axes.
/// kernel is [in x out]; pass an invalid Var to omit the bias.
template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

/// x[b, ...] + y[...] with y broadcast over the leading axis.
template <typename T>
Var<T> add_broadcast(const Var<T>& x, const Var<T>& y);

/// wa * a + wb * b, elementwise on equal shapes.
template <typename T>
Var<T> add_scaled(const Var<T>& a, T wa, const Var<T>& b, T wb);

template <typename T>
Var<T> scale(const Var<T>& x, T factor);

/// 3x3, stride-1 cross-correlation. x[b x cin x H x W], kernel[cout x cin x 3 x 3].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, Padding padding);

/// max2x2 halves H and W; global kinds reduce [b x c x H x W] to [b x c].
/// Max gradients route to the first maximum in row-major window order.
template <typename T>
Var<T> pool(const Var<T>& x, PoolKind kind);

template <typename T>
Var<T> activation(const Var<T>& x, Activation kind);

/// Row softmax of x / temperature over the last axis.
template <typename T>
Var<T> softmax_t(const Var<T>& x, T temperature);

/// Per-feature normalization over the batch axis (and spatial axes for 4-D
/// input). Training mode updates the running statistics in place.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, Mode mode);

/// Normalization over the last axis with per-feature scale and shift.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta);

/// Concatenation along axis 1; all other extents must agree.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts);

/// y[b, c, ...] = s[b, c] * x[b, c, ...].
template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& s);

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);

/// [b x c x S x S] -> [b x N x c*p*p] with N = (S/p)^2, tokens in raster
/// order and features ordered (channel, row, col) within a patch.
template <typename T>
Var<T> patchify(const Var<T>& x, std::size_t patch);

/// [b x n x d] with token[d] inserted at position 0 of every sample.
template <typename T>
Var<T> prepend_token(const Var<T>& x, const Var<T>& token);

/// [b x n x d] -> [b x d] at token `index`.
template <typename T>
Var<T> select_token(const Var<T>& x, std::size_t index);

/// [b x n x d] -> [b x d] mean over tokens.
template <typename T>
Var<T> token_mean(const Var<T>& x);

/// Multi-head scaled dot-product self-attention over packed projections
/// qkv[b x n x 3d] (queries, keys, values along the last axis). Returns the
/// concatenated head outputs [b x n x d]. When `weights` is non-null it
/// receives the attention probabilities [b x heads x n x n].
template <typename T>
Var<T> attention(const Var<T>& qkv, std::size_t heads, Tensor<T>* weights = nullptr);

/// Inverted dropout. Identity in inference mode or when rate == 0.
template <typename T>
Var<T> dropout(const Var<T>& x, T rate, Rng& rng, Mode mode);

/// -(1/b) sum log p[i, label_i] with the log argument clamped at 1e-12.
template <typename T>
Var<T> cross_entropy(const Var<T>& probs, std::span<const int> labels);

/// (1/b) sum_ij q log(q / p), 0 log 0 = 0, log arguments clamped at 1e-12.
template <typename T>
Var<T> kl_divergence(const Var<T>& target, const Var<T>& probs);

/// Scalar sum(weights * x); used to probe full Jacobians in gradient checks.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights);

/// Scalar mean of all elements.
template <typename T>
Var<T> mean(const Var<T>& x);

/// Throws a validation error unless every row of the last axis is a
/// probability vector summing to 1 within `tolerance`.
template <typename T>
void validate_probabilities(const Tensor<T>& probs, double tolerance = 1e-6);

}  // namespace distillforge::ops
