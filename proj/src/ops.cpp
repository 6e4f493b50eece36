#include "distillforge/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

namespace distillforge::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MatMap<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void same_tape(const void* a, const void* b, const char* op) {
  require(a == b, ErrorKind::state, std::string(op) + ": operands live on different tapes");
}

std::string dims(const Shape& s) { return shape_str(s); }

// col[(c*9 + ky*3 + kx), oy*ow + ox] = x[c, oy + ky - pad, ox + kx - pad], zero outside.
template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t pad, std::size_t oh,
            std::size_t ow, T* col) {
  const auto ih = static_cast<std::ptrdiff_t>(h);
  const auto iw = static_cast<std::ptrdiff_t>(w);
  const auto p = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = x + c * h * w;
    for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
      for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
        T* row = col + ((c * 9) + static_cast<std::size_t>(ky * 3 + kx)) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) + ky - p;
          T* out = row + oy * ow;
          if (iy < 0 || iy >= ih) {
            std::fill(out, out + ow, T(0));
            continue;
          }
          const T* src = plane + iy * iw;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) + kx - p;
            out[ox] = (ix < 0 || ix >= iw) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t pad, std::size_t oh,
                std::size_t ow, T* x) {
  const auto ih = static_cast<std::ptrdiff_t>(h);
  const auto iw = static_cast<std::ptrdiff_t>(w);
  const auto p = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = x + c * h * w;
    for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
      for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
        const T* row = col + ((c * 9) + static_cast<std::size_t>(ky * 3 + kx)) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) + ky - p;
          if (iy < 0 || iy >= ih) continue;
          T* dst = plane + iy * iw;
          const T* src = row + oy * ow;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) + kx - p;
            if (ix >= 0 && ix < iw) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  same_tape(&a.tape(), &b.tape(), "matmul");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2, ErrorKind::dimension,
          "matmul needs rank-2 operands, got " + dims(av.shape()) + " and " + dims(bv.shape()));
  require(av.dim(1) == bv.dim(0), ErrorKind::dimension,
          "matmul inner extents differ: " + dims(av.shape()) + " . " + dims(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out({m, n});
  as_matrix(out, m, n).noalias() = as_matrix(av, m, k) * as_matrix(bv, k, n);
  const auto ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(out), {a, b}, [ia, ib, m, k, n](Tape<T>& tape, const Tensor<T>& g) {
    auto gm = as_matrix(g, m, n);
    if (tape.requires_grad(ia)) {
      as_matrix(tape.grad_buffer(ia), m, k).noalias() += gm * as_matrix(tape.value(ib), k, n).transpose();
    }
    if (tape.requires_grad(ib)) {
      as_matrix(tape.grad_buffer(ib), k, n).noalias() += as_matrix(tape.value(ia), m, k).transpose() * gm;
    }
  });
}

template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias) {
  same_tape(&x.tape(), &kernel.tape(), "dense");
  const Tensor<T>& xv = x.value();
  const Tensor<T>& kv = kernel.value();
  require(kv.rank() == 2, ErrorKind::dimension, "dense kernel must be rank 2, got " + dims(kv.shape()));
  require(xv.rank() >= 1 && xv.shape().back() == kv.dim(0), ErrorKind::dimension,
          "dense input " + dims(xv.shape()) + " does not match kernel " + dims(kv.shape()));
  const std::size_t in = kv.dim(0), outw = kv.dim(1), rows = xv.numel() / in;
  const bool has_bias = bias.valid();
  if (has_bias) {
    same_tape(&x.tape(), &bias.tape(), "dense");
    require(bias.value().numel() == outw, ErrorKind::dimension, "dense bias does not match kernel width");
  }
  Shape shape = xv.shape();
  shape.back() = outw;
  Tensor<T> out(shape);
  auto om = as_matrix(out, rows, outw);
  om.noalias() = as_matrix(xv, rows, in) * as_matrix(kv, in, outw);
  if (has_bias) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bm(bias.value().data(), static_cast<Eigen::Index>(outw));
    om.rowwise() += bm;
  }
  const auto ix = x.id(), ik = kernel.id();
  const std::size_t ib = has_bias ? bias.id() : 0;
  std::vector<Var<T>> inputs{x, kernel};
  if (has_bias) inputs.push_back(bias);
  return x.tape().record("dense", std::move(out), inputs,
                         [ix, ik, ib, has_bias, rows, in, outw](Tape<T>& tape, const Tensor<T>& g) {
                           auto gm = as_matrix(g, rows, outw);
                           if (tape.requires_grad(ix)) {
                             as_matrix(tape.grad_buffer(ix), rows, in).noalias() +=
                                 gm * as_matrix(tape.value(ik), in, outw).transpose();
                           }
                           if (tape.requires_grad(ik)) {
                             as_matrix(tape.grad_buffer(ik), in, outw).noalias() +=
                                 as_matrix(tape.value(ix), rows, in).transpose() * gm;
                           }
                           if (has_bias && tape.requires_grad(ib)) {
                             Tensor<T>& gb = tape.grad_buffer(ib);
                             for (std::size_t r = 0; r < rows; ++r) {
                               const T* src = g.data() + r * outw;
                               for (std::size_t j = 0; j < outw; ++j) gb[j] += src[j];
                             }
                           }
                         });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return add_scaled(a, T(1), b, T(1));
}

template <typename T>
Var<T> add_scaled(const Var<T>& a, T wa, const Var<T>& b, T wb) {
  same_tape(&a.tape(), &b.tape(), "add");
  require(a.value().shape() == b.value().shape(), ErrorKind::dimension,
          "add shape mismatch: " + dims(a.value().shape()) + " vs " + dims(b.value().shape()));
  Tensor<T> out(a.value().shape());
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] = wa * pa[i] + wb * pb[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record("add", std::move(out), {a, b}, [ia, ib, wa, wb](Tape<T>& tape, const Tensor<T>& g) {
    for (auto [id, w] : {std::pair{ia, wa}, std::pair{ib, wb}}) {
      if (!tape.requires_grad(id)) continue;
      Tensor<T>& dst = tape.grad_buffer(id);
      for (std::size_t i = 0, n = g.numel(); i < n; ++i) dst[i] += w * g[i];
    }
  });
}

template <typename T>
Var<T> add_broadcast(const Var<T>& x, const Var<T>& y) {
  same_tape(&x.tape(), &y.tape(), "add_broadcast");
  const Tensor<T>& xv = x.value();
  const Tensor<T>& yv = y.value();
  require(xv.rank() >= 1, ErrorKind::dimension, "add_broadcast needs a batch axis");
  const std::size_t batch = xv.dim(0), inner = xv.numel() / batch;
  require(yv.numel() == inner, ErrorKind::dimension,
          "add_broadcast: " + dims(yv.shape()) + " cannot broadcast over " + dims(xv.shape()));
  Tensor<T> out = xv;
  for (std::size_t b = 0; b < batch; ++b) {
    T* dst = out.data() + b * inner;
    for (std::size_t i = 0; i < inner; ++i) dst[i] += yv[i];
  }
  const auto ixd = x.id(), iyd = y.id();
  return x.tape().record("add_broadcast", std::move(out), {x, y},
                         [ixd, iyd, batch, inner](Tape<T>& tape, const Tensor<T>& g) {
                           tape.accumulate(ixd, g);
                           if (tape.requires_grad(iyd)) {
                             Tensor<T>& gy = tape.grad_buffer(iyd);
                             for (std::size_t b = 0; b < batch; ++b) {
                               const T* src = g.data() + b * inner;
                               for (std::size_t i = 0; i < inner; ++i) gy[i] += src[i];
                             }
                           }
                         });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v *= factor;
  const auto ix = x.id();
  return x.tape().record("scale", std::move(out), {x}, [ix, factor](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>& dst = tape.grad_buffer(ix);
    for (std::size_t i = 0, n = g.numel(); i < n; ++i) dst[i] += factor * g[i];
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, Padding padding) {
  same_tape(&x.tape(), &kernel.tape(), "conv2d");
  const Tensor<T>& xv = x.value();
  const Tensor<T>& kv = kernel.value();
  require(xv.rank() == 4, ErrorKind::dimension, "conv2d input must be [b x c x H x W], got " + dims(xv.shape()));
  require(kv.rank() == 4 && kv.dim(2) == 3 && kv.dim(3) == 3, ErrorKind::dimension,
          "conv2d kernel must be [cout x cin x 3 x 3], got " + dims(kv.shape()));
  require(kv.dim(1) == xv.dim(1), ErrorKind::dimension,
          "conv2d channel mismatch: input has " + std::to_string(xv.dim(1)) + " channels, kernel expects " +
              std::to_string(kv.dim(1)));
  const std::size_t batch = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), w = xv.dim(3), cout = kv.dim(0);
  const std::size_t pad = padding == Padding::same ? 1 : 0;
  require(padding == Padding::same || (h >= 3 && w >= 3), ErrorKind::dimension,
          "valid conv2d needs at least 3x3 input");
  const std::size_t oh = h + 2 * pad - 2, ow = w + 2 * pad - 2;
  const std::size_t taps = cin * 9, positions = oh * ow;
  const bool has_bias = bias.valid();
  if (has_bias) {
    same_tape(&x.tape(), &bias.tape(), "conv2d");
    require(bias.value().numel() == cout, ErrorKind::dimension, "conv2d bias does not match output channels");
  }

  Tensor<T> out({batch, cout, oh, ow});
  AlignedVector<T> col(taps * positions);
  auto wm = as_matrix(kv, cout, taps);
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(xv.data() + b * cin * h * w, cin, h, w, pad, oh, ow, col.data());
    MatMap<T> om(out.data() + b * cout * positions, static_cast<Eigen::Index>(cout),
                 static_cast<Eigen::Index>(positions));
    om.noalias() = wm * ConstMatMap<T>(col.data(), static_cast<Eigen::Index>(taps),
                                       static_cast<Eigen::Index>(positions));
    if (has_bias) {
      for (std::size_t c = 0; c < cout; ++c) om.row(static_cast<Eigen::Index>(c)).array() += bias.value()[c];
    }
  }

  const auto ix = x.id(), ik = kernel.id();
  const std::size_t ib = has_bias ? bias.id() : 0;
  std::vector<Var<T>> inputs{x, kernel};
  if (has_bias) inputs.push_back(bias);
  return x.tape().record(
      "conv2d", std::move(out), inputs,
      [=](Tape<T>& tape, const Tensor<T>& g) {
        const bool need_x = tape.requires_grad(ix);
        const bool need_k = tape.requires_grad(ik);
        const Tensor<T>& xin = tape.value(ix);
        AlignedVector<T> col_buf(taps * positions);
        AlignedVector<T> dcol(need_x ? taps * positions : 0);
        auto kmat = as_matrix(tape.value(ik), cout, taps);
        for (std::size_t b = 0; b < batch; ++b) {
          ConstMatMap<T> gm(g.data() + b * cout * positions, static_cast<Eigen::Index>(cout),
                            static_cast<Eigen::Index>(positions));
          if (need_k) {
            im2col(xin.data() + b * cin * h * w, cin, h, w, pad, oh, ow, col_buf.data());
            as_matrix(tape.grad_buffer(ik), cout, taps).noalias() +=
                gm * ConstMatMap<T>(col_buf.data(), static_cast<Eigen::Index>(taps),
                                    static_cast<Eigen::Index>(positions))
                         .transpose();
          }
          if (need_x) {
            MatMap<T>(dcol.data(), static_cast<Eigen::Index>(taps), static_cast<Eigen::Index>(positions)).noalias() =
                kmat.transpose() * gm;
            col2im_add(dcol.data(), cin, h, w, pad, oh, ow, tape.grad_buffer(ix).data() + b * cin * h * w);
          }
          if (has_bias && tape.requires_grad(ib)) {
            Tensor<T>& gb = tape.grad_buffer(ib);
            for (std::size_t c = 0; c < cout; ++c) gb[c] += gm.row(static_cast<Eigen::Index>(c)).sum();
          }
        }
      });
}

template <typename T>
Var<T> pool(const Var<T>& x, PoolKind kind) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 4, ErrorKind::dimension, "pool input must be [b x c x H x W], got " + dims(xv.shape()));
  const std::size_t batch = xv.dim(0), ch = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t planes = batch * ch, area = h * w;
  const auto ix = x.id();

  if (kind == PoolKind::global_avg) {
    Tensor<T> out({batch, ch});
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = xv.data() + p * area;
      T acc = T(0);
      for (std::size_t i = 0; i < area; ++i) acc += src[i];
      out[p] = acc / static_cast<T>(area);
    }
    return x.tape().record("global_avg_pool", std::move(out), {x},
                           [ix, planes, area](Tape<T>& tape, const Tensor<T>& g) {
                             Tensor<T>& dx = tape.grad_buffer(ix);
                             for (std::size_t p = 0; p < planes; ++p) {
                               T share = g[p] / static_cast<T>(area);
                               T* dst = dx.data() + p * area;
                               for (std::size_t i = 0; i < area; ++i) dst[i] += share;
                             }
                           });
  }

  std::vector<std::uint32_t> argmax;
  Tensor<T> out;
  if (kind == PoolKind::global_max) {
    out = Tensor<T>({batch, ch});
    argmax.resize(planes);
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = xv.data() + p * area;
      std::size_t best = 0;
      for (std::size_t i = 1; i < area; ++i) {
        if (src[i] > src[best]) best = i;
      }
      out[p] = src[best];
      argmax[p] = static_cast<std::uint32_t>(p * area + best);
    }
  } else {
    require(h % 2 == 0 && w % 2 == 0, ErrorKind::dimension,
            "max2x2 pooling needs even spatial extents, got " + dims(xv.shape()));
    const std::size_t oh = h / 2, ow = w / 2;
    out = Tensor<T>({batch, ch, oh, ow});
    argmax.resize(out.numel());
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = xv.data() + p * area;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const std::size_t base = (2 * oy) * w + 2 * ox;
          const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
          std::size_t best = cand[0];
          for (int c = 1; c < 4; ++c) {
            if (src[cand[c]] > src[best]) best = cand[c];
          }
          const std::size_t o = p * oh * ow + oy * ow + ox;
          out[o] = src[best];
          argmax[o] = static_cast<std::uint32_t>(p * area + best);
        }
      }
    }
  }
  return x.tape().record(kind == PoolKind::global_max ? "global_max_pool" : "max_pool2x2", std::move(out), {x},
                         [ix, argmax = std::move(argmax)](Tape<T>& tape, const Tensor<T>& g) {
                           Tensor<T>& dx = tape.grad_buffer(ix);
                           for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += g[o];
                         });
}

template <typename T>
Var<T> activation(const Var<T>& x, Activation kind) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  const std::size_t n = xv.numel();
  const T lambda = static_cast<T>(kSeluLambda);
  const T la = static_cast<T>(kSeluLambda * kSeluAlpha);
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  const T inv_sqrt_2pi = static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi));
  const T* src = xv.data();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = src[i] > T(0) ? src[i] : T(0);
      break;
    case Activation::selu:
      for (std::size_t i = 0; i < n; ++i) out[i] = src[i] > T(0) ? lambda * src[i] : la * std::expm1(src[i]);
      break;
    case Activation::gelu:
      for (std::size_t i = 0; i < n; ++i) out[i] = T(0.5) * src[i] * (T(1) + std::erf(src[i] * inv_sqrt2));
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid_scalar(src[i]);
      break;
  }
  const auto ix = x.id();
  const char* name = kind == Activation::relu   ? "relu"
                     : kind == Activation::selu ? "selu"
                     : kind == Activation::gelu ? "gelu"
                                                : "sigmoid";
  return x.tape().record(name, std::move(out), {x}, [=](Tape<T>& tape, const Tensor<T>& g) {
    const T* xs = tape.value(ix).data();
    T* dx = tape.grad_buffer(ix).data();
    switch (kind) {
      case Activation::relu:
        for (std::size_t i = 0; i < n; ++i) {
          if (xs[i] > T(0)) dx[i] += g[i];
        }
        break;
      case Activation::selu:
        for (std::size_t i = 0; i < n; ++i) dx[i] += g[i] * (xs[i] > T(0) ? lambda : la * std::exp(xs[i]));
        break;
      case Activation::gelu:
        for (std::size_t i = 0; i < n; ++i) {
          T cdf = T(0.5) * (T(1) + std::erf(xs[i] * inv_sqrt2));
          T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * xs[i] * xs[i]);
          dx[i] += g[i] * (cdf + xs[i] * pdf);
        }
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < n; ++i) {
          T s = sigmoid_scalar(xs[i]);
          dx[i] += g[i] * s * (T(1) - s);
        }
        break;
    }
  });
}

template <typename T>
Var<T> softmax_t(const Var<T>& x, T temperature) {
  require(temperature > T(0), ErrorKind::domain, "softmax temperature must be positive");
  const Tensor<T>& xv = x.value();
  require(xv.rank() >= 1, ErrorKind::dimension, "softmax needs at least one axis");
  const std::size_t k = xv.shape().back(), rows = xv.numel() / k;
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = xv.data() + r * k;
    T* dst = out.data() + r * k;
    T m = *std::max_element(src, src + k);
    T sum = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      dst[j] = std::exp((src[j] - m) / temperature);
      sum += dst[j];
    }
    for (std::size_t j = 0; j < k; ++j) dst[j] /= sum;
  }
  const auto ix = x.id();
  const auto iy = x.tape().size();
  return x.tape().record("softmax_t", std::move(out), {x},
                         [ix, iy, rows, k, temperature](Tape<T>& tape, const Tensor<T>& g) {
                           const Tensor<T>& y = tape.value(iy);
                           Tensor<T>& dx = tape.grad_buffer(ix);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const T* yr = y.data() + r * k;
                             const T* gr = g.data() + r * k;
                             T dot = T(0);
                             for (std::size_t j = 0; j < k; ++j) dot += gr[j] * yr[j];
                             T* dr = dx.data() + r * k;
                             for (std::size_t j = 0; j < k; ++j) dr[j] += yr[j] * (gr[j] - dot) / temperature;
                           }
                         });
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, Mode mode) {
  same_tape(&x.tape(), &gamma.tape(), "batch_norm");
  same_tape(&x.tape(), &beta.tape(), "batch_norm");
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 2 || xv.rank() == 4, ErrorKind::dimension,
          "batch_norm input must be [b x f] or [b x c x H x W], got " + dims(xv.shape()));
  const std::size_t batch = xv.dim(0), feat = xv.dim(1);
  const std::size_t inner = xv.rank() == 4 ? xv.dim(2) * xv.dim(3) : 1;
  const std::size_t count = batch * inner;
  require(gamma.value().numel() == feat && beta.value().numel() == feat && running_mean.numel() == feat &&
              running_var.numel() == feat,
          ErrorKind::dimension, "batch_norm parameters do not match " + std::to_string(feat) + " features");
  const bool train = mode == Mode::train;
  require(!train || batch >= 2, ErrorKind::dimension, "batch_norm in training mode needs a batch of at least 2");

  std::vector<T> mean(feat), inv_std(feat);
  for (std::size_t f = 0; f < feat; ++f) {
    if (train) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* src = xv.data() + (b * feat + f) * inner;
        for (std::size_t i = 0; i < inner; ++i) s += src[i];
      }
      const double mu = s / static_cast<double>(count);
      double q = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* src = xv.data() + (b * feat + f) * inner;
        for (std::size_t i = 0; i < inner; ++i) q += (src[i] - mu) * (src[i] - mu);
      }
      const double var = q / static_cast<double>(count);
      mean[f] = static_cast<T>(mu);
      inv_std[f] = static_cast<T>(1.0 / std::sqrt(var + kNormEpsilon));
      running_mean[f] = static_cast<T>(kBatchNormMomentum * running_mean[f] + (1.0 - kBatchNormMomentum) * mu);
      running_var[f] = static_cast<T>(kBatchNormMomentum * running_var[f] + (1.0 - kBatchNormMomentum) * var);
    } else {
      mean[f] = running_mean[f];
      inv_std[f] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[f]) + kNormEpsilon));
    }
  }

  Tensor<T> out(xv.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t f = 0; f < feat; ++f) {
      const T* src = xv.data() + (b * feat + f) * inner;
      T* dst = out.data() + (b * feat + f) * inner;
      const T gf = gamma.value()[f], bf = beta.value()[f];
      for (std::size_t i = 0; i < inner; ++i) dst[i] = gf * (src[i] - mean[f]) * inv_std[f] + bf;
    }
  }

  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      "batch_norm", std::move(out), {x, gamma, beta},
      [ix, ig, ib, batch, feat, inner, count, train, mean = std::move(mean), inv_std = std::move(inv_std)](
          Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& xin = tape.value(ix);
        const Tensor<T>& gam = tape.value(ig);
        for (std::size_t f = 0; f < feat; ++f) {
          T sum_g = T(0), sum_gx = T(0);
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t off = (b * feat + f) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              const T xhat = (xin[off + i] - mean[f]) * inv_std[f];
              sum_g += g[off + i];
              sum_gx += g[off + i] * xhat;
            }
          }
          if (tape.requires_grad(ig)) tape.grad_buffer(ig)[f] += sum_gx;
          if (tape.requires_grad(ib)) tape.grad_buffer(ib)[f] += sum_g;
          if (!tape.requires_grad(ix)) continue;
          Tensor<T>& dx = tape.grad_buffer(ix);
          const T scale_f = gam[f] * inv_std[f];
          const T n = static_cast<T>(count);
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t off = (b * feat + f) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              if (train) {
                const T xhat = (xin[off + i] - mean[f]) * inv_std[f];
                dx[off + i] += scale_f * (g[off + i] - sum_g / n - xhat * sum_gx / n);
              } else {
                dx[off + i] += scale_f * g[off + i];
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  same_tape(&x.tape(), &gamma.tape(), "layer_norm");
  same_tape(&x.tape(), &beta.tape(), "layer_norm");
  const Tensor<T>& xv = x.value();
  require(xv.rank() >= 1, ErrorKind::dimension, "layer_norm needs at least one axis");
  const std::size_t d = xv.shape().back(), rows = xv.numel() / d;
  require(gamma.value().numel() == d && beta.value().numel() == d, ErrorKind::dimension,
          "layer_norm parameters do not match feature width " + std::to_string(d));
  std::vector<T> mean(rows), inv_std(rows);
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = xv.data() + r * d;
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += src[j];
    const double mu = s / static_cast<double>(d);
    double q = 0.0;
    for (std::size_t j = 0; j < d; ++j) q += (src[j] - mu) * (src[j] - mu);
    mean[r] = static_cast<T>(mu);
    inv_std[r] = static_cast<T>(1.0 / std::sqrt(q / static_cast<double>(d) + kNormEpsilon));
    T* dst = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      dst[j] = gamma.value()[j] * (src[j] - mean[r]) * inv_std[r] + beta.value()[j];
    }
  }
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [ix, ig, ib, rows, d, mean = std::move(mean), inv_std = std::move(inv_std)](Tape<T>& tape,
                                                                                 const Tensor<T>& g) {
        const Tensor<T>& xin = tape.value(ix);
        const Tensor<T>& gam = tape.value(ig);
        const bool need_x = tape.requires_grad(ix);
        const bool need_g = tape.requires_grad(ig);
        const bool need_b = tape.requires_grad(ib);
        std::vector<T> xhat(d), dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* src = xin.data() + r * d;
          const T* gr = g.data() + r * d;
          T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            xhat[j] = (src[j] - mean[r]) * inv_std[r];
            dxhat[j] = gr[j] * gam[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
          }
          if (need_g) {
            Tensor<T>& dg = tape.grad_buffer(ig);
            for (std::size_t j = 0; j < d; ++j) dg[j] += gr[j] * xhat[j];
          }
          if (need_b) {
            Tensor<T>& db = tape.grad_buffer(ib);
            for (std::size_t j = 0; j < d; ++j) db[j] += gr[j];
          }
          if (need_x) {
            T* dx = tape.grad_buffer(ix).data() + r * d;
            const T n = static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              dx[j] += inv_std[r] * (dxhat[j] - sum_dxhat / n - xhat[j] * sum_dxhat_xhat / n);
            }
          }
        }
      });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), ErrorKind::dimension, "concat of zero tensors");
  const Shape& first = parts.front().value().shape();
  require(first.size() >= 2, ErrorKind::dimension, "concat needs rank >= 2");
  const std::size_t outer = first[0];
  std::vector<std::size_t> widths;
  std::size_t axis_total = 0, inner = 1;
  for (std::size_t a = 2; a < first.size(); ++a) inner *= first[a];
  for (const auto& p : parts) {
    same_tape(&parts.front().tape(), &p.tape(), "concat");
    const Shape& s = p.value().shape();
    bool ok = s.size() == first.size() && s[0] == outer;
    for (std::size_t a = 2; ok && a < s.size(); ++a) ok = s[a] == first[a];
    require(ok, ErrorKind::dimension, "concat: " + dims(s) + " incompatible with " + dims(first));
    widths.push_back(s[1] * inner);
    axis_total += s[1];
  }
  Shape shape = first;
  shape[1] = axis_total;
  Tensor<T> out(shape);
  const std::size_t row = axis_total * inner;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const T* src = parts[i].value().data();
    for (std::size_t b = 0; b < outer; ++b) {
      std::copy_n(src + b * widths[i], widths[i], out.data() + b * row + offset);
    }
    offset += widths[i];
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts.front().tape().record("concat", std::move(out), parts,
                                     [ids, widths, outer, row](Tape<T>& tape, const Tensor<T>& g) {
                                       std::size_t off = 0;
                                       for (std::size_t i = 0; i < ids.size(); ++i) {
                                         if (tape.requires_grad(ids[i])) {
                                           Tensor<T>& dst = tape.grad_buffer(ids[i]);
                                           for (std::size_t b = 0; b < outer; ++b) {
                                             const T* src = g.data() + b * row + off;
                                             T* d = dst.data() + b * widths[i];
                                             for (std::size_t j = 0; j < widths[i]; ++j) d[j] += src[j];
                                           }
                                         }
                                         off += widths[i];
                                       }
                                     });
}

template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& s) {
  same_tape(&x.tape(), &s.tape(), "channel_scale");
  const Tensor<T>& xv = x.value();
  const Tensor<T>& sv = s.value();
  require(xv.rank() >= 2 && sv.rank() == 2 && sv.dim(0) == xv.dim(0) && sv.dim(1) == xv.dim(1),
          ErrorKind::dimension, "channel_scale: " + dims(sv.shape()) + " does not match " + dims(xv.shape()));
  const std::size_t planes = sv.numel(), inner = xv.numel() / planes;
  Tensor<T> out(xv.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * inner;
    T* dst = out.data() + p * inner;
    for (std::size_t i = 0; i < inner; ++i) dst[i] = sv[p] * src[i];
  }
  const auto ix = x.id(), is = s.id();
  return x.tape().record("channel_scale", std::move(out), {x, s},
                         [ix, is, planes, inner](Tape<T>& tape, const Tensor<T>& g) {
                           const Tensor<T>& xin = tape.value(ix);
                           const Tensor<T>& sin = tape.value(is);
                           const bool need_x = tape.requires_grad(ix);
                           const bool need_s = tape.requires_grad(is);
                           for (std::size_t p = 0; p < planes; ++p) {
                             const T* gp = g.data() + p * inner;
                             if (need_x) {
                               T* dx = tape.grad_buffer(ix).data() + p * inner;
                               for (std::size_t i = 0; i < inner; ++i) dx[i] += sin[p] * gp[i];
                             }
                             if (need_s) {
                               const T* xp = xin.data() + p * inner;
                               T acc = T(0);
                               for (std::size_t i = 0; i < inner; ++i) acc += gp[i] * xp[i];
                               tape.grad_buffer(is)[p] += acc;
                             }
                           }
                         });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  require(shape_numel(shape) == x.value().numel(), ErrorKind::dimension,
          "reshape " + dims(x.value().shape()) + " -> " + dims(shape) + " changes the element count");
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const auto ix = x.id();
  return x.tape().record("reshape", std::move(out), {x}, [ix](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>& dst = tape.grad_buffer(ix);
    for (std::size_t i = 0, n = g.numel(); i < n; ++i) dst[i] += g[i];
  });
}

template <typename T>
Var<T> patchify(const Var<T>& x, std::size_t patch) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 4, ErrorKind::dimension, "patchify input must be [b x c x H x W]");
  const std::size_t batch = xv.dim(0), ch = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  require(patch > 0 && h % patch == 0 && w % patch == 0, ErrorKind::config,
          "image " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by patch " +
              std::to_string(patch));
  const std::size_t gh = h / patch, gw = w / patch, tokens = gh * gw, feat = ch * patch * patch;
  // index map: output element -> input element
  std::vector<std::uint32_t> src_index(tokens * feat);
  for (std::size_t gy = 0; gy < gh; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      const std::size_t t = gy * gw + gx;
      for (std::size_t c = 0; c < ch; ++c) {
        for (std::size_t py = 0; py < patch; ++py) {
          for (std::size_t px = 0; px < patch; ++px) {
            const std::size_t f = (c * patch + py) * patch + px;
            src_index[t * feat + f] = static_cast<std::uint32_t>((c * h + gy * patch + py) * w + gx * patch + px);
          }
        }
      }
    }
  }
  Tensor<T> out({batch, tokens, feat});
  const std::size_t per_in = ch * h * w, per_out = tokens * feat;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < per_out; ++i) out[b * per_out + i] = xv[b * per_in + src_index[i]];
  }
  const auto ix = x.id();
  return x.tape().record("patchify", std::move(out), {x},
                         [ix, batch, per_in, per_out, src_index = std::move(src_index)](Tape<T>& tape,
                                                                                       const Tensor<T>& g) {
                           Tensor<T>& dx = tape.grad_buffer(ix);
                           for (std::size_t b = 0; b < batch; ++b) {
                             for (std::size_t i = 0; i < per_out; ++i) {
                               dx[b * per_in + src_index[i]] += g[b * per_out + i];
                             }
                           }
                         });
}

template <typename T>
Var<T> prepend_token(const Var<T>& x, const Var<T>& token) {
  same_tape(&x.tape(), &token.tape(), "prepend_token");
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3, ErrorKind::dimension, "prepend_token input must be [b x n x d]");
  const std::size_t batch = xv.dim(0), n = xv.dim(1), d = xv.dim(2);
  require(token.value().numel() == d, ErrorKind::dimension, "token width does not match embedding width");
  Tensor<T> out({batch, n + 1, d});
  for (std::size_t b = 0; b < batch; ++b) {
    T* dst = out.data() + b * (n + 1) * d;
    std::copy_n(token.value().data(), d, dst);
    std::copy_n(xv.data() + b * n * d, n * d, dst + d);
  }
  const auto ix = x.id(), it = token.id();
  return x.tape().record("prepend_token", std::move(out), {x, token},
                         [ix, it, batch, n, d](Tape<T>& tape, const Tensor<T>& g) {
                           for (std::size_t b = 0; b < batch; ++b) {
                             const T* src = g.data() + b * (n + 1) * d;
                             if (tape.requires_grad(it)) {
                               T* dt = tape.grad_buffer(it).data();
                               for (std::size_t j = 0; j < d; ++j) dt[j] += src[j];
                             }
                             if (tape.requires_grad(ix)) {
                               T* dx = tape.grad_buffer(ix).data() + b * n * d;
                               for (std::size_t j = 0; j < n * d; ++j) dx[j] += src[d + j];
                             }
                           }
                         });
}

template <typename T>
Var<T> select_token(const Var<T>& x, std::size_t index) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3 && index < xv.dim(1), ErrorKind::dimension, "select_token index out of range");
  const std::size_t batch = xv.dim(0), n = xv.dim(1), d = xv.dim(2);
  Tensor<T> out({batch, d});
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(xv.data() + (b * n + index) * d, d, out.data() + b * d);
  const auto ix = x.id();
  return x.tape().record("select_token", std::move(out), {x},
                         [ix, batch, n, d, index](Tape<T>& tape, const Tensor<T>& g) {
                           Tensor<T>& dx = tape.grad_buffer(ix);
                           for (std::size_t b = 0; b < batch; ++b) {
                             T* dst = dx.data() + (b * n + index) * d;
                             for (std::size_t j = 0; j < d; ++j) dst[j] += g[b * d + j];
                           }
                         });
}

template <typename T>
Var<T> token_mean(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3, ErrorKind::dimension, "token_mean input must be [b x n x d]");
  const std::size_t batch = xv.dim(0), n = xv.dim(1), d = xv.dim(2);
  Tensor<T> out({batch, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t j = 0; j < d; ++j) out[b * d + j] += xv[(b * n + t) * d + j];
    }
  }
  for (auto& v : out.values()) v /= static_cast<T>(n);
  const auto ix = x.id();
  return x.tape().record("token_mean", std::move(out), {x}, [ix, batch, n, d](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>& dx = tape.grad_buffer(ix);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t j = 0; j < d; ++j) dx[(b * n + t) * d + j] += g[b * d + j] / static_cast<T>(n);
      }
    }
  });
}

template <typename T>
Var<T> attention(const Var<T>& qkv, std::size_t heads, Tensor<T>* weights) {
  const Tensor<T>& xv = qkv.value();
  require(xv.rank() == 3 && xv.dim(2) % 3 == 0, ErrorKind::dimension,
          "attention input must be [b x n x 3d], got " + dims(xv.shape()));
  const std::size_t batch = xv.dim(0), n = xv.dim(1), d = xv.dim(2) / 3;
  require(heads > 0 && d % heads == 0, ErrorKind::config,
          "embedding width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
  const std::size_t dh = d / heads;
  const T scale_qk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const auto N = static_cast<Eigen::Index>(n), DH = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * d));
  const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(d));

  auto probs = std::make_shared<Tensor<T>>(Shape{batch, heads, n, n});
  Tensor<T> out({batch, n, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const T* base = xv.data() + b * n * 3 * d + h * dh;
      ConstStridedMap<T> q(base, N, DH, in_stride);
      ConstStridedMap<T> k(base + d, N, DH, in_stride);
      ConstStridedMap<T> v(base + 2 * d, N, DH, in_stride);
      MatMap<T> p(probs->data() + (b * heads + h) * n * n, N, N);
      p.noalias() = (q * k.transpose()) * scale_qk;
      for (Eigen::Index r = 0; r < N; ++r) {
        T m = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - m).exp();
        p.row(r) /= p.row(r).sum();
      }
      StridedMap<T> o(out.data() + b * n * d + h * dh, N, DH, out_stride);
      o.noalias() = p * v;
    }
  }
  if (weights) *weights = *probs;
  const auto ix = qkv.id();
  return qkv.tape().record(
      "attention", std::move(out), {qkv}, [=](Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& xin = tape.value(ix);
        Tensor<T>& dx = tape.grad_buffer(ix);
        RowMat<T> dp(N, N), ds(N, N);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const T* base = xin.data() + b * n * 3 * d + h * dh;
            ConstStridedMap<T> q(base, N, DH, in_stride);
            ConstStridedMap<T> k(base + d, N, DH, in_stride);
            ConstStridedMap<T> v(base + 2 * d, N, DH, in_stride);
            T* dbase = dx.data() + b * n * 3 * d + h * dh;
            StridedMap<T> dq(dbase, N, DH, in_stride);
            StridedMap<T> dk(dbase + d, N, DH, in_stride);
            StridedMap<T> dv(dbase + 2 * d, N, DH, in_stride);
            ConstMatMap<T> p(probs->data() + (b * heads + h) * n * n, N, N);
            ConstStridedMap<T> go(g.data() + b * n * d + h * dh, N, DH, out_stride);
            dv.noalias() += p.transpose() * go;
            dp.noalias() = go * v.transpose();
            for (Eigen::Index r = 0; r < N; ++r) {
              T dot = (dp.row(r).array() * p.row(r).array()).sum();
              ds.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
            }
            dq.noalias() += (ds * k) * scale_qk;
            dk.noalias() += (ds.transpose() * q) * scale_qk;
          }
        }
      });
}

template <typename T>
Var<T> dropout(const Var<T>& x, T rate, Rng& rng, Mode mode) {
  require(rate >= T(0) && rate < T(1), ErrorKind::config, "dropout rate must lie in [0, 1)");
  if (mode == Mode::infer || rate == T(0)) return x;
  const T keep_scale = T(1) / (T(1) - rate);
  Tensor<T> mask(x.value().shape());
  for (auto& m : mask.values()) m = rng.uniform() < static_cast<double>(rate) ? T(0) : keep_scale;
  Tensor<T> out = x.value();
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] *= mask[i];
  const auto ix = x.id();
  return x.tape().record("dropout", std::move(out), {x},
                         [ix, mask = std::move(mask)](Tape<T>& tape, const Tensor<T>& g) {
                           Tensor<T>& dx = tape.grad_buffer(ix);
                           for (std::size_t i = 0, n = g.numel(); i < n; ++i) dx[i] += mask[i] * g[i];
                         });
}

template <typename T>
void validate_probabilities(const Tensor<T>& probs, double tolerance) {
  require(probs.rank() == 2, ErrorKind::dimension, "probabilities must be [b x k], got " + dims(probs.shape()));
  const std::size_t rows = probs.dim(0), k = probs.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = probs[r * k + j];
      require(p >= 0.0 && p <= 1.0 + tolerance, ErrorKind::validation,
              "probability out of range in row " + std::to_string(r));
      sum += p;
    }
    require(std::abs(sum - 1.0) <= tolerance, ErrorKind::validation,
            "row " + std::to_string(r) + " sums to " + std::to_string(sum) + ", not 1");
  }
}

template <typename T>
Var<T> cross_entropy(const Var<T>& probs, std::span<const int> labels) {
  const Tensor<T>& pv = probs.value();
  validate_probabilities(pv);
  const std::size_t batch = pv.dim(0), k = pv.dim(1);
  require(labels.size() == batch, ErrorKind::dimension, "cross_entropy: label count does not match batch");
  const T clamp = static_cast<T>(kLogClamp);
  T total = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    require(labels[b] >= 0 && static_cast<std::size_t>(labels[b]) < k, ErrorKind::domain,
            "label out of range: " + std::to_string(labels[b]));
    total -= std::log(std::max(pv[b * k + static_cast<std::size_t>(labels[b])], clamp));
  }
  const auto ip = probs.id();
  std::vector<int> lab(labels.begin(), labels.end());
  return probs.tape().record("cross_entropy", Tensor<T>::scalar(total / static_cast<T>(batch)), {probs},
                             [ip, batch, k, clamp, lab = std::move(lab)](Tape<T>& tape, const Tensor<T>& g) {
                               const Tensor<T>& p = tape.value(ip);
                               Tensor<T>& dp = tape.grad_buffer(ip);
                               const T coeff = g[0] / static_cast<T>(batch);
                               for (std::size_t b = 0; b < batch; ++b) {
                                 const std::size_t at = b * k + static_cast<std::size_t>(lab[b]);
                                 if (p[at] > clamp) dp[at] -= coeff / p[at];
                               }
                             });
}

template <typename T>
Var<T> kl_divergence(const Var<T>& target, const Var<T>& probs) {
  same_tape(&target.tape(), &probs.tape(), "kl_divergence");
  const Tensor<T>& qv = target.value();
  const Tensor<T>& pv = probs.value();
  require(qv.shape() == pv.shape(), ErrorKind::dimension, "kl_divergence shape mismatch");
  validate_probabilities(qv);
  validate_probabilities(pv);
  const std::size_t batch = pv.dim(0);
  const T clamp = static_cast<T>(kLogClamp);
  T total = T(0);
  for (std::size_t i = 0, n = pv.numel(); i < n; ++i) {
    if (qv[i] > T(0)) total += qv[i] * (std::log(std::max(qv[i], clamp)) - std::log(std::max(pv[i], clamp)));
  }
  const auto iq = target.id(), ip = probs.id();
  return probs.tape().record(
      "kl_divergence", Tensor<T>::scalar(total / static_cast<T>(batch)), {target, probs},
      [iq, ip, batch, clamp](Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& q = tape.value(iq);
        const Tensor<T>& p = tape.value(ip);
        const T coeff = g[0] / static_cast<T>(batch);
        if (tape.requires_grad(ip)) {
          Tensor<T>& dp = tape.grad_buffer(ip);
          for (std::size_t i = 0, n = p.numel(); i < n; ++i) {
            if (q[i] > T(0) && p[i] > clamp) dp[i] -= coeff * q[i] / p[i];
          }
        }
        if (tape.requires_grad(iq)) {
          Tensor<T>& dq = tape.grad_buffer(iq);
          for (std::size_t i = 0, n = q.numel(); i < n; ++i) {
            if (q[i] <= T(0)) continue;
            const T logp = std::log(std::max(p[i], clamp));
            dq[i] += coeff * (q[i] > clamp ? std::log(q[i]) + T(1) - logp : std::log(clamp) - logp);
          }
        }
      });
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  require(weights.numel() == x.value().numel(), ErrorKind::dimension, "weighted_sum weight count mismatch");
  T total = T(0);
  for (std::size_t i = 0, n = weights.numel(); i < n; ++i) total += weights[i] * x.value()[i];
  const auto ix = x.id();
  return x.tape().record("weighted_sum", Tensor<T>::scalar(total), {x},
                         [ix, weights](Tape<T>& tape, const Tensor<T>& g) {
                           Tensor<T>& dx = tape.grad_buffer(ix);
                           for (std::size_t i = 0, n = weights.numel(); i < n; ++i) dx[i] += g[0] * weights[i];
                         });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const std::size_t n = x.value().numel();
  T total = T(0);
  for (T v : x.value().values()) total += v;
  const auto ix = x.id();
  return x.tape().record("mean", Tensor<T>::scalar(total / static_cast<T>(n)), {x},
                         [ix, n](Tape<T>& tape, const Tensor<T>& g) {
                           Tensor<T>& dx = tape.grad_buffer(ix);
                           const T share = g[0] / static_cast<T>(n);
                           for (std::size_t i = 0; i < n; ++i) dx[i] += share;
                         });
}

#define DISTILLFORGE_INSTANTIATE_OPS(T)                                                                     \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> dense(const Var<T>&, const Var<T>&, const Var<T>&);                                       \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> add_broadcast(const Var<T>&, const Var<T>&);                                              \
  template Var<T> add_scaled(const Var<T>&, T, const Var<T>&, T);                                           \
  template Var<T> scale(const Var<T>&, T);                                                                  \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, Padding);                             \
  template Var<T> pool(const Var<T>&, PoolKind);                                                            \
  template Var<T> activation(const Var<T>&, Activation);                                                    \
  template Var<T> softmax_t(const Var<T>&, T);                                                              \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&, Mode);    \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&);                                  \
  template Var<T> concat(const std::vector<Var<T>>&);                                                       \
  template Var<T> channel_scale(const Var<T>&, const Var<T>&);                                              \
  template Var<T> reshape(const Var<T>&, Shape);                                                            \
  template Var<T> patchify(const Var<T>&, std::size_t);                                                     \
  template Var<T> prepend_token(const Var<T>&, const Var<T>&);                                              \
  template Var<T> select_token(const Var<T>&, std::size_t);                                                 \
  template Var<T> token_mean(const Var<T>&);                                                                \
  template Var<T> attention(const Var<T>&, std::size_t, Tensor<T>*);                                        \
  template Var<T> dropout(const Var<T>&, T, Rng&, Mode);                                                    \
  template Var<T> cross_entropy(const Var<T>&, std::span<const int>);                                       \
  template Var<T> kl_divergence(const Var<T>&, const Var<T>&);                                              \
  template Var<T> weighted_sum(const Var<T>&, const Tensor<T>&);                                            \
  template Var<T> mean(const Var<T>&);                                                                      \
  template void validate_probabilities(const Tensor<T>&, double);

DISTILLFORGE_INSTANTIATE_OPS(float)
DISTILLFORGE_INSTANTIATE_OPS(double)

}  // namespace distillforge::ops
