#include "distillforge/imgproc.hpp"

#include <algorithm>
#include <atomic>
#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>
#include <numbers>
#include <thread>

namespace distillforge::imgproc {
namespace {

std::size_t clamp_index(std::ptrdiff_t i, std::size_t n) {
  if (i < 0) return 0;
  if (i >= static_cast<std::ptrdiff_t>(n)) return n - 1;
  return static_cast<std::size_t>(i);
}

void require_nonempty(const PixelRaster& img) {
  require(img.width > 0 && img.height > 0, ErrorKind::dimension, "image has no pixels");
}

// Sliding max/min along one axis with edge replication.
template <typename Select>
PixelRaster window_pass(const PixelRaster& img, std::size_t radius, bool horizontal, Select select) {
  PixelRaster out(img.width, img.height, img.channels);
  const auto r = static_cast<std::ptrdiff_t>(radius);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) {
        std::uint8_t best = img.at(x, y, c);
        for (std::ptrdiff_t d = -r; d <= r; ++d) {
          std::uint8_t v = horizontal ? img.at(clamp_index(static_cast<std::ptrdiff_t>(x) + d, img.width), y, c)
                                      : img.at(x, clamp_index(static_cast<std::ptrdiff_t>(y) + d, img.height), c);
          best = select(best, v);
        }
        out.at(x, y, c) = best;
      }
    }
  }
  return out;
}

}  // namespace

PixelRaster::PixelRaster(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill)
    : width(w), height(h), channels(c) {
  require(w > 0 && h > 0, ErrorKind::dimension, "image extents must be positive");
  require(c == 1 || c == 3, ErrorKind::channel, "images have 1 or 3 channels, got " + std::to_string(c));
  data.assign(w * h * c, fill);
}

PixelRaster::PixelRaster(std::size_t w, std::size_t h, std::size_t c, std::vector<std::uint8_t> d)
    : width(w), height(h), channels(c), data(std::move(d)) {
  require(w > 0 && h > 0, ErrorKind::dimension, "image extents must be positive");
  require(c == 1 || c == 3, ErrorKind::channel, "images have 1 or 3 channels, got " + std::to_string(c));
  require(data.size() == w * h * c, ErrorKind::dimension, "pixel buffer does not match image extents");
}

std::uint8_t quantize(double v) noexcept {
  double r = std::floor(v + 0.5);
  if (!(r > 0.0)) return 0;
  if (r >= 255.0) return 255;
  return static_cast<std::uint8_t>(r);
}

PixelRaster morphological_close(const PixelRaster& img, StructuringElement se) {
  require_nonempty(img);
  require(se.size % 2 == 1, ErrorKind::config, "structuring element size must be odd");
  const std::size_t r = se.size / 2;
  auto max_op = [](std::uint8_t a, std::uint8_t b) { return std::max(a, b); };
  auto min_op = [](std::uint8_t a, std::uint8_t b) { return std::min(a, b); };
  PixelRaster dilated = window_pass(window_pass(img, r, true, max_op), r, false, max_op);
  return window_pass(window_pass(dilated, r, true, min_op), r, false, min_op);
}

BilateralParams BilateralParams::from_sigmas(double sigma_spatial, double sigma_range) {
  return {sigma_spatial, sigma_range, static_cast<std::size_t>(std::ceil(2.0 * sigma_spatial))};
}

PixelRaster bilateral_filter(const PixelRaster& img, const BilateralParams& params, BilateralTrace* trace) {
  require_nonempty(img);
  require(params.sigma_spatial > 0 && params.sigma_range > 0, ErrorKind::config, "bilateral sigmas must be positive");
  const auto r = static_cast<std::ptrdiff_t>(params.radius);
  const std::size_t side = 2 * params.radius + 1;
  std::vector<double> spatial(side * side);
  for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
    for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
      spatial[static_cast<std::size_t>((dy + r) * static_cast<std::ptrdiff_t>(side) + dx + r)] =
          std::exp(-static_cast<double>(dx * dx + dy * dy) / (2.0 * params.sigma_spatial * params.sigma_spatial));
    }
  }
  std::array<double, 256> range{};
  for (int d = 0; d < 256; ++d) {
    range[d] = std::exp(-static_cast<double>(d * d) / (2.0 * params.sigma_range * params.sigma_range));
  }
  PixelRaster out(img.width, img.height, img.channels);
  if (trace) trace->normalizer.assign(img.data.size(), 0.0);
  std::vector<std::size_t> xs(side), ys(side);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::ptrdiff_t d = -r; d <= r; ++d) {
      ys[static_cast<std::size_t>(d + r)] = clamp_index(static_cast<std::ptrdiff_t>(y) + d, img.height);
    }
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::ptrdiff_t d = -r; d <= r; ++d) {
        xs[static_cast<std::size_t>(d + r)] = clamp_index(static_cast<std::ptrdiff_t>(x) + d, img.width);
      }
      for (std::size_t c = 0; c < img.channels; ++c) {
        const int center = img.at(x, y, c);
        double num = 0.0, den = 0.0;
        for (std::size_t j = 0; j < side; ++j) {
          for (std::size_t i = 0; i < side; ++i) {
            const int v = img.at(xs[i], ys[j], c);
            const double w = spatial[j * side + i] * range[static_cast<std::size_t>(std::abs(v - center))];
            num += w * v;
            den += w;
          }
        }
        out.at(x, y, c) = quantize(num / den);
        if (trace) trace->normalizer[(y * img.width + x) * img.channels + c] = den;
      }
    }
  }
  return out;
}

PixelRaster to_grayscale(const PixelRaster& img) {
  require(img.channels == 3, ErrorKind::channel,
          "grayscale conversion needs a 3-channel image, got " + std::to_string(img.channels));
  PixelRaster out(img.width, img.height, 1);
  for (std::size_t i = 0, n = img.width * img.height; i < n; ++i) {
    const unsigned r = img.data[3 * i], g = img.data[3 * i + 1], b = img.data[3 * i + 2];
    out.data[i] = static_cast<std::uint8_t>((299 * r + 587 * g + 114 * b + 500) / 1000);
  }
  return out;
}

Histogram histogram(const PixelRaster& gray) {
  require(gray.channels == 1, ErrorKind::channel, "histogram needs a 1-channel image");
  Histogram h;
  for (std::uint8_t v : gray.data) ++h.counts[v];
  h.total = gray.data.size();
  return h;
}

OtsuResult otsu_threshold(const Histogram& hist) {
  using boost::multiprecision::int256_t;
  std::uint64_t total = 0, distinct = 0;
  int only = 0;
  for (int i = 0; i < 256; ++i) {
    total += hist.counts[i];
    if (hist.counts[i]) {
      ++distinct;
      only = i;
    }
  }
  require(total > 0 && total == hist.total, ErrorKind::size, "histogram is empty or its total is inconsistent");

  auto moments = [&](int t) {
    OtsuResult r;
    r.threshold = t;
    double n0 = 0, s0 = 0, n1 = 0, s1 = 0;
    for (int i = 0; i < 256; ++i) {
      const double c = static_cast<double>(hist.counts[i]);
      if (i <= t) {
        n0 += c;
        s0 += c * i;
      } else {
        n1 += c;
        s1 += c * i;
      }
    }
    const double mu0 = n0 > 0 ? s0 / n0 : 0.0, mu1 = n1 > 0 ? s1 / n1 : 0.0;
    double q0 = 0, q1 = 0;
    for (int i = 0; i < 256; ++i) {
      const double c = static_cast<double>(hist.counts[i]);
      if (i <= t) q0 += c * (i - mu0) * (i - mu0);
      else q1 += c * (i - mu1) * (i - mu1);
    }
    const double n = static_cast<double>(total);
    r.omega0 = n0 / n;
    r.omega1 = n1 / n;
    r.class_variance0 = n0 > 0 ? q0 / n0 : 0.0;
    r.class_variance1 = n1 > 0 ? q1 / n1 : 0.0;
    r.within_class_variance = r.omega0 * r.class_variance0 + r.omega1 * r.class_variance1;
    return r;
  };

  if (distinct == 1) {
    OtsuResult r = moments(only);
    r.degenerate = true;
    return r;
  }

  // Between-class variance is proportional to (s0 N - S n0)^2 / (n0 n1); the
  // candidate with the largest ratio has the smallest within-class variance.
  int256_t sum_all = 0;
  for (int i = 0; i < 256; ++i) sum_all += int256_t(hist.counts[i]) * i;
  const int256_t n = total;
  int best = -1;
  int256_t best_num = 0, best_den = 1;
  int256_t n0 = 0, s0 = 0;
  for (int t = 0; t <= 254; ++t) {
    n0 += hist.counts[t];
    s0 += int256_t(hist.counts[t]) * t;
    const int256_t n1 = n - n0;
    if (n0 == 0 || n1 == 0) continue;
    const int256_t diff = s0 * n - sum_all * n0;
    const int256_t num = diff * diff;
    const int256_t den = n0 * n1;
    if (best < 0 || num * best_den > best_num * den) {
      best = t;
      best_num = num;
      best_den = den;
    }
  }
  return moments(best);
}

PixelRaster binary_segment(const PixelRaster& gray, int threshold, std::uint8_t mask_scale) {
  require(gray.channels == 1, ErrorKind::channel, "segmentation needs a 1-channel image");
  require(threshold >= 0 && threshold <= 255, ErrorKind::domain, "threshold must lie in [0, 255]");
  PixelRaster out(gray.width, gray.height, 1);
  for (std::size_t i = 0; i < gray.data.size(); ++i) out.data[i] = gray.data[i] >= threshold ? mask_scale : 0;
  return out;
}

PixelRaster highlight_roi(const PixelRaster& img, const PixelRaster& mask, const BlendParams& params) {
  require(img.same_size(mask), ErrorKind::dimension, "mask size does not match image size");
  require(mask.channels == 1, ErrorKind::channel, "mask must have 1 channel");
  require(params.alpha > 0, ErrorKind::config, "blend alpha must be positive");
  PixelRaster out(img.width, img.height, img.channels);
  for (std::size_t p = 0, n = img.width * img.height; p < n; ++p) {
    const double add = params.alpha * mask.data[p];
    for (std::size_t c = 0; c < img.channels; ++c) {
      out.data[p * img.channels + c] = quantize(img.data[p * img.channels + c] + add);
    }
  }
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  require(sigma > 0, ErrorKind::config, "gaussian sigma must be positive");
  const auto r = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double sum = 0.0;
  for (std::ptrdiff_t i = -r; i <= r; ++i) {
    k[static_cast<std::size_t>(i + r)] = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    sum += k[static_cast<std::size_t>(i + r)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

std::vector<double> gaussian_blur(const PixelRaster& img, double sigma) {
  require_nonempty(img);
  const std::vector<double> k = gaussian_kernel(sigma);
  const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
  const std::size_t w = img.width, h = img.height, ch = img.channels;
  std::vector<double> tmp(img.data.size()), out(img.data.size());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t d = -r; d <= r; ++d) {
          acc += k[static_cast<std::size_t>(d + r)] * img.at(clamp_index(static_cast<std::ptrdiff_t>(x) + d, w), y, c);
        }
        tmp[(y * w + x) * ch + c] = acc;
      }
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t d = -r; d <= r; ++d) {
          acc += k[static_cast<std::size_t>(d + r)] *
                 tmp[(clamp_index(static_cast<std::ptrdiff_t>(y) + d, h) * w + x) * ch + c];
        }
        out[(y * w + x) * ch + c] = acc;
      }
    }
  }
  return out;
}

std::uint8_t sharpen_value(double original, double blurred, double gain) noexcept {
  return quantize(original + gain * (original - blurred));
}

PixelRaster unsharp_mask(const PixelRaster& img, const UnsharpParams& params) {
  const std::vector<double> blurred = gaussian_blur(img, params.sigma);
  PixelRaster out(img.width, img.height, img.channels);
  for (std::size_t i = 0; i < img.data.size(); ++i) out.data[i] = sharpen_value(img.data[i], blurred[i], params.gain);
  return out;
}

PixelRaster resize(const PixelRaster& img, std::size_t width, std::size_t height) {
  require_nonempty(img);
  require(width > 0 && height > 0, ErrorKind::dimension, "resize target must be positive");
  PixelRaster out(width, height, img.channels);
  const double sx = static_cast<double>(img.width) / static_cast<double>(width);
  const double sy = static_cast<double>(img.height) / static_cast<double>(height);
  const double max_x = static_cast<double>(img.width - 1), max_y = static_cast<double>(img.height - 1);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy_src = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, max_y);
    const auto y0 = static_cast<std::size_t>(fy_src);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double fy = fy_src - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx_src = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, max_x);
      const auto x0 = static_cast<std::size_t>(fx_src);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double fx = fx_src - static_cast<double>(x0);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = (1.0 - fx) * img.at(x0, y0, c) + fx * img.at(x1, y0, c);
        const double bottom = (1.0 - fx) * img.at(x0, y1, c) + fx * img.at(x1, y1, c);
        out.at(x, y, c) = quantize((1.0 - fy) * top + fy * bottom);
      }
    }
  }
  return out;
}

Tensor<float> rescale(const PixelRaster& img) {
  require_nonempty(img);
  Tensor<float> out({img.channels, img.height, img.width});
  const std::size_t plane = img.width * img.height;
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < img.channels; ++c) {
      out[c * plane + p] = static_cast<float>(img.data[p * img.channels + c]) / 255.0f;
    }
  }
  return out;
}

PipelineStages run_pipeline(const PixelRaster& img, const PipelineConfig& config) {
  require(img.channels == 3, ErrorKind::channel, "the preprocessing pipeline needs a 3-channel image");
  PipelineStages s;
  s.closed = morphological_close(img, config.closing);
  s.smoothed = bilateral_filter(s.closed, config.bilateral);
  s.gray = to_grayscale(s.smoothed);
  s.otsu = otsu_threshold(histogram(s.gray));
  s.mask = binary_segment(s.gray, s.otsu.threshold, config.blend.mask_scale);
  s.highlighted = highlight_roi(s.smoothed, s.mask, config.blend);
  s.sharpened = unsharp_mask(s.highlighted, config.unsharp);
  s.resized = resize(s.sharpened, config.output_width, config.output_height);
  s.tensor = rescale(s.resized);
  return s;
}

Tensor<float> preprocess(const PixelRaster& img, const PipelineConfig& config) {
  return run_pipeline(img, config).tensor;
}

std::vector<Tensor<float>> preprocess_batch(const std::vector<PixelRaster>& images, const PipelineConfig& config,
                                            std::size_t threads) {
  std::vector<Tensor<float>> out(images.size());
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, images.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < images.size(); ++i) out[i] = preprocess(images[i], config);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = next++; i < images.size(); i = next++) out[i] = preprocess(images[i], config);
      } catch (...) {
        errors[t] = std::current_exception();
        next = images.size();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

AffineSample sample_affine(const AugmentParams& params, std::size_t width, std::size_t height, Rng& rng) {
  require(params.rotation_deg >= 0 && params.shift_fraction >= 0 && params.shear_deg >= 0, ErrorKind::config,
          "augmentation ranges must be nonnegative");
  AffineSample s;
  s.rotation_deg = rng.uniform(-params.rotation_deg, params.rotation_deg);
  s.shift_x = rng.uniform(-params.shift_fraction, params.shift_fraction) * static_cast<double>(width);
  s.shift_y = rng.uniform(-params.shift_fraction, params.shift_fraction) * static_cast<double>(height);
  s.shear_deg = rng.uniform(-params.shear_deg, params.shear_deg);
  const bool coin = rng.uniform() < 0.5;
  s.flip = params.horizontal_flip && coin;
  return s;
}

namespace {

// Inverse of the forward map documented in the header, as a 2x3 matrix.
std::array<double, 6> inverse_affine(const AffineSample& s, double cx, double cy) {
  const double th = s.rotation_deg * std::numbers::pi / 180.0;
  const double sh = std::tan(s.shear_deg * std::numbers::pi / 180.0);
  const double c = std::cos(th), sn = std::sin(th);
  // A = R * S * F with S = [[1, sh], [0, 1]], F = diag(+-1, 1)
  const double f = s.flip ? -1.0 : 1.0;
  const double a00 = c * f, a01 = c * sh - sn;
  const double a10 = sn * f, a11 = sn * sh + c;
  const double det = a00 * a11 - a01 * a10;
  const double i00 = a11 / det, i01 = -a01 / det, i10 = -a10 / det, i11 = a00 / det;
  // p = c + A^-1 (p' - c - t)
  const double tx = cx + s.shift_x, ty = cy + s.shift_y;
  return {i00, i01, cx - i00 * tx - i01 * ty, i10, i11, cy - i10 * tx - i11 * ty};
}

template <typename Fetch, typename Store>
void warp(std::size_t width, std::size_t height, const AffineSample& sample, Fetch fetch, Store store) {
  const double cx = (static_cast<double>(width) - 1.0) / 2.0, cy = (static_cast<double>(height) - 1.0) / 2.0;
  const auto m = inverse_affine(sample, cx, cy);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double xd = static_cast<double>(x), yd = static_cast<double>(y);
      const double sx = m[0] * xd + m[1] * yd + m[2];
      const double sy = m[3] * xd + m[4] * yd + m[5];
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double fx = sx - fx0, fy = sy - fy0;
      const auto x0 = static_cast<std::ptrdiff_t>(fx0), y0 = static_cast<std::ptrdiff_t>(fy0);
      const double w[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      const std::ptrdiff_t px[4] = {x0, x0 + 1, x0, x0 + 1};
      const std::ptrdiff_t py[4] = {y0, y0, y0 + 1, y0 + 1};
      store(x, y, [&](std::size_t c) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) {
          if (px[k] < 0 || py[k] < 0 || px[k] >= static_cast<std::ptrdiff_t>(width) ||
              py[k] >= static_cast<std::ptrdiff_t>(height) || w[k] == 0.0) {
            continue;
          }
          acc += w[k] * fetch(static_cast<std::size_t>(px[k]), static_cast<std::size_t>(py[k]), c);
        }
        return acc;
      });
    }
  }
}

}  // namespace

PixelRaster apply_affine(const PixelRaster& img, const AffineSample& sample) {
  require_nonempty(img);
  PixelRaster out(img.width, img.height, img.channels);
  warp(
      img.width, img.height, sample, [&](std::size_t x, std::size_t y, std::size_t c) { return img.at(x, y, c); },
      [&](std::size_t x, std::size_t y, auto sample_at) {
        for (std::size_t c = 0; c < img.channels; ++c) out.at(x, y, c) = quantize(sample_at(c));
      });
  return out;
}

PixelRaster augment(const PixelRaster& img, const AugmentParams& params, Rng& rng) {
  return apply_affine(img, sample_affine(params, img.width, img.height, rng));
}

Tensor<float> apply_affine(const Tensor<float>& img, const AffineSample& sample) {
  require(img.rank() == 3, ErrorKind::dimension, "expected a [c x h x w] image tensor");
  const std::size_t ch = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor<float> out(img.shape());
  warp(
      w, h, sample, [&](std::size_t x, std::size_t y, std::size_t c) { return double(img[(c * h + y) * w + x]); },
      [&](std::size_t x, std::size_t y, auto sample_at) {
        for (std::size_t c = 0; c < ch; ++c) out[(c * h + y) * w + x] = static_cast<float>(sample_at(c));
      });
  return out;
}

}  // namespace distillforge::imgproc
