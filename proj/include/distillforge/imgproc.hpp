#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "distillforge/rng.hpp"
#include "distillforge/tensor.hpp"

namespace distillforge::imgproc {

/// 8-bit image, row-major, channels interleaved.
struct PixelRaster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> data;

  PixelRaster() = default;
  PixelRaster(std::size_t width, std::size_t height, std::size_t channels, std::uint8_t fill = 0);
  PixelRaster(std::size_t width, std::size_t height, std::size_t channels, std::vector<std::uint8_t> data);

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) { return data[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
    return data[(y * width + x) * channels + c];
  }
  bool same_size(const PixelRaster& other) const { return width == other.width && height == other.height; }

  friend bool operator==(const PixelRaster&, const PixelRaster&) = default;
};

/// Round half-up and saturate to [0, 255].
std::uint8_t quantize(double v) noexcept;

struct StructuringElement {
  std::size_t size = 5;  // odd, square, all-active
};

/// Dilation (window max) then erosion (window min), per channel, edge replication.
PixelRaster morphological_close(const PixelRaster& img, StructuringElement se = {});

struct BilateralParams {
  double sigma_spatial = 3.0;
  double sigma_range = 30.0;
  std::size_t radius = 6;

  /// Parameters with the radius tied to the spatial sigma, ceil(2 sigma_s).
  static BilateralParams from_sigmas(double sigma_spatial, double sigma_range);
};

struct BilateralTrace {
  /// Weight sum W_p per pixel and channel, same layout as the raster.
  std::vector<double> normalizer;
};

PixelRaster bilateral_filter(const PixelRaster& img, const BilateralParams& params, BilateralTrace* trace = nullptr);

/// (299 R + 587 G + 114 B) / 1000, rounded half-up in integer arithmetic.
PixelRaster to_grayscale(const PixelRaster& img);

struct Histogram {
  std::array<std::uint64_t, 256> counts{};
  std::uint64_t total = 0;

  double probability(std::size_t level) const { return static_cast<double>(counts[level]) / static_cast<double>(total); }
};

Histogram histogram(const PixelRaster& gray);

struct OtsuResult {
  int threshold = 0;
  double omega0 = 0.0;
  double omega1 = 0.0;
  double within_class_variance = 0.0;
  double class_variance0 = 0.0;
  double class_variance1 = 0.0;
  /// Single-intensity input: threshold is that intensity, no split exists.
  bool degenerate = false;
};

/// Class 0 holds intensities <= t. Minimizes the within-class variance over
/// t in [0, 254] skipping empty classes; ties go to the smallest t. The
/// comparison is exact (integer arithmetic), the reported moments are doubles.
OtsuResult otsu_threshold(const Histogram& hist);

/// mask = mask_scale where I >= t, else 0.
PixelRaster binary_segment(const PixelRaster& gray, int threshold, std::uint8_t mask_scale = 255);

struct BlendParams {
  double alpha = 1.14;
  std::uint8_t mask_scale = 255;
};

/// I + alpha * mask, mask broadcast across the image's channels.
PixelRaster highlight_roi(const PixelRaster& img, const PixelRaster& mask, const BlendParams& params = {});

struct UnsharpParams {
  double sigma = 2.0;
  double gain = 1.2;
};

/// Normalized 1-D Gaussian taps, radius ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma);

/// Separable Gaussian blur in float64 with edge replication; unrounded.
std::vector<double> gaussian_blur(const PixelRaster& img, double sigma);

/// I + k (I - I_b), saturated and rounded half-up.
std::uint8_t sharpen_value(double original, double blurred, double gain) noexcept;

PixelRaster unsharp_mask(const PixelRaster& img, const UnsharpParams& params = {});

/// Bilinear, half-pixel centers, source coordinates clamped to the image.
PixelRaster resize(const PixelRaster& img, std::size_t width, std::size_t height);

/// [channels x height x width] float tensor of value / 255.
Tensor<float> rescale(const PixelRaster& img);

struct PipelineConfig {
  StructuringElement closing{};
  BilateralParams bilateral{};
  BlendParams blend{};
  UnsharpParams unsharp{};
  std::size_t output_width = 64;
  std::size_t output_height = 64;
};

struct PipelineStages {
  PixelRaster closed;
  PixelRaster smoothed;
  PixelRaster gray;
  OtsuResult otsu;
  PixelRaster mask;
  PixelRaster highlighted;
  PixelRaster sharpened;
  PixelRaster resized;
  Tensor<float> tensor;
};

PipelineStages run_pipeline(const PixelRaster& img, const PipelineConfig& config);
Tensor<float> preprocess(const PixelRaster& img, const PipelineConfig& config);

/// Preprocesses every image on up to `threads` workers; output order matches
/// input order.
std::vector<Tensor<float>> preprocess_batch(const std::vector<PixelRaster>& images, const PipelineConfig& config,
                                            std::size_t threads);

struct AugmentParams {
  double rotation_deg = 20.0;
  double shift_fraction = 0.1;
  double shear_deg = 10.0;
  bool horizontal_flip = true;
};

struct AffineSample {
  double rotation_deg = 0.0;
  double shift_x = 0.0;  // pixels
  double shift_y = 0.0;  // pixels
  double shear_deg = 0.0;
  bool flip = false;
};

AffineSample sample_affine(const AugmentParams& params, std::size_t width, std::size_t height, Rng& rng);

/// Forward map about the image center: p' = c + t + R(theta) S(shear) F (p - c),
/// where F mirrors x when flipping and S shears x by tan(shear) * y. Applied by
/// inverse mapping with bilinear sampling; samples outside the image are black.
PixelRaster apply_affine(const PixelRaster& img, const AffineSample& sample);

PixelRaster augment(const PixelRaster& img, const AugmentParams& params, Rng& rng);

/// Same transform on a [c x h x w] float image.
Tensor<float> apply_affine(const Tensor<float>& img, const AffineSample& sample);

}  // namespace distillforge::imgproc
