#pragma once

#include <filesystem>

#include "distillforge/imgproc.hpp"

namespace distillforge::imgproc {

/// Binary PPM (P6, 3 channels) or PGM (P5, 1 channel), maxval 255.
PixelRaster read_pnm(const std::filesystem::path& path);
/// Header is exactly "P6\n<w> <h>\n255\n" (P5 for 1-channel), then raw bytes.
void write_pnm(const std::filesystem::path& path, const PixelRaster& img);

/// 8-bit PNG. Gray inputs stay 1-channel, alpha is dropped.
PixelRaster read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const PixelRaster& img);

/// Dispatches on the file signature.
PixelRaster read_image(const std::filesystem::path& path);
/// Dispatches on the extension: .png, otherwise PNM.
void write_image(const std::filesystem::path& path, const PixelRaster& img);

}  // namespace distillforge::imgproc
