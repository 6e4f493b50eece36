#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "distillforge/models.hpp"

namespace distillforge::io {

enum class DType : std::uint8_t { f32 = 0, f16 = 1 };

std::string to_string(DType dtype);

inline constexpr char kMagic[4] = {'D', 'F', 'K', 'D'};
inline constexpr std::uint16_t kFormatVersion = 1;

/// IEEE-754 binary16 bits of `value`, round to nearest with ties to even.
/// Magnitudes beyond 65504 saturate to +-65504 and set `clamped`.
std::uint16_t float_to_half(float value, bool* clamped = nullptr);
float half_to_float(std::uint16_t bits);
inline float round_to_half(float value) { return half_to_float(float_to_half(value)); }

struct TensorEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::uint64_t offset = 0;  // from the start of the payload
  std::uint64_t nbytes = 0;
};

struct ArchiveHeader {
  std::uint16_t version = kFormatVersion;
  models::ArchitectureSpec spec;
  std::uint64_t digest = 0;
  std::vector<TensorEntry> tensors;
  std::uint64_t header_bytes = 0;
  std::uint64_t payload_bytes = 0;
};

/// Serializes every parameter (trainable and buffers) in table order.
std::vector<std::uint8_t> encode(models::ModelGraph<float>& model, DType dtype);
void save(models::ModelGraph<float>& model, const std::filesystem::path& path, DType dtype = DType::f32);

/// Parses and validates the header (magic, version, digest, tensor table bounds).
ArchiveHeader read_header(const std::vector<std::uint8_t>& bytes);

struct LoadedModel {
  models::ModelGraph<float> model;
  DType dtype;
};

/// Rebuilds the architecture from the archive and fills every tensor;
/// f16 tensors are widened to f32.
LoadedModel decode(const std::vector<std::uint8_t>& bytes);
LoadedModel load(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

struct TensorQuantization {
  std::string name;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  std::size_t clamped = 0;
};

struct QuantizationReport {
  std::vector<TensorQuantization> tensors;
  std::size_t clamped = 0;
  std::uint64_t payload_bytes_before = 0;
  std::uint64_t payload_bytes_after = 0;
  double accuracy_before = 0.0;  // filled by callers that evaluate
  double accuracy_after = 0.0;
};

/// Rounds every parameter of the model to binary16 in place (values stay
/// float, now exactly representable in f16) and reports the errors.
QuantizationReport quantize_f16(models::ModelGraph<float>& model);

struct SizeReport {
  std::uint64_t header_bytes = 0;
  std::uint64_t payload_bytes = 0;
  std::uint64_t total_bytes = 0;
  std::size_t tensors = 0;
  DType dtype = DType::f32;
};

SizeReport size_report(const std::vector<std::uint8_t>& bytes);
/// header_bytes,payload_bytes,total_bytes,tensors,dtype
void write_size_csv(const std::vector<std::pair<std::string, SizeReport>>& reports, std::ostream& out);
std::string describe(const SizeReport& report);

}  // namespace distillforge::io
