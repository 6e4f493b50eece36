#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "distillforge/imgproc.hpp"
#include "distillforge/tensor.hpp"

namespace distillforge::data {

inline constexpr int kBenign = 0;
inline constexpr int kMalignant = 1;

std::string class_name(int label);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Seeded shuffle, then a contiguous train/val/test cut. val = round(n / 10)
/// and test = round(n / 5) with halves rounded up; train takes the remainder.
SplitIndices split_dataset(std::size_t n, std::uint64_t seed);

/// Preprocessed samples: [3 x S x S] tensors and labels (0 benign, 1 malignant).
struct Dataset {
  std::vector<Tensor<float>> images;
  std::vector<int> labels;

  std::size_t size() const noexcept { return images.size(); }
  Dataset subset(const std::vector<std::size_t>& indices) const;
};

struct SynthMeta {
  int label = 0;
  std::size_t hair_strokes = 0;
};

/// Skin-toned background with one lesion and thin dark hair strokes.
/// Benign: compact, dark, nearly round, sharp edge. Malignant: larger,
/// off-centre, irregular border, blurred edge, mottled colour.
imgproc::PixelRaster synth_image(int label, std::size_t size, Rng& rng, SynthMeta* meta = nullptr);

struct SynthSummary {
  std::vector<std::filesystem::path> files;
  std::vector<SynthMeta> meta;
};

/// Writes benign/NNNN.ppm and malignant/NNNN.ppm plus strokes.csv
/// (file,label,hair_strokes) under `out`.
SynthSummary write_synth_corpus(const std::filesystem::path& out, std::size_t per_class, std::size_t size,
                                std::uint64_t seed);

enum class Split { train, val, test };
std::string to_string(Split split);
Split parse_split(const std::string& name);

struct ManifestEntry {
  std::string path;  // relative to the dataset root
  int label = 0;
  Split split = Split::train;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  std::vector<std::string> warnings;

  std::size_t count(int label) const;
  std::vector<const ManifestEntry*> in_split(Split split) const;
};

/// Scans root/benign and root/malignant (PNG, PPM, PGM; sorted by name),
/// drops files that fail to decode with a warning, and assigns splits with
/// split_dataset(n, seed).
Manifest ingest(const std::filesystem::path& root, std::uint64_t seed);

/// CSV path,label,split with class names as labels.
void write_manifest_csv(const Manifest& manifest, std::ostream& out);
Manifest read_manifest_csv(const std::filesystem::path& root, std::istream& in);

/// Decodes and preprocesses every entry of one split, order preserved.
Dataset load_split(const Manifest& manifest, Split split, const imgproc::PipelineConfig& pipeline,
                   std::size_t threads);

/// Worker count from DISTILLFORGE_THREADS, else hardware concurrency (at least 1).
std::size_t default_threads();

}  // namespace distillforge::data
