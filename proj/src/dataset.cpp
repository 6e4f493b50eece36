#include "distillforge/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>

#include "distillforge/image_io.hpp"

namespace distillforge::data {
namespace fs = std::filesystem;
using imgproc::PixelRaster;

namespace {

struct Rgb {
  double r, g, b;
};

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

Rgb jitter(Rgb base, double spread, Rng& rng) {
  return {base.r + rng.uniform(-spread, spread), base.g + rng.uniform(-spread, spread),
          base.b + rng.uniform(-spread, spread)};
}

struct Outline {
  double cx, cy, radius, edge;
  std::vector<double> amp, phase;  // harmonic k = index + 2

  double radius_at(double theta) const {
    double r = 1.0;
    for (std::size_t k = 0; k < amp.size(); ++k) r += amp[k] * std::cos(static_cast<double>(k + 2) * theta + phase[k]);
    return radius * r;
  }
  /// Coverage in [0, 1] of the lesion at pixel centre (x, y).
  double coverage(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double d = std::sqrt(dx * dx + dy * dy);
    return clamp01((radius_at(std::atan2(dy, dx)) - d) / edge + 0.5);
  }
};

void paint(std::vector<double>& canvas, std::size_t size, double x, double y, Rgb c, double w) {
  if (x < 0 || y < 0) return;
  const auto ix = static_cast<std::size_t>(x), iy = static_cast<std::size_t>(y);
  if (ix >= size || iy >= size) return;
  double* px = &canvas[(iy * size + ix) * 3];
  px[0] = px[0] * (1 - w) + c.r * w;
  px[1] = px[1] * (1 - w) + c.g * w;
  px[2] = px[2] * (1 - w) + c.b * w;
}

void draw_hair(std::vector<double>& canvas, std::size_t size, Rng& rng) {
  const double s = static_cast<double>(size);
  auto edge_point = [&] {
    const double t = rng.uniform(0, s);
    switch (rng.below(4)) {
      case 0:
        return std::pair{t, 0.0};
      case 1:
        return std::pair{t, s - 1};
      case 2:
        return std::pair{0.0, t};
      default:
        return std::pair{s - 1, t};
    }
  };
  const auto [x0, y0] = edge_point();
  const auto [x2, y2] = edge_point();
  const double x1 = rng.uniform(0, s), y1 = rng.uniform(0, s);
  const Rgb color = jitter({45, 32, 28}, 10, rng);
  const bool thick = rng.below(3) == 0;
  const std::size_t steps = size * 4;
  for (std::size_t i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(steps);
    const double u = 1 - t;
    const double x = u * u * x0 + 2 * u * t * x1 + t * t * x2;
    const double y = u * u * y0 + 2 * u * t * y1 + t * t * y2;
    paint(canvas, size, x, y, color, 0.9);
    if (thick) paint(canvas, size, x + 1, y, color, 0.6);
  }
}

}  // namespace

std::string class_name(int label) {
  require(label == kBenign || label == kMalignant, ErrorKind::domain, "label must be 0 or 1");
  return label == kBenign ? "benign" : "malignant";
}

SplitIndices split_dataset(std::size_t n, std::uint64_t seed) {
  require(n >= 10, ErrorKind::size, "dataset needs at least 10 samples to split, got " + std::to_string(n));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  const std::size_t n_val = (n + 5) / 10;
  const std::size_t n_test = (2 * n + 5) / 10;
  const std::size_t n_train = n - n_val - n_test;
  SplitIndices s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
               order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return s;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  for (std::size_t i : indices) {
    require(i < images.size(), ErrorKind::size, "subset index out of range");
    out.images.push_back(images[i]);
    out.labels.push_back(labels[i]);
  }
  return out;
}

PixelRaster synth_image(int label, std::size_t size, Rng& rng, SynthMeta* meta) {
  require(label == kBenign || label == kMalignant, ErrorKind::domain, "label must be 0 or 1");
  require(size >= 16, ErrorKind::config, "synthetic images need at least 16 pixels per side");
  const double s = static_cast<double>(size);
  const Rgb skin = jitter({212, 162, 134}, 14, rng);
  std::vector<double> canvas(size * size * 3);
  for (std::size_t i = 0; i < size * size; ++i) {
    const double n = rng.uniform(-5, 5);
    canvas[i * 3] = skin.r + n;
    canvas[i * 3 + 1] = skin.g + n;
    canvas[i * 3 + 2] = skin.b + n;
  }

  Outline o;
  const bool malignant = label == kMalignant;
  const std::size_t harmonics = malignant ? 5 : 2;
  for (std::size_t k = 0; k < harmonics; ++k) {
    o.amp.push_back(malignant ? rng.uniform(0.04, 0.16) : rng.uniform(0.0, 0.05));
    o.phase.push_back(rng.uniform(0, 2 * std::numbers::pi));
  }
  o.radius = s * (malignant ? rng.uniform(0.22, 0.31) : rng.uniform(0.12, 0.19));
  const double offset = malignant ? 0.12 : 0.05;
  o.cx = s * (0.5 + rng.uniform(-offset, offset));
  o.cy = s * (0.5 + rng.uniform(-offset, offset));
  o.edge = malignant ? s * rng.uniform(0.04, 0.08) : 1.0;

  const Rgb core = malignant ? jitter({118, 78, 66}, 14, rng) : jitter({92, 58, 44}, 12, rng);
  const Rgb blotch = malignant ? jitter({70, 72, 96}, 10, rng) : core;
  // low-frequency mottling for the malignant class
  const double fx = rng.uniform(0.15, 0.35), fy = rng.uniform(0.15, 0.35), ph = rng.uniform(0, 6.28);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const double cov = o.coverage(px, py);
      if (cov <= 0) continue;
      const double mix = malignant ? clamp01(0.5 + 0.5 * std::sin(fx * px + ph) * std::cos(fy * py - ph)) : 0.0;
      const Rgb c{core.r * (1 - mix) + blotch.r * mix, core.g * (1 - mix) + blotch.g * mix,
                  core.b * (1 - mix) + blotch.b * mix};
      paint(canvas, size, px, py, c, cov);
    }
  }

  const std::size_t strokes = 1 + rng.below(4);
  for (std::size_t i = 0; i < strokes; ++i) draw_hair(canvas, size, rng);
  if (meta) *meta = {label, strokes};

  PixelRaster img(size, size, 3);
  for (std::size_t i = 0; i < canvas.size(); ++i) img.data[i] = imgproc::quantize(canvas[i]);
  return img;
}

SynthSummary write_synth_corpus(const fs::path& out, std::size_t per_class, std::size_t size, std::uint64_t seed) {
  require(per_class >= 10, ErrorKind::config, "synthetic corpus needs at least 10 images per class");
  SynthSummary summary;
  std::ostringstream csv;
  csv << "file,label,hair_strokes\n";
  const Rng root(seed);
  for (int label : {kBenign, kMalignant}) {
    const fs::path dir = out / class_name(label);
    fs::create_directories(dir);
    for (std::size_t i = 0; i < per_class; ++i) {
      Rng rng = root.fork(static_cast<std::uint64_t>(label) * 1000003ULL + i);
      SynthMeta meta;
      PixelRaster img = synth_image(label, size, rng, &meta);
      char name[32];
      std::snprintf(name, sizeof name, "%04zu.ppm", i);
      const fs::path path = dir / name;
      imgproc::write_pnm(path, img);
      summary.files.push_back(path);
      summary.meta.push_back(meta);
      csv << class_name(label) << '/' << name << ',' << class_name(label) << ',' << meta.hair_strokes << '\n';
    }
  }
  std::ofstream f(out / "strokes.csv", std::ios::binary);
  require(f.good(), ErrorKind::io, "cannot write " + (out / "strokes.csv").string());
  f << csv.str();
  return summary;
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw Error(ErrorKind::format, "unknown split '" + name + "'");
}

std::size_t Manifest::count(int label) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) { return e.label == label; }));
}

std::vector<const ManifestEntry*> Manifest::in_split(Split split) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(&e);
  }
  return out;
}

Manifest ingest(const fs::path& root, std::uint64_t seed) {
  Manifest m;
  m.root = root;
  for (int label : {kBenign, kMalignant}) {
    const fs::path dir = root / class_name(label);
    require(fs::is_directory(dir), ErrorKind::layout, "missing class directory " + dir.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      try {
        imgproc::read_image(f);
      } catch (const Error& e) {
        m.warnings.push_back("skipped " + f.string() + ": " + e.what());
        continue;
      }
      m.entries.push_back({fs::relative(f, root).generic_string(), label, Split::train});
    }
  }
  const SplitIndices s = split_dataset(m.entries.size(), seed);
  for (std::size_t i : s.val) m.entries[i].split = Split::val;
  for (std::size_t i : s.test) m.entries[i].split = Split::test;
  return m;
}

void write_manifest_csv(const Manifest& manifest, std::ostream& out) {
  out << "path,label,split\n";
  for (const auto& e : manifest.entries) out << e.path << ',' << class_name(e.label) << ',' << to_string(e.split) << '\n';
}

Manifest read_manifest_csv(const fs::path& root, std::istream& in) {
  Manifest m;
  m.root = root;
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == "path,label,split", ErrorKind::format,
          "manifest header must be 'path,label,split'");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    require(fields.size() == 3, ErrorKind::format, "manifest line " + std::to_string(line_no) + ": expected 3 fields");
    int label = -1;
    if (fields[1] == "benign") label = kBenign;
    if (fields[1] == "malignant") label = kMalignant;
    require(label >= 0, ErrorKind::format, "manifest line " + std::to_string(line_no) + ": unknown class");
    m.entries.push_back({fields[0], label, parse_split(fields[2])});
  }
  return m;
}

Dataset load_split(const Manifest& manifest, Split split, const imgproc::PipelineConfig& pipeline,
                   std::size_t threads) {
  std::vector<PixelRaster> images;
  Dataset out;
  for (const ManifestEntry* e : manifest.in_split(split)) {
    PixelRaster img = imgproc::read_image(manifest.root / e->path);
    if (img.channels == 1) {
      PixelRaster rgb(img.width, img.height, 3);
      for (std::size_t i = 0; i < img.data.size(); ++i) rgb.data[i * 3] = rgb.data[i * 3 + 1] = rgb.data[i * 3 + 2] = img.data[i];
      img = std::move(rgb);
    }
    images.push_back(std::move(img));
    out.labels.push_back(e->label);
  }
  out.images = imgproc::preprocess_batch(images, pipeline, threads);
  return out;
}

std::size_t default_threads() {
  if (const char* env = std::getenv("DISTILLFORGE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    require(end != env && *end == '\0' && v > 0, ErrorKind::config,
            std::string("DISTILLFORGE_THREADS must be a positive integer, got '") + env + "'");
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace distillforge::data
