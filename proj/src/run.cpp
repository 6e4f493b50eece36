#include "distillforge/run.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "distillforge/image_io.hpp"

namespace distillforge::run {

namespace fs = std::filesystem;

namespace {

template <typename F>
void visit(RunConfig& c, F&& f) {
  f("seed", c.seed);
  f("data", c.data);
  f("out", c.out);
  f("image_size", c.image_size);
  f("optimizer", c.optimizer);
  f("lr", c.lr);
  f("batch", c.batch);
  f("epochs", c.epochs);
  f("temperature", c.temperature);
  f("alpha", c.alpha);
  f("feature_conversion", c.feature_conversion);
  f("teacher_optimizer", c.teacher_optimizer);
  f("teacher_lr", c.teacher_lr);
  f("teacher_batch", c.teacher_batch);
  f("teacher_epochs", c.teacher_epochs);
  f("se_reduction", c.se_reduction);
  f("closing_size", c.closing_size);
  f("bilateral_sigma_spatial", c.bilateral_sigma_spatial);
  f("bilateral_sigma_range", c.bilateral_sigma_range);
  f("blend_alpha", c.blend_alpha);
  f("unsharp_sigma", c.unsharp_sigma);
  f("unsharp_gain", c.unsharp_gain);
  f("augment", c.augment);
  f("rotation_deg", c.rotation_deg);
  f("shift_fraction", c.shift_fraction);
  f("shear_deg", c.shear_deg);
  f("horizontal_flip", c.horizontal_flip);
  f("per_class", c.per_class);
  f("synth_size", c.synth_size);
  f("smoke", c.smoke);
  f("max_steps", c.max_steps);
  f("teacher", c.teacher);
  f("model", c.model);
}

template <typename T>
void assign(const std::string& key, const nlohmann::json& v, T& target) {
  bool ok = false;
  if constexpr (std::is_same_v<T, bool>) {
    ok = v.is_boolean();
  } else if constexpr (std::is_integral_v<T>) {
    ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  } else if constexpr (std::is_floating_point_v<T>) {
    ok = v.is_number();
  } else {
    ok = v.is_string();
  }
  require(ok, ErrorKind::config, "config key '" + key + "' has the wrong type: " + v.dump());
  target = v.get<T>();
}

std::string fixed(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), ErrorKind::io, "cannot write " + path.string());
  f << text;
  require(f.good(), ErrorKind::io, "write failed for " + path.string());
}

fs::path out_dir(const RunConfig& config) {
  const fs::path out(config.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  require(!ec && fs::is_directory(out), ErrorKind::io, "cannot create output directory " + out.string());
  return out;
}

Tensor<float> stack_all(const data::Dataset& d) {
  std::vector<const Tensor<float>*> samples;
  for (const auto& img : d.images) samples.push_back(&img);
  return models::stack(samples);
}

nlohmann::json history_json(const train::History& h) {
  return {{"best_epoch", h.best_epoch},
          {"best_val_accuracy", h.best_val_accuracy},
          {"epochs_run", h.epochs.size()},
          {"steps", h.steps}};
}

void write_summary(const fs::path& path, const TrainSummary& s) {
  nlohmann::json j = history_json(s.history);
  j["parameters"] = s.parameters;
  j["test_accuracy"] = s.test.scalars.accuracy;
  j["test_mcc"] = s.test.scalars.mcc;
  j["test_auc"] = s.test.roc.auc;
  write_text(path, j.dump(2) + "\n");
}

void write_history(const fs::path& path, const train::History& h) {
  std::ostringstream csv;
  train::write_history_csv(h, csv);
  write_text(path, csv.str());
}

models::ModelGraph<float> load_matching(const fs::path& path, const RunConfig& config) {
  auto loaded = io::load(path);
  const auto& shape = loaded.model.input_shape();
  require(shape.size() == 3 && shape[1] == config.image_size && shape[2] == config.image_size, ErrorKind::config,
          path.string() + " expects " + std::to_string(shape.size() == 3 ? shape[1] : 0) + "x" +
              std::to_string(shape.size() == 3 ? shape[2] : 0) + " input but image_size is " +
              std::to_string(config.image_size));
  return std::move(loaded.model);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return q + "\"";
}

}  // namespace

nlohmann::json to_json(const RunConfig& config) {
  RunConfig copy = config;
  nlohmann::json j = nlohmann::json::object();
  visit(copy, [&j](const char* key, const auto& v) { j[key] = v; });
  return j;
}

RunConfig from_json(const nlohmann::json& j, RunConfig base) {
  require(j.is_object(), ErrorKind::config, "config must be a flat JSON object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    visit(base, [&](const char* name, auto& target) {
      if (key == name) {
        assign(key, value, target);
        known = true;
      }
    });
    require(known, ErrorKind::config, "unknown config key '" + key + "'");
  }
  return base;
}

RunConfig load_config_file(const fs::path& path, RunConfig base) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorKind::io, "cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, path.string() + ": " + e.what());
  }
  return from_json(j, std::move(base));
}

void validate(const RunConfig& c) {
  require(c.image_size >= 8 && c.image_size % 8 == 0, ErrorKind::config,
          "image_size must be a positive multiple of 8, got " + std::to_string(c.image_size));
  require(!c.out.empty(), ErrorKind::config, "out must not be empty");
  train::validate(student_training(c));
  train::validate(teacher_training(c));
  models::parse_feature_conversion(c.feature_conversion);
  require(c.se_reduction >= 1, ErrorKind::config, "se_reduction must be at least 1");
  require(c.closing_size % 2 == 1, ErrorKind::config, "closing_size must be odd");
  require(c.bilateral_sigma_spatial > 0 && c.bilateral_sigma_range > 0 && c.unsharp_sigma > 0, ErrorKind::config,
          "filter sigmas must be positive");
}

imgproc::PipelineConfig pipeline(const RunConfig& c) {
  imgproc::PipelineConfig p;
  p.closing.size = c.closing_size;
  p.bilateral = imgproc::BilateralParams::from_sigmas(c.bilateral_sigma_spatial, c.bilateral_sigma_range);
  p.blend.alpha = c.blend_alpha;
  p.unsharp.sigma = c.unsharp_sigma;
  p.unsharp.gain = c.unsharp_gain;
  p.output_width = c.image_size;
  p.output_height = c.image_size;
  return p;
}

namespace {

train::TrainConfig common_training(const RunConfig& c) {
  train::TrainConfig t;
  t.seed = c.seed;
  t.augment = c.augment;
  t.augmentation.rotation_deg = c.rotation_deg;
  t.augmentation.shift_fraction = c.shift_fraction;
  t.augmentation.shear_deg = c.shear_deg;
  t.augmentation.horizontal_flip = c.horizontal_flip;
  t.max_steps = c.max_steps;
  return t;
}

}  // namespace

train::TrainConfig teacher_training(const RunConfig& c) {
  train::TrainConfig t = common_training(c);
  t.optimizer = train::parse_optimizer(c.teacher_optimizer);
  t.learning_rate = c.teacher_lr;
  t.batch_size = c.teacher_batch;
  t.epochs = c.teacher_epochs;
  return t;
}

train::TrainConfig student_training(const RunConfig& c) {
  train::TrainConfig t = common_training(c);
  t.optimizer = train::parse_optimizer(c.optimizer);
  t.learning_rate = c.lr;
  t.batch_size = c.batch;
  t.epochs = c.epochs;
  t.temperature = c.temperature;
  t.alpha = c.alpha;
  return t;
}

fs::path teacher_path(const RunConfig& c) { return c.teacher.empty() ? fs::path(c.out) / "teacher.dfkd" : fs::path(c.teacher); }
fs::path model_path(const RunConfig& c) { return c.model.empty() ? fs::path(c.out) / "student.dfkd" : fs::path(c.model); }

void echo_config(const RunConfig& config, const std::string& command) {
  write_text(out_dir(config) / ("config_" + command + ".json"), to_json(config).dump(2) + "\n");
}

Splits load_splits(const RunConfig& config) {
  Splits s{ingest(config), {}, {}, {}};
  const auto p = pipeline(config);
  const std::size_t threads = data::default_threads();
  s.train = data::load_split(s.manifest, data::Split::train, p, threads);
  s.val = data::load_split(s.manifest, data::Split::val, p, threads);
  s.test = data::load_split(s.manifest, data::Split::test, p, threads);
  return s;
}

metrics::MetricsReport evaluate_model(models::ModelGraph<float>& model, const data::Dataset& dataset) {
  require(dataset.size() > 0, ErrorKind::size, "cannot evaluate on an empty split");
  return metrics::report(dataset.labels, model.predict(stack_all(dataset)));
}

data::SynthSummary synth_data(const RunConfig& config) {
  return data::write_synth_corpus(out_dir(config), config.per_class, config.synth_size, config.seed);
}

data::Manifest ingest(const RunConfig& config) {
  require(!config.data.empty(), ErrorKind::usage, "--data is required");
  const fs::path out = out_dir(config);
  data::Manifest m = data::ingest(config.data, config.seed);
  std::ostringstream csv;
  data::write_manifest_csv(m, csv);
  write_text(out / "manifest.csv", csv.str());
  nlohmann::json j = {{"benign", m.count(data::kBenign)},
                      {"malignant", m.count(data::kMalignant)},
                      {"train", m.in_split(data::Split::train).size()},
                      {"val", m.in_split(data::Split::val).size()},
                      {"test", m.in_split(data::Split::test).size()},
                      {"warnings", m.warnings}};
  write_text(out / "ingest.json", j.dump(2) + "\n");
  return m;
}

void preprocess(const RunConfig& config, const std::vector<fs::path>& inputs) {
  const fs::path out = out_dir(config);
  const auto p = pipeline(config);
  const auto name = [](const char* stem, const imgproc::PixelRaster& img) {
    return std::string(stem) + (img.channels == 1 ? ".pgm" : ".ppm");
  };
  if (!inputs.empty()) {
    for (const auto& input : inputs) {
      const auto st = imgproc::run_pipeline(imgproc::read_image(input), p);
      const fs::path dir = out / input.stem();
      fs::create_directories(dir);
      imgproc::write_pnm(dir / name("1_closed", st.closed), st.closed);
      imgproc::write_pnm(dir / name("2_smoothed", st.smoothed), st.smoothed);
      imgproc::write_pnm(dir / name("3_gray", st.gray), st.gray);
      imgproc::write_pnm(dir / name("4_mask", st.mask), st.mask);
      imgproc::write_pnm(dir / name("5_highlighted", st.highlighted), st.highlighted);
      imgproc::write_pnm(dir / name("6_sharpened", st.sharpened), st.sharpened);
      imgproc::write_pnm(dir / name("7_resized", st.resized), st.resized);
      nlohmann::json otsu = {{"threshold", st.otsu.threshold},
                             {"degenerate", st.otsu.degenerate},
                             {"omega0", st.otsu.omega0},
                             {"omega1", st.otsu.omega1},
                             {"within_class_variance", st.otsu.within_class_variance}};
      write_text(dir / "otsu.json", otsu.dump(2) + "\n");
    }
    return;
  }
  const data::Manifest m = ingest(config);
  for (const auto& e : m.entries) {
    const auto st = imgproc::run_pipeline(imgproc::read_image(m.root / e.path), p);
    fs::path target = out / "preprocessed" / e.path;
    target.replace_extension(st.resized.channels == 1 ? ".pgm" : ".ppm");
    fs::create_directories(target.parent_path());
    imgproc::write_pnm(target, st.resized);
  }
}

TrainSummary train_teacher(const RunConfig& config) {
  validate(config);
  const fs::path out = out_dir(config);
  Splits s = load_splits(config);
  models::TeacherConfig tcfg;
  tcfg.input_size = config.image_size;
  tcfg.se_reduction = config.se_reduction;
  auto teacher = models::build_teacher_desk<float>(tcfg, config.seed);
  TrainSummary summary;
  summary.history = train::train_teacher(teacher, s.train, s.val, teacher_training(config));
  summary.test = evaluate_model(teacher, s.test);
  summary.parameters = teacher.count_params().total;
  io::save(teacher, out / "teacher.dfkd");
  write_history(out / "teacher_history.csv", summary.history);
  write_summary(out / "teacher_summary.json", summary);
  return summary;
}

TrainSummary distill(const RunConfig& config) {
  validate(config);
  const fs::path out = out_dir(config);
  auto teacher = load_matching(teacher_path(config), config);
  Splits s = load_splits(config);
  models::StudentConfig scfg;
  scfg.input_size = config.image_size;
  scfg.feature = models::parse_feature_conversion(config.feature_conversion);
  auto student = models::build_student<float>(scfg, config.seed);
  TrainSummary summary;
  summary.history = train::distill_student(student, teacher, s.train, s.val, student_training(config));
  summary.test = evaluate_model(student, s.test);
  summary.parameters = student.count_params().total;
  io::save(student, out / "student.dfkd");
  write_history(out / "student_history.csv", summary.history);
  write_summary(out / "student_summary.json", summary);
  return summary;
}

std::vector<train::AblationRow> ablate(const RunConfig& config) {
  validate(config);
  const fs::path out = out_dir(config);
  auto teacher = load_matching(teacher_path(config), config);
  Splits s = load_splits(config);
  train::AblationOptions options;
  options.input_size = config.image_size;
  options.max_steps = config.max_steps;
  if (config.smoke) {
    options.epoch_cap = 1;
    if (!options.max_steps) options.max_steps = 2;
  }
  const auto rows = train::run_ablation(train::full_grid(), teacher, s.train, s.val, s.test, student_training(config),
                                        models::parse_feature_conversion(config.feature_conversion), options);
  std::ostringstream csv, errors;
  train::write_ablation_csv(rows, csv);
  errors << "axis,value,error\n";
  for (const auto& r : rows) {
    if (!r.error.empty()) errors << r.axis << ',' << r.value << ',' << csv_field(r.error) << '\n';
  }
  write_text(out / "ablation.csv", csv.str());
  write_text(out / "ablation_errors.csv", errors.str());
  return rows;
}

io::QuantizationReport quantize(const RunConfig& config) {
  validate(config);
  const fs::path out = out_dir(config);
  const fs::path source = model_path(config);
  auto model = load_matching(source, config);
  Splits s = load_splits(config);
  const auto f32 = io::encode(model, io::DType::f32);
  const double before = evaluate_model(model, s.test).scalars.accuracy;
  io::QuantizationReport report = io::quantize_f16(model);
  report.accuracy_before = before;
  report.accuracy_after = evaluate_model(model, s.test).scalars.accuracy;
  const auto f16 = io::encode(model, io::DType::f16);
  const fs::path target = out / (source.stem().string() + "_f16.dfkd");
  {
    std::ofstream f(target, std::ios::binary | std::ios::trunc);
    require(f.good(), ErrorKind::io, "cannot write " + target.string());
    f.write(reinterpret_cast<const char*>(f16.data()), static_cast<std::streamsize>(f16.size()));
    require(f.good(), ErrorKind::io, "write failed for " + target.string());
  }
  report.payload_bytes_before = io::size_report(f32).payload_bytes;
  report.payload_bytes_after = io::size_report(f16).payload_bytes;

  std::ostringstream sizes;
  io::write_size_csv({{source.filename().string(), io::size_report(f32)}, {target.filename().string(), io::size_report(f16)}},
                     sizes);
  write_text(out / "sizes.csv", sizes.str());

  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : report.tensors) {
    tensors.push_back({{"name", t.name},
                       {"max_abs_error", t.max_abs_error},
                       {"max_rel_error", t.max_rel_error},
                       {"clamped", t.clamped}});
  }
  nlohmann::json j = {{"source", source.filename().string()},
                      {"output", target.filename().string()},
                      {"payload_bytes_before", report.payload_bytes_before},
                      {"payload_bytes_after", report.payload_bytes_after},
                      {"clamped", report.clamped},
                      {"test_accuracy_before", report.accuracy_before},
                      {"test_accuracy_after", report.accuracy_after},
                      {"accuracy_drop_points", 100.0 * (report.accuracy_before - report.accuracy_after)},
                      {"tensors", tensors}};
  write_text(out / "quantization.json", j.dump(2) + "\n");
  return report;
}

std::vector<std::pair<std::string, metrics::MetricsReport>> evaluate(const RunConfig& config,
                                                                     std::vector<fs::path> archives) {
  validate(config);
  const fs::path out = out_dir(config);
  if (archives.empty() && !config.model.empty()) archives.push_back(config.model);
  if (archives.empty()) {
    for (const char* name : {"teacher.dfkd", "student.dfkd", "student_f16.dfkd"}) {
      if (fs::exists(out / name)) archives.push_back(out / name);
    }
  }
  require(!archives.empty(), ErrorKind::usage, "no model archives to evaluate under " + out.string());
  Splits s = load_splits(config);
  std::vector<std::pair<std::string, metrics::MetricsReport>> results;
  std::ostringstream csv;
  for (const auto& path : archives) {
    auto model = load_matching(path, config);
    const std::string name = path.stem().string();
    const auto r = evaluate_model(model, s.test);
    metrics::write_report_csv(name, r, csv, results.empty());
    std::ostringstream roc;
    metrics::write_roc_csv(r.roc, roc);
    write_text(out / ("roc_" + name + ".csv"), roc.str());
    results.emplace_back(name, r);
  }
  write_text(out / "metrics.csv", csv.str());
  return results;
}

std::vector<Prediction> infer(const RunConfig& config, const std::vector<fs::path>& images) {
  validate(config);
  require(!images.empty(), ErrorKind::usage, "infer needs at least one image");
  const fs::path out = out_dir(config);
  auto model = load_matching(model_path(config), config);
  const auto p = pipeline(config);
  std::vector<Tensor<float>> tensors;
  for (const auto& path : images) tensors.push_back(imgproc::preprocess(imgproc::read_image(path), p));
  std::vector<const Tensor<float>*> samples;
  for (const auto& t : tensors) samples.push_back(&t);
  const Tensor<float> probs = model.predict(models::stack(samples));
  std::vector<Prediction> result;
  std::ostringstream csv;
  csv << "path,p_benign,p_malignant,prediction\n";
  for (std::size_t i = 0; i < images.size(); ++i) {
    Prediction pr{images[i].string(), probs.at(i, 0), probs.at(i, 1), 0};
    pr.label = pr.malignant > pr.benign ? data::kMalignant : data::kBenign;
    csv << csv_field(pr.path) << ',' << fixed(pr.benign, 6) << ',' << fixed(pr.malignant, 6) << ','
        << data::class_name(pr.label) << '\n';
    result.push_back(pr);
  }
  write_text(out / "predictions.csv", csv.str());
  return result;
}

}  // namespace distillforge::run
