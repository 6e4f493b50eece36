#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "distillforge/image_io.hpp"
#include "distillforge/run.hpp"

using namespace distillforge;

namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("distillforge_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return files;
}

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result cli(const std::string& args, const fs::path& scratch) {
  const fs::path out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  const std::string cmd =
      std::string(DISTILLFORGE_CLI) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  fs::remove(out);
  fs::remove(err);
  return r;
}

nlohmann::json echo(const fs::path& out, const std::string& command) {
  return nlohmann::json::parse(slurp(out / ("config_" + command + ".json")));
}

void expect_config_error(const nlohmann::json& j) {
  try {
    run::from_json(j);
    FAIL("expected a config error for " << j.dump());
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
  }
}

}  // namespace

TEST_CASE("run config JSON round trip and rejection") {
  run::RunConfig c;
  c.seed = 77;
  c.data = "somewhere";
  c.lr = 0.125;
  c.batch = 16;
  c.smoke = true;
  c.feature_conversion = "flatten";
  const nlohmann::json j = run::to_json(c);
  CHECK(run::to_json(run::from_json(j)).dump() == j.dump());
  CHECK(run::from_json({{"epochs", 3}}).epochs == 3);
  CHECK(run::from_json({{"temperature", 2}}).temperature == 2.0);

  expect_config_error({{"epochz", 3}});
  expect_config_error({{"epochs", "3"}});
  expect_config_error({{"epochs", -1}});
  expect_config_error({{"epochs", 1.5}});
  expect_config_error({{"augment", 1}});
  expect_config_error({{"data", 5}});
  expect_config_error(nlohmann::json::array({1, 2}));

  run::RunConfig bad;
  bad.image_size = 12;
  CHECK_THROWS_AS(run::validate(bad), Error);
  bad = {};
  bad.optimizer = "sgd";
  CHECK_THROWS_AS(run::validate(bad), Error);
  bad = {};
  bad.alpha = 1.5;
  CHECK_THROWS_AS(run::validate(bad), Error);
  bad = {};
  bad.feature_conversion = "pool";
  CHECK_THROWS_AS(run::validate(bad), Error);
}

TEST_CASE("flags override the config file, which overrides defaults") {
  const fs::path dir = scratch_dir("precedence");
  {
    std::ofstream f(dir / "run.json");
    f << R"({"seed": 9, "per_class": 12, "epochs": 3, "lr": 0.01})";
  }
  const fs::path out = dir / "corpus";
  auto r = cli("synth-data --config " + (dir / "run.json").string() + " --seed 4 --image-size 16 --out " +
                   out.string(),
               dir);
  REQUIRE(r.code == 0);
  auto j = echo(out, "synth-data");
  CHECK(j["seed"] == 4);
  CHECK(j["per_class"] == 12);
  CHECK(j["synth_size"] == 16);
  CHECK(j["epochs"] == 3);
  CHECK(j["batch"] == 64);
  CHECK(fs::exists(out / "malignant" / "0011.ppm"));
  CHECK_FALSE(fs::exists(out / "malignant" / "0012.ppm"));

  // training flags address the teacher fields for train-teacher
  const fs::path run_out = dir / "run";
  r = cli("train-teacher --config " + (dir / "run.json").string() + " --data " + out.string() + " --out " +
              run_out.string() + " --image-size 16 --epochs 0 --lr 0.5 --batch 8 --optimizer nadam",
          dir);
  REQUIRE(r.code == 0);
  j = echo(run_out, "train-teacher");
  CHECK(j["teacher_epochs"] == 0);
  CHECK(j["teacher_lr"] == 0.5);
  CHECK(j["teacher_batch"] == 8);
  CHECK(j["teacher_optimizer"] == "nadam");
  CHECK(j["epochs"] == 3);
  CHECK(j["lr"] == 0.01);

  // the echo alone reproduces the run
  const std::string archive = slurp(run_out / "teacher.dfkd");
  r = cli("train-teacher --config " + (run_out / "config_train-teacher.json").string(), dir);
  REQUIRE(r.code == 0);
  CHECK(slurp(run_out / "teacher.dfkd") == archive);
  fs::remove_all(dir);
}

TEST_CASE("failures print one machine-parsable line and exit nonzero") {
  const fs::path dir = scratch_dir("errors");
  const auto expect = [&dir](const std::string& args, int code, const std::string& kind) {
    INFO(args);
    const auto r = cli(args, dir);
    CHECK(r.code == code);
    CHECK(r.err.rfind("error: " + kind + ": ", 0) == 0);
    CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
    CHECK(r.out.empty());
  };
  {
    std::ofstream f(dir / "bad.json");
    f << R"({"epochz": 1})";
  }
  {
    std::ofstream f(dir / "broken.json");
    f << "{";
  }
  const std::string o = " --out " + (dir / "o").string();
  expect("distill --bogus", 2, "usage");
  expect("", 2, "usage");
  expect("ingest --data " + (dir / "nowhere").string() + o, 1, "layout");
  expect("distill --config " + (dir / "bad.json").string(), 1, "config");
  expect("distill --config " + (dir / "broken.json").string(), 1, "config");
  expect("distill --data " + dir.string() + o + " --lr -1", 1, "config");
  expect("distill --data " + dir.string() + o + " --image-size 20", 1, "config");
  expect("evaluate --data " + dir.string() + " --out " + (dir / "empty").string(), 1, "usage");
  expect("infer" + o + " --model " + (dir / "missing.dfkd").string() + " x.ppm", 1, "io");
  fs::remove_all(dir);
}

TEST_CASE("preprocess reproduces the golden stage outputs") {
  const fs::path golden = fs::path(DISTILLFORGE_GOLDEN) / "lesion";
  const fs::path dir = scratch_dir("golden");
  const auto r = cli("preprocess --out " + dir.string() + " " + (fs::path(DISTILLFORGE_GOLDEN) / "lesion.ppm").string(),
                     dir);
  REQUIRE(r.code == 0);
  const char* stages[] = {"1_closed.ppm",      "2_smoothed.ppm",  "3_gray.pgm",   "4_mask.pgm",
                          "5_highlighted.ppm", "6_sharpened.ppm", "7_resized.ppm"};
  for (const char* stage : stages) {
    INFO(stage);
    CHECK(slurp(dir / "lesion" / stage) == slurp(golden / stage));
  }
  const int threshold = std::stoi(slurp(golden / "threshold.txt"));
  CHECK(nlohmann::json::parse(slurp(dir / "lesion" / "otsu.json"))["threshold"] == threshold);

  const auto st = imgproc::run_pipeline(imgproc::read_image(fs::path(DISTILLFORGE_GOLDEN) / "lesion.ppm"),
                                        imgproc::PipelineConfig{});
  CHECK(st.otsu.threshold == threshold);
  CHECK(st.resized == imgproc::read_image(golden / "7_resized.ppm"));
  fs::remove_all(dir);
}

TEST_CASE("full command chain, idempotence and untouched inputs") {
  const fs::path dir = scratch_dir("chain");
  const fs::path corpus = dir / "corpus", out = dir / "run";
  REQUIRE(cli("synth-data --per-class 10 --image-size 32 --seed 3 --out " + corpus.string(), dir).code == 0);
  const auto corpus_before = tree(corpus);
  CHECK(corpus_before.size() == 22);  // 20 images, strokes.csv, config echo

  const std::string common = " --data " + corpus.string() + " --out " + out.string() + " --image-size 32 --seed 3";
  const std::vector<std::string> chain = {
      "ingest" + common,
      "preprocess" + common,
      "train-teacher" + common + " --epochs 1 --batch 8",
      "distill" + common + " --epochs 1 --batch 8",
      "quantize" + common,
      "evaluate" + common,
      "infer" + common + " " + (corpus / "benign" / "0000.ppm").string() + " " +
          (corpus / "malignant" / "0000.ppm").string(),
  };
  for (const auto& cmd : chain) {
    INFO(cmd);
    const auto r = cli(cmd, dir);
    CHECK(r.code == 0);
    CHECK(r.err.empty());
  }
  for (const char* name : {"manifest.csv", "ingest.json", "teacher.dfkd", "teacher_history.csv", "teacher_summary.json",
                           "student.dfkd", "student_history.csv", "student_summary.json", "student_f16.dfkd",
                           "quantization.json", "sizes.csv", "metrics.csv", "roc_teacher.csv", "roc_student.csv",
                           "roc_student_f16.csv", "predictions.csv", "preprocessed/benign/0000.ppm"}) {
    INFO(name);
    CHECK(fs::exists(out / name));
  }
  CHECK(slurp(out / "sizes.csv") ==
        "archive,dtype,tensors,header_bytes,payload_bytes,total_bytes\n"
        "student.dfkd,f32,14,918,653448,654366\n"
        "student_f16.dfkd,f16,14,918,326724,327642\n");
  std::istringstream metrics(slurp(out / "metrics.csv"));
  std::string line;
  std::getline(metrics, line);
  CHECK(line == "model,accuracy,precision,recall,f1,mcc,auc,tp,tn,fp,fn");
  std::size_t rows = 0;
  while (std::getline(metrics, line)) ++rows;
  CHECK(rows == 3);
  const auto q = nlohmann::json::parse(slurp(out / "quantization.json"));
  CHECK(q["payload_bytes_after"].get<std::uint64_t>() * 2 == q["payload_bytes_before"].get<std::uint64_t>());

  const auto first = tree(out);
  for (const auto& cmd : chain) REQUIRE(cli(cmd, dir).code == 0);
  const auto second = tree(out);
  REQUIRE(first.size() == second.size());
  for (const auto& [name, bytes] : first) {
    INFO(name);
    CHECK(second.at(name) == bytes);
  }
  CHECK(tree(corpus) == corpus_before);
  fs::remove_all(dir);
}

TEST_CASE("distill with zero epochs keeps the initial student") {
  const fs::path dir = scratch_dir("zero");
  const fs::path corpus = dir / "corpus", out = dir / "run";
  REQUIRE(cli("synth-data --per-class 10 --image-size 16 --out " + corpus.string(), dir).code == 0);
  const std::string common = " --data " + corpus.string() + " --out " + out.string() + " --image-size 16 --seed 8";
  REQUIRE(cli("train-teacher" + common + " --epochs 0", dir).code == 0);
  REQUIRE(cli("distill" + common + " --epochs 0 --feature-conversion flatten", dir).code == 0);
  models::StudentConfig scfg;
  scfg.input_size = 16;
  scfg.feature = models::FeatureConversion::flatten;
  auto fresh = models::build_student<float>(scfg, 8);
  const auto expected = io::encode(fresh, io::DType::f32);
  const std::string archive = slurp(out / "student.dfkd");
  CHECK(archive == std::string(expected.begin(), expected.end()));
  fs::remove_all(dir);
}

TEST_CASE("smoke ablation writes the full grid") {
  const fs::path dir = scratch_dir("ablate");
  const fs::path corpus = dir / "corpus", out = dir / "run";
  REQUIRE(cli("synth-data --per-class 10 --image-size 16 --out " + corpus.string(), dir).code == 0);
  const std::string common = " --data " + corpus.string() + " --out " + out.string() + " --image-size 16";
  REQUIRE(cli("train-teacher" + common + " --epochs 1 --batch 8", dir).code == 0);
  const auto r = cli("ablate" + common + " --smoke --max-steps 1", dir);
  REQUIRE(r.code == 0);
  std::istringstream csv(slurp(out / "ablation.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "axis,value,accuracy,precision,recall,f1,mcc");
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 6);
  }
  CHECK(rows == 24);
  CHECK(slurp(out / "ablation_errors.csv") == "axis,value,error\n");
  CHECK(echo(out, "ablate")["smoke"] == true);
  fs::remove_all(dir);
}
