#include <doctest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "distillforge/model_io.hpp"

using namespace distillforge;
using namespace distillforge::io;

namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("distillforge_io_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// decodes binary16 from its fields with ldexp, independent of half_to_float
double decode_half(std::uint16_t bits) {
  const int exponent = (bits >> 10) & 0x1f;
  const int mantissa = bits & 0x3ff;
  const double sign = (bits & 0x8000) ? -1.0 : 1.0;
  if (exponent == 0) return sign * std::ldexp(mantissa, -24);
  return sign * std::ldexp(1024 + mantissa, exponent - 25);
}

// the nearest finite binary16 to |x| by binary search over all finite codes, ties to even
std::uint16_t nearest_half(float x) {
  static const std::vector<double> table = [] {
    std::vector<double> t;
    for (std::uint32_t b = 0; b <= 0x7bff; ++b) t.push_back(decode_half(static_cast<std::uint16_t>(b)));
    return t;
  }();
  const double a = std::abs(static_cast<double>(x));
  const auto hi = static_cast<std::size_t>(std::lower_bound(table.begin(), table.end(), a) - table.begin());
  std::uint16_t code;
  if (hi == table.size()) {
    code = 0x7bff;
  } else if (hi == 0 || table[hi] == a) {
    code = static_cast<std::uint16_t>(hi);
  } else {
    const double up = table[hi] - a, down = a - table[hi - 1];
    if (up < down) {
      code = static_cast<std::uint16_t>(hi);
    } else if (down < up) {
      code = static_cast<std::uint16_t>(hi - 1);
    } else {
      code = static_cast<std::uint16_t>(hi % 2 == 0 ? hi : hi - 1);
    }
  }
  return static_cast<std::uint16_t>(code | (std::signbit(x) ? 0x8000 : 0));
}

template <typename Fn>
void expect_format_error(Fn&& fn, const std::string& mentions = "") {
  try {
    fn();
    FAIL("expected a format error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::format);
    if (!mentions.empty()) CHECK(std::string(e.what()).find(mentions) != std::string::npos);
  }
}

std::size_t payload_start(const std::vector<std::uint8_t>& bytes) { return bytes.size() - size_report(bytes).payload_bytes; }

}  // namespace

TEST_CASE("binary16 examples") {
  CHECK(float_to_half(1.0f) == 0x3c00);
  CHECK(round_to_half(1.0f) == 1.0f);
  CHECK(static_cast<double>(round_to_half(0.1f)) == 0.0999755859375);
  CHECK(round_to_half(65504.0f) == 65504.0f);
  CHECK(round_to_half(-2.0f) == -2.0f);
  CHECK(float_to_half(-0.0f) == 0x8000);
  CHECK(float_to_half(std::ldexp(1.0f, -24)) == 0x0001);
  CHECK(float_to_half(std::ldexp(1.0f, -25)) == 0x0000);         // tie, rounds to even zero
  CHECK(float_to_half(std::ldexp(3.0f, -25)) == 0x0002);         // tie, rounds up to even
  CHECK(float_to_half(1.0f + std::ldexp(1.0f, -11)) == 0x3c00);  // tie between 1 and 1 + 2^-10
  CHECK(float_to_half(1.0f + std::ldexp(3.0f, -11)) == 0x3c02);

  bool clamped = false;
  CHECK(half_to_float(float_to_half(1e6f, &clamped)) == 65504.0f);
  CHECK(clamped);
  clamped = false;
  CHECK(half_to_float(float_to_half(-1e6f, &clamped)) == -65504.0f);
  CHECK(clamped);
  clamped = false;
  float_to_half(65504.0f, &clamped);
  CHECK_FALSE(clamped);

  try {
    float_to_half(std::nanf(""));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::numeric);
  }
}

TEST_CASE("every binary16 code decodes to the ldexp oracle and re-encodes to itself") {
  for (std::uint32_t b = 0; b < 0x10000; ++b) {
    const auto bits = static_cast<std::uint16_t>(b);
    if (((bits >> 10) & 0x1f) == 0x1f) continue;  // inf and nan
    const float f = half_to_float(bits);
    CHECK(static_cast<double>(f) == decode_half(bits));
    CHECK(float_to_half(f) == bits);
  }
  CHECK(std::isinf(half_to_float(0x7c00)));
  CHECK(std::isnan(half_to_float(0x7e00)));
}

TEST_CASE("binary16 rounding against a bit-level oracle over 10^6 floats") {
  Rng rng(41);
  std::size_t mismatches = 0, bound_violations = 0, not_idempotent = 0;
  for (int i = 0; i < 1000000; ++i) {
    float x;
    switch (i % 4) {
      case 0: {  // arbitrary bit patterns in range
        const auto bits = static_cast<std::uint32_t>(rng.below(std::uint64_t{1} << 32));
        x = std::bit_cast<float>(bits);
        if (!std::isfinite(x) || std::abs(x) > 65504.0f) x = std::ldexp(static_cast<float>(rng.uniform()), 15);
        break;
      }
      case 1:
        x = static_cast<float>(rng.uniform(-1.0, 1.0));
        break;
      case 2:  // around the subnormal range
        x = static_cast<float>(rng.uniform(-1.0, 1.0) * std::ldexp(1.0, -13));
        break;
      default:  // exact midpoints between neighbouring halves
        x = static_cast<float>(
            (decode_half(static_cast<std::uint16_t>(rng.below(0x7bff))) +
             decode_half(static_cast<std::uint16_t>(rng.below(0x7bff) + 1))) * 0.5);
        break;
    }
    const std::uint16_t h = float_to_half(x);
    mismatches += h != nearest_half(x);
    const float q = half_to_float(h);
    const double err = std::abs(static_cast<double>(q) - static_cast<double>(x));
    bound_violations += err > std::ldexp(1.0, -11) * std::max(std::abs(static_cast<double>(x)), std::ldexp(1.0, -14));
    not_idempotent += round_to_half(q) != q;
  }
  CHECK(mismatches == 0);
  CHECK(bound_violations == 0);
  CHECK(not_idempotent == 0);
}

TEST_CASE("student archive payload sizes") {
  auto student = models::build_student<float>({}, 1);
  const auto f32 = encode(student, DType::f32);
  const auto f16 = encode(student, DType::f16);
  const SizeReport a = size_report(f32), b = size_report(f16);
  CHECK(a.payload_bytes == 653448);
  CHECK(b.payload_bytes == 326724);
  CHECK(a.header_bytes == b.header_bytes);
  CHECK(a.total_bytes == f32.size());
  CHECK(a.tensors == 14);
  CHECK(b.dtype == DType::f16);

  std::ostringstream csv;
  write_size_csv({{"student_f32", a}, {"student_f16", b}}, csv);
  CHECK(csv.str().rfind("archive,dtype,tensors,header_bytes,payload_bytes,total_bytes\nstudent_f32,f32,14,", 0) == 0);
  CHECK(describe(b).find("326724") != std::string::npos);
}

TEST_CASE("payload halving holds for every model") {
  for (std::size_t size : {8, 16, 32}) {
    auto s = models::build_student<float>({size, models::FeatureConversion::flatten}, 2);
    CHECK(size_report(encode(s, DType::f16)).payload_bytes * 2 == size_report(encode(s, DType::f32)).payload_bytes);
  }
  models::TeacherConfig cfg;
  cfg.input_size = 16;
  auto t = models::build_teacher_desk<float>(cfg, 2);
  CHECK(size_report(encode(t, DType::f16)).payload_bytes * 2 == size_report(encode(t, DType::f32)).payload_bytes);
}

TEST_CASE("empty model has an empty payload") {
  models::ModelGraph<float> empty({"empty", nlohmann::json::object()}, {3, 8, 8},
                                  std::make_unique<nn::Sequential<float>>("empty"));
  const auto bytes = encode(empty, DType::f32);
  const SizeReport r = size_report(bytes);
  CHECK(r.payload_bytes == 0);
  CHECK(r.tensors == 0);
  CHECK(r.total_bytes == bytes.size());
}

TEST_CASE("save, load and save again is byte-identical") {
  const fs::path dir = scratch_dir("roundtrip");
  models::TeacherConfig cfg;
  cfg.input_size = 16;
  auto teacher = models::build_teacher_desk<float>(cfg, 3);
  // move the batch-norm buffers off their initial values
  Rng rng(4);
  Tensor<float> x({4, 3, 16, 16});
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform());
  teacher.set_mode(nn::Mode::train);
  {
    Tape<float> tape;
    Rng drop(1);
    teacher.forward(tape, tape.constant(x), &drop);
  }
  teacher.set_mode(nn::Mode::infer);

  for (auto dtype : {DType::f32, DType::f16}) {
    const fs::path first = dir / ("a_" + to_string(dtype) + ".dfkd");
    const fs::path second = dir / ("b_" + to_string(dtype) + ".dfkd");
    save(teacher, first, dtype);
    LoadedModel loaded = load(first);
    CHECK(loaded.dtype == dtype);
    save(loaded.model, second, dtype);
    CHECK(read_file(first) == read_file(second));
    CHECK(size_report(read_file(first)).total_bytes == fs::file_size(first));
    if (dtype == DType::f32) {
      CHECK(loaded.model.snapshot() == teacher.snapshot());
      CHECK(loaded.model.predict(x) == teacher.predict(x));
    } else {
      const auto a = loaded.model.snapshot(), b = teacher.snapshot();
      for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t k = 0; k < a[i].numel(); ++k) CHECK(a[i][k] == round_to_half(b[i][k]));
      }
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("corrupt archives are format errors") {
  auto student = models::build_student<float>({16}, 5);
  const auto good = encode(student, DType::f32);
  CHECK_NOTHROW(decode(good));

  // every truncation inside the header, and a sample inside the payload
  const std::size_t header = payload_start(good);
  for (std::size_t cut = 0; cut < good.size(); cut += cut < header + 16 ? 1 : 4099) {
    const std::vector<std::uint8_t> prefix(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
    expect_format_error([&] { decode(prefix); });
  }

  auto bad = good;
  bad[0] = 'X';
  expect_format_error([&] { decode(bad); }, "magic");
  bad = good;
  bad[4] = 2;
  expect_format_error([&] { decode(bad); }, "version");
  bad = good;
  bad[6] = 1;
  expect_format_error([&] { decode(bad); }, "reserved");

  // flip one character of the config JSON: either invalid JSON or a digest mismatch
  const std::uint32_t kind_len = good[8] | good[9] << 8 | good[10] << 16 | good[11] << 24;
  const std::size_t config_at = 12 + kind_len + 4;
  bad = good;
  const std::string config(bad.begin() + static_cast<std::ptrdiff_t>(config_at),
                           bad.begin() + static_cast<std::ptrdiff_t>(config_at + 20));
  const auto digit = config.find_first_of("0123456789");
  REQUIRE(digit != std::string::npos);
  bad[config_at + digit] = bad[config_at + digit] == '9' ? '8' : static_cast<std::uint8_t>(bad[config_at + digit] + 1);
  expect_format_error([&] { decode(bad); }, "digest");

  auto longer = good;
  longer.push_back(0);
  expect_format_error([&] { decode(longer); }, "payload");

  const fs::path dir = scratch_dir("corrupt");
  {
    std::ofstream f(dir / "half.dfkd", std::ios::binary);
    f.write(reinterpret_cast<const char*>(good.data()), static_cast<std::streamsize>(good.size() / 2));
  }
  expect_format_error([&] { load(dir / "half.dfkd"); }, "half.dfkd");
  try {
    load(dir / "missing.dfkd");
    FAIL("expected an io error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::io);
  }
  fs::remove_all(dir);
}

TEST_CASE("quantize_f16 rounds in place and reports errors") {
  auto student = models::build_student<float>({16}, 6);
  const auto before = student.snapshot();
  // plant one out-of-range weight
  student.parameters().front().second->value()[0] = 1e6f;
  const auto planted = student.snapshot();
  const QuantizationReport r = quantize_f16(student);
  CHECK(r.clamped == 1);
  CHECK(r.payload_bytes_after * 2 == r.payload_bytes_before);
  CHECK(r.payload_bytes_before == 653448);
  REQUIRE(r.tensors.size() == before.size());
  CHECK(r.tensors.front().clamped == 1);

  const auto after = student.snapshot();
  for (std::size_t i = 0; i < after.size(); ++i) {
    double worst = 0.0;
    for (std::size_t k = 0; k < after[i].numel(); ++k) {
      const float expect = half_to_float(float_to_half(planted[i][k]));
      CHECK(after[i][k] == expect);
      if (i == 0 && k == 0) continue;
      const double w = planted[i][k];
      const double err = std::abs(static_cast<double>(after[i][k]) - w);
      CHECK(err <= std::ldexp(1.0, -11) * std::max(std::abs(w), std::ldexp(1.0, -14)));
      worst = std::max(worst, err);
    }
    if (i > 0) CHECK(r.tensors[i].max_abs_error == worst);
    CHECK(std::isfinite(r.tensors[i].max_rel_error));
  }
  // quantized weights survive an f16 archive exactly
  CHECK(decode(encode(student, DType::f16)).model.snapshot() == after);
  // and quantizing twice changes nothing
  const QuantizationReport again = quantize_f16(student);
  CHECK(student.snapshot() == after);
  for (const auto& t : again.tensors) CHECK(t.max_abs_error == 0.0);
}
