#include "distillforge/model_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

namespace distillforge::io {
namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str32(const std::string& s) {
    le<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf(b) {}
  void need(std::size_t n, const std::string& field) {
    require(n <= buf.size() - pos, ErrorKind::format, "archive truncated while reading " + field);
  }
  template <typename U>
  U le(const std::string& field) {
    need(sizeof(U), field);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(buf[pos + i]) << (8 * i));
    pos += sizeof(U);
    return v;
  }
  std::string str(std::size_t n, const std::string& field) {
    need(n, field);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
};

std::size_t width(DType d) { return d == DType::f16 ? 2 : 4; }

}  // namespace

std::string to_string(DType dtype) { return dtype == DType::f16 ? "f16" : "f32"; }

std::uint16_t float_to_half(float value, bool* clamped) {
  require(std::isfinite(value), ErrorKind::numeric, "cannot convert a non-finite value to f16");
  const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
  const auto sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::uint32_t abs = x & 0x7fffffffu;
  if (clamped) *clamped = false;
  if (std::fabs(value) > 65504.0f) {
    if (clamped) *clamped = true;
    return static_cast<std::uint16_t>(sign | 0x7bffu);
  }
  const int e = static_cast<int>(abs >> 23) - 127;
  const std::uint32_t mant = abs & 0x7fffffu;
  if (e >= -14) {
    std::uint32_t h = (static_cast<std::uint32_t>(e + 15) << 10) | (mant >> 13);
    const std::uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;  // a carry moves into the exponent correctly
    return static_cast<std::uint16_t>(sign | h);
  }
  if (abs < 0x00800000u) return sign;  // float subnormals are far below the f16 range
  // f16 subnormal: value / 2^-24 rounded to an integer
  const std::uint64_t full = mant | 0x800000u;
  const int shift = 13 + (-14 - e);
  if (shift > 40) return sign;
  const std::uint64_t h = full >> shift;
  const std::uint64_t rem = full & ((std::uint64_t{1} << shift) - 1);
  const std::uint64_t half = std::uint64_t{1} << (shift - 1);
  std::uint64_t r = h;
  if (rem > half || (rem == half && (h & 1u))) ++r;
  return static_cast<std::uint16_t>(sign | r);
}

float half_to_float(std::uint16_t bits) {
  const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
  const std::uint32_t exp = (bits >> 10) & 0x1fu;
  const std::uint32_t mant = bits & 0x3ffu;
  if (exp == 0) {
    const float v = std::ldexp(static_cast<float>(mant), -24);
    return sign ? -v : v;
  }
  if (exp == 31) return std::bit_cast<float>(sign | 0x7f800000u | (mant << 13));
  return std::bit_cast<float>(sign | ((exp + 112) << 23) | (mant << 13));
}

std::vector<std::uint8_t> encode(models::ModelGraph<float>& model, DType dtype) {
  const auto& params = model.parameters();
  const std::string config = model.spec().config.dump();

  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint16_t>(kFormatVersion);
  w.le<std::uint16_t>(0);
  w.str32(model.spec().kind);
  w.str32(config);
  w.le<std::uint64_t>(model.spec().digest());
  w.le<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, p] : params) {
    const Tensor<float>& v = p->value();
    require(name.size() < 65536, ErrorKind::format, "parameter name too long: " + name);
    w.le<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(dtype));
    w.le<std::uint8_t>(static_cast<std::uint8_t>(v.rank()));
    for (std::size_t d : v.shape()) w.le<std::uint64_t>(d);
    const std::uint64_t nbytes = v.numel() * width(dtype);
    w.le<std::uint64_t>(offset);
    w.le<std::uint64_t>(nbytes);
    offset += nbytes;
  }
  w.le<std::uint64_t>(offset);
  for (const auto& [name, p] : params) {
    for (float x : p->value().values()) {
      require(std::isfinite(x), ErrorKind::numeric, "parameter '" + name + "' holds a non-finite value");
      if (dtype == DType::f16) {
        w.le<std::uint16_t>(float_to_half(x));
      } else {
        w.le<std::uint32_t>(std::bit_cast<std::uint32_t>(x));
      }
    }
  }
  return std::move(w.out);
}

void save(models::ModelGraph<float>& model, const std::filesystem::path& path, DType dtype) {
  const auto bytes = encode(model, dtype);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), ErrorKind::io, "cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(f.good(), ErrorKind::io, "failed writing " + path.string());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

ArchiveHeader read_header(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  ArchiveHeader h;
  r.need(4, "magic");
  require(std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorKind::format, "bad magic: not a DFKD archive");
  r.pos = 4;
  h.version = r.le<std::uint16_t>("version");
  require(h.version == kFormatVersion, ErrorKind::format,
          "unsupported version " + std::to_string(h.version) + " (expected " + std::to_string(kFormatVersion) + ")");
  require(r.le<std::uint16_t>("reserved") == 0, ErrorKind::format, "reserved field must be zero");
  h.spec.kind = r.str(r.le<std::uint32_t>("architecture length"), "architecture");
  const std::string config = r.str(r.le<std::uint32_t>("config length"), "config");
  try {
    h.spec.config = nlohmann::json::parse(config);
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorKind::format, "config is not valid JSON");
  }
  h.digest = r.le<std::uint64_t>("digest");
  require(h.digest == h.spec.digest(), ErrorKind::format, "config digest mismatch");
  const std::uint32_t count = r.le<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string field = "tensor[" + std::to_string(i) + "]";
    TensorEntry e;
    e.name = r.str(r.le<std::uint16_t>(field + ".name length"), field + ".name");
    const auto dtype = r.le<std::uint8_t>(field + ".dtype");
    require(dtype <= 1, ErrorKind::format, field + ".dtype: unknown code " + std::to_string(dtype));
    e.dtype = static_cast<DType>(dtype);
    const auto rank = r.le<std::uint8_t>(field + ".rank");
    std::uint64_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const auto dim = r.le<std::uint64_t>(field + ".shape");
      require(dim > 0 && dim < (std::uint64_t{1} << 32), ErrorKind::format, field + ".shape: invalid extent");
      numel *= dim;
      require(numel < (std::uint64_t{1} << 40), ErrorKind::format, field + ".shape: too large");
      e.shape.push_back(static_cast<std::size_t>(dim));
    }
    e.offset = r.le<std::uint64_t>(field + ".offset");
    e.nbytes = r.le<std::uint64_t>(field + ".nbytes");
    require(e.nbytes == numel * width(e.dtype), ErrorKind::format, field + ".nbytes: does not match shape and dtype");
    h.tensors.push_back(std::move(e));
  }
  h.payload_bytes = r.le<std::uint64_t>("payload size");
  h.header_bytes = r.pos;
  require(h.payload_bytes == bytes.size() - r.pos, ErrorKind::format,
          "payload size " + std::to_string(h.payload_bytes) + " does not match the " +
              std::to_string(bytes.size() - r.pos) + " bytes present");
  std::uint64_t expected = 0;
  for (std::size_t i = 0; i < h.tensors.size(); ++i) {
    const auto& e = h.tensors[i];
    require(e.offset == expected, ErrorKind::format,
            "tensor[" + std::to_string(i) + "].offset: overlapping or non-contiguous");
    require(e.offset + e.nbytes <= h.payload_bytes, ErrorKind::format,
            "tensor[" + std::to_string(i) + "].offset: out of bounds");
    expected += e.nbytes;
  }
  require(expected == h.payload_bytes, ErrorKind::format, "payload has trailing bytes");
  return h;
}

LoadedModel decode(const std::vector<std::uint8_t>& bytes) {
  const ArchiveHeader h = read_header(bytes);
  auto model = models::build_model<float>(h.spec, 0);
  const auto& params = model.parameters();
  require(params.size() == h.tensors.size(), ErrorKind::format,
          "archive has " + std::to_string(h.tensors.size()) + " tensors, architecture expects " +
              std::to_string(params.size()));
  std::map<std::string, Parameter<float>*> by_name(params.begin(), params.end());
  DType dtype = h.tensors.empty() ? DType::f32 : h.tensors.front().dtype;
  const std::uint8_t* payload = bytes.data() + h.header_bytes;
  for (const auto& e : h.tensors) {
    auto it = by_name.find(e.name);
    require(it != by_name.end(), ErrorKind::format, "unknown tensor '" + e.name + "'");
    Tensor<float>& v = it->second->value();
    require(v.shape() == e.shape, ErrorKind::format,
            "tensor '" + e.name + "' has shape " + shape_str(e.shape) + ", expected " + shape_str(v.shape()));
    by_name.erase(it);
    if (e.dtype != dtype) dtype = DType::f32;
    const std::uint8_t* src = payload + e.offset;
    for (std::size_t i = 0; i < v.numel(); ++i) {
      if (e.dtype == DType::f16) {
        v[i] = half_to_float(static_cast<std::uint16_t>(src[2 * i] | (src[2 * i + 1] << 8)));
      } else {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(src[4 * i + b]) << (8 * b);
        v[i] = std::bit_cast<float>(u);
      }
    }
  }
  model.set_mode(nn::Mode::infer);
  return {std::move(model), dtype};
}

LoadedModel load(const std::filesystem::path& path) {
  try {
    return decode(read_file(path));
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::format) throw;
    throw Error(ErrorKind::format, path.string() + ": " + e.what());
  }
}

QuantizationReport quantize_f16(models::ModelGraph<float>& model) {
  QuantizationReport report;
  for (const auto& [name, p] : model.parameters()) {
    TensorQuantization tq{name};
    for (float& x : p->value().values()) {
      bool clamped = false;
      const float q = half_to_float(float_to_half(x, &clamped));
      const double err = std::fabs(static_cast<double>(q) - static_cast<double>(x));
      tq.max_abs_error = std::max(tq.max_abs_error, err);
      if (x != 0.0f) tq.max_rel_error = std::max(tq.max_rel_error, err / std::fabs(static_cast<double>(x)));
      tq.clamped += clamped;
      x = q;
    }
    report.payload_bytes_before += p->value().numel() * 4;
    report.payload_bytes_after += p->value().numel() * 2;
    report.clamped += tq.clamped;
    report.tensors.push_back(std::move(tq));
  }
  return report;
}

SizeReport size_report(const std::vector<std::uint8_t>& bytes) {
  const ArchiveHeader h = read_header(bytes);
  SizeReport r;
  r.header_bytes = h.header_bytes;
  r.payload_bytes = h.payload_bytes;
  r.total_bytes = bytes.size();
  r.tensors = h.tensors.size();
  r.dtype = h.tensors.empty() ? DType::f32 : h.tensors.front().dtype;
  return r;
}

void write_size_csv(const std::vector<std::pair<std::string, SizeReport>>& reports, std::ostream& out) {
  out << "archive,dtype,tensors,header_bytes,payload_bytes,total_bytes\n";
  for (const auto& [name, r] : reports) {
    out << name << ',' << to_string(r.dtype) << ',' << r.tensors << ',' << r.header_bytes << ',' << r.payload_bytes
        << ',' << r.total_bytes << '\n';
  }
}

std::string describe(const SizeReport& r) {
  std::ostringstream s;
  s << to_string(r.dtype) << " archive: " << r.tensors << " tensors, header " << r.header_bytes << " B, payload "
    << r.payload_bytes << " B, total " << r.total_bytes << " B";
  return s.str();
}

}  // namespace distillforge::io
