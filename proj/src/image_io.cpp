#include "distillforge/image_io.hpp"

#include <png.h>

#include <cctype>
#include <cstring>
#include <fstream>
#include <sstream>

namespace distillforge::imgproc {
namespace {

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Next whitespace-delimited header token, skipping '#' comments.
std::size_t header_number(const std::string& buf, std::size_t& pos, const std::string& what) {
  for (;;) {
    while (pos < buf.size() && std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
    if (pos < buf.size() && buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::size_t start = pos;
  std::size_t value = 0;
  while (pos < buf.size() && std::isdigit(static_cast<unsigned char>(buf[pos]))) {
    value = value * 10 + static_cast<std::size_t>(buf[pos] - '0');
    require(value < (1u << 30), ErrorKind::format, "PNM " + what + " is too large");
    ++pos;
  }
  require(pos > start, ErrorKind::format, "malformed PNM header: missing " + what);
  return value;
}

}  // namespace

PixelRaster read_pnm(const std::filesystem::path& path) {
  const std::string buf = read_all(path);
  require(buf.size() >= 2 && buf[0] == 'P' && (buf[1] == '6' || buf[1] == '5'), ErrorKind::format,
          path.string() + ": not a binary PPM/PGM file");
  const std::size_t channels = buf[1] == '6' ? 3 : 1;
  std::size_t pos = 2;
  const std::size_t w = header_number(buf, pos, "width");
  const std::size_t h = header_number(buf, pos, "height");
  const std::size_t maxval = header_number(buf, pos, "maxval");
  require(maxval == 255, ErrorKind::format, path.string() + ": only maxval 255 is supported");
  require(pos < buf.size() && std::isspace(static_cast<unsigned char>(buf[pos])), ErrorKind::format,
          path.string() + ": malformed PNM header");
  ++pos;
  require(w > 0 && h > 0, ErrorKind::format, path.string() + ": zero image extent");
  const std::size_t bytes = w * h * channels;
  require(buf.size() - pos >= bytes, ErrorKind::format, path.string() + ": truncated pixel data");
  std::vector<std::uint8_t> data(buf.begin() + static_cast<std::ptrdiff_t>(pos),
                                 buf.begin() + static_cast<std::ptrdiff_t>(pos + bytes));
  return PixelRaster(w, h, channels, std::move(data));
}

void write_pnm(const std::filesystem::path& path, const PixelRaster& img) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  require(static_cast<bool>(out), ErrorKind::io, "failed writing " + path.string());
}

PixelRaster read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  require(png_image_begin_read_from_file(&image, path.string().c_str()) != 0, ErrorKind::format,
          path.string() + ": " + image.message);
  const bool gray = (image.format & PNG_FORMAT_FLAG_COLOR) == 0;
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  PixelRaster img(image.width, image.height, gray ? 1 : 3);
  if (png_image_finish_read(&image, nullptr, img.data.data(), 0, nullptr) == 0) {
    std::string message = image.message;
    png_image_free(&image);
    throw Error(ErrorKind::format, path.string() + ": " + message);
  }
  return img;
}

void write_png(const std::filesystem::path& path, const PixelRaster& img) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  require(png_image_write_to_file(&image, path.string().c_str(), 0, img.data.data(), 0, nullptr) != 0, ErrorKind::io,
          "cannot write " + path.string() + ": " + image.message);
}

PixelRaster read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
  char sig[8] = {};
  in.read(sig, 8);
  static const unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (in.gcount() == 8 && std::memcmp(sig, png_sig, 8) == 0) return read_png(path);
  return read_pnm(path);
}

void write_image(const std::filesystem::path& path, const PixelRaster& img) {
  if (path.extension() == ".png") {
    write_png(path, img);
  } else {
    write_pnm(path, img);
  }
}

}  // namespace distillforge::imgproc
