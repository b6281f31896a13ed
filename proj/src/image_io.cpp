#include "caft/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace caft {

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageIoError("cannot write " + path);
}

struct Header {
  std::size_t width = 0, height = 0, maxval = 0, data_offset = 0;
};

Header parse_header(const std::string& bytes, const char* magic) {
  if (bytes.size() < 2 || bytes.compare(0, 2, magic) != 0) throw ImageIoError(std::string("not a ") + magic + " file");
  std::size_t pos = 2;
  std::size_t fields[3] = {0, 0, 0};
  for (auto& f : fields) {
    for (;;) {
      if (pos >= bytes.size()) throw ImageIoError("truncated image header");
      const unsigned char c = static_cast<unsigned char>(bytes[pos]);
      if (std::isspace(c)) {
        ++pos;
      } else if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    if (!std::isdigit(static_cast<unsigned char>(bytes[pos]))) throw ImageIoError("malformed image header");
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      f = f * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (f > (1u << 24)) throw ImageIoError("image header value too large");
      ++pos;
    }
  }
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw ImageIoError("malformed image header");
  }
  Header h{fields[0], fields[1], fields[2], pos + 1};
  if (h.width == 0 || h.height == 0) throw ImageIoError("image has zero extent");
  if (h.maxval == 0 || h.maxval > 255) throw ImageIoError("only 8-bit images are supported");
  return h;
}

std::uint8_t quantize(double v) {
  if (!(v >= 0.0 && v <= 1.0)) throw ImageIoError("pixel value outside [0, 1]");
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

}  // namespace

ImageGrid decode_ppm(const std::string& bytes) {
  const Header h = parse_header(bytes, "P6");
  const std::size_t n = h.width * h.height * 3;
  if (bytes.size() < h.data_offset + n) throw ImageIoError("truncated PPM data");
  ImageGrid img{h.height, h.width, std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto b = static_cast<unsigned char>(bytes[h.data_offset + i]);
    img.values[i] = std::min(1.0, static_cast<double>(b) / static_cast<double>(h.maxval));
  }
  return img;
}

std::string encode_ppm(const ImageGrid& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  for (double v : image.values) out.push_back(static_cast<char>(quantize(v)));
  return out;
}

GrayImage decode_pgm(const std::string& bytes) {
  const Header h = parse_header(bytes, "P5");
  const std::size_t n = h.width * h.height;
  if (bytes.size() < h.data_offset + n) throw ImageIoError("truncated PGM data");
  GrayImage img{h.height, h.width, std::vector<std::uint8_t>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto b = static_cast<unsigned char>(bytes[h.data_offset + i]);
    img.pixels[i] = static_cast<std::uint8_t>(h.maxval == 255 ? b : std::lround(255.0 * b / h.maxval));
  }
  return img;
}

std::string encode_pgm(const GrayImage& image) {
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
  return out;
}

ImageGrid read_ppm(const std::string& path) { return decode_ppm(slurp(path)); }
void write_ppm(const std::string& path, const ImageGrid& image) { spill(path, encode_ppm(image)); }
GrayImage read_pgm(const std::string& path) { return decode_pgm(slurp(path)); }
void write_pgm(const std::string& path, const GrayImage& image) { spill(path, encode_pgm(image)); }

}  // namespace caft
