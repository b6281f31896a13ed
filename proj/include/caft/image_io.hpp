#pragma once

// Binary PPM (P6) and PGM (P5) images with 8-bit samples.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace caft {

/// RGB image, row-major, channels interleaved, values in [0, 1].
struct ImageGrid {
  std::size_t height = 0, width = 0;
  std::vector<double> values;

  double at(std::size_t y, std::size_t x, std::size_t c) const { return values[(y * width + x) * 3 + c]; }
  bool operator==(const ImageGrid&) const = default;
};

struct GrayImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;

  bool operator==(const GrayImage&) const = default;
};

/// Thrown for unreadable or malformed image files.
class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ImageGrid read_ppm(const std::string& path);
void write_ppm(const std::string& path, const ImageGrid& image);
GrayImage read_pgm(const std::string& path);
void write_pgm(const std::string& path, const GrayImage& image);

ImageGrid decode_ppm(const std::string& bytes);
std::string encode_ppm(const ImageGrid& image);
GrayImage decode_pgm(const std::string& bytes);
std::string encode_pgm(const GrayImage& image);

}  // namespace caft
