#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace attrdisc {

// RGB image, interleaved rows, channel values in [0, 1].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> data;  // height * width * 3

  Image() = default;
  Image(std::size_t w, std::size_t h, float fill = 0.0f) : width(w), height(h), data(w * h * 3, fill) {}

  float& at(std::size_t x, std::size_t y, std::size_t c) { return data[(y * width + x) * 3 + c]; }
  float at(std::size_t x, std::size_t y, std::size_t c) const { return data[(y * width + x) * 3 + c]; }

  bool operator==(const Image&) const = default;
};

// Real-valued 2-D array, row-major.
struct Grid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Grid() = default;
  Grid(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  bool operator==(const Grid&) const = default;
};

// Binary P6 with maxval 255; values are quantised to k/255.
void write_ppm(const Image& image, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);
Image decode_ppm(std::string_view bytes, std::string_view source = "<memory>");
std::string encode_ppm(const Image& image);

// Binary P5 of a grid whose values lie in [0, 1], scaled to [0, 255].
// `comment` lines are embedded after the magic number.
std::string encode_pgm(const Grid& grid, std::string_view comment = {});
Grid decode_pgm(std::string_view bytes, std::string_view source = "<memory>");

Image resize_bilinear(const Image& image, std::size_t width, std::size_t height);
Grid resize_bilinear(const Grid& grid, std::size_t rows, std::size_t cols);
Image mean_image(std::span<const Image> images);

// Plain-text grid: one row per line, comma-separated, fixed decimals.
std::string encode_grid_csv(const Grid& grid, std::string_view comment = {}, int decimals = 6);
Grid decode_grid_csv(std::string_view text, std::string_view source = "<memory>");

}  // namespace attrdisc
