#include "attrdisc/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include <fmt/format.h>

#include "attrdisc/error.hpp"
#include "attrdisc/text_io.hpp"

namespace attrdisc {

namespace {

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

struct PnmHeader {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t maxval = 0;
  std::size_t data_offset = 0;
};

PnmHeader parse_pnm_header(std::string_view bytes, std::string_view magic, std::string_view source) {
  if (bytes.substr(0, 2) != magic) throw Error(ErrorKind::kFormat, fmt::format("{}: expected {} image", source, magic));
  std::size_t pos = 2;
  std::size_t fields[3] = {0, 0, 0};
  for (auto& field : fields) {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw Error(ErrorKind::kFormat, fmt::format("{}: malformed header", source));
    field = std::size_t(parse_integer(bytes.substr(start, pos - start), source));
  }
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw Error(ErrorKind::kFormat, fmt::format("{}: malformed header", source));
  }
  if (fields[2] != 255) throw Error(ErrorKind::kFormat, fmt::format("{}: only maxval 255 is supported", source));
  return {fields[0], fields[1], fields[2], pos + 1};
}

}  // namespace

std::string encode_ppm(const Image& image) {
  std::string out = fmt::format("P6\n{} {}\n255\n", image.width, image.height);
  out.reserve(out.size() + image.data.size());
  for (float v : image.data) out.push_back(static_cast<char>(to_byte(v)));
  return out;
}

void write_ppm(const Image& image, const std::filesystem::path& path) { write_file_atomic(path, encode_ppm(image)); }

Image decode_ppm(std::string_view bytes, std::string_view source) {
  const auto h = parse_pnm_header(bytes, "P6", source);
  if (bytes.size() - h.data_offset != h.width * h.height * 3) {
    throw Error(ErrorKind::kLengthMismatch, fmt::format("{}: expected {} pixel bytes, found {}", source,
                                                        h.width * h.height * 3, bytes.size() - h.data_offset));
  }
  Image image(h.width, h.height);
  for (std::size_t i = 0; i < image.data.size(); ++i) {
    image.data[i] = float(static_cast<unsigned char>(bytes[h.data_offset + i])) / 255.0f;
  }
  return image;
}

Image read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path), path.string()); }

std::string encode_pgm(const Grid& grid, std::string_view comment) {
  std::string out = "P5\n";
  for (const auto& line : split_lines(comment)) out += "# " + line + "\n";
  out += fmt::format("{} {}\n255\n", grid.cols, grid.rows);
  for (double v : grid.values) out.push_back(static_cast<char>(to_byte(v)));
  return out;
}

Grid decode_pgm(std::string_view bytes, std::string_view source) {
  const auto h = parse_pnm_header(bytes, "P5", source);
  if (bytes.size() - h.data_offset != h.width * h.height) {
    throw Error(ErrorKind::kLengthMismatch, fmt::format("{}: truncated pixel data", source));
  }
  Grid g(h.height, h.width);
  for (std::size_t i = 0; i < g.values.size(); ++i) {
    g.values[i] = double(static_cast<unsigned char>(bytes[h.data_offset + i])) / 255.0;
  }
  return g;
}

Image resize_bilinear(const Image& image, std::size_t width, std::size_t height) {
  if (image.width == width && image.height == height) return image;
  if (image.width == 0 || image.height == 0 || width == 0 || height == 0) {
    throw Error(ErrorKind::kInvalidArgument, "cannot resize an empty image");
  }
  Image out(width, height);
  const double sx = double(image.width) / double(width);
  const double sy = double(image.height) / double(height);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((double(y) + 0.5) * sy - 0.5, 0.0, double(image.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - double(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((double(x) + 0.5) * sx - 0.5, 0.0, double(image.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - double(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = image.at(x0, y0, c) * (1 - wx) + image.at(x1, y0, c) * wx;
        const double bottom = image.at(x0, y1, c) * (1 - wx) + image.at(x1, y1, c) * wx;
        out.at(x, y, c) = float(top * (1 - wy) + bottom * wy);
      }
    }
  }
  return out;
}

Grid resize_bilinear(const Grid& grid, std::size_t rows, std::size_t cols) {
  if (grid.rows == rows && grid.cols == cols) return grid;
  if (grid.rows == 0 || grid.cols == 0 || rows == 0 || cols == 0) {
    throw Error(ErrorKind::kInvalidArgument, "cannot resize an empty grid");
  }
  Grid out(rows, cols);
  const double sx = double(grid.cols) / double(cols);
  const double sy = double(grid.rows) / double(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double fy = std::clamp((double(r) + 0.5) * sy - 0.5, 0.0, double(grid.rows - 1));
    const auto r0 = static_cast<std::size_t>(fy);
    const std::size_t r1 = std::min(r0 + 1, grid.rows - 1);
    const double wy = fy - double(r0);
    for (std::size_t c = 0; c < cols; ++c) {
      const double fx = std::clamp((double(c) + 0.5) * sx - 0.5, 0.0, double(grid.cols - 1));
      const auto c0 = static_cast<std::size_t>(fx);
      const std::size_t c1 = std::min(c0 + 1, grid.cols - 1);
      const double wx = fx - double(c0);
      const double top = grid(r0, c0) * (1 - wx) + grid(r0, c1) * wx;
      const double bottom = grid(r1, c0) * (1 - wx) + grid(r1, c1) * wx;
      out(r, c) = top * (1 - wy) + bottom * wy;
    }
  }
  return out;
}

Image mean_image(std::span<const Image> images) {
  if (images.empty()) throw Error(ErrorKind::kInvalidArgument, "mean of no images");
  std::vector<double> acc(images.front().data.size(), 0.0);
  for (const auto& im : images) {
    if (im.width != images.front().width || im.height != images.front().height) {
      throw Error(ErrorKind::kInvalidArgument, "images differ in size");
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += im.data[i];
  }
  Image out(images.front().width, images.front().height);
  for (std::size_t i = 0; i < acc.size(); ++i) out.data[i] = float(acc[i] / double(images.size()));
  return out;
}

std::string encode_grid_csv(const Grid& grid, std::string_view comment, int decimals) {
  std::string out;
  for (const auto& line : split_lines(comment)) out += "# " + line + "\n";
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      if (c) out += ',';
      out += format_fixed(grid(r, c), decimals);
    }
    out += '\n';
  }
  return out;
}

Grid decode_grid_csv(std::string_view text, std::string_view source) {
  Grid g;
  for (const auto& line : split_lines(text)) {
    if (line.empty() || line.front() == '#') continue;
    const auto fields = split_csv_line(line);
    if (g.cols == 0) g.cols = fields.size();
    if (fields.size() != g.cols) throw Error(ErrorKind::kParse, fmt::format("{}: ragged grid", source));
    for (const auto& f : fields) g.values.push_back(parse_real(f, source));
    ++g.rows;
  }
  return g;
}

}  // namespace attrdisc
