#include "attrdisc/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <fmt/format.h>

#include "attrdisc/error.hpp"
#include "attrdisc/parallel.hpp"
#include "attrdisc/text_io.hpp"

namespace attrdisc {

void OccluderConfig::validate() const {
  if (sizes.empty()) throw Error(ErrorKind::kInvalidArgument, "no occluder sizes");
  if (stride < 1) throw Error(ErrorKind::kInvalidArgument, "occluder stride must be >= 1");
  for (auto s : sizes) {
    if (s < 1 || s > input_side) {
      throw Error(ErrorKind::kInvalidArgument, fmt::format("occluder size {} outside [1, {}]", s, input_side));
    }
  }
}

namespace {

long floor_div2(long v) { return v >= 0 ? v / 2 : -((-v + 1) / 2); }

}  // namespace

PixelRect occluder_rect(const OccluderConfig& config, std::size_t size, std::size_t gx, std::size_t gy) {
  const long side = static_cast<long>(config.input_side);
  const long s = static_cast<long>(config.stride);
  const long z = static_cast<long>(size);
  auto start = [&](std::size_t g) {
    const long cell = static_cast<long>(g) * s;
    return config.alignment == OccluderAlignment::kCenter ? floor_div2(2 * cell + s - z) : cell;
  };
  const long x0 = start(gx);
  const long y0 = start(gy);
  PixelRect r;
  r.x0 = static_cast<std::size_t>(std::clamp(x0, 0L, side));
  r.y0 = static_cast<std::size_t>(std::clamp(y0, 0L, side));
  r.x1 = static_cast<std::size_t>(std::clamp(x0 + z, 0L, side));
  r.y1 = static_cast<std::size_t>(std::clamp(y0 + z, 0L, side));
  return r;
}

std::vector<std::vector<Grid>> occlusion_responses(const ActivationProvider& provider, const Image& image,
                                                   const OccluderConfig& config, std::span<const UnitAddress> units,
                                                   std::size_t jobs) {
  config.validate();
  for (const auto& u : units) {
    if (u.flat_index >= provider.unit_count()) {
      throw Error(ErrorKind::kOutOfRange, fmt::format("unit {} not exposed by provider ({} units)", u.flat_index,
                                                      provider.unit_count()));
    }
  }
  const std::size_t side = config.input_side;
  const Image base = resize_bilinear(image, side, side);
  Image fill;
  if (config.fill.width == 0) {
    fill = Image(side, side);
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0.0;
      for (std::size_t i = c; i < base.data.size(); i += 3) m += base.data[i];
      m /= double(side * side);
      for (std::size_t i = c; i < fill.data.size(); i += 3) fill.data[i] = float(m);
    }
  } else {
    fill = resize_bilinear(config.fill, side, side);
  }

  auto run = [&](const Image& im) {
    try {
      auto act = provider.activations(im);
      if (act.size() != provider.unit_count()) {
        throw Error(ErrorKind::kLengthMismatch,
                    fmt::format("provider returned {} values, declared {}", act.size(), provider.unit_count()));
      }
      return act;
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      throw Error(ErrorKind::kInvalidArgument, fmt::format("activation provider failed: {}", e.what()));
    }
  };
  const auto reference = run(base);

  const std::size_t lattice = config.lattice_side();
  const std::size_t per_scale = lattice * lattice;
  std::vector<std::vector<Grid>> raw(units.size(), std::vector<Grid>(config.sizes.size(), Grid(lattice, lattice)));
  parallel_for(config.sizes.size() * per_scale, jobs, [&](std::size_t job) {
    const std::size_t s = job / per_scale;
    const std::size_t gy = (job % per_scale) / lattice;
    const std::size_t gx = job % lattice;
    const PixelRect r = occluder_rect(config, config.sizes[s], gx, gy);
    Image occluded = base;
    for (std::size_t y = r.y0; y < r.y1; ++y) {
      for (std::size_t x = r.x0; x < r.x1; ++x) {
        for (std::size_t c = 0; c < 3; ++c) occluded.at(x, y, c) = fill.at(x, y, c);
      }
    }
    const auto act = run(occluded);
    for (std::size_t u = 0; u < units.size(); ++u) {
      const auto i = units[u].flat_index;
      raw[u][s](gy, gx) = double(reference[i]) - double(act[i]);
    }
  });
  return raw;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) return {1.0};
  const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double d = double(i) - double(radius);
    k[i] = std::exp(-0.5 * d * d / (sigma * sigma));
    total += k[i];
  }
  for (auto& v : k) v /= total;
  return k;
}

Grid gaussian_blur(const Grid& grid, double sigma) {
  const auto kernel = gaussian_kernel(sigma);
  if (kernel.size() == 1 || grid.values.empty()) return grid;
  const long radius = static_cast<long>(kernel.size() / 2);
  auto clamp_index = [](long i, std::size_t n) { return static_cast<std::size_t>(std::clamp(i, 0L, long(n) - 1)); };
  Grid tmp(grid.rows, grid.cols);
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      double acc = 0.0;
      for (long k = -radius; k <= radius; ++k) {
        acc += kernel[std::size_t(k + radius)] * grid(r, clamp_index(long(c) + k, grid.cols));
      }
      tmp(r, c) = acc;
    }
  }
  Grid out(grid.rows, grid.cols);
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      double acc = 0.0;
      for (long k = -radius; k <= radius; ++k) {
        acc += kernel[std::size_t(k + radius)] * tmp(clamp_index(long(r) + k, grid.rows), c);
      }
      out(r, c) = acc;
    }
  }
  return out;
}

Grid smooth_and_fuse(std::span<const Grid> per_scale, const OccluderConfig& config) {
  if (per_scale.size() != config.sizes.size()) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("{} scale maps for {} occluder sizes", per_scale.size(), config.sizes.size()));
  }
  Grid fused(per_scale.front().rows, per_scale.front().cols);
  for (std::size_t s = 0; s < per_scale.size(); ++s) {
    if (per_scale[s].rows != fused.rows || per_scale[s].cols != fused.cols) {
      throw Error(ErrorKind::kInvalidArgument, "scale maps do not share a lattice");
    }
    const double sigma = (double(config.sizes[s]) / 4.0) / double(config.stride);
    const Grid blurred = gaussian_blur(per_scale[s], sigma);
    for (std::size_t i = 0; i < fused.values.size(); ++i) fused.values[i] += blurred.values[i];
  }
  if (per_scale.size() > 1) {
    for (auto& v : fused.values) v /= double(per_scale.size());
  }
  return fused;
}

Grid normalize_response(const Grid& map) {
  Grid out = map;
  if (map.values.empty()) return out;
  for (double v : map.values) {
    if (!std::isfinite(v)) throw Error(ErrorKind::kNonFinite, "response map value is not finite");
  }
  const auto [lo_it, hi_it] = std::minmax_element(map.values.begin(), map.values.end());
  double lo = *lo_it;
  double hi = *hi_it;
  if (hi == lo) {
    std::fill(out.values.begin(), out.values.end(), 0.0);
    return out;
  }
  const double mean = std::accumulate(map.values.begin(), map.values.end(), 0.0) / double(map.values.size());
  const double up = hi - mean;
  const double down = mean - lo;
  // Equal peak distances fall back to comparing peak magnitudes.
  if (up < down || (up == down && -lo > hi)) {
    for (auto& v : out.values) v = -v;
    std::swap(lo, hi);
    lo = -lo;
    hi = -hi;
  }
  const double range = hi - lo;
  for (auto& v : out.values) v = std::clamp((v - lo) / range, 0.0, 1.0);
  return out;
}

SaliencyMap accumulate(std::span<const Grid> maps, std::span<const double> scores, std::size_t k) {
  if (maps.size() != scores.size()) {
    throw Error(ErrorKind::kInvalidArgument, fmt::format("{} maps but {} scores", maps.size(), scores.size()));
  }
  if (k < 1 || k > maps.size()) {
    throw Error(ErrorKind::kInvalidArgument, fmt::format("K={} with {} maps available", k, maps.size()));
  }
  for (std::size_t i = 1; i < k; ++i) {
    if (scores[i] > scores[i - 1]) throw Error(ErrorKind::kInvalidArgument, "scores must be non-increasing");
  }
  double z = 0.0;
  for (std::size_t i = 0; i < k; ++i) z += scores[i];
  if (!(z > 0.0)) throw Error(ErrorKind::kNumerical, "accumulation normaliser is zero");

  SaliencyMap out;
  out.k = k;
  out.normalizer = z;
  out.grid = Grid(maps.front().rows, maps.front().cols);
  for (std::size_t i = 0; i < k; ++i) {
    if (maps[i].rows != out.grid.rows || maps[i].cols != out.grid.cols) {
      throw Error(ErrorKind::kInvalidArgument, "response maps differ in size");
    }
    const double w = scores[i] / z;
    for (std::size_t p = 0; p < out.grid.values.size(); ++p) out.grid.values[p] += w * maps[i].values[p];
  }
  for (auto& v : out.grid.values) v = std::clamp(v, 0.0, 1.0);
  return out;
}

SaliencyComponents response_maps(const ActivationProvider& provider, const Image& image, const std::string& image_id,
                                 const PrimeUnitSet& prime, std::size_t count, const OccluderConfig& config,
                                 std::size_t jobs) {
  if (count < 1 || count > prime.units.size()) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("{} response maps requested, {} prime units available", count, prime.units.size()));
  }
  SaliencyComponents out;
  out.word = prime.word;
  out.image_id = image_id;
  out.units.assign(prime.units.begin(), prime.units.begin() + static_cast<std::ptrdiff_t>(count));
  out.scores.assign(prime.scores.begin(), prime.scores.begin() + static_cast<std::ptrdiff_t>(count));
  const auto raw = occlusion_responses(provider, image, config, out.units, jobs);
  out.responses.reserve(count);
  for (const auto& scales : raw) out.responses.push_back(normalize_response(smooth_and_fuse(scales, config)));
  return out;
}

Grid upsample_to_pixels(const Grid& lattice, const OccluderConfig& config) {
  const std::size_t side = config.input_side;
  const double s = double(config.stride);
  Grid out(side, side);
  if (lattice.rows == 0 || lattice.cols == 0) throw Error(ErrorKind::kInvalidArgument, "empty lattice");
  auto coord = [&](std::size_t p, std::size_t n, std::size_t& i0, std::size_t& i1, double& w) {
    const double u = std::clamp((double(p) + 0.5 - s / 2.0) / s, 0.0, double(n - 1));
    i0 = static_cast<std::size_t>(u);
    i1 = std::min(i0 + 1, n - 1);
    w = u - double(i0);
  };
  for (std::size_t y = 0; y < side; ++y) {
    std::size_t r0, r1;
    double wy;
    coord(y, lattice.rows, r0, r1, wy);
    for (std::size_t x = 0; x < side; ++x) {
      std::size_t c0, c1;
      double wx;
      coord(x, lattice.cols, c0, c1, wx);
      const double top = lattice(r0, c0) * (1 - wx) + lattice(r0, c1) * wx;
      const double bottom = lattice(r1, c0) * (1 - wx) + lattice(r1, c1) * wx;
      out(y, x) = top * (1 - wy) + bottom * wy;
    }
  }
  return out;
}

double otsu_threshold(std::span<const double> values, std::size_t bins) {
  if (values.empty() || bins < 2) throw Error(ErrorKind::kInvalidArgument, "otsu needs values and >= 2 bins");
  std::vector<double> hist(bins, 0.0);
  for (double v : values) {
    const auto idx = std::min(bins - 1, static_cast<std::size_t>(std::clamp(v, 0.0, 1.0) * double(bins)));
    hist[idx] += 1.0;
  }
  const double total = double(values.size());
  double sum_all = 0.0;
  for (std::size_t i = 0; i < bins; ++i) sum_all += double(i) * hist[i];
  double w_bg = 0.0;
  double sum_bg = 0.0;
  double best = -1.0;
  std::size_t best_k = 0;
  for (std::size_t k = 0; k + 1 < bins; ++k) {
    w_bg += hist[k];
    sum_bg += double(k) * hist[k];
    const double w_fg = total - w_bg;
    if (w_bg == 0.0 || w_fg == 0.0) continue;
    const double mu_bg = sum_bg / w_bg;
    const double mu_fg = (sum_all - sum_bg) / w_fg;
    const double between = w_bg * w_fg * (mu_bg - mu_fg) * (mu_bg - mu_fg);
    if (between > best) {
      best = between;
      best_k = k;
    }
  }
  return double(best_k + 1) / double(bins);
}

std::vector<BoxAnnotation> load_annotations(const std::filesystem::path& path) {
  const auto table = read_csv(path);
  const auto c_img = table.column("image_id");
  const auto c_word = table.column("word");
  const auto c_ann = table.column("annotator");
  const auto c_x0 = table.column("x0");
  const auto c_y0 = table.column("y0");
  const auto c_x1 = table.column("x1");
  const auto c_y1 = table.column("y1");
  std::vector<BoxAnnotation> boxes;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const std::string where = fmt::format("{}:{}", path.string(), table.line_numbers[r]);
    BoxAnnotation b{row[c_img], row[c_word], row[c_ann],
                    long(parse_integer(row[c_x0], where)), long(parse_integer(row[c_y0], where)),
                    long(parse_integer(row[c_x1], where)), long(parse_integer(row[c_y1], where))};
    if (b.x1 < b.x0 || b.y1 < b.y0) throw Error(ErrorKind::kParse, where + ": inverted box");
    boxes.push_back(std::move(b));
  }
  return boxes;
}

std::size_t GroundTruthMask::positives() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), static_cast<unsigned char>(1)));
}

GroundTruthMask ground_truth_mask(std::span<const BoxAnnotation> boxes, std::size_t width, std::size_t height,
                                  std::size_t min_votes) {
  GroundTruthMask gt;
  gt.width = width;
  gt.height = height;
  gt.mask.assign(width * height, 0);
  if (!boxes.empty()) {
    gt.image_id = boxes.front().image_id;
    gt.word = boxes.front().word;
  }
  std::map<std::string, std::vector<unsigned char>> per_annotator;
  for (const auto& b : boxes) {
    auto& cover = per_annotator[b.annotator];
    if (cover.empty()) cover.assign(width * height, 0);
    const auto x0 = static_cast<std::size_t>(std::clamp(b.x0, 0L, long(width)));
    const auto x1 = static_cast<std::size_t>(std::clamp(b.x1, 0L, long(width)));
    const auto y0 = static_cast<std::size_t>(std::clamp(b.y0, 0L, long(height)));
    const auto y1 = static_cast<std::size_t>(std::clamp(b.y1, 0L, long(height)));
    for (std::size_t y = y0; y < y1; ++y) {
      for (std::size_t x = x0; x < x1; ++x) cover[y * width + x] = 1;
    }
  }
  std::vector<std::size_t> votes(width * height, 0);
  for (const auto& [_, cover] : per_annotator) {
    for (std::size_t i = 0; i < cover.size(); ++i) votes[i] += cover[i];
  }
  for (std::size_t i = 0; i < votes.size(); ++i) gt.mask[i] = votes[i] >= min_votes ? 1 : 0;
  return gt;
}

double average_precision(std::span<const double> scores, std::span<const unsigned char> labels) {
  if (scores.size() != labels.size()) throw Error(ErrorKind::kInvalidArgument, "scores and labels differ in length");
  const auto total_pos = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
  if (total_pos == 0) throw Error(ErrorKind::kInvalidArgument, "average precision needs a positive label");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t tp = 0;
  std::size_t seen = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t group_tp = 0;
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      group_tp += labels[order[j]] != 0;
      ++j;
    }
    tp += group_tp;
    seen += j - i;
    if (group_tp > 0) ap += (double(group_tp) / double(total_pos)) * (double(tp) / double(seen));
    i = j;
  }
  return ap;
}

double iou_at(std::span<const double> scores, std::span<const unsigned char> labels, double threshold) {
  if (scores.size() != labels.size()) throw Error(ErrorKind::kInvalidArgument, "scores and labels differ in length");
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    const bool gt = labels[i] != 0;
    inter += pred && gt;
    uni += pred || gt;
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 1; i <= 9; ++i) t.push_back(double(i) / 10.0);
  return t;
}

SaliencyScores evaluate_saliency(const Grid& pixels, const GroundTruthMask& gt, std::span<const double> thresholds) {
  if (pixels.rows != gt.height || pixels.cols != gt.width) {
    throw Error(ErrorKind::kInvalidArgument, fmt::format("saliency map {}x{} vs ground truth {}x{}", pixels.cols,
                                                         pixels.rows, gt.width, gt.height));
  }
  if (gt.positives() == 0) {
    throw Error(ErrorKind::kInvalidArgument, fmt::format("image '{}' has an empty ground truth", gt.image_id));
  }
  SaliencyScores out;
  out.average_precision = average_precision(pixels.values, gt.mask);
  const auto defaults = default_iou_thresholds();
  const auto ts = thresholds.empty() ? std::span<const double>(defaults) : thresholds;
  out.thresholds.assign(ts.begin(), ts.end());
  for (double t : ts) out.iou.push_back(iou_at(pixels.values, gt.mask, t));
  return out;
}

}  // namespace attrdisc
