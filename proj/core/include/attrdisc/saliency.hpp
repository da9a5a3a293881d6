#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "attrdisc/actstore.hpp"
#include "attrdisc/divergence.hpp"
#include "attrdisc/image.hpp"

namespace attrdisc {

// Anything that maps an input image to a flat activation vector.
class ActivationProvider {
 public:
  virtual ~ActivationProvider() = default;
  virtual std::size_t unit_count() const = 0;
  virtual std::vector<float> activations(const Image& image) const = 0;
};

enum class OccluderAlignment { kCenter, kTopLeft };

struct OccluderConfig {
  std::vector<std::size_t> sizes{24, 48, 96};
  std::size_t stride = 4;
  std::size_t input_side = 256;
  OccluderAlignment alignment = OccluderAlignment::kCenter;
  // Source of occluder pixels, usually the dataset mean image. When empty,
  // the occluded image's own mean colour is used.
  Image fill;

  std::size_t lattice_side() const { return (input_side + stride - 1) / stride; }
  void validate() const;
};

// Pixel rectangle [x0, x1) x [y0, y1) covered by the occluder of `size` at
// lattice cell (gx, gy), clipped to the image.
struct PixelRect {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};
PixelRect occluder_rect(const OccluderConfig& config, std::size_t size, std::size_t gx, std::size_t gy);

// raw[u][s](gy, gx) = activation_u(image) - activation_u(image occluded by
// scale s at lattice cell (gx, gy)). The image is resized to input_side.
std::vector<std::vector<Grid>> occlusion_responses(const ActivationProvider& provider, const Image& image,
                                                   const OccluderConfig& config, std::span<const UnitAddress> units,
                                                   std::size_t jobs = 1);

// Normalised discrete Gaussian truncated at 3 sigma; sigma <= 0 gives {1}.
std::vector<double> gaussian_kernel(double sigma);
// Separable blur with edge replication.
Grid gaussian_blur(const Grid& grid, double sigma);

// Blurs each scale with sigma = size / 4 pixels (converted to lattice units)
// and averages the scales.
Grid smooth_and_fuse(std::span<const Grid> per_scale, const OccluderConfig& config);

// Negates maps whose low peak outweighs the high one (max - mean < mean -
// min), or on a tie whose negative peak is larger in magnitude, then rescales
// to [0, 1]. Constant maps become all zeros.
Grid normalize_response(const Grid& map);

struct SaliencyMap {
  std::string word;
  std::string image_id;
  Grid grid;
  std::size_t k = 0;
  double normalizer = 0.0;  // sum of the K scores
};

// Score-weighted average of the first K maps. Scores must be non-increasing.
SaliencyMap accumulate(std::span<const Grid> maps, std::span<const double> scores, std::size_t k);

// Normalised response maps R_i of the leading prime units, in prime order.
struct SaliencyComponents {
  std::string word;
  std::string image_id;
  std::vector<UnitAddress> units;
  std::vector<double> scores;
  std::vector<Grid> responses;
};

SaliencyComponents response_maps(const ActivationProvider& provider, const Image& image, const std::string& image_id,
                                 const PrimeUnitSet& prime, std::size_t count, const OccluderConfig& config,
                                 std::size_t jobs = 1);

// Lattice -> pixel grid (input_side x input_side), bilinear between lattice
// cell centres, clamped at the border.
Grid upsample_to_pixels(const Grid& lattice, const OccluderConfig& config);

// Otsu threshold of values in [0, 1] over `bins` bins; pixels >= the
// returned value form the foreground.
double otsu_threshold(std::span<const double> values, std::size_t bins = 256);

struct BoxAnnotation {
  std::string image_id;
  std::string word;
  std::string annotator;
  long x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open pixel box
};

std::vector<BoxAnnotation> load_annotations(const std::filesystem::path& path);

struct GroundTruthMask {
  std::string image_id;
  std::string word;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<unsigned char> mask;

  std::size_t positives() const;
};

// Pixels covered by boxes of at least `min_votes` distinct annotators.
GroundTruthMask ground_truth_mask(std::span<const BoxAnnotation> boxes, std::size_t width, std::size_t height,
                                  std::size_t min_votes = 2);

// Area under the precision/recall step curve over pixels ranked by score;
// tied scores enter together.
double average_precision(std::span<const double> scores, std::span<const unsigned char> labels);
double iou_at(std::span<const double> scores, std::span<const unsigned char> labels, double threshold);

struct SaliencyScores {
  double average_precision = 0.0;
  std::vector<double> thresholds;
  std::vector<double> iou;
};

std::vector<double> default_iou_thresholds();

// `pixels` must match the mask dimensions; throws kInvalidArgument on an
// empty ground truth.
SaliencyScores evaluate_saliency(const Grid& pixels, const GroundTruthMask& gt,
                                 std::span<const double> thresholds = {});

}  // namespace attrdisc
