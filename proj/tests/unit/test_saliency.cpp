#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "attrdisc/rng.hpp"
#include "attrdisc/saliency.hpp"
#include "test_support.hpp"

namespace attrdisc {
namespace {

using testing::TempDir;

class ConstantProvider : public ActivationProvider {
 public:
  std::size_t unit_count() const override { return 3; }
  std::vector<float> activations(const Image&) const override { return {1.0f, -2.0f, 0.5f}; }
};

// Unit 0: red mass inside a fixed window; unit 1: total brightness. `scale`
// multiplies every output.
class WindowProvider : public ActivationProvider {
 public:
  WindowProvider(std::size_t x0, std::size_t y0, std::size_t side, float scale = 1.0f)
      : x0_(x0), y0_(y0), side_(side), scale_(scale) {}
  std::size_t unit_count() const override { return 2; }
  std::vector<float> activations(const Image& im) const override {
    double red = 0.0, all = 0.0;
    for (std::size_t y = 0; y < im.height; ++y) {
      for (std::size_t x = 0; x < im.width; ++x) {
        if (x >= x0_ && x < x0_ + side_ && y >= y0_ && y < y0_ + side_) red += im.at(x, y, 0);
        for (std::size_t c = 0; c < 3; ++c) all += im.at(x, y, c);
      }
    }
    return {static_cast<float>(scale_ * red), static_cast<float>(scale_ * all / 100.0)};
  }

 private:
  std::size_t x0_, y0_, side_;
  float scale_;
};

Image square_image(std::size_t side, std::size_t x0, std::size_t y0, std::size_t w) {
  Image im(side, side, 0.1f);
  for (std::size_t y = y0; y < y0 + w; ++y) {
    for (std::size_t x = x0; x < x0 + w; ++x) im.at(x, y, 0) = 1.0f;
  }
  return im;
}

OccluderConfig small_config() {
  OccluderConfig c;
  c.sizes = {4, 8};
  c.stride = 2;
  c.input_side = 32;
  return c;
}

std::vector<UnitAddress> units(std::size_t n) {
  const std::vector<LayerSchema> layers{{"l", n, LayerKind::kFc}};
  std::vector<UnitAddress> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(unit_address(layers, i));
  return out;
}

TEST(OccluderRect, CenterAndTopLeftAlignment) {
  OccluderConfig c;
  c.sizes = {8};
  c.stride = 4;
  c.input_side = 32;
  const auto r = occluder_rect(c, 8, 2, 1);
  // Cell 2 spans [8, 12); an 8-wide occluder centred on it spans [6, 14).
  EXPECT_EQ(r.x0, 6u);
  EXPECT_EQ(r.x1, 14u);
  EXPECT_EQ(r.y0, 2u);
  EXPECT_EQ(r.y1, 10u);
  const auto edge = occluder_rect(c, 8, 0, 7);
  EXPECT_EQ(edge.x0, 0u);
  EXPECT_EQ(edge.x1, 6u);
  EXPECT_EQ(edge.y1, 32u);
  c.alignment = OccluderAlignment::kTopLeft;
  const auto tl = occluder_rect(c, 8, 2, 1);
  EXPECT_EQ(tl.x0, 8u);
  EXPECT_EQ(tl.y0, 4u);
  EXPECT_EQ(c.lattice_side(), 8u);
}

TEST(OccluderConfig, Validation) {
  OccluderConfig c = small_config();
  c.sizes = {64};
  EXPECT_ERROR_KIND(c.validate(), ErrorKind::kInvalidArgument);
  c = small_config();
  c.stride = 0;
  EXPECT_ERROR_KIND(c.validate(), ErrorKind::kInvalidArgument);
  c = small_config();
  c.sizes.clear();
  EXPECT_ERROR_KIND(c.validate(), ErrorKind::kInvalidArgument);
}

TEST(OcclusionResponses, NoOpOcclusionGivesZero) {
  const auto im = square_image(32, 8, 8, 6);
  auto c = small_config();
  c.fill = im;
  const WindowProvider p(8, 8, 6);
  const auto raw = occlusion_responses(p, im, c, units(2));
  for (const auto& scales : raw) {
    for (const auto& g : scales) {
      for (double v : g.values) EXPECT_EQ(v, 0.0);
    }
  }
}

TEST(OcclusionResponses, ConstantProviderGivesZeroMaps) {
  const auto raw = occlusion_responses(ConstantProvider(), square_image(32, 0, 0, 4), small_config(), units(3));
  ASSERT_EQ(raw.size(), 3u);
  ASSERT_EQ(raw[0].size(), 2u);
  EXPECT_EQ(raw[0][0].rows, 16u);
  for (const auto& scales : raw) {
    for (const auto& g : scales) {
      for (double v : g.values) EXPECT_EQ(v, 0.0);
    }
  }
}

TEST(OcclusionResponses, PeakSitsOnTheTunedSquare) {
  const auto im = square_image(32, 20, 6, 4);
  const WindowProvider p(20, 6, 4);
  auto c = small_config();
  c.sizes = {4};
  const auto raw = occlusion_responses(p, im, c, units(1));
  const auto& g = raw[0][0];
  const auto best = std::max_element(g.values.begin(), g.values.end()) - g.values.begin();
  const std::size_t gy = std::size_t(best) / g.cols, gx = std::size_t(best) % g.cols;
  // The square covers lattice cells 10..11 horizontally and 3..4 vertically.
  EXPECT_GE(gx, 10u);
  EXPECT_LE(gx, 11u);
  EXPECT_GE(gy, 3u);
  EXPECT_LE(gy, 4u);
  EXPECT_GT(g.values[std::size_t(best)], 0.0);
}

TEST(OcclusionResponses, ScaleLinearityAndDeterminism) {
  const auto im = square_image(32, 4, 10, 8);
  const WindowProvider a(4, 10, 8, 1.0f), b(4, 10, 8, 4.0f);
  const auto c = small_config();
  const auto ra = occlusion_responses(a, im, c, units(2));
  const auto rb = occlusion_responses(b, im, c, units(2));
  const auto again = occlusion_responses(a, im, c, units(2), 3);
  for (std::size_t u = 0; u < 2; ++u) {
    for (std::size_t s = 0; s < 2; ++s) {
      EXPECT_EQ(ra[u][s], again[u][s]);
      for (std::size_t i = 0; i < ra[u][s].values.size(); ++i) {
        EXPECT_NEAR(rb[u][s].values[i], 4.0 * ra[u][s].values[i], 1e-3 * (1 + std::abs(ra[u][s].values[i])));
      }
    }
    const auto na = normalize_response(smooth_and_fuse(ra[u], c));
    const auto nb = normalize_response(smooth_and_fuse(rb[u], c));
    for (std::size_t i = 0; i < na.values.size(); ++i) EXPECT_NEAR(na.values[i], nb.values[i], 1e-5);
  }
}

TEST(OcclusionResponses, RejectsUnknownUnit) {
  const auto u = units(5);
  EXPECT_ERROR_KIND(occlusion_responses(ConstantProvider(), Image(8, 8), small_config(), std::span(u).subspan(3)),
                    ErrorKind::kOutOfRange);
}

TEST(GaussianKernel, NormalisedAndTruncated) {
  for (double sigma : {0.3, 0.5, 1.0, 2.5, 6.0}) {
    const auto k = gaussian_kernel(sigma);
    const auto r = static_cast<std::size_t>(std::ceil(3 * sigma));
    ASSERT_EQ(k.size(), 2 * r + 1);
    EXPECT_NEAR(std::accumulate(k.begin(), k.end(), 0.0), 1.0, 1e-12);
    double direct = 0.0;
    for (long i = -long(r); i <= long(r); ++i) direct += std::exp(-double(i * i) / (2 * sigma * sigma));
    for (std::size_t i = 0; i < k.size(); ++i) {
      const double d = double(i) - double(r);
      EXPECT_NEAR(k[i], std::exp(-d * d / (2 * sigma * sigma)) / direct, 1e-15);
      EXPECT_EQ(k[i], k[k.size() - 1 - i]);
    }
  }
  EXPECT_EQ(gaussian_kernel(0.0), std::vector<double>{1.0});
}

TEST(GaussianBlur, ImpulseSpreadsToKernelOuterProduct) {
  Grid g(21, 21);
  g(10, 10) = 1.0;
  const auto b = gaussian_blur(g, 1.5);
  const auto k = gaussian_kernel(1.5);
  const std::size_t r = k.size() / 2;
  EXPECT_NEAR(std::accumulate(b.values.begin(), b.values.end(), 0.0), 1.0, 1e-9);
  for (std::size_t y = 0; y < k.size(); ++y) {
    for (std::size_t x = 0; x < k.size(); ++x) EXPECT_NEAR(b(10 - r + y, 10 - r + x), k[y] * k[x], 1e-15);
  }
  const Grid flat(5, 7, 0.3);
  for (double v : gaussian_blur(flat, 2.0).values) EXPECT_NEAR(v, 0.3, 1e-15);
}

TEST(SmoothAndFuse, MeanOfBlurredScales) {
  auto c = small_config();
  Grid a(16, 16), b(16, 16);
  a(4, 4) = 1.0;
  b(9, 2) = 2.0;
  const std::vector<Grid> both{a, b};
  const auto fused = smooth_and_fuse(both, c);
  const auto ba = gaussian_blur(a, 4.0 / 4.0 / 2.0), bb = gaussian_blur(b, 8.0 / 4.0 / 2.0);
  for (std::size_t i = 0; i < fused.values.size(); ++i) {
    EXPECT_NEAR(fused.values[i], 0.5 * (ba.values[i] + bb.values[i]), 1e-15);
  }
  c.sizes = {8};
  const std::vector<Grid> one{b};
  EXPECT_EQ(smooth_and_fuse(one, c), bb);
  const std::vector<Grid> zeros{Grid(16, 16), Grid(16, 16)};
  for (double v : smooth_and_fuse(zeros, small_config()).values) EXPECT_EQ(v, 0.0);
  EXPECT_ERROR_KIND(smooth_and_fuse(one, small_config()), ErrorKind::kInvalidArgument);
}

Grid row_grid(const std::vector<double>& v) {
  Grid g(1, v.size());
  g.values = v;
  return g;
}

TEST(NormalizeResponse, HandRules) {
  EXPECT_EQ(normalize_response(row_grid({0, 1})).values, (std::vector<double>{0, 1}));
  EXPECT_EQ(normalize_response(row_grid({0, -1})).values, (std::vector<double>{0, 1}));
  EXPECT_EQ(normalize_response(row_grid({2, 2, 2})).values, (std::vector<double>{0, 0, 0}));
  // Mean 0.25: high peak 0.75 above, low peak 0.25 below, so no negation.
  EXPECT_EQ(normalize_response(row_grid({0, 0, 0, 1})).values, (std::vector<double>{0, 0, 0, 1}));
  EXPECT_EQ(normalize_response(row_grid({0, 0, 0, -1})).values, (std::vector<double>{0, 0, 0, 1}));
  EXPECT_EQ(normalize_response(row_grid({2, 4, 3})).values, (std::vector<double>{0, 1, 0.5}));
  EXPECT_EQ(normalize_response(row_grid({-3, 3})).values, (std::vector<double>{0, 1}));
  EXPECT_EQ(normalize_response(row_grid({1, 3})).values, (std::vector<double>{0, 1}));
}

TEST(NormalizeResponse, RangeProperty) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    Grid g(1 + rng.below(6), 1 + rng.below(6));
    for (auto& v : g.values) v = rng.uniform(-5, 5);
    const auto n = normalize_response(g);
    for (double v : n.values) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    if (g.values.size() > 1) {
      EXPECT_EQ(*std::max_element(n.values.begin(), n.values.end()), 1.0);
      EXPECT_EQ(*std::min_element(n.values.begin(), n.values.end()), 0.0);
    }
  }
}

TEST(Accumulate, WeightedAverage) {
  const std::vector<Grid> maps{row_grid({1, 0, 0.5}), row_grid({0, 1, 0.5}), row_grid({1, 1, 1})};
  const std::vector<double> scores{3, 1, 1};
  const auto m1 = accumulate(maps, scores, 1);
  EXPECT_EQ(m1.grid, maps[0]);
  EXPECT_EQ(m1.normalizer, 3.0);
  const auto m2 = accumulate(maps, scores, 2);
  EXPECT_EQ(m2.grid.values, (std::vector<double>{0.75, 0.25, 0.5}));
  EXPECT_EQ(m2.k, 2u);
  EXPECT_EQ(m2.normalizer, 4.0);
  EXPECT_ERROR_KIND(accumulate(maps, scores, 4), ErrorKind::kInvalidArgument);
  EXPECT_ERROR_KIND(accumulate(maps, scores, 0), ErrorKind::kInvalidArgument);
  const std::vector<double> rising{1, 3, 0};
  EXPECT_ERROR_KIND(accumulate(maps, rising, 2), ErrorKind::kInvalidArgument);
  const std::vector<double> zero{0, 0, 0};
  EXPECT_ERROR_KIND(accumulate(maps, zero, 2), ErrorKind::kNumerical);
}

TEST(Accumulate, MatchesFormulaAndIgnoresTiedOrder) {
  Rng rng(4);
  for (int t = 0; t < 30; ++t) {
    const std::size_t n = 2 + rng.below(8);
    std::vector<Grid> maps;
    std::vector<double> scores;
    for (std::size_t i = 0; i < n; ++i) {
      Grid g(3, 4);
      for (auto& v : g.values) v = rng.uniform();
      maps.push_back(g);
      scores.push_back(double(1 + rng.below(3)));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    std::vector<Grid> sm;
    std::vector<double> ss;
    for (auto i : order) {
      sm.push_back(maps[i]);
      ss.push_back(scores[i]);
    }
    const auto m = accumulate(sm, ss, n);
    const double z = std::accumulate(ss.begin(), ss.end(), 0.0);
    for (std::size_t p = 0; p < 12; ++p) {
      double e = 0.0;
      for (std::size_t i = 0; i < n; ++i) e += ss[i] * sm[i].values[p];
      EXPECT_NEAR(m.grid.values[p], e / z, 1e-12);
      EXPECT_GE(m.grid.values[p], 0.0);
      EXPECT_LE(m.grid.values[p], 1.0);
    }
    // Reverse within each run of equal scores.
    auto rm = sm;
    auto rs = ss;
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j < n && rs[j] == rs[i]) ++j;
      std::reverse(rm.begin() + long(i), rm.begin() + long(j));
      i = j;
    }
    const auto r = accumulate(rm, rs, n);
    for (std::size_t p = 0; p < 12; ++p) EXPECT_NEAR(r.grid.values[p], m.grid.values[p], 1e-12);
  }
}

TEST(ResponseMaps, NormalisedInPrimeOrder) {
  const auto im = square_image(32, 12, 12, 6);
  const WindowProvider p(12, 12, 6);
  PrimeUnitSet prime;
  prime.word = "red";
  prime.units = {units(2)[1], units(2)[0]};
  prime.scores = {2.0, 1.0};
  const auto comp = response_maps(p, im, "img", prime, 2, small_config());
  ASSERT_EQ(comp.responses.size(), 2u);
  EXPECT_EQ(comp.units[0].flat_index, 1u);
  for (const auto& r : comp.responses) {
    for (double v : r.values) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_ERROR_KIND(response_maps(p, im, "img", prime, 3, small_config()), ErrorKind::kInvalidArgument);
}

TEST(Upsample, ConstantAndCellCentres) {
  auto c = small_config();
  const Grid flat(16, 16, 0.4);
  const auto up = upsample_to_pixels(flat, c);
  EXPECT_EQ(up.rows, 32u);
  for (double v : up.values) EXPECT_NEAR(v, 0.4, 1e-15);
  Grid ramp(16, 16);
  for (std::size_t r = 0; r < 16; ++r) {
    for (std::size_t col = 0; col < 16; ++col) ramp(r, col) = double(col);
  }
  const auto u = upsample_to_pixels(ramp, c);
  // Cell centres sit at pixel 2g + 0.5; pixel x maps to (x + 0.5 - 1) / 2.
  EXPECT_NEAR(u(5, 0), 0.0, 1e-15);
  EXPECT_NEAR(u(5, 3), 1.25, 1e-15);
  EXPECT_NEAR(u(5, 31), 15.0, 1e-15);
}

TEST(Otsu, SplitsBimodalValues) {
  std::vector<double> v(100, 0.1);
  v.insert(v.end(), 50, 0.8);
  const double t = otsu_threshold(v);
  EXPECT_GT(t, 0.1);
  EXPECT_LE(t, 0.8);
  EXPECT_ERROR_KIND(otsu_threshold(std::vector<double>{}), ErrorKind::kInvalidArgument);
}

// Exhaustive precision/recall walk over a distinct-score ranking.
double ap_oracle(const std::vector<double>& s, const std::vector<unsigned char>& y) {
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return s[a] > s[b]; });
  const double pos = double(std::count(y.begin(), y.end(), 1));
  double ap = 0.0, prev_recall = 0.0, tp = 0.0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    tp += y[idx[k]];
    const double recall = tp / pos, precision = tp / double(k + 1);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

TEST(AveragePrecision, ThreeByThreeHandRanking) {
  const std::vector<double> s{0.9, 0.1, 0.8, 0.3, 0.7, 0.2, 0.05, 0.6, 0.4};
  const std::vector<unsigned char> y{1, 0, 0, 1, 1, 0, 0, 0, 1};
  // Ranked labels 1,0,1,0,1,1,...: precisions 1, 2/3, 3/5, 4/6.
  const double hand = (1.0 + 2.0 / 3.0 + 3.0 / 5.0 + 4.0 / 6.0) / 4.0;
  EXPECT_NEAR(average_precision(s, y), hand, 1e-15);
  EXPECT_NEAR(ap_oracle(s, y), hand, 1e-15);
}

TEST(AveragePrecision, MatchesOracleOnRandomRankings) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(50);
    std::vector<double> s(n);
    std::vector<unsigned char> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.uniform();
      y[i] = rng.bernoulli(0.4);
    }
    y[0] = 1;
    const double ap = average_precision(s, y);
    EXPECT_NEAR(ap, ap_oracle(s, y), 1e-12);
    EXPECT_GT(ap, 0.0);
    EXPECT_LE(ap, 1.0);
  }
}

TEST(AveragePrecision, TiesEnterTogether) {
  const std::vector<double> s(8, 0.5);
  const std::vector<unsigned char> y{1, 0, 0, 1, 0, 0, 1, 0};
  EXPECT_NEAR(average_precision(s, y), 3.0 / 8.0, 1e-15);
  const std::vector<unsigned char> none(8, 0);
  EXPECT_ERROR_KIND(average_precision(s, none), ErrorKind::kInvalidArgument);
}

GroundTruthMask mask_from(std::size_t w, std::size_t h, const std::vector<unsigned char>& m) {
  GroundTruthMask gt;
  gt.width = w;
  gt.height = h;
  gt.mask = m;
  return gt;
}

TEST(EvaluateSaliency, PerfectAndAllOnesMaps) {
  const std::vector<unsigned char> m{1, 1, 0, 0, 1, 1, 0, 0};
  const auto gt = mask_from(4, 2, m);
  Grid perfect(2, 4);
  for (std::size_t i = 0; i < 8; ++i) perfect.values[i] = m[i];
  const auto s = evaluate_saliency(perfect, gt);
  EXPECT_EQ(s.average_precision, 1.0);
  EXPECT_EQ(s.thresholds.size(), 9u);
  for (double v : s.iou) EXPECT_EQ(v, 1.0);
  const std::vector<double> half{0.5};
  EXPECT_EQ(evaluate_saliency(Grid(2, 4, 1.0), gt, half).iou[0], 0.5);
  const std::vector<double> zero{0.0};
  // M >= 0 everywhere, so the union is every pixel.
  Rng rng(6);
  Grid noisy(2, 4);
  for (auto& v : noisy.values) v = rng.uniform();
  EXPECT_EQ(evaluate_saliency(noisy, gt, zero).iou[0], 0.5);
  EXPECT_ERROR_KIND(evaluate_saliency(Grid(4, 2), gt), ErrorKind::kInvalidArgument);
  EXPECT_ERROR_KIND(evaluate_saliency(perfect, mask_from(4, 2, std::vector<unsigned char>(8, 0))),
                    ErrorKind::kInvalidArgument);
}

TEST(GroundTruthMask, NeedsTwoDistinctAnnotators) {
  const std::vector<BoxAnnotation> boxes{
      {"img", "red", "a", 0, 0, 4, 4}, {"img", "red", "b", 2, 2, 6, 6},
      {"img", "red", "c", 5, 5, 8, 8}, {"img", "red", "a", 3, 3, 8, 8}};
  const auto gt = ground_truth_mask(boxes, 8, 8);
  auto at = [&](std::size_t x, std::size_t y) { return gt.mask[y * 8 + x]; };
  EXPECT_EQ(at(2, 2), 1);  // a, b
  EXPECT_EQ(at(5, 5), 1);  // a (second box), b, c
  EXPECT_EQ(at(7, 7), 1);  // a, c
  EXPECT_EQ(at(1, 1), 0);  // a only
  EXPECT_EQ(at(4, 3), 1);  // a twice and b
  EXPECT_EQ(at(6, 3), 0);  // a only, counted once
  EXPECT_EQ(gt.word, "red");
  const auto one = ground_truth_mask(boxes, 8, 8, 1);
  EXPECT_GT(one.positives(), gt.positives());
  const auto clipped = ground_truth_mask(std::vector<BoxAnnotation>{{"i", "w", "a", -5, -5, 20, 2},
                                                                    {"i", "w", "b", 0, 0, 3, 30}},
                                         4, 4);
  EXPECT_EQ(clipped.positives(), 6u);
}

TEST(Annotations, LoadFromCsv) {
  TempDir dir;
  std::ofstream(dir / "a.csv") << "image_id,word,annotator,x0,y0,x1,y1\nimg,red,a,1,2,3,4\nimg,red,b,0,0,5,5\n";
  const auto boxes = load_annotations(dir / "a.csv");
  ASSERT_EQ(boxes.size(), 2u);
  EXPECT_EQ(boxes[0].y1, 4);
  EXPECT_EQ(boxes[1].annotator, "b");
  std::ofstream(dir / "bad.csv") << "image_id,word,annotator,x0,y0,x1,y1\nimg,red,a,5,2,3,4\n";
  EXPECT_ERROR_KIND(load_annotations(dir / "bad.csv"), ErrorKind::kParse);
}

}  // namespace
}  // namespace attrdisc
