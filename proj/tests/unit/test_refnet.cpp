#include <algorithm>
#include <cmath>
#include <set>

#include "attrdisc/divergence.hpp"
#include "attrdisc/refnet.hpp"
#include "attrdisc/synth.hpp"
#include "attrdisc/text_io.hpp"
#include "test_support.hpp"

namespace attrdisc {
namespace {

using testing::TempDir;

Image noise_image(std::uint64_t seed, std::size_t side = 64) {
  Rng rng(seed);
  Image im(side, side);
  for (auto& v : im.data) v = static_cast<float>(rng.uniform());
  return im;
}

TEST(RefNet, SmallSchemaHasFourHundredUnits) {
  const RefNet net(RefNetSpec::small());
  EXPECT_EQ(net.unit_count(), 400u);
  ASSERT_EQ(net.schema().size(), 7u);
  EXPECT_EQ(net.schema()[0].name, "conv1");
  EXPECT_EQ(net.schema()[1].name, "norm1");
  EXPECT_EQ(net.schema().back().kind, LayerKind::kFc);
  EXPECT_EQ(net.forward(noise_image(1)).size(), 400u);
}

TEST(RefNet, DeterministicAndFinite) {
  const RefNet a(RefNetSpec::small()), b(RefNetSpec::small());
  const auto im = noise_image(2);
  const auto va = a.forward(im);
  EXPECT_EQ(va, a.forward(im));
  EXPECT_EQ(va, b.forward(im));
  for (float v : va) EXPECT_TRUE(std::isfinite(v));
  const RefNet other(RefNetSpec::small(7));
  EXPECT_NE(va, other.forward(im));
}

TEST(RefNet, BlackAndWhiteDiffer) {
  const RefNet net(RefNetSpec::small());
  EXPECT_NE(net.forward(Image(64, 64, 0.0f)), net.forward(Image(64, 64, 1.0f)));
}

TEST(RefNet, OpponentUnitsIgnoreGray) {
  const RefNet net(RefNetSpec::small());
  for (float level : {0.0f, 0.3f, 0.9f}) {
    const auto v = net.forward(Image(64, 64, level));
    for (std::size_t u = 0; u < 8; ++u) EXPECT_NEAR(v[u], 0.0f, 1e-5f) << u;
  }
  Image red(64, 64, 0.1f);
  for (std::size_t i = 0; i < red.data.size(); i += 3) red.data[i] = 0.9f;
  const auto v = net.forward(red);
  EXPECT_GT(*std::max_element(v.begin(), v.begin() + 8), 0.01f);
}

TEST(RefNet, SizeContract) {
  const RefNet net(RefNetSpec::small());
  EXPECT_ERROR_KIND(net.forward(Image(32, 32)), ErrorKind::kInvalidArgument);
  EXPECT_EQ(net.activations(noise_image(3, 96)).size(), 400u);
  EXPECT_EQ(net.activations(noise_image(3)), net.forward(noise_image(3)));
}

TEST(RefNet, ForwardAllIndependentOfJobs) {
  const RefNet net(RefNetSpec::small());
  const std::vector<std::string> ids{"a", "b", "c"};
  const std::vector<Image> images{noise_image(4), noise_image(5), Image(64, 64, 0.5f)};
  const auto m1 = net.forward_all(ids, images, 1);
  const auto m3 = net.forward_all(ids, images, 3);
  EXPECT_TRUE(m1 == m3);
  EXPECT_EQ(m1.layers(), net.schema());
  const auto row = m1.row(1);
  EXPECT_EQ(std::vector<float>(row.begin(), row.end()), net.forward(images[1]));
}

TEST(RefNetSpec, JsonRoundTrip) {
  const auto spec = RefNetSpec::small(99);
  EXPECT_EQ(parse_refnet_spec(serialize_refnet_spec(spec)), spec);
  EXPECT_ERROR_KIND(parse_refnet_spec("{\"blocks\": 3}"), ErrorKind::kParse);
  EXPECT_ANY_THROW(parse_block_kind("dense"));
}

TEST(SynthSpec, JsonRoundTripAndValidation) {
  const auto spec = SyntheticCorpusSpec::standard(5);
  EXPECT_EQ(parse_synth_spec(serialize_synth_spec(spec)), spec);
  auto bad = spec;
  bad.label_flip_rate = 1.5;
  EXPECT_ERROR_KIND(bad.validate(), ErrorKind::kInvalidArgument);
  bad = spec;
  bad.planted[0].region = {60, 60, 70, 70};
  EXPECT_ANY_THROW(bad.validate());
}

double flip_fraction(const std::vector<ImageLayout>& layouts) {
  std::size_t carried = 0, flipped = 0;
  for (const auto& L : layouts) {
    for (const auto& p : L.patterns) {
      ++carried;
      flipped += !p.labelled;
    }
  }
  return double(flipped) / double(carried);
}

TEST(SampleLayouts, FlipRateMatchesSpec) {
  auto spec = SyntheticCorpusSpec::standard();
  spec.n_images = 2000;
  const auto layouts = sample_layouts(spec);
  ASSERT_EQ(layouts.size(), 2000u);
  EXPECT_NEAR(flip_fraction(layouts), 0.2, 0.02);
  for (const auto& L : layouts) {
    const std::set<std::string> words(L.words.begin(), L.words.end());
    for (std::size_t k = 0; k < spec.planted.size(); ++k) {
      // A planted word never appears without its pattern.
      if (words.contains(spec.planted[k].word)) EXPECT_TRUE(L.has_pattern(k));
    }
  }
}

TEST(SampleLayouts, NoiselessLabelsTrackPatterns) {
  auto spec = SyntheticCorpusSpec::standard();
  spec.n_images = 500;
  spec.label_flip_rate = 0.0;
  for (const auto& L : sample_layouts(spec)) {
    const std::set<std::string> words(L.words.begin(), L.words.end());
    for (std::size_t k = 0; k < spec.planted.size(); ++k) {
      EXPECT_EQ(words.contains(spec.planted[k].word), L.has_pattern(k));
    }
  }
}

TEST(SampleLayouts, DistractorsIndependentOfPatterns) {
  auto spec = SyntheticCorpusSpec::standard();
  spec.n_images = 4000;
  const auto layouts = sample_layouts(spec);
  for (const auto& d : spec.distractors) {
    for (std::size_t k = 0; k < spec.planted.size(); ++k) {
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      for (const auto& L : layouts) {
        const double x = std::binary_search(L.words.begin(), L.words.end(), d.word) ? 1.0 : 0.0;
        const double y = L.has_pattern(k) ? 1.0 : 0.0;
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
      }
      const double n = double(layouts.size());
      const double r = (sxy - sx * sy / n) / std::sqrt((sxx - sx * sx / n) * (syy - sy * sy / n));
      EXPECT_LT(std::abs(r), 0.05) << d.word << " vs " << spec.planted[k].word;
    }
  }
}

TEST(SampleLayouts, SplitsAndSeeding) {
  auto spec = SyntheticCorpusSpec::standard();
  spec.n_images = 1000;
  const auto a = sample_layouts(spec);
  std::size_t train = 0, test = 0;
  for (const auto& L : a) {
    train += L.split == Split::kTrain;
    test += L.split == Split::kTest;
  }
  EXPECT_NEAR(double(train) / 1000.0, 0.5, 0.05);
  EXPECT_NEAR(double(test) / 1000.0, 0.4, 0.05);
  const auto b = sample_layouts(spec);
  EXPECT_EQ(a[17].words, b[17].words);
  spec.seed = 43;
  const auto c = sample_layouts(spec);
  std::size_t same = 0;
  for (std::size_t i = 0; i < 1000; ++i) same += a[i].words == c[i].words;
  EXPECT_LT(same, 200u);
}

TEST(GroundTruth, MatchesPerfectDetectorOnSamples) {
  auto spec = SyntheticCorpusSpec::standard();
  spec.n_images = 20000;
  const auto truth = ground_truth(spec);
  const auto layouts = sample_layouts(spec);
  for (std::size_t k = 0; k < spec.planted.size(); ++k) {
    double tp = 0, pos = 0, tn = 0, neg = 0;
    for (const auto& L : layouts) {
      const bool labelled = std::binary_search(L.words.begin(), L.words.end(), spec.planted[k].word);
      const bool detected = L.has_pattern(k);
      (labelled ? pos : neg) += 1;
      if (labelled && detected) tp += 1;
      if (!labelled && !detected) tn += 1;
    }
    EXPECT_NEAR(0.5 * (tp / pos + tn / neg), truth[k].visualness, 0.01) << spec.planted[k].word;
  }
  for (std::size_t k = spec.planted.size(); k < truth.size(); ++k) EXPECT_EQ(truth[k].visualness, 0.5);
  // Rarer patterns lose fewer true images to flips relative to the negatives.
  for (std::size_t k = 1; k < spec.planted.size(); ++k) EXPECT_GT(truth[k - 1].visualness, truth[k].visualness);
}

TEST(GenerateCorpus, PlantedColourWordSeparatesFromDistractors) {
  auto spec = SyntheticCorpusSpec::standard();
  spec.n_images = 600;
  const auto corpus = generate_corpus(spec, RefNetSpec::small());
  EXPECT_EQ(corpus.images.size(), 600u);
  EXPECT_EQ(corpus.activations.rows(), 600u);
  EXPECT_EQ(corpus.manifest.records().size(), 600u);
  auto part = [&](const std::string& word) {
    DatasetPartition p{word, Split::kTrain, {}, {}};
    for (const auto& L : corpus.layouts) {
      (std::binary_search(L.words.begin(), L.words.end(), word) ? p.positive_ids : p.negative_ids).push_back(L.id);
    }
    return p;
  };
  std::vector<double> distractor_scores;
  for (const auto& d : spec.distractors) {
    for (const auto& u : divergence_profile(corpus.activations, part(d.word))) distractor_scores.push_back(u.score);
  }
  std::sort(distractor_scores.begin(), distractor_scores.end());
  const double p99 = distractor_scores[std::size_t(0.99 * double(distractor_scores.size()))];
  for (const char* word : {"red", "blue", "green"}) {
    const auto profile = divergence_profile(corpus.activations, part(word));
    const auto best = std::max_element(profile.begin(), profile.end(),
                                       [](const auto& a, const auto& b) { return a.score < b.score; });
    EXPECT_GT(best->score, p99) << word;
  }
}

TEST(GenerateCorpus, AnnotationsCoverPlacedPatterns) {
  auto spec = SyntheticCorpusSpec::standard();
  spec.n_images = 60;
  const auto corpus = generate_corpus(spec, RefNetSpec::small());
  ASSERT_FALSE(corpus.annotations.empty());
  for (const auto& b : corpus.annotations) {
    EXPECT_LE(b.x1, long(spec.image_side));
    EXPECT_LE(b.y1, long(spec.image_side));
  }
  const auto& L = corpus.layouts[0];
  std::size_t boxes_for_first = 0;
  for (const auto& b : corpus.annotations) boxes_for_first += b.image_id == L.id;
  std::size_t labelled = 0;
  for (const auto& p : L.patterns) labelled += p.labelled;
  EXPECT_EQ(boxes_for_first, labelled * spec.box_annotators);
  EXPECT_FALSE(corpus.votes.empty());
}

TEST(GenerateCorpus, WrittenDirectoryIsDeterministic) {
  auto spec = SyntheticCorpusSpec::standard();
  spec.n_images = 40;
  TempDir a, b;
  write_corpus(generate_corpus(spec, RefNetSpec::small()), a.path());
  write_corpus(generate_corpus(spec, RefNetSpec::small(), 2), b.path());
  for (const char* f : {"manifest.jsonl", "activations.actv", "annotations.csv", "votes.csv", "truth.csv",
                        "refnet.json", "synth.json"}) {
    EXPECT_EQ(read_file(a / f), read_file(b / f)) << f;
  }
  const auto back = read_activations(a / "activations.actv");
  EXPECT_EQ(back.rows(), 40u);
  EXPECT_EQ(load_refnet_spec(a / "refnet.json"), RefNetSpec::small());
  EXPECT_EQ(load_synth_spec(a / "synth.json"), spec);
}

}  // namespace
}  // namespace attrdisc
