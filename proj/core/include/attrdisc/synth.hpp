#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "attrdisc/actstore.hpp"
#include "attrdisc/corpus.hpp"
#include "attrdisc/image.hpp"
#include "attrdisc/perception.hpp"
#include "attrdisc/refnet.hpp"
#include "attrdisc/rng.hpp"
#include "attrdisc/saliency.hpp"

namespace attrdisc {

enum class PatternKind { kNone, kColorPatch, kStripes };

std::string_view to_string(PatternKind kind);
PatternKind parse_pattern_kind(std::string_view text);

struct PatternSpec {
  PatternKind kind = PatternKind::kNone;
  std::array<float, 3> color{0.0f, 0.0f, 0.0f};  // color patch
  bool vertical = false;                          // stripes
  std::size_t period = 4;                         // stripes, pixels per dark+light cycle
  std::size_t size = 14;                          // square side in pixels

  bool operator==(const PatternSpec&) const = default;
};

// Pixel rectangle [x0, x1) x [y0, y1).
struct Region {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool operator==(const Region&) const = default;
};

struct PlantedWord {
  std::string word;
  PatternSpec pattern;
  double prevalence = 0.3;  // fraction of images carrying the pattern
  Region region;            // where the pattern may be placed; empty = whole image

  bool operator==(const PlantedWord&) const = default;
};

struct DistractorWord {
  std::string word;
  double rate = 0.5;  // attached independently of every pattern

  bool operator==(const DistractorWord&) const = default;
};

// A planted word is dropped from an image that carries its pattern with
// probability label_flip_rate; images without the pattern never get it.
struct SyntheticCorpusSpec {
  std::size_t n_images = 2000;
  std::size_t image_side = 64;
  std::size_t n_shops = 100;
  // Images are topped up with plain gray squares to this many objects, so
  // object count carries no label information.
  std::size_t objects_per_image = 4;
  std::vector<PlantedWord> planted;
  std::vector<DistractorWord> distractors;
  double label_flip_rate = 0.2;
  double train_fraction = 0.5;
  double test_fraction = 0.4;  // the rest is validation
  std::size_t box_annotators = 3;
  std::size_t vote_pairs = 50;
  std::size_t vote_annotators = 5;
  std::uint64_t seed = kDefaultSeed;

  // red, blue, striped, green, pinstriped at prevalences 0.1 ... 0.5 and
  // five distractors at rate 0.5.
  static SyntheticCorpusSpec standard(std::uint64_t seed = kDefaultSeed);

  void validate() const;
  bool operator==(const SyntheticCorpusSpec&) const = default;
};

std::string serialize_synth_spec(const SyntheticCorpusSpec& spec);
SyntheticCorpusSpec parse_synth_spec(std::string_view text, std::string_view source = "<memory>");
SyntheticCorpusSpec load_synth_spec(const std::filesystem::path& path);

struct PlacedPattern {
  std::size_t planted_index = 0;
  Region rect;
  bool labelled = false;  // false when the word was flipped off
};

struct FillerObject {
  Region rect;
  float level = 0.5f;  // flat achromatic intensity
};

struct ImageLayout {
  std::string id;
  std::string shop_id;
  Split split = Split::kTrain;
  std::vector<PlacedPattern> patterns;
  std::vector<FillerObject> fillers;
  std::vector<std::string> words;  // attached candidate words, sorted
  std::array<float, 3> background{0.5f, 0.5f, 0.5f};

  bool has_pattern(std::size_t planted_index) const;
};

// Draws pattern placement and word attachment without rendering.
std::vector<ImageLayout> sample_layouts(const SyntheticCorpusSpec& spec);
Image render_image(const SyntheticCorpusSpec& spec, const ImageLayout& layout);

struct WordTruth {
  std::string word;
  PatternKind kind = PatternKind::kNone;
  double prevalence = 0.0;
  // Best balanced accuracy reachable on the noisy labels by a perfect
  // pattern detector; 0.5 for words without a pattern.
  double visualness = 0.5;
};

struct SyntheticCorpus {
  SyntheticCorpusSpec spec;
  RefNetSpec net;
  std::vector<ImageLayout> layouts;
  CorpusManifest manifest;
  std::vector<Image> images;
  ActivationMatrix activations;
  std::vector<WordTruth> truth;
  std::vector<BoxAnnotation> annotations;
  std::vector<PairVote> votes;
};

std::vector<WordTruth> ground_truth(const SyntheticCorpusSpec& spec);

SyntheticCorpus generate_corpus(const SyntheticCorpusSpec& spec, const RefNetSpec& net, std::size_t jobs = 1);

// manifest.jsonl, activations.actv, images/<id>.ppm, annotations.csv,
// votes.csv, truth.csv, regions.csv, refnet.json, synth.json.
void write_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir);

}  // namespace attrdisc
