#include "attrdisc/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <set>

#include <fmt/format.h>

#include "attrdisc/error.hpp"
#include "attrdisc/parallel.hpp"
#include "attrdisc/text_io.hpp"
#include "json.hpp"

namespace attrdisc {

using nlohmann::json;

std::string_view to_string(PatternKind kind) {
  switch (kind) {
    case PatternKind::kNone: return "none";
    case PatternKind::kColorPatch: return "color";
    case PatternKind::kStripes: return "stripes";
  }
  return "?";
}

PatternKind parse_pattern_kind(std::string_view text) {
  if (text == "none") return PatternKind::kNone;
  if (text == "color") return PatternKind::kColorPatch;
  if (text == "stripes") return PatternKind::kStripes;
  throw Error(ErrorKind::kFormat, fmt::format("unknown pattern kind '{}'", text));
}

SyntheticCorpusSpec SyntheticCorpusSpec::standard(std::uint64_t seed) {
  SyntheticCorpusSpec s;
  s.seed = seed;
  auto color = [](std::string word, std::array<float, 3> rgb, double prevalence) {
    return PlantedWord{std::move(word), {PatternKind::kColorPatch, rgb, false, 4, 14}, prevalence, {}};
  };
  auto stripes = [](std::string word, bool vertical, double prevalence) {
    return PlantedWord{std::move(word), {PatternKind::kStripes, {0, 0, 0}, vertical, 4, 16}, prevalence, {}};
  };
  s.planted = {color("red", {0.9f, 0.1f, 0.1f}, 0.1), color("blue", {0.1f, 0.2f, 0.9f}, 0.2),
               stripes("striped", false, 0.3), color("green", {0.1f, 0.8f, 0.2f}, 0.4),
               stripes("pinstriped", true, 0.5)};
  for (const char* w : {"cute", "gift", "handmade", "unique", "vintage"}) s.distractors.push_back({w, 0.5});
  return s;
}

void SyntheticCorpusSpec::validate() const {
  if (n_images < 1) throw Error(ErrorKind::kInvalidArgument, "n_images must be >= 1");
  if (image_side < 8) throw Error(ErrorKind::kInvalidArgument, "image_side must be >= 8");
  if (n_shops < 1) throw Error(ErrorKind::kInvalidArgument, "n_shops must be >= 1");
  if (!(train_fraction > 0.0 && test_fraction > 0.0 && train_fraction + test_fraction <= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "split fractions must be positive and sum to at most 1");
  }
  if (!(label_flip_rate >= 0.0 && label_flip_rate <= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "label_flip_rate must lie in [0, 1]");
  }
  std::set<std::string, std::less<>> words;
  for (const auto& p : planted) {
    if (!words.insert(p.word).second) throw Error(ErrorKind::kInvalidArgument, fmt::format("word '{}' repeated", p.word));
    if (!(p.prevalence >= 0.0 && p.prevalence <= 1.0)) {
      throw Error(ErrorKind::kInvalidArgument, fmt::format("prevalence of '{}' outside [0, 1]", p.word));
    }
    if (p.pattern.kind == PatternKind::kNone) continue;
    const Region r = p.region == Region{} ? Region{0, 0, image_side, image_side} : p.region;
    if (r.x1 > image_side || r.y1 > image_side || r.x0 >= r.x1 || r.y0 >= r.y1) {
      throw Error(ErrorKind::kOutOfRange, fmt::format("region of '{}' lies outside the {}x{} image", p.word,
                                                      image_side, image_side));
    }
    if (p.pattern.size < 2 || p.pattern.size > r.x1 - r.x0 || p.pattern.size > r.y1 - r.y0) {
      throw Error(ErrorKind::kOutOfRange, fmt::format("pattern of '{}' does not fit its region", p.word));
    }
    if (p.pattern.kind == PatternKind::kStripes && p.pattern.period < 2) {
      throw Error(ErrorKind::kInvalidArgument, fmt::format("stripe period of '{}' must be >= 2", p.word));
    }
  }
  for (const auto& d : distractors) {
    if (!words.insert(d.word).second) throw Error(ErrorKind::kInvalidArgument, fmt::format("word '{}' repeated", d.word));
    if (!(d.rate >= 0.0 && d.rate <= 1.0)) {
      throw Error(ErrorKind::kInvalidArgument, fmt::format("rate of '{}' outside [0, 1]", d.word));
    }
  }
}

std::string serialize_synth_spec(const SyntheticCorpusSpec& spec) {
  json j;
  j["n_images"] = spec.n_images;
  j["image_side"] = spec.image_side;
  j["n_shops"] = spec.n_shops;
  j["objects_per_image"] = spec.objects_per_image;
  j["label_flip_rate"] = spec.label_flip_rate;
  j["train_fraction"] = spec.train_fraction;
  j["test_fraction"] = spec.test_fraction;
  j["box_annotators"] = spec.box_annotators;
  j["vote_pairs"] = spec.vote_pairs;
  j["vote_annotators"] = spec.vote_annotators;
  j["seed"] = spec.seed;
  j["planted"] = json::array();
  for (const auto& p : spec.planted) {
    json jp{{"word", p.word}, {"pattern", to_string(p.pattern.kind)}, {"prevalence", p.prevalence}};
    if (p.pattern.kind != PatternKind::kNone) jp["size"] = p.pattern.size;
    if (p.pattern.kind == PatternKind::kColorPatch) jp["color"] = p.pattern.color;
    if (p.pattern.kind == PatternKind::kStripes) {
      jp["vertical"] = p.pattern.vertical;
      jp["period"] = p.pattern.period;
    }
    if (p.region != Region{}) jp["region"] = {p.region.x0, p.region.y0, p.region.x1, p.region.y1};
    j["planted"].push_back(std::move(jp));
  }
  j["distractors"] = json::array();
  for (const auto& d : spec.distractors) j["distractors"].push_back({{"word", d.word}, {"rate", d.rate}});
  return j.dump(2) + "\n";
}

SyntheticCorpusSpec parse_synth_spec(std::string_view text, std::string_view source) {
  SyntheticCorpusSpec spec;
  try {
    const json j = json::parse(text);
    spec.n_images = j.value("n_images", spec.n_images);
    spec.image_side = j.value("image_side", spec.image_side);
    spec.n_shops = j.value("n_shops", spec.n_shops);
    spec.objects_per_image = j.value("objects_per_image", spec.objects_per_image);
    spec.label_flip_rate = j.value("label_flip_rate", spec.label_flip_rate);
    spec.train_fraction = j.value("train_fraction", spec.train_fraction);
    spec.test_fraction = j.value("test_fraction", spec.test_fraction);
    spec.box_annotators = j.value("box_annotators", spec.box_annotators);
    spec.vote_pairs = j.value("vote_pairs", spec.vote_pairs);
    spec.vote_annotators = j.value("vote_annotators", spec.vote_annotators);
    spec.seed = j.value("seed", spec.seed);
    for (const auto& jp : j.value("planted", json::array())) {
      PlantedWord p;
      p.word = jp.at("word").get<std::string>();
      p.pattern.kind = parse_pattern_kind(jp.value("pattern", std::string("none")));
      p.prevalence = jp.value("prevalence", p.prevalence);
      p.pattern.size = jp.value("size", p.pattern.size);
      if (jp.contains("color")) p.pattern.color = jp.at("color").get<std::array<float, 3>>();
      p.pattern.vertical = jp.value("vertical", false);
      p.pattern.period = jp.value("period", p.pattern.period);
      if (jp.contains("region")) {
        const auto r = jp.at("region").get<std::array<std::size_t, 4>>();
        p.region = {r[0], r[1], r[2], r[3]};
      }
      spec.planted.push_back(std::move(p));
    }
    for (const auto& jd : j.value("distractors", json::array())) {
      spec.distractors.push_back({jd.at("word").get<std::string>(), jd.value("rate", 0.5)});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kParse, fmt::format("{}: {}", source, e.what()));
  }
  spec.validate();
  return spec;
}

SyntheticCorpusSpec load_synth_spec(const std::filesystem::path& path) {
  return parse_synth_spec(read_file(path), path.string());
}

bool ImageLayout::has_pattern(std::size_t planted_index) const {
  return std::any_of(patterns.begin(), patterns.end(),
                     [&](const PlacedPattern& p) { return p.planted_index == planted_index; });
}

namespace {

constexpr std::size_t kPatternGap = 2;
constexpr std::size_t kPlacementTries = 1000;

bool overlaps(const Region& a, const Region& b) {
  return a.x0 < b.x1 + kPatternGap && b.x0 < a.x1 + kPatternGap && a.y0 < b.y1 + kPatternGap &&
         b.y0 < a.y1 + kPatternGap;
}

std::string image_id(std::size_t i) { return fmt::format("img{:05d}", i); }

}  // namespace

std::vector<ImageLayout> sample_layouts(const SyntheticCorpusSpec& spec) {
  spec.validate();
  std::vector<ImageLayout> layouts(spec.n_images);

  std::vector<std::size_t> order(spec.n_images);
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(Rng::derive(spec.seed, "split"));
  split_rng.shuffle(std::span<std::size_t>(order));
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train_fraction * double(spec.n_images)));
  const auto n_test = static_cast<std::size_t>(std::floor(spec.test_fraction * double(spec.n_images)));
  for (std::size_t r = 0; r < order.size(); ++r) {
    layouts[order[r]].split = r < n_train ? Split::kTrain : (r < n_train + n_test ? Split::kTest : Split::kValidation);
  }

  std::vector<std::size_t> filler_sizes;
  for (const auto& p : spec.planted) {
    if (p.pattern.kind != PatternKind::kNone) filler_sizes.push_back(p.pattern.size);
  }

  for (std::size_t i = 0; i < spec.n_images; ++i) {
    auto& L = layouts[i];
    L.id = image_id(i);
    Rng rng(Rng::derive(spec.seed, "layout:" + L.id));
    Rng flips(Rng::derive(spec.seed, "flip:" + L.id));
    Rng extra(Rng::derive(spec.seed, "distractor:" + L.id));
    L.shop_id = fmt::format("shop{:03d}", rng.below(spec.n_shops));
    const float gray = static_cast<float>(rng.uniform(0.25, 0.75));
    for (auto& c : L.background) c = std::clamp(gray + static_cast<float>(rng.uniform(-0.03, 0.03)), 0.0f, 1.0f);

    const Region whole{0, 0, spec.image_side, spec.image_side};
    auto free_at = [&](const Region& rect) {
      return std::none_of(L.patterns.begin(), L.patterns.end(),
                          [&](const PlacedPattern& q) { return overlaps(q.rect, rect); }) &&
             std::none_of(L.fillers.begin(), L.fillers.end(),
                          [&](const FillerObject& q) { return overlaps(q.rect, rect); });
    };
    auto place = [&](const Region& area, std::size_t z) -> std::optional<Region> {
      for (std::size_t t = 0; t < kPlacementTries; ++t) {
        const std::size_t x0 = area.x0 + rng.below(area.x1 - area.x0 - z + 1);
        const std::size_t y0 = area.y0 + rng.below(area.y1 - area.y0 - z + 1);
        const Region rect{x0, y0, x0 + z, y0 + z};
        if (free_at(rect)) return rect;
      }
      return std::nullopt;
    };

    for (std::size_t p = 0; p < spec.planted.size(); ++p) {
      const auto& pw = spec.planted[p];
      if (!rng.bernoulli(pw.prevalence)) continue;
      const bool labelled = !flips.bernoulli(spec.label_flip_rate);
      if (labelled) L.words.push_back(pw.word);
      if (pw.pattern.kind == PatternKind::kNone) continue;
      const Region area = pw.region == Region{} ? whole : pw.region;
      const auto rect = place(area, pw.pattern.size);
      if (!rect) {
        throw Error(ErrorKind::kOutOfRange,
                    fmt::format("could not place the '{}' pattern in image {} without overlap", pw.word, L.id));
      }
      L.patterns.push_back({p, *rect, labelled});
    }
    while (!filler_sizes.empty() && L.patterns.size() + L.fillers.size() < spec.objects_per_image) {
      const std::size_t z = filler_sizes[rng.below(filler_sizes.size())];
      const double offset = rng.uniform(0.1, 0.3);
      const double level = std::clamp(double(gray) + (rng.bernoulli(0.5) ? offset : -offset), 0.0, 1.0);
      const auto rect = place(whole, z);
      if (!rect) break;
      L.fillers.push_back({*rect, static_cast<float>(level)});
    }
    for (const auto& d : spec.distractors) {
      if (extra.bernoulli(d.rate)) L.words.push_back(d.word);
    }
    std::sort(L.words.begin(), L.words.end());
  }
  return layouts;
}

Image render_image(const SyntheticCorpusSpec& spec, const ImageLayout& layout) {
  const std::size_t side = spec.image_side;
  Image im(side, side);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      for (std::size_t c = 0; c < 3; ++c) im.at(x, y, c) = layout.background[c];
    }
  }
  for (const auto& f : layout.fillers) {
    for (std::size_t y = f.rect.y0; y < f.rect.y1; ++y) {
      for (std::size_t x = f.rect.x0; x < f.rect.x1; ++x) {
        for (std::size_t c = 0; c < 3; ++c) im.at(x, y, c) = f.level;
      }
    }
  }
  Rng rng(Rng::derive(spec.seed, "pixels:" + layout.id));
  for (const auto& placed : layout.patterns) {
    const auto& pattern = spec.planted[placed.planted_index].pattern;
    std::array<float, 3> color = pattern.color;
    for (auto& c : color) c = std::clamp(c + static_cast<float>(rng.uniform(-0.05, 0.05)), 0.0f, 1.0f);
    for (std::size_t y = placed.rect.y0; y < placed.rect.y1; ++y) {
      for (std::size_t x = placed.rect.x0; x < placed.rect.x1; ++x) {
        for (std::size_t c = 0; c < 3; ++c) {
          if (pattern.kind == PatternKind::kColorPatch) {
            im.at(x, y, c) = color[c];
          } else {
            const std::size_t phase = pattern.vertical ? x - placed.rect.x0 : y - placed.rect.y0;
            im.at(x, y, c) = (phase % pattern.period) < pattern.period / 2 ? 0.15f : 0.85f;
          }
        }
      }
    }
  }
  for (auto& v : im.data) {
    const double noisy = std::clamp(double(v) + rng.uniform(-0.02, 0.02), 0.0, 1.0);
    v = static_cast<float>(std::round(noisy * 255.0) / 255.0);
  }
  return im;
}

std::vector<WordTruth> ground_truth(const SyntheticCorpusSpec& spec) {
  std::vector<WordTruth> truth;
  const double f = spec.label_flip_rate;
  for (const auto& p : spec.planted) {
    WordTruth t{p.word, p.pattern.kind, p.prevalence, 0.5};
    const double pi = p.prevalence;
    const double labelled_negatives = (1.0 - pi) + pi * f;
    if (p.pattern.kind != PatternKind::kNone && pi > 0.0 && pi < 1.0 && f < 1.0) {
      t.visualness = 0.5 * (1.0 + (1.0 - pi) / labelled_negatives);
    }
    truth.push_back(std::move(t));
  }
  for (const auto& d : spec.distractors) truth.push_back({d.word, PatternKind::kNone, d.rate, 0.5});
  return truth;
}

SyntheticCorpus generate_corpus(const SyntheticCorpusSpec& spec, const RefNetSpec& net, std::size_t jobs) {
  SyntheticCorpus out;
  out.spec = spec;
  out.net = net;
  out.layouts = sample_layouts(spec);
  out.truth = ground_truth(spec);

  const RefNet refnet(net);
  if (net.input_side != spec.image_side) {
    throw Error(ErrorKind::kInvalidArgument, fmt::format("refnet input side {} differs from image side {}",
                                                         net.input_side, spec.image_side));
  }

  std::vector<ImageRecord> records;
  std::vector<std::string> ids;
  out.images.resize(out.layouts.size());
  parallel_for(out.layouts.size(), jobs, [&](std::size_t i) { out.images[i] = render_image(spec, out.layouts[i]); });
  for (const auto& L : out.layouts) {
    ImageRecord r;
    r.id = L.id;
    r.shop_id = L.shop_id;
    r.title_tokens = L.words;
    r.title_tokens.push_back("item");
    for (int t = 0; t < 6; ++t) r.description_tokens.push_back(fmt::format("{}t{}", L.id, t));
    r.candidate_words = L.words;
    r.image_path = "images/" + L.id + ".ppm";
    r.split = L.split;
    records.push_back(std::move(r));
    ids.push_back(L.id);

    for (const auto& placed : L.patterns) {
      const auto& word = spec.planted[placed.planted_index].word;
      for (std::size_t a = 0; a < spec.box_annotators; ++a) {
        out.annotations.push_back({L.id, word, fmt::format("a{}", a + 1), long(placed.rect.x0), long(placed.rect.y0),
                                   long(placed.rect.x1), long(placed.rect.y1)});
      }
    }
  }
  out.manifest = CorpusManifest(std::move(records));
  out.activations = refnet.forward_all(ids, out.images, jobs);

  for (const auto& t : out.truth) {
    Rng rng(Rng::derive(spec.seed, "votes:" + t.word));
    for (std::size_t pair = 0; pair < spec.vote_pairs; ++pair) {
      PairVote v{t.word, pair, 0, spec.vote_annotators};
      for (std::size_t a = 0; a < spec.vote_annotators; ++a) v.positive_votes += rng.bernoulli(t.visualness);
      out.votes.push_back(std::move(v));
    }
  }
  return out;
}

void write_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  save_manifest(corpus.manifest, dir / "manifest.jsonl");
  write_activations(corpus.activations, dir / "activations.actv");
  for (std::size_t i = 0; i < corpus.images.size(); ++i) {
    write_ppm(corpus.images[i], dir / "images" / (corpus.layouts[i].id + ".ppm"));
  }

  std::string ann = "image_id,word,annotator,x0,y0,x1,y1\n";
  for (const auto& b : corpus.annotations) {
    ann += fmt::format("{},{},{},{},{},{},{}\n", b.image_id, csv_escape(b.word), b.annotator, b.x0, b.y0, b.x1, b.y1);
  }
  write_file_atomic(dir / "annotations.csv", ann);

  std::string votes = "word,pair_index,positive_votes,annotators\n";
  for (const auto& v : corpus.votes) {
    votes += fmt::format("{},{},{},{}\n", csv_escape(v.word), v.pair_index, v.positive_votes, v.annotators);
  }
  write_file_atomic(dir / "votes.csv", votes);

  std::string truth = "word,pattern,prevalence,visualness\n";
  for (const auto& t : corpus.truth) {
    truth += fmt::format("{},{},{},{}\n", csv_escape(t.word), to_string(t.kind), format_fixed(t.prevalence, 6),
                         format_fixed(t.visualness, 6));
  }
  write_file_atomic(dir / "truth.csv", truth);

  std::string regions = "image_id,word,x0,y0,x1,y1,labelled\n";
  for (const auto& L : corpus.layouts) {
    for (const auto& p : L.patterns) {
      regions += fmt::format("{},{},{},{},{},{},{}\n", L.id, csv_escape(corpus.spec.planted[p.planted_index].word),
                             p.rect.x0, p.rect.y0, p.rect.x1, p.rect.y1, p.labelled ? 1 : 0);
    }
  }
  write_file_atomic(dir / "regions.csv", regions);
  write_file_atomic(dir / "refnet.json", serialize_refnet_spec(corpus.net));
  write_file_atomic(dir / "synth.json", serialize_synth_spec(corpus.spec));
}

}  // namespace attrdisc
