#include "attrdisc/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <tuple>
#include <utility>

#include <fmt/format.h>

#include "attrdisc/actstore.hpp"
#include "attrdisc/classify.hpp"
#include "attrdisc/corpus.hpp"
#include "attrdisc/divergence.hpp"
#include "attrdisc/error.hpp"
#include "attrdisc/image.hpp"
#include "attrdisc/parallel.hpp"
#include "attrdisc/perception.hpp"
#include "attrdisc/text_io.hpp"
#include "json.hpp"

namespace attrdisc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kScoreDecimals = 12;
constexpr int kGridDecimals = 10;
constexpr int kDivergenceDecimals = 6;

std::string_view alignment_name(OccluderAlignment a) {
  return a == OccluderAlignment::kCenter ? "center" : "top-left";
}

OccluderAlignment parse_alignment(std::string_view text) {
  if (text == "center") return OccluderAlignment::kCenter;
  if (text == "top-left") return OccluderAlignment::kTopLeft;
  throw Error(ErrorKind::kInvalidArgument, fmt::format("unknown occluder alignment '{}'", text));
}

json knobs_json(const PipelineConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["dedup_threshold"] = c.dedup_threshold;
  j["top_vocab"] = c.top_vocab;
  j["bins"] = c.bins;
  j["alpha"] = c.alpha;
  j["prime_k"] = c.prime_k;
  j["resample_fraction"] = c.resample_fraction;
  j["l2"] = c.l2;
  j["max_epochs"] = c.max_epochs;
  j["tolerance"] = c.tolerance;
  j["theta"] = c.theta;
  j["occluder_sizes"] = c.occluder_sizes;
  j["stride"] = c.stride;
  j["input_side"] = c.input_side;
  j["alignment"] = alignment_name(c.alignment);
  j["accumulate_k"] = c.accumulate_k;
  j["eval_words"] = c.eval_words;
  j["saliency_words"] = c.saliency_words;
  j["saliency_images"] = c.saliency_images;
  j["iou_thresholds"] = c.iou_thresholds;
  j["words"] = c.words;
  return j;
}

fs::path out_file(const PipelineConfig& c, std::string_view name) { return c.paths.out / fs::path(std::string(name)); }

void require_input(const fs::path& path, std::string_view flag) {
  if (path.empty()) throw Error(ErrorKind::kMissingInput, fmt::format("no {} given", flag));
  if (!fs::exists(path)) throw Error(ErrorKind::kMissingInput, fmt::format("{} not found: {}", flag, path.string()));
}

void require_stage(const PipelineConfig& c, std::string_view name, std::string_view stage) {
  const fs::path p = out_file(c, name);
  if (!fs::exists(p)) {
    throw Error(ErrorKind::kStageDependency, fmt::format("{} is missing; run `attrdisc {}` first", p.string(), stage));
  }
}

class ReportWriter {
 public:
  ReportWriter(const PipelineConfig& config, StageResult& result) : config_(config), result_(result) {}

  void report(std::string_view name, std::string_view body) {
    write(out_file(config_, name), report_header(config_) + "\n" + std::string(body));
  }
  void write(const fs::path& path, std::string_view contents) {
    write_file_atomic(path, contents);
    result_.written.push_back(path);
  }

 private:
  const PipelineConfig& config_;
  StageResult& result_;
};

std::string num(double v) { return format_fixed(v, kScoreDecimals); }
std::string nats(double v) { return format_fixed(v, kDivergenceDecimals); }

// Lowercase ASCII letters, digits, '-' and '_' pass; anything else is
// replaced and a hash suffix keeps distinct words apart.
std::string safe_name(std::string_view word) {
  std::string out;
  bool changed = word.empty();
  for (char ch : word) {
    const bool ok = (ch >= 'a' && ch <= 'z') || (ch >= '0' && ch <= '9') || ch == '-' || ch == '_';
    out += ok ? ch : '_';
    changed = changed || !ok;
  }
  if (changed) out += fmt::format("-{:08x}", static_cast<std::uint32_t>(fnv1a64(word)));
  return out;
}

CorpusManifest load_dedup_manifest(const PipelineConfig& c) {
  require_stage(c, outputs::kDedupManifest, "dedupe");
  return load_manifest(out_file(c, outputs::kDedupManifest), c.seed);
}

std::optional<MergeMap> load_optional_merge_map(const PipelineConfig& c) {
  if (c.paths.merge_map.empty()) return std::nullopt;
  require_input(c.paths.merge_map, "--merge-map");
  return load_merge_map(c.paths.merge_map);
}

std::vector<VocabEntry> load_vocabulary(const PipelineConfig& c) {
  require_stage(c, outputs::kVocabulary, "vocab");
  const CsvTable t = read_csv(out_file(c, outputs::kVocabulary));
  const std::size_t cw = t.column("word"), cf = t.column("frequency"), cr = t.column("rank");
  std::vector<VocabEntry> vocab;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    const std::string ctx = fmt::format("{}:{}", t.source, t.line_numbers[i]);
    vocab.push_back({row[cw], static_cast<std::size_t>(parse_integer(row[cf], ctx)),
                     static_cast<std::size_t>(parse_integer(row[cr], ctx))});
  }
  return vocab;
}

// The word filter, validated against `known` and returned in `known` order;
// all of `known` when the filter is empty.
std::vector<std::string> select_words(const PipelineConfig& c, const std::vector<std::string>& known) {
  if (c.words.empty()) return known;
  const std::set<std::string, std::less<>> wanted(c.words.begin(), c.words.end());
  const std::set<std::string, std::less<>> have(known.begin(), known.end());
  for (const auto& w : wanted) {
    if (!have.contains(w)) throw Error(ErrorKind::kUnknownWord, fmt::format("'{}' is not available to this stage", w));
  }
  std::vector<std::string> out;
  for (const auto& w : known) {
    if (wanted.contains(w)) out.push_back(w);
  }
  return out;
}

std::vector<std::string> vocab_words(const std::vector<VocabEntry>& vocab) {
  std::vector<std::string> words;
  for (const auto& v : vocab) words.push_back(v.word);
  return words;
}

constexpr Split kSplits[] = {Split::kTrain, Split::kTest, Split::kValidation};

// Positives come from partitions.csv; negatives are the rest of the split.
class PartitionTable {
 public:
  PartitionTable(const PipelineConfig& c, const CorpusManifest& manifest) {
    require_stage(c, outputs::kPartitions, "partition");
    const CsvTable t = read_csv(out_file(c, outputs::kPartitions));
    const std::size_t cw = t.column("word"), cs = t.column("split"), ci = t.column("image_id");
    for (const auto& row : t.rows) {
      const Split split = parse_split(row[cs]);
      if (!manifest.find(row[ci])) {
        throw Error(ErrorKind::kUnknownId, fmt::format("{}: image '{}' is not in the deduplicated manifest",
                                                       t.source, row[ci]));
      }
      positives_[{row[cw], split}].push_back(row[ci]);
    }
    for (Split s : kSplits) split_ids_[static_cast<int>(s)] = manifest.ids_in(s);
  }

  DatasetPartition get(const std::string& word, Split split) const {
    DatasetPartition p;
    p.word = word;
    p.split = split;
    const auto it = positives_.find({word, split});
    std::set<std::string, std::less<>> pos;
    if (it != positives_.end()) pos.insert(it->second.begin(), it->second.end());
    for (const auto& id : split_ids_[static_cast<int>(split)]) {
      (pos.contains(id) ? p.positive_ids : p.negative_ids).push_back(id);
    }
    return p;
  }

 private:
  std::map<std::pair<std::string, Split>, std::vector<std::string>> positives_;
  std::vector<std::string> split_ids_[3];
};

ActivationMatrix load_activation_input(const PipelineConfig& c) {
  require_input(c.paths.activations, "--activations");
  return read_activations(c.paths.activations);
}

void check_coverage(const ActivationMatrix& matrix, const CorpusManifest& manifest, const fs::path& source) {
  for (const auto& r : manifest.records()) {
    if (!matrix.contains(r.id)) {
      throw Error(ErrorKind::kUnknownId, fmt::format("{} has no activations for image '{}'", source.string(), r.id));
    }
  }
}

struct SkipRow {
  std::string stage;
  std::string word;
  std::string reason;
};

// skipped.csv is shared: each stage replaces only its own rows.
void update_skipped(const PipelineConfig& c, ReportWriter& writer, std::string_view stage,
                    const std::vector<SkipRow>& rows) {
  std::vector<SkipRow> all;
  const fs::path path = out_file(c, outputs::kSkipped);
  if (fs::exists(path)) {
    const CsvTable t = read_csv(path);
    const std::size_t cs = t.column("stage"), cw = t.column("word"), cr = t.column("reason");
    for (const auto& row : t.rows) {
      if (row[cs] != stage) all.push_back({row[cs], row[cw], row[cr]});
    }
  }
  all.insert(all.end(), rows.begin(), rows.end());
  std::stable_sort(all.begin(), all.end(), [](const SkipRow& a, const SkipRow& b) {
    return std::tie(a.stage, a.word) < std::tie(b.stage, b.word);
  });
  std::string body = "stage,word,reason\n";
  for (const auto& r : all) body += fmt::format("{},{},{}\n", r.stage, csv_escape(r.word), csv_escape(r.reason));
  writer.report(outputs::kSkipped, body);
}

std::map<std::string, PrimeUnitSet> load_prime_units(const PipelineConfig& c, const ActivationMatrix& matrix) {
  require_stage(c, outputs::kPrimeUnits, "divergence");
  const CsvTable t = read_csv(out_file(c, outputs::kPrimeUnits));
  const std::size_t cw = t.column("word"), cf = t.column("flat_index"), cs = t.column("score");
  std::map<std::string, PrimeUnitSet> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    const std::string ctx = fmt::format("{}:{}", t.source, t.line_numbers[i]);
    const auto flat = parse_integer(row[cf], ctx);
    if (flat < 0 || static_cast<std::size_t>(flat) >= matrix.units()) {
      throw Error(ErrorKind::kOutOfRange, fmt::format("{}: unit {} is outside the activation schema", ctx, flat));
    }
    auto& set = out[row[cw]];
    set.word = row[cw];
    set.units.push_back(matrix.address(static_cast<std::size_t>(flat)));
    set.scores.push_back(parse_real(row[cs], ctx));
  }
  return out;
}

struct VisualnessRow {
  double initial = 0.0;
  double resampled = 0.0;
  std::size_t initial_dim = 0;
  std::size_t full_dim = 0;
};

std::map<std::string, VisualnessRow> load_visualness(const PipelineConfig& c) {
  require_stage(c, outputs::kVisualness, "visualness");
  const CsvTable t = read_csv(out_file(c, outputs::kVisualness));
  const std::size_t cw = t.column("word"), cv = t.column("visualness"), cs = t.column("stage"),
                    cd = t.column("feature_dim");
  std::map<std::string, VisualnessRow> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    const std::string ctx = fmt::format("{}:{}", t.source, t.line_numbers[i]);
    auto& v = out[row[cw]];
    const double score = parse_real(row[cv], ctx);
    const auto dim = static_cast<std::size_t>(parse_integer(row[cd], ctx));
    if (row[cs] == to_string(ClassifierStage::kInitial)) {
      v.initial = score;
      v.initial_dim = dim;
    } else if (row[cs] == to_string(ClassifierStage::kResampled)) {
      v.resampled = score;
      v.full_dim = dim;
    } else {
      throw Error(ErrorKind::kFormat, fmt::format("{}: unknown stage '{}'", ctx, row[cs]));
    }
  }
  return out;
}

fs::path images_root(const PipelineConfig& c) {
  if (!c.paths.images_root.empty()) return c.paths.images_root;
  return c.paths.manifest.has_parent_path() ? c.paths.manifest.parent_path() : fs::path(".");
}

fs::path image_file(const PipelineConfig& c, const ImageRecord& r) {
  if (!r.image_path) throw Error(ErrorKind::kMissingInput, fmt::format("image '{}' has no image_path", r.id));
  const fs::path p(*r.image_path);
  return p.is_absolute() ? p : images_root(c) / p;
}

std::string grid_comment(const PipelineConfig& c, std::string_view what) {
  return fmt::format("{} {}", report_header(c).substr(2), what);
}

}  // namespace

void PipelineConfig::validate() const {
  auto bad = [](const std::string& msg) { throw Error(ErrorKind::kInvalidArgument, msg); };
  if (!(dedup_threshold >= 0.0 && dedup_threshold <= 1.0)) bad("dedup threshold must lie in [0, 1]");
  if (top_vocab == 0) bad("top-vocab must be at least 1");
  if (bins == 0) bad("bins must be at least 1");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) bad("smoothing alpha must be positive");
  if (prime_k == 0) bad("prime-k must be at least 1");
  if (!(resample_fraction > 0.0 && resample_fraction <= 1.0)) bad("resample fraction must lie in (0, 1]");
  if (!(l2 >= 0.0) || !std::isfinite(l2)) bad("l2 must be non-negative");
  if (max_epochs == 0) bad("max-epochs must be at least 1");
  if (!(tolerance > 0.0)) bad("tolerance must be positive");
  if (accumulate_k.empty()) bad("accumulate-k needs at least one value");
  for (auto k : accumulate_k) {
    if (k == 0) bad("accumulate-k values must be at least 1");
  }
  for (double t : iou_thresholds) {
    if (!(t >= 0.0 && t <= 1.0)) bad("IoU thresholds must lie in [0, 1]");
  }
  if (eval_words == 0) bad("eval-words must be at least 1");
  if (jobs == 0) bad("jobs must be at least 1");
  occluder().validate();
}

OccluderConfig PipelineConfig::occluder() const {
  OccluderConfig o;
  o.sizes = occluder_sizes;
  o.stride = stride;
  o.input_side = input_side;
  o.alignment = alignment;
  return o;
}

std::string serialize_config(const PipelineConfig& config) {
  json j = knobs_json(config);
  j["jobs"] = config.jobs;
  const auto& p = config.paths;
  j["paths"] = {{"manifest", p.manifest.string()},       {"activations", p.activations.string()},
                {"votes", p.votes.string()},             {"annotations", p.annotations.string()},
                {"refnet", p.refnet.string()},           {"images_root", p.images_root.string()},
                {"stop_words", p.stop_words.string()},   {"merge_map", p.merge_map.string()},
                {"out", p.out.string()}};
  return j.dump(2) + "\n";
}

PipelineConfig parse_config(std::string_view text, std::string_view source) {
  PipelineConfig c;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw Error(ErrorKind::kParse, fmt::format("{}: config must be a JSON object", source));
    c.seed = j.value("seed", c.seed);
    c.dedup_threshold = j.value("dedup_threshold", c.dedup_threshold);
    c.top_vocab = j.value("top_vocab", c.top_vocab);
    c.bins = j.value("bins", c.bins);
    c.alpha = j.value("alpha", c.alpha);
    c.prime_k = j.value("prime_k", c.prime_k);
    c.resample_fraction = j.value("resample_fraction", c.resample_fraction);
    c.l2 = j.value("l2", c.l2);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.tolerance = j.value("tolerance", c.tolerance);
    c.theta = j.value("theta", c.theta);
    c.occluder_sizes = j.value("occluder_sizes", c.occluder_sizes);
    c.stride = j.value("stride", c.stride);
    c.input_side = j.value("input_side", c.input_side);
    if (j.contains("alignment")) c.alignment = parse_alignment(j.at("alignment").get<std::string>());
    c.accumulate_k = j.value("accumulate_k", c.accumulate_k);
    c.eval_words = j.value("eval_words", c.eval_words);
    c.saliency_words = j.value("saliency_words", c.saliency_words);
    c.saliency_images = j.value("saliency_images", c.saliency_images);
    c.iou_thresholds = j.value("iou_thresholds", c.iou_thresholds);
    c.words = j.value("words", c.words);
    c.jobs = j.value("jobs", c.jobs);
    if (j.contains("paths")) {
      const json& p = j.at("paths");
      auto path = [&](const char* key, fs::path& dst) {
        if (p.contains(key)) dst = p.at(key).get<std::string>();
      };
      path("manifest", c.paths.manifest);
      path("activations", c.paths.activations);
      path("votes", c.paths.votes);
      path("annotations", c.paths.annotations);
      path("refnet", c.paths.refnet);
      path("images_root", c.paths.images_root);
      path("stop_words", c.paths.stop_words);
      path("merge_map", c.paths.merge_map);
      path("out", c.paths.out);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kParse, fmt::format("{}: {}", source, e.what()));
  }
  c.validate();
  return c;
}

PipelineConfig load_config(const fs::path& path) { return parse_config(read_file(path), path.string()); }

std::uint64_t config_hash(const PipelineConfig& config) {
  json j = knobs_json(config);
  auto words = config.words;
  std::sort(words.begin(), words.end());
  j["words"] = words;
  return fnv1a64(j.dump());
}

std::string report_header(const PipelineConfig& config) {
  return fmt::format("# attrdisc config_hash={:016x} seed={}", config_hash(config), config.seed);
}

StageResult cmd_dedupe(const PipelineConfig& c) {
  c.validate();
  require_input(c.paths.manifest, "--manifest");
  StageResult result{"dedupe", {}, {}};
  ReportWriter writer(c, result);

  const CorpusManifest manifest = load_manifest(c.paths.manifest, c.seed);
  DedupOptions options;
  options.threshold = c.dedup_threshold;
  options.seed = c.seed;
  options.jobs = c.jobs;
  if (!c.paths.stop_words.empty()) {
    require_input(c.paths.stop_words, "--stop-words");
    options.stop_words = load_stop_words(c.paths.stop_words);
  }
  const DedupResult dedup = dedup_corpus(manifest, options);

  std::string body = "shop_id,cluster,image_id,representative\n";
  std::size_t clusters = 0;
  for (const auto& shop : dedup.shops) {
    for (std::size_t k = 0; k < shop.clusters.size(); ++k) {
      for (const auto& id : shop.clusters[k]) {
        body += fmt::format("{},{},{},{}\n", csv_escape(shop.shop_id), k, csv_escape(id),
                            id == shop.representative_ids[k] ? 1 : 0);
      }
    }
    clusters += shop.clusters.size();
  }
  writer.report(outputs::kDedupClusters, body);
  writer.write(out_file(c, outputs::kDedupManifest), serialize_manifest(dedup.kept));
  result.summary = fmt::format("kept {} of {} records ({} clusters in {} shops)", dedup.kept.size(), manifest.size(),
                               clusters, dedup.shops.size());
  return result;
}

StageResult cmd_vocab(const PipelineConfig& c) {
  c.validate();
  StageResult result{"vocab", {}, {}};
  ReportWriter writer(c, result);
  const CorpusManifest manifest = load_dedup_manifest(c);
  const auto merge = load_optional_merge_map(c);
  const auto vocab = build_vocabulary(manifest, c.top_vocab, merge ? &*merge : nullptr);

  std::string body = "rank,word,frequency\n";
  for (const auto& v : vocab) body += fmt::format("{},{},{}\n", v.rank, csv_escape(v.word), v.frequency);
  writer.report(outputs::kVocabulary, body);
  result.summary = fmt::format("{} words", vocab.size());
  return result;
}

StageResult cmd_partition(const PipelineConfig& c) {
  c.validate();
  StageResult result{"partition", {}, {}};
  ReportWriter writer(c, result);
  const CorpusManifest manifest = load_dedup_manifest(c);
  const auto vocab = load_vocabulary(c);
  const auto merge = load_optional_merge_map(c);
  const auto words = select_words(c, vocab_words(vocab));

  std::vector<std::string> blocks(words.size());
  parallel_for(words.size(), c.jobs, [&](std::size_t i) {
    for (Split s : kSplits) {
      const auto p = partition(manifest, vocab, words[i], s, merge ? &*merge : nullptr);
      for (const auto& id : p.positive_ids) {
        blocks[i] += fmt::format("{},{},{}\n", csv_escape(words[i]), to_string(s), csv_escape(id));
      }
    }
  });
  std::string body = "word,split,image_id\n";
  for (const auto& b : blocks) body += b;
  writer.report(outputs::kPartitions, body);
  result.summary = fmt::format("{} words over {} records", words.size(), manifest.size());
  return result;
}

StageResult cmd_divergence(const PipelineConfig& c) {
  c.validate();
  StageResult result{"divergence", {}, {}};
  ReportWriter writer(c, result);
  const CorpusManifest manifest = load_dedup_manifest(c);
  const auto vocab = load_vocabulary(c);
  const PartitionTable partitions(c, manifest);
  const ActivationMatrix matrix = load_activation_input(c);
  check_coverage(matrix, manifest, c.paths.activations);
  const auto words = select_words(c, vocab_words(vocab));
  const HistogramOptions hist{c.bins, c.alpha};
  const std::size_t k = std::min(c.prime_k, matrix.units());

  struct WordOut {
    std::vector<UnitDivergence> profile;
    PrimeUnitSet prime;
    std::optional<std::string> skipped;
  };
  std::vector<WordOut> outs(words.size());
  parallel_for(words.size(), c.jobs, [&](std::size_t i) {
    const auto train = partitions.get(words[i], Split::kTrain);
    if (train.positive_ids.empty() || train.negative_ids.empty()) {
      outs[i].skipped = train.positive_ids.empty() ? "no positive training images" : "no negative training images";
      return;
    }
    outs[i].profile = divergence_profile(matrix, train, hist);
    outs[i].prime = select_prime_units(words[i], outs[i].profile, k);
  });

  const auto& layers = matrix.layers();
  std::string div = "word,layer,unit,flat_index,score\n";
  std::string prime = "word,rank,layer,unit,flat_index,score\n";
  std::vector<SkipRow> skipped;
  std::size_t done = 0;
  for (std::size_t i = 0; i < words.size(); ++i) {
    const auto& o = outs[i];
    if (o.skipped) {
      skipped.push_back({"divergence", words[i], *o.skipped});
      continue;
    }
    ++done;
    const std::string w = csv_escape(words[i]);
    for (const auto& d : o.profile) {
      div += fmt::format("{},{},{},{},{}\n", w, layers[d.unit.layer_index].name, d.unit.unit_index, d.unit.flat_index,
                         nats(d.score));
    }
    for (std::size_t r = 0; r < o.prime.units.size(); ++r) {
      const auto& u = o.prime.units[r];
      prime += fmt::format("{},{},{},{},{},{}\n", w, r + 1, layers[u.layer_index].name, u.unit_index, u.flat_index,
                           nats(o.prime.scores[r]));
    }
  }
  writer.report(outputs::kDivergence, div);
  writer.report(outputs::kPrimeUnits, prime);
  update_skipped(c, writer, "divergence", skipped);
  result.summary = fmt::format("{} words scored over {} units, {} skipped", done, matrix.units(), skipped.size());
  return result;
}

StageResult cmd_layers(const PipelineConfig& c) {
  c.validate();
  StageResult result{"layers", {}, {}};
  ReportWriter writer(c, result);
  require_stage(c, outputs::kDivergence, "divergence");
  const ActivationMatrix matrix = load_activation_input(c);
  const auto& layers = matrix.layers();

  const CsvTable t = read_csv(out_file(c, outputs::kDivergence));
  const std::size_t cw = t.column("word"), cf = t.column("flat_index"), cs = t.column("score");
  std::map<std::string, std::vector<UnitDivergence>> profiles;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    const std::string ctx = fmt::format("{}:{}", t.source, t.line_numbers[i]);
    const auto flat = parse_integer(row[cf], ctx);
    if (flat < 0 || static_cast<std::size_t>(flat) >= matrix.units()) {
      throw Error(ErrorKind::kOutOfRange, fmt::format("{}: unit {} is outside the activation schema", ctx, flat));
    }
    profiles[row[cw]].push_back({matrix.address(static_cast<std::size_t>(flat)), parse_real(row[cs], ctx)});
  }
  std::vector<std::string> known;
  for (const auto& [w, p] : profiles) {
    if (p.size() != matrix.units()) {
      throw Error(ErrorKind::kFormat, fmt::format("{}: word '{}' has {} of {} units", t.source, w, p.size(),
                                                  matrix.units()));
    }
    known.push_back(w);
  }
  const auto words = select_words(c, known);

  std::vector<LayerDivergenceProfile> lp;
  std::vector<std::vector<UnitDivergence>> selected;
  std::string body = "word,layer,max_divergence,normalized\n";
  for (const auto& w : words) {
    auto& p = profiles.at(w);
    std::sort(p.begin(), p.end(), [](const auto& a, const auto& b) { return a.unit.flat_index < b.unit.flat_index; });
    lp.push_back(layer_profile(w, p, layers));
    for (std::size_t l = 0; l < layers.size(); ++l) {
      body += fmt::format("{},{},{},{}\n", csv_escape(w), layers[l].name, num(lp.back().per_layer_max[l]),
                          num(lp.back().normalized[l]));
    }
    selected.push_back(p);
  }
  writer.report(outputs::kLayerProfiles, body);

  std::string mag = "layer,sum,max,relative_sum,relative_max\n";
  if (!selected.empty()) {
    const LayerMagnitude m = average_layer_magnitude(selected, layers);
    const auto rs = LayerMagnitude::relative(m.sum);
    const auto rm = LayerMagnitude::relative(m.max);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      mag += fmt::format("{},{},{},{},{}\n", layers[l].name, num(m.sum[l]), num(m.max[l]), num(rs[l]), num(rm[l]));
    }
  }
  writer.report(outputs::kLayerMagnitude, mag);

  std::string salient = "layer,rank,word,score\n";
  std::string table;
  for (std::size_t l = 0; l < layers.size() && !lp.empty(); ++l) {
    const auto s = salient_words(lp, layers, l);
    table += fmt::format("{}:", s.layer);
    for (std::size_t r = 0; r < s.ranked_words.size(); ++r) {
      salient += fmt::format("{},{},{},{}\n", s.layer, r + 1, csv_escape(s.ranked_words[r]), num(s.scores[r]));
      if (r < 10) table += fmt::format(" {}", s.ranked_words[r]);
    }
    table += "\n";
  }
  writer.report(outputs::kSalientWords, salient);
  writer.report(outputs::kSalientWordsTable, table);
  result.summary = fmt::format("{} words over {} layers", words.size(), layers.size());
  return result;
}

StageResult cmd_visualness(const PipelineConfig& c) {
  c.validate();
  StageResult result{"visualness", {}, {}};
  ReportWriter writer(c, result);
  const CorpusManifest manifest = load_dedup_manifest(c);
  const PartitionTable partitions(c, manifest);
  const ActivationMatrix matrix = load_activation_input(c);
  check_coverage(matrix, manifest, c.paths.activations);
  const auto primes = load_prime_units(c, matrix);
  std::vector<std::string> known;
  for (const auto& [w, p] : primes) known.push_back(w);
  const auto words = select_words(c, known);

  ClassifyOptions options;
  options.train = {c.l2, c.max_epochs, c.tolerance, c.seed};
  options.resample_fraction = c.resample_fraction;
  options.seed = c.seed;

  std::vector<std::optional<WordClassification>> outs(words.size());
  std::vector<std::string> errors(words.size());
  parallel_for(words.size(), c.jobs, [&](std::size_t i) {
    try {
      outs[i] = classify_word(matrix, partitions.get(words[i], Split::kTrain), partitions.get(words[i], Split::kTest),
                              primes.at(words[i]), options);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kInvalidArgument) throw;
      errors[i] = e.what();
    }
  });

  std::string vis = "word,visualness,stage,n_pos,n_neg,seed,feature_dim\n";
  std::string res = "word,label,rank,image_id,confidence\n";
  std::vector<SkipRow> skipped;
  const fs::path models = out_file(c, outputs::kModels);
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (!outs[i]) {
      skipped.push_back({"visualness", words[i], errors[i]});
      continue;
    }
    const auto& o = *outs[i];
    const std::string w = csv_escape(words[i]);
    for (const auto* r : {&o.initial_report, &o.resampled_report}) {
      vis += fmt::format("{},{},{},{},{},{},{}\n", w, num(r->visualness), to_string(r->stage), r->n_pos, r->n_neg,
                         r->seed, r->stage == ClassifierStage::kInitial ? o.initial.dim() : o.full.dim());
    }
    for (std::size_t r = 0; r < o.resampled.positives.size(); ++r) {
      const auto& s = o.resampled.positives[r];
      res += fmt::format("{},positive,{},{},{}\n", w, r + 1, csv_escape(s.image_id), num(s.confidence));
    }
    for (std::size_t r = 0; r < o.resampled.negatives.size(); ++r) {
      const auto& s = o.resampled.negatives[r];
      res += fmt::format("{},negative,{},{},{}\n", w, r + 1, csv_escape(s.image_id), num(s.confidence));
    }
    writer.write(models / (safe_name(words[i]) + ".initial.alrm"), encode_model(o.initial));
    writer.write(models / (safe_name(words[i]) + ".full.alrm"), encode_model(o.full));
  }
  writer.report(outputs::kVisualness, vis);
  writer.report(outputs::kResampled, res);
  update_skipped(c, writer, "visualness", skipped);
  result.summary = fmt::format("{} words classified, {} skipped", words.size() - skipped.size(), skipped.size());
  return result;
}

StageResult cmd_eval_human(const PipelineConfig& c) {
  c.validate();
  StageResult result{"eval-human", {}, {}};
  ReportWriter writer(c, result);
  const auto machine = load_visualness(c);
  require_input(c.paths.votes, "--votes");
  const auto votes = load_votes(c.paths.votes);
  const auto grouped = group_votes_by_word(votes);

  std::vector<std::string> known;
  for (const auto& [w, v] : grouped) known.push_back(w);
  const std::set<std::string, std::less<>> filter(c.words.begin(), c.words.end());

  std::string body = "word,score,n_pairs,theta\n";
  std::map<std::string, double> human;
  for (const auto& [w, v] : grouped) {
    if (!filter.empty() && !filter.contains(w)) continue;
    const auto h = human_visualness(v, c.theta);
    human[w] = h.score;
    body += fmt::format("{},{},{},{}\n", csv_escape(w), num(h.score), h.n_pairs, h.theta);
  }
  writer.report(outputs::kHumanVisualness, body);

  std::set<std::string, std::less<>> evaluated;
  for (const auto& v : load_vocabulary(c)) {
    if (evaluated.size() < c.eval_words) evaluated.insert(v.word);
  }
  std::size_t initial_dim = 0, full_dim = 0;
  std::map<std::string, double> initial, resampled;
  for (const auto& [w, v] : machine) {
    if (!evaluated.contains(w) || (!filter.empty() && !filter.contains(w))) continue;
    initial[w] = v.initial;
    resampled[w] = v.resampled;
    initial_dim = v.initial_dim;
    full_dim = v.full_dim;
  }
  std::vector<SkipRow> skipped;
  // Too few shared words or a constant score column leaves a method unreported.
  auto correlate = [&](std::string_view method, const std::map<std::string, double>& machine_scores) {
    std::optional<CorrelationReport> r;
    try {
      r = correlation_report(machine_scores, human);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kInvalidArgument && e.kind() != ErrorKind::kNumerical) throw;
      skipped.push_back({"eval-human", "*", fmt::format("{} correlation: {}", method, e.what())});
    }
    return r;
  };
  const auto ri = correlate("initial", initial);
  const auto rr = correlate("resampled", resampled);
  update_skipped(c, writer, "eval-human", skipped);

  std::string csv = "method,feature_dim,pearson,spearman,n_words\n";
  std::string table = fmt::format("{:<12}{:>12}{:>10}{:>10}\n", "method", "feature dim", "pearson", "spearman");
  for (const auto& [method, dim, r] : {std::tuple{"initial", initial_dim, &ri}, std::tuple{"resampled", full_dim, &rr}}) {
    if (!*r) {
      table += fmt::format("{:<12}{:>12}{:>10}{:>10}\n", method, dim, "n/a", "n/a");
      continue;
    }
    const auto& v = **r;
    csv += fmt::format("{},{},{},{},{}\n", method, dim, num(v.pearson), num(v.spearman), v.n);
    table += fmt::format("{:<12}{:>12}{:>10}{:>10}\n", method, dim, format_fixed(v.pearson, 3),
                         format_fixed(v.spearman, 3));
  }
  writer.report(outputs::kCorrelation, csv);
  writer.report(outputs::kCorrelationTable, table);
  result.summary = rr ? fmt::format("{} words, resampled pearson {} spearman {}", rr->n, format_fixed(rr->pearson, 3),
                                    format_fixed(rr->spearman, 3))
                      : fmt::format("{} human scores, correlation skipped", human.size());
  return result;
}

StageResult cmd_saliency(const PipelineConfig& c) {
  c.validate();
  StageResult result{"saliency", {}, {}};
  ReportWriter writer(c, result);
  const CorpusManifest manifest = load_dedup_manifest(c);
  const PartitionTable partitions(c, manifest);
  const auto visual = load_visualness(c);
  require_input(c.paths.refnet, "--refnet");
  const RefNet net(load_refnet_spec(c.paths.refnet));
  const ActivationMatrix matrix = load_activation_input(c);
  if (matrix.layers() != net.schema()) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("{} does not produce the layer schema of {}", c.paths.refnet.string(),
                            c.paths.activations.string()));
  }
  const auto primes = load_prime_units(c, matrix);

  std::vector<std::string> words;
  if (!c.words.empty()) {
    std::vector<std::string> known;
    for (const auto& [w, v] : visual) known.push_back(w);
    words = select_words(c, known);
  } else {
    std::vector<std::pair<double, std::string>> ranked;
    for (const auto& [w, v] : visual) ranked.emplace_back(-v.resampled, w);
    std::sort(ranked.begin(), ranked.end());
    for (std::size_t i = 0; i < ranked.size() && i < c.saliency_words; ++i) words.push_back(ranked[i].second);
  }

  OccluderConfig occ = c.occluder();
  {
    std::vector<Image> train;
    for (const auto& id : manifest.ids_in(Split::kTrain)) {
      train.push_back(resize_bilinear(read_ppm(image_file(c, *manifest.find(id))), c.input_side, c.input_side));
    }
    if (!train.empty()) occ.fill = mean_image(train);
  }
  const std::size_t k_max = *std::max_element(c.accumulate_k.begin(), c.accumulate_k.end());
  const fs::path root = out_file(c, outputs::kSaliencyDir);

  std::string index = "word,image_id,k,normalizer,grid,pgm,components\n";
  std::size_t maps = 0;
  for (const auto& w : words) {
    const auto& prime = primes.at(w);
    const auto test = partitions.get(w, Split::kTest);
    const std::size_t n_images = std::min(c.saliency_images, test.positive_ids.size());
    for (std::size_t i = 0; i < n_images; ++i) {
      const std::string& id = test.positive_ids[i];
      const Image image = read_ppm(image_file(c, *manifest.find(id)));
      const std::size_t count = std::min(k_max, prime.units.size());
      const auto comp = response_maps(net, image, id, prime, count, occ, c.jobs);

      const fs::path rel = fs::path(safe_name(w)) / safe_name(id);
      const fs::path dir = root / rel;
      std::string units = "rank,layer,unit,flat_index,score,file\n";
      for (std::size_t r = 0; r < comp.responses.size(); ++r) {
        const auto& u = comp.units[r];
        const std::string file = fmt::format("R_{:03d}.csv", r + 1);
        units += fmt::format("{},{},{},{},{},{}\n", r + 1, matrix.layers()[u.layer_index].name, u.unit_index,
                             u.flat_index, num(comp.scores[r]), file);
        writer.write(dir / file, encode_grid_csv(comp.responses[r], grid_comment(c, fmt::format("R rank={}", r + 1)),
                                                 kGridDecimals));
      }
      writer.report((fs::path(outputs::kSaliencyDir) / rel / "units.csv").string(), units);

      for (std::size_t k : c.accumulate_k) {
        if (k > comp.responses.size()) continue;
        const SaliencyMap m = accumulate(comp.responses, comp.scores, k);
        const std::string stem = fmt::format("M_K{}", k);
        const std::string what = fmt::format("word={} image={} K={} Z={}", w, id, k, num(m.normalizer));
        writer.write(dir / (stem + ".csv"), encode_grid_csv(m.grid, grid_comment(c, what), kGridDecimals));
        writer.write(dir / (stem + ".pgm"), encode_pgm(m.grid, grid_comment(c, what)));
        index += fmt::format("{},{},{},{},{},{},{}\n", csv_escape(w), csv_escape(id), k, num(m.normalizer),
                             (rel / (stem + ".csv")).generic_string(), (rel / (stem + ".pgm")).generic_string(),
                             (rel / "units.csv").generic_string());
        ++maps;
      }
    }
  }
  writer.report(outputs::kSaliencyIndex, index);
  result.summary = fmt::format("{} maps for {} words", maps, words.size());
  return result;
}

StageResult cmd_eval_saliency(const PipelineConfig& c) {
  c.validate();
  StageResult result{"eval-saliency", {}, {}};
  ReportWriter writer(c, result);
  require_stage(c, outputs::kSaliencyIndex, "saliency");
  const CorpusManifest manifest = load_dedup_manifest(c);
  require_input(c.paths.annotations, "--annotations");
  const auto boxes = load_annotations(c.paths.annotations);
  std::map<std::pair<std::string, std::string>, std::vector<BoxAnnotation>> by_key;
  for (const auto& b : boxes) by_key[{b.image_id, b.word}].push_back(b);

  const OccluderConfig occ = c.occluder();
  const CsvTable index = read_csv(out_file(c, outputs::kSaliencyIndex));
  const std::size_t cw = index.column("word"), ci = index.column("image_id"), ck = index.column("k"),
                    cg = index.column("grid");
  const fs::path root = out_file(c, outputs::kSaliencyDir);

  std::string header = "word,image_id,k,ap,otsu_threshold,iou_otsu";
  for (double t : c.iou_thresholds) header += fmt::format(",iou@{}", format_fixed(t, 2));
  std::string per_image = header + "\n";

  struct Acc {
    std::size_t n = 0;
    double ap = 0.0, otsu = 0.0;
    std::vector<double> iou;
  };
  std::map<std::pair<std::string, std::size_t>, Acc> acc;
  std::size_t skipped = 0;
  for (std::size_t r = 0; r < index.rows.size(); ++r) {
    const auto& row = index.rows[r];
    const std::string ctx = fmt::format("{}:{}", index.source, index.line_numbers[r]);
    const auto it = by_key.find({row[ci], row[cw]});
    const ImageRecord* rec = manifest.find(row[ci]);
    if (!rec) throw Error(ErrorKind::kUnknownId, fmt::format("{}: image '{}' is not in the manifest", ctx, row[ci]));
    const Image image = read_ppm(image_file(c, *rec));
    GroundTruthMask gt;
    if (it != by_key.end()) gt = ground_truth_mask(it->second, image.width, image.height);
    if (it == by_key.end() || gt.positives() == 0) {
      ++skipped;
      continue;
    }
    const Grid lattice = decode_grid_csv(read_file(root / row[cg]), (root / row[cg]).string());
    const Grid pixels = resize_bilinear(upsample_to_pixels(lattice, occ), image.height, image.width);
    const auto scores = evaluate_saliency(pixels, gt, c.iou_thresholds);
    const double th = otsu_threshold(pixels.values);
    const double iou_otsu = iou_at(pixels.values, gt.mask, th);

    per_image += fmt::format("{},{},{},{},{},{}", csv_escape(row[cw]), csv_escape(row[ci]), row[ck],
                             num(scores.average_precision), num(th), num(iou_otsu));
    for (double v : scores.iou) per_image += "," + num(v);
    per_image += "\n";

    auto& a = acc[{row[cw], static_cast<std::size_t>(parse_integer(row[ck], ctx))}];
    if (a.iou.empty()) a.iou.assign(scores.iou.size(), 0.0);
    ++a.n;
    a.ap += scores.average_precision;
    a.otsu += iou_otsu;
    for (std::size_t t = 0; t < scores.iou.size(); ++t) a.iou[t] += scores.iou[t];
  }

  std::string summary = "word,K,mAP";
  for (double t : c.iou_thresholds) summary += fmt::format(",IoU@{}", format_fixed(t, 2));
  summary += ",IoU@otsu,n_images\n";
  for (const auto& [key, a] : acc) {
    const double n = static_cast<double>(a.n);
    summary += fmt::format("{},{},{}", csv_escape(key.first), key.second, num(a.ap / n));
    for (double v : a.iou) summary += "," + num(v / n);
    summary += fmt::format(",{},{}\n", num(a.otsu / n), a.n);
  }
  writer.report(outputs::kSaliencyEvalImages, per_image);
  writer.report(outputs::kSaliencyEval, summary);
  result.summary = fmt::format("{} maps evaluated, {} without ground truth", index.rows.size() - skipped, skipped);
  return result;
}

StageResult cmd_synth(const SyntheticCorpusSpec& spec, const RefNetSpec& net, const fs::path& out,
                      std::size_t jobs) {
  spec.validate();
  const SyntheticCorpus corpus = generate_corpus(spec, net, jobs);
  write_corpus(corpus, out);
  StageResult result{"synth", {}, {}};
  for (const char* name : {"manifest.jsonl", "activations.actv", "annotations.csv", "votes.csv", "truth.csv",
                           "regions.csv", "refnet.json", "synth.json"}) {
    result.written.push_back(out / name);
  }
  result.summary = fmt::format("{} images, {} units, {} planted and {} distractor words", corpus.images.size(),
                               corpus.activations.units(), spec.planted.size(), spec.distractors.size());
  return result;
}

std::vector<StageResult> run_pipeline(const PipelineConfig& config) {
  config.validate();
  std::vector<StageResult> results;
  results.push_back(cmd_dedupe(config));
  results.push_back(cmd_vocab(config));
  results.push_back(cmd_partition(config));
  results.push_back(cmd_divergence(config));
  results.push_back(cmd_layers(config));
  results.push_back(cmd_visualness(config));
  if (!config.paths.votes.empty()) results.push_back(cmd_eval_human(config));
  if (!config.paths.refnet.empty()) {
    results.push_back(cmd_saliency(config));
    if (!config.paths.annotations.empty()) results.push_back(cmd_eval_saliency(config));
  }
  return results;
}

}  // namespace attrdisc
