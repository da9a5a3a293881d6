#include "attrdisc/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "attrdisc/error.hpp"
#include "attrdisc/parallel.hpp"
#include "attrdisc/text_io.hpp"
#include "json.hpp"

namespace attrdisc {

namespace detail {
extern const std::string_view kDefaultStopWords;
}

using nlohmann::json;

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kTest: return "test";
    case Split::kValidation: return "validation";
  }
  return "train";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::kTrain;
  if (text == "test") return Split::kTest;
  if (text == "validation") return Split::kValidation;
  throw Error(ErrorKind::kUnknownSplit,
              fmt::format("'{}' (expected train, test or validation)", text));
}

CorpusManifest::CorpusManifest(std::vector<ImageRecord> records) : records_(std::move(records)) {
  index_.reserve(records_.size());
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (!index_.emplace(records_[i].id, i).second) {
      throw Error(ErrorKind::kDuplicateId, fmt::format("id '{}' appears more than once", records_[i].id));
    }
  }
}

const ImageRecord* CorpusManifest::find(std::string_view id) const {
  auto it = index_.find(std::string(id));
  return it == index_.end() ? nullptr : &records_[it->second];
}

std::vector<std::string> CorpusManifest::ids_in(Split split) const {
  std::vector<std::string> ids;
  for (const auto& r : records_) {
    if (r.split == split) ids.push_back(r.id);
  }
  return ids;
}

namespace {

std::string lowercase(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> token_list(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw Error(ErrorKind::kParse, fmt::format("{}: missing field '{}'", where, key));
  if (!it->is_array()) throw Error(ErrorKind::kParse, fmt::format("{}: field '{}' must be a list", where, key));
  std::vector<std::string> out;
  out.reserve(it->size());
  for (const auto& v : *it) {
    if (!v.is_string()) {
      throw Error(ErrorKind::kParse, fmt::format("{}: field '{}' must hold strings", where, key));
    }
    out.push_back(lowercase(v.get<std::string>()));
  }
  return out;
}

std::optional<std::string> optional_string(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw Error(ErrorKind::kParse, fmt::format("{}: field '{}' must be a string", where, key));
  return it->get<std::string>();
}

}  // namespace

CorpusManifest parse_manifest(std::string_view text, std::string_view source, std::uint64_t seed) {
  std::vector<ImageRecord> records;
  std::vector<bool> has_split;
  std::unordered_map<std::string, std::size_t> seen;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = fmt::format("{}:{}", source, i + 1);
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error(ErrorKind::kParse, fmt::format("{}: {}", where, e.what()));
    }
    if (!obj.is_object()) throw Error(ErrorKind::kParse, where + ": record must be an object");
    ImageRecord r;
    auto id = optional_string(obj, "id", where);
    if (!id || id->empty()) throw Error(ErrorKind::kParse, where + ": missing field 'id'");
    r.id = *id;
    if (auto [it, inserted] = seen.emplace(r.id, i + 1); !inserted) {
      throw Error(ErrorKind::kDuplicateId,
                  fmt::format("{}: id '{}' already defined on line {}", where, r.id, it->second));
    }
    r.shop_id = optional_string(obj, "shop_id", where);
    r.title_tokens = token_list(obj, "title_tokens", where);
    r.description_tokens = token_list(obj, "description_tokens", where);
    r.candidate_words = token_list(obj, "candidate_words", where);
    r.category = optional_string(obj, "category", where);
    r.image_path = optional_string(obj, "image_path", where);
    auto split = optional_string(obj, "split", where);
    if (split) {
      try {
        r.split = parse_split(*split);
      } catch (const Error& e) {
        throw Error(ErrorKind::kUnknownSplit, fmt::format("{}: '{}'", where, *split));
      }
    }
    has_split.push_back(split.has_value());
    records.push_back(std::move(r));
  }

  const auto with_split = static_cast<std::size_t>(std::count(has_split.begin(), has_split.end(), true));
  if (with_split == 0 && !records.empty()) {
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(Rng::derive(seed, "split"));
    rng.shuffle(std::span<std::size_t>(order));
    const std::size_t n_train = records.size() / 2;
    const std::size_t n_test = records.size() / 4;
    for (std::size_t k = 0; k < order.size(); ++k) {
      records[order[k]].split =
          k < n_train ? Split::kTrain : (k < n_train + n_test ? Split::kTest : Split::kValidation);
    }
  } else if (with_split != records.size()) {
    const auto missing = static_cast<std::size_t>(std::find(has_split.begin(), has_split.end(), false) - has_split.begin());
    throw Error(ErrorKind::kParse,
                fmt::format("{}: record '{}' has no split while others do", source, records[missing].id));
  }
  return CorpusManifest(std::move(records));
}

CorpusManifest load_manifest(const std::filesystem::path& path, std::uint64_t seed) {
  return parse_manifest(read_file(path), path.string(), seed);
}

std::string serialize_manifest(const CorpusManifest& manifest) {
  std::string out;
  for (const auto& r : manifest.records()) {
    json obj = json::object();
    obj["id"] = r.id;
    if (r.shop_id) obj["shop_id"] = *r.shop_id;
    obj["title_tokens"] = r.title_tokens;
    obj["description_tokens"] = r.description_tokens;
    obj["candidate_words"] = r.candidate_words;
    if (r.category) obj["category"] = *r.category;
    if (r.image_path) obj["image_path"] = *r.image_path;
    obj["split"] = std::string(to_string(r.split));
    out += obj.dump();
    out += '\n';
  }
  return out;
}

void save_manifest(const CorpusManifest& manifest, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_manifest(manifest));
}

namespace {

StopWords parse_stop_words(std::string_view text) {
  StopWords words;
  for (auto& line : split_lines(text)) {
    auto start = line.find_first_not_of(" \t");
    if (start == std::string::npos || line[start] == '#') continue;
    auto end = line.find_last_not_of(" \t");
    words.insert(lowercase(line.substr(start, end - start + 1)));
  }
  return words;
}

}  // namespace

StopWords default_stop_words() { return parse_stop_words(detail::kDefaultStopWords); }

StopWords load_stop_words(const std::filesystem::path& path) { return parse_stop_words(read_file(path)); }

TermCounts bag_of_words(const ImageRecord& record, const StopWords& stop_words) {
  TermCounts counts;
  for (const auto* tokens : {&record.title_tokens, &record.description_tokens}) {
    for (const auto& t : *tokens) {
      if (t.empty() || stop_words.contains(t)) continue;
      ++counts[t];
    }
  }
  return counts;
}

double cosine_distance(const TermCounts& a, const TermCounts& b) {
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (const auto& [_, c] : a) na += double(c) * c;
  for (const auto& [_, c] : b) nb += double(c) * c;
  if (na == 0.0 || nb == 0.0) return 1.0;
  // Both maps are sorted: merge-walk the supports.
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (ia->first < ib->first) {
      ++ia;
    } else if (ib->first < ia->first) {
      ++ib;
    } else {
      dot += double(ia->second) * ib->second;
      ++ia;
      ++ib;
    }
  }
  const double d = 1.0 - dot / std::sqrt(na * nb);
  return std::clamp(d, 0.0, 1.0);
}

namespace {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[std::max(a, b)] = std::min(a, b);
  }

 private:
  std::vector<std::size_t> parent_;
};

}  // namespace

DuplicateClustering dedup_shop(const std::vector<ImageRecord>& records, double threshold,
                               std::uint64_t seed, const StopWords& stop_words) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, fmt::format("dedup threshold {} outside (0, 1)", threshold));
  }
  DuplicateClustering result;
  if (records.empty()) return result;
  result.shop_id = records.front().shop_id.value_or("");

  std::vector<TermCounts> bags;
  bags.reserve(records.size());
  for (const auto& r : records) bags.push_back(bag_of_words(r, stop_words));

  DisjointSets sets(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (std::size_t j = i + 1; j < records.size(); ++j) {
      if (cosine_distance(bags[i], bags[j]) < threshold) sets.unite(i, j);
    }
  }

  std::map<std::size_t, std::vector<std::string>> by_root;
  for (std::size_t i = 0; i < records.size(); ++i) by_root[sets.find(i)].push_back(records[i].id);
  for (auto& [_, ids] : by_root) {
    std::sort(ids.begin(), ids.end());
    result.clusters.push_back(std::move(ids));
  }
  std::sort(result.clusters.begin(), result.clusters.end(),
            [](const auto& x, const auto& y) { return x.front() < y.front(); });

  Rng rng(Rng::derive(seed, "dedup:" + result.shop_id));
  for (const auto& cluster : result.clusters) {
    result.representative_ids.push_back(cluster[rng.below(cluster.size())]);
  }
  return result;
}

DedupResult dedup_corpus(const CorpusManifest& manifest, const DedupOptions& options) {
  std::map<std::string, std::vector<ImageRecord>> by_shop;
  for (const auto& r : manifest.records()) {
    if (r.shop_id) by_shop[*r.shop_id].push_back(r);
  }
  std::vector<const std::vector<ImageRecord>*> groups;
  for (const auto& [_, recs] : by_shop) groups.push_back(&recs);

  DedupResult result;
  result.shops.resize(groups.size());
  parallel_for(groups.size(), options.jobs, [&](std::size_t i) {
    result.shops[i] = dedup_shop(*groups[i], options.threshold, options.seed, options.stop_words);
  });

  std::set<std::string, std::less<>> keep;
  for (const auto& shop : result.shops) keep.insert(shop.representative_ids.begin(), shop.representative_ids.end());
  std::vector<ImageRecord> kept;
  for (const auto& r : manifest.records()) {
    if (!r.shop_id || keep.contains(r.id)) kept.push_back(r);
  }
  result.kept = CorpusManifest(std::move(kept));
  return result;
}

void validate_merge_map(const MergeMap& merge_map) {
  for (const auto& [variant, canonical] : merge_map) {
    if (canonical == variant) continue;
    if (auto it = merge_map.find(canonical); it != merge_map.end() && it->second != canonical) {
      throw Error(ErrorKind::kInvalidArgument,
                  fmt::format("merge map is not canonical: '{}' -> '{}' but '{}' -> '{}'", variant,
                              canonical, canonical, it->second));
    }
  }
}

MergeMap parse_merge_map(std::string_view text, std::string_view source) {
  MergeMap map;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw Error(ErrorKind::kParse, fmt::format("{}:{}: expected two tab-separated columns", source, i + 1));
    }
    std::string variant = lowercase(line.substr(0, tab));
    std::string canonical = lowercase(line.substr(tab + 1));
    if (variant.empty() || canonical.empty()) {
      throw Error(ErrorKind::kParse, fmt::format("{}:{}: empty column", source, i + 1));
    }
    if (variant == canonical) continue;
    auto [it, inserted] = map.emplace(variant, canonical);
    if (!inserted && it->second != canonical) {
      throw Error(ErrorKind::kParse,
                  fmt::format("{}:{}: '{}' mapped to both '{}' and '{}'", source, i + 1, variant, it->second, canonical));
    }
  }
  validate_merge_map(map);
  return map;
}

MergeMap load_merge_map(const std::filesystem::path& path) { return parse_merge_map(read_file(path), path.string()); }

std::string canonical_word(std::string_view word, const MergeMap* merge_map) {
  if (merge_map) {
    if (auto it = merge_map->find(word); it != merge_map->end()) return it->second;
  }
  return std::string(word);
}

std::vector<VocabEntry> build_vocabulary(const CorpusManifest& manifest, std::size_t top_k,
                                         const MergeMap* merge_map) {
  if (top_k < 1) throw Error(ErrorKind::kInvalidArgument, "top_k must be at least 1");
  if (merge_map) validate_merge_map(*merge_map);
  std::map<std::string, std::size_t, std::less<>> frequency;
  for (const auto& r : manifest.records()) {
    std::set<std::string, std::less<>> words;
    for (const auto& w : r.candidate_words) words.insert(canonical_word(w, merge_map));
    for (const auto& w : words) ++frequency[w];
  }
  std::vector<VocabEntry> entries;
  entries.reserve(frequency.size());
  for (const auto& [w, f] : frequency) entries.push_back({w, f, 0});
  std::stable_sort(entries.begin(), entries.end(), [](const VocabEntry& a, const VocabEntry& b) {
    if (a.frequency != b.frequency) return a.frequency > b.frequency;
    return a.word < b.word;
  });
  if (entries.size() > top_k) entries.resize(top_k);
  for (std::size_t i = 0; i < entries.size(); ++i) entries[i].rank = i + 1;
  return entries;
}

DatasetPartition partition(const CorpusManifest& manifest, const std::vector<VocabEntry>& vocabulary,
                           std::string_view word, Split split, const MergeMap* merge_map) {
  const bool known = std::any_of(vocabulary.begin(), vocabulary.end(),
                                 [&](const VocabEntry& e) { return e.word == word; });
  if (!known) throw Error(ErrorKind::kUnknownWord, fmt::format("'{}' is not in the vocabulary", word));
  DatasetPartition part;
  part.word = std::string(word);
  part.split = split;
  for (const auto& r : manifest.records()) {
    if (r.split != split) continue;
    const bool has = std::any_of(r.candidate_words.begin(), r.candidate_words.end(),
                                 [&](const std::string& w) { return canonical_word(w, merge_map) == word; });
    (has ? part.positive_ids : part.negative_ids).push_back(r.id);
  }
  return part;
}

}  // namespace attrdisc
