#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "attrdisc/rng.hpp"

namespace attrdisc {

enum class Split { kTrain, kTest, kValidation };

std::string_view to_string(Split split);
// Throws kUnknownSplit for anything but "train", "test", "validation".
Split parse_split(std::string_view text);

struct ImageRecord {
  std::string id;
  std::optional<std::string> shop_id;
  std::vector<std::string> title_tokens;
  std::vector<std::string> description_tokens;
  std::vector<std::string> candidate_words;
  std::optional<std::string> category;
  std::optional<std::string> image_path;
  Split split = Split::kTrain;
};

// Immutable after construction; ids are unique.
class CorpusManifest {
 public:
  CorpusManifest() = default;
  explicit CorpusManifest(std::vector<ImageRecord> records);

  const std::vector<ImageRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }

  const ImageRecord* find(std::string_view id) const;
  std::vector<std::string> ids_in(Split split) const;

 private:
  std::vector<ImageRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Line-delimited JSON, one record per line. Unknown fields are ignored.
// When no record carries a split, splits are assigned 50/25/25
// (train/test/validation) by a seeded shuffle; a manifest where only some
// records carry one is rejected.
CorpusManifest load_manifest(const std::filesystem::path& path, std::uint64_t seed = kDefaultSeed);
CorpusManifest parse_manifest(std::string_view text, std::string_view source,
                              std::uint64_t seed = kDefaultSeed);
std::string serialize_manifest(const CorpusManifest& manifest);
void save_manifest(const CorpusManifest& manifest, const std::filesystem::path& path);

using StopWords = std::set<std::string, std::less<>>;
using TermCounts = std::map<std::string, int, std::less<>>;

StopWords default_stop_words();
StopWords load_stop_words(const std::filesystem::path& path);

TermCounts bag_of_words(const ImageRecord& record, const StopWords& stop_words);

// 1 - cos(a, b); 1.0 when either vector is all-zero.
double cosine_distance(const TermCounts& a, const TermCounts& b);

struct DuplicateClustering {
  std::string shop_id;
  // Each cluster is sorted by id; clusters are ordered by their first id.
  std::vector<std::vector<std::string>> clusters;
  std::vector<std::string> representative_ids;
};

// Single-linkage clustering: any pair closer than `threshold` (cosine
// distance over title + description bags of words) shares a cluster. One
// representative per cluster is drawn uniformly with a generator derived from
// `seed` and the shop id.
DuplicateClustering dedup_shop(const std::vector<ImageRecord>& records, double threshold,
                               std::uint64_t seed = kDefaultSeed,
                               const StopWords& stop_words = default_stop_words());

struct DedupOptions {
  double threshold = 0.1;
  std::uint64_t seed = kDefaultSeed;
  StopWords stop_words = default_stop_words();
  std::size_t jobs = 1;
};

struct DedupResult {
  std::vector<DuplicateClustering> shops;  // sorted by shop id
  CorpusManifest kept;                     // representatives + shop-less records, input order
};

DedupResult dedup_corpus(const CorpusManifest& manifest, const DedupOptions& options = {});

// variant -> canonical
using MergeMap = std::map<std::string, std::string, std::less<>>;

// Two-column TSV. Rejects chains and cycles: no canonical form may itself be
// a variant. Identity rows are dropped.
MergeMap load_merge_map(const std::filesystem::path& path);
MergeMap parse_merge_map(std::string_view text, std::string_view source);
void validate_merge_map(const MergeMap& merge_map);

std::string canonical_word(std::string_view word, const MergeMap* merge_map);

struct VocabEntry {
  std::string word;
  std::size_t frequency = 0;  // records containing the word
  std::size_t rank = 0;       // 1-based
};

// Document frequency after applying `merge_map`; descending frequency, ties
// broken lexicographically; at most top_k entries.
std::vector<VocabEntry> build_vocabulary(const CorpusManifest& manifest, std::size_t top_k = 250,
                                         const MergeMap* merge_map = nullptr);

struct DatasetPartition {
  std::string word;
  Split split = Split::kTrain;
  std::vector<std::string> positive_ids;
  std::vector<std::string> negative_ids;
};

// Throws kUnknownWord when `word` is not in `vocabulary`.
DatasetPartition partition(const CorpusManifest& manifest, const std::vector<VocabEntry>& vocabulary,
                           std::string_view word, Split split, const MergeMap* merge_map = nullptr);

}  // namespace attrdisc
