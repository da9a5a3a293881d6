#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "attrdisc/refnet.hpp"
#include "attrdisc/rng.hpp"
#include "attrdisc/saliency.hpp"
#include "attrdisc/synth.hpp"

namespace attrdisc {

struct PipelinePaths {
  std::filesystem::path manifest;
  std::filesystem::path activations;
  std::filesystem::path votes;
  std::filesystem::path annotations;
  std::filesystem::path refnet;       // reference network spec for saliency
  std::filesystem::path images_root;  // image_path base; defaults to the manifest's directory
  std::filesystem::path stop_words;
  std::filesystem::path merge_map;
  std::filesystem::path out = "attrdisc-out";
};

// Knobs and paths for every stage. Only the knobs enter the config hash;
// paths, jobs and the word filter's order do not.
struct PipelineConfig {
  PipelinePaths paths;
  std::uint64_t seed = kDefaultSeed;
  double dedup_threshold = 0.1;
  std::size_t top_vocab = 250;
  std::size_t bins = 32;
  double alpha = 0.5;
  std::size_t prime_k = 100;
  double resample_fraction = 0.5;
  double l2 = 1.0;
  std::size_t max_epochs = 1000;
  double tolerance = 1e-6;
  std::size_t theta = 3;
  std::vector<std::size_t> occluder_sizes{24, 48, 96};
  std::size_t stride = 4;
  std::size_t input_side = 256;
  OccluderAlignment alignment = OccluderAlignment::kCenter;
  std::vector<std::size_t> accumulate_k{1, 8, 64};
  std::size_t eval_words = 100;     // most frequent vocabulary words compared with human scores
  std::size_t saliency_words = 3;   // most visual words, used without a word filter
  std::size_t saliency_images = 2;  // test positives per word
  std::vector<double> iou_thresholds = default_iou_thresholds();
  std::vector<std::string> words;  // restricts every stage when non-empty
  std::size_t jobs = 1;

  void validate() const;
  OccluderConfig occluder() const;
};

std::string serialize_config(const PipelineConfig& config);
PipelineConfig parse_config(std::string_view text, std::string_view source = "<memory>");
PipelineConfig load_config(const std::filesystem::path& path);

std::uint64_t config_hash(const PipelineConfig& config);
// "# attrdisc config_hash=<16 hex digits> seed=<n>"
std::string report_header(const PipelineConfig& config);

namespace outputs {
inline constexpr std::string_view kDedupClusters = "dedup_clusters.csv";
inline constexpr std::string_view kDedupManifest = "manifest.dedup.jsonl";
inline constexpr std::string_view kVocabulary = "vocabulary.csv";
inline constexpr std::string_view kPartitions = "partitions.csv";
inline constexpr std::string_view kDivergence = "divergence.csv";
inline constexpr std::string_view kPrimeUnits = "prime_units.csv";
inline constexpr std::string_view kSkipped = "skipped.csv";
inline constexpr std::string_view kLayerProfiles = "layer_profiles.csv";
inline constexpr std::string_view kLayerMagnitude = "layer_magnitude.csv";
inline constexpr std::string_view kSalientWords = "salient_words.csv";
inline constexpr std::string_view kSalientWordsTable = "salient_words.txt";
inline constexpr std::string_view kVisualness = "visualness.csv";
inline constexpr std::string_view kResampled = "resampled.csv";
inline constexpr std::string_view kModels = "models";
inline constexpr std::string_view kHumanVisualness = "human_visualness.csv";
inline constexpr std::string_view kCorrelation = "correlation.csv";
inline constexpr std::string_view kCorrelationTable = "correlation.txt";
inline constexpr std::string_view kSaliencyDir = "saliency";
inline constexpr std::string_view kSaliencyIndex = "saliency/index.csv";
inline constexpr std::string_view kSaliencyEval = "saliency_eval.csv";
inline constexpr std::string_view kSaliencyEvalImages = "saliency_eval_images.csv";
}  // namespace outputs

struct StageResult {
  std::string stage;
  std::vector<std::filesystem::path> written;
  std::string summary;
};

// Each stage reads its inputs from the configured paths and earlier stage
// outputs under paths.out. A missing earlier output raises
// kStageDependency naming the file and the stage that produces it.
StageResult cmd_dedupe(const PipelineConfig& config);
StageResult cmd_vocab(const PipelineConfig& config);
StageResult cmd_partition(const PipelineConfig& config);
StageResult cmd_divergence(const PipelineConfig& config);
StageResult cmd_layers(const PipelineConfig& config);
StageResult cmd_visualness(const PipelineConfig& config);
StageResult cmd_eval_human(const PipelineConfig& config);
StageResult cmd_saliency(const PipelineConfig& config);
StageResult cmd_eval_saliency(const PipelineConfig& config);

StageResult cmd_synth(const SyntheticCorpusSpec& spec, const RefNetSpec& net, const std::filesystem::path& out,
                      std::size_t jobs = 1);

// Runs every stage whose inputs are configured: eval-human needs votes,
// saliency needs a refnet spec, eval-saliency needs annotations.
std::vector<StageResult> run_pipeline(const PipelineConfig& config);

}  // namespace attrdisc
