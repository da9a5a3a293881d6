#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "attrdisc/actstore.hpp"
#include "attrdisc/corpus.hpp"
#include "attrdisc/divergence.hpp"
#include "attrdisc/rng.hpp"

namespace attrdisc {

// Dense row-major design matrix.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

// Logistic model on z-scored features. Zero-variance training features get
// std 1 and a weight pinned to 0.
struct LinearModel {
  std::vector<double> weights;
  double bias = 0.0;
  std::vector<double> feature_means;
  std::vector<double> feature_stds;
  // Flat activation indices feeding the model; empty selector means the
  // model consumes whole activation rows.
  std::optional<std::vector<std::size_t>> feature_selector;
  double l2 = 1.0;
  std::uint64_t seed = kDefaultSeed;

  std::size_t dim() const { return weights.size(); }
  double decision_value(std::span<const double> features) const;
  double confidence(std::span<const double> features) const;
  // Applies the selector (if any) to a full activation row.
  double confidence_for_activations(std::span<const float> activations) const;
};

double sigmoid(double z);

struct TrainOptions {
  double l2 = 1.0;
  std::size_t max_epochs = 1000;
  double tolerance = 1e-6;  // on the gradient infinity-norm
  std::uint64_t seed = kDefaultSeed;
};

struct TrainingTrace {
  std::vector<double> losses;  // loss before each epoch, then the final loss
  std::size_t epochs = 0;
  bool converged = false;
  double gradient_inf_norm = 0.0;
};

// Mean logistic loss plus (l2 / 2n) * |w|^2 over parameters [w..., b]; the
// bias is not regularised. `frozen` features keep a zero gradient.
class LogisticObjective {
 public:
  LogisticObjective(const FeatureMatrix& features, std::span<const int> labels, double l2,
                    std::vector<bool> frozen = {});

  std::size_t parameter_count() const { return features_->cols + 1; }
  double value(std::span<const double> params) const;
  double value_and_gradient(std::span<const double> params, std::span<double> gradient) const;

 private:
  const FeatureMatrix* features_;
  std::span<const int> labels_;
  double l2_;
  std::vector<bool> frozen_;
};

// Deterministic full-batch gradient descent with Armijo backtracking.
// Labels are 0/1; both classes need at least two samples.
LinearModel train_logistic(const FeatureMatrix& features, std::span<const int> labels,
                           const TrainOptions& options = {}, TrainingTrace* trace = nullptr);

struct BalancedSample {
  std::vector<std::string> positive_ids;
  std::vector<std::string> negative_ids;
};

// Draws min(|pos|, |neg|) ids from each side with a seeded shuffle.
BalancedSample balanced_subsample(std::span<const std::string> positives, std::span<const std::string> negatives,
                                  std::uint64_t seed);

FeatureMatrix gather_features(const ActivationMatrix& matrix, std::span<const std::string> ids,
                              const std::optional<std::vector<std::size_t>>& selector);

// Prime-unit classifier trained on a balanced subsample of the partition.
LinearModel train_initial(const ActivationMatrix& matrix, const DatasetPartition& partition,
                          const PrimeUnitSet& prime, const TrainOptions& options, std::uint64_t balance_seed,
                          BalancedSample* used = nullptr);

enum class SampleLabel { kNegative, kPositive };

struct RankedSample {
  std::string image_id;
  double confidence = 0.0;
  SampleLabel label = SampleLabel::kNegative;
};

struct ResampledSets {
  std::vector<RankedSample> positives;  // descending confidence
  std::vector<RankedSample> negatives;  // ascending confidence

  std::vector<std::string> positive_ids() const;
  std::vector<std::string> negative_ids() const;
};

// Keeps m = ceil(fraction * min(|D+|, |D-|)) of the most confident positives
// and the least confident negatives.
ResampledSets rank_and_resample(const LinearModel& model, const ActivationMatrix& matrix,
                                const DatasetPartition& partition, double fraction = 0.5);

// Whole-activation classifier on the resampled sets.
LinearModel train_full(const ActivationMatrix& matrix, const ResampledSets& resampled, const TrainOptions& options);

enum class ClassifierStage { kInitial, kResampled };
std::string_view to_string(ClassifierStage stage);

struct VisualnessReport {
  std::string word;
  double visualness = 0.0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  ClassifierStage stage = ClassifierStage::kResampled;
  std::uint64_t seed = kDefaultSeed;
  std::vector<std::string> evaluated_ids;
};

// Balanced accuracy at confidence threshold 0.5 on a seeded balanced
// subsample of the test partition. Throws kInvalidArgument when any test id
// was used for training.
VisualnessReport visualness(const LinearModel& model, const ActivationMatrix& matrix,
                            const DatasetPartition& test_partition, std::span<const std::string> training_ids,
                            std::uint64_t seed, ClassifierStage stage);

struct ClassifyOptions {
  TrainOptions train;
  double resample_fraction = 0.5;
  std::uint64_t seed = kDefaultSeed;
};

// initial model -> confidence resampling -> full model -> visualness.
struct WordClassification {
  std::string word;
  LinearModel initial;
  LinearModel full;
  BalancedSample initial_training;
  ResampledSets resampled;
  VisualnessReport initial_report;
  VisualnessReport resampled_report;
};

WordClassification classify_word(const ActivationMatrix& matrix, const DatasetPartition& train_partition,
                                 const DatasetPartition& test_partition, const PrimeUnitSet& prime,
                                 const ClassifyOptions& options);

// ALRM container:
//   "ALRM" | 0x01 | u32 LE header length n | n bytes JSON header
//   {dim, selector, seed, l2} | float64 LE payload [bias, weights, means, stds].
inline constexpr std::string_view kModelMagic = "ALRM";
inline constexpr std::uint8_t kModelVersion = 1;

std::string encode_model(const LinearModel& model);
LinearModel decode_model(std::string_view bytes, std::string_view source = "<memory>");
void write_model(const LinearModel& model, const std::filesystem::path& path);
LinearModel read_model(const std::filesystem::path& path);

}  // namespace attrdisc
