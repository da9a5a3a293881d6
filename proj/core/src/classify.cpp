#include "attrdisc/classify.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <set>

#include <fmt/format.h>

#include "attrdisc/error.hpp"
#include "attrdisc/text_io.hpp"
#include "json.hpp"

namespace attrdisc {

using nlohmann::json;

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace {

// log(1 + e^z) without overflow.
double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

}  // namespace

double LinearModel::decision_value(std::span<const double> features) const {
  if (features.size() != weights.size()) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("model expects {} features, got {}", weights.size(), features.size()));
  }
  double z = bias;
  for (std::size_t j = 0; j < weights.size(); ++j) {
    z += weights[j] * ((features[j] - feature_means[j]) / feature_stds[j]);
  }
  return z;
}

double LinearModel::confidence(std::span<const double> features) const { return sigmoid(decision_value(features)); }

double LinearModel::confidence_for_activations(std::span<const float> activations) const {
  std::vector<double> x;
  if (feature_selector) {
    x.reserve(feature_selector->size());
    for (auto i : *feature_selector) {
      if (i >= activations.size()) throw Error(ErrorKind::kOutOfRange, fmt::format("selector index {}", i));
      x.push_back(activations[i]);
    }
  } else {
    x.assign(activations.begin(), activations.end());
  }
  return confidence(x);
}

LogisticObjective::LogisticObjective(const FeatureMatrix& features, std::span<const int> labels, double l2,
                                     std::vector<bool> frozen)
    : features_(&features), labels_(labels), l2_(l2), frozen_(std::move(frozen)) {
  if (labels.size() != features.rows) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("{} labels for {} samples", labels.size(), features.rows));
  }
  if (frozen_.empty()) frozen_.assign(features.cols, false);
}

double LogisticObjective::value(std::span<const double> params) const {
  const auto& X = *features_;
  const double b = params[X.cols];
  double loss = 0.0;
  for (std::size_t i = 0; i < X.rows; ++i) {
    double z = b;
    const auto row = X.row(i);
    for (std::size_t j = 0; j < X.cols; ++j) z += params[j] * row[j];
    loss += softplus(z) - (labels_[i] ? z : 0.0);
  }
  double sq = 0.0;
  for (std::size_t j = 0; j < X.cols; ++j) sq += params[j] * params[j];
  return (loss + 0.5 * l2_ * sq) / double(X.rows);
}

double LogisticObjective::value_and_gradient(std::span<const double> params, std::span<double> gradient) const {
  const auto& X = *features_;
  const double b = params[X.cols];
  std::fill(gradient.begin(), gradient.end(), 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < X.rows; ++i) {
    double z = b;
    const auto row = X.row(i);
    for (std::size_t j = 0; j < X.cols; ++j) z += params[j] * row[j];
    loss += softplus(z) - (labels_[i] ? z : 0.0);
    const double r = sigmoid(z) - double(labels_[i]);
    for (std::size_t j = 0; j < X.cols; ++j) gradient[j] += r * row[j];
    gradient[X.cols] += r;
  }
  double sq = 0.0;
  const double n = double(X.rows);
  for (std::size_t j = 0; j < X.cols; ++j) {
    sq += params[j] * params[j];
    gradient[j] = frozen_[j] ? 0.0 : (gradient[j] + l2_ * params[j]) / n;
  }
  gradient[X.cols] /= n;
  return (loss + 0.5 * l2_ * sq) / n;
}

LinearModel train_logistic(const FeatureMatrix& features, std::span<const int> labels, const TrainOptions& options,
                           TrainingTrace* trace) {
  if (labels.size() != features.rows) {
    throw Error(ErrorKind::kInvalidArgument, fmt::format("{} labels for {} samples", labels.size(), features.rows));
  }
  std::size_t n_pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw Error(ErrorKind::kInvalidArgument, fmt::format("label {} is not 0/1", y));
    n_pos += std::size_t(y);
  }
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos < 2 || n_neg < 2) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("need at least two samples per class (positives {}, negatives {})", n_pos, n_neg));
  }
  if (options.l2 < 0.0) throw Error(ErrorKind::kInvalidArgument, "l2 must be non-negative");
  for (double v : features.data) {
    if (!std::isfinite(v)) throw Error(ErrorKind::kNonFinite, "feature value is not finite");
  }

  const std::size_t n = features.rows;
  const std::size_t d = features.cols;
  LinearModel model;
  model.l2 = options.l2;
  model.seed = options.seed;
  model.feature_means.assign(d, 0.0);
  model.feature_stds.assign(d, 1.0);
  std::vector<bool> frozen(d, false);
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += features(i, j);
    mean /= double(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (features(i, j) - mean) * (features(i, j) - mean);
    var /= double(n);
    model.feature_means[j] = mean;
    if (var > 0.0 && std::sqrt(var) > 1e-12 * std::max(1.0, std::abs(mean))) {
      model.feature_stds[j] = std::sqrt(var);
    } else {
      frozen[j] = true;
    }
  }

  FeatureMatrix z(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      z(i, j) = frozen[j] ? 0.0 : (features(i, j) - model.feature_means[j]) / model.feature_stds[j];
    }
  }

  const LogisticObjective objective(z, labels, options.l2, frozen);
  std::vector<double> params(d + 1, 0.0);
  std::vector<double> grad(d + 1, 0.0);
  std::vector<double> trial(d + 1, 0.0);
  std::vector<double> trial_grad(d + 1, 0.0);

  double loss = objective.value_and_gradient(params, grad);
  double step = 1.0;
  TrainingTrace local;
  local.losses.push_back(loss);
  constexpr double kArmijo = 1e-4;
  for (std::size_t epoch = 0; epoch < options.max_epochs; ++epoch) {
    double inf_norm = 0.0;
    double sq_norm = 0.0;
    for (double g : grad) {
      inf_norm = std::max(inf_norm, std::abs(g));
      sq_norm += g * g;
    }
    local.gradient_inf_norm = inf_norm;
    if (inf_norm < options.tolerance) {
      local.converged = true;
      break;
    }
    step = std::min(step * 2.0, 1e6);
    double trial_loss = 0.0;
    bool accepted = false;
    while (step > 1e-20) {
      for (std::size_t k = 0; k <= d; ++k) trial[k] = params[k] - step * grad[k];
      trial_loss = objective.value_and_gradient(trial, trial_grad);
      if (trial_loss <= loss - kArmijo * step * sq_norm) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;  // no representable descent step remains
    params.swap(trial);
    grad.swap(trial_grad);
    loss = trial_loss;
    local.losses.push_back(loss);
    local.epochs = epoch + 1;
  }
  if (!local.converged) {
    double inf_norm = 0.0;
    for (double g : grad) inf_norm = std::max(inf_norm, std::abs(g));
    local.gradient_inf_norm = inf_norm;
    local.converged = inf_norm < options.tolerance;
  }

  model.weights.assign(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(d));
  for (std::size_t j = 0; j < d; ++j) {
    if (frozen[j]) model.weights[j] = 0.0;
  }
  model.bias = params[d];
  if (trace) *trace = std::move(local);
  return model;
}

BalancedSample balanced_subsample(std::span<const std::string> positives, std::span<const std::string> negatives,
                                  std::uint64_t seed) {
  const std::size_t m = std::min(positives.size(), negatives.size());
  Rng rng(seed);
  auto draw = [&](std::span<const std::string> ids) {
    std::vector<std::string> copy(ids.begin(), ids.end());
    rng.shuffle(std::span<std::string>(copy));
    copy.resize(m);
    return copy;
  };
  BalancedSample s;
  s.positive_ids = draw(positives);
  s.negative_ids = draw(negatives);
  return s;
}

FeatureMatrix gather_features(const ActivationMatrix& matrix, std::span<const std::string> ids,
                              const std::optional<std::vector<std::size_t>>& selector) {
  const std::size_t d = selector ? selector->size() : matrix.units();
  if (selector) {
    for (auto idx : *selector) {
      if (idx >= matrix.units()) throw Error(ErrorKind::kOutOfRange, fmt::format("selector index {}", idx));
    }
  }
  FeatureMatrix x(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto row = matrix.row(matrix.row_of(ids[i]));
    for (std::size_t j = 0; j < d; ++j) x(i, j) = row[selector ? (*selector)[j] : j];
  }
  return x;
}

namespace {

LinearModel fit_on(const ActivationMatrix& matrix, std::span<const std::string> pos,
                   std::span<const std::string> neg, const std::optional<std::vector<std::size_t>>& selector,
                   const TrainOptions& options) {
  std::vector<std::string> ids(pos.begin(), pos.end());
  ids.insert(ids.end(), neg.begin(), neg.end());
  std::vector<int> labels(ids.size(), 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(pos.size()), 1);
  auto model = train_logistic(gather_features(matrix, ids, selector), labels, options);
  model.feature_selector = selector;
  return model;
}

}  // namespace

LinearModel train_initial(const ActivationMatrix& matrix, const DatasetPartition& partition,
                          const PrimeUnitSet& prime, const TrainOptions& options, std::uint64_t balance_seed,
                          BalancedSample* used) {
  if (partition.positive_ids.empty()) {
    throw Error(ErrorKind::kInvalidArgument, fmt::format("word '{}' has no positive images", partition.word));
  }
  if (prime.units.empty()) throw Error(ErrorKind::kInvalidArgument, "empty prime-unit set");
  auto sample = balanced_subsample(partition.positive_ids, partition.negative_ids, balance_seed);
  auto model = fit_on(matrix, sample.positive_ids, sample.negative_ids, prime.flat_indices(), options);
  if (used) *used = std::move(sample);
  return model;
}

std::vector<std::string> ResampledSets::positive_ids() const {
  std::vector<std::string> ids;
  for (const auto& s : positives) ids.push_back(s.image_id);
  return ids;
}

std::vector<std::string> ResampledSets::negative_ids() const {
  std::vector<std::string> ids;
  for (const auto& s : negatives) ids.push_back(s.image_id);
  return ids;
}

ResampledSets rank_and_resample(const LinearModel& model, const ActivationMatrix& matrix,
                                const DatasetPartition& partition, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, fmt::format("resample fraction {} outside (0, 1]", fraction));
  }
  const std::size_t smaller = std::min(partition.positive_ids.size(), partition.negative_ids.size());
  const auto m = static_cast<std::size_t>(std::ceil(fraction * double(smaller)));
  if (m == 0) {
    throw Error(ErrorKind::kInvalidArgument, fmt::format("word '{}': nothing to resample", partition.word));
  }
  auto rank = [&](const std::vector<std::string>& ids, SampleLabel label) {
    std::vector<RankedSample> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
      out.push_back({id, model.confidence_for_activations(matrix.row(matrix.row_of(id))), label});
    }
    const bool descending = label == SampleLabel::kPositive;
    std::sort(out.begin(), out.end(), [&](const RankedSample& a, const RankedSample& b) {
      if (a.confidence != b.confidence) return descending ? a.confidence > b.confidence : a.confidence < b.confidence;
      return a.image_id < b.image_id;
    });
    out.resize(m);
    return out;
  };
  ResampledSets sets;
  sets.positives = rank(partition.positive_ids, SampleLabel::kPositive);
  sets.negatives = rank(partition.negative_ids, SampleLabel::kNegative);
  return sets;
}

LinearModel train_full(const ActivationMatrix& matrix, const ResampledSets& resampled, const TrainOptions& options) {
  if (resampled.positives.empty() || resampled.negatives.empty()) {
    throw Error(ErrorKind::kInvalidArgument, "resampled sets must be non-empty");
  }
  return fit_on(matrix, resampled.positive_ids(), resampled.negative_ids(), std::nullopt, options);
}

std::string_view to_string(ClassifierStage stage) {
  return stage == ClassifierStage::kInitial ? "initial" : "resampled";
}

VisualnessReport visualness(const LinearModel& model, const ActivationMatrix& matrix,
                            const DatasetPartition& test_partition, std::span<const std::string> training_ids,
                            std::uint64_t seed, ClassifierStage stage) {
  if (test_partition.positive_ids.empty() || test_partition.negative_ids.empty()) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("word '{}': test split needs both classes (positives {}, negatives {})",
                            test_partition.word, test_partition.positive_ids.size(),
                            test_partition.negative_ids.size()));
  }
  const std::set<std::string_view> trained(training_ids.begin(), training_ids.end());
  for (const auto* ids : {&test_partition.positive_ids, &test_partition.negative_ids}) {
    for (const auto& id : *ids) {
      if (trained.contains(id)) {
        throw Error(ErrorKind::kInvalidArgument, fmt::format("test image '{}' was used for training", id));
      }
    }
  }
  const auto sample = balanced_subsample(test_partition.positive_ids, test_partition.negative_ids, seed);
  std::size_t correct = 0;
  for (const auto& id : sample.positive_ids) {
    if (model.confidence_for_activations(matrix.row(matrix.row_of(id))) >= 0.5) ++correct;
  }
  for (const auto& id : sample.negative_ids) {
    if (model.confidence_for_activations(matrix.row(matrix.row_of(id))) < 0.5) ++correct;
  }
  VisualnessReport report;
  report.word = test_partition.word;
  report.n_pos = sample.positive_ids.size();
  report.n_neg = sample.negative_ids.size();
  report.visualness = double(correct) / double(report.n_pos + report.n_neg);
  report.stage = stage;
  report.seed = seed;
  report.evaluated_ids = sample.positive_ids;
  report.evaluated_ids.insert(report.evaluated_ids.end(), sample.negative_ids.begin(), sample.negative_ids.end());
  return report;
}

WordClassification classify_word(const ActivationMatrix& matrix, const DatasetPartition& train_partition,
                                 const DatasetPartition& test_partition, const PrimeUnitSet& prime,
                                 const ClassifyOptions& options) {
  WordClassification out;
  out.word = train_partition.word;
  TrainOptions train = options.train;
  train.seed = options.seed;
  out.initial = train_initial(matrix, train_partition, prime, train, Rng::derive(options.seed, "initial:" + out.word),
                              &out.initial_training);
  // Ranking runs over the balanced pool, so both sides are cut at the same depth.
  const DatasetPartition pool{train_partition.word, train_partition.split, out.initial_training.positive_ids,
                              out.initial_training.negative_ids};
  out.resampled = rank_and_resample(out.initial, matrix, pool, options.resample_fraction);
  out.full = train_full(matrix, out.resampled, train);

  std::vector<std::string> trained = out.initial_training.positive_ids;
  trained.insert(trained.end(), out.initial_training.negative_ids.begin(), out.initial_training.negative_ids.end());
  for (const auto& ids : {out.resampled.positive_ids(), out.resampled.negative_ids()}) {
    trained.insert(trained.end(), ids.begin(), ids.end());
  }
  const std::uint64_t eval_seed = Rng::derive(options.seed, "eval:" + out.word);
  out.initial_report = visualness(out.initial, matrix, test_partition, trained, eval_seed, ClassifierStage::kInitial);
  out.resampled_report = visualness(out.full, matrix, test_partition, trained, eval_seed, ClassifierStage::kResampled);
  return out;
}

namespace {

void append_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

double read_f64(std::string_view bytes, std::size_t offset) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

std::string encode_model(const LinearModel& model) {
  json header;
  header["dim"] = model.dim();
  header["selector"] = model.feature_selector ? json(*model.feature_selector) : json(nullptr);
  header["seed"] = model.seed;
  header["l2"] = model.l2;
  const std::string text = header.dump();
  std::string out;
  out += kModelMagic;
  out.push_back(static_cast<char>(kModelVersion));
  detail::append_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  append_f64(out, model.bias);
  for (const auto* v : {&model.weights, &model.feature_means, &model.feature_stds}) {
    for (double x : *v) append_f64(out, x);
  }
  return out;
}

LinearModel decode_model(std::string_view bytes, std::string_view source) {
  if (bytes.size() < 9 || bytes.substr(0, 4) != kModelMagic) {
    throw Error(ErrorKind::kFormat, fmt::format("{}: missing ALRM magic", source));
  }
  if (static_cast<std::uint8_t>(bytes[4]) != kModelVersion) {
    throw Error(ErrorKind::kFormat, fmt::format("{}: unsupported ALRM version", source));
  }
  const std::size_t header_len = detail::read_u32_le(bytes, 5);
  if (bytes.size() < 9 + header_len) throw Error(ErrorKind::kLengthMismatch, fmt::format("{}: truncated header", source));
  LinearModel model;
  std::size_t dim = 0;
  try {
    const json header = json::parse(bytes.substr(9, header_len));
    dim = header.at("dim").get<std::size_t>();
    if (!header.at("selector").is_null()) model.feature_selector = header.at("selector").get<std::vector<std::size_t>>();
    model.seed = header.at("seed").get<std::uint64_t>();
    model.l2 = header.at("l2").get<double>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, fmt::format("{}: bad ALRM header: {}", source, e.what()));
  }
  if (model.feature_selector && model.feature_selector->size() != dim) {
    throw Error(ErrorKind::kFormat, fmt::format("{}: selector length differs from dim", source));
  }
  const std::size_t expected = 8 * (1 + 3 * dim);
  const std::size_t payload = bytes.size() - 9 - header_len;
  if (payload != expected) {
    throw Error(ErrorKind::kLengthMismatch,
                fmt::format("{}: expected {} payload bytes for dim {}, found {}", source, expected, dim, payload));
  }
  std::size_t off = 9 + header_len;
  model.bias = read_f64(bytes, off);
  off += 8;
  for (auto* v : {&model.weights, &model.feature_means, &model.feature_stds}) {
    v->resize(dim);
    for (std::size_t j = 0; j < dim; ++j, off += 8) (*v)[j] = read_f64(bytes, off);
  }
  return model;
}

void write_model(const LinearModel& model, const std::filesystem::path& path) {
  write_file_atomic(path, encode_model(model));
}

LinearModel read_model(const std::filesystem::path& path) { return decode_model(read_file(path), path.string()); }

}  // namespace attrdisc
