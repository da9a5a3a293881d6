#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "attrdisc/actstore.hpp"
#include "attrdisc/corpus.hpp"

namespace attrdisc {

struct HistogramOptions {
  std::size_t bins = 32;
  double alpha = 0.5;  // additive smoothing per bin
};

// Empirical activation distributions of one unit over the positive and
// negative image sets, on shared equal-width bins. Every probability is > 0.
struct UnitHistogramPair {
  UnitAddress unit;
  std::vector<double> edges;  // bins + 1, strictly increasing
  std::vector<double> p_pos;
  std::vector<double> p_neg;
};

// Bins span [min, max] of both sets together. When every value is equal the
// pair collapses to one bin with probability 1 on each side.
UnitHistogramPair estimate_histograms(std::span<const float> pos_values, std::span<const float> neg_values,
                                      const HistogramOptions& options = {});

struct UnitDivergence {
  UnitAddress unit;
  double score = 0.0;  // nats
};

// KL(p || q) + KL(q || p), natural log. Throws kNumerical on a zero or
// negative probability rather than returning infinity.
double symmetric_kl(std::span<const double> p, std::span<const double> q);
UnitDivergence symmetric_kl(const UnitHistogramPair& pair);

// One score per unit, in flat-index order.
std::vector<UnitDivergence> divergence_profile(const ActivationMatrix& matrix, const DatasetPartition& partition,
                                               const HistogramOptions& options = {}, std::size_t jobs = 1);

struct PrimeUnitSet {
  std::string word;
  std::vector<UnitAddress> units;  // descending score, ties by ascending flat index
  std::vector<double> scores;

  std::vector<std::size_t> flat_indices() const;
};

PrimeUnitSet select_prime_units(const std::string& word, std::span<const UnitDivergence> profile, std::size_t k);

// Per-layer maximum divergence normalised over layers. An all-zero profile
// maps to the uniform vector.
struct LayerDivergenceProfile {
  std::string word;
  std::vector<double> per_layer_max;
  std::vector<double> normalized;
  double normalizer = 0.0;
};

LayerDivergenceProfile layer_profile(const std::string& word, std::span<const UnitDivergence> profile,
                                     std::span<const LayerSchema> layers);

struct LayerSalienceTable {
  std::string layer;
  std::vector<std::string> ranked_words;  // by normalized layer score, descending; ties lexicographic
  std::vector<double> scores;
};

LayerSalienceTable salient_words(std::span<const LayerDivergenceProfile> profiles, std::span<const LayerSchema> layers,
                                 std::size_t layer_index);

// Average over the vocabulary of each layer's divergence mass, aggregated as
// a sum over the layer's units and, alternatively, as their maximum.
struct LayerMagnitude {
  std::vector<double> sum;
  std::vector<double> max;

  static std::vector<double> relative(std::span<const double> v);
};

LayerMagnitude average_layer_magnitude(std::span<const std::vector<UnitDivergence>> profiles,
                                       std::span<const LayerSchema> layers);

}  // namespace attrdisc
