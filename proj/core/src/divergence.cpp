#include "attrdisc/divergence.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "attrdisc/error.hpp"
#include "attrdisc/parallel.hpp"

namespace attrdisc {

UnitHistogramPair estimate_histograms(std::span<const float> pos_values, std::span<const float> neg_values,
                                      const HistogramOptions& options) {
  if (pos_values.empty() || neg_values.empty()) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("empty sample set (positives {}, negatives {})", pos_values.size(), neg_values.size()));
  }
  if (options.bins < 1) throw Error(ErrorKind::kInvalidArgument, "histogram needs at least one bin");
  if (!(options.alpha > 0.0)) throw Error(ErrorKind::kInvalidArgument, "smoothing alpha must be positive");

  double lo = pos_values.front();
  double hi = lo;
  for (auto values : {pos_values, neg_values}) {
    for (float v : values) {
      if (!std::isfinite(v)) throw Error(ErrorKind::kNonFinite, "activation value is not finite");
      lo = std::min(lo, double(v));
      hi = std::max(hi, double(v));
    }
  }

  UnitHistogramPair pair;
  if (lo == hi) {
    pair.edges = {lo, lo + 1.0};
    pair.p_pos = {1.0};
    pair.p_neg = {1.0};
    return pair;
  }

  const std::size_t bins = options.bins;
  pair.edges.resize(bins + 1);
  for (std::size_t k = 0; k < bins; ++k) pair.edges[k] = lo + (hi - lo) * double(k) / double(bins);
  pair.edges[bins] = hi;

  auto normalized = [&](std::span<const float> values) {
    std::vector<double> counts(bins, options.alpha);
    for (float v : values) {
      const double t = (double(v) - lo) / (hi - lo) * double(bins);
      const auto idx = std::min<std::size_t>(bins - 1, static_cast<std::size_t>(std::max(0.0, std::floor(t))));
      counts[idx] += 1.0;
    }
    const double total = double(values.size()) + double(bins) * options.alpha;
    for (auto& c : counts) c /= total;
    return counts;
  };
  pair.p_pos = normalized(pos_values);
  pair.p_neg = normalized(neg_values);
  return pair;
}

double symmetric_kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) {
    throw Error(ErrorKind::kInvalidArgument, fmt::format("distributions of length {} and {}", p.size(), q.size()));
  }
  double s = 0.0;
  for (std::size_t x = 0; x < p.size(); ++x) {
    if (!(p[x] > 0.0) || !(q[x] > 0.0)) {
      throw Error(ErrorKind::kNumerical, fmt::format("bin {} has zero probability ({}, {})", x, p[x], q[x]));
    }
    // p log(p/q) + q log(q/p) folded into one non-negative term per bin.
    s += (p[x] - q[x]) * (std::log(p[x]) - std::log(q[x]));
  }
  return s;
}

UnitDivergence symmetric_kl(const UnitHistogramPair& pair) {
  return {pair.unit, symmetric_kl(pair.p_pos, pair.p_neg)};
}

std::vector<UnitDivergence> divergence_profile(const ActivationMatrix& matrix, const DatasetPartition& partition,
                                               const HistogramOptions& options, std::size_t jobs) {
  std::vector<std::size_t> pos_rows;
  std::vector<std::size_t> neg_rows;
  pos_rows.reserve(partition.positive_ids.size());
  neg_rows.reserve(partition.negative_ids.size());
  for (const auto& id : partition.positive_ids) pos_rows.push_back(matrix.row_of(id));
  for (const auto& id : partition.negative_ids) neg_rows.push_back(matrix.row_of(id));

  std::vector<UnitDivergence> out(matrix.units());
  parallel_for(matrix.units(), jobs, [&](std::size_t u) {
    std::vector<float> pos(pos_rows.size());
    std::vector<float> neg(neg_rows.size());
    for (std::size_t i = 0; i < pos_rows.size(); ++i) pos[i] = matrix.at(pos_rows[i], u);
    for (std::size_t i = 0; i < neg_rows.size(); ++i) neg[i] = matrix.at(neg_rows[i], u);
    const UnitAddress address = matrix.address(u);
    try {
      auto pair = estimate_histograms(pos, neg, options);
      pair.unit = address;
      out[u] = symmetric_kl(pair);
    } catch (const Error& e) {
      throw Error(e.kind(), fmt::format("word '{}', layer '{}' unit {} (flat {}): {}", partition.word,
                                        matrix.layers()[address.layer_index].name, address.unit_index, u, e.what()));
    }
  });
  return out;
}

std::vector<std::size_t> PrimeUnitSet::flat_indices() const {
  std::vector<std::size_t> out;
  out.reserve(units.size());
  for (const auto& u : units) out.push_back(u.flat_index);
  return out;
}

PrimeUnitSet select_prime_units(const std::string& word, std::span<const UnitDivergence> profile, std::size_t k) {
  if (k < 1 || k > profile.size()) {
    throw Error(ErrorKind::kInvalidArgument, fmt::format("cannot select {} prime units from {}", k, profile.size()));
  }
  std::vector<std::size_t> order(profile.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (profile[a].score != profile[b].score) return profile[a].score > profile[b].score;
                      return profile[a].unit.flat_index < profile[b].unit.flat_index;
                    });
  PrimeUnitSet set;
  set.word = word;
  for (std::size_t i = 0; i < k; ++i) {
    set.units.push_back(profile[order[i]].unit);
    set.scores.push_back(profile[order[i]].score);
  }
  return set;
}

LayerDivergenceProfile layer_profile(const std::string& word, std::span<const UnitDivergence> profile,
                                     std::span<const LayerSchema> layers) {
  if (layers.empty()) throw Error(ErrorKind::kInvalidArgument, "empty layer schema");
  if (profile.size() != total_units(layers)) {
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("profile has {} units, schema {}", profile.size(), total_units(layers)));
  }
  LayerDivergenceProfile out;
  out.word = word;
  out.per_layer_max.assign(layers.size(), 0.0);
  const auto offsets = layer_offsets(layers);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    double m = 0.0;
    for (std::size_t i = offsets[l]; i < offsets[l + 1]; ++i) m = std::max(m, profile[i].score);
    out.per_layer_max[l] = m;
  }
  out.normalizer = std::accumulate(out.per_layer_max.begin(), out.per_layer_max.end(), 0.0);
  out.normalized.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    out.normalized[l] = out.normalizer > 0.0 ? out.per_layer_max[l] / out.normalizer : 1.0 / double(layers.size());
  }
  return out;
}

LayerSalienceTable salient_words(std::span<const LayerDivergenceProfile> profiles, std::span<const LayerSchema> layers,
                                 std::size_t layer_index) {
  if (profiles.empty()) throw Error(ErrorKind::kInvalidArgument, "empty vocabulary");
  if (layer_index >= layers.size()) throw Error(ErrorKind::kOutOfRange, fmt::format("layer index {}", layer_index));
  std::vector<std::size_t> order(profiles.size());
  std::iota(order.begin(), order.end(), 0);
  for (const auto& p : profiles) {
    if (p.normalized.size() != layers.size()) throw Error(ErrorKind::kInvalidArgument, "profile schema mismatch");
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double sa = profiles[a].normalized[layer_index];
    const double sb = profiles[b].normalized[layer_index];
    if (sa != sb) return sa > sb;
    return profiles[a].word < profiles[b].word;
  });
  LayerSalienceTable table;
  table.layer = layers[layer_index].name;
  for (auto i : order) {
    table.ranked_words.push_back(profiles[i].word);
    table.scores.push_back(profiles[i].normalized[layer_index]);
  }
  return table;
}

std::vector<double> LayerMagnitude::relative(std::span<const double> v) {
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  std::vector<double> out(v.size(), v.empty() ? 0.0 : 1.0 / double(v.size()));
  if (total > 0.0) {
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / total;
  }
  return out;
}

LayerMagnitude average_layer_magnitude(std::span<const std::vector<UnitDivergence>> profiles,
                                       std::span<const LayerSchema> layers) {
  if (profiles.empty()) throw Error(ErrorKind::kInvalidArgument, "empty vocabulary");
  const auto offsets = layer_offsets(layers);
  LayerMagnitude m;
  m.sum.assign(layers.size(), 0.0);
  m.max.assign(layers.size(), 0.0);
  for (const auto& profile : profiles) {
    if (profile.size() != offsets.back()) throw Error(ErrorKind::kInvalidArgument, "profile schema mismatch");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      double s = 0.0;
      double mx = 0.0;
      for (std::size_t i = offsets[l]; i < offsets[l + 1]; ++i) {
        s += profile[i].score;
        mx = std::max(mx, profile[i].score);
      }
      m.sum[l] += s;
      m.max[l] += mx;
    }
  }
  const double n = double(profiles.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    m.sum[l] /= n;
    m.max[l] /= n;
  }
  return m;
}

}  // namespace attrdisc
