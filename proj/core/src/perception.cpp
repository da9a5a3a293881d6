#include "attrdisc/perception.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "attrdisc/error.hpp"
#include "attrdisc/text_io.hpp"

namespace attrdisc {

HumanVisualness human_visualness(std::span<const PairVote> votes, std::size_t theta) {
  if (votes.empty()) throw Error(ErrorKind::kInvalidArgument, "no votes");
  HumanVisualness h;
  h.word = votes.front().word;
  h.theta = theta;
  h.n_pairs = votes.size();
  std::size_t agreed = 0;
  for (const auto& v : votes) {
    if (v.word != h.word) {
      throw Error(ErrorKind::kInvalidArgument, fmt::format("votes mix words '{}' and '{}'", h.word, v.word));
    }
    if (v.positive_votes > v.annotators) {
      throw Error(ErrorKind::kOutOfRange, fmt::format("word '{}' pair {}: {} positive votes from {} annotators",
                                                      v.word, v.pair_index, v.positive_votes, v.annotators));
    }
    if (v.positive_votes > theta) ++agreed;
  }
  h.score = double(agreed) / double(h.n_pairs);
  return h;
}

std::vector<PairVote> load_votes(const std::filesystem::path& path) {
  const auto table = read_csv(path);
  const auto c_word = table.column("word");
  const auto c_pair = table.column("pair_index");
  const auto c_pos = table.column("positive_votes");
  const auto c_ann = table.column("annotators");
  std::vector<PairVote> votes;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const std::string where = fmt::format("{}:{}", path.string(), table.line_numbers[r]);
    const auto pair = parse_integer(row[c_pair], where);
    const auto pos = parse_integer(row[c_pos], where);
    const auto ann = parse_integer(row[c_ann], where);
    if (pair < 0 || pos < 0 || ann < 1) throw Error(ErrorKind::kParse, where + ": negative count");
    if (pos > ann) {
      throw Error(ErrorKind::kOutOfRange, fmt::format("{}: {} positive votes from {} annotators", where, pos, ann));
    }
    votes.push_back({row[c_word], std::size_t(pair), std::size_t(pos), std::size_t(ann)});
  }
  return votes;
}

std::map<std::string, std::vector<PairVote>> group_votes_by_word(std::span<const PairVote> votes) {
  std::map<std::string, std::vector<PairVote>> out;
  for (const auto& v : votes) out[v.word].push_back(v);
  return out;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw Error(ErrorKind::kInvalidArgument, fmt::format("lengths differ ({} vs {})", x.size(), y.size()));
  }
  if (x.size() < 3) throw Error(ErrorKind::kInvalidArgument, "correlation needs at least 3 points");
  const double n = double(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw Error(ErrorKind::kNumerical, "correlation undefined for a constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = (double(i) + double(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw Error(ErrorKind::kInvalidArgument, fmt::format("lengths differ ({} vs {})", x.size(), y.size()));
  }
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

CorrelationReport correlation_report(const std::map<std::string, double>& machine,
                                     const std::map<std::string, double>& human) {
  CorrelationReport report;
  std::vector<double> xs;
  std::vector<double> ys;
  std::vector<std::string> missing;
  for (const auto& [word, score] : machine) {
    auto it = human.find(word);
    if (it == human.end()) {
      missing.push_back(word);
      continue;
    }
    report.words.push_back(word);
    xs.push_back(score);
    ys.push_back(it->second);
  }
  for (const auto& [word, _] : human) {
    if (!machine.contains(word)) missing.push_back(word);
  }
  report.n = report.words.size();
  if (report.n < 3) {
    std::sort(missing.begin(), missing.end());
    std::string list;
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) list += (i ? ", " : "") + missing[i];
    throw Error(ErrorKind::kInvalidArgument,
                fmt::format("only {} words shared by machine and human scores; unmatched: {}", report.n, list));
  }
  report.pearson = pearson(xs, ys);
  report.spearman = spearman(xs, ys);
  return report;
}

}  // namespace attrdisc
