#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace attrdisc {

struct PairVote {
  std::string word;
  std::size_t pair_index = 0;
  std::size_t positive_votes = 0;  // annotators who picked the positive image
  std::size_t annotators = 5;
};

struct HumanVisualness {
  std::string word;
  double score = 0.0;  // fraction of pairs with more than theta positive votes
  std::size_t n_pairs = 0;
  std::size_t theta = 3;
};

// "None" answers count as non-positive votes; every pair counts toward N.
HumanVisualness human_visualness(std::span<const PairVote> votes, std::size_t theta = 3);

// CSV word,pair_index,positive_votes,annotators.
std::vector<PairVote> load_votes(const std::filesystem::path& path);
std::map<std::string, std::vector<PairVote>> group_votes_by_word(std::span<const PairVote> votes);

double pearson(std::span<const double> x, std::span<const double> y);
// Pearson on average ranks (ties share the mean of their positions, 1-based).
double spearman(std::span<const double> x, std::span<const double> y);
std::vector<double> average_ranks(std::span<const double> values);

struct CorrelationReport {
  std::vector<std::string> words;  // joined keys, sorted
  double pearson = 0.0;
  double spearman = 0.0;
  std::size_t n = 0;
};

// Joins on the word intersection; needs at least three shared words.
CorrelationReport correlation_report(const std::map<std::string, double>& machine,
                                     const std::map<std::string, double>& human);

}  // namespace attrdisc
