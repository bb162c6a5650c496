#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dstod/dialog_data.hpp"

namespace dstod {

struct NgramStats {
  std::uint64_t tf = 0;  // occurrences across all dialogs
  std::uint64_t df = 0;  // dialogs containing the ngram at least once

  friend bool operator==(const NgramStats&, const NgramStats&) = default;
};

/// Keyed by the space-joined token sequence.
using NgramCounts = std::unordered_map<std::string, NgramStats>;

/// Counts every 1..max_n gram inside each utterance (windows never cross
/// utterance boundaries). Throws on empty input.
NgramCounts count_ngrams(const std::vector<Dialog>& dialogs, int max_n = 3);

/// Commutative, associative merge used when counting shards separately.
void merge_counts(NgramCounts& into, const NgramCounts& shard);

struct ScoredNgram {
  std::string ngram;
  std::uint64_t tf = 0;
  std::uint64_t df = 0;
  std::uint64_t total_dialogs = 0;
  double idf = 0.0;    // total_dialogs / df, no logarithm
  double score = 0.0;  // tf * idf

  std::size_t order() const;
};

/// Sorted by score descending; ties by tf descending, then ngram ascending.
/// The comparison is carried out on exact integer cross-products.
std::vector<ScoredNgram> score_and_rank(const NgramCounts& counts, std::uint64_t total_dialogs);

/// British-to-American spelling pairs applied token-wise.
const std::map<std::string, std::string>& builtin_variant_map();

struct CurateOptions {
  std::size_t top_n = 80;
  std::vector<std::string> exclusion;
  std::map<std::string, std::string> variant_map = builtin_variant_map();
  bool backfill = true;
};

struct DomainTermSet {
  std::string domain;
  std::vector<std::string> terms;  // survivors first, appended variants last
  std::size_t top_n = 0;
  std::vector<std::string> excluded;  // exclusion entries that were removed from the ranking
  std::vector<std::pair<std::string, std::string>> variants_added;
  std::map<std::string, double> scores;
  bool truncated = false;  // fewer than top_n ngrams were available

  json to_json() const;
  static DomainTermSet from_json(const json& j);
  static DomainTermSet load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

DomainTermSet curate(const std::vector<ScoredNgram>& ranked, const std::string& domain,
                     const CurateOptions& options = {});

/// count_ngrams + score_and_rank + curate over the single-domain dialogs.
DomainTermSet extract_domain_terms(const std::vector<Dialog>& dialogs, const std::string& domain,
                                   const CurateOptions& options = {});

}  // namespace dstod
