#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <istream>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dstod/dialog_data.hpp"
#include "dstod/rng.hpp"
#include "dstod/term_extraction.hpp"

namespace dstod {

inline constexpr std::size_t kDialogicMinChars = 10;
inline constexpr std::size_t kFlatMinChars = 1;
inline constexpr std::size_t kDefaultCcTarget = 200000;

struct CleaningReport {
  std::size_t lines_in = 0;
  std::size_t lines_kept = 0;
  std::size_t emails_removed = 0;
  std::size_t urls_removed = 0;
  std::size_t too_short_dropped = 0;

  CleaningReport& operator+=(const CleaningReport& other);
  json to_json() const;
};

struct CleanResult {
  std::optional<std::string> text;
  CleaningReport delta;
};

/// Deletes whitespace tokens that look like emails ("@" followed later by
/// ".") or URLs (prefix "http://", "https://" or "www."), collapses
/// whitespace and lowercases. Returns no text when fewer than `min_chars`
/// characters survive.
CleanResult clean_text(std::string_view text, std::size_t min_chars = kDialogicMinChars);

/// Whole-token matcher for a fixed term list. Matches are reported once each,
/// in term-list order.
class TermMatcher {
 public:
  explicit TermMatcher(const std::vector<std::string>& terms);
  explicit TermMatcher(const DomainTermSet& terms) : TermMatcher(terms.terms) {}

  std::vector<std::string> match(std::string_view text) const;
  std::vector<std::string> match_tokens(const std::vector<std::string>& tokens) const;
  bool any(std::string_view text) const;

 private:
  std::vector<std::string> terms_;
  std::vector<std::vector<std::string>> term_tokens_;
  std::unordered_map<std::string, std::vector<std::size_t>> by_first_token_;
};

std::vector<std::string> match_terms(std::string_view text, const DomainTermSet& terms);

struct CcStats {
  CleaningReport cleaning;
  std::size_t emitted = 0;
  std::size_t target = 0;
  bool target_reached() const { return emitted >= target; }
};

/// Streaming DomainCC filter. Input may arrive in arbitrary chunks; lines are
/// reassembled before filtering, so output does not depend on chunking.
class DomainCcFilter {
 public:
  using Sink = std::function<void(const CorpusLine&)>;

  DomainCcFilter(const DomainTermSet& terms, std::size_t target, Sink sink);

  /// Returns false once the target has been reached.
  bool feed(std::string_view chunk);
  bool feed_line(std::string_view line);
  const CcStats& finish();
  const CcStats& stats() const { return stats_; }
  bool done() const { return stats_.emitted >= stats_.target; }

 private:
  TermMatcher matcher_;
  Sink sink_;
  std::string pending_;
  CcStats stats_;
};

CcStats build_domain_cc(std::istream& in, const DomainTermSet& terms, std::size_t target,
                        const DomainCcFilter::Sink& sink);
std::vector<CorpusLine> build_domain_cc(std::istream& in, const DomainTermSet& terms, std::size_t target,
                                        CcStats* stats = nullptr);

struct RedditStats {
  CleaningReport cleaning;
  std::size_t pairs_considered = 0;
  std::size_t dropped_cleaning = 0;
  std::size_t dropped_no_term = 0;
  std::size_t dropped_no_false_response = 0;
  std::size_t emitted = 0;

  json to_json() const;
};

/// Mines (context, response, false response) triples from comment threads.
/// A pair qualifies when either side matches a domain term and both survive
/// dialogic cleaning; the false response is drawn uniformly from the same
/// thread, excluding the context and every immediate child of the context.
std::vector<DialogTriple> build_domain_reddit(const ThreadDump& dump, const DomainTermSet& terms,
                                              std::uint64_t seed, RedditStats* stats = nullptr);

enum class RsLabel { positive, hard_negative, easy_negative };

std::string to_string(RsLabel label);

struct RSInstance {
  std::string context;
  std::string response;
  RsLabel label = RsLabel::positive;
  std::optional<int> k_drawn;
};

/// Every true response of a domain, tagged with its thread.
class ResponsePool {
 public:
  struct Entry {
    std::string thread_id;
    std::string text;
  };

  static ResponsePool from_triples(const std::vector<DialogTriple>& triples);

  void add(const std::string& domain, const std::string& thread_id, const std::string& text);
  const std::vector<Entry>& entries(const std::string& domain) const;

 private:
  std::unordered_map<std::string, std::vector<Entry>> by_domain_;
};

/// Instances derived from one triple: positive, hard negative, then k easy negatives.
struct TripleInstances {
  std::string thread_id;
  int k = 0;
  bool with_replacement = false;  // pool had fewer than k eligible responses
  std::vector<RSInstance> instances;
};

struct RsSampling {
  std::vector<TripleInstances> groups;
  std::size_t flagged = 0;

  std::vector<RSInstance> flatten() const;
};

RsSampling sample_rs_instances(const std::vector<DialogTriple>& triples, const ResponsePool& pool,
                               std::uint64_t seed);

struct NCEGroup {
  std::string context;
  std::vector<std::string> responses;
  std::size_t true_index = 0;
  int n_negatives = 0;
};

NCEGroup group_for_nce(const TripleInstances& instances, Rng& rng);
NCEGroup group_for_nce(const TripleInstances& instances, std::uint64_t seed);
std::vector<NCEGroup> build_nce_groups(const RsSampling& sampling, std::uint64_t seed);

}  // namespace dstod
