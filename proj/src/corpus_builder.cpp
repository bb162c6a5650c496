#include "dstod/corpus_builder.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "dstod/error.hpp"
#include "dstod/text.hpp"

namespace dstod {

CleaningReport& CleaningReport::operator+=(const CleaningReport& o) {
  lines_in += o.lines_in;
  lines_kept += o.lines_kept;
  emails_removed += o.emails_removed;
  urls_removed += o.urls_removed;
  too_short_dropped += o.too_short_dropped;
  return *this;
}

json CleaningReport::to_json() const {
  return {{"lines_in", lines_in},
          {"lines_kept", lines_kept},
          {"emails_removed", emails_removed},
          {"urls_removed", urls_removed},
          {"too_short_dropped", too_short_dropped}};
}

namespace {

bool is_email(const std::string& tok) {
  auto at = tok.find('@');
  return at != std::string::npos && tok.find('.', at + 1) != std::string::npos;
}

bool is_url(const std::string& tok) {
  return tok.rfind("http://", 0) == 0 || tok.rfind("https://", 0) == 0 || tok.rfind("www.", 0) == 0;
}

}  // namespace

CleanResult clean_text(std::string_view text, std::size_t min_chars) {
  CleanResult r;
  r.delta.lines_in = 1;
  std::string out;
  for (auto& tok : split_whitespace(to_lower(text))) {
    if (is_email(tok)) {
      ++r.delta.emails_removed;
      continue;
    }
    if (is_url(tok)) {
      ++r.delta.urls_removed;
      continue;
    }
    if (!out.empty()) out.push_back(' ');
    out.append(tok);
  }
  if (out.size() < min_chars) {
    r.delta.too_short_dropped = 1;
    return r;
  }
  r.delta.lines_kept = 1;
  r.text = std::move(out);
  return r;
}

// -- TermMatcher ---------------------------------------------------------------

TermMatcher::TermMatcher(const std::vector<std::string>& terms) : terms_(terms) {
  term_tokens_.reserve(terms_.size());
  for (std::size_t i = 0; i < terms_.size(); ++i) {
    term_tokens_.push_back(tokenize(terms_[i]));
    if (!term_tokens_.back().empty()) by_first_token_[term_tokens_.back().front()].push_back(i);
  }
}

std::vector<std::string> TermMatcher::match_tokens(const std::vector<std::string>& tokens) const {
  std::vector<bool> hit(terms_.size(), false);
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    auto it = by_first_token_.find(tokens[pos]);
    if (it == by_first_token_.end()) continue;
    for (auto idx : it->second) {
      const auto& tt = term_tokens_[idx];
      if (pos + tt.size() <= tokens.size() &&
          std::equal(tt.begin(), tt.end(), tokens.begin() + static_cast<std::ptrdiff_t>(pos))) {
        hit[idx] = true;
      }
    }
  }
  std::vector<std::string> out;
  std::set<std::string> emitted;
  for (std::size_t i = 0; i < terms_.size(); ++i) {
    if (hit[i] && emitted.insert(terms_[i]).second) out.push_back(terms_[i]);
  }
  return out;
}

std::vector<std::string> TermMatcher::match(std::string_view text) const { return match_tokens(tokenize(text)); }

bool TermMatcher::any(std::string_view text) const { return !match(text).empty(); }

std::vector<std::string> match_terms(std::string_view text, const DomainTermSet& terms) {
  return TermMatcher(terms).match(text);
}

// -- DomainCC --------------------------------------------------------------------

DomainCcFilter::DomainCcFilter(const DomainTermSet& terms, std::size_t target, Sink sink)
    : matcher_(terms), sink_(std::move(sink)) {
  if (target < 1) throw Error("build_domain_cc: target must be >= 1");
  stats_.target = target;
}

bool DomainCcFilter::feed_line(std::string_view line) {
  if (done()) return false;
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  auto cleaned = clean_text(line, kFlatMinChars);
  stats_.cleaning += cleaned.delta;
  if (!cleaned.text) return true;
  auto matched = matcher_.match(*cleaned.text);
  if (matched.empty()) return true;
  CorpusLine out{std::move(*cleaned.text), std::move(matched)};
  validate(out);
  sink_(out);
  ++stats_.emitted;
  return !done();
}

bool DomainCcFilter::feed(std::string_view chunk) {
  std::size_t start = 0;
  while (start <= chunk.size()) {
    auto nl = chunk.find('\n', start);
    if (nl == std::string_view::npos) {
      pending_.append(chunk.substr(start));
      break;
    }
    pending_.append(chunk.substr(start, nl - start));
    std::string line;
    line.swap(pending_);
    if (!feed_line(line)) return false;
    start = nl + 1;
  }
  return !done();
}

const CcStats& DomainCcFilter::finish() {
  if (!pending_.empty()) {
    std::string line;
    line.swap(pending_);
    feed_line(line);
  }
  return stats_;
}

CcStats build_domain_cc(std::istream& in, const DomainTermSet& terms, std::size_t target,
                        const DomainCcFilter::Sink& sink) {
  if (!in) throw IoError("build_domain_cc: unreadable input stream");
  DomainCcFilter filter(terms, target, sink);
  std::string line;
  while (!filter.done() && std::getline(in, line)) filter.feed_line(line);
  if (in.bad()) throw IoError("build_domain_cc: read error");
  return filter.finish();
}

std::vector<CorpusLine> build_domain_cc(std::istream& in, const DomainTermSet& terms, std::size_t target,
                                        CcStats* stats) {
  std::vector<CorpusLine> out;
  auto s = build_domain_cc(in, terms, target, [&](const CorpusLine& l) { out.push_back(l); });
  if (stats != nullptr) *stats = s;
  return out;
}

// -- DomainReddit ------------------------------------------------------------------

json RedditStats::to_json() const {
  return {{"cleaning", cleaning.to_json()},
          {"pairs_considered", pairs_considered},
          {"dropped_cleaning", dropped_cleaning},
          {"dropped_no_term", dropped_no_term},
          {"dropped_no_false_response", dropped_no_false_response},
          {"emitted", emitted}};
}

std::vector<DialogTriple> build_domain_reddit(const ThreadDump& dump, const DomainTermSet& terms, std::uint64_t seed,
                                              RedditStats* stats) {
  RedditStats st;
  TermMatcher matcher(terms);
  Rng rng(seed);
  std::vector<DialogTriple> out;

  for (const auto& thread : dump.threads) {
    const std::size_t n = thread.comments.size();
    std::vector<std::optional<std::string>> cleaned(n);
    std::vector<bool> has_term(n, false);
    for (std::size_t i = 0; i < n; ++i) {
      auto r = clean_text(thread.comments[i].body, kDialogicMinChars);
      st.cleaning += r.delta;
      cleaned[i] = std::move(r.text);
      if (cleaned[i]) has_term[i] = matcher.any(*cleaned[i]);
    }

    for (std::size_t ctx = 0; ctx < n; ++ctx) {
      const auto& kids = thread.children[ctx];
      for (auto resp : kids) {
        ++st.pairs_considered;
        if (!cleaned[ctx] || !cleaned[resp]) {
          ++st.dropped_cleaning;
          continue;
        }
        if (!has_term[ctx] && !has_term[resp]) {
          ++st.dropped_no_term;
          continue;
        }
        std::vector<std::size_t> candidates;
        for (std::size_t j = 0; j < n; ++j) {
          if (j == ctx || !cleaned[j]) continue;
          if (std::find(kids.begin(), kids.end(), j) != kids.end()) continue;
          if (*cleaned[j] == *cleaned[resp]) continue;
          candidates.push_back(j);
        }
        if (candidates.empty()) {
          ++st.dropped_no_false_response;
          continue;
        }
        auto pick = candidates[uniform_index(rng, candidates.size())];
        DialogTriple t;
        t.context = *cleaned[ctx];
        t.response = *cleaned[resp];
        t.false_response = *cleaned[pick];
        t.domain = terms.domain;
        t.subreddit = thread.comments[ctx].subreddit;
        t.thread_id = thread.id;
        validate(t);
        out.push_back(std::move(t));
        ++st.emitted;
      }
    }
  }
  if (stats != nullptr) *stats = st;
  return out;
}

// -- RS instances ----------------------------------------------------------------

std::string to_string(RsLabel label) {
  switch (label) {
    case RsLabel::positive: return "positive";
    case RsLabel::hard_negative: return "hard_negative";
    case RsLabel::easy_negative: return "easy_negative";
  }
  return "?";
}

ResponsePool ResponsePool::from_triples(const std::vector<DialogTriple>& triples) {
  ResponsePool pool;
  for (const auto& t : triples) pool.add(t.domain, t.thread_id, t.response);
  return pool;
}

void ResponsePool::add(const std::string& domain, const std::string& thread_id, const std::string& text) {
  by_domain_[domain].push_back({thread_id, text});
}

const std::vector<ResponsePool::Entry>& ResponsePool::entries(const std::string& domain) const {
  static const std::vector<Entry> kEmpty;
  auto it = by_domain_.find(domain);
  return it == by_domain_.end() ? kEmpty : it->second;
}

std::vector<RSInstance> RsSampling::flatten() const {
  std::vector<RSInstance> out;
  for (const auto& g : groups) out.insert(out.end(), g.instances.begin(), g.instances.end());
  return out;
}

RsSampling sample_rs_instances(const std::vector<DialogTriple>& triples, const ResponsePool& pool,
                               std::uint64_t seed) {
  RsSampling out;
  Rng rng(seed);
  std::uniform_int_distribution<int> draw_k(1, 3);
  out.groups.reserve(triples.size());

  for (const auto& t : triples) {
    TripleInstances g;
    g.thread_id = t.thread_id;
    g.k = draw_k(rng);
    g.instances.push_back({t.context, t.response, RsLabel::positive, g.k});
    g.instances.push_back({t.context, t.false_response, RsLabel::hard_negative, g.k});

    const auto& entries = pool.entries(t.domain);
    auto eligible = [&](std::size_t i) {
      return entries[i].thread_id != t.thread_id && entries[i].text != t.response;
    };
    std::vector<std::size_t> chosen;
    // Rejection sampling first; fall back to explicit enumeration when the
    // eligible part of the pool is small.
    const std::size_t max_attempts = 64 * static_cast<std::size_t>(g.k);
    for (std::size_t attempt = 0; !entries.empty() && attempt < max_attempts &&
                                  chosen.size() < static_cast<std::size_t>(g.k);
         ++attempt) {
      auto i = uniform_index(rng, entries.size());
      if (eligible(i) && std::find(chosen.begin(), chosen.end(), i) == chosen.end()) chosen.push_back(i);
    }
    if (chosen.size() < static_cast<std::size_t>(g.k)) {
      std::vector<std::size_t> all;
      for (std::size_t i = 0; i < entries.size(); ++i) {
        if (eligible(i)) all.push_back(i);
      }
      chosen.clear();
      if (all.size() >= static_cast<std::size_t>(g.k)) {
        std::shuffle(all.begin(), all.end(), rng);
        chosen.assign(all.begin(), all.begin() + g.k);
      } else if (!all.empty()) {
        g.with_replacement = true;
        for (int j = 0; j < g.k; ++j) chosen.push_back(all[uniform_index(rng, all.size())]);
      } else {
        g.with_replacement = true;
      }
      if (g.with_replacement) ++out.flagged;
    }
    for (auto i : chosen) g.instances.push_back({t.context, entries[i].text, RsLabel::easy_negative, g.k});
    out.groups.push_back(std::move(g));
  }
  return out;
}

NCEGroup group_for_nce(const TripleInstances& instances, Rng& rng) {
  if (instances.instances.empty() || instances.instances.front().label != RsLabel::positive) {
    throw Error("group_for_nce: first instance must be the positive pair");
  }
  NCEGroup g;
  g.context = instances.instances.front().context;
  std::vector<std::size_t> perm(instances.instances.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t slot = 0; slot < perm.size(); ++slot) {
    g.responses.push_back(instances.instances[perm[slot]].response);
    if (perm[slot] == 0) g.true_index = slot;
  }
  g.n_negatives = static_cast<int>(g.responses.size()) - 1;
  return g;
}

NCEGroup group_for_nce(const TripleInstances& instances, std::uint64_t seed) {
  Rng rng(seed);
  return group_for_nce(instances, rng);
}

std::vector<NCEGroup> build_nce_groups(const RsSampling& sampling, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<NCEGroup> out;
  out.reserve(sampling.groups.size());
  for (const auto& g : sampling.groups) out.push_back(group_for_nce(g, rng));
  return out;
}

}  // namespace dstod
