#include "dstod/term_extraction.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <unordered_set>

#include "dstod/error.hpp"
#include "dstod/text.hpp"

namespace dstod {

NgramCounts count_ngrams(const std::vector<Dialog>& dialogs, int max_n) {
  if (dialogs.empty()) throw Error("count_ngrams: no dialogs");
  if (max_n < 1) throw Error("count_ngrams: max_n must be >= 1");
  NgramCounts counts;
  std::unordered_set<std::string> seen;
  for (const auto& dialog : dialogs) {
    seen.clear();
    for (const auto& turn : dialog.turns) {
      const auto tokens = tokenize(turn.text);
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        std::string gram;
        for (std::size_t n = 1; n <= static_cast<std::size_t>(max_n) && i + n <= tokens.size(); ++n) {
          if (n > 1) gram.push_back(' ');
          gram.append(tokens[i + n - 1]);
          auto& stats = counts[gram];
          ++stats.tf;
          if (seen.insert(gram).second) ++stats.df;
        }
      }
    }
  }
  return counts;
}

void merge_counts(NgramCounts& into, const NgramCounts& shard) {
  for (const auto& [gram, stats] : shard) {
    auto& s = into[gram];
    s.tf += stats.tf;
    s.df += stats.df;
  }
}

std::size_t ScoredNgram::order() const {
  return static_cast<std::size_t>(std::count(ngram.begin(), ngram.end(), ' ')) + 1;
}

std::vector<ScoredNgram> score_and_rank(const NgramCounts& counts, std::uint64_t total_dialogs) {
  std::vector<ScoredNgram> out;
  out.reserve(counts.size());
  for (const auto& [gram, stats] : counts) {
    if (stats.df == 0) throw Error("score_and_rank: ngram '" + gram + "' has zero dialog frequency");
    if (stats.df > total_dialogs) throw Error("score_and_rank: dialog frequency exceeds total for '" + gram + "'");
    ScoredNgram s;
    s.ngram = gram;
    s.tf = stats.tf;
    s.df = stats.df;
    s.total_dialogs = total_dialogs;
    s.idf = static_cast<double>(total_dialogs) / static_cast<double>(stats.df);
    s.score = static_cast<double>(stats.tf) * s.idf;
    out.push_back(std::move(s));
  }
  std::sort(out.begin(), out.end(), [](const ScoredNgram& a, const ScoredNgram& b) {
    // score_a > score_b  <=>  tf_a * df_b > tf_b * df_a  (total_dialogs cancels)
    auto lhs = static_cast<unsigned __int128>(a.tf) * b.df;
    auto rhs = static_cast<unsigned __int128>(b.tf) * a.df;
    if (lhs != rhs) return lhs > rhs;
    if (a.tf != b.tf) return a.tf > b.tf;
    return a.ngram < b.ngram;
  });
  return out;
}

const std::map<std::string, std::string>& builtin_variant_map() {
  static const std::map<std::string, std::string> kMap = {
      {"centre", "center"},       {"centres", "centers"},     {"theatre", "theater"},
      {"theatres", "theaters"},   {"metre", "meter"},         {"metres", "meters"},
      {"litre", "liter"},         {"litres", "liters"},       {"kilometre", "kilometer"},
      {"kilometres", "kilometers"}, {"fibre", "fiber"},       {"calibre", "caliber"},
      {"sombre", "somber"},       {"spectre", "specter"},     {"colour", "color"},
      {"colours", "colors"},      {"coloured", "colored"},    {"favour", "favor"},
      {"favourite", "favorite"},  {"favourites", "favorites"}, {"flavour", "flavor"},
      {"flavours", "flavors"},    {"harbour", "harbor"},      {"honour", "honor"},
      {"labour", "labor"},        {"neighbour", "neighbor"},  {"neighbours", "neighbors"},
      {"neighbourhood", "neighborhood"}, {"behaviour", "behavior"}, {"humour", "humor"},
      {"rumour", "rumor"},        {"parlour", "parlor"},      {"odour", "odor"},
      {"vapour", "vapor"},        {"savoury", "savory"},
  };
  return kMap;
}

DomainTermSet curate(const std::vector<ScoredNgram>& ranked, const std::string& domain, const CurateOptions& options) {
  if (options.top_n < 1) throw Error("curate: top_n must be >= 1");
  DomainTermSet set;
  set.domain = domain;
  set.top_n = options.top_n;
  const std::set<std::string> exclusion(options.exclusion.begin(), options.exclusion.end());

  std::set<std::string> kept;
  for (std::size_t rank = 0; rank < ranked.size(); ++rank) {
    if (!options.backfill && rank >= options.top_n) break;
    if (set.terms.size() >= options.top_n) break;
    const auto& s = ranked[rank];
    if (exclusion.count(s.ngram)) {
      set.excluded.push_back(s.ngram);
      continue;
    }
    set.terms.push_back(s.ngram);
    set.scores[s.ngram] = s.score;
    kept.insert(s.ngram);
  }
  set.truncated = set.terms.size() < options.top_n;

  const std::size_t survivors = set.terms.size();
  for (std::size_t i = 0; i < survivors; ++i) {
    const auto source = set.terms[i];
    auto tokens = split_whitespace(source);
    bool changed = false;
    for (auto& tok : tokens) {
      auto it = options.variant_map.find(tok);
      if (it != options.variant_map.end()) {
        tok = it->second;
        changed = true;
      }
    }
    if (!changed) continue;
    auto variant = join(tokens);
    if (kept.count(variant) || exclusion.count(variant)) continue;
    set.terms.push_back(variant);
    kept.insert(variant);
    set.variants_added.emplace_back(source, variant);
  }
  return set;
}

DomainTermSet extract_domain_terms(const std::vector<Dialog>& dialogs, const std::string& domain,
                                   const CurateOptions& options) {
  auto single = filter_single_domain(dialogs, domain);
  if (single.empty()) throw Error("no single-domain dialogs for domain '" + domain + "'");
  auto counts = count_ngrams(single);
  return curate(score_and_rank(counts, single.size()), domain, options);
}

json DomainTermSet::to_json() const {
  json variants = json::array();
  for (const auto& [s, v] : variants_added) variants.push_back({s, v});
  return {{"domain", domain},       {"top_n", top_n},       {"terms", terms},
          {"excluded", excluded},   {"variants_added", variants}, {"scores", scores}};
}

DomainTermSet DomainTermSet::from_json(const json& j) {
  DomainTermSet s;
  s.domain = j.at("domain").get<std::string>();
  s.top_n = j.at("top_n").get<std::size_t>();
  s.terms = j.at("terms").get<std::vector<std::string>>();
  s.excluded = j.value("excluded", std::vector<std::string>{});
  if (j.contains("variants_added")) {
    for (const auto& p : j["variants_added"]) s.variants_added.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
  }
  if (j.contains("scores")) s.scores = j["scores"].get<std::map<std::string, double>>();
  s.truncated = s.terms.size() - s.variants_added.size() < s.top_n;
  return s;
}

DomainTermSet DomainTermSet::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void DomainTermSet::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

}  // namespace dstod
