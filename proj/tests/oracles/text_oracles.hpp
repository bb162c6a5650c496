#pragma once

// Brute-force reference implementations used only by tests. They share the
// tokenizer with the library but nothing else.

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dstod/dialog_data.hpp"
#include "dstod/text.hpp"

namespace dstod::oracle {

struct GramCount {
  std::uint64_t tf = 0;
  std::uint64_t df = 0;
};

inline std::string window(const std::vector<std::string>& tokens, std::size_t start, std::size_t n) {
  std::string out;
  for (std::size_t k = 0; k < n; ++k) {
    if (k > 0) out += ' ';
    out += tokens[start + k];
  }
  return out;
}

/// Quadratic recount: enumerate candidate grams, then rescan every window of
/// every utterance for each candidate.
inline std::map<std::string, GramCount> brute_force_counts(const std::vector<Dialog>& dialogs, std::size_t max_n = 3) {
  std::vector<std::vector<std::vector<std::string>>> tokenized;
  std::set<std::string> candidates;
  for (const auto& d : dialogs) {
    std::vector<std::vector<std::string>> utts;
    for (const auto& t : d.turns) utts.push_back(tokenize(t.text));
    for (const auto& u : utts)
      for (std::size_t n = 1; n <= max_n; ++n)
        for (std::size_t i = 0; i + n <= u.size(); ++i) candidates.insert(window(u, i, n));
    tokenized.push_back(std::move(utts));
  }
  std::map<std::string, GramCount> out;
  for (const auto& gram : candidates) {
    const std::size_t n = static_cast<std::size_t>(std::count(gram.begin(), gram.end(), ' ')) + 1;
    GramCount c;
    for (const auto& utts : tokenized) {
      std::uint64_t in_dialog = 0;
      for (const auto& u : utts)
        for (std::size_t i = 0; i + n <= u.size(); ++i)
          if (window(u, i, n) == gram) ++in_dialog;
      c.tf += in_dialog;
      if (in_dialog > 0) ++c.df;
    }
    out[gram] = c;
  }
  return out;
}

/// Every term whose token sequence equals some window of the text.
inline std::set<std::string> brute_force_matches(const std::string& text, const std::vector<std::string>& terms) {
  const auto tokens = tokenize(text);
  std::set<std::string> out;
  for (const auto& term : terms) {
    const auto tt = tokenize(term);
    if (tt.empty()) continue;
    for (std::size_t i = 0; i + tt.size() <= tokens.size(); ++i) {
      bool eq = true;
      for (std::size_t k = 0; k < tt.size() && eq; ++k) eq = tokens[i + k] == tt[k];
      if (eq) {
        out.insert(term);
        break;
      }
    }
  }
  return out;
}

inline std::vector<Dialog> random_corpus(std::mt19937_64& rng, std::size_t n_dialogs, std::size_t vocab = 12) {
  std::vector<std::string> words;
  for (std::size_t i = 0; i < vocab; ++i) words.push_back("w" + std::to_string(i));
  words.push_back("taxi");
  words.push_back(",");
  std::vector<Dialog> out;
  for (std::size_t d = 0; d < n_dialogs; ++d) {
    Dialog dialog;
    dialog.id = "r" + std::to_string(d);
    dialog.domains = {"taxi"};
    const std::size_t turns = 1 + rng() % 4;
    for (std::size_t t = 0; t < turns; ++t) {
      std::string text;
      const std::size_t len = 1 + rng() % 9;
      for (std::size_t k = 0; k < len; ++k) {
        if (k > 0) text += ' ';
        // Skewed sampling so some grams repeat often.
        auto idx = std::min<std::size_t>(words.size() - 1, (rng() % words.size()) * (rng() % 2));
        text += words[idx];
      }
      dialog.turns.push_back({t % 2 == 0 ? Speaker::user : Speaker::system, text});
    }
    out.push_back(std::move(dialog));
  }
  return out;
}

}  // namespace dstod::oracle
