#include "dstod/neural/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "dstod/error.hpp"
#include "dstod/text.hpp"

namespace dstod::nn {

Vocab::Vocab() {
  for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"}) {
    ids_[s] = static_cast<int>(tokens_.size());
    tokens_.emplace_back(s);
  }
}

Vocab Vocab::build(const std::vector<std::string>& lines, int min_frequency) {
  if (min_frequency < 1) throw Error("build_vocab: min_frequency must be >= 1");
  if (lines.empty()) throw Error("build_vocab: empty corpus");
  std::unordered_map<std::string, long long> counts;
  for (const auto& line : lines) {
    for (auto& tok : tokenize(line)) ++counts[tok];
  }
  if (counts.empty()) throw Error("build_vocab: corpus has no tokens");
  std::vector<std::pair<std::string, long long>> kept;
  for (auto& [tok, c] : counts) {
    if (c >= min_frequency) kept.emplace_back(tok, c);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocab v;
  v.min_frequency_ = min_frequency;
  for (auto& [tok, _] : kept) {
    if (v.ids_.count(tok)) continue;
    v.ids_[tok] = static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(tok);
  }
  return v;
}

int Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

nlohmann::json Vocab::to_json() const {
  return {{"min_frequency", min_frequency_}, {"tokens", tokens_}};
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  Vocab v;
  auto tokens = j.at("tokens").get<std::vector<std::string>>();
  if (tokens.size() < kNumSpecial) throw ValidationError("vocab missing special tokens");
  for (int i = 0; i < kNumSpecial; ++i) {
    if (tokens[static_cast<std::size_t>(i)] != v.tokens_[static_cast<std::size_t>(i)]) {
      throw ValidationError("vocab special tokens out of order");
    }
  }
  v.min_frequency_ = j.value("min_frequency", 1);
  for (std::size_t i = kNumSpecial; i < tokens.size(); ++i) {
    if (!v.ids_.emplace(tokens[i], static_cast<int>(v.tokens_.size())).second) {
      throw ValidationError("vocab repeats token '" + tokens[i] + "'");
    }
    v.tokens_.push_back(tokens[i]);
  }
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json().dump() << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return from_json(nlohmann::json::parse(in));
}

int EncodedSequence::valid_length() const {
  int n = 0;
  for (int m : mask) n += m;
  return n;
}

namespace {

std::vector<int> to_ids(std::string_view text, const Vocab& vocab) {
  std::vector<int> ids;
  for (const auto& tok : tokenize(text)) ids.push_back(vocab.id(tok));
  return ids;
}

void cut(std::vector<int>& ids, std::size_t keep, Truncate side) {
  if (ids.size() <= keep) return;
  if (side == Truncate::tail) {
    ids.resize(keep);
  } else {
    ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(keep));
  }
}

}  // namespace

EncodedSequence encode_pair(std::string_view a, std::optional<std::string_view> b, const Vocab& vocab,
                            const EncodeOptions& opt) {
  const int specials = b ? 3 : 2;
  if (opt.max_len < specials + 1) throw Error("encode_pair: max_len too small");
  auto ia = to_ids(a, vocab);
  std::vector<int> ib;
  if (b) ib = to_ids(*b, vocab);
  if (opt.per_segment_cap) {
    cut(ia, static_cast<std::size_t>(*opt.per_segment_cap), opt.side);
    cut(ib, static_cast<std::size_t>(*opt.per_segment_cap), opt.side);
  }
  const std::size_t budget = static_cast<std::size_t>(opt.max_len - specials);
  while (ia.size() + ib.size() > budget) {
    if (ia.size() >= ib.size()) {
      cut(ia, ia.size() - 1, opt.side);
    } else {
      cut(ib, ib.size() - 1, opt.side);
    }
  }

  EncodedSequence s;
  auto push = [&](int id, int seg) {
    s.ids.push_back(id);
    s.segments.push_back(seg);
    s.mask.push_back(1);
  };
  push(Vocab::kCls, 0);
  for (int id : ia) push(id, 0);
  push(Vocab::kSep, 0);
  if (b) {
    for (int id : ib) push(id, 1);
    push(Vocab::kSep, 1);
  }
  if (opt.pad) {
    while (s.length() < opt.max_len) {
      s.ids.push_back(Vocab::kPad);
      s.segments.push_back(0);
      s.mask.push_back(0);
    }
  }
  return s;
}

EncodedSequence trim_padding(const EncodedSequence& seq) {
  EncodedSequence out = seq;
  while (!out.mask.empty() && out.mask.back() == 0) {
    out.ids.pop_back();
    out.segments.pop_back();
    out.mask.pop_back();
  }
  return out;
}

}  // namespace dstod::nn

namespace dstod::nn {

EncodedSequence TextCodec::single(std::string_view text) const {
  return encode_pair(text, std::nullopt, *vocab, {max_len, segment_cap, Truncate::tail, false});
}

EncodedSequence TextCodec::pair(std::string_view a, std::string_view b) const {
  return encode_pair(a, b, *vocab, {max_len, segment_cap, Truncate::tail, false});
}

EncodedSequence TextCodec::history(std::string_view text) const {
  return encode_pair(text, std::nullopt, *vocab, {max_len, std::nullopt, Truncate::front, false});
}

EncodedSequence TextCodec::history(const std::vector<std::string>& utterances) const {
  if (max_len < 2) throw Error("history encoding: max_len too small");
  std::vector<int> body;
  for (const auto& u : utterances) {
    for (const auto& tok : tokenize(u)) body.push_back(vocab->id(tok));
    body.push_back(Vocab::kSep);
  }
  if (body.empty()) body.push_back(Vocab::kSep);
  const std::size_t budget = static_cast<std::size_t>(max_len - 1);
  if (body.size() > budget) body.erase(body.begin(), body.end() - static_cast<std::ptrdiff_t>(budget));
  EncodedSequence s;
  s.ids.push_back(Vocab::kCls);
  s.ids.insert(s.ids.end(), body.begin(), body.end());
  s.segments.assign(s.ids.size(), 0);
  s.mask.assign(s.ids.size(), 1);
  return s;
}

}  // namespace dstod::nn
