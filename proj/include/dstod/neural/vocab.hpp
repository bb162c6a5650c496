#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace dstod::nn {

/// Word-level vocabulary. Ids 0..4 are PAD, UNK, CLS, SEP, MASK.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kMask = 4;
  static constexpr int kNumSpecial = 5;

  Vocab();

  /// Tokens with count >= min_frequency, ordered by (count desc, token asc).
  static Vocab build(const std::vector<std::string>& lines, int min_frequency = 1);

  int id(const std::string& token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  int size() const { return static_cast<int>(tokens_.size()); }
  int min_frequency() const { return min_frequency_; }
  static bool is_special(int id) { return id < kNumSpecial; }

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  int min_frequency_ = 1;
};

struct EncodedSequence {
  std::vector<int> ids;
  std::vector<int> segments;
  std::vector<int> mask;

  int length() const { return static_cast<int>(ids.size()); }
  int valid_length() const;
};

enum class Truncate { tail, front };

struct EncodeOptions {
  int max_len = 256;
  std::optional<int> per_segment_cap = 128;
  Truncate side = Truncate::tail;  // which end of a segment is cut
  bool pad = true;
};

/// Layout: CLS a SEP [b SEP], padded with PAD (mask 0) to max_len. Each
/// segment is first cut to per_segment_cap tokens; if the pair still exceeds
/// max_len the longer segment is cut first so both SEPs survive.
EncodedSequence encode_pair(std::string_view a, std::optional<std::string_view> b, const Vocab& vocab,
                            const EncodeOptions& options = {});

/// Drops trailing padding.
EncodedSequence trim_padding(const EncodedSequence& seq);

}  // namespace dstod::nn

namespace dstod::nn {

/// Encoding conventions shared by the training and evaluation code. Outputs
/// carry no padding.
struct TextCodec {
  const Vocab* vocab = nullptr;
  int max_len = 256;
  int segment_cap = 128;

  /// CLS text SEP, text cut to segment_cap (tail).
  EncodedSequence single(std::string_view text) const;
  /// CLS a SEP b SEP with both segments capped.
  EncodedSequence pair(std::string_view a, std::string_view b) const;
  /// CLS text SEP, cut from the front to max_len (keeps the latest tokens).
  EncodedSequence history(std::string_view text) const;
  /// CLS u1 SEP u2 SEP ... un SEP, cut from the front to max_len.
  EncodedSequence history(const std::vector<std::string>& utterances) const;
};

}  // namespace dstod::nn
