#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace dstod {

using json = nlohmann::json;

enum class Speaker { user, system };

std::string to_string(Speaker speaker);
Speaker speaker_from_string(const std::string& name);

struct Utterance {
  Speaker speaker = Speaker::user;
  std::string text;
};

struct SlotValue {
  std::string domain;
  std::string slot;
  std::string value;

  friend bool operator==(const SlotValue&, const SlotValue&) = default;
};

/// State after one turn: the (domain, slot, value) triples mentioned so far.
using DialogState = std::vector<SlotValue>;

struct Dialog {
  std::string id;
  std::set<std::string> domains;
  std::vector<Utterance> turns;
  std::optional<std::vector<DialogState>> states;

  bool single_domain() const { return domains.size() == 1; }
};

/// Finite value sets for every (domain, slot). The reserved value "none" is
/// implicit and never stored.
class Ontology {
 public:
  static constexpr const char* kNone = "none";

  using Key = std::pair<std::string, std::string>;

  void add_slot(const std::string& domain, const std::string& slot, std::vector<std::string> values);

  bool contains(const std::string& domain, const std::string& slot) const;
  const std::vector<std::string>& values(const std::string& domain, const std::string& slot) const;

  /// All (domain, slot) keys in deterministic (lexicographic) order.
  std::vector<Key> slots() const;
  std::vector<Key> slots_for(const std::set<std::string>& domains) const;
  std::size_t size() const { return slots_.size(); }
  bool empty() const { return slots_.empty(); }

  json to_json() const;
  static Ontology from_json(const json& j);

  static Ontology load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  std::map<Key, std::vector<std::string>> slots_;
};

struct ThreadComment {
  std::string id;
  std::optional<std::string> parent_id;
  std::string body;
  std::string subreddit;
  std::int64_t created_utc = 0;
};

/// One comment tree. Comments are stored in (created_utc, id) order; the
/// root is always comments[0].
struct Thread {
  std::string id;  // id of the root comment
  std::vector<ThreadComment> comments;
  std::vector<std::optional<std::size_t>> parent;
  std::vector<std::vector<std::size_t>> children;

  /// Number of comments on the longest root-to-leaf path.
  std::size_t depth() const;
  /// Every comment below `index` (children, grandchildren, ...), in index order.
  std::vector<std::size_t> descendants(std::size_t index) const;
};

struct ThreadDump {
  std::vector<Thread> threads;  // ordered by root id
  std::size_t orphans_promoted = 0;
  std::size_t cycles_broken = 0;
};

struct DialogTriple {
  std::string context;
  std::string response;
  std::string false_response;
  std::string domain;
  std::string subreddit;
  std::string thread_id;
};

struct CorpusLine {
  std::string text;
  std::vector<std::string> matched_terms;
};

// -- validation ------------------------------------------------------------

void validate(const Dialog& dialog, const Ontology* ontology = nullptr);
void validate(const DialogTriple& triple);
void validate(const CorpusLine& line);

// -- JSON mapping ------------------------------------------------------------

json to_json(const Dialog& dialog);
Dialog dialog_from_json(const json& j);
json to_json(const ThreadComment& comment);
ThreadComment comment_from_json(const json& j);
json to_json(const DialogTriple& triple);
DialogTriple triple_from_json(const json& j);
json to_json(const CorpusLine& line);
CorpusLine corpus_line_from_json(const json& j);

// -- line-delimited JSON files ----------------------------------------------

/// Calls `fn(object, line_number)` for every non-blank line. Parse errors and
/// exceptions thrown by `fn` are rethrown as ParseError naming the line.
void for_each_jsonl(const std::filesystem::path& path,
                    const std::function<void(const json&, std::size_t)>& fn);

std::vector<Dialog> load_dialogs(const std::filesystem::path& path, const Ontology* ontology = nullptr);
void save_dialogs(const std::filesystem::path& path, const std::vector<Dialog>& dialogs);

/// Dialogs whose domain set is exactly {domain}, in input order.
std::vector<Dialog> filter_single_domain(const std::vector<Dialog>& dialogs, const std::string& domain);
/// Dialogs whose domain set contains `domain` (single- and multi-domain).
std::vector<Dialog> filter_domain(const std::vector<Dialog>& dialogs, const std::string& domain);

std::vector<ThreadComment> load_comments(const std::filesystem::path& path);
ThreadDump group_threads(std::vector<ThreadComment> comments);
ThreadDump load_thread_dump(const std::filesystem::path& path);
void save_comments(const std::filesystem::path& path, const std::vector<ThreadComment>& comments);

std::vector<DialogTriple> load_triples(const std::filesystem::path& path);
void save_triples(const std::filesystem::path& path, const std::vector<DialogTriple>& triples);

std::vector<CorpusLine> load_corpus(const std::filesystem::path& path);
void save_corpus(const std::filesystem::path& path, const std::vector<CorpusLine>& lines);

// -- MultiWOZ 2.1 conversion -------------------------------------------------

struct MultiWozSplits {
  std::vector<Dialog> train;
  std::vector<Dialog> dev;
  std::vector<Dialog> test;
  Ontology ontology;
};

/// Converts the MultiWOZ 2.1 distribution (data.json plus the validation and
/// test id lists) into Dialog records. Domains come from the non-empty goal
/// sections; per-turn states come from the system-turn belief metadata.
MultiWozSplits convert_multiwoz(const std::filesystem::path& data_json,
                                const std::filesystem::path& val_list,
                                const std::filesystem::path& test_list);

}  // namespace dstod
