#include "dstod/dialog_data.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <unordered_map>

#include "dstod/error.hpp"
#include "dstod/text.hpp"

namespace dstod {

std::string to_string(Speaker speaker) { return speaker == Speaker::user ? "user" : "system"; }

Speaker speaker_from_string(const std::string& name) {
  if (name == "user") return Speaker::user;
  if (name == "system") return Speaker::system;
  throw ValidationError("unknown speaker '" + name + "'");
}

// -- Ontology ----------------------------------------------------------------

void Ontology::add_slot(const std::string& domain, const std::string& slot, std::vector<std::string> values) {
  if (values.empty()) throw ValidationError("ontology slot " + domain + "-" + slot + " has no values");
  std::set<std::string> seen;
  for (const auto& v : values) {
    if (v == kNone) throw ValidationError("ontology slot " + domain + "-" + slot + " lists reserved value 'none'");
    if (!seen.insert(v).second) throw ValidationError("ontology slot " + domain + "-" + slot + " repeats value '" + v + "'");
  }
  slots_[{domain, slot}] = std::move(values);
}

bool Ontology::contains(const std::string& domain, const std::string& slot) const {
  return slots_.count({domain, slot}) != 0;
}

const std::vector<std::string>& Ontology::values(const std::string& domain, const std::string& slot) const {
  auto it = slots_.find({domain, slot});
  if (it == slots_.end()) throw ValidationError("slot " + domain + "-" + slot + " not in ontology");
  return it->second;
}

std::vector<Ontology::Key> Ontology::slots() const {
  std::vector<Key> keys;
  keys.reserve(slots_.size());
  for (const auto& [k, _] : slots_) keys.push_back(k);
  return keys;
}

std::vector<Ontology::Key> Ontology::slots_for(const std::set<std::string>& domains) const {
  std::vector<Key> keys;
  for (const auto& [k, _] : slots_) {
    if (domains.count(k.first)) keys.push_back(k);
  }
  return keys;
}

json Ontology::to_json() const {
  json j = json::object();
  for (const auto& [k, values] : slots_) j[k.first][k.second] = values;
  return j;
}

Ontology Ontology::from_json(const json& j) {
  Ontology o;
  for (const auto& [domain, slots] : j.items()) {
    for (const auto& [slot, values] : slots.items()) {
      o.add_slot(domain, slot, values.get<std::vector<std::string>>());
    }
  }
  return o;
}

Ontology Ontology::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void Ontology::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

// -- Thread ------------------------------------------------------------------

std::size_t Thread::depth() const {
  if (comments.empty()) return 0;
  std::size_t best = 0;
  std::vector<std::pair<std::size_t, std::size_t>> stack{{0, 1}};
  while (!stack.empty()) {
    auto [node, d] = stack.back();
    stack.pop_back();
    best = std::max(best, d);
    for (auto c : children[node]) stack.emplace_back(c, d + 1);
  }
  return best;
}

std::vector<std::size_t> Thread::descendants(std::size_t index) const {
  std::vector<std::size_t> out;
  std::vector<std::size_t> stack(children[index].begin(), children[index].end());
  while (!stack.empty()) {
    auto node = stack.back();
    stack.pop_back();
    out.push_back(node);
    for (auto c : children[node]) stack.push_back(c);
  }
  std::sort(out.begin(), out.end());
  return out;
}

// -- validation ----------------------------------------------------------------

void validate(const Dialog& dialog, const Ontology* ontology) {
  if (dialog.turns.empty()) throw ValidationError("dialog '" + dialog.id + "' has no turns");
  for (const auto& t : dialog.turns) {
    if (trim(t.text).empty()) throw ValidationError("dialog '" + dialog.id + "' has an empty utterance");
  }
  if (dialog.states) {
    if (dialog.states->size() != dialog.turns.size()) {
      throw ValidationError("dialog '" + dialog.id + "' has " + std::to_string(dialog.states->size()) +
                            " state lists for " + std::to_string(dialog.turns.size()) + " turns");
    }
    if (ontology != nullptr) {
      for (const auto& state : *dialog.states) {
        for (const auto& sv : state) {
          if (!ontology->contains(sv.domain, sv.slot)) {
            throw ValidationError("dialog '" + dialog.id + "' uses unknown slot " + sv.domain + "-" + sv.slot);
          }
        }
      }
    }
  }
}

namespace {

bool has_email_or_url(const std::string& text) {
  for (const auto& tok : split_whitespace(text)) {
    auto at = tok.find('@');
    if (at != std::string::npos && tok.find('.', at) != std::string::npos) return true;
    if (tok.rfind("http://", 0) == 0 || tok.rfind("https://", 0) == 0 || tok.rfind("www.", 0) == 0) return true;
  }
  return false;
}

void check_clean(const std::string& text, const char* field) {
  if (text.size() < 10) throw ValidationError(std::string("triple ") + field + " shorter than 10 characters");
  if (has_email_or_url(text)) throw ValidationError(std::string("triple ") + field + " contains an email or URL");
}

}  // namespace

void validate(const DialogTriple& triple) {
  check_clean(triple.context, "context");
  check_clean(triple.response, "response");
  check_clean(triple.false_response, "false_response");
  if (triple.response == triple.false_response) throw ValidationError("triple response equals its false response");
}

void validate(const CorpusLine& line) {
  if (line.matched_terms.empty()) throw ValidationError("corpus line has no matched terms");
  auto tokens = tokenize(line.text);
  for (const auto& term : line.matched_terms) {
    auto tt = tokenize(term);
    bool found = false;
    for (std::size_t i = 0; !found && i + tt.size() <= tokens.size(); ++i) {
      found = std::equal(tt.begin(), tt.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i));
    }
    if (!found || tt.empty()) throw ValidationError("matched term '" + term + "' does not occur in line");
  }
}

// -- JSON mapping --------------------------------------------------------------

json to_json(const Dialog& d) {
  json j;
  j["id"] = d.id;
  j["domains"] = std::vector<std::string>(d.domains.begin(), d.domains.end());
  json turns = json::array();
  for (const auto& t : d.turns) turns.push_back({{"speaker", to_string(t.speaker)}, {"text", t.text}});
  j["turns"] = std::move(turns);
  if (d.states) {
    json states = json::array();
    for (const auto& state : *d.states) {
      json s = json::array();
      for (const auto& sv : state) s.push_back({{"domain", sv.domain}, {"slot", sv.slot}, {"value", sv.value}});
      states.push_back(std::move(s));
    }
    j["states"] = std::move(states);
  }
  return j;
}

Dialog dialog_from_json(const json& j) {
  Dialog d;
  d.id = j.at("id").get<std::string>();
  for (const auto& dom : j.at("domains")) d.domains.insert(dom.get<std::string>());
  for (const auto& t : j.at("turns")) {
    d.turns.push_back({speaker_from_string(t.at("speaker").get<std::string>()), t.at("text").get<std::string>()});
  }
  if (j.contains("states") && !j["states"].is_null()) {
    std::vector<DialogState> states;
    for (const auto& s : j["states"]) {
      DialogState state;
      for (const auto& sv : s) {
        state.push_back({sv.at("domain").get<std::string>(), sv.at("slot").get<std::string>(),
                         sv.at("value").get<std::string>()});
      }
      states.push_back(std::move(state));
    }
    d.states = std::move(states);
  }
  return d;
}

json to_json(const ThreadComment& c) {
  json j{{"id", c.id}, {"body", c.body}, {"subreddit", c.subreddit}, {"created_utc", c.created_utc}};
  if (c.parent_id) j["parent_id"] = *c.parent_id;
  return j;
}

ThreadComment comment_from_json(const json& j) {
  ThreadComment c;
  c.id = j.at("id").get<std::string>();
  if (j.contains("parent_id") && !j["parent_id"].is_null()) c.parent_id = j["parent_id"].get<std::string>();
  c.body = j.at("body").get<std::string>();
  c.subreddit = j.at("subreddit").get<std::string>();
  c.created_utc = j.at("created_utc").get<std::int64_t>();
  return c;
}

json to_json(const DialogTriple& t) {
  json j{{"context", t.context},
         {"response", t.response},
         {"false_response", t.false_response},
         {"domain", t.domain},
         {"subreddit", t.subreddit}};
  if (!t.thread_id.empty()) j["thread_id"] = t.thread_id;
  return j;
}

DialogTriple triple_from_json(const json& j) {
  DialogTriple t;
  t.context = j.at("context").get<std::string>();
  t.response = j.at("response").get<std::string>();
  t.false_response = j.at("false_response").get<std::string>();
  t.domain = j.at("domain").get<std::string>();
  t.subreddit = j.at("subreddit").get<std::string>();
  if (j.contains("thread_id")) t.thread_id = j["thread_id"].get<std::string>();
  return t;
}

json to_json(const CorpusLine& l) { return {{"text", l.text}, {"matched_terms", l.matched_terms}}; }

CorpusLine corpus_line_from_json(const json& j) {
  return {j.at("text").get<std::string>(), j.at("matched_terms").get<std::vector<std::string>>()};
}

// -- files -----------------------------------------------------------------------

void for_each_jsonl(const std::filesystem::path& path, const std::function<void(const json&, std::size_t)>& fn) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(path.string(), lineno, std::string("malformed JSON: ") + e.what());
    }
    try {
      fn(j, lineno);
    } catch (const json::exception& e) {
      throw ParseError(path.string(), lineno, std::string("schema violation: ") + e.what());
    } catch (const ValidationError& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
  }
}

namespace {

template <typename T, typename ToJson>
void write_jsonl(const std::filesystem::path& path, const std::vector<T>& items, ToJson&& to) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& item : items) out << to(item).dump() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

std::vector<Dialog> load_dialogs(const std::filesystem::path& path, const Ontology* ontology) {
  std::vector<Dialog> out;
  for_each_jsonl(path, [&](const json& j, std::size_t) {
    auto d = dialog_from_json(j);
    validate(d, ontology);
    out.push_back(std::move(d));
  });
  return out;
}

void save_dialogs(const std::filesystem::path& path, const std::vector<Dialog>& dialogs) {
  write_jsonl(path, dialogs, [](const Dialog& d) { return to_json(d); });
}

std::vector<Dialog> filter_single_domain(const std::vector<Dialog>& dialogs, const std::string& domain) {
  std::vector<Dialog> out;
  for (const auto& d : dialogs) {
    if (d.domains.size() == 1 && *d.domains.begin() == domain) out.push_back(d);
  }
  return out;
}

std::vector<Dialog> filter_domain(const std::vector<Dialog>& dialogs, const std::string& domain) {
  std::vector<Dialog> out;
  for (const auto& d : dialogs) {
    if (d.domains.count(domain)) out.push_back(d);
  }
  return out;
}

std::vector<ThreadComment> load_comments(const std::filesystem::path& path) {
  std::vector<ThreadComment> out;
  for_each_jsonl(path, [&](const json& j, std::size_t) { out.push_back(comment_from_json(j)); });
  return out;
}

ThreadDump group_threads(std::vector<ThreadComment> comments) {
  std::sort(comments.begin(), comments.end(), [](const ThreadComment& a, const ThreadComment& b) {
    return std::tie(a.created_utc, a.id) < std::tie(b.created_utc, b.id);
  });
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < comments.size(); ++i) {
    if (!by_id.emplace(comments[i].id, i).second) throw ValidationError("duplicate comment id '" + comments[i].id + "'");
  }

  ThreadDump dump;
  const std::size_t n = comments.size();
  std::vector<std::optional<std::size_t>> parent(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& pid = comments[i].parent_id;
    if (!pid) continue;
    auto it = by_id.find(*pid);
    if (it == by_id.end() || it->second == i) {
      ++dump.orphans_promoted;
    } else {
      parent[i] = it->second;
    }
  }

  std::vector<std::vector<std::size_t>> kids(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (parent[i]) kids[*parent[i]].push_back(i);
  }

  // Mark everything reachable from a root; what remains hangs off a cycle.
  std::vector<std::size_t> root_of(n, n);
  auto claim = [&](std::size_t root) {
    std::vector<std::size_t> stack{root};
    while (!stack.empty()) {
      auto node = stack.back();
      stack.pop_back();
      if (root_of[node] != n) continue;
      root_of[node] = root;
      for (auto c : kids[node]) stack.push_back(c);
    }
  };
  for (std::size_t i = 0; i < n; ++i) {
    if (!parent[i]) claim(i);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (root_of[i] != n) continue;
    // Promote the earliest unclaimed comment; its former parent link is cut.
    auto& siblings = kids[*parent[i]];
    siblings.erase(std::remove(siblings.begin(), siblings.end(), i), siblings.end());
    parent[i].reset();
    ++dump.cycles_broken;
    claim(i);
  }

  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < n; ++i) members[comments[root_of[i]].id].push_back(i);

  for (auto& [root_id, idx] : members) {
    Thread t;
    t.id = root_id;
    auto root = by_id.at(root_id);
    std::stable_partition(idx.begin(), idx.end(), [&](std::size_t i) { return i == root; });
    std::unordered_map<std::size_t, std::size_t> local;
    for (std::size_t k = 0; k < idx.size(); ++k) local[idx[k]] = k;
    t.comments.reserve(idx.size());
    t.parent.resize(idx.size());
    t.children.resize(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      t.comments.push_back(comments[idx[k]]);
      if (parent[idx[k]]) {
        auto p = local.at(*parent[idx[k]]);
        t.parent[k] = p;
        t.children[p].push_back(k);
      }
    }
    for (auto& c : t.children) std::sort(c.begin(), c.end());
    dump.threads.push_back(std::move(t));
  }
  return dump;
}

ThreadDump load_thread_dump(const std::filesystem::path& path) { return group_threads(load_comments(path)); }

void save_comments(const std::filesystem::path& path, const std::vector<ThreadComment>& comments) {
  write_jsonl(path, comments, [](const ThreadComment& c) { return to_json(c); });
}

std::vector<DialogTriple> load_triples(const std::filesystem::path& path) {
  std::vector<DialogTriple> out;
  for_each_jsonl(path, [&](const json& j, std::size_t) {
    auto t = triple_from_json(j);
    validate(t);
    out.push_back(std::move(t));
  });
  return out;
}

void save_triples(const std::filesystem::path& path, const std::vector<DialogTriple>& triples) {
  for (const auto& t : triples) validate(t);
  write_jsonl(path, triples, [](const DialogTriple& t) { return to_json(t); });
}

std::vector<CorpusLine> load_corpus(const std::filesystem::path& path) {
  std::vector<CorpusLine> out;
  for_each_jsonl(path, [&](const json& j, std::size_t) {
    auto l = corpus_line_from_json(j);
    validate(l);
    out.push_back(std::move(l));
  });
  return out;
}

void save_corpus(const std::filesystem::path& path, const std::vector<CorpusLine>& lines) {
  for (const auto& l : lines) validate(l);
  write_jsonl(path, lines, [](const CorpusLine& l) { return to_json(l); });
}

}  // namespace dstod
