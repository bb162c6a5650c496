#include <fstream>
#include <map>
#include <set>
#include <unordered_set>

#include "dstod/dialog_data.hpp"
#include "dstod/error.hpp"
#include "dstod/text.hpp"

namespace dstod {

namespace {

const std::vector<std::string> kMultiWozDomains = {"attraction", "hospital", "hotel", "police",
                                                   "restaurant", "taxi",     "train"};

std::unordered_set<std::string> read_id_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::unordered_set<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    auto id = trim(line);
    if (!id.empty()) ids.insert(id);
  }
  return ids;
}

bool is_empty_value(const std::string& v) { return v.empty() || v == "not mentioned" || v == "none"; }

DialogState state_from_metadata(const json& metadata) {
  DialogState state;
  if (!metadata.is_object()) return state;
  for (const auto& [domain, parts] : metadata.items()) {
    for (const char* part : {"semi", "book"}) {
      if (!parts.contains(part)) continue;
      for (const auto& [slot, value] : parts[part].items()) {
        if (slot == "booked" || !value.is_string()) continue;
        auto v = to_lower(trim(value.get<std::string>()));
        if (is_empty_value(v)) continue;
        state.push_back({domain, slot, v});
      }
    }
  }
  return state;
}

}  // namespace

MultiWozSplits convert_multiwoz(const std::filesystem::path& data_json, const std::filesystem::path& val_list,
                                const std::filesystem::path& test_list) {
  std::ifstream in(data_json);
  if (!in) throw IoError("cannot open " + data_json.string());
  json data;
  try {
    data = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(data_json.string() + ": " + e.what());
  }
  const auto val_ids = read_id_list(val_list);
  const auto test_ids = read_id_list(test_list);

  MultiWozSplits out;
  std::map<Ontology::Key, std::set<std::string>> values;

  for (const auto& [id, raw] : data.items()) {
    Dialog d;
    d.id = id;
    const auto& goal = raw.at("goal");
    for (const auto& dom : kMultiWozDomains) {
      if (goal.contains(dom) && goal[dom].is_object() && !goal[dom].empty()) d.domains.insert(dom);
    }
    const auto& log = raw.at("log");
    std::vector<DialogState> states;
    DialogState last;
    for (std::size_t i = 0; i < log.size(); ++i) {
      auto text = trim(log[i].at("text").get<std::string>());
      if (text.empty()) text = "-";
      d.turns.push_back({i % 2 == 0 ? Speaker::user : Speaker::system, text});
      // User turns take the belief state annotated on the following system turn.
      const json* meta = nullptr;
      if (i % 2 == 1) {
        meta = &log[i].at("metadata");
      } else if (i + 1 < log.size()) {
        meta = &log[i + 1].at("metadata");
      }
      if (meta != nullptr) last = state_from_metadata(*meta);
      for (const auto& sv : last) values[{sv.domain, sv.slot}].insert(sv.value);
      states.push_back(last);
    }
    d.states = std::move(states);
    if (d.turns.empty()) continue;
    if (test_ids.count(id)) {
      out.test.push_back(std::move(d));
    } else if (val_ids.count(id)) {
      out.dev.push_back(std::move(d));
    } else {
      out.train.push_back(std::move(d));
    }
  }
  for (auto& [key, vals] : values) out.ontology.add_slot(key.first, key.second, {vals.begin(), vals.end()});
  return out;
}

}  // namespace dstod
