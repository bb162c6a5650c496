#include "run_dir.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>

#include "dstod/digest.hpp"
#include "dstod/error.hpp"

namespace dstod::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void flatten(const json& j, std::vector<std::string>& parents, std::vector<CLI::ConfigItem>& out) {
  for (const auto& [key, value] : j.items()) {
    if (value.is_object()) {
      parents.push_back(key);
      flatten(value, parents, out);
      parents.pop_back();
      continue;
    }
    CLI::ConfigItem item;
    item.parents = parents;
    item.name = key;
    auto scalar = [](const json& v) {
      if (v.is_string()) return v.get<std::string>();
      if (v.is_boolean()) return std::string(v.get<bool>() ? "true" : "false");
      return v.dump();
    };
    if (value.is_array()) {
      for (const auto& v : value) item.inputs.push_back(scalar(v));
    } else if (!value.is_null()) {
      item.inputs.push_back(scalar(value));
    }
    out.push_back(std::move(item));
  }
}

}  // namespace

std::string JsonConfig::to_config(const CLI::App* app, bool default_also, bool, std::string) const {
  json j = json::object();
  for (const auto* opt : app->get_options()) {
    if (opt->get_lnames().empty() || !opt->get_configurable()) continue;
    const auto& name = opt->get_lnames().front();
    if (opt->count() > 0) {
      const auto& res = opt->results();
      j[name] = res.size() == 1 ? json(res.front()) : json(res);
    } else if (default_also && !opt->get_default_str().empty()) {
      j[name] = opt->get_default_str();
    }
  }
  return j.dump(2);
}

std::vector<CLI::ConfigItem> JsonConfig::from_config(std::istream& input) const {
  json j;
  try {
    j = json::parse(input);
  } catch (const json::exception& e) {
    throw CLI::ConversionError(std::string("config file: ") + e.what());
  }
  if (!j.is_object()) throw CLI::ConversionError("config file: top level must be an object");
  std::vector<CLI::ConfigItem> out;
  std::vector<std::string> parents;
  flatten(j, parents, out);
  std::vector<std::string> active;
  for (const CLI::App* app = root_; app;) {
    const auto subs = app->get_subcommands();
    app = subs.empty() ? nullptr : subs.front();
    if (app) active.push_back(app->get_name());
  }
  for (auto& item : out)
    if (item.parents.empty()) item.parents = active;
  return out;
}

fs::path resolve_input(const std::string& path) {
  const fs::path p(path);
  if (fs::exists(p)) return p;
  if (const char* root = std::getenv("DSTOD_DATA_ROOT"); root && *root && p.is_relative()) {
    const auto q = fs::path(root) / p;
    if (fs::exists(q)) return q;
  }
  throw IoError("input not found: " + path);
}

fs::path default_run_root() {
  if (const char* root = std::getenv("DSTOD_DATA_ROOT"); root && *root) return fs::path(root) / "runs";
  return "runs";
}

std::string digest_path(const fs::path& p) {
  return fs::is_directory(p) ? sha256_tree(p) : sha256_file(p);
}

RunDir::RunDir(const fs::path& root, const std::string& command, const json& config,
               const std::map<std::string, fs::path>& inputs)
    : command_(command), config_(config) {
  for (const auto& [role, p] : inputs) inputs_[role] = digest_path(p);
  digest_ = sha256_hex(json{{"command", command}, {"config", config}, {"inputs", inputs_}}.dump());
  path_ = root / (command + "-" + digest_.substr(0, 16));
  fs::create_directories(path_);
  lock_ = path_ / ".lock";
  // "x": exclusive create, fails if the lock already exists
  std::FILE* f = std::fopen(lock_.c_str(), "wx");
  if (!f) {
    const int err = errno;
    lock_.clear();
    if (err == EEXIST) throw IoError("run directory is locked by another process: " + path_.string());
    throw IoError("cannot create lock in " + path_.string() + ": " + std::strerror(err));
  }
  std::fclose(f);
}

RunDir::~RunDir() {
  if (!lock_.empty()) {
    std::error_code ec;
    fs::remove(lock_, ec);
  }
}

bool RunDir::complete() const { return fs::exists(path_ / "provenance.json"); }

void RunDir::finish() {
  json outputs = json::object();
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path_))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const auto rel = fs::relative(f, path_).generic_string();
    if (rel == "provenance.json" || rel == ".lock") continue;
    outputs[rel] = sha256_file(f);
  }
  json prov = {{"command", command_},
               {"config", config_},
               {"config_digest", digest_},
               {"seed", config_.value("seed", json())},
               {"inputs", inputs_},
               {"outputs", outputs},
               {"versions",
                {{"dstod", DSTOD_VERSION},
                 {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                               std::to_string(EIGEN_MINOR_VERSION)},
                 {"compiler", __VERSION__}}}};
  std::ofstream out(path_ / "provenance.json");
  out << prov.dump(2) << '\n';
  if (!out) throw IoError("cannot write provenance in " + path_.string());
}

}  // namespace dstod::cli
