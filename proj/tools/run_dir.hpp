#pragma once

// Run directories, provenance records and JSON config files for the CLI.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

namespace dstod::cli {

/// CLI11 config reader for JSON files. Top-level keys are long option names
/// of the subcommand being run; nested objects address subcommands
/// explicitly ({"finetune": {"lr": 1e-4}}) and are taken as is.
class JsonConfig : public CLI::Config {
 public:
  explicit JsonConfig(const CLI::App* root = nullptr) : root_(root) {}
  std::string to_config(const CLI::App* app, bool default_also, bool write_description,
                        std::string prefix) const override;
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override;

 private:
  const CLI::App* root_;
};

/// Resolves an input path: as given if it exists, else below DSTOD_DATA_ROOT.
/// Throws IoError when neither exists.
std::filesystem::path resolve_input(const std::string& path);

/// Default parent of run directories: $DSTOD_DATA_ROOT/runs, or ./runs.
std::filesystem::path default_run_root();

/// <root>/<command>-<first 16 hex of the config digest>, held under a lock
/// file for the lifetime of the object.
class RunDir {
 public:
  /// The digest covers the command, the config and the input digests.
  RunDir(const std::filesystem::path& root, const std::string& command, const nlohmann::json& config,
         const std::map<std::string, std::filesystem::path>& inputs);
  ~RunDir();
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
  const std::string& digest() const { return digest_; }
  /// A previous run with the same config finished here.
  bool complete() const;

  /// Writes provenance.json: command, config, digest, seed, input and output
  /// digests, versions. Everything but provenance.json counts as output.
  void finish();

 private:
  std::filesystem::path path_;
  std::filesystem::path lock_;
  std::string command_;
  nlohmann::json config_;
  std::string digest_;
  std::map<std::string, std::string> inputs_;
};

/// Digest of a regular file, or of every file below a directory.
std::string digest_path(const std::filesystem::path& p);

}  // namespace dstod::cli
