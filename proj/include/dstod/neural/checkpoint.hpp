#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dstod/neural/encoder.hpp"
#include "dstod/neural/tensor.hpp"
#include "json.hpp"

namespace dstod::nn {

struct TensorEntry {
  std::string group;
  std::string name;
  std::vector<long long> shape;
  bool frozen = false;
  std::string file;  // relative to the checkpoint directory
};

/// manifest.json of a checkpoint directory. Tensors are raw little-endian
/// IEEE-754 files in row-major order.
struct CheckpointManifest {
  std::string kind;   // "encoder", "adapter-bank", "model"
  std::string dtype;  // "float32" or "float64"
  nlohmann::json meta = nlohmann::json::object();
  std::vector<TensorEntry> tensors;

  nlohmann::json to_json() const;
  static CheckpointManifest from_json(const nlohmann::json& j);
  std::vector<std::string> groups() const;
};

template <typename T>
using StoreGroup = std::pair<std::string, const ParameterStore<T>*>;

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const std::string& kind, const nlohmann::json& meta,
                     const std::vector<StoreGroup<T>>& groups);

CheckpointManifest read_manifest(const std::filesystem::path& dir);

/// Loads one group in manifest order, converting from the stored dtype.
template <typename T>
ParameterStore<T> load_group(const std::filesystem::path& dir, const CheckpointManifest& manifest,
                             const std::string& group);

/// Copies values (not freeze flags) of every same-named tensor from `src`;
/// shapes must agree. Returns the number of tensors copied.
template <typename T>
std::size_t copy_matching(ParameterStore<T>& dst, const ParameterStore<T>& src);

nlohmann::json adapter_setup_to_json(const AdapterSetup& setup);

/// Names of adapter tensors inside the host store.
std::string adapter_tensor_name(const std::string& bank, int layer, const std::string& part);
std::string fusion_tensor_name(int layer);

/// Resolves bank/fusion tensor indices by name.
template <typename T>
AdapterSetup adapter_setup_from_json(const nlohmann::json& j, const ParameterStore<T>& store, int layers);

template <typename T>
nlohmann::json encoder_meta(const Encoder<T>& enc);

/// Rebuilds an encoder from its manifest meta and stored tensors.
template <typename T>
Encoder<T> restore_encoder(const nlohmann::json& meta, ParameterStore<T> store);

}  // namespace dstod::nn
