#include "dstod/neural/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "dstod/error.hpp"

namespace dstod::nn {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

nlohmann::json CheckpointManifest::to_json() const {
  nlohmann::json ts = nlohmann::json::array();
  for (const auto& t : tensors) {
    ts.push_back({{"group", t.group}, {"name", t.name}, {"shape", t.shape}, {"frozen", t.frozen}, {"file", t.file}});
  }
  return {{"format", 1}, {"kind", kind}, {"dtype", dtype}, {"meta", meta}, {"tensors", ts}};
}

CheckpointManifest CheckpointManifest::from_json(const nlohmann::json& j) {
  CheckpointManifest m;
  m.kind = j.at("kind").get<std::string>();
  m.dtype = j.at("dtype").get<std::string>();
  if (m.dtype != "float32" && m.dtype != "float64") throw ValidationError("checkpoint: unknown dtype " + m.dtype);
  m.meta = j.value("meta", nlohmann::json::object());
  for (const auto& t : j.at("tensors")) {
    m.tensors.push_back(TensorEntry{t.at("group").get<std::string>(), t.at("name").get<std::string>(),
                                    t.at("shape").get<std::vector<long long>>(), t.value("frozen", false),
                                    t.at("file").get<std::string>()});
    if (m.tensors.back().shape.size() != 2) throw ValidationError("checkpoint: tensors must be 2-D");
  }
  return m;
}

std::vector<std::string> CheckpointManifest::groups() const {
  std::vector<std::string> out;
  for (const auto& t : tensors) {
    if (out.empty() || out.back() != t.group) {
      bool seen = false;
      for (const auto& g : out) seen = seen || g == t.group;
      if (!seen) out.push_back(t.group);
    }
  }
  return out;
}

template <typename T>
void save_checkpoint(const fs::path& dir, const std::string& kind, const nlohmann::json& meta,
                     const std::vector<StoreGroup<T>>& groups) {
  fs::create_directories(dir / "tensors");
  CheckpointManifest m;
  m.kind = kind;
  m.dtype = sizeof(T) == 4 ? "float32" : "float64";
  m.meta = meta;
  std::set<std::string> group_names;
  for (const auto& [group, store] : groups) {
    if (!group_names.insert(group).second) throw Error("checkpoint: duplicate group " + group);
    for (const auto& p : *store) {
      for (Eigen::Index i = 0; i < p.value.size(); ++i) {
        if (!std::isfinite(static_cast<double>(p.value.data()[i]))) {
          throw ValidationError("checkpoint: non-finite value in " + p.name);
        }
      }
      TensorEntry e{group, p.name, {p.value.rows(), p.value.cols()}, p.frozen,
                    "tensors/" + group + "." + p.name + ".bin"};
      std::ofstream out(dir / e.file, std::ios::binary);
      if (!out) throw IoError("cannot write " + (dir / e.file).string());
      out.write(reinterpret_cast<const char*>(p.value.data()),
                static_cast<std::streamsize>(sizeof(T) * static_cast<std::size_t>(p.value.size())));
      if (!out) throw IoError("short write to " + (dir / e.file).string());
      m.tensors.push_back(std::move(e));
    }
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << m.to_json().dump(2) << '\n';
}

CheckpointManifest read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("not a checkpoint directory (no manifest.json): " + dir.string());
  try {
    return CheckpointManifest::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError((dir / "manifest.json").string(), 0, e.what());
  }
}

namespace {

template <typename S, typename T>
void read_into(const fs::path& file, Matrix<T>& value) {
  std::ifstream in(file, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + file.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  const std::size_t n = static_cast<std::size_t>(value.size());
  if (bytes != n * sizeof(S)) throw ValidationError("checkpoint: size mismatch in " + file.string());
  in.seekg(0);
  std::vector<S> buf(n);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  for (std::size_t i = 0; i < n; ++i) value.data()[i] = static_cast<T>(buf[i]);
}

}  // namespace

template <typename T>
ParameterStore<T> load_group(const fs::path& dir, const CheckpointManifest& m, const std::string& group) {
  ParameterStore<T> store;
  bool any = false;
  for (const auto& t : m.tensors) {
    if (t.group != group) continue;
    any = true;
    auto i = store.add(t.name, t.shape[0], t.shape[1]);
    store[i].frozen = t.frozen;
    if (m.dtype == "float32") {
      read_into<float>(dir / t.file, store[i].value);
    } else {
      read_into<double>(dir / t.file, store[i].value);
    }
  }
  if (!any) throw ValidationError("checkpoint has no group '" + group + "'");
  return store;
}

template <typename T>
std::size_t copy_matching(ParameterStore<T>& dst, const ParameterStore<T>& src) {
  std::size_t n = 0;
  for (const auto& p : src) {
    auto* d = dst.find(p.name);
    if (d == nullptr) continue;
    if (d->value.rows() != p.value.rows() || d->value.cols() != p.value.cols()) {
      throw ValidationError("shape mismatch for '" + p.name + "'");
    }
    d->value = p.value;
    ++n;
  }
  return n;
}

std::string adapter_tensor_name(const std::string& bank, int layer, const std::string& part) {
  return "adapter." + bank + ".layer." + std::to_string(layer) + "." + part;
}

std::string fusion_tensor_name(int layer) { return "fusion.layer." + std::to_string(layer) + ".logits"; }

nlohmann::json adapter_setup_to_json(const AdapterSetup& s) {
  nlohmann::json banks = nlohmann::json::array();
  for (const auto& b : s.banks) banks.push_back({{"name", b.name}, {"config", b.config.to_json()}});
  std::vector<std::string> active;
  for (auto i : s.active) active.push_back(s.banks[i].name);
  return {{"compose", to_string(s.compose)}, {"banks", banks}, {"active", active}};
}

template <typename T>
AdapterSetup adapter_setup_from_json(const nlohmann::json& j, const ParameterStore<T>& store, int layers) {
  AdapterSetup s;
  s.compose = parse_compose(j.value("compose", std::string("none")));
  for (const auto& b : j.value("banks", nlohmann::json::array())) {
    AdapterBankRefs refs;
    refs.name = b.at("name").get<std::string>();
    refs.config = AdapterConfig::from_json(b.at("config"));
    for (int l = 0; l < layers; ++l) {
      AdapterRefs r;
      r.down_w = store.index_of(adapter_tensor_name(refs.name, l, "down.weight"));
      r.up_w = store.index_of(adapter_tensor_name(refs.name, l, "up.weight"));
      if (refs.config.bias) {
        r.down_b = store.index_of(adapter_tensor_name(refs.name, l, "down.bias"));
        r.up_b = store.index_of(adapter_tensor_name(refs.name, l, "up.bias"));
      }
      refs.layers.push_back(r);
    }
    s.banks.push_back(std::move(refs));
  }
  for (const auto& name : j.value("active", std::vector<std::string>{})) {
    bool found = false;
    for (std::size_t i = 0; i < s.banks.size(); ++i) {
      if (s.banks[i].name == name) {
        s.active.push_back(i);
        found = true;
      }
    }
    if (!found) throw ValidationError("adapter setup: unknown active bank " + name);
  }
  if (s.compose == Compose::fuse) {
    for (int l = 0; l < layers; ++l) s.fusion.push_back(store.index_of(fusion_tensor_name(l)));
  }
  return s;
}

template <typename T>
nlohmann::json encoder_meta(const Encoder<T>& enc) {
  return {{"encoder", enc.config().to_json()}, {"adapters", adapter_setup_to_json(enc.adapters())}};
}

template <typename T>
Encoder<T> restore_encoder(const nlohmann::json& meta, ParameterStore<T> store) {
  auto config = EncoderConfig::from_json(meta.at("encoder"));
  Encoder<T> enc(config, 0);
  for (const auto& p : enc.params()) {
    const auto* q = store.find(p.name);
    if (q == nullptr) throw ValidationError("checkpoint is missing tensor '" + p.name + "'");
    if (q->value.rows() != p.value.rows() || q->value.cols() != p.value.cols()) {
      throw ValidationError("checkpoint shape mismatch for '" + p.name + "'");
    }
  }
  enc.params() = std::move(store);
  enc.rebuild_index();
  enc.adapters() = adapter_setup_from_json(meta.value("adapters", nlohmann::json::object()), enc.params(),
                                           config.layers);
  return enc;
}

#define DSTOD_INSTANTIATE(T)                                                                               \
  template void save_checkpoint<T>(const fs::path&, const std::string&, const nlohmann::json&,            \
                                   const std::vector<StoreGroup<T>>&);                                     \
  template ParameterStore<T> load_group<T>(const fs::path&, const CheckpointManifest&, const std::string&); \
  template std::size_t copy_matching<T>(ParameterStore<T>&, const ParameterStore<T>&);                     \
  template AdapterSetup adapter_setup_from_json<T>(const nlohmann::json&, const ParameterStore<T>&, int);  \
  template nlohmann::json encoder_meta<T>(const Encoder<T>&);                                              \
  template Encoder<T> restore_encoder<T>(const nlohmann::json&, ParameterStore<T>);
DSTOD_INSTANTIATE(float)
DSTOD_INSTANTIATE(double)
#undef DSTOD_INSTANTIATE

}  // namespace dstod::nn
