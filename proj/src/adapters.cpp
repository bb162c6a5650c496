#include "dstod/adapters.hpp"

#include <iostream>
#include <random>

#include "dstod/error.hpp"
#include "dstod/rng.hpp"

namespace dstod {

using nn::Matrix;

Eigen::VectorXd adapter_forward(const AdapterParams& p, const Eigen::VectorXd& h, const Eigen::VectorXd& r) {
  const auto m = p.down.rows();
  const auto hid = p.down.cols();
  if (h.size() != hid || r.size() != hid || p.up.rows() != hid || p.up.cols() != m) {
    throw Error("adapter_forward: dimension mismatch");
  }
  if ((p.down_bias.size() != 0 && p.down_bias.size() != m) || (p.up_bias.size() != 0 && p.up_bias.size() != hid)) {
    throw Error("adapter_forward: bias dimension mismatch");
  }
  Eigen::VectorXd z = p.down * h;
  if (p.down_bias.size() != 0) z += p.down_bias;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    z(i) = p.activation == Activation::relu ? std::max(0.0, z(i)) : nn::gelu(z(i));
  }
  Eigen::VectorXd out = p.up * z + r;
  if (p.up_bias.size() != 0) out += p.up_bias;
  return out;
}

bool is_adapter_tensor(const std::string& name) { return name.rfind("adapter.", 0) == 0; }
bool is_fusion_tensor(const std::string& name) { return name.rfind("fusion.", 0) == 0; }

namespace {

std::string local_name(int layer, const std::string& part) { return "layer." + std::to_string(layer) + "." + part; }

std::vector<std::string> parts(bool bias) {
  if (bias) return {"down.weight", "down.bias", "up.weight", "up.bias"};
  return {"down.weight", "up.weight"};
}

}  // namespace

template <typename T>
AdapterParams AdapterBank<T>::layer_params(int layer) const {
  AdapterParams p;
  p.activation = config.activation;
  p.down = params.at(local_name(layer, "down.weight")).value.transpose().template cast<double>();
  p.up = params.at(local_name(layer, "up.weight")).value.transpose().template cast<double>();
  if (config.bias) {
    p.down_bias = params.at(local_name(layer, "down.bias")).value.row(0).transpose().template cast<double>();
    p.up_bias = params.at(local_name(layer, "up.bias")).value.row(0).transpose().template cast<double>();
  }
  return p;
}

std::size_t adapter_parameter_count(const nn::EncoderConfig& host, const AdapterConfig& c) {
  const std::size_t h = static_cast<std::size_t>(host.hidden), m = static_cast<std::size_t>(c.bottleneck);
  return static_cast<std::size_t>(host.layers) * (2 * m * h + (c.bias ? m + h : 0));
}

template <typename T>
AdapterBank<T> init_adapters(const nn::EncoderConfig& host, const AdapterConfig& config, const std::string& domain,
                             std::uint64_t seed) {
  config.validate(host.hidden);
  if (domain.empty() || domain.find('.') != std::string::npos) {
    throw ValidationError("adapter bank name must be non-empty and contain no '.'");
  }
  AdapterBank<T> bank;
  bank.domain = domain;
  bank.config = config;
  bank.layers = host.layers;
  bank.hidden = host.hidden;
  Rng rng(mix_seed(seed, 0x61646170746572ULL));
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(host.hidden)));
  const int m = config.bottleneck, h = host.hidden;
  for (int l = 0; l < host.layers; ++l) {
    auto d = bank.params.add(local_name(l, "down.weight"), h, m);
    for (Eigen::Index i = 0; i < bank.params[d].value.size(); ++i) {
      bank.params[d].value.data()[i] = static_cast<T>(dist(rng));
    }
    if (config.bias) bank.params.add(local_name(l, "down.bias"), 1, m);
    bank.params.add(local_name(l, "up.weight"), m, h);
    if (config.bias) bank.params.add(local_name(l, "up.bias"), 1, h);
  }
  return bank;
}

template <typename T>
nn::Encoder<T> inject(const nn::Encoder<T>& base, const std::vector<AdapterBank<T>>& banks, Compose compose,
                      const std::optional<FusionWeights>& fusion) {
  if (banks.empty()) throw ValidationError("inject: no adapter banks given");
  if (compose == Compose::none) throw ValidationError("inject: composition 'none' takes no banks");
  if (compose == Compose::single && banks.size() != 1) {
    throw ValidationError("inject: single composition takes exactly one bank");
  }
  if (compose == Compose::fuse && banks.size() == 1) {
    std::cerr << "warning: fuse over one adapter bank degenerates to single\n";
    compose = Compose::single;
  }
  const auto& cfg = base.config();
  nn::Encoder<T> model = base;
  auto& store = model.params();
  auto& setup = model.adapters();
  setup.active.clear();
  setup.fusion.clear();
  for (const auto& bank : banks) {
    if (bank.layers != cfg.layers || bank.hidden != cfg.hidden) {
      throw ValidationError("inject: bank '" + bank.domain + "' does not match the host encoder config");
    }
    bank.config.validate(cfg.hidden);
    for (const auto& b : setup.banks) {
      if (b.name == bank.domain) throw ValidationError("inject: bank '" + bank.domain + "' already present");
    }
    nn::AdapterBankRefs refs;
    refs.name = bank.domain;
    refs.config = bank.config;
    for (int l = 0; l < cfg.layers; ++l) {
      nn::AdapterRefs r;
      for (const auto& part : parts(bank.config.bias)) {
        const auto& src = bank.params.at(local_name(l, part));
        auto i = store.add(nn::adapter_tensor_name(bank.domain, l, part), src.value.rows(), src.value.cols());
        store[i].value = src.value;
        if (part == "down.weight") r.down_w = i;
        if (part == "down.bias") r.down_b = i;
        if (part == "up.weight") r.up_w = i;
        if (part == "up.bias") r.up_b = i;
      }
      refs.layers.push_back(r);
    }
    setup.active.push_back(setup.banks.size());
    setup.banks.push_back(std::move(refs));
  }
  setup.compose = compose;
  if (compose == Compose::fuse) {
    if (fusion && static_cast<int>(fusion->size()) != cfg.layers) {
      throw ValidationError("inject: fusion weights need one vector per layer");
    }
    for (int l = 0; l < cfg.layers; ++l) {
      auto i = store.add(nn::fusion_tensor_name(l), 1, static_cast<Eigen::Index>(banks.size()));
      if (fusion) {
        const auto& w = (*fusion)[static_cast<std::size_t>(l)];
        if (w.size() != banks.size()) throw ValidationError("inject: fusion weights sized differently from banks");
        for (std::size_t j = 0; j < w.size(); ++j) store[i].value(0, static_cast<Eigen::Index>(j)) = static_cast<T>(w[j]);
      }
      setup.fusion.push_back(i);
    }
  }
  return model;
}

template <typename T>
void freeze_base(nn::Encoder<T>& model, bool train_adapters, bool train_fusion) {
  for (auto& p : model.params()) {
    if (is_adapter_tensor(p.name)) {
      p.frozen = !train_adapters;
    } else if (is_fusion_tensor(p.name)) {
      p.frozen = !train_fusion;
    } else {
      p.frozen = true;
    }
  }
}

template <typename T>
void set_adapters_trainable(nn::Encoder<T>& model, bool trainable) {
  for (auto& p : model.params()) {
    if (is_adapter_tensor(p.name)) p.frozen = !trainable;
  }
}

template <typename T>
AdapterBank<T> extract_bank(const nn::Encoder<T>& model, const std::string& domain) {
  const nn::AdapterBankRefs* refs = nullptr;
  for (const auto& b : model.adapters().banks) {
    if (b.name == domain) refs = &b;
  }
  if (refs == nullptr) throw ValidationError("extract_bank: no bank named '" + domain + "'");
  AdapterBank<T> bank;
  bank.domain = domain;
  bank.config = refs->config;
  bank.layers = model.config().layers;
  bank.hidden = model.config().hidden;
  for (int l = 0; l < bank.layers; ++l) {
    for (const auto& part : parts(refs->config.bias)) {
      const auto& src = model.params().at(nn::adapter_tensor_name(domain, l, part));
      auto i = bank.params.add(local_name(l, part), src.value.rows(), src.value.cols());
      bank.params[i].value = src.value;
    }
  }
  return bank;
}

template <typename T>
void save_bank(const std::filesystem::path& dir, const AdapterBank<T>& bank, const nn::EncoderConfig& host) {
  nlohmann::json meta = {{"domain", bank.domain},
                         {"adapter", bank.config.to_json()},
                         {"layers", bank.layers},
                         {"hidden", bank.hidden},
                         {"encoder", host.to_json()},
                         {"provenance", bank.provenance}};
  nn::save_checkpoint<T>(dir, "adapter-bank", meta, {{"adapter", &bank.params}});
}

template <typename T>
AdapterBank<T> load_bank(const std::filesystem::path& dir) {
  auto m = nn::read_manifest(dir);
  if (m.kind != "adapter-bank") throw ValidationError(dir.string() + " is not an adapter bank (kind " + m.kind + ")");
  AdapterBank<T> bank;
  bank.domain = m.meta.at("domain").get<std::string>();
  bank.config = AdapterConfig::from_json(m.meta.at("adapter"));
  bank.layers = m.meta.at("layers").get<int>();
  bank.hidden = m.meta.at("hidden").get<int>();
  bank.provenance = m.meta.value("provenance", nlohmann::json::object());
  bank.params = nn::load_group<T>(dir, m, "adapter");
  for (auto& p : bank.params) p.frozen = false;
  return bank;
}

#define DSTOD_INSTANTIATE(T)                                                                                 \
  template struct AdapterBank<T>;                                                                            \
  template AdapterBank<T> init_adapters<T>(const nn::EncoderConfig&, const AdapterConfig&, const std::string&, \
                                           std::uint64_t);                                                   \
  template nn::Encoder<T> inject<T>(const nn::Encoder<T>&, const std::vector<AdapterBank<T>>&, Compose,      \
                                    const std::optional<FusionWeights>&);                                    \
  template void freeze_base<T>(nn::Encoder<T>&, bool, bool);                                                 \
  template void set_adapters_trainable<T>(nn::Encoder<T>&, bool);                                            \
  template AdapterBank<T> extract_bank<T>(const nn::Encoder<T>&, const std::string&);                        \
  template void save_bank<T>(const std::filesystem::path&, const AdapterBank<T>&, const nn::EncoderConfig&); \
  template AdapterBank<T> load_bank<T>(const std::filesystem::path&);
DSTOD_INSTANTIATE(float)
DSTOD_INSTANTIATE(double)
#undef DSTOD_INSTANTIATE

}  // namespace dstod
