#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dstod/neural/checkpoint.hpp"
#include "dstod/neural/encoder.hpp"
#include "json.hpp"

namespace dstod {

using nn::Activation;
using nn::AdapterConfig;
using nn::Compose;

/// One adapter in the notation of the residual adapter equation: D is m x h,
/// U is h x m, vectors are columns.
struct AdapterParams {
  Eigen::MatrixXd down;
  Eigen::MatrixXd up;
  Eigen::VectorXd down_bias;  // empty in bias-free mode
  Eigen::VectorXd up_bias;
  Activation activation = Activation::relu;

  int bottleneck() const { return static_cast<int>(down.rows()); }
  int hidden() const { return static_cast<int>(down.cols()); }
};

/// U * g(D * h + b_D) + b_U + r.
Eigen::VectorXd adapter_forward(const AdapterParams& p, const Eigen::VectorXd& h, const Eigen::VectorXd& r);

/// A trained or fresh set of per-layer adapters for one domain. Tensor names
/// are "layer.<i>.down.weight" etc.; weights are stored input-major like the
/// host (down.weight is h x m).
template <typename T>
struct AdapterBank {
  std::string domain;
  AdapterConfig config;
  int layers = 0;
  int hidden = 0;
  nn::ParameterStore<T> params;
  nlohmann::json provenance = nlohmann::json::object();

  AdapterParams layer_params(int layer) const;
};

/// D ~ N(0, 1/sqrt(h)) entrywise, U = 0, biases 0.
template <typename T>
AdapterBank<T> init_adapters(const nn::EncoderConfig& host, const AdapterConfig& config, const std::string& domain,
                             std::uint64_t seed);

/// Per-layer unnormalized fusion logits, one entry per bank.
using FusionWeights = std::vector<std::vector<double>>;

/// Returns a copy of `base` with the banks registered and composed. Fuse with
/// a single bank degenerates to single (a warning is written to stderr). The
/// copy keeps the base freeze flags.
template <typename T>
nn::Encoder<T> inject(const nn::Encoder<T>& base, const std::vector<AdapterBank<T>>& banks, Compose compose,
                      const std::optional<FusionWeights>& fusion = std::nullopt);

/// Freezes every tensor that is not an adapter or fusion tensor. Adapter and
/// fusion tensors are set trainable according to the flags.
template <typename T>
void freeze_base(nn::Encoder<T>& model, bool train_adapters = true, bool train_fusion = true);

/// Sets adapter tensors trainable or frozen; other tensors untouched.
template <typename T>
void set_adapters_trainable(nn::Encoder<T>& model, bool trainable);

/// Copies a registered bank's current values out of the host model.
template <typename T>
AdapterBank<T> extract_bank(const nn::Encoder<T>& model, const std::string& domain);

/// L * (2mh + m + h) with biases, L * 2mh without.
std::size_t adapter_parameter_count(const nn::EncoderConfig& host, const AdapterConfig& config);

template <typename T>
void save_bank(const std::filesystem::path& dir, const AdapterBank<T>& bank, const nn::EncoderConfig& host);

template <typename T>
AdapterBank<T> load_bank(const std::filesystem::path& dir);

bool is_adapter_tensor(const std::string& name);
bool is_fusion_tensor(const std::string& name);

}  // namespace dstod
