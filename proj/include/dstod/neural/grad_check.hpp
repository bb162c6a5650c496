#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dstod/neural/tensor.hpp"

namespace dstod::nn {

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-4;
  std::size_t max_entries = 48;  // sampled entries per tensor
  std::uint64_t seed = 1;
  std::string corrupt_tensor;    // fault-injection hook: perturbs this tensor's analytic gradient
};

struct GradCheckRow {
  std::string group;
  std::string tensor;
  bool frozen = false;
  std::size_t checked = 0;
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||) over checked entries
  double max_abs_error = 0.0;
  bool passed = false;
};

/// `loss(with_grad)` evaluates the scalar loss; when with_grad is true it must
/// also accumulate gradients into the stores (which the harness zeroes first).
/// Frozen tensors are checked for an all-zero analytic gradient.
std::vector<GradCheckRow> check_gradients(const std::string& group, const std::vector<ParameterStore<double>*>& stores,
                                          const std::function<double(bool)>& loss, const GradCheckOptions& options);

}  // namespace dstod::nn
