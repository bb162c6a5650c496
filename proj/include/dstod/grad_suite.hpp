#pragma once

// Finite-difference check of every trainable parameter group on a tiny
// double-precision model.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dstod/neural/grad_check.hpp"
#include "json.hpp"

namespace dstod {

struct GradSuiteOptions {
  int layers = 2;
  int hidden = 16;
  int bottleneck = 4;
  nn::GradCheckOptions check;
};

struct GradSuiteReport {
  std::vector<nn::GradCheckRow> rows;
  std::map<std::string, double> max_rel_error;  // per group, over trainable tensors
  std::map<std::string, bool> group_passed;
  double seconds = 0.0;

  bool passed() const;
  nlohmann::json to_json() const;
};

/// Groups: encoder, mlm, rs-class, rs-contrast (both scoring modes), adapters,
/// fusion, dst, rr.
GradSuiteReport run_grad_suite(const GradSuiteOptions& options);

}  // namespace dstod
