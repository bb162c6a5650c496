#include "dstod/neural/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dstod/rng.hpp"

namespace dstod::nn {

std::vector<GradCheckRow> check_gradients(const std::string& group, const std::vector<ParameterStore<double>*>& stores,
                                          const std::function<double(bool)>& loss, const GradCheckOptions& opt) {
  for (auto* s : stores) s->zero_grad();
  loss(true);
  std::vector<GradCheckRow> rows;
  Rng rng(opt.seed);
  for (auto* store : stores) {
    for (std::size_t pi = 0; pi < store->size(); ++pi) {
      auto& p = (*store)[pi];
      GradCheckRow row;
      row.group = group;
      row.tensor = p.name;
      row.frozen = p.frozen;
      Matrix<double> analytic = p.grad;
      if (p.name == opt.corrupt_tensor) analytic = analytic * 1.01 + Matrix<double>::Constant(analytic.rows(), analytic.cols(), 1e-3);
      if (p.frozen) {
        row.max_abs_error = analytic.cwiseAbs().maxCoeff();
        row.passed = row.max_abs_error == 0.0;
        row.checked = p.size();
        rows.push_back(row);
        continue;
      }
      std::vector<std::size_t> entries(p.size());
      std::iota(entries.begin(), entries.end(), 0);
      if (entries.size() > opt.max_entries) {
        std::shuffle(entries.begin(), entries.end(), rng);
        entries.resize(opt.max_entries);
        std::sort(entries.begin(), entries.end());
      }
      double diff2 = 0, a2 = 0, n2 = 0;
      for (auto e : entries) {
        double& v = p.value.data()[e];
        const double saved = v;
        v = saved + opt.step;
        const double lp = loss(false);
        v = saved - opt.step;
        const double lm = loss(false);
        v = saved;
        const double numeric = (lp - lm) / (2 * opt.step);
        const double a = analytic.data()[e];
        diff2 += (a - numeric) * (a - numeric);
        a2 += a * a;
        n2 += numeric * numeric;
        row.max_abs_error = std::max(row.max_abs_error, std::abs(a - numeric));
      }
      const double denom = std::max(std::sqrt(a2), std::sqrt(n2));
      row.rel_error = denom > 1e-10 ? std::sqrt(diff2) / denom : std::sqrt(diff2);
      row.checked = entries.size();
      row.passed = std::isfinite(row.rel_error) && row.rel_error < opt.tolerance;
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace dstod::nn
