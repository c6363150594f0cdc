#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "kpbev/tensor.hpp"

namespace kpbev {

struct GradCheckOptions {
  double step_scale = 1e-5;  // h = step_scale * max(1, |theta|)
  double tolerance = 1e-4;
  std::size_t max_components = 0;  // 0 = check every component
  // Components where analytic and numeric are both below this magnitude are
  // probed and reported but not scored: central differences only measure
  // rounding noise there. Zero scores everything.
  double negligible = 0.0;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double analytic_at_max = 0.0;
  double numeric_at_max = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_negligible = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  double max_rel_err() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_err);
    return m;
  }
  bool passed(double tol) const { return max_rel_err() <= tol; }

  void print(std::ostream& os) const {
    char line[256];
    std::snprintf(line, sizeof(line), "%-40s %12s %14s %14s %8s\n", "parameter",
                  "max rel err", "analytic", "numeric", "checked");
    os << line;
    for (const auto& e : entries) {
      std::snprintf(line, sizeof(line), "%-40s %12.3e %14.6e %14.6e %8zu\n",
                    e.name.c_str(), e.max_rel_err, e.analytic_at_max,
                    e.numeric_at_max, e.checked);
      os << line;
    }
  }
};

namespace detail {

/// When subsampling, probe the largest analytic components (where a broken
/// backward pass must show) plus an even stride across the tensor (to catch
/// branches the backward pass wrongly zeroed).
inline std::vector<std::size_t> select_components(const Tensor<double>& analytic,
                                                  std::size_t max_components) {
  const std::size_t n = analytic.size();
  std::vector<std::size_t> indices;
  if (max_components == 0 || n <= max_components) {
    indices.resize(n);
    for (std::size_t i = 0; i < n; ++i) indices[i] = i;
    return indices;
  }
  std::vector<std::size_t> by_mag(n);
  for (std::size_t i = 0; i < n; ++i) by_mag[i] = i;
  const std::size_t k_top = max_components / 2;
  std::partial_sort(by_mag.begin(), by_mag.begin() + k_top, by_mag.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double ma = std::abs(analytic[a]);
                      const double mb = std::abs(analytic[b]);
                      return ma != mb ? ma > mb : a < b;
                    });
  std::set<std::size_t> chosen(by_mag.begin(), by_mag.begin() + k_top);
  const std::size_t stride = n / (max_components - k_top);
  for (std::size_t i = 0; i < n && chosen.size() < max_components; i += stride) {
    chosen.insert(i);
  }
  return {chosen.begin(), chosen.end()};
}

}  // namespace detail

/// Central-difference check of hand-written gradients.
///
/// `loss` re-evaluates the scalar objective at the current parameter values;
/// `compute_grads` zeroes gradients and runs one forward/backward, leaving
/// analytic gradients in each Param.
inline GradCheckReport gradcheck(const std::function<double()>& loss,
                                 const std::function<void()>& compute_grads,
                                 const std::vector<Param<double>*>& params,
                                 const GradCheckOptions& opt = {}) {
  compute_grads();
  std::vector<Tensor<double>> analytic;
  analytic.reserve(params.size());
  for (const Param<double>* p : params) analytic.push_back(p->grad);

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Param<double>& p = *params[pi];
    GradCheckEntry entry;
    entry.name = p.name;
    for (std::size_t i : detail::select_components(analytic[pi], opt.max_components)) {
      const double theta = p.value[i];
      const double a = analytic[pi][i];
      const auto probe = [&](double h) {
        p.value[i] = theta + h;
        const double f_plus = loss();
        p.value[i] = theta - h;
        const double f_minus = loss();
        p.value[i] = theta;
        return (f_plus - f_minus) / (2.0 * h);
      };
      const double h0 = opt.step_scale * std::max(1.0, std::abs(theta));
      double numeric = probe(h0);
      ++entry.checked;
      if (std::max(std::abs(a), std::abs(numeric)) < opt.negligible) {
        ++entry.skipped_negligible;
        continue;
      }
      const auto rel_err = [&](double n) {
        return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
      };
      double rel = rel_err(numeric);
      // A step that straddles a ReLU kink (too large) or drowns a small
      // gradient in rounding noise (too small) misjudges a correct VJP;
      // a wrong VJP disagrees at every step size.
      for (const double h : {h0 * 0.1, h0 * 0.01, h0 * 10.0}) {
        if (rel <= opt.tolerance) break;
        const double retry = probe(h);
        if (rel_err(retry) < rel) {
          rel = rel_err(retry);
          numeric = retry;
        }
      }
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.analytic_at_max = a;
        entry.numeric_at_max = numeric;
      }
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace kpbev
