#pragma once

// Shared oracles and helpers for the test suites. Everything here stays
// independent of the library's forward/backward implementation paths.

#include <cmath>
#include <functional>
#include <vector>

#include "adapt/embedding.hpp"
#include "adapt/random.hpp"
#include "adapt/tensor.hpp"

namespace testsup {

// Naive O(n^3) matrix product oracle (row-major).
inline std::vector<double> matmul_oracle(const std::vector<double>& a,
                                         const std::vector<double>& b, size_t m, size_t k,
                                         size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

inline double rel_err(double got, double want, double floor = 1e-6) {
  return std::abs(got - want) / std::max({std::abs(got), std::abs(want), floor});
}

// Central finite differences of a scalar-valued rebuildable loss with respect
// to one leaf tensor; compares against the analytic gradient already stored on
// the leaf. Returns the max relative error over (a deterministic subset of)
// the elements.
inline double fd_max_rel_error(adapt::Tensor<double>& leaf,
                               const std::function<double()>& loss_value,
                               const std::vector<double>& analytic_grad, double h,
                               double denom_floor = 1e-6, size_t max_checked = size_t(-1)) {
  double worst = 0.0;
  auto& vals = leaf.values_mut();
  const size_t n = vals.size();
  const size_t stride = n <= max_checked ? 1 : (n + max_checked - 1) / max_checked;
  for (size_t i = 0; i < n; i += stride) {
    const double keep = vals[i];
    vals[i] = keep + h;
    const double lp = loss_value();
    vals[i] = keep - h;
    const double lm = loss_value();
    vals[i] = keep;
    const double fd = (lp - lm) / (2.0 * h);
    const double g = analytic_grad[i];
    worst = std::max(worst, std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), denom_floor}));
  }
  return worst;
}

// One-shot gradient check for a single primitive: loss = sum(f(x) * w) with
// fixed random weights. Returns max relative error over all elements of x.
inline double primitive_grad_check(
    const adapt::Shape& shape,
    const std::function<adapt::Tensor<double>(const adapt::Tensor<double>&)>& f,
    adapt::RandomSource& rng, double h = 1e-6) {
  using adapt::Tensor;
  Tensor<double> x = adapt::randn_tensor<double>(rng, shape);
  x.set_requires_grad(true);
  Tensor<double> out_probe = f(x);
  Tensor<double> w = adapt::randn_tensor<double>(rng, out_probe.shape());

  auto loss_of = [&]() { return adapt::sum_all(adapt::mul(f(x), w)); };
  Tensor<double> loss = loss_of();
  adapt::backward(loss);
  std::vector<double> analytic = x.grad();
  x.zero_grad();
  return fd_max_rel_error(
      x, [&]() { return loss_of().item(); }, analytic, h);
}

}  // namespace testsup
