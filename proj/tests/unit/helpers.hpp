#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "scale/autodiff.hpp"
#include "scale/rng.hpp"

namespace scale::test {

using ad::Tensor;
using ad::Variable;

inline Tensor random_tensor(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(rows, cols);
  for (auto& v : t.data()) v = lo + (hi - lo) * uniform_unit(rng);
  return t;
}

// Relative error between the backward-pass gradient of `loss_fn` and its
// central finite differences, over every element of `params`:
// ||analytic - numeric|| / max(||analytic||, ||numeric||).
inline double gradient_error(const std::function<Variable()>& loss_fn, std::vector<Variable> params,
                             double h = 1e-5) {
  for (auto& p : params) p.zero_grad();
  ad::backward(loss_fn());
  std::vector<double> analytic;
  std::vector<double> numeric;
  for (auto& p : params) {
    for (std::size_t i = 0; i < p.value().size(); ++i) {
      analytic.push_back(p.has_grad() ? p.grad()[i] : 0.0);
      const double orig = p.value()[i];
      p.mutable_value()[i] = orig + h;
      const double up = loss_fn().item();
      p.mutable_value()[i] = orig - h;
      const double down = loss_fn().item();
      p.mutable_value()[i] = orig;
      numeric.push_back((up - down) / (2.0 * h));
    }
    p.zero_grad();
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  return std::sqrt(diff) / denom;
}

}  // namespace scale::test
