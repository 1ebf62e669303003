#pragma once

// Test-only helpers: random tensors and a central-difference gradient
// oracle that only ever evaluates the forward pass.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "rgnn/random.hpp"
#include "rgnn/tensor.hpp"

namespace rgnn::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0, bool grad = true) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// Random projection of an arbitrary output to a scalar, so every output
// element contributes to the checked gradient.
inline Tensor project(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(out.size());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return sum(mul(out, Tensor::from(out.shape(), std::move(w))));
}

// Max relative error between analytic and central-difference gradients of
// `loss_fn` over every element of every leaf. Relative error uses the
// denominator max(|a|, |n|, floor).
inline double max_grad_error(const std::function<Tensor()>& loss_fn, std::vector<Tensor> leaves,
                             double h = 1e-5, double floor = 1e-3) {
  for (auto& l : leaves) l.zero_grad();
  loss_fn().backward();
  double worst = 0;
  for (auto& leaf : leaves) {
    std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    if (analytic.empty()) analytic.assign(leaf.size(), 0.0);
    auto data = leaf.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + h;
      const double up = loss_fn().item();
      data[i] = keep - h;
      const double down = loss_fn().item();
      data[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace rgnn::testing
