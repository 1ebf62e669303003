#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "rgnn/tensor.hpp"

namespace rgnn {

struct Parameter {
  std::string name;
  Tensor tensor;  // leaf, requires_grad
  std::vector<double> adam_m;
  std::vector<double> adam_v;
  std::uint64_t step_count = 0;
};

// Owns the trainable leaves of a model. Insertion order is the canonical
// order for checkpoints and parameter counting.
class ParameterSet {
 public:
  Tensor add(std::string name, Shape shape, std::vector<double> values);

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  const Parameter* find(const std::string& name) const;
  Parameter* find(const std::string& name);

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();

 private:
  std::deque<Parameter> params_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam; gradients are zeroed after the update.
void adam_step(ParameterSet& params, const AdamOptions& opts);

}  // namespace rgnn
