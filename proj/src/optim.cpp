#include "rgnn/optim.hpp"

#include <cmath>

#include "rgnn/errors.hpp"

namespace rgnn {

Tensor ParameterSet::add(std::string name, Shape shape, std::vector<double> values) {
  if (find(name) != nullptr) throw ConfigError("duplicate parameter name " + name);
  Parameter p;
  p.name = std::move(name);
  p.tensor = Tensor::from(std::move(shape), std::move(values), /*requires_grad=*/true);
  p.tensor.mutable_grad();  // allocate zeros so unused parameters still step cleanly
  p.adam_m.assign(p.tensor.size(), 0.0);
  p.adam_v.assign(p.tensor.size(), 0.0);
  params_.push_back(std::move(p));
  return params_.back().tensor;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

const Parameter* ParameterSet::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

Parameter* ParameterSet::find(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void adam_step(ParameterSet& params, const AdamOptions& opts) {
  for (auto& p : params) {
    if (!p.tensor.has_grad()) throw ContractError("adam_step: parameter " + p.name + " has no gradient");
  }
  for (auto& p : params) {
    ++p.step_count;
    const double t = static_cast<double>(p.step_count);
    const double c1 = 1.0 - std::pow(opts.beta1, t);
    const double c2 = 1.0 - std::pow(opts.beta2, t);
    auto w = p.tensor.mutable_data();
    auto g = p.tensor.mutable_grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      p.adam_m[i] = opts.beta1 * p.adam_m[i] + (1.0 - opts.beta1) * g[i];
      p.adam_v[i] = opts.beta2 * p.adam_v[i] + (1.0 - opts.beta2) * g[i] * g[i];
      const double m_hat = p.adam_m[i] / c1;
      const double v_hat = p.adam_v[i] / c2;
      w[i] -= opts.lr * m_hat / (std::sqrt(v_hat) + opts.eps);
      g[i] = 0.0;
    }
  }
}

}  // namespace rgnn
