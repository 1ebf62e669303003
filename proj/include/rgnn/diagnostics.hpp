#pragma once

// Gradient checks against central differences, and the per-hop gradient
// profile of a freshly initialised model on a path graph.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "rgnn/models.hpp"
#include "rgnn/tensor.hpp"

namespace rgnn {

// A scalar loss and the leaves whose gradients are checked. The loss is
// re-evaluated after every perturbation, so it must read the leaves' storage.
struct GradProblem {
  std::function<Tensor()> loss;
  std::vector<Tensor> leaves;
};

using GradSampler = std::function<GradProblem(std::uint64_t seed)>;

// max over leaf entries of |analytic − numeric| / max(|analytic|, |numeric|, floor).
double max_relative_grad_error(const GradProblem& p, double h = 1e-5, double floor = 1e-3);

struct GradCheckResult {
  std::string component;
  std::size_t draws = 0;
  std::size_t entries = 0;  // leaf entries checked per draw, summed
  double max_rel_error = 0;
  double tolerance = 0;
  bool passed = false;
};

GradCheckResult finite_diff_check(const std::string& component, const GradSampler& sampler, double tolerance = 1e-4,
                                  std::size_t draws = 10, std::uint64_t seed = 0);

// Layer components (mu_mm, ..., rgcn_update) followed by every model name.
std::vector<std::string> grad_check_components();
// Random instance sampler for one component. Full models are built at D = 8.
GradSampler component_sampler(const std::string& component);

std::vector<GradCheckResult> run_grad_checks(const std::vector<std::string>& components, double tolerance = 1e-4,
                                             std::size_t draws = 10, std::uint64_t seed = 0);
void write_grad_report(std::ostream& os, const std::vector<GradCheckResult>& results);

// ---------------------------------------------------------------------------

struct HopGradientProfile {
  ModelName model{};
  std::size_t length = 0;
  std::uint64_t seed = 0;
  std::vector<double> grad_norm;  // index = hop distance from the readout node

  // norm at distance 0 over norm at the farthest distance.
  double decay_ratio() const;
};

// Length-N path graph in the Conditional Recall layout with a random string,
// a K = N + 1 model at initialisation, loss at the last node against the
// string's label, gradients taken with respect to the initial node states.
HopGradientProfile hop_gradient_profile(ModelName m, std::size_t length, std::uint64_t seed);
// Same measurement with the config's own K, which may be shorter than the path.
HopGradientProfile hop_gradient_profile(const ModelConfig& config, std::size_t length, std::uint64_t seed);

// "# model=.. N=.. seed=.." then "distance<TAB>grad_norm" rows.
void write_profile_tsv(std::ostream& os, const HopGradientProfile& p);

struct DecayComparison {
  std::vector<double> baseline_ratios, candidate_ratios;
  double baseline_median = 0, candidate_median = 0;
  // baseline_median / candidate_median
  double factor() const;
};

DecayComparison compare_decay(ModelName baseline, ModelName candidate, std::size_t length,
                              const std::vector<std::uint64_t>& seeds);

double median(std::vector<double> xs);

}  // namespace rgnn
