#include "rgnn/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>
#include <ostream>

#include "rgnn/errors.hpp"
#include "rgnn/layers.hpp"
#include "rgnn/tasks.hpp"
#include "rgnn/training.hpp"

namespace rgnn {

double max_relative_grad_error(const GradProblem& p, double h, double floor) {
  std::vector<Tensor> leaves = p.leaves;
  for (auto& l : leaves) l.zero_grad();
  p.loss().backward();
  double worst = 0;
  for (auto& leaf : leaves) {
    std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    if (analytic.empty()) analytic.assign(leaf.size(), 0.0);
    auto data = leaf.mutable_data();
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + h;
      const double up = p.loss().item();
      data[i] = keep - h;
      const double down = p.loss().item();
      data[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      const double err = std::abs(analytic[i] - numeric) / denom;
      worst = std::isnan(err) ? INFINITY : std::max(worst, err);
    }
  }
  return worst;
}

GradCheckResult finite_diff_check(const std::string& component, const GradSampler& sampler, double tolerance,
                                  std::size_t draws, std::uint64_t seed) {
  GradCheckResult r;
  r.component = component;
  r.draws = draws;
  r.tolerance = tolerance;
  for (std::size_t i = 0; i < draws; ++i) {
    const GradProblem p = sampler(Rng::derive(seed, i).next());
    for (const auto& l : p.leaves) r.entries += l.size();
    r.max_rel_error = std::max(r.max_rel_error, max_relative_grad_error(p));
  }
  r.passed = r.max_rel_error < tolerance;
  return r;
}

namespace {

const std::vector<std::string> kLayerComponents = {
    "mu_mm",        "mu_mm_red",      "mu_gcm",  "gamma_sum", "gamma_mean", "gamma_relation_mean",
    "gamma_rv_gat", "rgat_attention", "phi_gru", "phi_sgru",  "rgcn_update"};

Tensor random_leaf(Shape shape, Rng& rng, double bound) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Projects any output onto a scalar with fixed random weights.
Tensor projected(const Tensor& out, const std::vector<double>& w) {
  return sum(mul(out, Tensor::from(out.shape(), w)));
}

std::vector<double> projection(std::size_t n, Rng& rng) {
  std::vector<double> w(n);
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return w;
}

void randomize(ParameterSet& ps, Rng& rng, double bound) {
  for (auto& p : ps) {
    for (auto& x : p.tensor.mutable_data()) x = rng.uniform(-bound, bound);
  }
}

std::vector<Tensor> leaves_of(const ParameterSet& ps) {
  std::vector<Tensor> out;
  for (const auto& p : ps) out.push_back(p.tensor);
  return out;
}

// Small random multigraph: 2..6 nodes, 1..3 relations plus SELF.
RelGraph random_graph(Rng& rng, std::size_t num_symbols) {
  const auto n = static_cast<std::size_t>(rng.between(2, 6));
  const auto r = static_cast<std::size_t>(rng.between(1, 3));
  std::vector<std::string> rels;
  for (std::size_t i = 0; i < r; ++i) rels.push_back("r" + std::to_string(i));
  std::vector<Edge> edges;
  const auto m = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(n), static_cast<std::int64_t>(3 * n)));
  for (std::size_t e = 0; e < m; ++e) edges.push_back({rng.below(n), rng.below(n), rng.below(r)});
  std::vector<std::int64_t> labels(n);
  for (auto& l : labels) l = static_cast<std::int64_t>(rng.below(std::max<std::size_t>(num_symbols, 1)));
  return add_self_edges(RelGraph(labels, edges, rels));
}

// Everything a layer-level problem keeps alive between loss evaluations.
struct LayerState {
  EdgeIndex edges;
  ParameterSet params;
  LayerWeights weights;
  Tensor states, extra;
  std::vector<double> proj;
};

GradSampler layer_sampler(const std::string& name) {
  return [name](std::uint64_t seed) {
    Rng rng(seed);
    auto s = std::make_shared<LayerState>();
    const std::size_t heads = 1 + rng.below(2);
    const std::size_t d = heads * static_cast<std::size_t>(rng.between(2, 4));
    const RelGraph g = random_graph(rng, 1);
    s->edges = EdgeIndex::build(g);
    const LayerDims dims{d, g.num_relations(), heads, 3};
    const std::size_t n = g.num_nodes(), e = g.num_edges();
    s->states = random_leaf({n, d}, rng, 1.5);

    LayerSpec spec;
    if (name == "mu_mm") spec = {false, MessageKind::mm, AggregationKind::sum, UpdateKind::gru};
    if (name == "mu_mm_red") spec = {false, MessageKind::mm_reduced, AggregationKind::sum, UpdateKind::gru};
    if (name == "mu_gcm") spec = {false, MessageKind::gcm, AggregationKind::sum, UpdateKind::gru};
    if (name == "gamma_rv_gat") spec = {false, MessageKind::mm, AggregationKind::rv_gat, UpdateKind::gru};
    if (name == "rgat_attention") spec.rgat = true;
    if (name == "phi_sgru") spec.update = UpdateKind::sgru;
    if (name == "rgcn_update") spec.update = UpdateKind::rgcn;
    if (name == "phi_gru") spec.update = UpdateKind::gru;
    const bool update_only = name.starts_with("phi_") || name == "rgcn_update";
    const bool plain_aggregation = name.starts_with("gamma_") && name != "gamma_rv_gat";
    if (update_only) {
      switch (spec.update) {
        case UpdateKind::gru: s->weights.gru = make_gru(s->params, "", d, rng); break;
        case UpdateKind::sgru: s->weights.sgru = make_sgru(s->params, "", d, rng); break;
        case UpdateKind::rgcn: s->weights.rgcn = make_rgcn(s->params, "", d, rng); break;
      }
      s->extra = random_leaf({n, d}, rng, 1.5);
    } else if (!plain_aggregation) {
      s->weights = make_layer(s->params, "", spec, dims, rng);
    }
    // Attention scores enter an exponential unscaled in RGAT; keep them moderate.
    randomize(s->params, rng, spec.rgat ? 0.5 : 0.8);
    if (plain_aggregation || name == "gamma_rv_gat") s->extra = random_leaf({e, d}, rng, 1.5);

    std::function<Tensor()> out;
    const LayerState* p = s.get();
    if (name == "mu_mm") out = [p] { return mu_mm(p->states, p->edges, p->weights.relations); };
    if (name == "mu_mm_red") out = [p] { return mu_mm_red(p->states, p->edges, p->weights.relations); };
    if (name == "mu_gcm") out = [p] { return mu_gcm(p->states, p->edges, p->weights.relations, p->weights.gcm); };
    if (name == "gamma_sum") out = [p] { return gamma_sum(p->extra, p->edges); };
    if (name == "gamma_mean") out = [p] { return gamma_mean(p->extra, p->edges); };
    if (name == "gamma_relation_mean") out = [p] { return gamma_relation_mean(p->extra, p->edges); };
    if (name == "gamma_rv_gat") {
      out = [p] { return gamma_rv_gat(p->states, p->extra, p->edges, p->weights.relations, p->weights.attn); };
    }
    if (name == "rgat_attention") out = [p] { return rgat_attention(p->states, p->edges, p->weights.rgat); };
    if (name == "phi_gru") out = [p] { return phi_gru(p->states, p->extra, p->weights.gru); };
    if (name == "phi_sgru") out = [p] { return phi_sgru(p->states, p->extra, p->weights.sgru); };
    if (name == "rgcn_update") out = [p] { return rgcn_update(p->states, p->extra, p->weights.rgcn); };

    GradProblem prob;
    prob.leaves = leaves_of(s->params);
    if (!plain_aggregation) prob.leaves.push_back(s->states);
    if (s->extra.defined()) prob.leaves.push_back(s->extra);
    s->proj = projection(out().size(), rng);
    prob.loss = [s, out] { return projected(out(), s->proj); };
    return prob;
  };
}

struct ModelState {
  std::unique_ptr<Model> model;
  EdgeIndex edges;
  std::vector<std::size_t> nodes, targets;
};

GradSampler model_sampler(ModelName m) {
  return [m](std::uint64_t seed) {
    Rng rng(seed);
    const RelGraph g = random_graph(rng, 10);
    ModelConfig c = ModelConfig::for_model(m);
    c.dim = 8;
    c.heads = 2;
    c.embed_dim = 4;
    c.d_star = 3;
    c.layers = 3;
    c.num_relations = g.num_relations();
    c.num_symbols = 10;
    c.num_classes = 5;
    auto s = std::make_shared<ModelState>();
    s->model = std::make_unique<Model>(c, seed);
    randomize(s->model->params(), rng, m == ModelName::rgat ? 0.5 : 0.8);
    s->edges = EdgeIndex::build(g);
    for (std::size_t v = 0; v < g.num_nodes(); ++v) {
      s->nodes.push_back(v);
      s->targets.push_back(rng.below(c.num_classes));
    }
    GradProblem prob;
    prob.leaves = leaves_of(s->model->params());
    prob.loss = [s] {
      return cross_entropy_label_smoothed(forward(*s->model, s->edges, s->nodes), s->targets, 0.1);
    };
    return prob;
  };
}

}  // namespace

std::vector<std::string> grad_check_components() {
  std::vector<std::string> out = kLayerComponents;
  for (ModelName m : all_models()) out.push_back(to_string(m));
  return out;
}

GradSampler component_sampler(const std::string& component) {
  if (std::find(kLayerComponents.begin(), kLayerComponents.end(), component) != kLayerComponents.end()) {
    return layer_sampler(component);
  }
  return model_sampler(parse_model_name(component));
}

std::vector<GradCheckResult> run_grad_checks(const std::vector<std::string>& components, double tolerance,
                                             std::size_t draws, std::uint64_t seed) {
  std::vector<GradCheckResult> out;
  for (const auto& c : components) out.push_back(finite_diff_check(c, component_sampler(c), tolerance, draws, seed));
  return out;
}

void write_grad_report(std::ostream& os, const std::vector<GradCheckResult>& results) {
  os << "component\tdraws\tentries\tmax_rel_error\ttolerance\tstatus\n";
  for (const auto& r : results) {
    char err[32], tol[32];
    std::snprintf(err, sizeof err, "%.3e", r.max_rel_error);
    std::snprintf(tol, sizeof tol, "%.0e", r.tolerance);
    os << r.component << '\t' << r.draws << '\t' << r.entries << '\t' << err << '\t' << tol << '\t'
       << (r.passed ? "pass" : "FAIL") << '\n';
  }
}

// ---------------------------------------------------------------------------

double HopGradientProfile::decay_ratio() const {
  if (grad_norm.empty()) return 0;
  return grad_norm.front() / grad_norm.back();
}

HopGradientProfile hop_gradient_profile(ModelName m, std::size_t length, std::uint64_t seed) {
  return hop_gradient_profile(recall_model_config(m, length), length, seed);
}

HopGradientProfile hop_gradient_profile(const ModelConfig& config, std::size_t length, std::uint64_t seed) {
  if (length < 2) throw ConfigError("hop gradient profile needs a path of at least 2 nodes");
  Rng rng = Rng::derive(seed, 0x686f70ULL);
  static const std::string alphabet = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
  std::string s;
  do {  // the digit 0 is not a class, so strings labelled by it are redrawn
    s.clear();
    for (std::size_t i = 0; i < length; ++i) s += alphabet[rng.below(alphabet.size())];
  } while (conditional_recall_label(s) == '0');
  const TaskInstance inst = seq_to_graph(s);
  const EdgeIndex edges = EdgeIndex::build(inst.graph);

  const ModelConfig& c = config;
  const Model model(c, seed);
  Tensor h0;
  {
    NoGradGuard no_grad;
    const Tensor init = initial_states(model, edges);
    h0 = Tensor::from(init.shape(), {init.data().begin(), init.data().end()}, true);
  }
  const Tensor logits = readout(model, encode(model, h0, edges), inst.readout);
  const std::vector<std::size_t> target{inst.targets.front().cls};
  cross_entropy_label_smoothed(logits, target, 0.0).backward();

  HopGradientProfile p;
  p.model = c.model;
  p.length = length;
  p.seed = seed;
  const auto g = h0.grad();
  const std::size_t d = h0.cols(), last = length - 1;
  for (std::size_t dist = 0; dist < length; ++dist) {
    double ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += g[(last - dist) * d + j] * g[(last - dist) * d + j];
    p.grad_norm.push_back(std::sqrt(ss));
  }
  return p;
}

void write_profile_tsv(std::ostream& os, const HopGradientProfile& p) {
  os << "# model=" << to_string(p.model) << " N=" << p.length << " seed=" << p.seed << '\n';
  os << "distance\tgrad_norm\n";
  for (std::size_t d = 0; d < p.grad_norm.size(); ++d) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6e", p.grad_norm[d]);
    os << d << '\t' << buf << '\n';
  }
}

double median(std::vector<double> xs) {
  if (xs.empty()) return 0;
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

double DecayComparison::factor() const { return baseline_median / candidate_median; }

DecayComparison compare_decay(ModelName baseline, ModelName candidate, std::size_t length,
                              const std::vector<std::uint64_t>& seeds) {
  DecayComparison c;
  for (std::uint64_t s : seeds) {
    c.baseline_ratios.push_back(hop_gradient_profile(baseline, length, s).decay_ratio());
    c.candidate_ratios.push_back(hop_gradient_profile(candidate, length, s).decay_ratio());
  }
  c.baseline_median = median(c.baseline_ratios);
  c.candidate_median = median(c.candidate_ratios);
  return c;
}

}  // namespace rgnn
