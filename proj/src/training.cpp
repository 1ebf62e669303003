#include "rgnn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <unordered_map>

#include "rgnn/errors.hpp"

namespace rgnn {

Batch make_batch(std::span<const TaskInstance* const> instances) {
  std::vector<const RelGraph*> graphs;
  graphs.reserve(instances.size());
  for (const auto* inst : instances) graphs.push_back(&inst->graph);
  Batch b;
  b.edges = EdgeIndex::build(graphs);
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const TaskInstance& inst = *instances[i];
    const std::size_t base = b.edges.graph_offsets[i];
    std::unordered_map<std::size_t, std::size_t> cls;
    for (const auto& t : inst.targets) cls[t.node] = t.cls;
    b.readout_offsets.push_back(b.readout.size());
    for (std::size_t v : inst.readout) {
      auto it = cls.find(v);
      if (it == cls.end()) throw ContractError("readout node " + std::to_string(v) + " has no target");
      b.readout.push_back(base + v);
      b.targets.push_back(it->second);
    }
  }
  b.readout_offsets.push_back(b.readout.size());
  return b;
}

namespace {

std::vector<const TaskInstance*> pointers(std::span<const TaskInstance> xs, std::span<const std::size_t> order,
                                          std::size_t begin, std::size_t end) {
  std::vector<const TaskInstance*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&xs[order.empty() ? i : order[i]]);
  return out;
}

std::size_t argmax_row(const Tensor& logits, std::size_t r) {
  const auto row = logits.data().subspan(r * logits.cols(), logits.cols());
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

std::vector<std::vector<std::size_t>> predict(const Model& model, std::span<const TaskInstance> instances,
                                              std::size_t batch_size) {
  NoGradGuard no_grad;
  std::vector<std::vector<std::size_t>> out;
  out.reserve(instances.size());
  batch_size = std::max<std::size_t>(batch_size, 1);
  for (std::size_t begin = 0; begin < instances.size(); begin += batch_size) {
    const auto ptrs = pointers(instances, {}, begin, std::min(instances.size(), begin + batch_size));
    const Batch b = make_batch(ptrs);
    const Tensor logits = forward(model, b.edges, b.readout);
    for (std::size_t i = 0; i < ptrs.size(); ++i) {
      std::vector<std::size_t> pred;
      for (std::size_t r = b.readout_offsets[i]; r < b.readout_offsets[i + 1]; ++r) pred.push_back(argmax_row(logits, r));
      out.push_back(std::move(pred));
    }
  }
  return out;
}

Accuracy evaluate(const Model& model, std::span<const TaskInstance> instances, std::size_t batch_size) {
  const auto preds = predict(model, instances, batch_size);
  AccuracyCounter counter;
  for (std::size_t i = 0; i < instances.size(); ++i) counter.add(preds[i], instances[i]);
  return counter.value();
}

namespace {

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

}  // namespace

void write_epoch_record(std::ostream& os, const EpochRecord& r) {
  os << "epoch " << r.epoch << " loss " << num(r.loss) << " val_node " << num(r.validation.node) << " val_graph "
     << num(r.validation.graph) << std::endl;  // flushed so long runs can be followed
}

void write_result_record(std::ostream& os, const TrainRun& run) {
  os << "result test_node " << num(run.test.node) << " test_graph " << num(run.test.graph) << " stopped "
     << run.stopped_epoch;
  if (run.failed) os << " failed " << run.failure;
  os << '\n';
}

TrainRun train(Model& model, const Dataset& data, const TrainOptions& options) {
  if (data.train.empty() || data.validation.empty()) throw ContractError("train: empty train or validation split");
  if (options.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(options.lr >= 0)) throw ConfigError("learning rate must be nonnegative");

  TrainRun run;
  Rng rng = Rng::derive(options.seed, 0x7261696eULL);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  run.best_checkpoint = model.snapshot();
  std::size_t epoch = 0;

  for (epoch = 1; epoch <= options.max_epochs; ++epoch) {
    rng.shuffle(order);
    double loss_total = 0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += options.batch_size) {
      const auto ptrs = pointers(data.train, order, begin, std::min(order.size(), begin + options.batch_size));
      const Batch b = make_batch(ptrs);
      const Tensor logits = forward(model, b.edges, b.readout, {true, &rng});
      const Tensor loss = cross_entropy_label_smoothed(logits, b.targets, options.label_smoothing);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        run.failed = true;
        run.failure = "non-finite-loss-at-epoch-" + std::to_string(epoch);
        break;
      }
      loss.backward();
      // Relations absent from a batch leave some parameters untouched.
      for (auto& p : model.params()) p.tensor.mutable_grad();
      adam_step(model.params(), {options.lr});
      loss_total += value;
      ++batches;
    }
    if (run.failed) break;

    EpochRecord rec{epoch, loss_total / static_cast<double>(std::max<std::size_t>(batches, 1)),
                    evaluate(model, data.validation, options.batch_size)};
    run.history.push_back(rec);
    if (options.log) write_epoch_record(*options.log, rec);
    if (run.best_epoch == 0 || rec.validation.node > run.best_validation.node) {
      run.best_epoch = epoch;
      run.best_validation = rec.validation;
      run.best_checkpoint = model.snapshot();
    }
    if (options.early_stopping && epoch >= options.min_epochs && epoch - run.best_epoch >= options.patience) {
      run.early_stopped = true;
      break;
    }
  }
  run.stopped_epoch = std::min(epoch, options.max_epochs);
  model.restore(run.best_checkpoint);
  for (auto& p : model.params()) p.tensor.zero_grad();
  if (options.evaluate_test && !data.test.empty()) run.test = evaluate(model, data.test, options.batch_size);
  if (options.log) write_result_record(*options.log, run);
  return run;
}

// ---------------------------------------------------------------------------
// Protocols

std::string to_string(const Hyper& h) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "dim=%zu dropout=%g lr=%g layers=%zu", h.dim, h.dropout, h.lr, h.layers);
  return buf;
}

std::size_t default_heads(std::size_t dim) { return dim % 4 == 0 ? 4 : 2; }

std::size_t recall_dim(std::size_t length) {
  if (length < 10) return 100;
  if (length == 10) return 120;
  return 200;
}

ModelConfig recall_model_config(ModelName m, std::size_t length, const Hyper& h) {
  ModelConfig c = ModelConfig::for_model(m);
  c.dim = h.dim ? h.dim : recall_dim(length);
  c.layers = h.layers ? h.layers : length + 1;
  c.heads = default_heads(c.dim);
  c.dropout = h.dropout;
  c.num_relations = recall_relations().size();
  c.num_symbols = kRecallSymbols;
  c.num_classes = recall_classes().size();
  c.validate();
  return c;
}

RecallResult protocol_conditional_recall(ModelName m, std::size_t length, const RecallOptions& opts) {
  if (length < 2) throw ConfigError("Conditional Recall length must be at least 2");
  RecallResult r;
  r.model = m;
  r.length = length;
  r.config = recall_model_config(m, length, opts.hyper);
  r.options.lr = opts.hyper.lr > 0 ? opts.hyper.lr : 1e-3;
  r.options.batch_size = opts.per_class > 20 ? 50 : 20;
  r.options.max_epochs = opts.max_epochs;
  r.options.seed = opts.seed;
  r.options.log = opts.log;
  if (opts.log) {
    *opts.log << "run task=recall model=" << to_string(m) << " length=" << length << " seed=" << opts.seed << ' '
              << to_string(Hyper{r.config.dim, r.config.dropout, r.options.lr, r.config.layers}) << '\n';
  }
  const Dataset data = gen_conditional_recall(length, opts.per_class, opts.seed);
  Model model(r.config, opts.seed);
  r.run = train(model, data, r.options);
  return r;
}

ModelConfig tree_max_model_config(ModelName m, const Hyper& h) {
  ModelConfig c = ModelConfig::for_model(m);
  c.dim = h.dim ? h.dim : 150;
  c.layers = h.layers ? h.layers : kTreeMaxLayers;
  c.heads = default_heads(c.dim);
  c.dropout = h.dropout;
  c.num_relations = tree_relations().size();
  c.num_symbols = kTreeMaxSymbols;
  c.num_classes = kTreeMaxClasses;
  c.validate();
  return c;
}

double tree_max_lr(ModelName m, const Hyper& h) {
  if (h.lr > 0) return h.lr;
  return m == ModelName::sggnn_rm_gat ? 0.00025 : 0.0005;
}

MeanStd mean_std(std::span<const double> xs) {
  MeanStd out;
  if (xs.empty()) return out;
  out.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0;
    for (double x : xs) ss += (x - out.mean) * (x - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return out;
}

TreeMaxResult protocol_tree_max(ModelName m, const TreeMaxOptions& opts) {
  TreeMaxResult r;
  r.model = m;
  r.config = tree_max_model_config(m, opts.hyper);
  r.seeds = opts.seeds;
  TrainOptions to;
  to.lr = tree_max_lr(m, opts.hyper);
  to.batch_size = opts.batch_size;
  to.max_epochs = opts.max_epochs;
  to.log = opts.log;
  std::vector<double> node, graph;
  for (std::uint64_t seed : opts.seeds) {
    if (opts.log) {
      *opts.log << "run task=treemax model=" << to_string(m) << " seed=" << seed << ' '
                << to_string(Hyper{r.config.dim, r.config.dropout, to.lr, r.config.layers}) << '\n';
    }
    const Dataset data = gen_tree_max(opts.trees, seed);
    Model model(r.config, seed);
    to.seed = seed;
    r.runs.push_back(train(model, data, to));
    const TrainRun& run = r.runs.back();
    if (run.failed) {
      ++r.failed;
      continue;
    }
    node.push_back(run.test.node);
    graph.push_back(run.test.graph);
  }
  r.node = mean_std(node);
  r.graph = mean_std(graph);
  return r;
}

// ---------------------------------------------------------------------------
// Sweep

std::vector<Hyper> enumerate_grid(const SweepSpec& spec) {
  std::vector<Hyper> grid;
  for (std::size_t d : spec.dims) {
    for (double p : spec.dropouts) {
      for (double lr : spec.lrs) {
        for (std::size_t k : spec.layers) grid.push_back({d, p, lr, k});
      }
    }
  }
  if (spec.max_candidates > 0 && spec.max_candidates < grid.size()) {
    std::vector<std::size_t> idx(grid.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(spec.search_seed);
    rng.shuffle(idx);
    idx.resize(spec.max_candidates);
    std::sort(idx.begin(), idx.end());
    std::vector<Hyper> picked;
    for (std::size_t i : idx) picked.push_back(grid[i]);
    grid = std::move(picked);
  }
  return grid;
}

SweepResult sweep(const SweepSpec& spec, const std::function<Accuracy(const Hyper&)>& score) {
  const auto grid = enumerate_grid(spec);
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  SweepResult r;
  std::size_t best = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    r.entries.push_back({grid[i], score(grid[i])});
    const auto& a = r.entries[i];
    const auto& b = r.entries[best];
    const bool better = a.validation.node > b.validation.node ||
                        (a.validation.node == b.validation.node &&
                         (a.hyper.dim < b.hyper.dim ||
                          (a.hyper.dim == b.hyper.dim && a.hyper.dropout < b.hyper.dropout)));
    if (i > 0 && better) best = i;
  }
  r.best = r.entries[best].hyper;
  return r;
}

SweepResult sweep_conditional_recall(ModelName m, std::size_t length, const SweepSpec& spec,
                                     std::size_t max_epochs) {
  return sweep(spec, [&](const Hyper& h) {
    RecallOptions o;
    o.seed = spec.search_seed;
    o.max_epochs = max_epochs;
    o.hyper = h;
    return protocol_conditional_recall(m, length, o).run.best_validation;
  });
}

SweepResult sweep_tree_max(ModelName m, const SweepSpec& spec, std::size_t trees, std::size_t max_epochs) {
  return sweep(spec, [&](const Hyper& h) {
    TreeMaxOptions o;
    o.seeds = {spec.search_seed};
    o.trees = trees;
    o.max_epochs = max_epochs;
    o.hyper = h;
    return protocol_tree_max(m, o).runs.front().best_validation;
  });
}

}  // namespace rgnn
