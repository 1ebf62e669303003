#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "rgnn/errors.hpp"
#include "rgnn/training.hpp"

using namespace rgnn;

namespace {

// A few recall instances per split, small enough to train in well under a second.
Dataset tiny_recall(std::size_t length, std::size_t n, std::uint64_t seed) {
  Dataset d = gen_conditional_recall(length, 10, seed);
  d.train.resize(n);
  d.validation.resize(n);
  d.test.resize(n);
  return d;
}

ModelConfig tiny_config(ModelName m, std::size_t length) {
  ModelConfig c = recall_model_config(m, length);
  c.dim = 16;
  c.heads = 2;
  c.embed_dim = 8;
  c.d_star = 8;
  return c;
}

TrainOptions quiet(std::size_t epochs) {
  TrainOptions o;
  o.max_epochs = epochs;
  o.early_stopping = false;
  return o;
}

// Index of the first differing scalar as "tensor:entry", or empty when equal.
std::string first_difference(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.size() != b.size()) return "tensor count";
  for (std::size_t t = 0; t < a.size(); ++t) {
    if (a[t].size() != b[t].size()) return std::to_string(t) + ":size";
    for (std::size_t i = 0; i < a[t].size(); ++i)
      if (!(a[t][i] == b[t][i])) return std::to_string(t) + ":" + std::to_string(i);
  }
  return "";
}

}  // namespace

TEST(Batch, OffsetsAndTargetsFollowInstances) {
  const Dataset d = tiny_recall(3, 3, 1);
  const std::vector<const TaskInstance*> ptrs{&d.train[0], &d.train[1], &d.train[2]};
  const Batch b = make_batch(ptrs);
  ASSERT_EQ(b.readout_offsets.size(), 4u);
  EXPECT_EQ(b.readout_offsets.front(), 0u);
  EXPECT_EQ(b.readout_offsets.back(), b.readout.size());
  std::size_t base = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& inst = *ptrs[i];
    ASSERT_EQ(b.readout_offsets[i + 1] - b.readout_offsets[i], inst.readout.size());
    for (std::size_t r = 0; r < inst.readout.size(); ++r) {
      EXPECT_EQ(b.readout[b.readout_offsets[i] + r], base + inst.readout[r]);
      EXPECT_EQ(b.targets[b.readout_offsets[i] + r], inst.targets[r].cls);
    }
    base += inst.graph.num_nodes();
  }
  EXPECT_EQ(b.edges.num_nodes, base);
}

TEST(Batch, ReadoutWithoutTargetIsAContractError) {
  Dataset d = tiny_recall(3, 1, 2);
  d.train[0].targets.clear();
  const std::vector<const TaskInstance*> ptrs{&d.train[0]};
  EXPECT_THROW(make_batch(ptrs), ContractError);
}

TEST(Train, SingleBatchOverfitReachesFullAccuracy) {
  Dataset d = tiny_recall(3, 20, 3);
  d.validation = d.train;
  Model model(recall_model_config(ModelName::sggnn_rv_gat, 3), 3);
  TrainOptions o = quiet(200);
  o.evaluate_test = false;
  const TrainRun run = train(model, d, o);
  ASSERT_FALSE(run.failed) << run.failure;
  EXPECT_DOUBLE_EQ(run.best_validation.node, 1.0);
  EXPECT_DOUBLE_EQ(evaluate(model, d.train).node, 1.0);
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  const Dataset d = tiny_recall(3, 10, 4);
  Model model(tiny_config(ModelName::ggnn, 3), 4);
  const auto before = model.snapshot();
  TrainOptions o = quiet(2);
  o.lr = 0.0;
  const TrainRun run = train(model, d, o);
  ASSERT_FALSE(run.failed);
  EXPECT_EQ(first_difference(model.snapshot(), before), "");
}

TEST(Train, SmoothedLossNeverBelowTargetEntropy) {
  const Dataset d = tiny_recall(3, 20, 5);
  Model model(tiny_config(ModelName::sggnn_rv_gat, 3), 5);
  TrainOptions o = quiet(30);
  o.lr = 1e-2;
  const TrainRun run = train(model, d, o);
  const double c = static_cast<double>(recall_classes().size());
  const double off = o.label_smoothing / c;
  const double on = 1.0 - o.label_smoothing + off;
  const double entropy = -on * std::log(on) - (c - 1.0) * off * std::log(off);
  for (const auto& e : run.history) EXPECT_GE(e.loss, entropy - 1e-12) << "epoch " << e.epoch;
}

TEST(Train, SameSeedSameRun) {
  const Dataset d = tiny_recall(3, 10, 6);
  ModelConfig c = tiny_config(ModelName::sggnn_rv_gat, 3);
  c.dropout = 0.2;
  Model a(c, 6), b(c, 6);
  TrainOptions o = quiet(3);
  o.seed = 11;
  const TrainRun ra = train(a, d, o), rb = train(b, d, o);
  ASSERT_EQ(ra.history.size(), rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) EXPECT_EQ(ra.history[i].loss, rb.history[i].loss);
  EXPECT_EQ(first_difference(a.snapshot(), b.snapshot()), "");
}

TEST(Train, EarlyStoppingRespectsPatienceAndMinimum) {
  const Dataset d = tiny_recall(3, 10, 7);
  Model model(tiny_config(ModelName::rgcn, 3), 7);
  TrainOptions o;
  o.max_epochs = 60;
  o.patience = 3;
  o.min_epochs = 5;
  o.lr = 5e-2;
  const TrainRun run = train(model, d, o);
  ASSERT_FALSE(run.failed);
  ASSERT_EQ(run.history.size(), run.stopped_epoch);
  // Replay the rule: best is the last strict improvement; stop at the first
  // epoch past the minimum whose distance from best reaches the patience.
  std::size_t best = 0;
  double best_val = -1;
  for (const auto& e : run.history) {
    if (e.validation.node > best_val) {
      best_val = e.validation.node;
      best = e.epoch;
    }
    const bool stop = e.epoch >= o.min_epochs && e.epoch - best >= o.patience;
    if (e.epoch < run.stopped_epoch) EXPECT_FALSE(stop) << "epoch " << e.epoch;
    else EXPECT_EQ(stop, run.early_stopped);
  }
  EXPECT_EQ(run.best_epoch, best);
  EXPECT_GE(run.stopped_epoch, o.min_epochs);
}

TEST(Train, BestCheckpointIsRestoredAndDominatesHistory) {
  const Dataset d = tiny_recall(3, 10, 8);
  Model model(tiny_config(ModelName::sggnn_rv_gat, 3), 8);
  TrainOptions o = quiet(12);
  o.lr = 1e-2;
  const TrainRun run = train(model, d, o);
  for (const auto& e : run.history) EXPECT_LE(e.validation.node, run.best_validation.node);
  EXPECT_EQ(first_difference(model.snapshot(), run.best_checkpoint), "");
  EXPECT_DOUBLE_EQ(evaluate(model, d.validation).node, run.best_validation.node);
}

TEST(Train, NonFiniteLossFlagsTheRun) {
  const Dataset d = tiny_recall(3, 10, 9);
  Model model(tiny_config(ModelName::ggnn, 3), 9);
  auto values = model.snapshot();
  values.back().front() = std::numeric_limits<double>::quiet_NaN();
  model.restore(values);
  std::ostringstream log;
  TrainOptions o = quiet(5);
  o.log = &log;
  const TrainRun run = train(model, d, o);
  EXPECT_TRUE(run.failed);
  EXPECT_FALSE(run.failure.empty());
  EXPECT_NE(log.str().find("failed"), std::string::npos);
}

TEST(Train, LogRecordsOneLinePerEpochAndAResult) {
  const Dataset d = tiny_recall(3, 5, 10);
  Model model(tiny_config(ModelName::rgcn, 3), 10);
  std::ostringstream log;
  TrainOptions o = quiet(3);
  o.log = &log;
  train(model, d, o);
  std::istringstream in(log.str());
  std::string line;
  std::size_t epochs = 0, results = 0;
  while (std::getline(in, line)) {
    if (line.rfind("epoch ", 0) == 0) ++epochs;
    if (line.rfind("result ", 0) == 0) ++results;
  }
  EXPECT_EQ(epochs, 3u);
  EXPECT_EQ(results, 1u);
}

TEST(Protocol, RecallConfiguration) {
  for (std::size_t len : {3u, 7u, 10u, 20u}) {
    const ModelConfig c = recall_model_config(ModelName::sggnn_rv_gat, len);
    EXPECT_EQ(c.layers, len + 1);
    EXPECT_EQ(c.num_relations, 3u);
    EXPECT_EQ(c.num_symbols, kRecallSymbols);
    EXPECT_EQ(c.num_classes, 61u);
  }
  EXPECT_EQ(recall_dim(7), 100u);
  EXPECT_EQ(recall_dim(10), 120u);
  EXPECT_EQ(recall_dim(11), 200u);
  EXPECT_EQ(default_heads(100), 4u);
  EXPECT_EQ(default_heads(150), 2u);
  Hyper h;
  h.dim = 64;
  h.layers = 2;
  const ModelConfig o = recall_model_config(ModelName::ggnn, 5, h);
  EXPECT_EQ(o.dim, 64u);
  EXPECT_EQ(o.layers, 2u);
  EXPECT_THROW(protocol_conditional_recall(ModelName::ggnn, 1), ConfigError);
}

TEST(Protocol, TreeMaxConfiguration) {
  const ModelConfig c = tree_max_model_config(ModelName::rgat);
  EXPECT_EQ(c.layers, kTreeMaxLayers);
  EXPECT_EQ(c.num_relations, 7u);
  EXPECT_EQ(c.num_symbols, 101u);
  EXPECT_EQ(c.num_classes, 100u);
  EXPECT_DOUBLE_EQ(tree_max_lr(ModelName::sggnn_rv_gat), 0.0005);
  EXPECT_DOUBLE_EQ(tree_max_lr(ModelName::sggnn_rm_gat), 0.00025);
}

TEST(Protocol, MeanStd) {
  const std::vector<double> one{0.7};
  EXPECT_DOUBLE_EQ(mean_std(one).mean, 0.7);
  EXPECT_DOUBLE_EQ(mean_std(one).std, 0.0);
  const std::vector<double> xs{1.0, 2.0, 3.0, 4.0};
  EXPECT_DOUBLE_EQ(mean_std(xs).mean, 2.5);
  EXPECT_NEAR(mean_std(xs).std, std::sqrt(5.0 / 3.0), 1e-15);
}

TEST(Protocol, TinyRecallRunIsLoggedAndDeterministic) {
  RecallOptions o;
  o.per_class = 5;
  o.max_epochs = 2;
  o.hyper.dim = 8;
  std::ostringstream la, lb;
  o.log = &la;
  const RecallResult a = protocol_conditional_recall(ModelName::rgcn, 3, o);
  o.log = &lb;
  const RecallResult b = protocol_conditional_recall(ModelName::rgcn, 3, o);
  EXPECT_EQ(la.str(), lb.str());
  EXPECT_EQ(la.str().rfind("run task=recall model=RGCN length=3 seed=0", 0), 0u);
  EXPECT_EQ(a.config.layers, 4u);
  EXPECT_EQ(a.options.batch_size, 20u);
  EXPECT_EQ(a.test_accuracy(), b.test_accuracy());
}

TEST(Sweep, GridOrderAndSubset) {
  SweepSpec s;
  s.dims = {10, 20};
  s.dropouts = {0.0, 0.5};
  s.layers = {1, 2};
  const auto grid = enumerate_grid(s);
  ASSERT_EQ(grid.size(), 8u);
  EXPECT_EQ(grid[0], (Hyper{10, 0.0, 0.0, 1}));
  EXPECT_EQ(grid[1], (Hyper{10, 0.0, 0.0, 2}));
  EXPECT_EQ(grid[7], (Hyper{20, 0.5, 0.0, 2}));
  s.max_candidates = 3;
  const auto sub = enumerate_grid(s);
  ASSERT_EQ(sub.size(), 3u);
  EXPECT_EQ(sub, enumerate_grid(s));
  for (std::size_t i = 1; i < sub.size(); ++i) {
    const auto pos = [&](const Hyper& h) { return std::find(grid.begin(), grid.end(), h) - grid.begin(); };
    EXPECT_LT(pos(sub[i - 1]), pos(sub[i]));
  }
}

TEST(Sweep, SingleCandidateIsChosen) {
  SweepSpec s;
  s.dims = {32};
  std::size_t calls = 0;
  const SweepResult r = sweep(s, [&](const Hyper&) {
    ++calls;
    return Accuracy{0.1, 0.1};
  });
  EXPECT_EQ(calls, 1u);
  EXPECT_EQ(r.best.dim, 32u);
  ASSERT_EQ(r.entries.size(), 1u);
}

TEST(Sweep, TiesPreferSmallerDimThenLowerDropout) {
  SweepSpec s;
  s.dims = {40, 20};
  s.dropouts = {0.3, 0.1};
  const SweepResult flat = sweep(s, [](const Hyper&) { return Accuracy{0.5, 0.5}; });
  EXPECT_EQ(flat.best.dim, 20u);
  EXPECT_DOUBLE_EQ(flat.best.dropout, 0.1);
  const SweepResult peaked = sweep(s, [](const Hyper& h) { return Accuracy{h.dim == 40 && h.dropout > 0.2 ? 0.9 : 0.5, 0}; });
  EXPECT_EQ(peaked.best.dim, 40u);
  EXPECT_DOUBLE_EQ(peaked.best.dropout, 0.3);
}
