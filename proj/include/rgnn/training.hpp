#pragma once

// Mini-batch training with early stopping, the two experimental protocols
// (Conditional Recall, Tree Max) and a grid sweep over hyperparameters.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rgnn/models.hpp"
#include "rgnn/tasks.hpp"

namespace rgnn {

// Disjoint union of several instances: readout nodes and targets are shifted
// into the union's node numbering, in instance order.
struct Batch {
  EdgeIndex edges;
  std::vector<std::size_t> readout;
  std::vector<std::size_t> targets;
  std::vector<std::size_t> readout_offsets;  // first readout row of each instance, plus total
};

Batch make_batch(std::span<const TaskInstance* const> instances);

// Class per readout node, per instance.
std::vector<std::vector<std::size_t>> predict(const Model& model, std::span<const TaskInstance> instances,
                                              std::size_t batch_size = 20);
Accuracy evaluate(const Model& model, std::span<const TaskInstance> instances, std::size_t batch_size = 20);

struct TrainOptions {
  double lr = 1e-3;
  std::size_t batch_size = 20;
  double label_smoothing = 0.1;
  std::size_t max_epochs = 300;
  std::size_t patience = 10;
  std::size_t min_epochs = 20;
  bool early_stopping = true;
  std::uint64_t seed = 0;  // shuffling and dropout
  std::ostream* log = nullptr;  // run log records
  bool evaluate_test = true;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0;
  Accuracy validation;
};

struct TrainRun {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0 when no epoch finished
  Accuracy best_validation;
  std::vector<std::vector<double>> best_checkpoint;
  Accuracy test;
  std::size_t stopped_epoch = 0;
  bool early_stopped = false;
  bool failed = false;
  std::string failure;
};

// Trains in place. After return the model holds the best-validation weights.
// A non-finite loss ends the run with failed = true instead of throwing.
TrainRun train(Model& model, const Dataset& data, const TrainOptions& options);

void write_epoch_record(std::ostream& os, const EpochRecord& r);
void write_result_record(std::ostream& os, const TrainRun& run);

// ---------------------------------------------------------------------------
// Hyperparameters chosen per run. Zero means "protocol default".

struct Hyper {
  std::size_t dim = 0;
  double dropout = 0;
  double lr = 0;
  std::size_t layers = 0;
  bool operator==(const Hyper&) const = default;
};

std::string to_string(const Hyper& h);

// 4 heads when they divide D, else 2.
std::size_t default_heads(std::size_t dim);

// D = 100 below length 10, 120 at 10, 200 above.
std::size_t recall_dim(std::size_t length);
ModelConfig recall_model_config(ModelName m, std::size_t length, const Hyper& h = {});

struct RecallOptions {
  std::uint64_t seed = 0;
  std::size_t per_class = 20;
  std::size_t max_epochs = 300;
  Hyper hyper;
  std::ostream* log = nullptr;
};

struct RecallResult {
  ModelName model{};
  std::size_t length = 0;
  ModelConfig config;
  TrainOptions options;
  TrainRun run;
  double test_accuracy() const { return run.test.graph; }
};

// Batch size 20, or 50 when there are more than 20 examples per class.
RecallResult protocol_conditional_recall(ModelName m, std::size_t length, const RecallOptions& opts = {});

inline constexpr std::size_t kTreeMaxLayers = 17;

ModelConfig tree_max_model_config(ModelName m, const Hyper& h = {});
// 0.0005 by default; SGGNN-RM-GAT trains at 0.00025.
double tree_max_lr(ModelName m, const Hyper& h = {});

struct TreeMaxOptions {
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::size_t trees = 800;
  std::size_t max_epochs = 200;
  std::size_t batch_size = 20;
  Hyper hyper;
  std::ostream* log = nullptr;
};

struct MeanStd {
  double mean = 0;
  double std = 0;  // sample standard deviation; 0 for a single value
};
MeanStd mean_std(std::span<const double> xs);

struct TreeMaxResult {
  ModelName model{};
  ModelConfig config;
  std::vector<std::uint64_t> seeds;
  std::vector<TrainRun> runs;
  MeanStd node, graph;  // over runs that did not fail
  std::size_t failed = 0;
};

// One run per seed, each on its own dataset generated from that seed.
TreeMaxResult protocol_tree_max(ModelName m, const TreeMaxOptions& opts = {});

// ---------------------------------------------------------------------------
// Sweep

struct SweepSpec {
  std::vector<std::size_t> dims;
  std::vector<double> dropouts = {0.0};
  std::vector<double> lrs = {0.0};
  std::vector<std::size_t> layers = {0};
  std::uint64_t search_seed = 0;
  // When nonzero, a seeded random subset of this many grid points is tried.
  std::size_t max_candidates = 0;
};

// Grid in nested order: dims, dropouts, lrs, layers (last varies fastest).
std::vector<Hyper> enumerate_grid(const SweepSpec& spec);

struct SweepEntry {
  Hyper hyper;
  Accuracy validation;
};

struct SweepResult {
  Hyper best;
  std::vector<SweepEntry> entries;
};

// Highest validation node accuracy wins; ties go to smaller D, then lower dropout.
SweepResult sweep(const SweepSpec& spec, const std::function<Accuracy(const Hyper&)>& score);

SweepResult sweep_conditional_recall(ModelName m, std::size_t length, const SweepSpec& spec,
                                     std::size_t max_epochs = 300);
SweepResult sweep_tree_max(ModelName m, const SweepSpec& spec, std::size_t trees = 800,
                           std::size_t max_epochs = 200);

}  // namespace rgnn
