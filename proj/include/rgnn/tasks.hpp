#pragma once

// Conditional Recall and Tree Max: generators, label oracles, graph encoders,
// metrics and the dataset text format.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rgnn/graph.hpp"
#include "rgnn/random.hpp"

namespace rgnn {

struct Target {
  std::size_t node = 0;
  std::size_t cls = 0;
  bool operator==(const Target&) const = default;
};

struct TaskInstance {
  RelGraph graph;
  std::vector<Target> targets;
  std::vector<std::size_t> readout;
  std::string meta;  // space-separated key=value generation parameters
  bool operator==(const TaskInstance&) const = default;
};

struct Dataset {
  std::string task;  // "recall" or "treemax"
  std::uint64_t seed = 0;
  std::string params;  // generation parameters, key=value
  std::vector<std::string> relations;
  std::vector<std::string> classes;
  std::size_t num_symbols = 0;
  std::vector<TaskInstance> train, validation, test;

  std::size_t size() const { return train.size() + validation.size() + test.size(); }
  bool operator==(const Dataset&) const = default;
};

// ---------------------------------------------------------------------------
// Conditional Recall

// Symbol ids: a–z → 0..25, A–Z → 26..51, 0–9 → 52..61.
inline constexpr std::size_t kRecallSymbols = 62;
std::int64_t recall_symbol(char c);  // InputError outside the alphabet
char recall_char(std::int64_t id);

// First digit if any, else first uppercase letter, else the first character.
char conditional_recall_label(std::string_view s);

// The 61 class symbols: a–z, A–Z, 1–9 (the digit 0 is not a class).
const std::vector<char>& recall_classes();
std::size_t recall_class_index(char c);  // InputError for non-class symbols

// Nodes per character with next/previous/SELF edges; reads out the last node.
TaskInstance seq_to_graph(std::string_view s);
const std::vector<std::string>& recall_relations();

// per_class strings for every class, split 80/10/10 within each class.
Dataset gen_conditional_recall(std::size_t length, std::size_t per_class, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Tree Max

// Rooted ordered tree; node 0 is the root, children follow their parent in
// breadth-first order.
struct Tree {
  std::vector<std::int64_t> labels;
  std::vector<std::vector<std::size_t>> children;

  std::size_t size() const { return labels.size(); }
  // Levels on the longest root-to-leaf path: (1 (2) (3)) has depth 2.
  std::size_t depth() const;
};

// Depth d ~ U{5..15} realised by a spine of 2- or 3-child nodes; other nodes
// draw 0, 2 or 3 children until level d. Labels U{1..100}.
Tree gen_tree(Rng& rng);
Tree gen_tree(std::uint64_t seed);

// Per node: the largest label in its subtree.
std::vector<std::int64_t> tree_max_label(const Tree& t);

// Hops a node must look down to be sure of its label: the height of its
// subtree, since any deeper descendant could have held a larger value.
std::vector<std::size_t> tree_hop_requirement(const Tree& t);

inline constexpr std::size_t kTreeMaxClasses = 100;
// Node symbol = label value (1..100); class id = value − 1.
inline constexpr std::size_t kTreeMaxSymbols = 101;

TaskInstance tree_to_graph(const Tree& t);
const std::vector<std::string>& tree_relations();

// 50/25/25 split of `count` trees, each drawn from a stream derived from (seed, index).
Dataset gen_tree_max(std::size_t count, std::uint64_t seed);

// Fraction of nodes that need at least `hops` propagation steps, recovered
// from the graph structure of each instance.
double hop_requirement_fraction(std::span<const TaskInstance> instances, std::size_t hops = 10);

// ---------------------------------------------------------------------------
// Metrics

struct Accuracy {
  double node = 0;
  double graph = 0;
};

// One prediction per readout node; ContractError on length mismatch.
Accuracy metrics(std::span<const std::size_t> predictions, const TaskInstance& instance);

// Node accuracy pooled over every readout node; graph accuracy averaged over instances.
struct AccuracyCounter {
  std::size_t nodes = 0, nodes_correct = 0, graphs = 0, graphs_correct = 0;
  void add(std::span<const std::size_t> predictions, const TaskInstance& instance);
  Accuracy value() const;
};

// ---------------------------------------------------------------------------
// Dataset text format:
//   dataset task=<t> seed=<s> symbols=<n> relations=<a,b,..> classes=<c,..> [params]
//   instance <split> <meta>
//   <graph record>
//   target <node> <class>
//   readout <n1,n2,...>

void write_dataset(std::ostream& os, const Dataset& d);
Dataset read_dataset(std::istream& is);
void write_dataset(const std::string& path, const Dataset& d);
Dataset read_dataset(const std::string& path);

}  // namespace rgnn
