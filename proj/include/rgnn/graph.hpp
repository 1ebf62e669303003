#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rgnn {

inline constexpr const char* kSelfRelation = "SELF";

struct Edge {
  std::size_t src = 0;
  std::size_t dst = 0;
  std::size_t rel = 0;
  auto operator<=>(const Edge&) const = default;
};

struct Incoming {
  std::size_t src;
  std::size_t rel;
  bool operator==(const Incoming&) const = default;
};

// Multi-relational directed graph with integer node symbols. Immutable once
// built; a per-destination index is computed at construction. Parallel edges
// are kept.
class RelGraph {
 public:
  RelGraph() = default;
  RelGraph(std::vector<std::int64_t> labels, std::vector<Edge> edges, std::vector<std::string> relations);

  std::size_t num_nodes() const { return labels_.size(); }
  std::size_t num_edges() const { return edges_.size(); }
  std::size_t num_relations() const { return relations_.size(); }
  const std::vector<std::int64_t>& labels() const { return labels_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<std::string>& relations() const { return relations_; }
  std::optional<std::size_t> relation_id(const std::string& name) const;

  // Edges into v in insertion order.
  std::vector<Incoming> incoming(std::size_t v) const;
  // Edge ids into v in insertion order.
  std::span<const std::size_t> incoming_edges(std::size_t v) const;

  bool operator==(const RelGraph& other) const;

 private:
  std::vector<std::int64_t> labels_;
  std::vector<Edge> edges_;
  std::vector<std::string> relations_;
  std::vector<std::size_t> in_offsets_;
  std::vector<std::size_t> in_edges_;
};

// One (v, v, SELF) edge per node; SELF is appended to the vocabulary when absent.
RelGraph add_self_edges(const RelGraph& g);

// Text form:
//   nodes=N relations=R
//   node <id> <symbol>
//   edge <src> <dst> <relname>
void write_graph(std::ostream& os, const RelGraph& g);
std::string to_text(const RelGraph& g);

// Line cursor shared by the graph and dataset readers; tracks line numbers
// for error messages and skips blank lines and '#' comments.
class LineReader {
 public:
  explicit LineReader(std::istream& is) : is_(is) {}
  bool peek(std::string& line);
  bool next(std::string& line);
  std::size_t line_number() const { return line_no_; }

 private:
  std::istream& is_;
  std::optional<std::string> pending_;
  std::size_t line_no_ = 0;
  std::size_t pending_no_ = 0;
};

// Reads one graph record. Relation names resolve against `vocab` when given
// (unknown names are an error); otherwise ids follow first appearance.
RelGraph read_graph(LineReader& in, const std::vector<std::string>* vocab = nullptr);
RelGraph parse_graph(const std::string& text, const std::vector<std::string>* vocab = nullptr);

// Batched edge layout for message passing over one graph or the disjoint
// union of several. Edges are stably ordered by relation so each relation's
// edges form a contiguous block.
struct EdgeIndex {
  std::size_t num_nodes = 0;
  std::size_t num_relations = 0;
  std::vector<std::size_t> src;
  std::vector<std::size_t> dst;
  std::vector<std::size_t> rel;
  std::vector<std::size_t> rel_offsets;  // num_relations + 1 entries
  std::vector<std::int64_t> labels;      // node symbols
  std::vector<std::size_t> graph_offsets;  // first node of each member graph, plus total
  std::vector<double> rel_norm;  // per edge: 1 / |{incoming edges of dst with this relation}|
  std::vector<double> in_degree_inv;  // per node: 1 / incoming edge count (0 when isolated)

  std::size_t num_edges() const { return src.size(); }
  std::size_t relation_begin(std::size_t r) const { return rel_offsets[r]; }
  std::size_t relation_size(std::size_t r) const { return rel_offsets[r + 1] - rel_offsets[r]; }
  std::span<const std::size_t> src_of(std::size_t r) const {
    return std::span(src).subspan(rel_offsets[r], relation_size(r));
  }
  std::span<const std::size_t> dst_of(std::size_t r) const {
    return std::span(dst).subspan(rel_offsets[r], relation_size(r));
  }

  static EdgeIndex build(const RelGraph& g);
  // All graphs must share one relation vocabulary.
  static EdgeIndex build(std::span<const RelGraph* const> graphs);
};

}  // namespace rgnn
