#include "rgnn/graph.hpp"

#include <algorithm>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "rgnn/errors.hpp"

namespace rgnn {

RelGraph::RelGraph(std::vector<std::int64_t> labels, std::vector<Edge> edges, std::vector<std::string> relations)
    : labels_(std::move(labels)), edges_(std::move(edges)), relations_(std::move(relations)) {
  const std::size_t n = labels_.size();
  for (const auto& e : edges_) {
    if (e.src >= n || e.dst >= n) {
      throw IndexError("edge " + std::to_string(e.src) + "->" + std::to_string(e.dst) + " outside " +
                       std::to_string(n) + " nodes");
    }
    if (e.rel >= relations_.size()) throw IndexError("edge relation id " + std::to_string(e.rel) + " unknown");
  }
  in_offsets_.assign(n + 1, 0);
  for (const auto& e : edges_) ++in_offsets_[e.dst + 1];
  std::partial_sum(in_offsets_.begin(), in_offsets_.end(), in_offsets_.begin());
  in_edges_.resize(edges_.size());
  std::vector<std::size_t> cursor(in_offsets_.begin(), in_offsets_.end() - 1);
  for (std::size_t i = 0; i < edges_.size(); ++i) in_edges_[cursor[edges_[i].dst]++] = i;
}

std::optional<std::size_t> RelGraph::relation_id(const std::string& name) const {
  auto it = std::find(relations_.begin(), relations_.end(), name);
  if (it == relations_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - relations_.begin());
}

std::span<const std::size_t> RelGraph::incoming_edges(std::size_t v) const {
  if (v >= num_nodes()) throw IndexError("node " + std::to_string(v) + " outside graph of " +
                                         std::to_string(num_nodes()) + " nodes");
  return std::span(in_edges_).subspan(in_offsets_[v], in_offsets_[v + 1] - in_offsets_[v]);
}

std::vector<Incoming> RelGraph::incoming(std::size_t v) const {
  std::vector<Incoming> out;
  for (auto id : incoming_edges(v)) out.push_back({edges_[id].src, edges_[id].rel});
  return out;
}

bool RelGraph::operator==(const RelGraph& other) const {
  return labels_ == other.labels_ && edges_ == other.edges_ && relations_ == other.relations_;
}

RelGraph add_self_edges(const RelGraph& g) {
  std::vector<std::string> relations = g.relations();
  std::size_t self = relations.size();
  if (auto id = g.relation_id(kSelfRelation)) {
    self = *id;
  } else {
    relations.emplace_back(kSelfRelation);
  }
  std::vector<Edge> edges = g.edges();
  for (std::size_t v = 0; v < g.num_nodes(); ++v) edges.push_back({v, v, self});
  return RelGraph(g.labels(), std::move(edges), std::move(relations));
}

void write_graph(std::ostream& os, const RelGraph& g) {
  os << "nodes=" << g.num_nodes() << " relations=" << g.num_relations() << '\n';
  for (std::size_t v = 0; v < g.num_nodes(); ++v) os << "node " << v << ' ' << g.labels()[v] << '\n';
  for (const auto& e : g.edges()) os << "edge " << e.src << ' ' << e.dst << ' ' << g.relations()[e.rel] << '\n';
}

std::string to_text(const RelGraph& g) {
  std::ostringstream os;
  write_graph(os, g);
  return os.str();
}

bool LineReader::peek(std::string& line) {
  if (!pending_) {
    std::string raw;
    while (std::getline(is_, raw)) {
      ++line_no_;
      if (!raw.empty() && raw.back() == '\r') raw.pop_back();
      auto first = raw.find_first_not_of(" \t");
      if (first == std::string::npos || raw[first] == '#') continue;
      pending_ = raw;
      pending_no_ = line_no_;
      break;
    }
    if (!pending_) return false;
  }
  line = *pending_;
  return true;
}

bool LineReader::next(std::string& line) {
  if (!peek(line)) return false;
  pending_.reset();
  line_no_ = pending_no_;
  return true;
}

RelGraph read_graph(LineReader& in, const std::vector<std::string>* vocab) {
  std::string line;
  if (!in.next(line)) throw ParseError("expected graph header", in.line_number());
  std::size_t n = 0, r = 0;
  {
    std::istringstream ls(line);
    std::string a, b;
    ls >> a >> b;
    if (a.rfind("nodes=", 0) != 0 || b.rfind("relations=", 0) != 0) {
      throw ParseError("expected 'nodes=N relations=R', got '" + line + "'", in.line_number());
    }
    try {
      n = std::stoul(a.substr(6));
      r = std::stoul(b.substr(10));
    } catch (const std::exception&) {
      throw ParseError("bad graph header '" + line + "'", in.line_number());
    }
  }
  std::vector<std::int64_t> labels(n, 0);
  std::vector<bool> seen(n, false);
  std::vector<std::string> relations = vocab ? *vocab : std::vector<std::string>{};
  std::vector<Edge> edges;
  while (in.peek(line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "node") {
      in.next(line);
      std::size_t id;
      std::int64_t sym;
      if (!(ls >> id >> sym) || id >= n) throw ParseError("bad node line '" + line + "'", in.line_number());
      labels[id] = sym;
      seen[id] = true;
    } else if (kind == "edge") {
      in.next(line);
      std::size_t s, d;
      std::string name;
      if (!(ls >> s >> d >> name) || s >= n || d >= n) {
        throw ParseError("bad edge line '" + line + "'", in.line_number());
      }
      auto it = std::find(relations.begin(), relations.end(), name);
      if (it == relations.end()) {
        if (vocab) throw ParseError("unknown relation '" + name + "'", in.line_number());
        relations.push_back(name);
        it = relations.end() - 1;
      }
      edges.push_back({s, d, static_cast<std::size_t>(it - relations.begin())});
    } else {
      break;
    }
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw ParseError("graph declares " + std::to_string(n) + " nodes but not all were listed", in.line_number());
  }
  if (vocab == nullptr && relations.size() < r) {
    // Relations without edges cannot be named from the text alone.
    for (std::size_t i = relations.size(); i < r; ++i) relations.push_back("rel" + std::to_string(i));
  }
  return RelGraph(std::move(labels), std::move(edges), std::move(relations));
}

RelGraph parse_graph(const std::string& text, const std::vector<std::string>* vocab) {
  std::istringstream is(text);
  LineReader reader(is);
  return read_graph(reader, vocab);
}

EdgeIndex EdgeIndex::build(const RelGraph& g) {
  const RelGraph* one[] = {&g};
  return build(std::span<const RelGraph* const>(one));
}

EdgeIndex EdgeIndex::build(std::span<const RelGraph* const> graphs) {
  EdgeIndex idx;
  if (graphs.empty()) return idx;
  idx.num_relations = graphs.front()->num_relations();
  std::vector<Edge> all;
  for (const RelGraph* g : graphs) {
    if (g->relations() != graphs.front()->relations()) {
      throw ConfigError("cannot batch graphs with different relation vocabularies");
    }
    idx.graph_offsets.push_back(idx.num_nodes);
    for (const auto& e : g->edges()) all.push_back({e.src + idx.num_nodes, e.dst + idx.num_nodes, e.rel});
    idx.labels.insert(idx.labels.end(), g->labels().begin(), g->labels().end());
    idx.num_nodes += g->num_nodes();
  }
  idx.graph_offsets.push_back(idx.num_nodes);
  std::stable_sort(all.begin(), all.end(), [](const Edge& a, const Edge& b) { return a.rel < b.rel; });
  idx.rel_offsets.assign(idx.num_relations + 1, 0);
  for (const auto& e : all) {
    idx.src.push_back(e.src);
    idx.dst.push_back(e.dst);
    idx.rel.push_back(e.rel);
    ++idx.rel_offsets[e.rel + 1];
  }
  std::partial_sum(idx.rel_offsets.begin(), idx.rel_offsets.end(), idx.rel_offsets.begin());

  const std::size_t r = idx.num_relations;
  std::vector<std::size_t> per_rel(idx.num_nodes * r, 0);
  std::vector<std::size_t> degree(idx.num_nodes, 0);
  for (const auto& e : all) {
    ++per_rel[e.dst * r + e.rel];
    ++degree[e.dst];
  }
  for (const auto& e : all) idx.rel_norm.push_back(1.0 / static_cast<double>(per_rel[e.dst * r + e.rel]));
  for (auto d : degree) idx.in_degree_inv.push_back(d ? 1.0 / static_cast<double>(d) : 0.0);
  return idx;
}

}  // namespace rgnn
