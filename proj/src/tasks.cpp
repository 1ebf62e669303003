#include "rgnn/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "rgnn/errors.hpp"

namespace rgnn {

namespace {

bool is_digit(char c) { return c >= '0' && c <= '9'; }
bool is_upper(char c) { return c >= 'A' && c <= 'Z'; }
bool is_lower(char c) { return c >= 'a' && c <= 'z'; }

std::string join(const std::vector<std::string>& v, char sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? std::string(1, sep) : "") + v[i];
  return out;
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string::npos) return out;
    start = pos + 1;
  }
}

// Splits 80/10/10 (recall) or 50/25/25 (tree max) by rounding the smaller shares.
void split_counts(std::size_t n, double val_share, double test_share, std::size_t& n_train, std::size_t& n_val,
                  std::size_t& n_test) {
  n_val = static_cast<std::size_t>(static_cast<double>(n) * val_share + 0.5);
  n_test = static_cast<std::size_t>(static_cast<double>(n) * test_share + 0.5);
  if (n_val + n_test > n) n_val = n_test = 0;
  n_train = n - n_val - n_test;
}

}  // namespace

// ---------------------------------------------------------------------------
// Conditional Recall

std::int64_t recall_symbol(char c) {
  if (is_lower(c)) return c - 'a';
  if (is_upper(c)) return 26 + (c - 'A');
  if (is_digit(c)) return 52 + (c - '0');
  throw InputError(std::string("character '") + c + "' outside the a-z, A-Z, 0-9 alphabet");
}

char recall_char(std::int64_t id) {
  if (id < 0 || id >= static_cast<std::int64_t>(kRecallSymbols)) {
    throw InputError("symbol id " + std::to_string(id) + " outside the recall alphabet");
  }
  if (id < 26) return static_cast<char>('a' + id);
  if (id < 52) return static_cast<char>('A' + (id - 26));
  return static_cast<char>('0' + (id - 52));
}

char conditional_recall_label(std::string_view s) {
  if (s.empty()) throw InputError("conditional recall needs a nonempty string");
  for (char c : s) recall_symbol(c);
  for (char c : s) {
    if (is_digit(c)) return c;
  }
  for (char c : s) {
    if (is_upper(c)) return c;
  }
  return s.front();
}

const std::vector<char>& recall_classes() {
  static const std::vector<char> classes = [] {
    std::vector<char> v;
    for (char c = 'a'; c <= 'z'; ++c) v.push_back(c);
    for (char c = 'A'; c <= 'Z'; ++c) v.push_back(c);
    for (char c = '1'; c <= '9'; ++c) v.push_back(c);
    return v;
  }();
  return classes;
}

std::size_t recall_class_index(char c) {
  const auto& cs = recall_classes();
  const auto it = std::find(cs.begin(), cs.end(), c);
  if (it == cs.end()) throw InputError(std::string("'") + c + "' is not a class symbol");
  return static_cast<std::size_t>(it - cs.begin());
}

const std::vector<std::string>& recall_relations() {
  static const std::vector<std::string> rels{"next", "previous", kSelfRelation};
  return rels;
}

TaskInstance seq_to_graph(std::string_view s) {
  const char label = conditional_recall_label(s);
  std::vector<std::int64_t> labels;
  for (char c : s) labels.push_back(recall_symbol(c));
  std::vector<Edge> edges;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) {
    edges.push_back({i, i + 1, 0});
    edges.push_back({i + 1, i, 1});
  }
  TaskInstance t;
  t.graph = add_self_edges(RelGraph(std::move(labels), std::move(edges), recall_relations()));
  t.readout = {s.size() - 1};
  t.targets = {{s.size() - 1, recall_class_index(label)}};
  t.meta = "string=" + std::string(s);
  return t;
}

namespace {

// A string of the given length whose label is `c`: c sits at a uniform
// admissible position and earlier characters cannot take precedence over it.
std::string draw_recall_string(char c, std::size_t length, Rng& rng) {
  static const std::string lower = "abcdefghijklmnopqrstuvwxyz";
  static const std::string upper = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";
  static const std::string digits = "0123456789";
  std::string before, after;
  std::size_t pos = 0;
  if (is_digit(c)) {
    before = lower + upper;
    after = lower + upper + digits;
    pos = rng.below(length);
  } else if (is_upper(c)) {
    before = lower;
    after = lower + upper;
    pos = rng.below(length);
  } else {
    after = lower;
  }
  std::string s(length, c);
  for (std::size_t i = 0; i < length; ++i) {
    if (i < pos) s[i] = before[rng.below(before.size())];
    if (i > pos) s[i] = after[rng.below(after.size())];
  }
  return s;
}

}  // namespace

Dataset gen_conditional_recall(std::size_t length, std::size_t per_class, std::uint64_t seed) {
  if (length == 0) throw InputError("conditional recall length must be at least 1");
  Dataset d;
  d.task = "recall";
  d.seed = seed;
  d.params = "length=" + std::to_string(length) + " per_class=" + std::to_string(per_class);
  d.relations = recall_relations();
  for (char c : recall_classes()) d.classes.emplace_back(1, c);
  d.num_symbols = kRecallSymbols;
  std::size_t n_train = 0, n_val = 0, n_test = 0;
  split_counts(per_class, 0.1, 0.1, n_train, n_val, n_test);
  const auto& classes = recall_classes();
  for (std::size_t ci = 0; ci < classes.size(); ++ci) {
    Rng rng = Rng::derive(seed, ci);
    std::set<std::string> seen;
    std::vector<std::string> strings;
    for (std::size_t k = 0; k < per_class; ++k) {
      // Prefer distinct strings; short lengths may not have enough of them.
      std::string s = draw_recall_string(classes[ci], length, rng);
      for (int attempt = 0; attempt < 200 && seen.count(s); ++attempt) s = draw_recall_string(classes[ci], length, rng);
      seen.insert(s);
      strings.push_back(s);
    }
    for (std::size_t k = 0; k < strings.size(); ++k) {
      TaskInstance t = seq_to_graph(strings[k]);
      t.meta = "length=" + std::to_string(length) + " class=" + classes[ci] + " index=" + std::to_string(k) + " " +
               t.meta;
      auto& split = k < n_train ? d.train : (k < n_train + n_val ? d.validation : d.test);
      split.push_back(std::move(t));
    }
  }
  Rng order = Rng::derive(seed, classes.size());
  order.shuffle(d.train);
  order.shuffle(d.validation);
  order.shuffle(d.test);
  return d;
}

// ---------------------------------------------------------------------------
// Tree Max

std::size_t Tree::depth() const {
  if (labels.empty()) return 0;
  std::vector<std::size_t> level(size(), 1);
  std::size_t deepest = 1;
  for (std::size_t v = 0; v < size(); ++v) {
    for (std::size_t c : children[v]) {
      level[c] = level[v] + 1;
      deepest = std::max(deepest, level[c]);
    }
  }
  return deepest;
}

Tree gen_tree(Rng& rng) {
  const std::size_t target_depth = static_cast<std::size_t>(rng.between(5, 15));
  Tree t;
  std::vector<std::size_t> depth;
  std::vector<bool> spine;
  auto add = [&](std::size_t d, bool on_spine) {
    t.labels.push_back(rng.between(1, 100));
    t.children.emplace_back();
    depth.push_back(d);
    spine.push_back(on_spine);
    return t.labels.size() - 1;
  };
  add(1, true);
  static constexpr std::size_t kChoices[] = {0, 2, 3};
  for (std::size_t v = 0; v < t.size(); ++v) {
    if (depth[v] == target_depth) continue;
    std::size_t n = 0;
    std::size_t spine_child = 0;
    if (spine[v]) {
      n = rng.bernoulli(0.5) ? 2 : 3;
      spine_child = rng.below(n);
    } else {
      n = kChoices[rng.below(3)];
    }
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = add(depth[v] + 1, spine[v] && i == spine_child);
      t.children[v].push_back(c);
    }
  }
  return t;
}

Tree gen_tree(std::uint64_t seed) {
  Rng rng(seed);
  return gen_tree(rng);
}

std::vector<std::int64_t> tree_max_label(const Tree& t) {
  std::vector<std::int64_t> best = t.labels;
  for (std::size_t v = t.size(); v-- > 0;) {
    for (std::size_t c : t.children[v]) best[v] = std::max(best[v], best[c]);
  }
  return best;
}

std::vector<std::size_t> tree_hop_requirement(const Tree& t) {
  std::vector<std::size_t> height(t.size(), 0);
  for (std::size_t v = t.size(); v-- > 0;) {
    for (std::size_t c : t.children[v]) height[v] = std::max(height[v], height[c] + 1);
  }
  return height;
}

const std::vector<std::string>& tree_relations() {
  static const std::vector<std::string> rels{"CHILD-1",    "CHILD-2",    "CHILD-3", "CHILD-1-OF",
                                             "CHILD-2-OF", "CHILD-3-OF", kSelfRelation};
  return rels;
}

TaskInstance tree_to_graph(const Tree& t) {
  std::vector<Edge> edges;
  for (std::size_t v = 0; v < t.size(); ++v) {
    if (t.children[v].size() > 3) {
      throw InputError("node " + std::to_string(v) + " has " + std::to_string(t.children[v].size()) +
                       " children; at most 3 are encodable");
    }
    for (std::size_t i = 0; i < t.children[v].size(); ++i) {
      edges.push_back({v, t.children[v][i], i});
      edges.push_back({t.children[v][i], v, 3 + i});
    }
  }
  TaskInstance inst;
  inst.graph = add_self_edges(RelGraph(t.labels, std::move(edges), tree_relations()));
  const auto best = tree_max_label(t);
  for (std::size_t v = 0; v < t.size(); ++v) {
    if (best[v] < 1 || best[v] > static_cast<std::int64_t>(kTreeMaxClasses)) {
      throw InputError("tree label " + std::to_string(best[v]) + " outside 1..100");
    }
    inst.readout.push_back(v);
    inst.targets.push_back({v, static_cast<std::size_t>(best[v] - 1)});
  }
  return inst;
}

Dataset gen_tree_max(std::size_t count, std::uint64_t seed) {
  Dataset d;
  d.task = "treemax";
  d.seed = seed;
  d.params = "count=" + std::to_string(count);
  d.relations = tree_relations();
  for (std::size_t c = 1; c <= kTreeMaxClasses; ++c) d.classes.push_back(std::to_string(c));
  d.num_symbols = kTreeMaxSymbols;
  std::size_t n_train = 0, n_val = 0, n_test = 0;
  split_counts(count, 0.25, 0.25, n_train, n_val, n_test);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = Rng::derive(seed, i);
    const Tree t = gen_tree(rng);
    TaskInstance inst = tree_to_graph(t);
    inst.meta = "index=" + std::to_string(i) + " depth=" + std::to_string(t.depth());
    auto& split = i < n_train ? d.train : (i < n_train + n_val ? d.validation : d.test);
    split.push_back(std::move(inst));
  }
  return d;
}

double hop_requirement_fraction(std::span<const TaskInstance> instances, std::size_t hops) {
  std::size_t total = 0, far = 0;
  for (const auto& inst : instances) {
    const RelGraph& g = inst.graph;
    Tree t;
    t.labels = g.labels();
    t.children.assign(g.num_nodes(), {});
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> numbered(g.num_nodes());
    for (const auto& e : g.edges()) {
      const std::string& r = g.relations()[e.rel];
      if (r.rfind("CHILD-", 0) == 0 && r.find("-OF") == std::string::npos) {
        numbered[e.src].push_back({static_cast<std::size_t>(std::stoul(r.substr(6))), e.dst});
      }
    }
    for (std::size_t v = 0; v < g.num_nodes(); ++v) {
      std::sort(numbered[v].begin(), numbered[v].end());
      for (const auto& [_, c] : numbered[v]) {
        if (c <= v) throw InputError("tree instance is not in breadth-first order");
        t.children[v].push_back(c);
      }
    }
    for (std::size_t h : tree_hop_requirement(t)) {
      ++total;
      if (h >= hops) ++far;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(far) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Metrics

Accuracy metrics(std::span<const std::size_t> predictions, const TaskInstance& instance) {
  AccuracyCounter c;
  c.add(predictions, instance);
  return c.value();
}

void AccuracyCounter::add(std::span<const std::size_t> predictions, const TaskInstance& instance) {
  if (predictions.size() != instance.targets.size()) {
    throw ContractError("got " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(instance.targets.size()) + " targets");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) correct += predictions[i] == instance.targets[i].cls;
  nodes += predictions.size();
  nodes_correct += correct;
  graphs += 1;
  graphs_correct += correct == predictions.size();
}

Accuracy AccuracyCounter::value() const {
  if (graphs == 0) return {};
  return {static_cast<double>(nodes_correct) / static_cast<double>(nodes),
          static_cast<double>(graphs_correct) / static_cast<double>(graphs)};
}

// ---------------------------------------------------------------------------
// Dataset text format

void write_dataset(std::ostream& os, const Dataset& d) {
  os << "dataset task=" << d.task << " seed=" << d.seed << " symbols=" << d.num_symbols
     << " relations=" << join(d.relations, ',') << " classes=" << join(d.classes, ',');
  if (!d.params.empty()) os << ' ' << d.params;
  os << '\n';
  auto emit = [&](const char* split, const std::vector<TaskInstance>& v) {
    for (const auto& inst : v) {
      os << "instance " << split;
      if (!inst.meta.empty()) os << ' ' << inst.meta;
      os << '\n';
      write_graph(os, inst.graph);
      for (const auto& t : inst.targets) os << "target " << t.node << ' ' << t.cls << '\n';
      os << "readout ";
      for (std::size_t i = 0; i < inst.readout.size(); ++i) os << (i ? "," : "") << inst.readout[i];
      os << '\n';
    }
  };
  emit("train", d.train);
  emit("validation", d.validation);
  emit("test", d.test);
  if (!os) throw IoError("failed to write dataset");
}

Dataset read_dataset(std::istream& is) {
  LineReader in(is);
  std::string line;
  if (!in.next(line) || line.rfind("dataset ", 0) != 0) {
    throw ParseError("expected a 'dataset' preamble", in.line_number());
  }
  Dataset d;
  {
    std::istringstream ls(line.substr(8));
    std::string tok;
    std::vector<std::string> extra;
    while (ls >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw ParseError("bad preamble field '" + tok + "'", in.line_number());
      const std::string k = tok.substr(0, eq), v = tok.substr(eq + 1);
      try {
        if (k == "task") {
          d.task = v;
        } else if (k == "seed") {
          d.seed = std::stoull(v);
        } else if (k == "symbols") {
          d.num_symbols = std::stoul(v);
        } else if (k == "relations") {
          d.relations = split_on(v, ',');
        } else if (k == "classes") {
          d.classes = split_on(v, ',');
        } else {
          extra.push_back(tok);
        }
      } catch (const std::logic_error&) {
        throw ParseError("bad preamble value '" + tok + "'", in.line_number());
      }
    }
    d.params = join(extra, ' ');
  }
  while (in.next(line)) {
    if (line.rfind("instance ", 0) != 0) throw ParseError("expected an 'instance' line", in.line_number());
    std::string rest = line.substr(9);
    const auto sp = rest.find(' ');
    const std::string split = rest.substr(0, sp);
    TaskInstance inst;
    inst.meta = sp == std::string::npos ? "" : rest.substr(sp + 1);
    std::vector<TaskInstance>* dst = split == "train"        ? &d.train
                                     : split == "validation" ? &d.validation
                                     : split == "test"       ? &d.test
                                                             : nullptr;
    if (!dst) throw ParseError("unknown split '" + split + "'", in.line_number());
    inst.graph = read_graph(in, &d.relations);
    while (in.peek(line) && line.rfind("target ", 0) == 0) {
      in.next(line);
      std::istringstream ls(line.substr(7));
      Target t;
      std::string trailing;
      if (!(ls >> t.node >> t.cls) || (ls >> trailing) || t.node >= inst.graph.num_nodes() ||
          t.cls >= d.classes.size()) {
        throw ParseError("bad target line '" + line + "'", in.line_number());
      }
      inst.targets.push_back(t);
    }
    if (!in.next(line) || line.rfind("readout ", 0) != 0) {
      throw ParseError("expected a 'readout' line", in.line_number());
    }
    for (const auto& tok : split_on(line.substr(8), ',')) {
      std::size_t v = 0;
      try {
        std::size_t used = 0;
        v = std::stoul(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::logic_error&) {
        throw ParseError("bad readout node '" + tok + "'", in.line_number());
      }
      if (v >= inst.graph.num_nodes()) throw ParseError("readout node outside graph", in.line_number());
      inst.readout.push_back(v);
    }
    dst->push_back(std::move(inst));
  }
  return d;
}

void write_dataset(const std::string& path, const Dataset& d) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  write_dataset(os, d);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  return read_dataset(is);
}

}  // namespace rgnn
