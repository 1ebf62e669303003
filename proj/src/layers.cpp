#include "rgnn/layers.hpp"

#include <cmath>

#include "rgnn/errors.hpp"

namespace rgnn {

namespace {

void require_edges(const EdgeIndex& edges, const char* op) {
  if (edges.num_edges() == 0) throw ContractError(std::string(op) + ": graph has no edges");
}

void require_rows(const Tensor& states, const EdgeIndex& edges, const char* op) {
  if (states.rank() != 2 || states.rows() != edges.num_nodes) {
    throw DimensionError(std::string(op) + ": states " + shape_str(states.shape()) + " do not match " +
                         std::to_string(edges.num_nodes) + " nodes");
  }
}

// Applies `fn(block_src_rows, relation)` to every nonempty relation block and
// stacks the results in EdgeIndex order.
template <class Fn>
Tensor per_relation(const EdgeIndex& edges, std::size_t available, Fn&& fn) {
  std::vector<Tensor> blocks;
  for (std::size_t r = 0; r < edges.num_relations; ++r) {
    if (edges.relation_size(r) == 0) continue;
    if (r >= available) throw ConfigError("no parameters for relation " + std::to_string(r));
    blocks.push_back(fn(edges.src_of(r), r));
  }
  return concat(blocks, 0);
}

Tensor gate(const Tensor& hbar, const Tensor& h, const Tensor& w, const Tensor& u, const Tensor& b) {
  return add(linear(hbar, w), linear(h, u, b));
}

}  // namespace

// ---------------------------------------------------------------------------
// Message functions

Tensor mu_mm(const Tensor& states, const EdgeIndex& edges, const RelationTable& table) {
  require_rows(states, edges, "mu_mm");
  require_edges(edges, "mu_mm");
  return per_relation(edges, table.matrices.size(), [&](std::span<const std::size_t> src, std::size_t r) {
    return linear(gather_rows(states, src), table.matrices[r]);
  });
}

Tensor mu_mm_red(const Tensor& states, const EdgeIndex& edges, const RelationTable& table) {
  require_rows(states, edges, "mu_mm_red");
  require_edges(edges, "mu_mm_red");
  if (!table.reduce_in.defined() || !table.reduce_out.defined()) {
    throw ConfigError("mu_mm_red: relation table has no reduction matrices");
  }
  const std::size_t d_star = table.reduce_in.rows();
  if (table.reduce_in.cols() != states.cols() || table.reduce_out.shape() != Shape{states.cols(), d_star}) {
    throw ConfigError("mu_mm_red: reduction matrices " + shape_str(table.reduce_in.shape()) + " / " +
                      shape_str(table.reduce_out.shape()) + " do not fit states " + shape_str(states.shape()));
  }
  Tensor reduced = linear(states, table.reduce_in);
  Tensor mixed = per_relation(edges, table.reduced.size(), [&](std::span<const std::size_t> src, std::size_t r) {
    if (table.reduced[r].shape() != Shape{d_star, d_star}) {
      throw ConfigError("mu_mm_red: relation matrix " + std::to_string(r) + " is not " + std::to_string(d_star) +
                        "×" + std::to_string(d_star));
    }
    return linear(gather_rows(reduced, src), table.reduced[r]);
  });
  return linear(mixed, table.reduce_out);
}

Tensor mu_gcm(const Tensor& states, const EdgeIndex& edges, const RelationTable& table, const GcmParams& params) {
  require_rows(states, edges, "mu_gcm");
  require_edges(edges, "mu_gcm");
  const std::size_t d = states.cols();
  if (!table.vectors.defined() || table.vectors.rows() < edges.num_relations) {
    throw ConfigError("mu_gcm: missing relation vectors");
  }
  // W_A [h_u; a] = W_A[:, :D] h_u + W_A[:, D:] a, evaluated per node and per relation.
  Tensor from_state = linear(states, slice_cols(params.w_a, 0, d));
  Tensor from_relation = linear(table.vectors, slice_cols(params.w_a, d, d), params.b_a);
  Tensor c = celu(add(gather_rows(from_state, edges.src), gather_rows(from_relation, edges.rel)));
  Tensor m = sigmoid(linear(c, params.w_m, params.b_m));
  Tensor u = linear(c, params.w_b, params.b_b);
  Tensor h_u = gather_rows(states, edges.src);
  return add(mul(m, h_u), mul(one_minus(m), u));
}

// ---------------------------------------------------------------------------
// Aggregations

Tensor gamma_sum(const Tensor& messages, const EdgeIndex& edges) {
  require_edges(edges, "gamma_sum");
  return segment_sum(messages, edges.dst, edges.num_nodes);
}

Tensor gamma_mean(const Tensor& messages, const EdgeIndex& edges) {
  require_edges(edges, "gamma_mean");
  for (double inv : edges.in_degree_inv) {
    if (inv == 0.0) throw ContractError("gamma_mean: node without incoming messages");
  }
  return scale_rows(segment_sum(messages, edges.dst, edges.num_nodes), edges.in_degree_inv);
}

Tensor gamma_relation_mean(const Tensor& messages, const EdgeIndex& edges) {
  require_edges(edges, "gamma_relation_mean");
  return segment_sum(scale_rows(messages, edges.rel_norm), edges.dst, edges.num_nodes);
}

Tensor gamma_rv_gat(const Tensor& states, const Tensor& messages, const EdgeIndex& edges, const RelationTable& table,
                    const AttnParams& params, Tensor* attention) {
  require_rows(states, edges, "gamma_rv_gat");
  require_edges(edges, "gamma_rv_gat");
  const std::size_t d = states.cols();
  if (params.heads == 0 || d % params.heads != 0) {
    throw ConfigError("gamma_rv_gat: " + std::to_string(params.heads) + " heads do not divide D=" + std::to_string(d));
  }
  if (!table.vectors.defined()) throw ConfigError("gamma_rv_gat: missing relation vectors");
  Tensor query = gather_rows(linear(states, params.query), edges.dst);
  Tensor key = add(linear(messages, slice_cols(params.key, 0, d)),
                   gather_rows(linear(table.vectors, slice_cols(params.key, d, d)), edges.rel));
  const double factor = 1.0 / std::sqrt(static_cast<double>(d / params.heads));
  Tensor alpha = segment_softmax(head_dot(query, key, params.heads, factor), edges.dst, edges.num_nodes);
  if (attention != nullptr) *attention = alpha;
  return segment_sum(head_scale(messages, alpha), edges.dst, edges.num_nodes);
}

Tensor rgat_attention(const Tensor& states, const EdgeIndex& edges, const RgatParams& params, Tensor* attention) {
  require_rows(states, edges, "rgat_attention");
  require_edges(edges, "rgat_attention");
  const std::size_t d = states.cols();
  if (params.heads == 0 || d % params.heads != 0) {
    throw ConfigError("rgat_attention: " + std::to_string(params.heads) + " heads do not divide D=" +
                      std::to_string(d));
  }
  const std::size_t available =
      std::min({params.w.size(), params.q.size(), params.k.size(), params.v.size()});
  std::vector<Tensor> scores, values;
  for (std::size_t r = 0; r < edges.num_relations; ++r) {
    if (edges.relation_size(r) == 0) continue;
    if (r >= available) throw ConfigError("rgat_attention: no parameters for relation " + std::to_string(r));
    Tensor g = linear(states, params.w[r]);
    Tensor q = gather_rows(linear(g, params.q[r]), edges.dst_of(r));
    Tensor k = gather_rows(linear(g, params.k[r]), edges.src_of(r));
    scores.push_back(head_dot(q, k, params.heads, 1.0));
    values.push_back(gather_rows(linear(states, params.v[r]), edges.src_of(r)));
  }
  Tensor s = concat(scores, 0);
  Tensor alpha = params.normalization == RgatNormalization::softmax
                     ? segment_softmax(s, edges.dst, edges.num_nodes)
                     : segment_normalize(s, edges.dst, edges.num_nodes);
  if (attention != nullptr) *attention = alpha;
  Tensor summary = segment_sum(head_scale(concat(values, 0), alpha), edges.dst, edges.num_nodes);
  return params.activation == RgatActivation::relu ? relu(summary) : summary;
}

// ---------------------------------------------------------------------------
// Update functions

Tensor phi_gru(const Tensor& h_prev, const Tensor& hbar, const GruParams& p, const GruMasks& masks) {
  const Tensor x = masks.hbar.defined() ? mul(hbar, masks.hbar) : hbar;
  const Tensor h = masks.state.defined() ? mul(h_prev, masks.state) : h_prev;
  Tensor r = sigmoid(gate(x, h, p.w_r, p.u_r, p.b_r));
  Tensor z = sigmoid(gate(x, h, p.w_z, p.u_z, p.b_z));
  Tensor candidate = tanh(add(linear(x, p.w), linear(mul(h, r), p.u, p.b)));
  return add(mul(one_minus(z), h_prev), mul(z, candidate));
}

Tensor phi_sgru(const Tensor& h_prev, const Tensor& hbar, const SgruParams& p) {
  Tensor r_h = sigmoid(gate(hbar, h_prev, p.w_rh, p.u_rh, p.b_rh));
  Tensor r_x = sigmoid(gate(hbar, h_prev, p.w_rx, p.u_rx, p.b_rx));
  Tensor z_x = gate(hbar, h_prev, p.w_zx, p.u_zx, p.b_zx);
  Tensor z_h = gate(hbar, h_prev, p.w_zh, p.u_zh, p.b_zh);
  Tensor z_u = gate(hbar, h_prev, p.w_zu, p.u_zu, p.b_zu);
  Tensor candidate = tanh(add(linear(mul(hbar, r_x), p.w), linear(mul(h_prev, r_h), p.u, p.b)));
  return softmax_mix({z_x, z_h, z_u}, {hbar, h_prev, candidate});
}

SgruGates sgru_gates(const Tensor& h_prev, const Tensor& hbar, const SgruParams& p) {
  const Tensor z_x = gate(hbar, h_prev, p.w_zx, p.u_zx, p.b_zx);
  const Tensor z_h = gate(hbar, h_prev, p.w_zh, p.u_zh, p.b_zh);
  const Tensor z_u = gate(hbar, h_prev, p.w_zu, p.u_zu, p.b_zu);
  const Tensor one = Tensor::full(z_x.shape(), 1.0);
  const Tensor zero = Tensor::zeros(z_x.shape());
  return {softmax_mix({z_x, z_h, z_u}, {one, zero, zero}).detach(),
          softmax_mix({z_x, z_h, z_u}, {zero, one, zero}).detach(),
          softmax_mix({z_x, z_h, z_u}, {zero, zero, one}).detach()};
}

Tensor rgcn_update(const Tensor& h_prev, const Tensor& hbar, const RgcnParams& p) {
  return tanh(add(linear(h_prev, p.self_weight, p.bias), hbar));
}

// ---------------------------------------------------------------------------
// Composition

Tensor gnn_step(const Tensor& states, const EdgeIndex& edges, const LayerSpec& spec, const LayerWeights& w,
                const StepContext& ctx) {
  require_rows(states, edges, "gnn_step");
  if (spec.rgat) return rgat_attention(states, edges, w.rgat);

  Tensor messages;
  switch (spec.message) {
    case MessageKind::mm: messages = mu_mm(states, edges, w.relations); break;
    case MessageKind::mm_reduced: messages = mu_mm_red(states, edges, w.relations); break;
    case MessageKind::gcm: messages = mu_gcm(states, edges, w.relations, w.gcm); break;
  }
  Tensor hbar;
  switch (spec.aggregation) {
    case AggregationKind::sum: hbar = gamma_sum(messages, edges); break;
    case AggregationKind::relation_mean: hbar = gamma_relation_mean(messages, edges); break;
    case AggregationKind::mean: hbar = gamma_mean(messages, edges); break;
    case AggregationKind::rv_gat: hbar = gamma_rv_gat(states, messages, edges, w.relations, w.attn); break;
  }
  switch (spec.update) {
    case UpdateKind::gru: return phi_gru(states, hbar, w.gru, ctx.gru_masks);
    case UpdateKind::sgru: return phi_sgru(states, hbar, w.sgru);
    case UpdateKind::rgcn: return rgcn_update(states, hbar, w.rgcn);
  }
  throw ConfigError("gnn_step: unknown update kind");
}

Tensor run_gnn(const Tensor& init, const EdgeIndex& edges, std::size_t steps, const LayerSpec& spec,
               std::span<const LayerWeights> weights, const StepContext& ctx) {
  if (steps == 0) throw ConfigError("run_gnn: need at least one step");
  if (weights.size() != 1 && weights.size() != steps) {
    throw ConfigError("run_gnn: expected 1 or " + std::to_string(steps) + " weight sets, got " +
                      std::to_string(weights.size()));
  }
  Tensor h = init;
  for (std::size_t k = 0; k < steps; ++k) {
    h = gnn_step(h, edges, spec, weights[weights.size() == 1 ? 0 : k], ctx);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Parameter construction

std::vector<double> glorot_uniform(std::size_t out, std::size_t in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  return uniform_noise(out * in, bound, rng);
}

std::vector<double> uniform_noise(std::size_t count, double bound, Rng& rng) {
  std::vector<double> v(count);
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return v;
}

namespace {

Tensor matrix(ParameterSet& ps, const std::string& name, std::size_t out, std::size_t in, Rng& rng) {
  return ps.add(name, {out, in}, glorot_uniform(out, in, rng));
}

Tensor bias(ParameterSet& ps, const std::string& name, std::size_t n) {
  return ps.add(name, {n}, std::vector<double>(n, 0.0));
}

}  // namespace

RelationTable make_relation_table(ParameterSet& ps, const std::string& prefix, const LayerDims& dims,
                                  MessageKind message, bool with_vectors, Rng& rng) {
  RelationTable t;
  const std::size_t d = dims.dim;
  if (with_vectors) {
    t.vectors = ps.add(prefix + "relation_vectors", {dims.relations, d}, uniform_noise(dims.relations * d, 0.1, rng));
  }
  if (message == MessageKind::mm) {
    for (std::size_t r = 0; r < dims.relations; ++r) {
      t.matrices.push_back(matrix(ps, prefix + "W_rel" + std::to_string(r), d, d, rng));
    }
  } else if (message == MessageKind::mm_reduced) {
    const std::size_t ds = dims.reduced_dim;
    if (ds == 0) throw ConfigError("reduced relation dimension must be positive");
    t.reduce_in = matrix(ps, prefix + "W_reduce_in", ds, d, rng);
    t.reduce_out = matrix(ps, prefix + "W_reduce_out", d, ds, rng);
    for (std::size_t r = 0; r < dims.relations; ++r) {
      t.reduced.push_back(matrix(ps, prefix + "W_rel_reduced" + std::to_string(r), ds, ds, rng));
    }
  }
  return t;
}

GcmParams make_gcm(ParameterSet& ps, const std::string& prefix, std::size_t d, Rng& rng) {
  GcmParams p;
  p.w_a = matrix(ps, prefix + "gcm.W_A", d, 2 * d, rng);
  p.b_a = bias(ps, prefix + "gcm.b_A", d);
  p.w_m = matrix(ps, prefix + "gcm.W_M", d, d, rng);
  p.b_m = bias(ps, prefix + "gcm.b_M", d);
  p.w_b = matrix(ps, prefix + "gcm.W_B", d, d, rng);
  p.b_b = bias(ps, prefix + "gcm.b_B", d);
  return p;
}

AttnParams make_attention(ParameterSet& ps, const std::string& prefix, std::size_t d, std::size_t heads, Rng& rng) {
  if (heads == 0 || d % heads != 0) {
    throw ConfigError(std::to_string(heads) + " attention heads do not divide D=" + std::to_string(d));
  }
  AttnParams p;
  p.heads = heads;
  // Per-head blocks are initialised with the fan of a single head.
  const std::size_t w = d / heads;
  std::vector<double> q, k;
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = glorot_uniform(w, d, rng);
    auto kh = glorot_uniform(w, 2 * d, rng);
    q.insert(q.end(), qh.begin(), qh.end());
    k.insert(k.end(), kh.begin(), kh.end());
  }
  p.query = ps.add(prefix + "attn.Q", {d, d}, std::move(q));
  p.key = ps.add(prefix + "attn.K", {d, 2 * d}, std::move(k));
  return p;
}

GruParams make_gru(ParameterSet& ps, const std::string& prefix, std::size_t d, Rng& rng) {
  GruParams p;
  p.w_r = matrix(ps, prefix + "gru.W_r", d, d, rng);
  p.u_r = matrix(ps, prefix + "gru.U_r", d, d, rng);
  p.b_r = bias(ps, prefix + "gru.b_r", d);
  p.w_z = matrix(ps, prefix + "gru.W_z", d, d, rng);
  p.u_z = matrix(ps, prefix + "gru.U_z", d, d, rng);
  p.b_z = bias(ps, prefix + "gru.b_z", d);
  p.w = matrix(ps, prefix + "gru.W", d, d, rng);
  p.u = matrix(ps, prefix + "gru.U", d, d, rng);
  p.b = bias(ps, prefix + "gru.b", d);
  return p;
}

SgruParams make_sgru(ParameterSet& ps, const std::string& prefix, std::size_t d, Rng& rng) {
  SgruParams p;
  const std::string s = prefix + "sgru.";
  auto triple = [&](const std::string& tag, Tensor& w, Tensor& u, Tensor& b) {
    w = matrix(ps, s + "W_" + tag, d, d, rng);
    u = matrix(ps, s + "U_" + tag, d, d, rng);
    b = bias(ps, s + "b_" + tag, d);
  };
  triple("rh", p.w_rh, p.u_rh, p.b_rh);
  triple("rx", p.w_rx, p.u_rx, p.b_rx);
  triple("zx", p.w_zx, p.u_zx, p.b_zx);
  triple("zh", p.w_zh, p.u_zh, p.b_zh);
  triple("zu", p.w_zu, p.u_zu, p.b_zu);
  p.w = matrix(ps, s + "W", d, d, rng);
  p.u = matrix(ps, s + "U", d, d, rng);
  p.b = bias(ps, s + "b", d);
  return p;
}

RgcnParams make_rgcn(ParameterSet& ps, const std::string& prefix, std::size_t d, Rng& rng) {
  return {matrix(ps, prefix + "rgcn.W_self", d, d, rng), bias(ps, prefix + "rgcn.b", d)};
}

RgatParams make_rgat(ParameterSet& ps, const std::string& prefix, const LayerDims& dims, Rng& rng) {
  const std::size_t d = dims.dim;
  if (dims.heads == 0 || d % dims.heads != 0) {
    throw ConfigError(std::to_string(dims.heads) + " attention heads do not divide D=" + std::to_string(d));
  }
  RgatParams p;
  p.heads = dims.heads;
  for (std::size_t r = 0; r < dims.relations; ++r) {
    const std::string s = prefix + "rgat.r" + std::to_string(r) + ".";
    p.w.push_back(matrix(ps, s + "W", d, d, rng));
    p.q.push_back(matrix(ps, s + "Q", d, d, rng));
    p.k.push_back(matrix(ps, s + "K", d, d, rng));
    p.v.push_back(matrix(ps, s + "V", d, d, rng));
  }
  return p;
}

LayerWeights make_layer(ParameterSet& ps, const std::string& prefix, const LayerSpec& spec, const LayerDims& dims,
                        Rng& rng) {
  LayerWeights w;
  if (spec.rgat) {
    w.rgat = make_rgat(ps, prefix, dims, rng);
    return w;
  }
  const bool vectors = spec.message == MessageKind::gcm || spec.aggregation == AggregationKind::rv_gat;
  w.relations = make_relation_table(ps, prefix, dims, spec.message, vectors, rng);
  if (spec.message == MessageKind::gcm) w.gcm = make_gcm(ps, prefix, dims.dim, rng);
  if (spec.aggregation == AggregationKind::rv_gat) w.attn = make_attention(ps, prefix, dims.dim, dims.heads, rng);
  switch (spec.update) {
    case UpdateKind::gru: w.gru = make_gru(ps, prefix, dims.dim, rng); break;
    case UpdateKind::sgru: w.sgru = make_sgru(ps, prefix, dims.dim, rng); break;
    case UpdateKind::rgcn: w.rgcn = make_rgcn(ps, prefix, dims.dim, rng); break;
  }
  return w;
}

}  // namespace rgnn
