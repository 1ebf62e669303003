#pragma once

// Message functions, aggregations and update cells for multi-relational
// message passing, all batched over an EdgeIndex:
//
//   states    [num_nodes × D]  node representations of the previous step
//   messages  [num_edges × D]  one row per edge, in EdgeIndex order
//
// Every function is differentiable through the tensor engine.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rgnn/graph.hpp"
#include "rgnn/optim.hpp"
#include "rgnn/random.hpp"
#include "rgnn/tensor.hpp"

namespace rgnn {

// Per-relation parameters. Which members are populated depends on the
// message function in use.
struct RelationTable {
  Tensor vectors;                // [R × D] relation vectors a_r
  std::vector<Tensor> matrices;  // R full [D × D] matrices
  Tensor reduce_in;              // [d* × D], shared
  Tensor reduce_out;             // [D × d*], shared
  std::vector<Tensor> reduced;   // R [d* × d*] matrices
};

struct GruParams {
  Tensor w_r, u_r, b_r;
  Tensor w_z, u_z, b_z;
  Tensor w, u, b;
};

struct SgruParams {
  Tensor w_rh, u_rh, b_rh;
  Tensor w_rx, u_rx, b_rx;
  Tensor w_zx, u_zx, b_zx;
  Tensor w_zh, u_zh, b_zh;
  Tensor w_zu, u_zu, b_zu;
  Tensor w, u, b;
};

struct GcmParams {
  Tensor w_a, b_a;  // [D × 2D], [D]
  Tensor w_m, b_m;  // [D × D], [D]
  Tensor w_b, b_b;  // [D × D], [D]
};

// Q^(h) stacked over heads into [D × D]; K^(h) into [D × 2D].
struct AttnParams {
  std::size_t heads = 1;
  Tensor query;
  Tensor key;
};

enum class RgatActivation { relu, linear };
enum class RgatNormalization { softmax, ratio };

// Per relation r: W^(r) [D × D]; Q^(h,r), K^(h,r), V^(h,r) stacked over heads into [D × D].
struct RgatParams {
  std::size_t heads = 1;
  std::vector<Tensor> w, q, k, v;
  RgatActivation activation = RgatActivation::relu;
  RgatNormalization normalization = RgatNormalization::softmax;
};

struct RgcnParams {
  Tensor self_weight;  // [D × D]
  Tensor bias;         // [D]
};

// ---------------------------------------------------------------------------
// Message functions

// W_rel · h_u per edge.
Tensor mu_mm(const Tensor& states, const EdgeIndex& edges, const RelationTable& table);
// W_B · W*_rel · W_A · h_u per edge.
Tensor mu_mm_red(const Tensor& states, const EdgeIndex& edges, const RelationTable& table);
// Gated message: m ⊙ h_u + (1 − m) ⊙ u with m, u computed from CELU(b_A + W_A [h_u; a_rel]).
Tensor mu_gcm(const Tensor& states, const EdgeIndex& edges, const RelationTable& table, const GcmParams& params);

// ---------------------------------------------------------------------------
// Aggregations. The neighbourhood of every node must be nonempty.

Tensor gamma_sum(const Tensor& messages, const EdgeIndex& edges);
Tensor gamma_mean(const Tensor& messages, const EdgeIndex& edges);
// Σ_r Σ_{u ∈ N_r(v)} m_u / |N_r(v)|
Tensor gamma_relation_mean(const Tensor& messages, const EdgeIndex& edges);
// Multi-head attention with keys from [message; a_rel] and untransformed
// message slices as values. `attention`, when given, receives the
// [num_edges × heads] attention weights.
Tensor gamma_rv_gat(const Tensor& states, const Tensor& messages, const EdgeIndex& edges,
                    const RelationTable& table, const AttnParams& params, Tensor* attention = nullptr);

// Full relational attention step of the RGAT baseline: states in, states out.
Tensor rgat_attention(const Tensor& states, const EdgeIndex& edges, const RgatParams& params,
                      Tensor* attention = nullptr);

// ---------------------------------------------------------------------------
// Update functions

// Optional variational-dropout masks applied to the gate inputs.
struct GruMasks {
  Tensor hbar;
  Tensor state;
};

Tensor phi_gru(const Tensor& h_prev, const Tensor& hbar, const GruParams& params, const GruMasks& masks = {});
Tensor phi_sgru(const Tensor& h_prev, const Tensor& hbar, const SgruParams& params);
Tensor rgcn_update(const Tensor& h_prev, const Tensor& hbar, const RgcnParams& params);

// The three mixing gates of the SGRU (ẑ_x, ẑ_h, ẑ_u), for inspection.
struct SgruGates {
  Tensor mix_hbar, mix_state, mix_candidate;
};
SgruGates sgru_gates(const Tensor& h_prev, const Tensor& hbar, const SgruParams& params);

// ---------------------------------------------------------------------------
// Composition

enum class MessageKind { mm, mm_reduced, gcm };
enum class AggregationKind { sum, relation_mean, mean, rv_gat };
enum class UpdateKind { gru, sgru, rgcn };

struct LayerSpec {
  bool rgat = false;  // when set, the message/aggregation/update kinds are ignored
  MessageKind message = MessageKind::gcm;
  AggregationKind aggregation = AggregationKind::rv_gat;
  UpdateKind update = UpdateKind::sgru;
};

// Parameters of one propagation step. Only the members the LayerSpec uses are populated.
struct LayerWeights {
  RelationTable relations;
  GcmParams gcm;
  AttnParams attn;
  GruParams gru;
  SgruParams sgru;
  RgcnParams rgcn;
  RgatParams rgat;
};

struct StepContext {
  GruMasks gru_masks;
};

// One synchronous step: every node reads only step-(k−1) states.
Tensor gnn_step(const Tensor& states, const EdgeIndex& edges, const LayerSpec& spec, const LayerWeights& weights,
                const StepContext& ctx = {});

// K steps. `weights` holds either one entry (shared across steps) or K entries.
Tensor run_gnn(const Tensor& init, const EdgeIndex& edges, std::size_t steps, const LayerSpec& spec,
               std::span<const LayerWeights> weights, const StepContext& ctx = {});

// ---------------------------------------------------------------------------
// Parameter construction. Weight matrices use Glorot-uniform bounds, relation
// vectors ±0.1 uniform noise, biases zero.

std::vector<double> glorot_uniform(std::size_t out, std::size_t in, Rng& rng);
std::vector<double> uniform_noise(std::size_t count, double bound, Rng& rng);

struct LayerDims {
  std::size_t dim = 0;
  std::size_t relations = 0;
  std::size_t heads = 1;
  std::size_t reduced_dim = 50;
};

RelationTable make_relation_table(ParameterSet& ps, const std::string& prefix, const LayerDims& dims,
                                  MessageKind message, bool with_vectors, Rng& rng);
GcmParams make_gcm(ParameterSet& ps, const std::string& prefix, std::size_t dim, Rng& rng);
AttnParams make_attention(ParameterSet& ps, const std::string& prefix, std::size_t dim, std::size_t heads, Rng& rng);
GruParams make_gru(ParameterSet& ps, const std::string& prefix, std::size_t dim, Rng& rng);
SgruParams make_sgru(ParameterSet& ps, const std::string& prefix, std::size_t dim, Rng& rng);
RgcnParams make_rgcn(ParameterSet& ps, const std::string& prefix, std::size_t dim, Rng& rng);
RgatParams make_rgat(ParameterSet& ps, const std::string& prefix, const LayerDims& dims, Rng& rng);

LayerWeights make_layer(ParameterSet& ps, const std::string& prefix, const LayerSpec& spec, const LayerDims& dims,
                        Rng& rng);

}  // namespace rgnn
