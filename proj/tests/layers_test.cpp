#include <gtest/gtest.h>

#include <cmath>

#include "layer_checks.hpp"
#include "rgnn/errors.hpp"

using namespace rgnn;
using namespace rgnn::testing;

namespace {

RelGraph graph(std::size_t n, std::vector<Edge> edges, std::size_t relations = 1) {
  std::vector<std::string> rels;
  for (std::size_t r = 0; r < relations; ++r) rels.push_back("r" + std::to_string(r));
  return RelGraph(std::vector<std::int64_t>(n, 0), std::move(edges), std::move(rels));
}

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor::from({r, c}, std::move(v), true); }

void zero_all(ParameterSet& ps) {
  for (auto& p : ps) {
    for (auto& x : p.tensor.mutable_data()) x = 0;
  }
}

void set_bias(ParameterSet& ps, const std::string& name, double value) {
  for (auto& x : ps.find(name)->tensor.mutable_data()) x = value;
}

class LayerOracle : public ::testing::TestWithParam<std::size_t> {};

std::string check_name(const ::testing::TestParamInfo<std::size_t>& info) {
  std::string s = layer_checks()[info.param].name;
  for (auto& ch : s) {
    if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
  }
  return s;
}

}  // namespace

TEST_P(LayerOracle, MatchesStraightLineTranscriptionOn100Instances) {
  const auto check = layer_checks()[GetParam()];
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) worst = std::max(worst, check.oracle_gap(1000 + seed));
  EXPECT_LT(worst, 1e-10) << check.name;
}

TEST_P(LayerOracle, GradientsMatchCentralDifferences) {
  const auto check = layer_checks()[GetParam()];
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) worst = std::max(worst, check.grad_error(77 + seed));
  EXPECT_LT(worst, 1e-4) << check.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, LayerOracle, ::testing::Range<std::size_t>(0, layer_checks().size()), check_name);

// ---------------------------------------------------------------------------
// Worked examples

TEST(MuMm, PermutationMatrixSwapsCoordinates) {
  const RelGraph g = graph(2, {{0, 1, 0}});
  const EdgeIndex ei = EdgeIndex::build(g);
  RelationTable t;
  t.matrices = {mat(2, 2, {0, 1, 1, 0})};
  const Tensor out = mu_mm(Tensor::from({2, 2}, {1, 2, 5, 5}), ei, t);
  EXPECT_EQ(values(out), (std::vector<double>{2, 1}));
}

TEST(MuMmRed, IsTripleProduct) {
  const RelGraph g = graph(1, {{0, 0, 0}});
  const EdgeIndex ei = EdgeIndex::build(g);
  RelationTable t;
  t.reduce_in = mat(1, 2, {1, 1});    // sums the coordinates
  t.reduced = {mat(1, 1, {3})};       // triples
  t.reduce_out = mat(2, 1, {1, -1});  // spreads with a sign flip
  const Tensor out = mu_mm_red(Tensor::from({1, 2}, {2, 5}), ei, t);
  EXPECT_EQ(values(out), (std::vector<double>{21, -21}));
}

TEST(MuGcm, ZeroParametersGiveHalfTheNeighbourState) {
  Rng rng(3);
  const RelGraph g = graph(3, {{0, 1, 0}, {2, 1, 0}, {1, 0, 0}});
  const EdgeIndex ei = EdgeIndex::build(g);
  ParameterSet ps;
  LayerWeights w = make_layer(ps, "", {false, MessageKind::gcm, AggregationKind::sum, UpdateKind::gru},
                              {4, 1, 1, 2}, rng);
  zero_all(ps);
  Tensor h = random_tensor({3, 4}, rng);
  const Tensor out = mu_gcm(h, ei, w.relations, w.gcm);
  for (std::size_t e = 0; e < ei.num_edges(); ++e) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(out.at(e, j), 0.5 * h.at(ei.src[e], j));
  }
  // d out / d h_u = 0.5 I: backprop a one-hot through a single-edge graph.
  const EdgeIndex single = EdgeIndex::build(graph(3, {{2, 0, 0}}));
  for (std::size_t j = 0; j < 4; ++j) {
    h.zero_grad();
    std::vector<double> pick(4, 0.0);
    pick[j] = 1;
    sum(mul(mu_gcm(h, single, w.relations, w.gcm), Tensor::from({1, 4}, pick))).backward();
    for (std::size_t k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(h.grad()[2 * 4 + k], k == j ? 0.5 : 0.0);
  }
}

TEST(MuGcm, SaturatedGateCopiesNeighbourState) {
  Rng rng(4);
  const EdgeIndex ei = EdgeIndex::build(graph(2, {{0, 1, 0}}));
  ParameterSet ps;
  LayerWeights w = make_layer(ps, "", {false, MessageKind::gcm, AggregationKind::sum, UpdateKind::gru},
                              {3, 1, 1, 2}, rng);
  set_bias(ps, "gcm.b_M", 60.0);
  const Tensor h = random_tensor({2, 3}, rng);
  const Tensor out = mu_gcm(h, ei, w.relations, w.gcm);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out.at(0, j), h.at(0, j), 1e-12);
}

TEST(Aggregation, SumAndMeanOfTwoMessages) {
  const EdgeIndex ei = EdgeIndex::build(graph(2, {{0, 1, 0}, {1, 1, 0}, {0, 0, 0}}));
  // EdgeIndex order equals insertion order for a single relation.
  const Tensor msgs = Tensor::from({3, 2}, {1, 2, 3, 4, 7, 7});
  EXPECT_EQ(values(gamma_sum(msgs, ei)), (std::vector<double>{7, 7, 4, 6}));
  EXPECT_EQ(values(gamma_mean(msgs, ei)), (std::vector<double>{7, 7, 2, 3}));
}

TEST(Aggregation, RelationMeanNormalisesPerRelation) {
  const EdgeIndex ei = EdgeIndex::build(graph(1, {{0, 0, 0}, {0, 0, 1}, {0, 0, 0}}, 2));
  // Relation-sorted: the two relation-0 edges first, then relation 1.
  const Tensor msgs = Tensor::from({3, 2}, {2, 0, 4, 0, 0, 3});
  EXPECT_EQ(values(gamma_relation_mean(msgs, ei)), (std::vector<double>{3, 3}));
}

TEST(Aggregation, MeanRejectsEmptyNeighbourhood) {
  const EdgeIndex ei = EdgeIndex::build(graph(2, {{0, 1, 0}}));
  EXPECT_THROW(gamma_mean(Tensor::from({1, 2}, {1, 1}), ei), ContractError);
}

TEST(RvGat, SingleNeighbourReceivesItsMessage) {
  Rng rng(5);
  Instance in;
  in.graph = graph(2, {{1, 0, 0}, {0, 1, 0}});
  in.edges = EdgeIndex::build(in.graph);
  in.dim = 4;
  in.heads = 2;
  RandomLayer l = random_layer(in, {false, MessageKind::mm, AggregationKind::rv_gat, UpdateKind::gru}, rng);
  const Tensor h = random_tensor({2, 4}, rng);
  const Tensor msgs = random_tensor({2, 4}, rng);
  Tensor attention;
  const Tensor out = gamma_rv_gat(h, msgs, in.edges, l.weights.relations, l.weights.attn, &attention);
  EXPECT_EQ(values(attention), (std::vector<double>{1, 1, 1, 1}));
  // Edge 0 (1 -> 0) carries row 0, edge 1 (0 -> 1) carries row 1.
  EXPECT_EQ(values(out), values(msgs));
}

TEST(RvGat, EqualKeysAverageTheMessages) {
  Rng rng(6);
  Instance in;
  in.graph = graph(3, {{1, 0, 0}, {2, 0, 0}, {0, 1, 0}, {0, 2, 0}});
  in.edges = EdgeIndex::build(in.graph);
  in.dim = 4;
  in.heads = 2;
  RandomLayer l = random_layer(in, {false, MessageKind::mm, AggregationKind::rv_gat, UpdateKind::gru}, rng);
  for (auto& x : l.weights.attn.key.mutable_data()) x = 0;
  const Tensor msgs = Tensor::from({4, 4}, {1, 2, 3, 4, 3, 2, 1, 0, 9, 9, 9, 9, 9, 9, 9, 9});
  const Tensor out = gamma_rv_gat(random_tensor({3, 4}, rng), msgs, in.edges, l.weights.relations, l.weights.attn);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(out.at(0, j), 2.0);
}

TEST(RvGat, HeadsMustDivideDimension) {
  Rng rng(7);
  ParameterSet ps;
  EXPECT_THROW(make_attention(ps, "", 6, 4, rng), ConfigError);
  Instance in;
  in.graph = graph(1, {{0, 0, 0}});
  in.edges = EdgeIndex::build(in.graph);
  in.dim = 6;
  in.heads = 3;
  RandomLayer l = random_layer(in, {false, MessageKind::mm, AggregationKind::rv_gat, UpdateKind::gru}, rng);
  l.weights.attn.heads = 4;
  EXPECT_THROW(gamma_rv_gat(random_tensor({1, 6}, rng), random_tensor({1, 6}, rng), in.edges, l.weights.relations,
                            l.weights.attn),
               ConfigError);
}

TEST(Attention, WeightsFormADistributionPerNodeAndHead) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    Instance in = random_instance(rng, 0, 2);
    RandomLayer gat = random_layer(in, {false, MessageKind::mm, AggregationKind::rv_gat, UpdateKind::gru}, rng);
    LayerSpec rs;
    rs.rgat = true;
    RandomLayer rgat = random_layer(in, rs, rng);
    Tensor a1, a2;
    gamma_rv_gat(in.states, random_messages(in, rng), in.edges, gat.weights.relations, gat.weights.attn, &a1);
    rgat_attention(in.states, in.edges, rgat.weights.rgat, &a2);
    for (const Tensor* a : {&a1, &a2}) {
      std::vector<double> totals(in.edges.num_nodes * 2, 0.0);
      for (std::size_t e = 0; e < in.edges.num_edges(); ++e) {
        for (std::size_t h = 0; h < 2; ++h) {
          EXPECT_GE(a->at(e, h), 0.0);
          totals[in.edges.dst[e] * 2 + h] += a->at(e, h);
        }
      }
      for (double t : totals) EXPECT_NEAR(t, 1.0, 1e-12);
    }
  }
}

TEST(Rgat, RatioNormalisationHandExample) {
  // D = 1, all weights 1: score(i, j) = h_i h_j, value = h_j.
  const EdgeIndex ei = EdgeIndex::build(graph(3, {{1, 0, 0}, {2, 0, 0}}));
  RgatParams p;
  p.w = {mat(1, 1, {1})};
  p.q = {mat(1, 1, {1})};
  p.k = {mat(1, 1, {1})};
  p.v = {mat(1, 1, {1})};
  p.normalization = RgatNormalization::ratio;
  p.activation = RgatActivation::linear;
  const Tensor h = Tensor::from({3, 1}, {1, 2, 3});
  EXPECT_NEAR(rgat_attention(h, ei, p).at(0, 0), 0.4 * 2 + 0.6 * 3, 1e-14);
  p.normalization = RgatNormalization::softmax;
  const double a = std::exp(2.0) / (std::exp(2.0) + std::exp(3.0));
  EXPECT_NEAR(rgat_attention(h, ei, p).at(0, 0), a * 2 + (1 - a) * 3, 1e-14);
  p.v = {mat(1, 1, {-1})};
  p.activation = RgatActivation::relu;
  EXPECT_EQ(rgat_attention(h, ei, p).at(0, 0), 0.0);
}

TEST(Rgat, ParallelEdgesCountTwice) {
  // Two parallel edges from node 1 plus one from node 2, equal scores.
  const EdgeIndex ei = EdgeIndex::build(graph(3, {{1, 0, 0}, {1, 0, 0}, {2, 0, 0}}));
  RgatParams p;
  p.w = {mat(1, 1, {0})};
  p.q = {mat(1, 1, {1})};
  p.k = {mat(1, 1, {1})};
  p.v = {mat(1, 1, {1})};
  p.activation = RgatActivation::linear;
  const Tensor h = Tensor::from({3, 1}, {0, 3, 6});
  EXPECT_NEAR(rgat_attention(h, ei, p).at(0, 0), (3.0 + 3.0 + 6.0) / 3.0, 1e-14);
}

TEST(Gru, ZeroParametersHalveTheState) {
  Rng rng(8);
  ParameterSet ps;
  GruParams p = make_gru(ps, "", 3, rng);
  zero_all(ps);
  const Tensor h = random_tensor({2, 3}, rng), x = random_tensor({2, 3}, rng);
  const Tensor out = phi_gru(h, x, p);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(out[i], 0.5 * h[i]);
  set_bias(ps, "gru.b_z", -60.0);
  const Tensor carried = phi_gru(h, x, p);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(carried[i], h[i], 1e-12);
}

TEST(Gru, MasksApplyToGateInputsOnly) {
  Rng rng(9);
  ParameterSet ps;
  GruParams p = make_gru(ps, "", 3, rng);
  randomize(ps, rng);
  const Tensor h = random_tensor({1, 3}, rng), x = random_tensor({1, 3}, rng);
  const Tensor zero = Tensor::zeros({1, 3});
  // With both inputs masked out, r = σ(b_r), z = σ(b_z), candidate = tanh(b), carry uses raw h.
  const Tensor out = phi_gru(h, x, p, {zero, zero});
  for (std::size_t j = 0; j < 3; ++j) {
    const double z = 1 / (1 + std::exp(-p.b_z[j]));
    EXPECT_NEAR(out[j], (1 - z) * h[j] + z * std::tanh(p.b[j]), 1e-14);
  }
}

TEST(Sgru, ZeroParametersAverageStateNeighbourhoodAndZeroCandidate) {
  Rng rng(10);
  ParameterSet ps;
  SgruParams p = make_sgru(ps, "", 3, rng);
  zero_all(ps);
  const Tensor h = random_tensor({2, 3}, rng), x = random_tensor({2, 3}, rng);
  const Tensor out = phi_sgru(h, x, p);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(out[i], (h[i] + x[i]) / 3.0, 1e-15);
  set_bias(ps, "sgru.b_zh", 60.0);
  const Tensor kept = phi_sgru(h, x, p);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(kept[i], h[i], 1e-12);
}

TEST(Sgru, MixingGatesSumToOneAndMatchOracle) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    ParameterSet ps;
    SgruParams p = make_sgru(ps, "", 5, rng);
    randomize(ps, rng, 2.0);
    const Tensor h = random_tensor({3, 5}, rng), x = random_tensor({3, 5}, rng);
    const SgruGates g = sgru_gates(h, x, p);
    for (std::size_t i = 0; i < 15; ++i) {
      EXPECT_GT(g.mix_hbar[i], 0.0);
      EXPECT_GT(g.mix_state[i], 0.0);
      EXPECT_GT(g.mix_candidate[i], 0.0);
      EXPECT_NEAR(g.mix_hbar[i] + g.mix_state[i] + g.mix_candidate[i], 1.0, 1e-14);
    }
    const auto t = oracle::sgru(oracle::row(h, 1), oracle::row(x, 1), p);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(g.mix_state.at(1, j), t.mix_h[j], 1e-14);
  }
}

TEST(Rgcn, ZeroParametersPassTanhOfNeighbourhood) {
  Rng rng(11);
  ParameterSet ps;
  RgcnParams p = make_rgcn(ps, "", 2, rng);
  zero_all(ps);
  const Tensor out = rgcn_update(Tensor::from({1, 2}, {5, 5}), Tensor::from({1, 2}, {0.5, -1}), p);
  EXPECT_DOUBLE_EQ(out[0], std::tanh(0.5));
  EXPECT_DOUBLE_EQ(out[1], std::tanh(-1.0));
}

// ---------------------------------------------------------------------------
// Step-level properties

namespace {

const std::vector<LayerSpec>& all_specs() {
  static const std::vector<LayerSpec> specs = [] {
    LayerSpec rgat;
    rgat.rgat = true;
    return std::vector<LayerSpec>{
        {false, MessageKind::mm_reduced, AggregationKind::relation_mean, UpdateKind::rgcn},
        {false, MessageKind::mm_reduced, AggregationKind::sum, UpdateKind::gru},
        {false, MessageKind::gcm, AggregationKind::rv_gat, UpdateKind::sgru},
        {false, MessageKind::gcm, AggregationKind::rv_gat, UpdateKind::gru},
        {false, MessageKind::gcm, AggregationKind::mean, UpdateKind::sgru},
        {false, MessageKind::mm, AggregationKind::rv_gat, UpdateKind::sgru},
        rgat,
    };
  }();
  return specs;
}

}  // namespace

TEST(GnnStep, NodeRelabellingPermutesOutputs) {
  for (std::size_t s = 0; s < all_specs().size(); ++s) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed * 31 + s);
      Instance in = random_instance(rng, 0, 2);
      RandomLayer l = random_layer(in, all_specs()[s], rng);
      const std::size_t n = in.graph.num_nodes();
      std::vector<std::size_t> perm(n);
      for (std::size_t i = 0; i < n; ++i) perm[i] = i;
      rng.shuffle(perm);
      std::vector<Edge> edges;
      for (const auto& e : in.graph.edges()) edges.push_back({perm[e.src], perm[e.dst], e.rel});
      rng.shuffle(edges);
      const RelGraph pg(in.graph.labels(), edges, in.graph.relations());
      std::vector<double> pstates(n * in.dim);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < in.dim; ++j) pstates[perm[i] * in.dim + j] = in.states.at(i, j);
      }
      const Tensor a = gnn_step(in.states, in.edges, all_specs()[s], l.weights);
      const Tensor b = gnn_step(Tensor::from({n, in.dim}, pstates), EdgeIndex::build(pg), all_specs()[s], l.weights);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < in.dim; ++j) EXPECT_NEAR(a.at(i, j), b.at(perm[i], j), 1e-12);
      }
    }
  }
}

TEST(GnnStep, SelfOnlyGraphUpdatesNodesIndependently) {
  for (const auto& spec : all_specs()) {
    Rng rng(12);
    Instance in;
    in.graph = add_self_edges(graph(3, {}, 1));
    in.edges = EdgeIndex::build(in.graph);
    in.dim = 4;
    in.heads = 2;
    in.states = random_tensor({3, 4}, rng);
    RandomLayer l = random_layer(in, spec, rng);
    const Tensor all = gnn_step(in.states, in.edges, spec, l.weights);
    const EdgeIndex one = EdgeIndex::build(add_self_edges(graph(1, {}, 1)));
    for (std::size_t v = 0; v < 3; ++v) {
      const Tensor alone = gnn_step(Tensor::from({1, 4}, oracle::row(in.states, v)), one, spec, l.weights);
      for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(all.at(v, j), alone[j], 1e-13);
    }
  }
}

TEST(GnnStep, MessagesFlowAlongEdgeDirectionOnly) {
  for (const auto& spec : all_specs()) {
    Rng rng(13);
    Instance in;
    in.graph = add_self_edges(graph(2, {{0, 1, 0}}));
    in.edges = EdgeIndex::build(in.graph);
    in.dim = 4;
    in.heads = 2;
    RandomLayer l = random_layer(in, spec, rng);
    const Tensor h = random_tensor({2, 4}, rng);
    Tensor moved = Tensor::from({2, 4}, values(h));
    moved.mutable_data()[4] += 1.0;  // node 1 changes
    const Tensor a = gnn_step(h, in.edges, spec, l.weights);
    const Tensor b = gnn_step(moved, in.edges, spec, l.weights);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(a.at(0, j), b.at(0, j));
    Tensor moved0 = Tensor::from({2, 4}, values(h));
    moved0.mutable_data()[0] += 1.0;  // node 0 changes; node 1 listens
    const Tensor c = gnn_step(moved0, in.edges, spec, l.weights);
    double diff = 0;
    for (std::size_t j = 0; j < 4; ++j) diff += std::abs(c.at(1, j) - a.at(1, j));
    EXPECT_GT(diff, 1e-9);
  }
}

TEST(RunGnn, ReceptiveFieldGrowsOneHopPerStep) {
  std::vector<Edge> chain;
  for (std::size_t i = 0; i + 1 < 7; ++i) chain.push_back({i, i + 1, 0});
  Instance in;
  in.graph = add_self_edges(graph(7, chain));
  in.edges = EdgeIndex::build(in.graph);
  in.dim = 4;
  in.heads = 2;
  for (const auto& spec : all_specs()) {
    // ReLU in RGAT can zero a row on one draw, so reach is required on some draw.
    std::vector<bool> reached(5, false);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(14 + seed);
      RandomLayer l = random_layer(in, spec, rng);
      const Tensor h = random_tensor({7, 4}, rng);
      Tensor moved = Tensor::from({7, 4}, values(h));
      moved.mutable_data()[0] += 1.0;
      const std::vector<LayerWeights> shared{l.weights};
      for (std::size_t k = 1; k <= 4; ++k) {
        const Tensor a = run_gnn(h, in.edges, k, spec, shared);
        const Tensor b = run_gnn(moved, in.edges, k, spec, shared);
        double reach = 0, beyond = 0;
        for (std::size_t j = 0; j < 4; ++j) {
          reach += std::abs(a.at(k, j) - b.at(k, j));
          beyond += std::abs(a.at(k + 1, j) - b.at(k + 1, j));
        }
        if (reach > 0) reached[k] = true;
        EXPECT_EQ(beyond, 0.0) << "k=" << k;
      }
    }
    for (std::size_t k = 1; k <= 4; ++k) EXPECT_TRUE(reached[k]) << "k=" << k;
  }
}

TEST(RunGnn, RejectsMismatchedWeightCount) {
  Rng rng(15);
  Instance in = random_instance(rng, 4, 2);
  RandomLayer l = random_layer(in, all_specs()[2], rng);
  const std::vector<LayerWeights> two{l.weights, l.weights};
  EXPECT_THROW(run_gnn(in.states, in.edges, 3, all_specs()[2], two), ConfigError);
  EXPECT_THROW(run_gnn(in.states, in.edges, 0, all_specs()[2], std::span(two).first(1)), ConfigError);
  EXPECT_NO_THROW(run_gnn(in.states, in.edges, 2, all_specs()[2], two));
}

TEST(Init, GlorotBoundsAndZeroBiases) {
  Rng rng(16);
  const auto w = glorot_uniform(30, 20, rng);
  const double bound = std::sqrt(6.0 / 50.0);
  for (double x : w) EXPECT_LE(std::abs(x), bound);
  ParameterSet ps;
  make_gcm(ps, "", 6, rng);
  for (const auto& p : ps) {
    if (p.name.find(".b_") != std::string::npos) {
      for (double x : p.tensor.data()) EXPECT_EQ(x, 0.0);
    }
  }
  EXPECT_EQ(ps.scalar_count(), 6 * 12 + 6 + 2 * (36 + 6));
}
