#pragma once

// The seven named architectures, assembled from layer components:
//
//   RGCN           mm_reduced + relation-normalised sum + tanh(W_self h + b + h̄)
//   GGNN           mm_reduced + sum + GRU (variational dropout)
//   RGAT           relational attention layers
//   SGGNN-RV-GAT   gated messages + relation-vector attention + SGRU
//   GGNN-RV-GAT    gated messages + relation-vector attention + GRU
//   SGGNN-RV-mean  gated messages + mean + SGRU
//   SGGNN-RM-GAT   full relation matrices + relation-vector attention + SGRU
//
// Every model embeds node symbols (embed_dim), projects to D, runs K steps
// and reads out selected nodes through one linear layer.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rgnn/graph.hpp"
#include "rgnn/layers.hpp"
#include "rgnn/optim.hpp"
#include "rgnn/random.hpp"
#include "rgnn/tensor.hpp"

namespace rgnn {

enum class ModelName { rgcn, ggnn, rgat, sggnn_rv_gat, ggnn_rv_gat, sggnn_rv_mean, sggnn_rm_gat };

// Display order of the results tables.
const std::vector<ModelName>& all_models();
std::string to_string(ModelName m);
// Throws ConfigError listing the valid names.
ModelName parse_model_name(const std::string& s);

struct ModelConfig {
  ModelName model = ModelName::sggnn_rv_gat;
  std::size_t dim = 100;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t embed_dim = 20;
  double dropout = 0.0;
  bool variational_dropout = false;
  RgatActivation rgat_sigma = RgatActivation::relu;
  RgatNormalization rgat_normalization = RgatNormalization::softmax;
  std::size_t d_star = 50;
  bool weight_sharing = true;
  std::size_t num_relations = 0;
  std::size_t num_symbols = 0;
  std::size_t num_classes = 0;

  // Defaults for a model name: GGNN turns on variational dropout.
  static ModelConfig for_model(ModelName m);

  void validate() const;
  bool uses_attention_heads() const;

  // key=value form, shared by checkpoints and experiment configs.
  std::map<std::string, std::string> to_map() const;
  // Applies one key; returns false for keys that are not model keys.
  bool set(const std::string& key, const std::string& value);

  bool operator==(const ModelConfig&) const = default;
};

LayerSpec layer_spec(ModelName m);

// Scalar parameter count computed from the config alone.
std::size_t parameter_count(const ModelConfig& config);

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  const LayerSpec& spec() const { return spec_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  const std::vector<LayerWeights>& layers() const { return layers_; }
  const Tensor& embedding() const { return embedding_; }
  const Tensor& input_projection() const { return input_proj_; }
  const Tensor& readout_weight() const { return readout_w_; }
  const Tensor& readout_bias() const { return readout_b_; }

  // Flat copies of every parameter, in ParameterSet order.
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& values);

 private:
  ModelConfig config_;
  LayerSpec spec_;
  ParameterSet params_;
  Tensor embedding_, input_proj_, readout_w_, readout_b_;
  std::vector<LayerWeights> layers_;
};

inline Model build_model(const ModelConfig& config, std::uint64_t seed) { return Model(config, seed); }

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout > 0
};

// h⁽⁰⁾ = embed(labels) projected to D. Unknown symbols throw InputError.
Tensor initial_states(const Model& model, const EdgeIndex& edges);
// K propagation steps from h⁽⁰⁾, with the model's dropout scheme when training.
Tensor encode(const Model& model, const Tensor& h0, const EdgeIndex& edges, const ForwardOptions& opts = {});
// Logits [|nodes| × num_classes] from final states.
Tensor readout(const Model& model, const Tensor& states, std::span<const std::size_t> nodes,
               const ForwardOptions& opts = {});

Tensor forward(const Model& model, const EdgeIndex& edges, std::span<const std::size_t> nodes,
               const ForwardOptions& opts = {});
Tensor forward(const Model& model, const RelGraph& graph, std::span<const std::size_t> nodes,
               const ForwardOptions& opts = {});

// Versioned text checkpoint: config header, then named parameter arrays in
// hexadecimal floating point so reloads are bit-exact.
void save_checkpoint(std::ostream& os, const Model& model);
Model load_checkpoint(std::istream& is);
void save_checkpoint(const std::string& path, const Model& model);
Model load_checkpoint(const std::string& path);

}  // namespace rgnn
