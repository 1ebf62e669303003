#include "rgnn/models.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "rgnn/errors.hpp"

namespace rgnn {

namespace {

const std::vector<std::pair<ModelName, const char*>> kNames = {
    {ModelName::rgcn, "RGCN"},
    {ModelName::ggnn, "GGNN"},
    {ModelName::rgat, "RGAT"},
    {ModelName::sggnn_rv_gat, "SGGNN-RV-GAT"},
    {ModelName::ggnn_rv_gat, "GGNN-RV-GAT"},
    {ModelName::sggnn_rv_mean, "SGGNN-RV-mean"},
    {ModelName::sggnn_rm_gat, "SGGNN-RM-GAT"},
};

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a count, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string fmt_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

}  // namespace

const std::vector<ModelName>& all_models() {
  static const std::vector<ModelName> order = [] {
    std::vector<ModelName> v;
    for (const auto& [m, _] : kNames) v.push_back(m);
    return v;
  }();
  return order;
}

std::string to_string(ModelName m) {
  for (const auto& [n, s] : kNames) {
    if (n == m) return s;
  }
  throw ConfigError("unknown model id");
}

ModelName parse_model_name(const std::string& s) {
  for (const auto& [n, name] : kNames) {
    if (s == name) return n;
  }
  std::string valid;
  for (const auto& [n, name] : kNames) valid += (valid.empty() ? "" : ", ") + std::string(name);
  throw ConfigError("unknown model '" + s + "'; valid models: " + valid);
}

LayerSpec layer_spec(ModelName m) {
  LayerSpec s;
  switch (m) {
    case ModelName::rgcn: return {false, MessageKind::mm_reduced, AggregationKind::relation_mean, UpdateKind::rgcn};
    case ModelName::ggnn: return {false, MessageKind::mm_reduced, AggregationKind::sum, UpdateKind::gru};
    case ModelName::rgat: s.rgat = true; return s;
    case ModelName::sggnn_rv_gat: return {false, MessageKind::gcm, AggregationKind::rv_gat, UpdateKind::sgru};
    case ModelName::ggnn_rv_gat: return {false, MessageKind::gcm, AggregationKind::rv_gat, UpdateKind::gru};
    case ModelName::sggnn_rv_mean: return {false, MessageKind::gcm, AggregationKind::mean, UpdateKind::sgru};
    case ModelName::sggnn_rm_gat: return {false, MessageKind::mm, AggregationKind::rv_gat, UpdateKind::sgru};
  }
  throw ConfigError("unknown model id");
}

// ---------------------------------------------------------------------------
// ModelConfig

ModelConfig ModelConfig::for_model(ModelName m) {
  ModelConfig c;
  c.model = m;
  c.variational_dropout = m == ModelName::ggnn;
  return c;
}

bool ModelConfig::uses_attention_heads() const {
  const LayerSpec s = layer_spec(model);
  return s.rgat || s.aggregation == AggregationKind::rv_gat;
}

void ModelConfig::validate() const {
  if (dim == 0) throw ConfigError("dim must be positive");
  if (layers == 0) throw ConfigError("layers must be at least 1");
  if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (uses_attention_heads() && (heads == 0 || dim % heads != 0)) {
    throw ConfigError(std::to_string(heads) + " heads do not divide dim=" + std::to_string(dim));
  }
  if (layer_spec(model).message == MessageKind::mm_reduced && !layer_spec(model).rgat && d_star == 0) {
    throw ConfigError("d_star must be positive");
  }
  if (num_relations == 0 || num_symbols == 0 || num_classes == 0) {
    throw ConfigError("num_relations, num_symbols and num_classes must be set");
  }
}

std::map<std::string, std::string> ModelConfig::to_map() const {
  return {
      {"model", to_string(model)},
      {"dim", std::to_string(dim)},
      {"layers", std::to_string(layers)},
      {"heads", std::to_string(heads)},
      {"embed_dim", std::to_string(embed_dim)},
      {"dropout", fmt_double(dropout)},
      {"variational_dropout", variational_dropout ? "true" : "false"},
      {"rgat_sigma", rgat_sigma == RgatActivation::relu ? "relu" : "linear"},
      {"rgat_normalization", rgat_normalization == RgatNormalization::softmax ? "softmax" : "ratio"},
      {"d_star", std::to_string(d_star)},
      {"weight_sharing", weight_sharing ? "true" : "false"},
      {"num_relations", std::to_string(num_relations)},
      {"num_symbols", std::to_string(num_symbols)},
      {"num_classes", std::to_string(num_classes)},
  };
}

bool ModelConfig::set(const std::string& key, const std::string& v) {
  if (key == "model") {
    model = parse_model_name(v);
  } else if (key == "dim") {
    dim = parse_size(key, v);
  } else if (key == "layers") {
    layers = parse_size(key, v);
  } else if (key == "heads") {
    heads = parse_size(key, v);
  } else if (key == "embed_dim") {
    embed_dim = parse_size(key, v);
  } else if (key == "dropout") {
    dropout = parse_double(key, v);
  } else if (key == "variational_dropout") {
    variational_dropout = parse_bool(key, v);
  } else if (key == "rgat_sigma") {
    if (v != "relu" && v != "linear") throw ConfigError("rgat_sigma: expected relu or linear, got '" + v + "'");
    rgat_sigma = v == "relu" ? RgatActivation::relu : RgatActivation::linear;
  } else if (key == "rgat_normalization") {
    if (v != "softmax" && v != "ratio") {
      throw ConfigError("rgat_normalization: expected softmax or ratio, got '" + v + "'");
    }
    rgat_normalization = v == "softmax" ? RgatNormalization::softmax : RgatNormalization::ratio;
  } else if (key == "d_star") {
    d_star = parse_size(key, v);
  } else if (key == "weight_sharing") {
    weight_sharing = parse_bool(key, v);
  } else if (key == "num_relations") {
    num_relations = parse_size(key, v);
  } else if (key == "num_symbols") {
    num_symbols = parse_size(key, v);
  } else if (key == "num_classes") {
    num_classes = parse_size(key, v);
  } else {
    return false;
  }
  return true;
}

std::size_t parameter_count(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.dim, r = c.num_relations;
  const LayerSpec s = layer_spec(c.model);
  std::size_t layer = 0;
  if (s.rgat) {
    layer = r * 4 * d * d;
  } else {
    if (s.message == MessageKind::gcm || s.aggregation == AggregationKind::rv_gat) layer += r * d;
    switch (s.message) {
      case MessageKind::mm: layer += r * d * d; break;
      case MessageKind::mm_reduced: layer += 2 * c.d_star * d + r * c.d_star * c.d_star; break;
      case MessageKind::gcm: layer += 2 * d * d + d + 2 * (d * d + d); break;
    }
    if (s.aggregation == AggregationKind::rv_gat) layer += 3 * d * d;
    switch (s.update) {
      case UpdateKind::gru: layer += 3 * (2 * d * d + d); break;
      case UpdateKind::sgru: layer += 6 * (2 * d * d + d); break;
      case UpdateKind::rgcn: layer += d * d + d; break;
    }
  }
  const std::size_t sets = c.weight_sharing ? 1 : c.layers;
  return c.num_symbols * c.embed_dim + d * c.embed_dim + sets * layer + c.num_classes * d + c.num_classes;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config), spec_(layer_spec(config.model)) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.dim, e = config_.embed_dim;
  embedding_ = params_.add("embedding", {config_.num_symbols, e}, uniform_noise(config_.num_symbols * e, 1.0, rng));
  input_proj_ = params_.add("input_projection", {d, e}, glorot_uniform(d, e, rng));
  const LayerDims dims{d, config_.num_relations, config_.heads, config_.d_star};
  const std::size_t sets = config_.weight_sharing ? 1 : config_.layers;
  for (std::size_t k = 0; k < sets; ++k) {
    const std::string prefix = config_.weight_sharing ? "layer." : "layer" + std::to_string(k) + ".";
    layers_.push_back(make_layer(params_, prefix, spec_, dims, rng));
    if (spec_.rgat) {
      layers_.back().rgat.activation = config_.rgat_sigma;
      layers_.back().rgat.normalization = config_.rgat_normalization;
    }
  }
  readout_w_ = params_.add("readout.W", {config_.num_classes, d}, glorot_uniform(config_.num_classes, d, rng));
  readout_b_ = params_.add("readout.b", {config_.num_classes}, std::vector<double>(config_.num_classes, 0.0));
}

std::vector<std::vector<double>> Model::snapshot() const {
  std::vector<std::vector<double>> out;
  for (const auto& p : params_) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void Model::restore(const std::vector<std::vector<double>>& values) {
  if (values.size() != params_.size()) throw ContractError("snapshot does not match the model's parameters");
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto dst = params_[i].tensor.mutable_data();
    if (dst.size() != values[i].size()) throw ContractError("snapshot size mismatch for " + params_[i].name);
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

// ---------------------------------------------------------------------------
// Forward

Tensor initial_states(const Model& model, const EdgeIndex& edges) {
  std::vector<std::size_t> ids(edges.labels.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::int64_t s = edges.labels[i];
    if (s < 0 || static_cast<std::size_t>(s) >= model.config().num_symbols) {
      throw InputError("node symbol " + std::to_string(s) + " outside vocabulary of " +
                       std::to_string(model.config().num_symbols));
    }
    ids[i] = static_cast<std::size_t>(s);
  }
  return linear(gather_rows(model.embedding(), ids), model.input_projection());
}

namespace {

bool variational(const Model& m) {
  return m.config().variational_dropout && !m.spec().rgat && m.spec().update == UpdateKind::gru;
}

void require_rng(const ForwardOptions& opts, const Model& m) {
  if (opts.training && m.config().dropout > 0 && opts.rng == nullptr) {
    throw ContractError("training forward with dropout needs a random stream");
  }
}

}  // namespace

Tensor encode(const Model& model, const Tensor& h0, const EdgeIndex& edges, const ForwardOptions& opts) {
  require_rng(opts, model);
  const double p = model.config().dropout;
  StepContext ctx;
  Tensor h = h0;
  if (variational(model)) {
    if (opts.training && p > 0) {
      ctx.gru_masks.hbar = dropout_mask(h0.shape(), p, *opts.rng);
      ctx.gru_masks.state = dropout_mask(h0.shape(), p, *opts.rng);
    }
  } else {
    h = dropout(h, p, DropoutMode::elementwise, opts.training, opts.rng);
  }
  return run_gnn(h, edges, model.config().layers, model.spec(), model.layers(), ctx);
}

Tensor readout(const Model& model, const Tensor& states, std::span<const std::size_t> nodes,
               const ForwardOptions& opts) {
  require_rng(opts, model);
  for (std::size_t v : nodes) {
    if (v >= states.rows()) throw IndexError("readout node " + std::to_string(v) + " outside graph");
  }
  Tensor picked = gather_rows(states, nodes);
  if (!variational(model)) {
    picked = dropout(picked, model.config().dropout, DropoutMode::elementwise, opts.training, opts.rng);
  }
  return linear(picked, model.readout_weight(), model.readout_bias());
}

Tensor forward(const Model& model, const EdgeIndex& edges, std::span<const std::size_t> nodes,
               const ForwardOptions& opts) {
  return readout(model, encode(model, initial_states(model, edges), edges, opts), nodes, opts);
}

Tensor forward(const Model& model, const RelGraph& graph, std::span<const std::size_t> nodes,
               const ForwardOptions& opts) {
  return forward(model, EdgeIndex::build(graph), nodes, opts);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kMagic = "rgnn-checkpoint";
constexpr int kVersion = 1;

std::string hex(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", x);
  return buf;
}

}  // namespace

void save_checkpoint(std::ostream& os, const Model& model) {
  os << kMagic << ' ' << kVersion << '\n';
  for (const auto& [k, v] : model.config().to_map()) os << "config " << k << '=' << v << '\n';
  for (const auto& p : model.params()) {
    os << "param " << p.name << ' ' << shape_str(p.tensor.shape()) << ' ' << p.tensor.size() << '\n';
    const auto data = p.tensor.data();
    for (std::size_t i = 0; i < data.size(); ++i) os << (i % 8 == 0 ? "" : " ") << hex(data[i]) << (i % 8 == 7 ? "\n" : "");
    if (data.size() % 8 != 0) os << '\n';
  }
  os << "end\n";
  if (!os) throw IoError("failed to write checkpoint");
}

Model load_checkpoint(std::istream& is) {
  LineReader in(is);
  std::string line;
  if (!in.next(line)) throw ParseError("empty checkpoint", 0);
  {
    std::istringstream ls(line);
    std::string magic;
    int version = 0;
    if (!(ls >> magic >> version) || magic != kMagic) throw ParseError("not a checkpoint", in.line_number());
    if (version != kVersion) {
      throw ParseError("unsupported checkpoint version " + std::to_string(version), in.line_number());
    }
  }
  ModelConfig config;
  while (in.peek(line) && line.rfind("config ", 0) == 0) {
    in.next(line);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("bad config line", in.line_number());
    try {
      if (!config.set(line.substr(7, eq - 7), line.substr(eq + 1))) {
        throw ParseError("unknown config key '" + line.substr(7, eq - 7) + "'", in.line_number());
      }
    } catch (const ConfigError& e) {
      throw ParseError(e.what(), in.line_number());
    }
  }
  Model model(config, 0);
  std::size_t next_param = 0;
  while (in.next(line)) {
    if (line == "end") {
      if (next_param != model.params().size()) throw ParseError("checkpoint is missing parameters", in.line_number());
      return model;
    }
    std::istringstream ls(line);
    std::string tag, name, shape;
    std::size_t count = 0;
    if (!(ls >> tag >> name >> shape >> count) || tag != "param") {
      throw ParseError("expected a param line", in.line_number());
    }
    if (next_param >= model.params().size() || model.params()[next_param].name != name) {
      throw ParseError("unexpected parameter '" + name + "'", in.line_number());
    }
    auto dst = model.params()[next_param].tensor.mutable_data();
    if (dst.size() != count) throw ParseError("parameter '" + name + "' has the wrong size", in.line_number());
    std::size_t filled = 0;
    while (filled < count) {
      if (!in.next(line)) throw ParseError("truncated parameter '" + name + "'", in.line_number());
      std::istringstream vs(line);
      std::string tok;
      while (vs >> tok) {
        char* end = nullptr;
        const double x = std::strtod(tok.c_str(), &end);
        if (end != tok.c_str() + tok.size() || filled >= count) {
          throw ParseError("bad value '" + tok + "'", in.line_number());
        }
        dst[filled++] = x;
      }
    }
    ++next_param;
  }
  throw ParseError("checkpoint has no end marker", in.line_number());
}

void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  save_checkpoint(os, model);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  return load_checkpoint(is);
}

}  // namespace rgnn
