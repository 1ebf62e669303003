#pragma once

// Dense reverse-mode autodiff over rank-1 and rank-2 double tensors.
//
// A Tensor is a cheap handle onto a shared graph node. Operations record
// their inputs and a backward closure only when some input requires a
// gradient, so evaluation-mode forwards build no graph at all. The graph
// is owned by the tensors that reference it: once the loss and its
// intermediates go out of scope, the whole graph is released.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rgnn {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_size(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;  // reads self.grad, accumulates into inputs

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor identity(std::size_t n, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  // Rank-1 tensors behave as a single row.
  std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const { return node_->shape.empty() ? 1 : node_->shape.back(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad();
  const char* op_name() const { return node_->op; }

  // Same storage, detached from the graph.
  Tensor detach() const;

  // Backpropagates from this scalar into every reachable leaf that requires
  // a gradient. Leaf gradients accumulate across calls.
  void backward() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  friend Tensor make_result(Shape shape, std::vector<Tensor> inputs, const char* op);

  std::shared_ptr<detail::Node> node_;
};

// Allocates an output node; inputs are recorded only if one of them requires grad.
Tensor make_result(Shape shape, std::vector<Tensor> inputs, const char* op);

void backward(const Tensor& loss);

// While alive, operations on this thread record no graph, whatever their inputs.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b);
// x·Wᵀ (+ bias). W is [out × in]; bias, when defined, is [out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});
Tensor transpose(const Tensor& a);

// ---------------------------------------------------------------------------
// Elementwise. Binary ops need equal shapes, or a rank-1 `b` whose length
// equals the column count of `a` (bias broadcast over rows).

enum class Unary { sigmoid, tanh, celu, relu, one_minus, exp };
enum class Binary { add, sub, mul, div };

Tensor elementwise(Unary kind, const Tensor& x);
Tensor elementwise(Binary kind, const Tensor& a, const Tensor& b);

inline Tensor sigmoid(const Tensor& x) { return elementwise(Unary::sigmoid, x); }
inline Tensor tanh(const Tensor& x) { return elementwise(Unary::tanh, x); }
inline Tensor celu(const Tensor& x) { return elementwise(Unary::celu, x); }
inline Tensor relu(const Tensor& x) { return elementwise(Unary::relu, x); }
inline Tensor one_minus(const Tensor& x) { return elementwise(Unary::one_minus, x); }
inline Tensor exp(const Tensor& x) { return elementwise(Unary::exp, x); }
inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(Binary::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(Binary::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(Binary::mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return elementwise(Binary::div, a, b); }

Tensor scale(const Tensor& x, double factor);
Tensor sum(const Tensor& x);

// out = Σ_i softmax_i(logits) ⊙ values_i, softmax taken per element across
// the parts. All tensors share one shape.
Tensor softmax_mix(const std::vector<Tensor>& logits, const std::vector<Tensor>& values);

// ---------------------------------------------------------------------------
// Shape manipulation

// axis 0 stacks rows, axis 1 joins columns. Rank-1 parts only support axis 0.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
std::vector<Tensor> split(const Tensor& t, const std::vector<std::size_t>& sizes, std::size_t axis);
// Columns [begin, begin + count) of a rank-2 tensor.
Tensor slice_cols(const Tensor& t, std::size_t begin, std::size_t count);

// ---------------------------------------------------------------------------
// Normalization and loss

Tensor softmax(const Tensor& x, std::size_t axis);

// Mean over the batch of −Σ_c q_c log softmax(logits)_c with q the smoothed
// one-hot target distribution.
Tensor cross_entropy_label_smoothed(const Tensor& logits, std::span<const std::size_t> targets,
                                    double smoothing);

// ---------------------------------------------------------------------------
// Sparse row movement used by message passing

// out[i] = x[index[i]]
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
// out[segment[i]] += x[i]; out has `segments` rows
Tensor segment_sum(const Tensor& x, std::span<const std::size_t> segment, std::size_t segments);
// out[i] = weight[i] * x[i]
Tensor scale_rows(const Tensor& x, std::span<const double> weight);
// out[i, h] = factor * <a[i, head h], b[i, head h]>; heads are equal column blocks
Tensor head_dot(const Tensor& a, const Tensor& b, std::size_t heads, double factor);
// Per (segment, column) softmax over the rows of that segment.
Tensor segment_softmax(const Tensor& x, std::span<const std::size_t> segment, std::size_t segments);
// Per (segment, column) division by the segment sum, no exponentiation.
Tensor segment_normalize(const Tensor& x, std::span<const std::size_t> segment,
                         std::size_t segments);
// out[i, j] = w[i, head(j)] * v[i, j]
Tensor head_scale(const Tensor& v, const Tensor& w);

// ---------------------------------------------------------------------------
// Dropout

class Rng;

enum class DropoutMode { elementwise, variational };

// Inverted-dropout keep mask with survivors scaled by 1/(1-rate). Not part of
// any graph; reuse one mask across steps for variational dropout.
Tensor dropout_mask(const Shape& shape, double rate, Rng& rng);

// Training: elementwise mode samples a fresh mask, variational mode applies
// `mask`. Evaluation (training == false) or rate == 0 is the identity.
Tensor dropout(const Tensor& x, double rate, DropoutMode mode, bool training, Rng* rng,
               const Tensor& mask = {});

}  // namespace rgnn
