#include "rgnn/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "rgnn/errors.hpp"
#include "rgnn/random.hpp"

namespace rgnn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

CMatMap as_mat(const detail::Node& n, std::size_t rows, std::size_t cols) {
  return CMatMap(n.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
CMatMap grad_mat(const detail::Node& n, std::size_t rows, std::size_t cols) {
  return CMatMap(n.grad.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MatMap acc_mat(detail::Node& n, std::size_t rows, std::size_t cols) {
  n.ensure_grad();
  return MatMap(n.grad.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

std::size_t rows_of(const Shape& s) { return s.size() == 2 ? s[0] : 1; }
std::size_t cols_of(const Shape& s) { return s.empty() ? 1 : s.back(); }

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a rank-2 tensor, got " +
                         shape_str(t.shape()));
  }
}

bool needs(const detail::Node& n) { return n.requires_grad; }

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "×" : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = std::make_shared<detail::Node>();
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  n->data.assign(shape_size(shape), value);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(shape_size(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  Tensor t = full(std::move(shape), 0.0, requires_grad);
  t.node_->data = std::move(values);
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) { return full({1}, v, requires_grad); }

Tensor Tensor::identity(std::size_t n, bool requires_grad) {
  Tensor t = zeros({n, n}, requires_grad);
  for (std::size_t i = 0; i < n; ++i) t.node_->data[i * n + i] = 1.0;
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on a tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<detail::Node>();
  n->shape = node_->shape;
  n->data = node_->data;
  return Tensor(std::move(n));
}

namespace {
thread_local bool grad_mode = true;
}

NoGradGuard::NoGradGuard() : previous_(grad_mode) { grad_mode = false; }
NoGradGuard::~NoGradGuard() { grad_mode = previous_; }
bool grad_enabled() { return grad_mode; }

Tensor make_result(Shape shape, std::vector<Tensor> inputs, const char* op) {
  auto n = std::make_shared<detail::Node>();
  n->data.assign(shape_size(shape), 0.0);
  n->shape = std::move(shape);
  n->op = op;
  for (const auto& in : inputs) {
    if (grad_mode && in.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.node_);
  }
  return Tensor(std::move(n));
}

void Tensor::backward() const { rgnn::backward(*this); }

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (n->backward) n->grad.assign(n->data.size(), 0.0);
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) {
      n->backward(*n);
      // Interior gradients are consumed; release them.
      std::vector<double>().swap(n->grad);
    }
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  Tensor out = make_result({m, n}, {a, b}, "matmul");
  MatMap(out.mutable_data().data(), m, n).noalias() = as_mat(*a.node(), m, k) * as_mat(*b.node(), k, n);
  if (out.requires_grad()) {
    out.node()->backward = [m, k, n](detail::Node& self) {
      auto& A = *self.inputs[0];
      auto& B = *self.inputs[1];
      auto g = grad_mat(self, m, n);
      if (needs(A)) acc_mat(A, m, k).noalias() += g * as_mat(B, k, n).transpose();
      if (needs(B)) acc_mat(B, k, n).noalias() += as_mat(A, m, k).transpose() * g;
    };
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_matrix(w, "linear");
  const std::size_t out_dim = w.rows(), in_dim = w.cols();
  if (x.cols() != in_dim) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.cols() != out_dim)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  const std::size_t n = x.rows();
  Shape shape = x.rank() == 2 ? Shape{n, out_dim} : Shape{out_dim};
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  Tensor out = make_result(shape, inputs, "linear");
  auto y = MatMap(out.mutable_data().data(), n, out_dim);
  y.noalias() = as_mat(*x.node(), n, in_dim) * as_mat(*w.node(), out_dim, in_dim).transpose();
  if (bias.defined()) y.rowwise() += as_mat(*bias.node(), 1, out_dim).row(0);
  if (out.requires_grad()) {
    const bool has_bias = bias.defined();
    out.node()->backward = [n, in_dim, out_dim, has_bias](detail::Node& self) {
      auto& X = *self.inputs[0];
      auto& W = *self.inputs[1];
      auto g = grad_mat(self, n, out_dim);
      if (needs(X)) acc_mat(X, n, in_dim).noalias() += g * as_mat(W, out_dim, in_dim);
      if (needs(W)) acc_mat(W, out_dim, in_dim).noalias() += g.transpose() * as_mat(X, n, in_dim);
      // Plain loop: Eigen's vectorized column sums vary in the last bit with
      // buffer alignment, which breaks run-to-run reproducibility.
      if (has_bias && needs(*self.inputs[2])) {
        self.inputs[2]->ensure_grad();
        auto& gb = self.inputs[2]->grad;
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < out_dim; ++c) gb[c] += self.grad[r * out_dim + c];
      }
    };
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = make_result({n, m}, {a}, "transpose");
  MatMap(out.mutable_data().data(), n, m) = as_mat(*a.node(), m, n).transpose();
  if (out.requires_grad()) {
    out.node()->backward = [m, n](detail::Node& self) {
      acc_mat(*self.inputs[0], m, n) += grad_mat(self, n, m).transpose();
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor elementwise(Unary kind, const Tensor& x) {
  static constexpr const char* names[] = {"sigmoid", "tanh", "celu", "relu", "one_minus", "exp"};
  Tensor out = make_result(x.shape(), {x}, names[static_cast<int>(kind)]);
  auto in = x.data();
  auto y = out.mutable_data();
  const std::size_t n = in.size();
  switch (kind) {
    case Unary::sigmoid:
      for (std::size_t i = 0; i < n; ++i) y[i] = stable_sigmoid(in[i]);
      break;
    case Unary::tanh:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(in[i]);
      break;
    case Unary::celu:
      // alpha = 1: max(0, x) + min(0, exp(x) - 1)
      for (std::size_t i = 0; i < n; ++i) y[i] = in[i] > 0 ? in[i] : std::expm1(in[i]);
      break;
    case Unary::relu:
      for (std::size_t i = 0; i < n; ++i) y[i] = in[i] > 0 ? in[i] : 0.0;
      break;
    case Unary::one_minus:
      for (std::size_t i = 0; i < n; ++i) y[i] = 1.0 - in[i];
      break;
    case Unary::exp:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(in[i]);
      break;
  }
  if (out.requires_grad()) {
    out.node()->backward = [kind](detail::Node& self) {
      auto& X = *self.inputs[0];
      X.ensure_grad();
      const auto& g = self.grad;
      const auto& y = self.data;
      const auto& x = X.data;
      auto& dx = X.grad;
      const std::size_t n = g.size();
      switch (kind) {
        case Unary::sigmoid:
          for (std::size_t i = 0; i < n; ++i) dx[i] += g[i] * y[i] * (1.0 - y[i]);
          break;
        case Unary::tanh:
          for (std::size_t i = 0; i < n; ++i) dx[i] += g[i] * (1.0 - y[i] * y[i]);
          break;
        case Unary::celu:
          for (std::size_t i = 0; i < n; ++i) dx[i] += g[i] * (x[i] > 0 ? 1.0 : y[i] + 1.0);
          break;
        case Unary::relu:
          for (std::size_t i = 0; i < n; ++i) dx[i] += x[i] > 0 ? g[i] : 0.0;
          break;
        case Unary::one_minus:
          for (std::size_t i = 0; i < n; ++i) dx[i] -= g[i];
          break;
        case Unary::exp:
          for (std::size_t i = 0; i < n; ++i) dx[i] += g[i] * y[i];
          break;
      }
    };
  }
  return out;
}

Tensor elementwise(Binary kind, const Tensor& a, const Tensor& b) {
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  const bool broadcast = a.shape() != b.shape();
  if (broadcast && !(b.rank() == 1 && a.rank() == 2 && b.cols() == a.cols())) {
    throw DimensionError(std::string(names[static_cast<int>(kind)]) + ": cannot broadcast " +
                         shape_str(b.shape()) + " onto " + shape_str(a.shape()));
  }
  Tensor out = make_result(a.shape(), {a, b}, names[static_cast<int>(kind)]);
  auto x = a.data();
  auto z = b.data();
  auto y = out.mutable_data();
  const std::size_t n = y.size(), width = b.size();
  auto bj = [&](std::size_t i) { return broadcast ? z[i % width] : z[i]; };
  switch (kind) {
    case Binary::add:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] + bj(i);
      break;
    case Binary::sub:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] - bj(i);
      break;
    case Binary::mul:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * bj(i);
      break;
    case Binary::div:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] / bj(i);
      break;
  }
  if (out.requires_grad()) {
    out.node()->backward = [kind, broadcast, width](detail::Node& self) {
      auto& A = *self.inputs[0];
      auto& B = *self.inputs[1];
      const auto& g = self.grad;
      const std::size_t n = g.size();
      auto bi = [&](std::size_t i) { return broadcast ? i % width : i; };
      if (needs(A)) {
        A.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          switch (kind) {
            case Binary::add:
            case Binary::sub: A.grad[i] += g[i]; break;
            case Binary::mul: A.grad[i] += g[i] * B.data[bi(i)]; break;
            case Binary::div: A.grad[i] += g[i] / B.data[bi(i)]; break;
          }
        }
      }
      if (needs(B)) {
        B.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t j = bi(i);
          switch (kind) {
            case Binary::add: B.grad[j] += g[i]; break;
            case Binary::sub: B.grad[j] -= g[i]; break;
            case Binary::mul: B.grad[j] += g[i] * A.data[i]; break;
            case Binary::div: B.grad[j] -= g[i] * self.data[i] / B.data[j]; break;
          }
        }
      }
    };
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = make_result(x.shape(), {x}, "scale");
  auto in = x.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = factor * in[i];
  if (out.requires_grad()) {
    out.node()->backward = [factor](detail::Node& self) {
      auto& X = *self.inputs[0];
      X.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) X.grad[i] += factor * self.grad[i];
    };
  }
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = make_result({1}, {x}, "sum");
  auto in = x.data();
  out.mutable_data()[0] = std::accumulate(in.begin(), in.end(), 0.0);
  if (out.requires_grad()) {
    out.node()->backward = [](detail::Node& self) {
      auto& X = *self.inputs[0];
      X.ensure_grad();
      for (auto& v : X.grad) v += self.grad[0];
    };
  }
  return out;
}

Tensor softmax_mix(const std::vector<Tensor>& logits, const std::vector<Tensor>& values) {
  const std::size_t parts = logits.size();
  if (parts == 0 || values.size() != parts) {
    throw DimensionError("softmax_mix: need equal, nonzero numbers of logits and values");
  }
  const Shape& shape = logits[0].shape();
  for (std::size_t p = 0; p < parts; ++p) {
    if (logits[p].shape() != shape || values[p].shape() != shape) {
      throw DimensionError("softmax_mix: all parts must have shape " + shape_str(shape));
    }
  }
  std::vector<Tensor> inputs(logits);
  inputs.insert(inputs.end(), values.begin(), values.end());
  Tensor out = make_result(shape, inputs, "softmax_mix");
  const std::size_t n = shape_size(shape);
  // Gates kept for the backward pass, part-major.
  auto gates = std::make_shared<std::vector<double>>(parts * n);
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < parts; ++p) mx = std::max(mx, logits[p][i]);
    double total = 0;
    for (std::size_t p = 0; p < parts; ++p) {
      double e = std::exp(logits[p][i] - mx);
      (*gates)[p * n + i] = e;
      total += e;
    }
    double acc = 0;
    for (std::size_t p = 0; p < parts; ++p) {
      double& gte = (*gates)[p * n + i];
      gte /= total;
      acc += gte * values[p][i];
    }
    y[i] = acc;
  }
  if (out.requires_grad()) {
    out.node()->backward = [gates, parts, n](detail::Node& self) {
      const auto& g = self.grad;
      for (std::size_t i = 0; i < n; ++i) {
        double mean = 0;  // Σ_p gate_p · v_p
        for (std::size_t p = 0; p < parts; ++p) mean += (*gates)[p * n + i] * self.inputs[parts + p]->data[i];
        for (std::size_t p = 0; p < parts; ++p) {
          const double gate = (*gates)[p * n + i];
          auto& L = *self.inputs[p];
          auto& V = *self.inputs[parts + p];
          if (needs(L)) {
            L.ensure_grad();
            L.grad[i] += g[i] * gate * (V.data[i] - mean);
          }
          if (needs(V)) {
            V.ensure_grad();
            V.grad[i] += g[i] * gate;
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no parts");
  if (parts.size() == 1) return parts[0];
  const std::size_t rank = parts[0].rank();
  if (axis >= rank) throw DimensionError("concat: axis " + std::to_string(axis) + " out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw DimensionError("concat: mixed ranks");
    for (std::size_t d = 0; d < rank; ++d) {
      if (d != axis && p.shape()[d] != parts[0].shape()[d]) {
        throw DimensionError("concat: " + shape_str(p.shape()) + " does not match " +
                             shape_str(parts[0].shape()) + " off axis " + std::to_string(axis));
      }
    }
    total += p.shape()[axis];
  }
  Shape shape = parts[0].shape();
  shape[axis] = total;
  Tensor out = make_result(shape, parts, "concat");
  const std::size_t rows = rows_of(shape), cols = cols_of(shape);
  auto y = out.mutable_data();
  // Row-major: axis 0 (or rank 1) is a plain append; axis 1 interleaves blocks.
  const bool rowwise = rank == 1 || axis == 0;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    auto src = p.data();
    if (rowwise) {
      std::copy(src.begin(), src.end(), y.begin() + static_cast<std::ptrdiff_t>(offset));
      offset += src.size();
    } else {
      const std::size_t w = p.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(r * w), w,
                    y.begin() + static_cast<std::ptrdiff_t>(r * cols + offset));
      }
      offset += w;
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [rowwise, rows, cols](detail::Node& self) {
      std::size_t offset = 0;
      for (auto& in : self.inputs) {
        const std::size_t w = cols_of(in->shape);
        if (needs(*in)) {
          in->ensure_grad();
          if (rowwise) {
            for (std::size_t i = 0; i < in->data.size(); ++i) in->grad[i] += self.grad[offset + i];
          } else {
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t c = 0; c < w; ++c) in->grad[r * w + c] += self.grad[r * cols + offset + c];
            }
          }
        }
        offset += rowwise ? in->data.size() : w;
      }
    };
  }
  return out;
}

Tensor slice_cols(const Tensor& t, std::size_t begin, std::size_t count) {
  require_matrix(t, "slice_cols");
  const std::size_t rows = t.rows(), cols = t.cols();
  if (count == 0 || begin + count > cols) {
    throw DimensionError("slice_cols: columns [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + shape_str(t.shape()));
  }
  Tensor out = make_result({rows, count}, {t}, "slice_cols");
  auto src = t.data();
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < count; ++c) y[r * count + c] = src[r * cols + begin + c];
  }
  if (out.requires_grad()) {
    out.node()->backward = [rows, cols, begin, count](detail::Node& self) {
      auto& X = *self.inputs[0];
      X.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < count; ++c) X.grad[r * cols + begin + c] += self.grad[r * count + c];
      }
    };
  }
  return out;
}

namespace {

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t count) {
  const std::size_t cols = t.cols();
  Shape shape = t.rank() == 2 ? Shape{count, cols} : Shape{count};
  const std::size_t width = t.rank() == 2 ? cols : 1;
  Tensor out = make_result(shape, {t}, "slice_rows");
  auto src = t.data();
  std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(begin * width), count * width,
              out.mutable_data().begin());
  if (out.requires_grad()) {
    out.node()->backward = [begin, width](detail::Node& self) {
      auto& X = *self.inputs[0];
      X.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) X.grad[begin * width + i] += self.grad[i];
    };
  }
  return out;
}

}  // namespace

std::vector<Tensor> split(const Tensor& t, const std::vector<std::size_t>& sizes, std::size_t axis) {
  if (axis >= t.rank()) throw DimensionError("split: axis " + std::to_string(axis) + " out of range");
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total != t.shape()[axis]) {
    throw DimensionError("split: sizes sum to " + std::to_string(total) + " but axis has length " +
                         std::to_string(t.shape()[axis]));
  }
  std::vector<Tensor> parts;
  std::size_t offset = 0;
  for (auto s : sizes) {
    if (s == 0) throw DimensionError("split: zero-sized part");
    parts.push_back(axis == 1 ? slice_cols(t, offset, s) : slice_rows(t, offset, s));
    offset += s;
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Softmax and loss

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range");
  const std::size_t rows = x.rows(), cols = x.cols();
  // Treat rank 1 as one row reduced along its only axis.
  const bool along_rows = x.rank() == 1 || axis == 1;
  Tensor out = make_result(x.shape(), {x}, "softmax");
  auto in = x.data();
  auto y = out.mutable_data();
  const std::size_t groups = along_rows ? rows : cols, len = along_rows ? cols : rows;
  auto idx = [=](std::size_t g, std::size_t i) { return along_rows ? g * cols + i : i * cols + g; };
  for (std::size_t g = 0; g < groups; ++g) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, in[idx(g, i)]);
    double total = 0;
    for (std::size_t i = 0; i < len; ++i) total += (y[idx(g, i)] = std::exp(in[idx(g, i)] - mx));
    for (std::size_t i = 0; i < len; ++i) y[idx(g, i)] /= total;
  }
  if (out.requires_grad()) {
    out.node()->backward = [groups, len, idx](detail::Node& self) {
      auto& X = *self.inputs[0];
      X.ensure_grad();
      for (std::size_t g = 0; g < groups; ++g) {
        double dot = 0;
        for (std::size_t i = 0; i < len; ++i) dot += self.grad[idx(g, i)] * self.data[idx(g, i)];
        for (std::size_t i = 0; i < len; ++i) {
          X.grad[idx(g, i)] += self.data[idx(g, i)] * (self.grad[idx(g, i)] - dot);
        }
      }
    };
  }
  return out;
}

Tensor cross_entropy_label_smoothed(const Tensor& logits, std::span<const std::size_t> targets,
                                    double smoothing) {
  require_matrix(logits, "cross_entropy_label_smoothed");
  const std::size_t batch = logits.rows(), classes = logits.cols();
  if (targets.size() != batch) {
    throw DimensionError("cross_entropy_label_smoothed: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(batch) + " rows");
  }
  if (!(smoothing >= 0.0 && smoothing < 1.0)) {
    throw ContractError("cross_entropy_label_smoothed: smoothing must lie in [0, 1)");
  }
  for (auto t : targets) {
    if (t >= classes) {
      throw IndexError("cross_entropy_label_smoothed: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
  }
  Tensor out = make_result({1}, {logits}, "cross_entropy");
  const double off = smoothing / static_cast<double>(classes);
  const double on = 1.0 - smoothing + off;
  auto in = logits.data();
  auto probs = std::make_shared<std::vector<double>>(batch * classes);
  double loss = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = in.data() + b * classes;
    double mx = *std::max_element(row, row + classes);
    double total = 0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(row[c] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < classes; ++c) {
      const double logp = row[c] - lse;
      (*probs)[b * classes + c] = std::exp(logp);
      loss -= (c == targets[b] ? on : off) * logp;
    }
  }
  out.mutable_data()[0] = loss / static_cast<double>(batch);
  if (out.requires_grad()) {
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    out.node()->backward = [probs, tgt = std::move(tgt), batch, classes, on, off](detail::Node& self) {
      auto& X = *self.inputs[0];
      X.ensure_grad();
      const double g = self.grad[0] / static_cast<double>(batch);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < classes; ++c) {
          const double q = c == tgt[b] ? on : off;
          X.grad[b * classes + c] += g * ((*probs)[b * classes + c] - q);
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sparse row movement

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  require_matrix(x, "gather_rows");
  const std::size_t n = x.rows(), d = x.cols();
  for (auto i : index) {
    if (i >= n) throw IndexError("gather_rows: row " + std::to_string(i) + " of " + shape_str(x.shape()));
  }
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  Tensor out = make_result({index.size(), d}, {x}, "gather_rows");
  auto src = x.data();
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < index.size(); ++r) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(index[r] * d), d,
                y.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  if (out.requires_grad()) {
    std::vector<std::size_t> idx(index.begin(), index.end());
    out.node()->backward = [idx = std::move(idx), d](detail::Node& self) {
      auto& X = *self.inputs[0];
      X.ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        double* dst = X.grad.data() + idx[r] * d;
        const double* g = self.grad.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += g[c];
      }
    };
  }
  return out;
}

Tensor segment_sum(const Tensor& x, std::span<const std::size_t> segment, std::size_t segments) {
  require_matrix(x, "segment_sum");
  const std::size_t e = x.rows(), d = x.cols();
  if (segment.size() != e) {
    throw DimensionError("segment_sum: " + std::to_string(segment.size()) + " segment ids for " +
                         std::to_string(e) + " rows");
  }
  for (auto s : segment) {
    if (s >= segments) throw IndexError("segment_sum: segment " + std::to_string(s) + " out of range");
  }
  Tensor out = make_result({segments, d}, {x}, "segment_sum");
  auto src = x.data();
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < e; ++r) {
    double* dst = y.data() + segment[r] * d;
    const double* s = src.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) dst[c] += s[c];
  }
  if (out.requires_grad()) {
    std::vector<std::size_t> seg(segment.begin(), segment.end());
    out.node()->backward = [seg = std::move(seg), d](detail::Node& self) {
      auto& X = *self.inputs[0];
      X.ensure_grad();
      for (std::size_t r = 0; r < seg.size(); ++r) {
        const double* g = self.grad.data() + seg[r] * d;
        double* dst = X.grad.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += g[c];
      }
    };
  }
  return out;
}

Tensor scale_rows(const Tensor& x, std::span<const double> weight) {
  require_matrix(x, "scale_rows");
  const std::size_t n = x.rows(), d = x.cols();
  if (weight.size() != n) throw DimensionError("scale_rows: weight count does not match rows");
  Tensor out = make_result(x.shape(), {x}, "scale_rows");
  auto src = x.data();
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) y[r * d + c] = weight[r] * src[r * d + c];
  }
  if (out.requires_grad()) {
    std::vector<double> w(weight.begin(), weight.end());
    out.node()->backward = [w = std::move(w), d](detail::Node& self) {
      auto& X = *self.inputs[0];
      X.ensure_grad();
      for (std::size_t r = 0; r < w.size(); ++r) {
        for (std::size_t c = 0; c < d; ++c) X.grad[r * d + c] += w[r] * self.grad[r * d + c];
      }
    };
  }
  return out;
}

Tensor head_dot(const Tensor& a, const Tensor& b, std::size_t heads, double factor) {
  require_matrix(a, "head_dot");
  if (a.shape() != b.shape()) {
    throw DimensionError("head_dot: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t e = a.rows(), d = a.cols();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("head_dot: " + std::to_string(heads) + " heads do not divide width " + std::to_string(d));
  }
  const std::size_t w = d / heads;
  Tensor out = make_result({e, heads}, {a, b}, "head_dot");
  auto x = a.data();
  auto z = b.data();
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < e; ++r) {
    for (std::size_t h = 0; h < heads; ++h) {
      double acc = 0;
      for (std::size_t c = h * w; c < (h + 1) * w; ++c) acc += x[r * d + c] * z[r * d + c];
      y[r * heads + h] = factor * acc;
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [e, d, w, heads, factor](detail::Node& self) {
      auto& A = *self.inputs[0];
      auto& B = *self.inputs[1];
      if (needs(A)) A.ensure_grad();
      if (needs(B)) B.ensure_grad();
      for (std::size_t r = 0; r < e; ++r) {
        for (std::size_t h = 0; h < heads; ++h) {
          const double g = factor * self.grad[r * heads + h];
          for (std::size_t c = h * w; c < (h + 1) * w; ++c) {
            if (needs(A)) A.grad[r * d + c] += g * B.data[r * d + c];
            if (needs(B)) B.grad[r * d + c] += g * A.data[r * d + c];
          }
        }
      }
    };
  }
  return out;
}

Tensor segment_softmax(const Tensor& x, std::span<const std::size_t> segment, std::size_t segments) {
  require_matrix(x, "segment_softmax");
  const std::size_t e = x.rows(), h = x.cols();
  if (segment.size() != e) throw DimensionError("segment_softmax: segment count does not match rows");
  std::vector<double> mx(segments * h, -std::numeric_limits<double>::infinity());
  std::vector<double> total(segments * h, 0.0);
  auto in = x.data();
  for (std::size_t r = 0; r < e; ++r) {
    if (segment[r] >= segments) throw IndexError("segment_softmax: segment out of range");
    for (std::size_t c = 0; c < h; ++c) mx[segment[r] * h + c] = std::max(mx[segment[r] * h + c], in[r * h + c]);
  }
  Tensor out = make_result(x.shape(), {x}, "segment_softmax");
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < e; ++r) {
    for (std::size_t c = 0; c < h; ++c) {
      const std::size_t s = segment[r] * h + c;
      total[s] += (y[r * h + c] = std::exp(in[r * h + c] - mx[s]));
    }
  }
  for (std::size_t r = 0; r < e; ++r) {
    for (std::size_t c = 0; c < h; ++c) y[r * h + c] /= total[segment[r] * h + c];
  }
  if (out.requires_grad()) {
    std::vector<std::size_t> seg(segment.begin(), segment.end());
    out.node()->backward = [seg = std::move(seg), segments, h](detail::Node& self) {
      auto& X = *self.inputs[0];
      X.ensure_grad();
      std::vector<double> dot(segments * h, 0.0);
      for (std::size_t r = 0; r < seg.size(); ++r) {
        for (std::size_t c = 0; c < h; ++c) dot[seg[r] * h + c] += self.grad[r * h + c] * self.data[r * h + c];
      }
      for (std::size_t r = 0; r < seg.size(); ++r) {
        for (std::size_t c = 0; c < h; ++c) {
          X.grad[r * h + c] += self.data[r * h + c] * (self.grad[r * h + c] - dot[seg[r] * h + c]);
        }
      }
    };
  }
  return out;
}

Tensor segment_normalize(const Tensor& x, std::span<const std::size_t> segment,
                         std::size_t segments) {
  require_matrix(x, "segment_normalize");
  const std::size_t e = x.rows(), h = x.cols();
  if (segment.size() != e) throw DimensionError("segment_normalize: segment count does not match rows");
  auto in = x.data();
  auto total = std::make_shared<std::vector<double>>(segments * h, 0.0);
  for (std::size_t r = 0; r < e; ++r) {
    if (segment[r] >= segments) throw IndexError("segment_normalize: segment out of range");
    for (std::size_t c = 0; c < h; ++c) (*total)[segment[r] * h + c] += in[r * h + c];
  }
  Tensor out = make_result(x.shape(), {x}, "segment_normalize");
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < e; ++r) {
    for (std::size_t c = 0; c < h; ++c) y[r * h + c] = in[r * h + c] / (*total)[segment[r] * h + c];
  }
  if (out.requires_grad()) {
    std::vector<std::size_t> seg(segment.begin(), segment.end());
    out.node()->backward = [seg = std::move(seg), total, segments, h](detail::Node& self) {
      auto& X = *self.inputs[0];
      X.ensure_grad();
      // y = x / S  =>  dx_r = (g_r - Σ_seg g·y) / S
      std::vector<double> dot(segments * h, 0.0);
      for (std::size_t r = 0; r < seg.size(); ++r) {
        for (std::size_t c = 0; c < h; ++c) dot[seg[r] * h + c] += self.grad[r * h + c] * self.data[r * h + c];
      }
      for (std::size_t r = 0; r < seg.size(); ++r) {
        for (std::size_t c = 0; c < h; ++c) {
          const std::size_t s = seg[r] * h + c;
          X.grad[r * h + c] += (self.grad[r * h + c] - dot[s]) / (*total)[s];
        }
      }
    };
  }
  return out;
}

Tensor head_scale(const Tensor& v, const Tensor& w) {
  require_matrix(v, "head_scale");
  require_matrix(w, "head_scale");
  const std::size_t e = v.rows(), d = v.cols(), heads = w.cols();
  if (w.rows() != e || heads == 0 || d % heads != 0) {
    throw DimensionError("head_scale: weights " + shape_str(w.shape()) + " do not fit values " +
                         shape_str(v.shape()));
  }
  const std::size_t width = d / heads;
  Tensor out = make_result(v.shape(), {v, w}, "head_scale");
  auto x = v.data();
  auto a = w.data();
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < e; ++r) {
    for (std::size_t c = 0; c < d; ++c) y[r * d + c] = a[r * heads + c / width] * x[r * d + c];
  }
  if (out.requires_grad()) {
    out.node()->backward = [e, d, heads, width](detail::Node& self) {
      auto& V = *self.inputs[0];
      auto& W = *self.inputs[1];
      if (needs(V)) V.ensure_grad();
      if (needs(W)) W.ensure_grad();
      for (std::size_t r = 0; r < e; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
          const double g = self.grad[r * d + c];
          if (needs(V)) V.grad[r * d + c] += g * W.data[r * heads + c / width];
          if (needs(W)) W.grad[r * heads + c / width] += g * V.data[r * d + c];
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dropout

Tensor dropout_mask(const Shape& shape, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  Tensor mask = Tensor::zeros(shape);
  const double keep = 1.0 / (1.0 - rate);
  for (auto& m : mask.mutable_data()) m = rng.uniform() < rate ? 0.0 : keep;
  return mask;
}

Tensor dropout(const Tensor& x, double rate, DropoutMode mode, bool training, Rng* rng, const Tensor& mask) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  if (mode == DropoutMode::variational) {
    if (!mask.defined() || mask.shape() != x.shape()) {
      throw ContractError("variational dropout needs a mask of shape " + shape_str(x.shape()));
    }
    return mul(x, mask);
  }
  if (rng == nullptr) throw ContractError("elementwise dropout in training mode needs an Rng");
  return mul(x, dropout_mask(x.shape(), rate, *rng));
}

}  // namespace rgnn
