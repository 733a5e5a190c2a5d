#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every forward operation appends a node to a dynamic tape (the graph is
// rebuilt on each forward pass). `backward` visits the nodes reachable from
// a scalar loss in exact reverse creation order. Vectors are 1xN matrices
// and scalars are 1x1.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace scale::ad {

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor row_vector(std::vector<double> values);
  static Tensor scalar(double value) { return Tensor(1, 1, value); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::vector<std::size_t> shape() const { return {rows_, cols_}; }
  std::string shape_string() const;

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

struct Node;

// Handle to a tape node. Copies share the node, so a parameter held by a
// model and the same parameter referenced in a graph are one object.
class Variable {
 public:
  Variable() = default;
  explicit Variable(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const;
  Tensor& mutable_value();
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const;

  bool requires_grad() const;
  bool has_grad() const;
  const Tensor& grad() const;
  void zero_grad();

  // Same values, no history, no gradient.
  Variable detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  static Variable from_node(std::shared_ptr<Node> node);

 private:
  std::shared_ptr<Node> node_;
};

struct Node {
  using BackwardFn = std::function<void(Node&)>;

  Tensor value;
  Tensor grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  bool is_leaf() const { return inputs.empty(); }
  void accumulate(const Tensor& g);
};

// While alive, operations record no history on this thread.
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

Variable matmul(const Variable& a, const Variable& b);
Variable add(const Variable& a, const Variable& b);
Variable sub(const Variable& a, const Variable& b);
Variable mul(const Variable& a, const Variable& b);
// a[m x n] + r[1 x n] broadcast over rows.
Variable add_row(const Variable& a, const Variable& r);
// a[m x n] * r[1 x n] broadcast over rows.
Variable mul_row(const Variable& a, const Variable& r);
Variable scale(const Variable& a, double c);
Variable neg(const Variable& a);
Variable relu(const Variable& a);
Variable sum(const Variable& a);
Variable mean(const Variable& a);

// v / (||v||_2 + eps) for a row vector v.
Variable normalize(const Variable& v, double eps);

// Mean over rows of -log softmax(logits)[target]. Only the first
// `num_valid` columns take part in the softmax; the rest are masked out
// (probability zero, zero gradient). num_valid == 0 means all columns.
Variable softmax_cross_entropy(const Variable& logits, std::span<const int> targets,
                               std::size_t num_valid = 0);

// Mean over rows of -sum_c q[c] log softmax(logits)[c], with a target
// distribution `q` of shape [1 x C] (broadcast) or [B x C].
Variable soft_cross_entropy(const Variable& logits, const Tensor& q, std::size_t num_valid = 0);

// Mean over rows of the Euclidean distance between matching rows.
Variable l2_distance(const Variable& a, const Variable& b);

Variable select_rows(const Variable& a, std::span<const std::size_t> rows);
Variable concat_rows(std::span<const Variable> parts);

// Row-wise softmax over the first `num_valid` columns; masked columns are 0.
Tensor softmax(const Tensor& logits, std::size_t num_valid = 0);

// Populates grads of every requires_grad node reachable from `loss`.
// Leaf gradients accumulate across calls until zeroed.
void backward(const Variable& loss);

// p <- p - lr * grad(p), then grad(p) is cleared.
void sgd_step(std::span<Variable> params, double lr);
void zero_grad(std::span<Variable> params);

}  // namespace scale::ad
