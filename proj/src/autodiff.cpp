#include "scale/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

#include <Eigen/Core>
#include <fmt/core.h>

#include "scale/errors.hpp"

namespace scale::ad {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

MutMap as_matrix(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

std::atomic<std::uint64_t> next_node_id{1};
thread_local bool grad_mode = true;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(
        fmt::format("{}: shape mismatch {} vs {}", op, a.shape_string(), b.shape_string()));
  }
}

// Builds an output node; history is kept only when some input needs it.
Variable make_result(Tensor value, std::vector<Variable> inputs, Node::BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->id = next_node_id.fetch_add(1);
  bool needs = false;
  if (grad_mode) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.shared());
    node->backward = std::move(fn);
  }
  return Variable::from_node(std::move(node));
}

std::size_t valid_columns(std::size_t num_valid, std::size_t cols, const char* op) {
  if (num_valid == 0) return cols;
  if (num_valid > cols) {
    throw IndexError(fmt::format("{}: {} valid columns requested of {}", op, num_valid, cols));
  }
  return num_valid;
}

// log softmax over the first `valid` columns of every row.
Tensor log_softmax(const Tensor& logits, std::size_t valid) {
  Tensor out(logits.rows(), logits.cols(), 0.0);
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row(r);
    double peak = in[0];
    for (std::size_t c = 1; c < valid; ++c) peak = std::max(peak, in[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < valid; ++c) total += std::exp(in[c] - peak);
    const double lse = peak + std::log(total);
    for (std::size_t c = 0; c < valid; ++c) out(r, c) = in[c] - lse;
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError(fmt::format("tensor of shape [{}x{}] given {} values", rows_, cols_,
                                     data_.size()));
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged rows in Tensor::from_rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(r, c, std::move(data));
}

Tensor Tensor::row_vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor(1, n, std::move(values));
}

std::string Tensor::shape_string() const { return fmt::format("[{}x{}]", rows_, cols_); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------- Variable

Variable::Variable(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->id = next_node_id.fetch_add(1);
}

Variable Variable::from_node(std::shared_ptr<Node> node) {
  Variable v;
  v.node_ = std::move(node);
  return v;
}

const Tensor& Variable::value() const { return node_->value; }
Tensor& Variable::mutable_value() { return node_->value; }

double Variable::item() const {
  if (value().size() != 1) {
    throw ContractError(fmt::format("item() on non-scalar {}", value().shape_string()));
  }
  return value()[0];
}

bool Variable::requires_grad() const { return node_ && node_->requires_grad; }
bool Variable::has_grad() const { return node_ && !node_->grad.empty(); }
const Tensor& Variable::grad() const { return node_->grad; }
void Variable::zero_grad() { node_->grad = Tensor(); }

Variable Variable::detach() const { return Variable(value(), false); }

void Node::accumulate(const Tensor& g) {
  if (grad.empty()) {
    grad = g;
    return;
  }
  as_matrix(grad) += as_matrix(g);
}

NoGradGuard::NoGradGuard() : previous_(grad_mode) { grad_mode = false; }
NoGradGuard::~NoGradGuard() { grad_mode = previous_; }

bool grad_enabled() { return grad_mode; }

// ---------------------------------------------------------------- ops

Variable matmul(const Variable& a, const Variable& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError(fmt::format("matmul: inner dimensions disagree, {} x {}",
                                     av.shape_string(), bv.shape_string()));
  }
  Tensor out(av.rows(), bv.cols());
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node& lhs = *self.inputs[0];
    Node& rhs = *self.inputs[1];
    if (lhs.requires_grad) {
      Tensor g(lhs.value.rows(), lhs.value.cols());
      as_matrix(g).noalias() = as_matrix(self.grad) * as_matrix(rhs.value).transpose();
      lhs.accumulate(g);
    }
    if (rhs.requires_grad) {
      Tensor g(rhs.value.rows(), rhs.value.cols());
      as_matrix(g).noalias() = as_matrix(lhs.value).transpose() * as_matrix(self.grad);
      rhs.accumulate(g);
    }
  });
}

Variable add(const Variable& a, const Variable& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  as_matrix(out) += as_matrix(b.value());
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (in->requires_grad) in->accumulate(self.grad);
    }
  });
}

Variable sub(const Variable& a, const Variable& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  as_matrix(out) -= as_matrix(b.value());
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(self.grad);
    if (self.inputs[1]->requires_grad) {
      Tensor g = self.grad;
      as_matrix(g) *= -1.0;
      self.inputs[1]->accumulate(g);
    }
  });
}

Variable mul(const Variable& a, const Variable& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  as_matrix(out).array() *= as_matrix(b.value()).array();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node& lhs = *self.inputs[0];
    Node& rhs = *self.inputs[1];
    if (lhs.requires_grad) {
      Tensor g = self.grad;
      as_matrix(g).array() *= as_matrix(rhs.value).array();
      lhs.accumulate(g);
    }
    if (rhs.requires_grad) {
      Tensor g = self.grad;
      as_matrix(g).array() *= as_matrix(lhs.value).array();
      rhs.accumulate(g);
    }
  });
}

Variable add_row(const Variable& a, const Variable& r) {
  const Tensor& av = a.value();
  const Tensor& rv = r.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw DimensionError(fmt::format("add_row: cannot broadcast {} over {}", rv.shape_string(),
                                     av.shape_string()));
  }
  Tensor out = av;
  as_matrix(out).rowwise() += as_matrix(rv).row(0);
  return make_result(std::move(out), {a, r}, [](Node& self) {
    if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(self.grad);
    if (self.inputs[1]->requires_grad) {
      Tensor g(1, self.grad.cols());
      as_matrix(g).row(0) = as_matrix(self.grad).colwise().sum();
      self.inputs[1]->accumulate(g);
    }
  });
}

Variable mul_row(const Variable& a, const Variable& r) {
  const Tensor& av = a.value();
  const Tensor& rv = r.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw DimensionError(fmt::format("mul_row: cannot broadcast {} over {}", rv.shape_string(),
                                     av.shape_string()));
  }
  Tensor out = av;
  as_matrix(out).array().rowwise() *= as_matrix(rv).row(0).array();
  return make_result(std::move(out), {a, r}, [](Node& self) {
    Node& lhs = *self.inputs[0];
    Node& row = *self.inputs[1];
    if (lhs.requires_grad) {
      Tensor g = self.grad;
      as_matrix(g).array().rowwise() *= as_matrix(row.value).row(0).array();
      lhs.accumulate(g);
    }
    if (row.requires_grad) {
      Tensor g(1, self.grad.cols());
      as_matrix(g).row(0) =
          (as_matrix(self.grad).array() * as_matrix(lhs.value).array()).colwise().sum();
      row.accumulate(g);
    }
  });
}

Variable scale(const Variable& a, double c) {
  Tensor out = a.value();
  as_matrix(out) *= c;
  return make_result(std::move(out), {a}, [c](Node& self) {
    Tensor g = self.grad;
    as_matrix(g) *= c;
    self.inputs[0]->accumulate(g);
  });
}

Variable neg(const Variable& a) { return scale(a, -1.0); }

Variable relu(const Variable& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(out), {a}, [](Node& self) {
    const Tensor& in = self.inputs[0]->value;
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!(in[i] > 0.0)) g[i] = 0.0;
    }
    self.inputs[0]->accumulate(g);
  });
}

Variable sum(const Variable& a) {
  const double total = as_matrix(a.value()).sum();
  return make_result(Tensor::scalar(total), {a}, [](Node& self) {
    const Tensor& in = self.inputs[0]->value;
    self.inputs[0]->accumulate(Tensor(in.rows(), in.cols(), self.grad[0]));
  });
}

Variable mean(const Variable& a) {
  const auto n = static_cast<double>(a.value().size());
  if (n == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(a), 1.0 / n);
}

Variable normalize(const Variable& v, double eps) {
  const Tensor& in = v.value();
  if (in.rows() != 1) {
    throw DimensionError(fmt::format("normalize expects a row vector, got {}", in.shape_string()));
  }
  const double norm = as_matrix(in).norm();
  const double denom = norm + eps;
  Tensor out = in;
  as_matrix(out) /= denom;
  return make_result(std::move(out), {v}, [norm, denom](Node& self) {
    const Tensor& x = self.inputs[0]->value;
    // d(x/(|x|+eps)) = g/(|x|+eps) - x (x.g) / (|x| (|x|+eps)^2)
    Tensor g = self.grad;
    as_matrix(g) /= denom;
    if (norm > 0.0) {
      const double dot = as_matrix(x).row(0).dot(as_matrix(self.grad).row(0));
      as_matrix(g) -= as_matrix(x) * (dot / (norm * denom * denom));
    }
    self.inputs[0]->accumulate(g);
  });
}

Tensor softmax(const Tensor& logits, std::size_t num_valid) {
  const std::size_t valid = valid_columns(num_valid, logits.cols(), "softmax");
  Tensor out = log_softmax(logits, valid);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) {
      out(r, c) = c < valid ? std::exp(out(r, c)) : 0.0;
    }
  }
  return out;
}

Variable softmax_cross_entropy(const Variable& logits, std::span<const int> targets,
                               std::size_t num_valid) {
  const Tensor& in = logits.value();
  if (targets.size() != in.rows()) {
    throw DimensionError(fmt::format("softmax_cross_entropy: {} targets for logits {}",
                                     targets.size(), in.shape_string()));
  }
  if (in.rows() == 0) throw ContractError("softmax_cross_entropy on an empty batch");
  const std::size_t valid = valid_columns(num_valid, in.cols(), "softmax_cross_entropy");
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= valid) {
      throw IndexError(fmt::format("target class {} out of range [0, {})", t, valid));
    }
  }
  const Tensor logp = log_softmax(in, valid);
  double total = 0.0;
  for (std::size_t r = 0; r < in.rows(); ++r) total -= logp(r, static_cast<std::size_t>(targets[r]));
  const auto batch = static_cast<double>(in.rows());
  std::vector<int> labels(targets.begin(), targets.end());
  return make_result(Tensor::scalar(total / batch), {logits},
                     [logp, labels = std::move(labels), valid, batch](Node& self) {
                       const double upstream = self.grad[0] / batch;
                       Tensor g(logp.rows(), logp.cols(), 0.0);
                       for (std::size_t r = 0; r < g.rows(); ++r) {
                         for (std::size_t c = 0; c < valid; ++c) g(r, c) = std::exp(logp(r, c));
                         g(r, static_cast<std::size_t>(labels[r])) -= 1.0;
                         for (std::size_t c = 0; c < valid; ++c) g(r, c) *= upstream;
                       }
                       self.inputs[0]->accumulate(g);
                     });
}

Variable soft_cross_entropy(const Variable& logits, const Tensor& q, std::size_t num_valid) {
  const Tensor& in = logits.value();
  if (in.rows() == 0) throw ContractError("soft_cross_entropy on an empty batch");
  if (q.cols() != in.cols() || (q.rows() != 1 && q.rows() != in.rows())) {
    throw DimensionError(fmt::format("soft_cross_entropy: target {} for logits {}",
                                     q.shape_string(), in.shape_string()));
  }
  const std::size_t valid = valid_columns(num_valid, in.cols(), "soft_cross_entropy");
  const Tensor logp = log_softmax(in, valid);
  auto target = [&q](std::size_t r, std::size_t c) { return q.rows() == 1 ? q(0, c) : q(r, c); };
  double total = 0.0;
  for (std::size_t r = 0; r < in.rows(); ++r) {
    for (std::size_t c = 0; c < valid; ++c) total -= target(r, c) * logp(r, c);
  }
  const auto batch = static_cast<double>(in.rows());
  return make_result(Tensor::scalar(total / batch), {logits}, [logp, q, valid, batch](Node& self) {
    const double upstream = self.grad[0] / batch;
    Tensor g(logp.rows(), logp.cols(), 0.0);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const std::size_t qr = q.rows() == 1 ? 0 : r;
      double mass = 0.0;
      for (std::size_t c = 0; c < valid; ++c) mass += q(qr, c);
      for (std::size_t c = 0; c < valid; ++c) {
        g(r, c) = upstream * (std::exp(logp(r, c)) * mass - q(qr, c));
      }
    }
    self.inputs[0]->accumulate(g);
  });
}

Variable l2_distance(const Variable& a, const Variable& b) {
  require_same_shape(a.value(), b.value(), "l2_distance");
  const Tensor& av = a.value();
  if (av.rows() == 0) throw ContractError("l2_distance on an empty batch");
  Tensor diff = av;
  as_matrix(diff) -= as_matrix(b.value());
  std::vector<double> norms(av.rows());
  double total = 0.0;
  for (std::size_t r = 0; r < av.rows(); ++r) {
    norms[r] = as_matrix(diff).row(static_cast<Eigen::Index>(r)).norm();
    total += norms[r];
  }
  const auto batch = static_cast<double>(av.rows());
  return make_result(Tensor::scalar(total / batch), {a, b},
                     [diff, norms = std::move(norms), batch](Node& self) {
                       const double upstream = self.grad[0] / batch;
                       Tensor g(diff.rows(), diff.cols(), 0.0);
                       for (std::size_t r = 0; r < g.rows(); ++r) {
                         if (norms[r] == 0.0) continue;  // subgradient 0 at coincidence
                         for (std::size_t c = 0; c < g.cols(); ++c) {
                           g(r, c) = upstream * diff(r, c) / norms[r];
                         }
                       }
                       if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(g);
                       if (self.inputs[1]->requires_grad) {
                         as_matrix(g) *= -1.0;
                         self.inputs[1]->accumulate(g);
                       }
                     });
}

Variable select_rows(const Variable& a, std::span<const std::size_t> rows) {
  const Tensor& in = a.value();
  Tensor out(rows.size(), in.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= in.rows()) {
      throw IndexError(fmt::format("select_rows: row {} of {}", rows[i], in.shape_string()));
    }
    std::copy_n(in.row(rows[i]).begin(), in.cols(), out.row(i).begin());
  }
  std::vector<std::size_t> index(rows.begin(), rows.end());
  return make_result(std::move(out), {a}, [index = std::move(index)](Node& self) {
    const Tensor& in = self.inputs[0]->value;
    Tensor g(in.rows(), in.cols(), 0.0);
    for (std::size_t i = 0; i < index.size(); ++i) {
      auto src = self.grad.row(i);
      auto dst = g.row(index[i]);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
    self.inputs[0]->accumulate(g);
  });
}

Variable concat_rows(std::span<const Variable> parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw DimensionError(fmt::format("concat_rows: {} next to {}", p.value().shape_string(),
                                       parts.front().value().shape_string()));
    }
    rows += p.rows();
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(offset * cols));
    offset += p.rows();
  }
  std::vector<Variable> inputs(parts.begin(), parts.end());
  return make_result(std::move(out), std::move(inputs), [](Node& self) {
    std::size_t offset = 0;
    const std::size_t cols = self.grad.cols();
    for (auto& in : self.inputs) {
      const std::size_t n = in->value.rows();
      if (in->requires_grad) {
        Tensor g(n, cols);
        auto first = self.grad.data().begin() + static_cast<std::ptrdiff_t>(offset * cols);
        std::copy(first, first + static_cast<std::ptrdiff_t>(n * cols), g.data().begin());
        in->accumulate(g);
      }
      offset += n;
    }
  });
}

// ---------------------------------------------------------------- backward

void backward(const Variable& loss) {
  if (!loss.defined() || loss.value().size() != 1) {
    throw ContractError(fmt::format("backward needs a scalar loss, got {}",
                                    loss.defined() ? loss.value().shape_string() : "nothing"));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<Node*> stack{loss.node()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!visited.insert(n).second) continue;
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id > b->id; });

  for (Node* n : order) {
    if (!n->is_leaf()) n->grad = Tensor();
  }
  loss.node()->accumulate(Tensor::scalar(1.0));
  for (Node* n : order) {
    if (n->is_leaf() || n->grad.empty()) continue;
    n->backward(*n);
  }
  // Interior gradients are scratch; release them with the graph.
  for (Node* n : order) {
    if (!n->is_leaf() && n != loss.node()) n->grad = Tensor();
  }
}

void sgd_step(std::span<Variable> params, double lr) {
  if (!(lr > 0.0)) throw ContractError(fmt::format("learning rate must be positive, got {}", lr));
  for (const auto& p : params) {
    if (!p.has_grad()) throw ContractError("sgd_step on a parameter without a gradient");
  }
  for (auto& p : params) {
    as_matrix(p.mutable_value()) -= lr * as_matrix(p.grad());
    p.zero_grad();
  }
}

void zero_grad(std::span<Variable> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace scale::ad
