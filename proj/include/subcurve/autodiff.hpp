// Reverse-mode automatic differentiation over dense tensors: a recorded
// forward graph per batch, backward passes seeded either at the loss or at a
// single logit, and finite-difference oracles for cross-checking.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "subcurve/linalg.hpp"
#include "subcurve/model.hpp"

namespace subcurve {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  static Tensor matrix(std::size_t r, std::size_t c, double fill = 0.0) {
    Tensor t;
    t.shape = {r, c};
    t.data.assign(r * c, fill);
    return t;
  }
  static Tensor zeros_like(const Tensor& other) {
    Tensor t;
    t.shape = other.shape;
    t.data.assign(other.data.size(), 0.0);
    return t;
  }

  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }
  std::size_t size() const { return data.size(); }
  bool is_finite() const {
    for (double x : data)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

struct ForwardError : std::runtime_error {
  explicit ForwardError(const std::string& where)
      : std::runtime_error("non-finite values in forward pass at " + where),
        layer(where) {}
  std::string layer;
};

enum class OpKind { input, affine, relu, softmax_xent };

struct Node {
  OpKind kind = OpKind::input;
  int input = -1;  // producing node, -1 for the input node
  int layer = -1;  // affine only
  Tensor value;
  Tensor adjoint;
  // softmax_xent extras
  Tensor labels;              // one-hot, B x C
  Tensor probs;               // B x C
  Vector example_loss;        // length B
  double mean_loss = 0.0;
};

// One forward recording over a batch (rows are independent examples).
// Adjoints are zeroed at the start of every backward pass; each pass visits
// nodes exactly once in reverse topological order.
class Graph {
 public:
  Graph(const ModelSpec& spec, const ParamVector& params, Tensor inputs)
      : spec_(&spec), params_(&params), layout_(spec) {
    spec.validate();
    if (params.size() != layout_.total())
      throw std::invalid_argument("Graph: parameter size mismatch");
    if (inputs.cols() != spec.input_dim())
      throw std::invalid_argument("Graph: input width mismatch");

    Node in;
    in.kind = OpKind::input;
    in.value = std::move(inputs);
    if (!in.value.is_finite()) throw ForwardError("input");
    nodes_.push_back(std::move(in));

    int prev = 0;
    for (std::size_t l = 0; l < layout_.layer_count(); ++l) {
      prev = push_affine(prev, l);
      const bool hidden = l + 1 < layout_.layer_count();
      if (hidden && spec.activation == Activation::relu)
        prev = push_relu(prev, l);
    }
    logits_id_ = prev;
  }

  const Tensor& logits() const { return nodes_[logits_id_].value; }
  std::size_t batch_size() const { return nodes_.front().value.rows(); }

  /// Adds the fused softmax + cross-entropy head (numerically stable
  /// log-sum-exp form). Its backward adjoint at the logits is (p - y) scaled
  /// by the incoming loss adjoint / batch size.
  void attach_loss(Tensor one_hot) {
    if (loss_id_ >= 0) throw std::logic_error("Graph: loss already attached");
    const Tensor& z = nodes_[logits_id_].value;
    if (one_hot.rows() != z.rows() || one_hot.cols() != z.cols())
      throw std::invalid_argument("attach_loss: label shape mismatch");

    Node head;
    head.kind = OpKind::softmax_xent;
    head.input = logits_id_;
    head.labels = std::move(one_hot);
    head.probs = Tensor::zeros_like(z);
    head.example_loss.assign(z.rows(), 0.0);
    const std::size_t batch = z.rows(), classes = z.cols();
    for (std::size_t i = 0; i < batch; ++i) {
      double zmax = z.at(i, 0);
      for (std::size_t k = 1; k < classes; ++k) zmax = std::max(zmax, z.at(i, k));
      double sum = 0.0;
      for (std::size_t k = 0; k < classes; ++k) sum += std::exp(z.at(i, k) - zmax);
      const double lse = zmax + std::log(sum);
      double label_logit = 0.0;
      for (std::size_t k = 0; k < classes; ++k) {
        head.probs.at(i, k) = std::exp(z.at(i, k) - lse);
        label_logit += head.labels.at(i, k) * z.at(i, k);
      }
      head.example_loss[i] = lse - label_logit;
    }
    double total = 0.0;
    for (double v : head.example_loss) total += v;
    head.mean_loss = total / static_cast<double>(batch);
    head.value.shape = {1};
    head.value.data = {head.mean_loss};
    if (!head.probs.is_finite() || !std::isfinite(head.mean_loss))
      throw ForwardError("softmax-xent head");
    nodes_.push_back(std::move(head));
    loss_id_ = static_cast<int>(nodes_.size()) - 1;
  }

  const Node& loss_node() const {
    if (loss_id_ < 0) throw std::logic_error("Graph: no loss attached");
    return nodes_[loss_id_];
  }

  /// d(mean loss)/d(params); one reverse sweep seeded with adjoint 1 at the
  /// loss node.
  ParamVector backward_from_loss() {
    const Node& head = loss_node();
    zero_adjoints();
    nodes_[loss_id_].adjoint.shape = {1};
    nodes_[loss_id_].adjoint.data = {1.0};
    (void)head;
    return run_backward();
  }

  /// d(logits[row, k])/d(params); seeds adjoint 1 on one logit coordinate.
  ParamVector backward_from_logit(std::size_t row, std::size_t k) {
    const Tensor& z = nodes_[logits_id_].value;
    if (row >= z.rows())
      throw std::invalid_argument("backward_from_logit: row out of range");
    if (k >= z.cols())
      throw std::invalid_argument("backward_from_logit: class out of range");
    zero_adjoints();
    nodes_[logits_id_].adjoint.at(row, k) = 1.0;
    return run_backward();
  }

 private:
  int push_affine(int input, std::size_t layer) {
    const Tensor& x = nodes_[input].value;
    const std::size_t batch = x.rows();
    const std::size_t in_w = layout_.in_width(layer);
    const std::size_t out_w = layout_.out_width(layer);
    const auto w = layout_.weights(*params_, layer);
    const auto b = layout_.biases(*params_, layer);

    Node node;
    node.kind = OpKind::affine;
    node.input = input;
    node.layer = static_cast<int>(layer);
    node.value = Tensor::matrix(batch, out_w);
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t o = 0; o < out_w; ++o) {
        double s = b[o];
        const double* wrow = w.data() + o * in_w;
        for (std::size_t j = 0; j < in_w; ++j) s += wrow[j] * x.at(i, j);
        node.value.at(i, o) = s;
      }
    }
    if (!node.value.is_finite())
      throw ForwardError("affine layer " + std::to_string(layer));
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int push_relu(int input, std::size_t layer) {
    Node node;
    node.kind = OpKind::relu;
    node.input = input;
    node.layer = static_cast<int>(layer);
    node.value = nodes_[input].value;
    for (double& x : node.value.data) x = std::max(x, 0.0);
    if (!node.value.is_finite())
      throw ForwardError("relu layer " + std::to_string(layer));
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void zero_adjoints() {
    for (Node& node : nodes_) node.adjoint = Tensor::zeros_like(node.value);
  }

  ParamVector run_backward() {
    ParamVector grad(layout_.total(), 0.0);
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
      Node& node = nodes_[id];
      switch (node.kind) {
        case OpKind::input:
          break;
        case OpKind::softmax_xent: {
          const double seed = node.adjoint.data[0];
          if (seed == 0.0) break;
          Tensor& zadj = nodes_[node.input].adjoint;
          const double inv_batch = seed / static_cast<double>(node.probs.rows());
          for (std::size_t i = 0; i < node.probs.rows(); ++i)
            for (std::size_t k = 0; k < node.probs.cols(); ++k)
              zadj.at(i, k) +=
                  inv_batch * (node.probs.at(i, k) - node.labels.at(i, k));
          break;
        }
        case OpKind::relu: {
          const Tensor& pre = nodes_[node.input].value;
          Tensor& xadj = nodes_[node.input].adjoint;
          // subgradient 0 at exactly 0
          for (std::size_t i = 0; i < pre.data.size(); ++i)
            if (pre.data[i] > 0.0) xadj.data[i] += node.adjoint.data[i];
          break;
        }
        case OpKind::affine: {
          const std::size_t layer = static_cast<std::size_t>(node.layer);
          const Tensor& x = nodes_[node.input].value;
          Tensor& xadj = nodes_[node.input].adjoint;
          const std::size_t batch = x.rows();
          const std::size_t in_w = layout_.in_width(layer);
          const std::size_t out_w = layout_.out_width(layer);
          const auto w = layout_.weights(*params_, layer);
          double* gw = grad.data() + layout_.weight_offset(layer);
          double* gb = grad.data() + layout_.bias_offset(layer);
          for (std::size_t i = 0; i < batch; ++i) {
            for (std::size_t o = 0; o < out_w; ++o) {
              const double g = node.adjoint.at(i, o);
              if (g == 0.0) continue;
              gb[o] += g;
              double* gwrow = gw + o * in_w;
              const double* wrow = w.data() + o * in_w;
              for (std::size_t j = 0; j < in_w; ++j) {
                gwrow[j] += g * x.at(i, j);
                xadj.at(i, j) += g * wrow[j];
              }
            }
          }
          break;
        }
      }
    }
    return grad;
  }

  const ModelSpec* spec_;
  const ParamVector* params_;
  ParamLayout layout_;
  std::vector<Node> nodes_;
  int logits_id_ = -1;
  int loss_id_ = -1;
};

struct BatchForward {
  Tensor logits;       // B x C
  Tensor probs;        // B x C, rows sum to 1
  Tensor labels;       // B x C one-hot
  Vector per_example_loss;
  double mean_loss = 0.0;
};

inline Tensor one_hot_labels(const std::vector<std::size_t>& labels,
                             std::size_t class_count) {
  Tensor t = Tensor::matrix(labels.size(), class_count);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= class_count)
      throw std::invalid_argument("one_hot_labels: label out of range");
    t.at(i, labels[i]) = 1.0;
  }
  return t;
}

inline BatchForward forward_batch(const ModelSpec& spec, const ParamVector& params,
                                  const Tensor& inputs, const Tensor& one_hot) {
  if (inputs.rows() == 0)
    throw std::invalid_argument("forward_batch: empty batch");
  Graph graph(spec, params, inputs);
  graph.attach_loss(one_hot);
  const Node& head = graph.loss_node();
  BatchForward out;
  out.logits = graph.logits();
  out.probs = head.probs;
  out.labels = head.labels;
  out.per_example_loss = head.example_loss;
  out.mean_loss = head.mean_loss;
  return out;
}

/// Mean-loss gradient g^B over the batch.
inline ParamVector loss_gradient(const ModelSpec& spec, const ParamVector& params,
                                 const Tensor& inputs, const Tensor& one_hot) {
  Graph graph(spec, params, inputs);
  graph.attach_loss(one_hot);
  return graph.backward_from_loss();
}

/// d z_k / d params for one example; one backward pass over one forward graph.
inline ParamVector logit_gradient(const ModelSpec& spec, const ParamVector& params,
                                  const Vector& example, std::size_t k) {
  Tensor x = Tensor::matrix(1, example.size());
  x.data = example;
  Graph graph(spec, params, std::move(x));
  return graph.backward_from_logit(0, k);
}

/// All C logit gradients of one example: one forward pass, C backward passes
/// over the same graph.
inline std::vector<ParamVector> logit_gradients_all(const ModelSpec& spec,
                                                    const ParamVector& params,
                                                    const Vector& example) {
  Tensor x = Tensor::matrix(1, example.size());
  x.data = example;
  Graph graph(spec, params, std::move(x));
  std::vector<ParamVector> grads;
  grads.reserve(spec.class_count());
  for (std::size_t k = 0; k < spec.class_count(); ++k)
    grads.push_back(graph.backward_from_logit(0, k));
  return grads;
}

/// Per-example, per-class logit gradients for a whole batch, indexed
/// [example][class]. Rows are independent, so each example gets its own
/// forward graph and C backward passes.
inline std::vector<std::vector<ParamVector>> batch_logit_gradients(
    const ModelSpec& spec, const ParamVector& params, const Tensor& inputs) {
  std::vector<std::vector<ParamVector>> grads(inputs.rows());
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    Vector x(inputs.cols());
    for (std::size_t j = 0; j < inputs.cols(); ++j) x[j] = inputs.at(i, j);
    grads[i] = logit_gradients_all(spec, params, x);
  }
  return grads;
}

constexpr double kDefaultFdStep = 1e-5;
constexpr std::size_t kDenseHessianCap = 4000;

/// Central-difference gradient of an arbitrary scalar function. Accuracy is
/// limited to roughly 1e-7 in smooth regions at the default step.
inline Vector fd_gradient(const std::function<double(const Vector&)>& f,
                          Vector theta, double h = kDefaultFdStep) {
  if (!(h > 0.0)) throw std::invalid_argument("fd_gradient: h must be positive");
  Vector grad(theta.size(), 0.0);
  for (std::size_t a = 0; a < theta.size(); ++a) {
    const double saved = theta[a];
    theta[a] = saved + h;
    const double fp = f(theta);
    theta[a] = saved - h;
    const double fm = f(theta);
    theta[a] = saved;
    grad[a] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

inline Vector fd_gradient(const ModelSpec& spec, const ParamVector& params,
                          const Tensor& inputs, const Tensor& one_hot,
                          double h = kDefaultFdStep) {
  return fd_gradient(
      [&](const Vector& theta) {
        return forward_batch(spec, theta, inputs, one_hot).mean_loss;
      },
      params, h);
}

/// Symmetrized central differences of a gradient function.
inline DenseMatrix fd_hessian(const std::function<Vector(const Vector&)>& grad_fn,
                              Vector theta, double h = kDefaultFdStep) {
  if (!(h > 0.0)) throw std::invalid_argument("fd_hessian: h must be positive");
  const std::size_t n = theta.size();
  DenseMatrix hess(n, n);
  for (std::size_t a = 0; a < n; ++a) {
    const double saved = theta[a];
    theta[a] = saved + h;
    const Vector gp = grad_fn(theta);
    theta[a] = saved - h;
    const Vector gm = grad_fn(theta);
    theta[a] = saved;
    for (std::size_t b = 0; b < n; ++b)
      hess(a, b) = (gp[b] - gm[b]) / (2.0 * h);
  }
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) {
      const double s = 0.5 * (hess(a, b) + hess(b, a));
      hess(a, b) = hess(b, a) = s;
    }
  return hess;
}

inline DenseMatrix fd_hessian(const ModelSpec& spec, const ParamVector& params,
                              const Tensor& inputs, const Tensor& one_hot,
                              double h = kDefaultFdStep,
                              std::size_t max_dense_dim = kDenseHessianCap) {
  if (params.size() > max_dense_dim)
    throw std::invalid_argument(
        "fd_hessian: parameter count " + std::to_string(params.size()) +
        " exceeds the dense cap " + std::to_string(max_dense_dim) +
        "; use the low-rank Hessian-vector product instead");
  return fd_hessian(
      [&](const Vector& theta) {
        return loss_gradient(spec, theta, inputs, one_hot);
      },
      params, h);
}

}  // namespace subcurve
