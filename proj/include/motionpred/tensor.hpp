#pragma once

// Define-by-run reverse-mode differentiation over dense 64-bit arrays.
//
// Every op evaluates eagerly and, while gradient recording is enabled and at
// least one input requires a gradient, records a closure that maps the
// output gradient onto its inputs. `backward` walks the recorded graph in
// reverse topological order and accumulates into leaf `grad` buffers.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace motionpred {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array with an optional gradient buffer of the same length.
struct NdValue {
  Shape shape;
  std::vector<double> data;
  std::optional<std::vector<double>> grad;

  NdValue() = default;
  explicit NdValue(Shape s);
  NdValue(Shape s, std::vector<double> values);

  std::size_t numel() const { return data.size(); }
  /// Leading dimension for rank-2 values, 1 for vectors and scalars.
  std::size_t rows() const;
  /// Trailing dimension (1 for scalars).
  std::size_t cols() const;
};

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(const Node& self, std::span<const double> grad_out,
                                      std::span<std::vector<double>* const> grad_in)>;

struct Node {
  NdValue value;
  const char* op = "leaf";
  std::string scope;
  std::vector<NodePtr> inputs;
  BackwardFn backward;
  bool requires_grad = false;
};

}  // namespace detail

/// Handle to a graph node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(NdValue value, bool requires_grad = false);
  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape);
  static Tensor scalar(double v);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  std::size_t numel() const { return node_->value.numel(); }
  std::span<const double> data() const { return node_->value.data; }
  std::span<double> mutable_data() { return node_->value.data; }
  const NdValue& value() const { return node_->value; }
  NdValue& value() { return node_->value; }
  double item() const;
  double at(std::size_t r, std::size_t c) const { return node_->value.data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  const std::optional<std::vector<double>>& grad() const { return node_->value.grad; }
  void clear_grad() { node_->value.grad.reset(); }

  const char* op() const { return node_->op; }
  const detail::NodePtr& node_ptr() const { return node_; }

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  detail::NodePtr node_;

  friend Tensor make_op(const char* op, NdValue out, std::vector<Tensor> inputs,
                        detail::BackwardFn fn);
};

/// Builds an op node. `fn` is dropped when recording is off or no input
/// requires a gradient. Rejects non-finite outputs, naming the op and scope.
Tensor make_op(const char* op, NdValue out, std::vector<Tensor> inputs, detail::BackwardFn fn);

/// Seeds d(out)/d(out) = 1 and accumulates gradients into every reachable
/// leaf that requires one. `out` must hold exactly one element.
void backward(const Tensor& out);

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Pushes a dotted name component used in error messages ("vae.enc_start.l0").
class NameScope {
 public:
  explicit NameScope(const std::string& name);
  ~NameScope();
  NameScope(const NameScope&) = delete;
  NameScope& operator=(const NameScope&) = delete;

 private:
  std::size_t previous_size_;
};

const std::string& current_scope();

}  // namespace motionpred
