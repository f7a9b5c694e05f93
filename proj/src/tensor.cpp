#include "motionpred/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "motionpred/error.hpp"

namespace motionpred {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::string g_scope;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

NdValue::NdValue(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0) {}

NdValue::NdValue(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_numel(shape)) {
    throw ShapeError("NdValue: " + std::to_string(data.size()) + " values for shape " +
                     shape_str(shape));
  }
}

std::size_t NdValue::rows() const { return shape.size() >= 2 ? shape[0] : 1; }

std::size_t NdValue::cols() const {
  if (shape.empty()) return 1;
  if (shape.size() == 1) return shape[0];
  return data.size() / shape[0];
}

Tensor Tensor::leaf(NdValue value, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->scope = g_scope;
  return Tensor(std::move(node));
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  return leaf(NdValue(std::move(shape), std::move(values)), false);
}

Tensor Tensor::zeros(Shape shape) { return leaf(NdValue(std::move(shape)), false); }

Tensor Tensor::scalar(double v) { return leaf(NdValue({1}, {v}), false); }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value.data[0];
}

Tensor make_op(const char* op, NdValue out, std::vector<Tensor> inputs, detail::BackwardFn fn) {
  for (double v : out.data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op +
                         (g_scope.empty() ? "" : " in " + g_scope));
    }
  }
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(out);
  node->op = op;
  node->scope = g_scope;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_);
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& out) {
  if (!out.defined() || out.numel() != 1) {
    throw ShapeError("backward requires a scalar output, got " +
                     (out.defined() ? shape_str(out.shape()) : std::string("undefined")));
  }
  const detail::Node* root = out.node_ptr().get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(out.node_ptr().get(), 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<const detail::Node*, std::vector<double>> grads;
  grads.reserve(order.size());
  grads[root] = std::vector<double>(1, 1.0);

  std::vector<std::vector<double>*> slots;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    std::vector<double> g = std::move(found->second);
    grads.erase(found);

    if (node->inputs.empty()) {
      // Leaf: accumulate into the persistent buffer.
      auto& buf = node->value.grad;
      if (!buf) {
        buf = std::move(g);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) (*buf)[i] += g[i];
      }
      continue;
    }

    slots.assign(node->inputs.size(), nullptr);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      detail::Node* in = node->inputs[i].get();
      if (!in->requires_grad) continue;
      auto& slot = grads[in];
      if (slot.empty()) slot.assign(in->value.numel(), 0.0);
      slots[i] = &slot;
    }
    node->backward(*node, g, slots);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

NameScope::NameScope(const std::string& name) : previous_size_(g_scope.size()) {
  if (!g_scope.empty()) g_scope += '.';
  g_scope += name;
}
NameScope::~NameScope() { g_scope.resize(previous_size_); }

const std::string& current_scope() { return g_scope; }

}  // namespace motionpred
