#include "digr/tensor.hpp"

#include "digr/ops.hpp"

#include <algorithm>
#include <atomic>
#include <queue>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace digr {

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> make_leaf(Shape shape, Array data) {
  if (numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " holds " +
                     std::to_string(numel(shape)) + " elements, got " +
                     std::to_string(data.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->seq = detail::next_sequence();
  return node;
}

}  // namespace

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

std::uint64_t detail::next_sequence() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed) + 1;
}

Tensor::Tensor(Shape shape, Array data) : node_(make_leaf(std::move(shape), std::move(data))) {}

Tensor Tensor::zeros(const Shape& shape) { return Tensor(shape, Array::Zero(digr::numel(shape))); }
Tensor Tensor::ones(const Shape& shape) { return Tensor(shape, Array::Ones(digr::numel(shape))); }
Tensor Tensor::full(const Shape& shape, double value) {
  return Tensor(shape, Array::Constant(digr::numel(shape), value));
}
Tensor Tensor::scalar(double value) { return Tensor({}, Array::Constant(1, value)); }

Tensor Tensor::from_vector(const Shape& shape, const std::vector<double>& values) {
  Array data = Eigen::Map<const Array>(values.data(), static_cast<Index>(values.size()));
  return Tensor(shape, std::move(data));
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("tensor: use of undefined tensor");
  return node_->shape;
}

Index Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(s));
  }
  return s[axis];
}

Index Tensor::numel() const { return array().size(); }

const Array& Tensor::array() const {
  if (!node_) throw std::logic_error("tensor: use of undefined tensor");
  return node_->data;
}

Array& Tensor::mutable_array() {
  if (!node_) throw std::logic_error("tensor: use of undefined tensor");
  if (node_->backward) throw std::logic_error("tensor: in-place write to a recorded result");
  return node_->data;
}

std::span<const double> Tensor::data() const {
  const Array& a = array();
  return {a.data(), static_cast<std::size_t>(a.size())};
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("tensor: item() needs one element, shape is " + to_string(shape()));
  }
  return array()[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (!node_) throw std::logic_error("tensor: use of undefined tensor");
  if (node_->backward && !value) {
    throw std::logic_error("tensor: cannot clear requires_grad on a recorded result");
  }
  node_->requires_grad = value;
  return *this;
}

bool Tensor::has_history() const { return node_ && static_cast<bool>(node_->backward); }

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

Tensor Tensor::detach() const { return Tensor(shape(), array()); }
Tensor Tensor::clone() const { return detach(); }

bool grad_mode_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }
GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

Tensor make_result(const char* op, Shape shape, Array data, std::vector<Tensor> inputs,
                   detail::BackwardFn backward) {
  if (!data.allFinite()) {
    bool inputs_finite = std::all_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
      return !t.defined() || t.array().allFinite();
    });
    if (inputs_finite) {
      throw NumericError(std::string(op) + ": non-finite result from finite inputs");
    }
    throw NumericError(std::string(op) + ": non-finite input");
  }
  auto node = make_leaf(std::move(shape), std::move(data));
  node->op = op;
  bool record = g_grad_enabled &&
                std::any_of(inputs.begin(), inputs.end(),
                            [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (record) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const Tensor& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt, bool create_graph) {
  if (output.numel() != 1) {
    throw ShapeError("grad: output must have one element, shape is " +
                     to_string(output.shape()));
  }
  using NodePtr = std::shared_ptr<detail::Node>;

  std::unordered_set<const detail::Node*> targets;
  for (const Tensor& t : wrt) targets.insert(t.node().get());

  // needed[n]: some wrt tensor is reachable from n through recorded inputs.
  std::unordered_map<const detail::Node*, bool> needed;
  {
    std::vector<std::pair<const detail::Node*, std::size_t>> stack;
    auto visit = [&](const detail::Node* n) {
      if (needed.count(n)) return;
      needed[n] = targets.count(n) > 0;
      stack.emplace_back(n, 0);
    };
    visit(output.node().get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->inputs.size() && n->backward) {
        const detail::Node* child = n->inputs[next++].get();
        if (child->requires_grad) visit(child);
        continue;
      }
      bool any = needed[n];
      if (n->backward) {
        for (const auto& in : n->inputs) {
          auto it = needed.find(in.get());
          if (it != needed.end() && it->second) any = true;
        }
      }
      needed[n] = any;
      stack.pop_back();
    }
  }

  GradModeGuard mode(create_graph);
  std::unordered_map<const detail::Node*, Tensor> grads;
  auto cmp = [](const NodePtr& a, const NodePtr& b) { return a->seq < b->seq; };
  std::priority_queue<NodePtr, std::vector<NodePtr>, decltype(cmp)> frontier(cmp);
  std::unordered_set<const detail::Node*> queued;

  if (needed[output.node().get()]) {
    grads[output.node().get()] = Tensor::ones(output.shape());
    frontier.push(output.node());
    queued.insert(output.node().get());
  }
  while (!frontier.empty()) {
    NodePtr node = frontier.top();
    frontier.pop();
    if (!node->backward) continue;
    Tensor grad_out = grads.at(node.get());
    Tensor self(node);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      const NodePtr& in = node->inputs[i];
      if (!in->requires_grad) continue;
      auto it = needed.find(in.get());
      if (it == needed.end() || !it->second) continue;
      Tensor g = node->backward(grad_out, self, i);
      if (!g.defined()) continue;
      auto slot = grads.find(in.get());
      if (slot == grads.end()) {
        grads.emplace(in.get(), g);
      } else {
        slot->second = add(slot->second, g);
      }
      if (queued.insert(in.get()).second) frontier.push(in);
    }
    // Intermediate gradients are no longer needed unless requested.
    if (!targets.count(node.get())) grads.erase(node.get());
  }

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (const Tensor& t : wrt) {
    auto it = grads.find(t.node().get());
    result.push_back(it != grads.end() ? it->second : Tensor::zeros(t.shape()));
  }
  return result;
}

}  // namespace digr
