#include "burstmamba/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace burstmamba {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  for (auto e : shape) {
    if (e < 1) throw ShapeError("tensor: extents must be >= 1, got " + shape_str(shape));
  }
}

}  // namespace

namespace autograd {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool all_finite(std::span<const float> values) {
  for (float v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

bool all_finite(std::span<const double> values) {
  for (double v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

template <class T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                           const std::vector<BasicTensor<T>>& inputs, BackwardFn<T> backward) {
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
    throw ShapeError(std::string(op) + ": internal size mismatch for shape " + shape_str(shape));
  }
  if (!all_finite(std::span<const T>(data))) {
    throw NumericError(std::string(op) + ": non-finite output");
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  if (grad_enabled() && backward) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return BasicTensor<T>(std::move(node));
}

template <class T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                           std::initializer_list<BasicTensor<T>> inputs, BackwardFn<T> backward) {
  return make_result<T>(op, std::move(shape), std::move(data),
                        std::vector<BasicTensor<T>>(inputs), std::move(backward));
}

template <class T>
Tape<T> Tape<T>::record(const BasicTensor<T>& loss) {
  Tape tape;
  if (!loss.defined()) return tape;
  // Iterative post-order DFS; parents are emitted before children.
  std::unordered_set<const Node<T>*> seen;
  std::vector<std::pair<const Node<T>*, std::size_t>> stack;
  const Node<T>* root = loss.node().get();
  if (!root->requires_grad) return tape;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

template <class T>
bool Tape<T>::is_topological() const {
  std::unordered_map<const Node<T>*, std::size_t> pos;
  for (std::size_t i = 0; i < nodes_.size(); ++i) pos[nodes_[i]] = i;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    for (const auto& p : nodes_[i]->parents) {
      auto it = pos.find(p.get());
      if (it != pos.end() && it->second >= i) return false;
    }
  }
  return true;
}

namespace {

// Runs the reverse sweep; `sink` receives every leaf gradient.
template <class T, class Sink>
void run_backward(const BasicTensor<T>& loss, Sink&& sink) {
  if (!loss.defined()) throw Error("backward: undefined loss");
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw Error("backward: loss is detached from any leaf requiring grad");

  const auto tape = Tape<T>::record(loss);
  std::unordered_map<const Node<T>*, std::vector<T>> grads;
  grads[loss.node().get()] = std::vector<T>(1, T(1));

  const auto& nodes = tape.nodes();
  std::vector<std::vector<T>*> slots;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    const Node<T>* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    if (node->is_leaf()) {
      sink(node, found->second);
      grads.erase(found);
      continue;
    }
    std::vector<T> grad_out = std::move(found->second);
    grads.erase(found);
    slots.assign(node->parents.size(), nullptr);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      const Node<T>* parent = node->parents[i].get();
      if (!parent->requires_grad) continue;
      auto& g = grads[parent];
      if (g.empty()) g.assign(parent->data.size(), T(0));
      slots[i] = &g;
    }
    node->backward(*node, grad_out, std::span<std::vector<T>* const>(slots));
  }
}

}  // namespace

}  // namespace autograd

template <class T>
void backward(const BasicTensor<T>& loss) {
  autograd::run_backward<T>(loss, [](const autograd::Node<T>* leaf, const std::vector<T>& g) {
    auto* mut = const_cast<autograd::Node<T>*>(leaf);
    if (mut->grad.empty()) {
      mut->grad = g;
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) mut->grad[i] += g[i];
    }
  });
}

template <class T>
std::vector<std::vector<T>> gradients(const BasicTensor<T>& loss,
                                      const std::vector<BasicTensor<T>>& wrt) {
  std::unordered_map<const autograd::Node<T>*, std::size_t> index;
  std::vector<std::vector<T>> out(wrt.size());
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    out[i].assign(static_cast<std::size_t>(wrt[i].numel()), T(0));
    index.emplace(wrt[i].node().get(), i);
  }
  autograd::run_backward<T>(loss, [&](const autograd::Node<T>* leaf, const std::vector<T>& g) {
    auto it = index.find(leaf);
    if (it == index.end()) return;
    auto& dst = out[it->second];
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
  return out;
}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) {
  validate_shape(shape);
  node_ = std::make_shared<autograd::Node<T>>();
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  node_->shape = std::move(shape);
  node_->data.assign(n, fill);
}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data) {
  validate_shape(shape);
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
    throw ShapeError("tensor: " + std::to_string(data.size()) + " values do not fill shape " +
                     shape_str(shape));
  }
  node_ = std::make_shared<autograd::Node<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

template <class T>
void BasicTensor<T>::require_defined() const {
  if (!node_) throw Error("tensor: use of undefined tensor");
}

template <class T>
const Shape& BasicTensor<T>::shape() const {
  require_defined();
  return node_->shape;
}

template <class T>
std::int64_t BasicTensor<T>::dim(std::int64_t axis) const {
  const auto& s = shape();
  const auto r = static_cast<std::int64_t>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[static_cast<std::size_t>(axis)];
}

template <class T>
std::span<const T> BasicTensor<T>::data() const {
  require_defined();
  return node_->data;
}

template <class T>
std::span<T> BasicTensor<T>::mutable_data() {
  require_defined();
  return node_->data;
}

template <class T>
const std::vector<T>& BasicTensor<T>::vec() const& {
  require_defined();
  return node_->data;
}

template <class T>
T BasicTensor<T>::item() const {
  require_defined();
  if (node_->data.size() != 1) {
    throw ShapeError("item: tensor is not a scalar, shape " + shape_str(node_->shape));
  }
  return node_->data[0];
}

template <class T>
T BasicTensor<T>::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("at: rank mismatch for " + shape_str(s));
  std::int64_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i < 0 || i >= s[k]) throw ShapeError("at: index out of range for " + shape_str(s));
    flat = flat * s[k] + i;
    ++k;
  }
  return node_->data[static_cast<std::size_t>(flat)];
}

template <class T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool on) {
  require_defined();
  if (!node_->is_leaf()) throw Error("set_requires_grad: only leaves can be marked");
  node_->requires_grad = on;
  return *this;
}

template <class T>
std::span<const T> BasicTensor<T>::grad() const {
  require_defined();
  return node_->grad;
}

template <class T>
void BasicTensor<T>::zero_grad() {
  if (node_) node_->grad.clear();
}

template <class T>
BasicTensor<T> BasicTensor<T>::detach() const {
  require_defined();
  return BasicTensor<T>(node_->shape, node_->data);
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class autograd::Tape<float>;
template class autograd::Tape<double>;

#define BM_INSTANTIATE_CORE(T)                                                                   \
  template BasicTensor<T> autograd::make_result<T>(const char*, Shape, std::vector<T>,           \
                                                   std::initializer_list<BasicTensor<T>>,        \
                                                   autograd::BackwardFn<T>);                     \
  template BasicTensor<T> autograd::make_result<T>(const char*, Shape, std::vector<T>,           \
                                                   const std::vector<BasicTensor<T>>&,           \
                                                   autograd::BackwardFn<T>);                     \
  template void backward<T>(const BasicTensor<T>&);                                              \
  template std::vector<std::vector<T>> gradients<T>(const BasicTensor<T>&,                       \
                                                    const std::vector<BasicTensor<T>>&);

BM_INSTANTIATE_CORE(float)
BM_INSTANTIATE_CORE(double)

}  // namespace burstmamba
