#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace burstmamba {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised when an operation produces NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// File system failures (missing file, unwritable directory).
class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : Error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

namespace autograd {

template <class T>
struct Node;

// grad_in[i] is null when parent i does not need a gradient.
template <class T>
using BackwardFn = std::function<void(const Node<T>& self, const std::vector<T>& grad_out,
                                      std::span<std::vector<T>* const> grad_in)>;

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // accumulated on leaves only
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn<T> backward;

  bool is_leaf() const { return !backward; }
};

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace autograd

template <class T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<autograd::Node<T>>;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0));
  BasicTensor(Shape shape, std::vector<T> data);
  explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T(0)); }
  static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), T(1)); }
  static BasicTensor scalar(T value) { return BasicTensor(Shape{}, std::vector<T>{value}); }
  static BasicTensor from(Shape shape, std::initializer_list<T> values) {
    return BasicTensor(std::move(shape), std::vector<T>(values));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(data().size()); }

  std::span<const T> data() const;
  // Direct writes are only meaningful on leaves (parameters, inputs) between graph builds.
  std::span<T> mutable_data();
  const std::vector<T>& vec() const&;
  // a temporary hands out a copy so range-for over f(x).vec() stays valid
  std::vector<T> vec() && { return vec(); }
  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  BasicTensor& set_requires_grad(bool on);
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const;
  void zero_grad();

  BasicTensor detach() const;
  BasicTensor clone() const { return detach(); }

  template <class U>
  BasicTensor<U> cast() const {
    const auto& src = data();
    std::vector<U> out(src.begin(), src.end());
    return BasicTensor<U>(shape(), std::move(out));
  }

  const NodePtr& node() const { return node_; }

 private:
  void require_defined() const;
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

namespace autograd {

bool all_finite(std::span<const float> values);
bool all_finite(std::span<const double> values);

/// Builds an op result. Throws NumericError if any value is non-finite. The
/// backward closure is recorded only when recording is enabled and an input
/// requires a gradient.
template <class T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                           std::initializer_list<BasicTensor<T>> inputs, BackwardFn<T> backward);

template <class T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                           const std::vector<BasicTensor<T>>& inputs, BackwardFn<T> backward);

/// Topologically ordered record of the graph reachable from a loss.
template <class T>
class Tape {
 public:
  static Tape record(const BasicTensor<T>& loss);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<const Node<T>*>& nodes() const { return nodes_; }
  bool is_topological() const;

 private:
  std::vector<const Node<T>*> nodes_;
};

}  // namespace autograd

/// Accumulates d(loss)/d(leaf) into every leaf that requires a gradient.
template <class T>
void backward(const BasicTensor<T>& loss);

/// Returns d(loss)/d(w) for each requested leaf without touching leaf grads.
template <class T>
std::vector<std::vector<T>> gradients(const BasicTensor<T>& loss,
                                      const std::vector<BasicTensor<T>>& wrt);

}  // namespace burstmamba
