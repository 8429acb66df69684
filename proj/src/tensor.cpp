// SPDX-License-Identifier: Apache-2.0
#include "covt/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "covt/error.hpp"

namespace covt {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class TapeState : public std::enable_shared_from_this<TapeState> {
 public:
  struct Node {
    const char* op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    autograd::BackwardFn backward;
  };

  std::vector<Node> nodes;

  bool owns(const TensorImpl& t) const {
    return t.has_node && t.tape.lock().get() == this;
  }

  void backward(const Tensor& root) {
    const auto& r = *root.impl();
    if (!r.shape.empty()) {
      throw AutogradError("backward: root must be a scalar, got shape " + to_string(r.shape));
    }
    if (!r.requires_grad) return;
    if (!owns(r)) {
      throw AutogradError("backward: root is not attached to this tape");
    }
    for (auto& node : nodes) node.output->grad.assign(node.output->data.size(), 0.0);
    root.impl()->grad[0] = 1.0;

    std::vector<std::vector<double>*> sinks;
    for (std::size_t n = r.node + 1; n-- > 0;) {
      auto& node = nodes[n];
      sinks.clear();
      for (auto& in : node.inputs) {
        if (!in->requires_grad) {
          sinks.push_back(nullptr);
          continue;
        }
        if (in->grad.size() != in->data.size()) in->grad.assign(in->data.size(), 0.0);
        sinks.push_back(&in->grad);
      }
      node.backward(node.output->grad, sinks);
    }
  }
};

namespace {

thread_local TapeState* active_tape = nullptr;

}  // namespace

Tensor::Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
  if (numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + to_string(shape) + " needs " + std::to_string(numel(shape)) +
                     " values, got " + std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::normal(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng, bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

std::size_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(a)];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("at(): index rank mismatch for " + to_string(shape()));
  std::size_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i >= impl_->shape[k]) throw ShapeError("at(): index out of range for " + to_string(shape()));
    flat = flat * impl_->shape[k] + i;
    ++k;
  }
  return impl_->data[flat];
}

void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

Tensor Tensor::detach(bool requires_grad) const { return Tensor(shape(), impl_->data, requires_grad); }

Tape::Tape() : state_(std::make_shared<TapeState>()), previous_(active_tape) { active_tape = state_.get(); }

Tape::~Tape() { active_tape = previous_; }

void Tape::backward(const Tensor& root) { state_->backward(root); }

std::size_t Tape::size() const { return state_->nodes.size(); }

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(state_->nodes.size());
  for (const auto& n : state_->nodes) names.emplace_back(n.op);
  return names;
}

void backward(const Tensor& root) {
  const auto& r = *root.impl();
  if (!r.shape.empty()) {
    throw AutogradError("backward: root must be a scalar, got shape " + to_string(r.shape));
  }
  if (!r.requires_grad) return;
  auto tape = r.tape.lock();
  if (!r.has_node || !tape) throw AutogradError("backward: root is detached from any live tape");
  tape->backward(root);
}

namespace autograd {

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

bool needs_grad(std::span<const Tensor> inputs) {
  if (!active_tape) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

Tensor record(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
              BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!needs_grad(std::span<const Tensor>(inputs))) return out;

  auto& impl = *out.impl();
  impl.requires_grad = true;
  impl.tape = active_tape->weak_from_this();
  impl.node = active_tape->nodes.size();
  impl.has_node = true;

  TapeState::Node node{op, {}, out.impl(), std::move(backward)};
  node.inputs.reserve(inputs.size());
  for (auto& t : inputs) node.inputs.push_back(t.impl());
  active_tape->nodes.push_back(std::move(node));
  return out;
}

}  // namespace autograd

}  // namespace covt
