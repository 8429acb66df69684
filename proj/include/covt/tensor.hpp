// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace covt {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class TapeState;

/// Storage behind a Tensor handle. Shape and data are fixed at construction;
/// only the gradient buffer changes afterwards (parameters are the exception,
/// updated in place by the optimizer between tapes).
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;
  std::weak_ptr<TapeState> tape;
  std::size_t node = 0;
  bool has_node = false;
};

/// Dense row-major float64 tensor with optional gradient tracking.
///
/// Copies share storage, so a parameter handed to an op and the copy kept in a
/// parameter store see the same gradient buffer.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor normal(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad = false);
  static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                        bool requires_grad = false);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(int axis) const;
  std::size_t size() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad; }
  void zero_grad();
  /// Drops the gradient buffer so has_grad() is false again.
  void clear_grad() { impl_->grad.clear(); }

  /// Fresh tensor with a copy of the data and no tape attachment.
  Tensor detach(bool requires_grad = false) const;

  bool shares_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Gradient tape for one forward/backward pass.
///
/// Constructing a Tape makes it the active recorder on the current thread and
/// destroying it restores whichever tape was active before. Ops only record
/// when a tape is active and at least one input requires a gradient; with no
/// tape active every op runs in inference mode.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Reverse sweep from a scalar root. Leaf gradients accumulate across
  /// calls; intermediate gradients are reset at the start of every sweep.
  void backward(const Tensor& root);

  std::size_t size() const;
  std::vector<std::string> op_names() const;

 private:
  std::shared_ptr<TapeState> state_;
  TapeState* previous_;
};

/// Runs the reverse sweep on the tape that produced `root`.
void backward(const Tensor& root);

namespace autograd {

using GradSinks = std::span<std::vector<double>* const>;
using BackwardFn = std::function<void(std::span<const double> grad_out, GradSinks grad_in)>;

/// True when an op over `inputs` would be recorded on the active tape.
bool needs_grad(std::initializer_list<const Tensor*> inputs);
bool needs_grad(std::span<const Tensor> inputs);

/// Builds the op result and, when needed, appends a tape node. `backward`
/// receives one sink per input, null for inputs that need no gradient; sinks
/// are already sized and must be accumulated into, never overwritten.
Tensor record(const char* op, Shape shape, std::vector<double> data,
              std::vector<Tensor> inputs, BackwardFn backward);

}  // namespace autograd

}  // namespace covt
