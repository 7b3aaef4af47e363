#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace memlong {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

// Dense row-major float32 tensor with an optional gradient buffer.
//
// Copies are shallow: two Tensor handles can refer to the same storage. Ops
// never write into their inputs, so a tensor is immutable once its producing
// op returns (parameters are the exception; the optimizer updates them in
// place between steps).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t dim(int axis) const;
  int64_t rank() const { return static_cast<int64_t>(shape().size()); }
  int64_t numel() const;
  // Leading dimension; the remaining ones are flattened by row-wise ops.
  int64_t rows() const { return dim(0); }
  int64_t row_size() const { return rows() == 0 ? 0 : numel() / rows(); }

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;
  float at(int64_t flat_index) const { return data()[static_cast<size_t>(flat_index)]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const float> grad() const;
  // Allocates a zero-filled gradient buffer if absent. Handles are shallow,
  // so this is available on const handles.
  std::span<float> ensure_grad() const;
  void clear_grad();

  // Deep copy of the values; the result carries no gradient.
  Tensor clone() const;
  // Same storage viewed with a different shape of equal element count.
  // Gradients written through the view land in the shared buffer.
  Tensor view(Shape shape) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<Impl> impl_;
};

// Throws NumericalError naming `where` if any value is NaN or infinite.
void check_finite(const Tensor& t, std::string_view where);

// Ordered record of executed differentiable ops. Each op registers a closure
// that reads its output gradient and accumulates into its inputs. Entries are
// appended in execution order, so replaying them in reverse is a valid
// reverse topological order.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(BackwardFn fn);
  // Seeds d(loss)/d(loss)=1 and runs every recorded closure in reverse.
  // A tape supports exactly one backward pass until reset().
  void backward(Tensor& loss);
  void reset();

  bool consumed() const { return consumed_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<BackwardFn> entries_;
  bool consumed_ = false;
};

// True when an op on these inputs must be recorded on `tape`.
bool needs_grad(const Tape* tape, std::initializer_list<const Tensor*> inputs);

}  // namespace memlong
