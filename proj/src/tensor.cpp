#include "memlong/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "memlong/errors.hpp"

namespace memlong {

struct Tensor::Impl {
  Shape shape;
  std::shared_ptr<std::vector<float>> values;
  std::shared_ptr<std::vector<float>> grad;
  bool requires_grad = false;
};

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<float>(static_cast<size_t>(n), value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                     " values");
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->values = std::make_shared<std::vector<float>>(std::move(values));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!impl_) throw ShapeError("use of undefined tensor");
  return impl_->shape;
}

int64_t Tensor::dim(int axis) const {
  const Shape& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[static_cast<size_t>(axis)];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(impl_ ? impl_->values->size() : 0); }

std::span<float> Tensor::data() {
  if (!impl_) throw ShapeError("use of undefined tensor");
  return {impl_->values->data(), impl_->values->size()};
}

std::span<const float> Tensor::data() const {
  if (!impl_) throw ShapeError("use of undefined tensor");
  return {impl_->values->data(), impl_->values->size()};
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return data()[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!impl_) throw ShapeError("use of undefined tensor");
  impl_->requires_grad = value;
  if (!value) impl_->grad.reset();
}

bool Tensor::has_grad() const { return impl_ && impl_->grad != nullptr; }

std::span<const float> Tensor::grad() const {
  if (!has_grad()) return {};
  return {impl_->grad->data(), impl_->grad->size()};
}

std::span<float> Tensor::ensure_grad() const {
  if (!impl_) throw ShapeError("use of undefined tensor");
  if (!impl_->grad) impl_->grad = std::make_shared<std::vector<float>>(impl_->values->size(), 0.0f);
  return {impl_->grad->data(), impl_->grad->size()};
}

void Tensor::clear_grad() {
  if (impl_) impl_->grad.reset();
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<Impl>();
  impl->shape = shape();
  impl->values = std::make_shared<std::vector<float>>(*impl_->values);
  return Tensor(std::move(impl));
}

Tensor Tensor::view(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("cannot view " + shape_str(shape()) + " as " + shape_str(new_shape));
  }
  auto impl = std::make_shared<Impl>(*impl_);
  impl->shape = std::move(new_shape);
  // The view must see gradients accumulated through the original and vice versa.
  if (!impl_->grad && impl_->requires_grad) {
    impl_->grad = std::make_shared<std::vector<float>>(impl_->values->size(), 0.0f);
    impl->grad = impl_->grad;
  }
  return Tensor(std::move(impl));
}

void check_finite(const Tensor& t, std::string_view where) {
  const auto values = t.data();
  const bool ok = std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
  if (!ok) throw NumericalError("non-finite value produced by " + std::string(where));
}

void Tape::record(BackwardFn fn) {
  if (consumed_) throw std::logic_error("recording on a tape whose backward pass already ran; call reset()");
  entries_.push_back(std::move(fn));
}

void Tape::backward(Tensor& loss) {
  if (consumed_) throw std::logic_error("backward called twice on the same tape");
  if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw std::logic_error("loss does not depend on any trainable tensor");
  consumed_ = true;
  loss.ensure_grad()[0] += 1.0f;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
}

void Tape::reset() {
  entries_.clear();
  consumed_ = false;
}

bool needs_grad(const Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t != nullptr && t->defined() && t->requires_grad(); });
}

}  // namespace memlong
