#include "promptlab/core/tensor.hpp"

#include <algorithm>

#include "promptlab/core/error.hpp"

namespace promptlab::core {

size_t shape_size(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dimension must be positive");
    n *= static_cast<size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape, bool requires_grad) {
  const size_t n = shape_size(shape);
  storage_ = std::make_shared<Storage>();
  storage_->shape = std::move(shape);
  storage_->data.assign(n, 0.0);
  if (requires_grad) {
    storage_->requires_grad = true;
    storage_->grad.assign(n, 0.0);
  }
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return Tensor(std::move(shape), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::fill(t.storage_->data.begin(), t.storage_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> values,
                         bool requires_grad) {
  const size_t n = shape_size(shape);
  if (values.size() != n) {
    throw ShapeError("from_data: got " + std::to_string(values.size()) +
                     " values for a shape of " + std::to_string(n));
  }
  Tensor t;
  t.storage_ = std::make_shared<Storage>();
  t.storage_->shape = std::move(shape);
  t.storage_->data = std::move(values);
  if (requires_grad) {
    t.storage_->requires_grad = true;
    t.storage_->grad.assign(n, 0.0);
  }
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  Tensor t;
  t.storage_ = std::make_shared<Storage>();
  t.storage_->shape = {};
  t.storage_->data.assign(1, value);
  if (requires_grad) {
    t.storage_->requires_grad = true;
    t.storage_->grad.assign(1, 0.0);
  }
  return t;
}

const std::vector<int>& Tensor::shape() const { return storage_->shape; }

int Tensor::rank() const { return static_cast<int>(storage_->shape.size()); }

int Tensor::dim(int axis) const { return storage_->shape.at(axis); }

size_t Tensor::size() const { return storage_->data.size(); }

double* Tensor::data() { return storage_->data.data(); }
const double* Tensor::data() const { return storage_->data.data(); }

double& Tensor::at(size_t flat_index) { return storage_->data.at(flat_index); }
double Tensor::at(size_t flat_index) const {
  return storage_->data.at(flat_index);
}

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item() on tensor of size " + std::to_string(size()));
  }
  return storage_->data[0];
}

bool Tensor::requires_grad() const {
  return storage_ && storage_->requires_grad;
}

void Tensor::set_requires_grad(bool value) {
  if (!storage_) throw ValueError("set_requires_grad on undefined tensor");
  if (value && !storage_->requires_grad) {
    storage_->grad.assign(storage_->data.size(), 0.0);
  }
  if (!value) storage_->grad.clear();
  storage_->requires_grad = value;
}

double* Tensor::grad() {
  return storage_->requires_grad ? storage_->grad.data() : nullptr;
}
const double* Tensor::grad() const {
  return storage_->requires_grad ? storage_->grad.data() : nullptr;
}

void Tensor::zero_grad() {
  if (storage_ && storage_->requires_grad) {
    std::fill(storage_->grad.begin(), storage_->grad.end(), 0.0);
  }
}

Tensor Tensor::clone() const {
  Tensor t;
  t.storage_ = std::make_shared<Storage>();
  t.storage_->shape = storage_->shape;
  t.storage_->data = storage_->data;
  return t;
}

std::string Tensor::shape_str() const {
  if (!storage_) return "[undefined]";
  std::string s = "[";
  for (size_t i = 0; i < storage_->shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(storage_->shape[i]);
  }
  return s + "]";
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) {
    throw ProtocolError(
        "tape already consumed: backward() requires a fresh forward pass");
  }
  consumed_ = true;
  if (loss.size() != 1) {
    throw ShapeError("backward() expects a scalar loss, got " +
                     loss.shape_str());
  }
  if (!loss.requires_grad()) {
    throw ValueError("backward() on a loss that does not require gradients");
  }
  Tensor seed = loss;
  seed.grad()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

}  // namespace promptlab::core
