#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace promptlab::core {

// Dense row-major f64 tensor. Copies are shallow handles onto shared
// storage; the gradient buffer and the trainable flag live in the storage so
// every handle agrees on them.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, bool requires_grad = false);

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);  // rank 0

  bool defined() const { return storage_ != nullptr; }
  const std::vector<int>& shape() const;
  int rank() const;
  int dim(int axis) const;
  size_t size() const;

  double* data();
  const double* data() const;
  double& at(size_t flat_index);
  double at(size_t flat_index) const;
  double item() const;  // value of a size-1 tensor

  bool requires_grad() const;
  void set_requires_grad(bool value);  // allocates/releases the grad buffer
  double* grad();
  const double* grad() const;
  void zero_grad();

  // Deep copy of the data only (fresh storage, requires_grad false).
  Tensor clone() const;
  bool same_storage(const Tensor& other) const {
    return storage_ == other.storage_;
  }

  std::string shape_str() const;  // e.g. "[3x4]"

 private:
  struct Storage {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty unless requires_grad
    bool requires_grad = false;
  };

  std::shared_ptr<Storage> storage_;
};

size_t shape_size(const std::vector<int>& shape);

// Reverse-mode tape. Ops append one node per recorded operation; inputs are
// always recorded before the nodes that consume them, so running the nodes
// once in reverse order propagates gradients topologically. A tape is
// single-use: it belongs to exactly one forward pass.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn) { nodes_.push_back(std::move(fn)); }

  // Seeds d(loss)/d(loss) = 1 and runs every node once, newest first.
  // Throws ProtocolError on a second call without a fresh forward pass.
  void backward(const Tensor& loss);

  size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<BackwardFn> nodes_;
  bool consumed_ = false;
};

}  // namespace promptlab::core
