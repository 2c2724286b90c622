#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace oraclesage {

using Shape = std::vector<std::size_t>;
using NodeId = std::int64_t;
inline constexpr NodeId kNoNode = -1;

class Tape;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major tensor of doubles.
///
/// Copies share storage; operations always produce fresh storage, so a
/// tensor's values only change through mutable_values() (parameter updates).
/// A tensor produced while a Tape is active carries a node handle into it.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_->size(); }
  /// Extent of axis 0 (a rank-1 tensor is treated as one row).
  std::size_t rows() const noexcept { return shape_.size() == 1 ? 1 : shape_[0]; }
  /// Extent of the last axis.
  std::size_t cols() const noexcept { return shape_.back(); }

  std::span<const double> values() const noexcept { return *data_; }
  /// In-place access; only parameters and freshly built tensors should use this.
  std::span<double> mutable_values() noexcept { return *data_; }
  std::vector<double> to_vector() const { return *data_; }

  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }
  double item() const;

  bool requires_grad() const noexcept { return requires_grad_; }
  Tensor& set_requires_grad(bool on) noexcept {
    requires_grad_ = on;
    return *this;
  }

  NodeId node() const noexcept { return node_; }
  const Tape* tape() const noexcept { return tape_; }

  bool shares_storage(const Tensor& other) const noexcept { return data_ == other.data_; }
  const std::vector<double>* storage_key() const noexcept { return data_.get(); }
  std::shared_ptr<const std::vector<double>> storage() const noexcept { return data_; }

  /// Same values, no tape node, no gradient tracking.
  Tensor detach() const;
  /// Deep copy of the values, no tape node.
  Tensor clone() const;
  /// Same storage viewed under another shape with equal element count.
  Tensor reshaped(Shape shape) const;

 private:
  friend class Tape;
  friend Tensor make_result(std::string_view, Shape, std::vector<double>,
                            std::span<const Tensor* const>,
                            std::function<void(Tape&, NodeId, const std::vector<NodeId>&)>);

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  bool requires_grad_ = false;
  NodeId node_ = kNoNode;
  const Tape* tape_ = nullptr;
};

/// Ordered record of differentiable operations for one forward pass.
///
/// Gradients live on the tape, keyed by node handle, so several tapes on
/// different threads can read the same parameter storage concurrently.
class Tape {
 public:
  using Backward = std::function<void(Tape&, NodeId out, const std::vector<NodeId>& in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Node for `t` on this tape: its own node, a (memoized) leaf when it
  /// requires grad, or kNoNode for constants.
  NodeId node_of(const Tensor& t);
  NodeId add_node(std::size_t numel);
  void record(NodeId out, std::vector<NodeId> inputs, Backward fn);

  /// Reverse sweep from a scalar loss. May be called once per tape.
  void backward(const Tensor& loss);

  /// Gradient buffer for a node, zero-initialized on first access.
  std::span<double> grad(NodeId id);
  bool has_grad(NodeId id) const;

  /// Gradient with respect to `t` (zeros when `t` was not reached).
  Tensor grad_of(const Tensor& t) const;

  std::size_t num_nodes() const noexcept { return node_sizes_.size(); }
  std::size_t num_records() const noexcept { return records_.size(); }
  std::size_t last_backward_visits() const noexcept { return visits_; }

 private:
  struct Record {
    NodeId output;
    std::vector<NodeId> inputs;
    Backward fn;
  };

  std::vector<std::size_t> node_sizes_;
  std::vector<std::vector<double>> grads_;
  std::vector<Record> records_;
  std::unordered_map<const std::vector<double>*, NodeId> leaves_;
  bool done_ = false;
  std::size_t visits_ = 0;
};

/// The tape operations record onto for the current thread, or null.
Tape* active_tape() noexcept;

/// Makes a tape active on this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) noexcept;
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording on this thread (inference, discrete decisions).
class NoGradScope {
 public:
  NoGradScope() noexcept;
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

/// Builds an operation result, checks it is finite, and records the
/// backward rule on the active tape when any input is tracked.
Tensor make_result(std::string_view op, Shape shape, std::vector<double> values,
                   std::span<const Tensor* const> inputs,
                   std::function<void(Tape&, NodeId, const std::vector<NodeId>&)> backward);

}  // namespace oraclesage
