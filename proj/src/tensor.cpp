#include "oraclesage/tensor.hpp"

#include <cmath>
#include <sstream>

#include "oraclesage/errors.hpp"

namespace oraclesage {

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor() : shape_{1}, data_(std::make_shared<std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(std::move(values))) {
  if (shape_.empty()) throw DimensionError("tensor shape must have at least one axis");
  for (auto e : shape_) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
  }
  if (shape_numel(shape_) != data_->size()) {
    throw DimensionError("shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_->size()) + " values");
  }
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(shape_));
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor out;
  out.shape_ = shape_;
  out.data_ = data_;
  return out;
}

Tensor Tensor::clone() const { return Tensor(shape_, *data_); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

// ---------------------------------------------------------------------------

NodeId Tape::node_of(const Tensor& t) {
  if (t.tape_ == this && t.node_ != kNoNode) return t.node_;
  if (!t.requires_grad_) return kNoNode;
  auto it = leaves_.find(t.storage_key());
  if (it != leaves_.end()) return it->second;
  const NodeId id = add_node(t.numel());
  leaves_.emplace(t.storage_key(), id);
  return id;
}

NodeId Tape::add_node(std::size_t numel) {
  node_sizes_.push_back(numel);
  grads_.emplace_back();
  return static_cast<NodeId>(node_sizes_.size() - 1);
}

void Tape::record(NodeId out, std::vector<NodeId> inputs, Backward fn) {
  if (done_) throw ContractError("cannot record onto a tape after backward()");
  records_.push_back(Record{out, std::move(inputs), std::move(fn)});
}

std::span<double> Tape::grad(NodeId id) {
  auto& g = grads_.at(static_cast<std::size_t>(id));
  if (g.empty()) g.assign(node_sizes_[static_cast<std::size_t>(id)], 0.0);
  return g;
}

bool Tape::has_grad(NodeId id) const {
  return id >= 0 && static_cast<std::size_t>(id) < grads_.size() &&
         !grads_[static_cast<std::size_t>(id)].empty();
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  if (loss.tape() != this || loss.node() == kNoNode) {
    throw ContractError("backward() loss is not on this tape");
  }
  if (done_) throw ContractError("backward() called twice on one tape");
  done_ = true;
  visits_ = 0;
  grad(loss.node())[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!has_grad(it->output)) continue;
    ++visits_;
    it->fn(*this, it->output, it->inputs);
  }
}

Tensor Tape::grad_of(const Tensor& t) const {
  NodeId id = kNoNode;
  if (t.tape() == this && t.node() != kNoNode) {
    id = t.node();
  } else if (auto it = leaves_.find(t.storage_key()); it != leaves_.end()) {
    id = it->second;
  }
  if (!has_grad(id)) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), grads_[static_cast<std::size_t>(id)]);
}

Tape* active_tape() noexcept { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) noexcept : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() noexcept : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tensor make_result(std::string_view op, Shape shape, std::vector<double> values,
                   std::span<const Tensor* const> inputs,
                   std::function<void(Tape&, NodeId, const std::vector<NodeId>&)> backward) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(op));
    }
  }
  Tensor out(std::move(shape), std::move(values));
  Tape* tape = g_active_tape;
  if (!tape || !backward) return out;
  std::vector<NodeId> ids;
  ids.reserve(inputs.size());
  bool tracked = false;
  for (const Tensor* in : inputs) {
    ids.push_back(tape->node_of(*in));
    tracked = tracked || ids.back() != kNoNode;
  }
  if (!tracked) return out;
  out.node_ = tape->add_node(out.numel());
  out.tape_ = tape;
  tape->record(out.node_, std::move(ids), std::move(backward));
  return out;
}

}  // namespace oraclesage
