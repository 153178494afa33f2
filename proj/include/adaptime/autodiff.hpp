#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "adaptime/tensor.hpp"

namespace adaptime {

// A trainable tensor plus its accumulated gradient.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value)
      : name(std::move(name)), value(std::move(value)), grad(Tensor::zeros_like(this->value)) {}

  void zero_grad() { grad = Tensor::zeros_like(value); }

  std::string name;
  Tensor value;
  Tensor grad;
};

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Per-backward-pass gradient storage, lazily zero-allocated per node.
class GradientBuffer {
 public:
  GradientBuffer(const Tape& tape);

  Tensor& at(std::size_t id);
  bool wants(std::size_t id) const;
  bool has(std::size_t id) const { return allocated_[id]; }
  const Tensor& get(std::size_t id) const { return grads_[id]; }

 private:
  const Tape& tape_;
  std::vector<Tensor> grads_;
  std::vector<bool> allocated_;
};

// Reverse-mode record. Nodes are appended in evaluation order, so the node
// vector is already a topological order and backward walks it in reverse.
class Tape {
 public:
  using Backward =
      std::function<void(const Tape& tape, const Tensor& grad_out, GradientBuffer& grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Registering the same parameter twice returns the same leaf.
  Var parameter(Parameter& parameter);
  // Read-only binding: the value enters as a constant and receives no gradient.
  Var frozen(const Parameter& parameter);

  // Adds d(loss)/d(parameter) into every registered parameter's grad buffer.
  // The tape itself is not modified, so calling it twice is reproducible.
  void backward(const Var& loss) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Appends an op result. Throws kNumeric if the value is not finite.
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
             Backward backward);
  Var record(std::string_view op, Tensor value, std::span<const Var> inputs, Backward backward);

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    Backward backward;
    Parameter* parameter = nullptr;
  };

  std::deque<Node> nodes_;  // stable references: Var::value() survives later records
  std::unordered_map<const Parameter*, std::size_t> parameter_ids_;
  std::unordered_map<const Parameter*, std::size_t> frozen_ids_;
};

inline Var bind(Tape& tape, Parameter& p) { return tape.parameter(p); }
inline Var bind(Tape& tape, const Parameter& p) { return tape.frozen(p); }

// ---- primitive ops -------------------------------------------------------
//
// Elementwise binary ops broadcast in two dimensions: a scalar, a row vector
// (or 1xC matrix) or an Rx1 column is stretched to the other operand's shape.

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);

Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);

Var gather_rows(const Var& table, std::span<const std::uint32_t> indices);

Var sum(const Var& a);
Var sum(const Var& a, std::size_t axis);
Var mean(const Var& a);
Var mean(const Var& a, std::size_t axis);

Var concat(std::span<const Var> parts, std::size_t axis);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);

inline constexpr double kLayerNormEpsilon = 1e-5;
// Normalises each row to zero mean and unit variance (no gain or bias).
Var layer_norm(const Var& a, double epsilon = kLayerNormEpsilon);

enum class PoolMode { kMean, kSum };
// Output row r pools the source rows listed in segments[r]; an empty segment
// yields a zero row that receives no gradient.
Var pool_rows(const Var& source, const std::vector<std::vector<std::size_t>>& segments,
              PoolMode mode);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator+(const Var& a, double s) { return add_scalar(a, s); }
inline Var operator-(const Var& a, double s) { return add_scalar(a, -s); }

// Scalar helpers shared with the embedding/loss code.
double stable_softplus(double x);
double stable_sigmoid(double x);

}  // namespace adaptime
