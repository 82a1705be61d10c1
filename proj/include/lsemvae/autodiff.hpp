#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include "lsemvae/rng.hpp"
#include "lsemvae/tensor.hpp"

namespace lsemvae {

/// Handle to a node on a Tape.
struct Var {
  static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
  std::uint32_t id = kNone;
  bool valid() const { return id != kNone; }
};

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order, so
/// the node list is always a topological order and the graph is acyclic by
/// construction. Leaves are constants, inputs (optionally differentiable) and
/// parameters, whose gradients accumulate into caller-owned sink tensors.
///
/// Every op computes its value eagerly. backward() walks the nodes in reverse
/// and only visits nodes that are reachable from the loss and require a
/// gradient, so frozen parameters and constant inputs cost nothing.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor<T> value);
  Var input(Tensor<T> value, bool requires_grad = false);
  /// `value` must outlive the tape. A null sink marks the parameter frozen.
  Var parameter(const Tensor<T>& value, Tensor<T>* grad_sink);

  const Tensor<T>& value(Var v) const;
  const Shape& shape(Var v) const { return value(v).shape; }
  std::size_t size(Var v) const { return value(v).size(); }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  /// Gradient reaching a non-sink node after backward(); empty if none did.
  const Tensor<T>& grad(Var v) const;
  std::string_view op_name(Var v) const { return nodes_.at(v.id).op; }
  std::size_t num_nodes() const { return nodes_.size(); }
  /// Hash of which side of its kink every relu and clamp input lies on. Two
  /// evaluations with equal patterns lie on the same smooth piece.
  std::uint64_t activation_pattern() const;

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var add_scalar(Var a, T c);
  Var mul_scalar(Var a, T c);
  /// a * s where s holds exactly one element.
  Var scale(Var a, Var s);
  Var exp(Var a);
  Var log(Var a);
  Var sqrt(Var a);
  Var square(Var a);
  Var relu(Var a);
  /// Gradient passes only where lo <= a <= hi.
  Var clamp(Var a, T lo, T hi);

  Var sum(Var a);
  Var mean(Var a);
  Var logsumexp(Var a);
  Var softmax(Var a);

  /// Flat concatenation; the result is 1-D.
  Var concat(std::span<const Var> parts);
  /// Flat slice [offset, offset + count); the result is 1-D.
  Var slice(Var a, std::size_t offset, std::size_t count);
  Var reshape(Var a, Shape shape);

  /// y = W x + b with W [out, in], x of any shape with `in` elements, b [out].
  Var dense(Var x, Var w, Var b);
  /// x [Cin, L], w [Cout, Cin, K], b [Cout] -> [Cout, (L + 2 pad - K) / stride + 1].
  Var conv1d(Var x, Var w, Var b, std::size_t stride, std::size_t pad);
  /// x [Cin, L], w [Cin, Cout, K], b [Cout] -> [Cout, (L - 1) stride - 2 pad + K].
  Var conv_transpose1d(Var x, Var w, Var b, std::size_t stride, std::size_t pad);
  /// Inverted dropout; the mask is drawn from `rng` now and replayed in backward.
  Var dropout(Var a, double rate, CounterRng& rng);

  /// Accumulates d(loss)/d(leaf) into parameter sinks and input gradients.
  /// Throws ContractError if the loss is not a single element.
  void backward(Var loss);

 private:
  using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    Tensor<T>* sink = nullptr;
    std::vector<std::uint32_t> inputs;
    std::vector<T> aux;
    BackwardFn backward;
    const char* op = "";
    bool requires_grad = false;
  };

  const Tensor<T>& val(std::uint32_t id) const;
  Tensor<T>& grad_buffer(std::uint32_t id);
  bool needs(std::uint32_t id) const { return nodes_[id].requires_grad; }
  Var push(const char* op, Tensor<T> value, std::vector<std::uint32_t> inputs, BackwardFn fn);
  void check_same_shape(const char* op, Var a, Var b) const;

  std::vector<Node> nodes_;
  Tensor<T> empty_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace lsemvae
