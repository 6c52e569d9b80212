#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "gsa/error.hpp"
#include "gsa/numerics/tensor.hpp"

namespace gsa {

/// Handle to a node of a Graph.
struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const noexcept { return id != kNone; }
};

/// Define-by-run tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is acyclic and already
/// topologically sorted; backward() walks it in reverse. Each node owns its value
/// and (when any ancestor requires a gradient) an accumulator of the same shape.
template <class T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, Var self)>;

  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var leaf(Tensor<T> value, bool requires_grad = true) {
    return push("leaf", std::move(value), requires_grad, nullptr);
  }

  Var constant(Tensor<T> value) { return push("constant", std::move(value), false, nullptr); }

  /// Appends a computed node. `backward` reads grad(self) and accumulates into inputs.
  Var emit(std::string op, Tensor<T> value, bool requires_grad, Backward backward) {
    return push(std::move(op), std::move(value), requires_grad, std::move(backward));
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  const Shape& shape(Var v) const { return nodes_.at(v.id).value.shape(); }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  const std::string& op(Var v) const { return nodes_.at(v.id).op; }

  /// Gradient accumulator for `v`, zero-initialized on first access.
  Tensor<T>& grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Identifier assigned to the next emitted node, for error messages.
  std::string next_name(const std::string& op) const {
    return "node #" + std::to_string(nodes_.size()) + " (" + op + ")";
  }

  void backward(Var loss) {
    const Node& root = nodes_.at(loss.id);
    if (root.value.size() != 1) {
      throw Error(ErrorCode::kShape, "backward from non-scalar node #" + std::to_string(loss.id) +
                                         " (" + root.op + ") of shape " +
                                         shape_str(root.value.shape()));
    }
    if (!root.requires_grad) return;
    grad(loss)[0] += T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, Var{i});
    }
  }

  // Piecewise-linear ops (rectifiers, max-pool) fold their branch choices into a
  // signature so a finite-difference probe can tell whether it crossed a kink.
  void set_track_decisions(bool on) noexcept { track_decisions_ = on; }
  bool tracking_decisions() const noexcept { return track_decisions_; }
  void record_decision(std::uint64_t bits) noexcept {
    signature_ = (signature_ ^ bits) * 0x100000001b3ULL + 0x9e3779b97f4a7c15ULL;
  }
  std::uint64_t decision_signature() const noexcept { return signature_; }

 private:
  Var push(std::string op, Tensor<T> value, bool requires_grad, Backward backward) {
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool track_decisions_ = false;
  std::uint64_t signature_ = 0;
};

}  // namespace gsa
