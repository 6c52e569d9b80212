#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "gsa/error.hpp"
#include "gsa/numerics/graph.hpp"
#include "gsa/numerics/tensor.hpp"

namespace gsa {

/// Builds a scalar loss from bound parameter handles and an input handle.
template <class T>
using LossBuilder = std::function<Var(Graph<T>&, const std::vector<Var>& params, Var input)>;

template <class T>
struct GradientResult {
  T loss{};
  std::vector<Tensor<T>> params;
  Tensor<T> input;
};

/// Reverse-mode gradients of the loss w.r.t. every parameter and the input.
template <class T>
GradientResult<T> reverse_gradient(const LossBuilder<T>& build,
                                   const std::vector<Tensor<T>>& params, const Tensor<T>& input) {
  Graph<T> g;
  std::vector<Var> pv;
  pv.reserve(params.size());
  for (const auto& p : params) pv.push_back(g.leaf(p, true));
  const Var x = g.leaf(input, true);
  const Var loss = build(g, pv, x);
  if (g.value(loss).size() != 1) {
    throw Error(ErrorCode::kShape, "loss node #" + std::to_string(loss.id) + " (" + g.op(loss) +
                                       ") is not scalar: " + shape_str(g.shape(loss)));
  }
  g.backward(loss);
  GradientResult<T> out;
  out.loss = g.value(loss)[0];
  for (std::size_t i = 0; i < pv.size(); ++i) {
    out.params.push_back(g.has_grad(pv[i]) ? g.grad(pv[i]) : Tensor<T>(params[i].shape()));
  }
  out.input = g.has_grad(x) ? g.grad(x) : Tensor<T>(input.shape());
  return out;
}

struct FiniteDifference {
  double value = 0.0;
  /// False when the +h and -h evaluations took different branches through a
  /// piecewise-linear op, so the difference quotient straddles a kink.
  bool smooth = true;
};

namespace detail {

template <class T>
std::pair<T, std::uint64_t> evaluate_loss(const LossBuilder<T>& build,
                                          const std::vector<Tensor<T>>& params,
                                          const Tensor<T>& input) {
  Graph<T> g;
  g.set_track_decisions(true);
  std::vector<Var> pv;
  pv.reserve(params.size());
  for (const auto& p : params) pv.push_back(g.leaf(p, false));
  const Var x = g.leaf(input, false);
  const Var loss = build(g, pv, x);
  return {g.value(loss).item(), g.decision_signature()};
}

inline void check_step(double h) {
  if (!(h >= 1e-6 && h <= 1e-4)) {
    throw Error(ErrorCode::kInvalidArgument,
                "finite-difference step " + std::to_string(h) + " outside [1e-6, 1e-4]");
  }
}

}  // namespace detail

/// Central difference (f(p+h) - f(p-h)) / 2h for one component.
/// `which` selects a parameter index, or -1 for the input tensor.
template <class T>
  requires(sizeof(T) >= 8)
FiniteDifference finite_difference_component(const LossBuilder<T>& build,
                                             std::vector<Tensor<T>> params, Tensor<T> input,
                                             std::ptrdiff_t which, std::size_t index, double h) {
  detail::check_step(h);
  Tensor<T>& target = which < 0 ? input : params.at(static_cast<std::size_t>(which));
  if (index >= target.size()) {
    throw Error(ErrorCode::kInvalidArgument, "component index out of range");
  }
  const T orig = target[index];
  target[index] = orig + static_cast<T>(h);
  const auto [fp, sp] = detail::evaluate_loss(build, params, input);
  target[index] = orig - static_cast<T>(h);
  const auto [fm, sm] = detail::evaluate_loss(build, params, input);
  target[index] = orig;
  const auto [f0, s0] = detail::evaluate_loss(build, params, input);
  (void)f0;
  FiniteDifference out;
  out.value = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * h);
  out.smooth = sp == s0 && sm == s0;
  return out;
}

/// Full numeric gradient by central differences. 64-bit (or wider) types only.
template <class T>
  requires(sizeof(T) >= 8)
GradientResult<T> finite_difference_oracle(const LossBuilder<T>& build,
                                           const std::vector<Tensor<T>>& params,
                                           const Tensor<T>& input, double h) {
  detail::check_step(h);
  GradientResult<T> out;
  out.loss = detail::evaluate_loss(build, params, input).first;
  std::vector<Tensor<T>> work = params;
  Tensor<T> xin = input;
  auto probe = [&](Tensor<T>& target, Tensor<T>& result) {
    result = Tensor<T>(target.shape());
    for (std::size_t i = 0; i < target.size(); ++i) {
      const T orig = target[i];
      target[i] = orig + static_cast<T>(h);
      const T fp = detail::evaluate_loss(build, work, xin).first;
      target[i] = orig - static_cast<T>(h);
      const T fm = detail::evaluate_loss(build, work, xin).first;
      target[i] = orig;
      result[i] = static_cast<T>((fp - fm) / (2.0 * h));
    }
  };
  out.params.resize(work.size());
  for (std::size_t p = 0; p < work.size(); ++p) probe(work[p], out.params[p]);
  probe(xin, out.input);
  return out;
}

}  // namespace gsa
