#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "gsa/error.hpp"
#include "gsa/numerics/graph.hpp"
#include "gsa/numerics/rng.hpp"
#include "gsa/numerics/tensor.hpp"

namespace gsa {

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

/// Ordered, named collection of tensors (trainable parameters or running buffers).
template <class T>
class TensorSet {
 public:
  std::size_t add(std::string name, Tensor<T> value) {
    if (index_.count(name)) {
      throw Error(ErrorCode::kInvalidArgument, "duplicate tensor name '" + name + "'");
    }
    index_.emplace(name, items_.size());
    items_.push_back({std::move(name), std::move(value)});
    return items_.size() - 1;
  }

  std::size_t size() const noexcept { return items_.size(); }
  NamedTensor<T>& operator[](std::size_t i) { return items_[i]; }
  const NamedTensor<T>& operator[](std::size_t i) const { return items_[i]; }

  Tensor<T>& at(const std::string& name) { return items_.at(find(name)).value; }
  const Tensor<T>& at(const std::string& name) const { return items_.at(find(name)).value; }

  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(ErrorCode::kNotFound, "no tensor named '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& it : items_) n += it.value.size();
    return n;
  }

  template <class U>
  TensorSet<U> cast() const {
    TensorSet<U> out;
    for (const auto& it : items_) out.add(it.name, it.value.template cast<U>());
    return out;
  }

  friend bool operator==(const TensorSet& a, const TensorSet& b) {
    if (a.items_.size() != b.items_.size()) return false;
    for (std::size_t i = 0; i < a.items_.size(); ++i) {
      if (a.items_[i].name != b.items_[i].name || !(a.items_[i].value == b.items_[i].value))
        return false;
    }
    return true;
  }

 private:
  std::vector<NamedTensor<T>> items_;
  std::map<std::string, std::size_t> index_;
};

/// Registers every tensor of `set` as a leaf of `g`, returning the handles in order.
template <class T>
std::vector<Var> bind(Graph<T>& g, const TensorSet<T>& set, bool requires_grad) {
  std::vector<Var> vars;
  vars.reserve(set.size());
  for (const auto& it : set) vars.push_back(g.leaf(it.value, requires_grad));
  return vars;
}

/// Collects the gradients of bound parameters; untouched parameters get zeros.
template <class T>
std::vector<Tensor<T>> collect_grads(Graph<T>& g, const TensorSet<T>& set,
                                     const std::vector<Var>& vars) {
  std::vector<Tensor<T>> grads;
  grads.reserve(vars.size());
  for (std::size_t i = 0; i < vars.size(); ++i) {
    grads.push_back(g.has_grad(vars[i]) ? g.grad(vars[i]) : Tensor<T>(set[i].value.shape()));
  }
  return grads;
}

/// He-normal initialization with fan-in `fan_in`.
template <class T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, RngStream& rng) {
  Tensor<T> t(std::move(shape));
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.values()) v = static_cast<T>(sd * rng.normal());
  return t;
}

}  // namespace gsa
