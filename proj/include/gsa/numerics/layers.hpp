#pragma once

#include <string>
#include <utility>
#include <vector>

#include "gsa/numerics/graph.hpp"
#include "gsa/numerics/ops.hpp"
#include "gsa/numerics/params.hpp"
#include "gsa/numerics/rng.hpp"

// Building blocks shared by the two fixed architectures. A network is a pair of
// tensor sets: trainable parameters and non-trainable running buffers.
namespace gsa::nn {

enum class Mode { kTrain, kInference };

inline constexpr double kNormEps = 1e-5;
inline constexpr double kNormMomentum = 0.9;

template <class T>
void add_conv(TensorSet<T>& params, const std::string& name, std::size_t cin, std::size_t cout,
              std::size_t k, RngStream& rng, double gain = 1.0) {
  Tensor<T> w = he_normal<T>({cout, cin, k, k}, cin * k * k, rng);
  for (auto& v : w.values()) v = static_cast<T>(gain * v);
  params.add(name + ".w", std::move(w));
  params.add(name + ".b", Tensor<T>({cout}));
}

/// Upsampling by 2: weights (cin, cout, 2, 2).
template <class T>
void add_conv_transpose(TensorSet<T>& params, const std::string& name, std::size_t cin,
                        std::size_t cout, RngStream& rng) {
  params.add(name + ".w", he_normal<T>({cin, cout, 2, 2}, cin, rng));
  params.add(name + ".b", Tensor<T>({cout}));
}

template <class T>
void add_dense(TensorSet<T>& params, const std::string& name, std::size_t in, std::size_t out,
               RngStream& rng, double gain = 1.0) {
  Tensor<T> w = he_normal<T>({in, out}, in, rng);
  for (auto& v : w.values()) v = static_cast<T>(gain * v);
  params.add(name + ".w", std::move(w));
  params.add(name + ".b", Tensor<T>({out}));
}

template <class T>
void add_norm(TensorSet<T>& params, TensorSet<T>& buffers, const std::string& name,
              std::size_t c) {
  Tensor<T> one({c});
  one.fill(T(1));
  params.add(name + ".gamma", one);
  params.add(name + ".beta", Tensor<T>({c}));
  buffers.add(name + ".mean", Tensor<T>({c}));
  buffers.add(name + ".var", one);
}

/// One forward evaluation of a network on a graph. In training mode every
/// normalization layer uses batch statistics and records them for the caller.
template <class T>
class Forward {
 public:
  Forward(Graph<T>& g, const TensorSet<T>& params, const TensorSet<T>& buffers, Mode mode,
          bool params_require_grad)
      : g_(g), params_(params), buffers_(buffers), mode_(mode),
        vars_(bind(g, params, params_require_grad)) {}

  /// Uses handles already bound in `g`, in the order of `params`.
  Forward(Graph<T>& g, const TensorSet<T>& params, std::vector<Var> vars,
          const TensorSet<T>& buffers, Mode mode)
      : g_(g), params_(params), buffers_(buffers), mode_(mode), vars_(std::move(vars)) {}

  Graph<T>& graph() { return g_; }
  Mode mode() const { return mode_; }
  const std::vector<Var>& vars() const { return vars_; }
  Var param(const std::string& name) const { return vars_.at(params_.find(name)); }

  Var conv(Var x, const std::string& name, std::size_t pad) {
    return ops::conv2d(g_, x, param(name + ".w"), param(name + ".b"), pad);
  }

  Var up(Var x, const std::string& name) {
    return ops::conv_transpose2x2(g_, x, param(name + ".w"), param(name + ".b"));
  }

  Var dense(Var x, const std::string& name) {
    return ops::add_row_bias(g_, ops::matmul(g_, x, param(name + ".w")), param(name + ".b"));
  }

  Var norm(Var x, const std::string& name) {
    const Var gamma = param(name + ".gamma"), beta = param(name + ".beta");
    if (mode_ == Mode::kInference) {
      return ops::batch_norm_inference(g_, x, gamma, beta, buffers_.at(name + ".mean"),
                                       buffers_.at(name + ".var"), T(kNormEps));
    }
    ops::BatchStats<T> st;
    const Var y = ops::batch_norm(g_, x, gamma, beta, T(kNormEps), &st);
    stats_.emplace_back(name, std::move(st));
    return y;
  }

  const std::vector<std::pair<std::string, ops::BatchStats<T>>>& stats() const { return stats_; }

 private:
  Graph<T>& g_;
  const TensorSet<T>& params_;
  const TensorSet<T>& buffers_;
  Mode mode_;
  std::vector<Var> vars_;
  std::vector<std::pair<std::string, ops::BatchStats<T>>> stats_;
};

/// running <- momentum * running + (1 - momentum) * batch, per recorded layer.
template <class T>
void update_running(TensorSet<T>& buffers,
                    const std::vector<std::pair<std::string, ops::BatchStats<T>>>& stats) {
  const T m = static_cast<T>(kNormMomentum);
  for (const auto& [name, st] : stats) {
    Tensor<T>& mean = buffers.at(name + ".mean");
    Tensor<T>& var = buffers.at(name + ".var");
    for (std::size_t c = 0; c < mean.size(); ++c) {
      mean[c] = m * mean[c] + (T(1) - m) * st.mean[c];
      var[c] = m * var[c] + (T(1) - m) * st.var[c];
    }
  }
}

/// conv-norm-act, conv-norm, plus a 1x1 projection of the input, then act.
template <class T>
void add_residual(TensorSet<T>& params, TensorSet<T>& buffers, const std::string& name,
                  std::size_t cin, std::size_t cout, RngStream& rng) {
  add_conv(params, name + ".c1", cin, cout, 3, rng);
  add_norm(params, buffers, name + ".n1", cout);
  add_conv(params, name + ".c2", cout, cout, 3, rng);
  add_norm(params, buffers, name + ".n2", cout);
  add_conv(params, name + ".skip", cin, cout, 1, rng);
}

template <class T>
Var residual(Forward<T>& f, Var x, const std::string& name, T slope) {
  Graph<T>& g = f.graph();
  Var h = ops::leaky_relu(g, f.norm(f.conv(x, name + ".c1", 1), name + ".n1"), slope);
  h = f.norm(f.conv(h, name + ".c2", 1), name + ".n2");
  return ops::leaky_relu(g, ops::add(g, h, f.conv(x, name + ".skip", 0)), slope);
}

}  // namespace gsa::nn
